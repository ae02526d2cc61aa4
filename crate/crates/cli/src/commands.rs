use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use spotdiff::clustering::{BoundingBox, SalienceFeatures};
use spotdiff::corpus::{
    build_vocab, corpus_stats, extract_frame_pairs, load_annotations, split_by_video, tokenize, AnnotationRecord, DatasetSplit, VideoIdRule,
};
use spotdiff::decoder::Vocabulary;
use spotdiff::encoder::{encode_pair, DEFAULT_FEATURE_DIM};
use spotdiff::imaging::{ImagePair, RgbImage, Shift};
use spotdiff::inference::{alignment_precision, decode_multi, decode_single, predict_alignment, NnIndex};
use spotdiff::metrics::score_corpus;
use spotdiff::pipeline::{cluster_pair, PreparedPair};
use spotdiff::synthetic::{generate_corpus, SynthConfig};
use spotdiff::training::checkpoint::{load_checkpoint, save_checkpoint};
use spotdiff::training::{perplexity, train, ModelConfig, TrainConfig};
use spotdiff::{Error, Model64, PreparedPair64, TrainingExample64};

use crate::args::*;
use crate::cache::{as_stored, build, BuildRequest, Cache};

pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

fn write_json(io: &mut Io, path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => io.out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn read_records(c: &CorpusArgs) -> Result<Vec<AnnotationRecord>> {
    let rule = VideoIdRule::new(&c.video_pattern)?;
    load_annotations(&c.annotations, &rule).with_context(|| format!("loading {}", c.annotations.display()))
}

fn read_split(s: &SplitArgs) -> Result<DatasetSplit> {
    Ok(split_by_video(&read_records(&s.corpus)?, s.split_ratios, s.seed)?)
}

fn examples(cache: &Cache, records: &[AnnotationRecord], vocab: &Vocabulary) -> Result<Vec<TrainingExample64>> {
    records
        .par_iter()
        .map(|r| Ok(TrainingExample64::new(cache.pair(&r.img_id)?, r.tokenized(), vocab)?))
        .collect()
}

/// Per-example generator so parallel decoding stays reproducible.
fn example_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn load_image(path: &Path) -> Result<RgbImage> {
    RgbImage::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn preprocess(a: &PreprocessArgs, io: &mut Io) -> Result<()> {
    let records = read_records(&a.corpus)?;
    let summary = build(&BuildRequest {
        records: &records,
        img_dir: &a.img_dir,
        second_suffix: &a.second_suffix,
        features_dir: a.features_dir.as_deref(),
        vision: a.vision.config(),
        out: &a.out,
    })?;
    write_json(io, None, &summary)
}

pub fn import_features(a: &PreprocessArgs, io: &mut Io) -> Result<()> {
    if a.features_dir.is_none() {
        bail!("import-features needs --features-dir");
    }
    preprocess(a, io)
}

pub fn export_features(a: &ExportArgs, io: &mut Io) -> Result<()> {
    let cache = Cache::open(&a.cache)?;
    fs::create_dir_all(&a.out)?;
    for id in cache.index.entries.keys() {
        let dest = a.out.join(format!("{id}.sdf"));
        fs::copy(cache.features_path(id)?, &dest).with_context(|| format!("writing {}", dest.display()))?;
    }
    writeln!(io.out, "exported {} feature files", cache.index.entries.len())?;
    Ok(())
}

pub fn train_cmd(a: &TrainArgs, io: &mut Io) -> Result<()> {
    let cache = Cache::open(&a.cache)?;
    let split = read_split(&a.split)?;
    let vocab = build_vocab(&split.train, a.min_count)?;
    let train_set = examples(&cache, &split.train, &vocab)?;
    let val_set = examples(&cache, &split.val, &vocab)?;
    let Some(first) = train_set.first() else { bail!("training split is empty") };
    let config = ModelConfig {
        vision: cache.index.vision,
        train: TrainConfig {
            learning_rate: a.lr,
            batch_size: a.batch_size,
            max_epochs: a.max_epochs,
            patience: a.patience,
            seed: a.split.seed,
            max_len: a.max_len,
            embed_dim: a.embed_dim,
            hidden_dim: a.hidden_dim,
            attention_dim: a.attention_dim,
            ..TrainConfig::default()
        },
    };
    let model = Model64::new(a.mode, vocab, first.pair.feats.dim, config)?;
    let err = &mut *io.err;
    let quiet = a.quiet;
    let outcome = train(model, &train_set, &val_set, |r| {
        if !quiet {
            let mark = if r.improved { " *" } else { "" };
            let _ = writeln!(err, "epoch {:>3}  train nll {:.4}  val CIDEr {:.4}{mark}", r.epoch, r.train_nll, r.val_cider);
        }
    })?;
    save_checkpoint(&outcome.model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    let summary = json!({
        "mode": a.mode,
        "vocab_size": outcome.model.vocab.len(),
        "train_examples": train_set.len(),
        "skipped": outcome.skipped,
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_cider": best.val_cider,
    });
    write_json(io, None, &summary)
}

fn raw_pair(model: &Model64, img1: &Path, img2: &Path) -> Result<PreparedPair64> {
    if model.decoder.config.feature_dim != DEFAULT_FEATURE_DIM {
        bail!("model was trained on imported features; describe cached pairs with --cache and --img-id");
    }
    let vision = model.config.vision;
    let (pair, clusters) = cluster_pair(load_image(img1)?, load_image(img2)?, &vision)?;
    let feats = as_stored(&encode_pair(&pair, vision.grid_h, vision.grid_w)?);
    let id = img1.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PreparedPair::from_clusters(id, &clusters, feats, vision.sigma)?)
}

/// Sentences for one pair, or `None` when it has no difference clusters.
fn describe(model: &Model64, pair: &PreparedPair64, count: usize, rng: &mut ChaCha8Rng) -> Result<Option<Vec<Vec<String>>>> {
    let decoded = if count == 1 { decode_single(model, pair, rng).map(|s| vec![s]) } else { decode_multi(model, pair, count) };
    match decoded {
        Ok(sents) => Ok(Some(sents.iter().map(|s| model.decode_words(s)).collect())),
        Err(Error::NoClusters) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn generate(a: &GenerateArgs, io: &mut Io) -> Result<()> {
    if a.num_sentences == 0 {
        bail!("--num-sentences must be at least 1");
    }
    let model: Model64 = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let pair = match (&a.cache, &a.img_id, &a.img1, &a.img2) {
        (Some(cache), Some(id), _, _) => Cache::open(cache)?.pair(id)?,
        (_, _, Some(img1), Some(img2)) => raw_pair(&model, img1, img2)?,
        _ => bail!("give either --cache with --img-id or --img1 with --img2"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let sentences = describe(&model, &pair, a.num_sentences, &mut rng)?;
    let texts: Vec<String> = sentences.iter().flatten().map(|s| s.join(" ")).collect();
    if a.json {
        let value = json!({
            "img_id": pair.id,
            "mode": model.mode,
            "clusters": pair.k(),
            "no_differences": sentences.is_none(),
            "sentences": texts,
        });
        write_json(io, None, &value)?;
    } else if sentences.is_none() {
        writeln!(io.err, "no differences detected")?;
    } else {
        for t in &texts {
            writeln!(io.out, "{t}")?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    img_id: String,
    single: String,
    multi: String,
}

pub fn evaluate(a: &EvaluateArgs, io: &mut Io) -> Result<()> {
    let cache = Cache::open(&a.cache)?;
    let split = read_split(&a.split)?;
    let records = match a.on.as_str() {
        "train" => &split.train,
        "val" => &split.val,
        _ => &split.test,
    };
    if records.len() < 2 {
        bail!("the {} split has {} examples; scoring needs at least 2", a.on, records.len());
    }
    let refs: Vec<Vec<Vec<String>>> = records.iter().map(AnnotationRecord::tokenized).collect();
    let seed = a.split.seed;
    let (system, outputs, ppl) = if a.baseline.is_some() {
        let entries = split
            .train
            .iter()
            .map(|r| Ok((cache.features(&r.img_id)?, r.sentences.clone())))
            .collect::<Result<Vec<_>>>()?;
        let index = NnIndex::new(entries)?;
        let outputs = records
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let q = cache.features(&r.img_id)?;
                let single = tokenize(index.retrieve_one(&q, &mut example_rng(seed, i))?);
                let multi: Vec<String> = index.retrieve(&q)?.iter().flat_map(|s| tokenize(s)).collect();
                Ok((single, multi, false))
            })
            .collect::<Result<Vec<_>>>()?;
        ("nn".to_string(), outputs, None)
    } else {
        let path = a.model.as_ref().expect("clap requires --model without --baseline");
        let model: Model64 = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let exs = examples(&cache, records, &model.vocab)?;
        let outputs = exs
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut rng = example_rng(seed, i);
                let single = describe(&model, &ex.pair, 1, &mut rng)?;
                let multi = describe(&model, &ex.pair, ex.references.len(), &mut rng)?;
                let none = single.is_none();
                Ok((single.unwrap_or_default().concat(), multi.unwrap_or_default().concat(), none))
            })
            .collect::<Result<Vec<_>>>()?;
        let ppl = match perplexity(&model, &exs) {
            Ok(p) => Some(p),
            Err(Error::InvalidInput(_)) => None,
            Err(e) => return Err(e.into()),
        };
        (model.mode.name().to_string(), outputs, ppl)
    };
    let singles: Vec<Vec<String>> = outputs.iter().map(|o| o.0.clone()).collect();
    let multis: Vec<Vec<String>> = outputs.iter().map(|o| o.1.clone()).collect();
    let joined: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r.concat()]).collect();
    let report = json!({
        "system": system,
        "split": a.on,
        "examples": records.len(),
        "no_differences": outputs.iter().filter(|o| o.2).count(),
        "single": score_corpus(&singles, &refs, ppl)?,
        "multi": score_corpus(&multis, &joined, ppl)?,
    });
    if let Some(path) = &a.predictions {
        let preds: Vec<Prediction> = records
            .iter()
            .zip(&outputs)
            .map(|(r, o)| Prediction { img_id: r.img_id.clone(), single: o.0.join(" "), multi: o.1.join(" ") })
            .collect();
        write_json(io, Some(path), &preds)?;
    }
    write_json(io, a.out.as_deref(), &report)
}

/// One annotated sentence-to-cluster link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLink {
    pub img_id: String,
    pub sentence_index: usize,
    pub cluster_id: usize,
}

#[derive(Serialize)]
struct AlignedLink {
    img_id: String,
    sentence_index: usize,
    gold: usize,
    predicted: usize,
}

pub fn align(a: &AlignArgs, io: &mut Io) -> Result<()> {
    let model: Model64 = load_checkpoint(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let cache = Cache::open(&a.cache)?;
    let records: HashMap<String, AnnotationRecord> = read_records(&a.corpus)?.into_iter().map(|r| (r.img_id.clone(), r)).collect();
    let text = fs::read_to_string(&a.gold).with_context(|| format!("reading {}", a.gold.display()))?;
    let gold: Vec<GoldLink> = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.gold.display()))?;
    let links = gold
        .par_iter()
        .map(|g| {
            let Some(r) = records.get(&g.img_id) else { bail!("gold pair {} is not annotated", g.img_id) };
            let sents = r.tokenized();
            let Some(words) = sents.get(g.sentence_index) else { bail!("{} has no sentence {}", g.img_id, g.sentence_index) };
            let pair = cache.pair(&g.img_id)?;
            if g.cluster_id >= pair.k() {
                bail!("{} has {} clusters; gold names cluster {}", g.img_id, pair.k(), g.cluster_id);
            }
            let predicted = predict_alignment(&model, &pair, &model.vocab.encode(words))?;
            Ok((AlignedLink { img_id: g.img_id.clone(), sentence_index: g.sentence_index, gold: g.cluster_id, predicted }, 1.0 / pair.k() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<usize> = links.iter().map(|l| l.0.predicted).collect();
    let gold_ids: Vec<usize> = links.iter().map(|l| l.0.gold).collect();
    let precision = alignment_precision(&predicted, &gold_ids)?;
    let chance = links.iter().map(|l| l.1).sum::<f64>() / links.len() as f64;
    let report = json!({
        "mode": model.mode,
        "links": links.len(),
        "precision": precision,
        "chance": chance,
        "predictions": links.into_iter().map(|l| l.0).collect::<Vec<_>>(),
    });
    write_json(io, a.out.as_deref(), &report)
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

#[derive(Serialize)]
struct ClusterSummary {
    id: usize,
    bbox: BoundingBox,
    active_count: usize,
    features: SalienceFeatures,
}

fn blend(a: [u8; 3], b: [u8; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| ((a[i] as u16 + b[i] as u16) / 2) as u8)
}

/// Clusters tinted over the first image with outlined boxes; noise pixels
/// are white.
fn overlay(pair: &ImagePair, clusters: &spotdiff::clustering::ClusterSet) -> RgbImage {
    let mut img = pair.img1.clone();
    for (r, c) in clusters.noise.active() {
        img.set_pixel(r, c, [255, 255, 255]);
    }
    for cl in &clusters.clusters {
        let color = PALETTE[cl.id % PALETTE.len()];
        for (r, c) in cl.mask.active() {
            img.set_pixel(r, c, blend(img.pixel(r, c), color));
        }
        let b = cl.bbox;
        for c in b.col_min..=b.col_max {
            img.set_pixel(b.row_min, c, color);
            img.set_pixel(b.row_max, c, color);
        }
        for r in b.row_min..=b.row_max {
            img.set_pixel(r, b.col_min, color);
            img.set_pixel(r, b.col_max, color);
        }
    }
    img
}

pub fn inspect(a: &InspectArgs, io: &mut Io) -> Result<()> {
    let (pair, clusters) = cluster_pair(load_image(&a.img1)?, load_image(&a.img2)?, &a.vision.config())?;
    overlay(&pair, &clusters).save_png(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let summary: Vec<ClusterSummary> = clusters
        .clusters
        .iter()
        .map(|c| ClusterSummary { id: c.id, bbox: c.bbox, active_count: c.active_count, features: c.features })
        .collect();
    let shift: Shift = pair.shift;
    write_json(io, None, &json!({ "shift": shift, "noise_pixels": clusters.noise.count(), "clusters": summary }))
}

pub fn stats(a: &StatsArgs, io: &mut Io) -> Result<()> {
    let records = read_records(&a.corpus)?;
    write_json(io, None, &corpus_stats(&records, a.frequent_min))
}

pub fn extract_pairs(a: &ExtractArgs, io: &mut Io) -> Result<()> {
    let pairs = extract_frame_pairs(&a.frame_dir, a.count, a.l2_lower, a.l2_upper, a.seed)?;
    let value: Vec<_> = pairs.iter().map(|(f, s, d)| json!({ "first": f, "second": s, "distance": d })).collect();
    write_json(io, a.out.as_deref(), &value)
}

pub fn synth(a: &SynthArgs, io: &mut Io) -> Result<()> {
    let config = SynthConfig { objects: a.objects, described: a.described, ..SynthConfig::default() };
    let corpus = generate_corpus(a.count, a.per_video, &config, a.seed)?;
    let img_dir = a.out.join("images");
    fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    let vision = a.vision.config();
    let gold = corpus
        .par_iter()
        .map(|p| {
            p.img1.save_png(img_dir.join(format!("{}.png", p.id)))?;
            p.img2.save_png(img_dir.join(format!("{}_2.png", p.id)))?;
            let (_, clusters) = cluster_pair(p.img1.clone(), p.img2.clone(), &vision)?;
            Ok(p.gold_clusters(&clusters)
                .into_iter()
                .enumerate()
                .filter_map(|(i, c)| c.map(|cluster_id| GoldLink { img_id: p.id.clone(), sentence_index: i, cluster_id }))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .concat();
    let annotations: Vec<_> = corpus.iter().map(|p| json!({ "img_id": p.id, "sentences": p.sentences })).collect();
    write_json(io, Some(&a.out.join("annotations.json")), &annotations)?;
    write_json(io, Some(&a.out.join("gold.json")), &gold)?;
    writeln!(io.out, "wrote {} pairs and {} gold links to {}", corpus.len(), gold.len(), a.out.display())?;
    Ok(())
}

pub fn dispatch(cmd: &Command, io: &mut Io) -> Result<()> {
    match cmd {
        Command::Preprocess(a) => preprocess(a, io),
        Command::ImportFeatures(a) => import_features(a, io),
        Command::ExportFeatures(a) => export_features(a, io),
        Command::Train(a) => train_cmd(a, io),
        Command::Generate(a) => generate(a, io),
        Command::Evaluate(a) => evaluate(a, io),
        Command::Align(a) => align(a, io),
        Command::Inspect(a) => inspect(a, io),
        Command::Stats(a) => stats(a, io),
        Command::ExtractPairs(a) => extract_pairs(a, io),
        Command::Synth(a) => synth(a, io),
    }
}
