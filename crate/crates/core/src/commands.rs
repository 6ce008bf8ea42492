//! Run orchestration behind the command-line tool: split, train, eval and
//! predict over files on disk.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::config::RunConfig;
use crate::corpus::{load_corpus, make_splits, Corpus, CorpusFormat, Instance, RelationLabel, SplitManifest, ZeroShotSplit};
use crate::error::{Error, Result};
use crate::eval::{EvalSummary, Prediction};
use crate::infer::{PredictionRecord, TripletRecord};
use crate::model::{predict_all, AttentionDump, SelectorMode};
use crate::parallel::Execution;
use crate::train::{build_model, evaluate, load_checkpoint, predict_options, train, TrainData, TrainState};

pub fn manifest_path(dir: &Path, fold: usize) -> PathBuf {
    dir.join(format!("fold-{fold}.json"))
}

/// Parses `key=value` overrides.
pub fn parse_overrides<S: AsRef<str>>(pairs: &[S]) -> Result<Vec<(String, String)>> {
    pairs
        .iter()
        .map(|p| {
            let p = p.as_ref();
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| Error::Config(format!("override {p:?} is not key=value")))
        })
        .collect()
}

/// Cuts one zero-shot fold per seed and writes `fold-{k}.json` manifests
/// into `out_dir`.
pub fn cmd_split(corpus_path: &Path, out_dir: &Path, m: usize, seeds: &[u64]) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(corpus_path, CorpusFormat::Jsonl)?;
    let folds = make_splits(&corpus.instances, &corpus.labels, m, seeds.len(), seeds)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut paths = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let path = manifest_path(out_dir, k);
        fold.to_manifest(k).write(&path)?;
        log::info!(
            "fold {k}: {} seen / {} validation / {} test labels, {} / {} / {} sentences",
            fold.seen_labels.len(),
            fold.validation_labels.len(),
            fold.unseen_labels.len(),
            fold.train.len(),
            fold.validation.len(),
            fold.test.len()
        );
        paths.push(path);
    }
    Ok(paths)
}

/// Loads the corpus and fold `fold` named by the configuration.
pub fn load_fold(config: &RunConfig, fold: usize) -> Result<(Corpus, ZeroShotSplit, usize)> {
    let corpus_path = config
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus path configured".into()))?;
    let splits = config
        .splits
        .as_ref()
        .ok_or_else(|| Error::Config("no splits directory configured".into()))?;
    let corpus = load_corpus(corpus_path, CorpusFormat::Jsonl)?;
    let manifest = SplitManifest::read(manifest_path(splits, fold))?;
    let split = ZeroShotSplit::from_manifest(&manifest, &corpus)?;
    Ok((corpus, split, manifest.m))
}

/// Trains on fold `fold` and leaves the best checkpoint in `config.output`.
pub fn cmd_train(config: &RunConfig, fold: usize, execution: Execution) -> Result<TrainState> {
    config.validate()?;
    let output = config
        .output
        .as_ref()
        .ok_or_else(|| Error::Config("no output directory configured".into()))?;
    let (corpus, split, _) = load_fold(config, fold)?;
    let label_words: Vec<String> = corpus
        .labels
        .iter()
        .flat_map(|l| l.text.split_whitespace().map(String::from).collect::<Vec<_>>())
        .collect();
    let words = corpus
        .instances
        .iter()
        .flat_map(|i| i.words.iter())
        .chain(label_words.iter())
        .map(String::as_str);
    let mut model = build_model(config, words)?;
    let data = TrainData {
        train: &split.train,
        seen_labels: &split.seen_labels,
        validation: &split.validation,
        validation_labels: &split.validation_labels,
    };
    train(&mut model, config, &data, execution, Some(output), Some(fold))
}

pub struct EvalRequest<'a> {
    pub checkpoints: &'a [PathBuf],
    /// Fold to score; defaults to the fold each checkpoint was trained on.
    pub fold: Option<usize>,
    pub overrides: &'a [(String, String)],
    /// Replace the learned selector with uniform draws from this seed.
    pub random_selector: Option<u64>,
    pub output: &'a Path,
    pub execution: Execution,
}

/// Scores each checkpoint on the test partition of its fold and writes
/// `report.json`, `report.txt` and per-fold predictions into `output`.
pub fn cmd_eval(req: &EvalRequest<'_>) -> Result<EvalSummary> {
    if req.checkpoints.is_empty() {
        return Err(Error::Config("no checkpoint given".into()));
    }
    if req.fold.is_some() && req.checkpoints.len() > 1 {
        return Err(Error::Config("a fold override needs exactly one checkpoint".into()));
    }
    fs::create_dir_all(req.output).map_err(|e| Error::io(format!("creating {}", req.output.display()), e))?;
    let mut folds = Vec::new();
    let mut ms = Vec::new();
    for dir in req.checkpoints {
        let (model, config, state) = load_checkpoint(dir, req.overrides)?;
        let fold = req.fold.or(state.fold).ok_or_else(|| {
            Error::Config(format!("checkpoint {} records no fold; pass one", dir.display()))
        })?;
        let (_, split, m) = load_fold(&config, fold)?;
        let mode = match req.random_selector {
            Some(seed) => SelectorMode::Random { seed },
            None => SelectorMode::Learned,
        };
        let options = predict_options(&config);
        let (report, preds) = if split.test.is_empty() {
            (Default::default(), HashMap::new())
        } else {
            evaluate(&model, &split.test, &split.unseen_labels, &options, mode, req.execution)?
        };
        write_predictions(
            &req.output.join(format!("predictions-fold-{fold}.jsonl")),
            &split.test,
            &split.test.iter().map(|i| preds.get(&i.id).cloned().unwrap_or_default()).collect::<Vec<_>>(),
        )?;
        log::info!("fold {fold}: multi F1 {:.4}, accuracy {:.4}", report.f1, report.acc);
        folds.push((fold, report));
        ms.push(m);
    }
    ms.dedup();
    let m = if ms.len() == 1 { Some(ms[0]) } else { None };
    let summary = EvalSummary::new(m, folds);
    summary.write(req.output)?;
    Ok(summary)
}

#[derive(Debug, Deserialize)]
struct RawInput {
    #[serde(default)]
    id: Option<String>,
    #[serde(default, alias = "words")]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    text: Option<String>,
}

/// Reads sentences for prediction: one JSON object per line with an
/// optional `id` and either `tokens`/`words` or whitespace-split `text`.
pub fn read_inputs(path: &Path) -> Result<Vec<Instance>> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let raw: RawInput = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let words = match (raw.tokens, raw.text) {
            (Some(t), _) => t,
            (None, Some(text)) => text.split_whitespace().map(String::from).collect(),
            (None, None) => return Err(parse_err("record has neither tokens nor text".into())),
        };
        if words.is_empty() {
            return Err(parse_err("record has no words".into()));
        }
        out.push(Instance {
            id: raw.id.unwrap_or_else(|| format!("line-{}", idx + 1)),
            words,
            triplets: Vec::new(),
        });
    }
    Ok(out)
}

/// Reads a candidate label set, one label per line; ids follow line order.
pub fn read_labels(path: &Path) -> Result<Vec<RelationLabel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut labels: Vec<RelationLabel> = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if labels.iter().any(|l| l.text == line) {
            continue;
        }
        labels.push(RelationLabel {
            id: labels.len(),
            text: line.to_string(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Config(format!("label set {} is empty", path.display())));
    }
    Ok(labels)
}

pub fn prediction_records(instances: &[Instance], predictions: &[Prediction]) -> Vec<PredictionRecord> {
    instances
        .iter()
        .zip(predictions)
        .map(|(inst, p)| PredictionRecord {
            id: inst.id.clone(),
            triplets: p.triplets.iter().map(|t| TripletRecord::new(t, &inst.words)).collect(),
        })
        .collect()
}

pub fn write_predictions(path: &Path, instances: &[Instance], predictions: &[Prediction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_records(std::io::BufWriter::new(file), &prediction_records(instances, predictions))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_records<W: Write>(mut out: W, records: &[PredictionRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub struct PredictRequest<'a> {
    pub checkpoint: &'a Path,
    pub overrides: &'a [(String, String)],
    pub input: &'a Path,
    pub labels: Option<&'a Path>,
    pub execution: Execution,
}

pub struct PredictOutput {
    pub records: Vec<PredictionRecord>,
    pub attention: Vec<(String, AttentionDump)>,
}

/// Runs the trained pipeline over an input file against a label set.
/// Attention maps are collected when `with_attention` is set.
pub fn cmd_predict(req: &PredictRequest<'_>, with_attention: bool) -> Result<PredictOutput> {
    let labels_path = req
        .labels
        .ok_or_else(|| Error::Config("prediction needs a relation label set".into()))?;
    let labels = read_labels(labels_path)?;
    let instances = read_inputs(req.input)?;
    let (model, config, _) = load_checkpoint(req.checkpoint, req.overrides)?;
    let options = predict_options(&config);
    let preds = predict_all(&model, &instances, &labels, &options, SelectorMode::Learned, req.execution)?;
    let attention = if with_attention {
        instances
            .iter()
            .map(|i| Ok((i.id.clone(), model.attention(&i.words, &labels, &options)?)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(PredictOutput {
        records: prediction_records(&instances, &preds),
        attention,
    })
}
