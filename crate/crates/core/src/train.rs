//! Training loop, early stopping and checkpoints.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{all_candidates, sample_candidates, AugmentedGroup};
use crate::config::{EncoderChoice, RunConfig};
use crate::corpus::{Instance, RelationLabel};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{score, Prediction, ScoreReport};
use crate::infer::InferConfig;
use crate::loss::check_alpha;
use crate::model::{predict_all, ExtractionModel, LossParts, LossWeights, ModelConfig, PredictOptions, SelectorMode};
use crate::optim::{lr_multiplier, AdamW};
use crate::parallel::Execution;
use crate::tape::Gradients;
use crate::tokenizer::{Tokenizer, WordPiece};

/// Patience-based stopping on a score that should increase.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub epochs: usize,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            epochs: 0,
            stale: 0,
        }
    }

    /// Records the score of the next epoch (epochs count from 1). Only a
    /// strict increase counts as improvement.
    pub fn update(&mut self, score: f64) -> StopDecision {
        self.epochs += 1;
        let improved = self.best.is_none_or(|b| score > b);
        if improved {
            self.best = Some(score);
            self.best_epoch = self.epochs;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.patience > 0 && self.stale >= self.patience,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub validation: ScoreReport,
    pub score: f64,
}

/// Contents of `state.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub fold: Option<usize>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

/// Everything one training run needs besides the model.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [Instance],
    /// Pool for candidate sampling.
    pub seen_labels: &'a [RelationLabel],
    pub validation: &'a [Instance],
    /// Candidates scored for every validation sentence.
    pub validation_labels: &'a [RelationLabel],
}

pub fn predict_options(config: &RunConfig) -> PredictOptions {
    PredictOptions {
        relation_threshold: config.relation_threshold,
        infer: InferConfig {
            beta: config.boundary_threshold,
            max_span: config.max_span,
        },
    }
}

/// Architecture implied by a run configuration. `pretrained` supplies the
/// encoder shape for pretrained runs.
pub fn model_config(config: &RunConfig, vocab_size: usize, pretrained: Option<EncoderConfig>) -> ModelConfig {
    let encoder = pretrained.unwrap_or(EncoderConfig {
        vocab_size,
        hidden: config.tiny_hidden,
        layers: config.tiny_layers,
        heads: config.tiny_heads,
        intermediate: config.tiny_intermediate,
        max_positions: config.max_seq_len,
        type_vocab: 2,
        layer_norm_eps: 1e-12,
        freeze_word_embeddings: false,
    });
    let mut decoder = DecoderConfig::new(config.queries, config.decoder_heads);
    decoder.layers = config.decoder_layers;
    ModelConfig {
        encoder,
        decoder,
        max_seq_len: config.max_seq_len,
    }
}

/// Builds a fresh model. The tiny encoder's vocabulary covers every word of
/// `words`; a pretrained encoder brings its own.
pub fn build_model<'a>(config: &RunConfig, words: impl IntoIterator<Item = &'a str>) -> Result<ExtractionModel> {
    match &config.encoder {
        EncoderChoice::Tiny => {
            let tok = WordPiece::build(words, config.lowercase)?;
            let mc = model_config(config, tok.vocab_size(), None);
            ExtractionModel::new(mc, tok, config.seed)
        }
        EncoderChoice::Pretrained(dir) => {
            let tok = WordPiece::from_vocab_file(dir.join("vocab.txt"), config.lowercase)?;
            let enc = EncoderConfig::from_bert_config(dir.join("config.json"))?;
            let mc = model_config(config, tok.vocab_size(), Some(enc));
            let mut model = ExtractionModel::new(mc, tok, config.seed)?;
            model.encoder.load_pretrained(&mut model.store, dir.join("model.safetensors"))?;
            Ok(model)
        }
    }
}

/// Generator for instance `position` of `epoch`: one ChaCha stream per
/// (epoch, position), so parallel and sequential runs draw alike.
fn instance_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | 0xFFFF_FFFF);
    order.shuffle(&mut rng);
    order
}

/// Predictions and scores on a labelled set.
pub fn evaluate(
    model: &ExtractionModel,
    instances: &[Instance],
    candidates: &[RelationLabel],
    options: &PredictOptions,
    mode: SelectorMode,
    execution: Execution,
) -> Result<(ScoreReport, HashMap<String, Prediction>)> {
    if instances.is_empty() {
        return Ok((ScoreReport::default(), HashMap::new()));
    }
    let candidates = all_candidates(candidates)?;
    let preds = predict_all(model, instances, &candidates, options, mode, execution)?;
    let map: HashMap<String, Prediction> = instances.iter().map(|i| i.id.clone()).zip(preds).collect();
    Ok((score(&map, instances)?, map))
}

/// Trains `model` in place. On return the model holds the best weights;
/// with `checkpoint` they are also saved there after every improvement.
pub fn train(
    model: &mut ExtractionModel,
    config: &RunConfig,
    data: &TrainData<'_>,
    execution: Execution,
    checkpoint: Option<&Path>,
    fold: Option<usize>,
) -> Result<TrainState> {
    config.validate()?;
    check_alpha(config.alpha)?;
    if config.alpha == 1.0 {
        log::warn!("alpha = 1 gives the entity loss zero weight; the boundary decoder will not learn");
    }
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if config.group_size > data.seen_labels.len() {
        return Err(Error::Config(format!(
            "group size {} exceeds the {} training relations",
            config.group_size,
            data.seen_labels.len()
        )));
    }
    let options = predict_options(config);
    let batches_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.max_epochs;
    let mut optimizer = AdamW::new(config.learning_rate, config.weight_decay);
    let mut stopping = EarlyStopping::new(config.patience);
    let mut state = TrainState {
        seed: config.seed,
        fold,
        ..Default::default()
    };
    let mut best_store = model.store.clone();

    for epoch in 0..config.max_epochs {
        let order = epoch_order(config.seed, epoch, data.train.len());
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let groups: Vec<(AugmentedGroup, &Instance)> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let inst = &data.train[i];
                    let mut rng = instance_rng(config.seed, epoch, b * config.batch_size + k);
                    let cands = sample_candidates(inst, data.seen_labels, config.group_size, &mut rng)?;
                    Ok((model.group(&inst.words, &cands, &inst.gold_relations())?, inst))
                })
                .collect::<Result<_>>()?;
            let real: usize = groups.iter().map(|(g, i)| model.real_pairs(g, &i.triplets)).sum();
            let weights = LossWeights::for_batch(config.alpha, groups.len(), real);
            let frozen: &ExtractionModel = model;
            let results: Vec<Result<(Gradients, LossParts)>> =
                execution.map(&groups, |_, (g, inst)| frozen.gradients(g, &inst.triplets, weights));
            let mut grads = Gradients::default();
            for r in results {
                let (g, parts) = r?;
                epoch_loss += parts.weighted;
                grads.merge(g);
            }
            let step = optimizer.steps();
            optimizer.step(&mut model.store, &grads, lr_multiplier(step, total_steps, config.warmup_ratio));
        }
        let loss = epoch_loss / batches_per_epoch as f64;
        let (report, _) = evaluate(
            model,
            data.validation,
            data.validation_labels,
            &options,
            SelectorMode::Learned,
            execution,
        )?;
        let score = report.validation_score();
        log::info!("epoch {} loss {loss:.5} validation {score:.4}", epoch + 1);
        state.history.push(EpochRecord {
            epoch: epoch + 1,
            loss,
            validation: report,
            score,
        });
        let decision = stopping.update(score);
        if decision.improved {
            state.best_epoch = stopping.best_epoch;
            state.best_score = score;
            best_store = model.store.clone();
            if let Some(dir) = checkpoint {
                save_checkpoint(dir, model, config, &state)?;
            }
        }
        if config.target_score.is_some_and(|t| score >= t) {
            log::info!("validation score reached the target after epoch {}", epoch + 1);
            state.stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
        if decision.stop {
            log::info!("no improvement for {} epochs; stopping", config.patience);
            state.stopped_early = epoch + 1 < config.max_epochs;
            break;
        }
    }
    model.store = best_store;
    if let Some(dir) = checkpoint {
        write_state(dir, &state)?;
    }
    Ok(state)
}

const WEIGHTS: &str = "weights.safetensors";
const CONFIG: &str = "config.txt";
const MODEL: &str = "model.json";
const VOCAB: &str = "vocab.txt";
const STATE: &str = "state.json";

fn write_state(dir: &Path, state: &TrainState) -> Result<()> {
    let path = dir.join(STATE);
    let text = serde_json::to_string_pretty(state)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes weights, run configuration, architecture, vocabulary and state.
pub fn save_checkpoint(dir: &Path, model: &ExtractionModel, config: &RunConfig, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    model.store.save_safetensors(dir.join(WEIGHTS))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    write(CONFIG, config.to_text())?;
    write(MODEL, serde_json::to_string_pretty(&model.config)? + "\n")?;
    model.tokenizer.save(dir.join(VOCAB))?;
    write_state(dir, state)
}

/// Loads a checkpoint. `overrides` are applied to the saved run
/// configuration before the model is rebuilt; the weights must then fit
/// the resulting shapes.
pub fn load_checkpoint(dir: &Path, overrides: &[(String, String)]) -> Result<(ExtractionModel, RunConfig, TrainState)> {
    let mut config = RunConfig::from_file(dir.join(CONFIG))?;
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    config.validate()?;
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
    };
    let saved: ModelConfig = serde_json::from_str(&read(MODEL)?)?;
    let tok = WordPiece::from_vocab_file(dir.join(VOCAB), config.lowercase)?;
    let pretrained = match config.encoder {
        EncoderChoice::Tiny => None,
        EncoderChoice::Pretrained(_) => Some(saved.encoder.clone()),
    };
    let mut mc = model_config(&config, tok.vocab_size(), pretrained);
    mc.encoder.max_positions = saved.encoder.max_positions;
    let mut model = ExtractionModel::new(mc, tok, config.seed).map_err(|e| Error::Load(e.to_string()))?;
    model.store.load_safetensors(dir.join(WEIGHTS))?;
    let state: TrainState = serde_json::from_str(&read(STATE)?)?;
    Ok((model, config, state))
}
