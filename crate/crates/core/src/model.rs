//! The full extraction model: encoder, relation selector and boundary
//! decoder over one shared parameter store.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_group, AugmentedGroup};
use crate::corpus::{Instance, RelationLabel, Triplet};
use crate::decoder::{distributions, BoundaryDecoder, BoundarySet, DecoderConfig, DecoderTrace};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::infer::{extract, InferConfig};
use crate::loss::{cost_matrix, entity_nll_var, hungarian, relation_loss_var, GoldBoundarySet};
use crate::params::ParamStore;
use crate::parallel::Execution;
use crate::selector::{filter, make_mask, MaskMode, RelationDecision, RelationSelector};
use crate::tape::{Gradients, Mat, Tape, Var};
use crate::tokenizer::{Tokenizer, WordPiece};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub max_seq_len: usize,
}

#[derive(Clone, Debug)]
pub struct ExtractionModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub selector: RelationSelector,
    pub decoder: BoundaryDecoder,
    pub store: ParamStore,
    pub tokenizer: Arc<WordPiece>,
}

/// Scale factors of one instance's terms in the batch loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// `α / B`
    pub relation: f64,
    /// `(1 − α) / C`, with `C` the batch's real gold quadruple count.
    pub entity: f64,
}

impl LossWeights {
    pub fn for_batch(alpha: f64, batch: usize, real_pairs: usize) -> Self {
        Self {
            relation: alpha / batch.max(1) as f64,
            entity: (1.0 - alpha) / real_pairs.max(1) as f64,
        }
    }
}

/// Unweighted loss terms of one instance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub relation: f64,
    pub entity_nll: f64,
    pub real_pairs: usize,
    pub weighted: f64,
}

/// Decision threshold and boundary criteria used at prediction time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    pub relation_threshold: f64,
    pub infer: InferConfig,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            relation_threshold: crate::selector::DEFAULT_RELATION_THRESHOLD,
            infer: InferConfig::default(),
        }
    }
}

/// Where selector probabilities come from at prediction time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectorMode {
    Learned,
    /// Uniform draws seeded per instance, for the random-selector ablation.
    Random { seed: u64 },
}

/// Attention maps of one prediction, for visualization.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttentionDump {
    pub rows: Vec<RowAttention>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowAttention {
    pub relation: String,
    pub probability: f64,
    pub kept: bool,
    pub tokens: Vec<String>,
    /// Last encoder layer, per head, `tokens × tokens`.
    pub encoder: Vec<Vec<Vec<f64>>>,
    /// Decoder cross-attention per head, `queries × tokens`; empty for
    /// rows the selector dropped.
    pub decoder: Vec<Vec<Vec<f64>>>,
}

fn to_nested(m: &Mat, cols: usize) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.iter().take(cols).copied().collect()).collect()
}

impl ExtractionModel {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, tokenizer: WordPiece, seed: u64) -> Result<Self> {
        if config.encoder.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "encoder vocabulary {} differs from tokenizer vocabulary {}",
                config.encoder.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        if config.max_seq_len > config.encoder.max_positions {
            return Err(Error::Config(format!(
                "max_seq_len {} exceeds {} encoder positions",
                config.max_seq_len, config.encoder.max_positions
            )));
        }
        if !config.encoder.hidden.is_multiple_of(config.decoder.heads) {
            return Err(Error::Config("hidden size not divisible by decoder heads".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng);
        let selector = RelationSelector::new(&mut store, &mut rng, config.encoder.hidden);
        let decoder = BoundaryDecoder::new(config.decoder.clone(), &mut store, &mut rng, config.encoder.hidden);
        Ok(Self {
            config,
            encoder,
            selector,
            decoder,
            store,
            tokenizer: Arc::new(tokenizer),
        })
    }

    pub fn queries(&self) -> usize {
        self.config.decoder.queries
    }

    pub fn group(
        &self,
        words: &[String],
        candidates: &[RelationLabel],
        gold: &[RelationLabel],
    ) -> Result<AugmentedGroup> {
        let group = build_group(words, candidates, gold, self.tokenizer.as_ref(), self.config.max_seq_len)?;
        self.encoder.check_group(&group)?;
        Ok(group)
    }

    /// Gold quadruples, capped at `N`, over every gold row of `group`.
    pub fn real_pairs(&self, group: &AugmentedGroup, triplets: &[Triplet]) -> usize {
        (0..group.len())
            .filter(|&r| group.gold_mask[r])
            .map(|r| group.gold_quads(r, triplets).len().min(self.queries()))
            .sum()
    }

    /// Records one instance's weighted contribution to the batch loss.
    /// Training uses the gold relation mask for the decoder rows.
    pub fn instance_loss(
        &self,
        tape: &mut Tape,
        group: &AugmentedGroup,
        triplets: &[Triplet],
        weights: LossWeights,
    ) -> Result<(Var, LossParts)> {
        let store = &self.store;
        let rows: Vec<Var> = (0..group.len())
            .map(|r| self.encoder.forward_row(tape, store, group, r, None))
            .collect();
        let cls: Vec<Var> = rows.iter().map(|&h| tape.slice_rows(h, 0, 1)).collect();
        let cls = tape.concat_rows(cls);
        let probs = self.selector.forward(tape, store, cls);
        let l_rel = relation_loss_var(tape, probs, &group.gold_mask);
        let mut parts = LossParts {
            relation: tape.scalar(l_rel),
            ..Default::default()
        };
        let mut total = tape.scale(l_rel, weights.relation);

        if weights.entity != 0.0 {
            let p: Vec<f64> = tape.value(probs).iter().copied().collect();
            let mask = make_mask(&p, MaskMode::Train, Some(&group.gold_mask), 0.0)?;
            let mut nll_terms = Vec::new();
            for r in (0..group.len()).filter(|&r| mask[r]) {
                let key_mask = Arc::from(group.key_mask(r));
                let boundary = Arc::from(group.rows[r].boundary_mask(group.max_len()));
                let logp = self.decoder.forward(tape, store, rows[r], key_mask, boundary, None);
                let dists = distributions(tape, logp);
                let gold = GoldBoundarySet::new(&group.gold_quads(r, triplets), self.queries());
                let assignment = hungarian(&cost_matrix(&dists, &gold)?)?;
                let (nll, count) = entity_nll_var(tape, logp, &gold, &assignment);
                parts.entity_nll += tape.scalar(nll);
                parts.real_pairs += count;
                nll_terms.push(nll);
            }
            if !nll_terms.is_empty() {
                let nll = tape.sum_scalars(&nll_terms);
                let nll = tape.scale(nll, weights.entity);
                total = tape.add(total, nll);
            }
        }
        parts.weighted = tape.scalar(total);
        if !parts.weighted.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", parts.weighted)));
        }
        Ok((total, parts))
    }

    /// Gradients of one instance's weighted loss.
    pub fn gradients(
        &self,
        group: &AugmentedGroup,
        triplets: &[Triplet],
        weights: LossWeights,
    ) -> Result<(Gradients, LossParts)> {
        let mut tape = Tape::new();
        let (loss, parts) = self.instance_loss(&mut tape, group, triplets, weights)?;
        Ok((tape.backward(loss), parts))
    }

    /// Weighted loss value only.
    pub fn loss_value(&self, group: &AugmentedGroup, triplets: &[Triplet], weights: LossWeights) -> Result<f64> {
        let mut tape = Tape::inference();
        Ok(self.instance_loss(&mut tape, group, triplets, weights)?.1.weighted)
    }

    /// Selector probabilities for every candidate row.
    pub fn relation_probs(&self, group: &AugmentedGroup) -> Result<Vec<f64>> {
        let repr = self.encoder.encode(&self.store, group)?;
        self.selector.select(&self.store, &repr.cls)
    }

    fn decide(&self, probs: Vec<f64>, threshold: f64) -> Result<RelationDecision> {
        let mask = make_mask(&probs, MaskMode::Infer, None, threshold)?;
        Ok(RelationDecision::new(probs, mask))
    }

    /// Extracts triplets from one sentence against `candidates`.
    pub fn predict(
        &self,
        words: &[String],
        candidates: &[RelationLabel],
        options: &PredictOptions,
        mode: SelectorMode,
    ) -> Result<Prediction> {
        let group = self.group(words, candidates, &[])?;
        let repr = self.encoder.encode(&self.store, &group)?;
        let probs = match mode {
            SelectorMode::Learned => self.selector.select(&self.store, &repr.cls)?,
            SelectorMode::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..group.len()).map(|_| rng.random::<f64>()).collect()
            }
        };
        let decision = self.decide(probs, options.relation_threshold)?;
        let (h_f, kept) = filter(&repr.values, &decision.mask);
        let key_masks: Vec<Vec<bool>> = kept.iter().map(|&r| group.key_mask(r)).collect();
        let boundary_masks: Vec<Vec<bool>> = kept
            .iter()
            .map(|&r| group.rows[r].boundary_mask(group.max_len()))
            .collect();
        let boundaries: BoundarySet = self.decoder.decode_boundaries(&self.store, &h_f, &key_masks, &boundary_masks);
        let triplets = extract(&decision, &boundaries, &group.candidates, &group.rows, &options.infer);
        let relations = kept.iter().map(|&r| group.candidates[r].clone()).collect();
        Ok(Prediction { triplets, relations })
    }

    /// Attention maps behind one prediction.
    pub fn attention(
        &self,
        words: &[String],
        candidates: &[RelationLabel],
        options: &PredictOptions,
    ) -> Result<AttentionDump> {
        let group = self.group(words, candidates, &[])?;
        let probs = self.relation_probs(&group)?;
        let decision = self.decide(probs, options.relation_threshold)?;
        let mut rows = Vec::with_capacity(group.len());
        for r in 0..group.len() {
            let real = group.key_mask(r).iter().filter(|&&m| m).count();
            let tokens = group
                .token_ids
                .row(r)
                .iter()
                .take(real)
                .map(|&id| self.tokenizer.token(id).unwrap_or("[UNK]").to_string())
                .collect();
            let mut tape = Tape::inference();
            let mut enc_trace = Vec::new();
            let h = self.encoder.forward_row(&mut tape, &self.store, &group, r, Some(&mut enc_trace));
            let mut dec_trace = DecoderTrace::default();
            if decision.mask[r] {
                self.decoder.forward(
                    &mut tape,
                    &self.store,
                    h,
                    Arc::from(group.key_mask(r)),
                    Arc::from(group.rows[r].boundary_mask(group.max_len())),
                    Some(&mut dec_trace),
                );
            }
            rows.push(RowAttention {
                relation: group.candidates[r].text.clone(),
                probability: decision.probs[r],
                kept: decision.mask[r],
                tokens,
                encoder: enc_trace.iter().map(|m| to_nested(&m.slice(ndarray::s![..real, ..]).to_owned(), real)).collect(),
                decoder: dec_trace.cross_attention.iter().map(|m| to_nested(m, real)).collect(),
            });
        }
        Ok(AttentionDump { rows })
    }
}

/// Predicts every instance against the same candidate set. Instance `i` in
/// random mode draws from `seed + i`.
pub fn predict_all(
    model: &ExtractionModel,
    instances: &[Instance],
    candidates: &[RelationLabel],
    options: &PredictOptions,
    mode: SelectorMode,
    execution: Execution,
) -> Result<Vec<Prediction>> {
    execution
        .map(instances, |i, inst| {
            let mode = match mode {
                SelectorMode::Random { seed } => SelectorMode::Random {
                    seed: seed.wrapping_add(i as u64),
                },
                m => m,
            };
            model.predict(&inst.words, candidates, options, mode)
        })
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabelSet;
    use crate::tokenizer::Tokenizer;

    pub(crate) fn tiny_model(words: &[&str], queries: usize) -> ExtractionModel {
        let tok = WordPiece::build(words.iter().copied(), true).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig::tiny(tok.vocab_size(), 32),
            decoder: DecoderConfig::new(queries, 2),
            max_seq_len: 24,
        };
        ExtractionModel::new(config, tok, 5).unwrap()
    }

    fn sample() -> (Instance, LabelSet) {
        let labels = LabelSet::from_texts(["employer", "spouse", "place of birth"]).unwrap();
        let words: Vec<String> = "alice works for acme and was born in rome ."
            .split(' ')
            .map(String::from)
            .collect();
        let t = |h: usize, tl: (usize, usize), l: usize| Triplet {
            head: crate::corpus::Span::new(h, h),
            tail: crate::corpus::Span::new(tl.0, tl.1),
            relation: labels.get(l).unwrap().clone(),
        };
        let inst = Instance {
            id: "x".into(),
            words,
            triplets: vec![t(0, (3, 3), 0), t(0, (8, 8), 2)],
        };
        (inst, labels)
    }

    fn vocab() -> Vec<&'static str> {
        "alice works for acme and was born in rome . employer spouse place of birth".split(' ').collect()
    }

    #[test]
    fn loss_parts_and_alpha_one_skips_decoder() {
        let (inst, labels) = sample();
        let model = tiny_model(&vocab(), 3);
        let group = model.group(&inst.words, labels.as_slice(), &inst.gold_relations()).unwrap();
        assert_eq!(model.real_pairs(&group, &inst.triplets), 2);
        let w = LossWeights::for_batch(0.5, 1, 2);
        let (grads, parts) = model.gradients(&group, &inst.triplets, w).unwrap();
        assert_eq!(parts.real_pairs, 2);
        assert!((parts.weighted - (0.5 * parts.relation + 0.25 * parts.entity_nll)).abs() < 1e-12);
        assert!(grads.get(model.decoder.query_embeddings()).is_some());
        let (grads, parts) = model.gradients(&group, &inst.triplets, LossWeights::for_batch(1.0, 1, 2)).unwrap();
        assert_eq!(parts.real_pairs, 0);
        assert!(grads.get(model.decoder.query_embeddings()).is_none());
    }

    #[test]
    fn prediction_is_deterministic_and_well_formed() {
        let (inst, labels) = sample();
        let model = tiny_model(&vocab(), 3);
        let opts = PredictOptions {
            relation_threshold: 0.0,
            infer: InferConfig { beta: 0.0, max_span: 15 },
        };
        let a = model.predict(&inst.words, labels.as_slice(), &opts, SelectorMode::Learned).unwrap();
        let b = model.predict(&inst.words, labels.as_slice(), &opts, SelectorMode::Learned).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.relations.len(), 3);
        for t in &a.triplets {
            assert!(t.head.is_valid_for(inst.words.len()) && t.tail.is_valid_for(inst.words.len()));
        }
        let strict = PredictOptions {
            relation_threshold: 1.0,
            ..opts
        };
        let none = model.predict(&inst.words, labels.as_slice(), &strict, SelectorMode::Learned).unwrap();
        assert!(none.triplets.is_empty() && none.relations.is_empty());
    }

    #[test]
    fn attention_dump_shapes() {
        let (inst, labels) = sample();
        let model = tiny_model(&vocab(), 3);
        let opts = PredictOptions {
            relation_threshold: 0.0,
            ..Default::default()
        };
        let dump = model.attention(&inst.words, labels.as_slice(), &opts).unwrap();
        assert_eq!(dump.rows.len(), 3);
        let row = &dump.rows[0];
        let n = row.tokens.len();
        assert_eq!(row.tokens[0], "[CLS]");
        assert_eq!(row.encoder.len(), 2);
        assert!(row.encoder[0].iter().all(|r| r.len() == n && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        assert_eq!(row.decoder[0].len(), 3);
    }

    #[test]
    fn vocabulary_mismatch_rejected() {
        let tok = WordPiece::build(["a"], true).unwrap();
        let config = ModelConfig {
            encoder: EncoderConfig::tiny(tok.vocab_size() + 1, 32),
            decoder: DecoderConfig::new(2, 2),
            max_seq_len: 24,
        };
        assert!(matches!(ExtractionModel::new(config, tok, 0), Err(Error::Config(_))));
    }
}
