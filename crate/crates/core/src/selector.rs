//! Candidate relation selection head and the relation filter.
//!
//! Every candidate row is scored independently from its leading-marker
//! state: `p = sigmoid(tanh(cls · W_p + b_p) · w_c + b_c)`.

use ndarray::{Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tape::{Mat, Tape, Var};

/// Default relation threshold δ.
pub const DEFAULT_RELATION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct RelationSelector {
    pub pooler: Linear,
    pub classifier: Linear,
}

impl RelationSelector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, hidden: usize) -> Self {
        Self {
            pooler: Linear::new(store, rng, "selector.pooler", hidden, hidden, true),
            classifier: Linear::new(store, rng, "selector.classifier", hidden, 1, true),
        }
    }

    /// `cls` is `G × d`; returns `G × 1` probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Var {
        let pooled = self.pooler.forward(tape, store, cls);
        let pooled = tape.tanh(pooled);
        let logits = self.classifier.forward(tape, store, pooled);
        tape.sigmoid(logits)
    }

    /// Probabilities for a plain `G × d` matrix of marker states.
    pub fn select(&self, store: &ParamStore, cls: &Mat) -> Result<Vec<f64>> {
        if cls.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite selector input".into()));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(cls.clone());
        let p = self.forward(&mut tape, store, x);
        Ok(tape.value(p).iter().copied().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Gold relations form the mask.
    Train,
    /// Thresholded probabilities form the mask.
    Infer,
}

/// Relation mask: gold labels when training, `p ≥ δ` otherwise.
pub fn make_mask(
    probs: &[f64],
    mode: MaskMode,
    gold_mask: Option<&[bool]>,
    threshold: f64,
) -> Result<Vec<bool>> {
    match mode {
        MaskMode::Train => {
            let gold = gold_mask
                .ok_or_else(|| Error::Config("training mask needs gold relations".into()))?;
            if gold.len() != probs.len() {
                return Err(Error::Internal("gold mask length differs from candidates".into()));
            }
            Ok(gold.to_vec())
        }
        MaskMode::Infer => Ok(probs.iter().map(|&p| p >= threshold).collect()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationDecision {
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
    pub kept_indices: Vec<usize>,
}

impl RelationDecision {
    pub fn new(probs: Vec<f64>, mask: Vec<bool>) -> Self {
        let kept_indices = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        Self {
            probs,
            mask,
            kept_indices,
        }
    }

    pub fn kept(&self) -> usize {
        self.kept_indices.len()
    }
}

/// Keeps the entries of `rows` whose mask bit is set, in order.
pub fn filter_rows<T: Clone>(rows: &[T], mask: &[bool]) -> (Vec<T>, Vec<usize>) {
    assert_eq!(rows.len(), mask.len(), "mask length");
    rows.iter()
        .zip(mask)
        .enumerate()
        .filter(|(_, (_, &m))| m)
        .map(|(i, (r, _))| (r.clone(), i))
        .unzip()
}

/// Row selection on a `G × l × d` representation.
pub fn filter(h: &Array3<f64>, mask: &[bool]) -> (Array3<f64>, Vec<usize>) {
    assert_eq!(h.len_of(Axis(0)), mask.len(), "mask length");
    let kept: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    (h.select(Axis(0), &kept), kept)
}
