//! Triplet assembly from decoded boundaries.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::augment::{RowLayout, SENTENCE_OFFSET};
use crate::corpus::{RelationLabel, Span};
use crate::decoder::{BoundarySet, QuadrupleDistributions};
use crate::selector::RelationDecision;

pub const DEFAULT_BOUNDARY_THRESHOLD: f64 = 0.4;
pub const DEFAULT_MAX_SPAN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Boundary threshold β.
    pub beta: f64,
    /// Longest entity, in subtokens.
    pub max_span: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BOUNDARY_THRESHOLD,
            max_span: DEFAULT_MAX_SPAN,
        }
    }
}

/// Argmax boundary positions of one query and their probability product.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedBoundary {
    pub h_start: usize,
    pub h_end: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub score: f64,
}

impl DecodedBoundary {
    pub fn from_query(dists: &QuadrupleDistributions, j: usize) -> Self {
        let mut pos = [0usize; 4];
        let mut score = 1.0;
        for (h, head) in dists.heads().iter().enumerate() {
            let row = head.row(j);
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            pos[h] = best;
            score *= row[best];
        }
        Self {
            h_start: pos[0],
            h_end: pos[1],
            t_start: pos[2],
            t_end: pos[3],
            score,
        }
    }

    pub fn is_null(&self) -> bool {
        self.h_start == 0 && self.h_end == 0 && self.t_start == 0 && self.t_end == 0
    }
}

/// Why a decoded boundary was discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    Null,
    StartAfterEnd,
    OutsideSentence,
    TooLong,
    BelowThreshold,
}

/// Applies the null rule and the four validity criteria. `sentence_len` is
/// the number of sentence subtokens in the row.
pub fn check(b: &DecodedBoundary, sentence_len: usize, config: &InferConfig) -> Result<(), Rejection> {
    if b.is_null() {
        return Err(Rejection::Null);
    }
    let entities = [(b.h_start, b.h_end), (b.t_start, b.t_end)];
    if entities.iter().any(|&(s, e)| s > e) {
        return Err(Rejection::StartAfterEnd);
    }
    let last = SENTENCE_OFFSET + sentence_len;
    if entities.iter().any(|&(s, e)| s < SENTENCE_OFFSET || e >= last) {
        return Err(Rejection::OutsideSentence);
    }
    if entities.iter().any(|&(s, e)| e - s + 1 > config.max_span) {
        return Err(Rejection::TooLong);
    }
    if b.score < config.beta {
        return Err(Rejection::BelowThreshold);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTriplet {
    pub head: Span,
    pub tail: Span,
    pub relation: RelationLabel,
    /// Boundary score times relation probability.
    pub score: f64,
}

/// Turns the boundaries of every kept relation into word-level triplets.
/// `candidates` and `rows` are indexed like `decision.probs`; the entries of
/// `boundaries` follow `decision.kept_indices`.
pub fn extract(
    decision: &RelationDecision,
    boundaries: &BoundarySet,
    candidates: &[RelationLabel],
    rows: &[RowLayout],
    config: &InferConfig,
) -> Vec<PredictedTriplet> {
    assert_eq!(
        decision.kept_indices.len(),
        boundaries.relations.len(),
        "one boundary set per kept relation"
    );
    let mut out: Vec<PredictedTriplet> = Vec::new();
    let mut seen: HashMap<(Span, Span, usize), usize> = HashMap::new();
    for (&r, dists) in decision.kept_indices.iter().zip(&boundaries.relations) {
        let layout = &rows[r];
        for j in 0..dists.queries() {
            let b = DecodedBoundary::from_query(dists, j);
            if check(&b, layout.sentence_len, config).is_err() {
                continue;
            }
            let (Some(head), Some(tail)) = (
                layout.word_span(b.h_start, b.h_end),
                layout.word_span(b.t_start, b.t_end),
            ) else {
                continue;
            };
            let relation = candidates[r].clone();
            let score = b.score * decision.probs[r];
            let key = (head, tail, relation.id);
            match seen.get(&key) {
                Some(&i) => {
                    if score > out[i].score {
                        out[i].score = score;
                    }
                }
                None => {
                    seen.insert(key, out.len());
                    out.push(PredictedTriplet {
                        head,
                        tail,
                        relation,
                        score,
                    });
                }
            }
        }
    }
    out
}

/// Highest-scoring triplet; ties go to the smallest
/// (relation id, head start, tail start).
pub fn top1(triplets: &[PredictedTriplet]) -> Option<&PredictedTriplet> {
    triplets.iter().min_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.relation.id.cmp(&b.relation.id))
            .then(a.head.start.cmp(&b.head.start))
            .then(a.tail.start.cmp(&b.tail.start))
    })
}

/// One line of the prediction output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub triplets: Vec<TripletRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub head: Vec<usize>,
    pub head_text: String,
    pub tail: Vec<usize>,
    pub tail_text: String,
    pub label: String,
    pub score: f64,
}

impl TripletRecord {
    pub fn new(t: &PredictedTriplet, words: &[String]) -> Self {
        Self {
            head: (t.head.start..=t.head.end).collect(),
            head_text: t.head.text(words),
            tail: (t.tail.start..=t.tail.end).collect(),
            tail_text: t.tail.text(words),
            label: t.relation.text.clone(),
            score: t.score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Mat;

    fn layout(sentence_len: usize) -> RowLayout {
        RowLayout {
            sentence_len,
            relation_len: 2,
            alignment: (0..sentence_len).map(|i| Some((i, i))).collect(),
        }
    }

    /// One query putting mass `p` on each position of `quad`, the rest
    /// spread over position `l - 1`.
    fn peaked(l: usize, quads: &[([usize; 4], f64)]) -> QuadrupleDistributions {
        QuadrupleDistributions::from_heads(std::array::from_fn(|h| {
            let mut m = Mat::zeros((quads.len(), l));
            for (j, (q, p)) in quads.iter().enumerate() {
                m[[j, q[h]]] += p;
                m[[j, l - 1]] += 1.0 - p;
            }
            m
        }))
    }

    fn decision(probs: Vec<f64>) -> RelationDecision {
        let mask = probs.iter().map(|&p| p >= 0.5).collect();
        RelationDecision::new(probs, mask)
    }

    fn label(id: usize) -> RelationLabel {
        RelationLabel {
            id,
            text: format!("rel{id}"),
        }
    }

    fn boundary(q: [usize; 4], score: f64) -> DecodedBoundary {
        DecodedBoundary {
            h_start: q[0],
            h_end: q[1],
            t_start: q[2],
            t_end: q[3],
            score,
        }
    }

    #[test]
    fn each_criterion_rejects() {
        let c = InferConfig::default();
        assert_eq!(check(&boundary([5, 3, 6, 6], 0.9), 10, &c), Err(Rejection::StartAfterEnd));
        assert_eq!(check(&boundary([1, 1, 9, 11], 0.9), 10, &c), Err(Rejection::OutsideSentence));
        assert_eq!(check(&boundary([1, 16, 17, 17], 0.9), 20, &c), Err(Rejection::TooLong));
        assert_eq!(check(&boundary([1, 15, 17, 17], 0.9), 20, &c), Ok(()));
        assert_eq!(check(&boundary([1, 1, 2, 2], 0.39), 10, &c), Err(Rejection::BelowThreshold));
        assert_eq!(check(&boundary([1, 1, 2, 2], 0.40), 10, &c), Ok(()));
        assert_eq!(check(&boundary([0; 4], 1.0), 10, &c), Err(Rejection::Null));
        assert_eq!(check(&boundary([0, 0, 2, 2], 1.0), 10, &c), Err(Rejection::OutsideSentence));
    }

    #[test]
    fn duplicates_keep_max_score() {
        let q = [1, 2, 4, 4];
        let p6 = 0.6f64.powf(0.25);
        let p8 = 0.8f64.powf(0.25);
        let set = BoundarySet {
            relations: vec![peaked(12, &[(q, p6), (q, p8)])],
        };
        let out = extract(&decision(vec![1.0]), &set, &[label(0)], &[layout(8)], &InferConfig::default());
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 0.8).abs() < 1e-12);
        assert_eq!(out[0].head, Span::new(0, 1));
        assert_eq!(out[0].tail, Span::new(3, 3));
    }

    #[test]
    fn score_includes_relation_probability_and_null_is_dropped() {
        let set = BoundarySet {
            relations: vec![peaked(12, &[([1, 1, 3, 3], 1.0), ([0, 0, 0, 0], 1.0)])],
        };
        let d = decision(vec![0.2, 0.7]);
        let out = extract(&d, &set, &[label(0), label(1)], &[layout(8), layout(8)], &InferConfig::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].relation.id, 1);
        assert!((out[0].score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_decision_gives_nothing() {
        let d = decision(vec![0.1]);
        let out = extract(&d, &BoundarySet::default(), &[label(0)], &[layout(4)], &InferConfig::default());
        assert!(out.is_empty());
    }

    #[test]
    fn top1_breaks_ties() {
        let t = |rel, hs, score| PredictedTriplet {
            head: Span::new(hs, hs),
            tail: Span::new(5, 5),
            relation: label(rel),
            score,
        };
        assert_eq!(top1(&[t(0, 0, 0.2), t(1, 1, 0.9)]).unwrap().score, 0.9);
        assert!(top1(&[]).is_none());
        let tied = [t(2, 0, 0.5), t(1, 3, 0.5), t(1, 2, 0.5)];
        let best = top1(&tied).unwrap();
        assert_eq!((best.relation.id, best.head.start), (1, 2));
    }
}
