//! Scoring: single-triplet accuracy, multi-triplet micro P/R/F1,
//! relation-selection scores, fold averaging and the random-selector
//! baseline.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, RelationLabel, Span};
use crate::error::{Error, Result};
use crate::infer::{top1, PredictedTriplet};

/// What a model produced for one sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub triplets: Vec<PredictedTriplet>,
    /// Relations that passed the selector.
    pub relations: Vec<RelationLabel>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Compares a predicted and a gold set.
    pub fn of_sets<T: Eq + std::hash::Hash>(pred: &HashSet<T>, gold: &HashSet<T>) -> Self {
        let tp = pred.intersection(gold).count();
        Self {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Exact-match identity of a triplet: word spans and relation text.
pub type TripletKey = (Span, Span, String);

fn gold_keys(instance: &Instance) -> HashSet<TripletKey> {
    instance
        .triplets
        .iter()
        .map(|t| (t.head, t.tail, t.relation.text.clone()))
        .collect()
}

fn predicted_keys(triplets: &[PredictedTriplet]) -> HashSet<TripletKey> {
    triplets
        .iter()
        .map(|t| (t.head, t.tail, t.relation.text.clone()))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Single-triplet accuracy.
    pub acc: f64,
    /// Micro scores over multi-triplet sentences.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub relation_precision: f64,
    pub relation_recall: f64,
    pub relation_f1: f64,
    pub single_count: usize,
    pub multi_count: usize,
}

impl ScoreReport {
    /// The early-stopping score: multi-triplet F1, or accuracy when there
    /// are no multi-triplet sentences.
    pub fn validation_score(&self) -> f64 {
        if self.multi_count > 0 {
            self.f1
        } else {
            self.acc
        }
    }
}

fn check_ids(predictions: &HashMap<String, Prediction>, gold: &[Instance]) -> Result<()> {
    let ids: HashSet<&str> = gold.iter().map(|i| i.id.as_str()).collect();
    let mut unknown: Vec<&String> = predictions.keys().filter(|k| !ids.contains(k.as_str())).collect();
    unknown.sort();
    match unknown.first() {
        Some(id) => Err(Error::Input(format!("prediction for unknown instance {id:?}"))),
        None => Ok(()),
    }
}

/// Exact-match triplet counts pooled over every sentence of `gold`.
pub fn micro_counts(predictions: &HashMap<String, Prediction>, gold: &[Instance]) -> Result<Counts> {
    check_ids(predictions, gold)?;
    let mut c = Counts::default();
    for inst in gold {
        let pred = predictions.get(&inst.id).map_or(&[][..], |p| &p.triplets[..]);
        c.add(Counts::of_sets(&predicted_keys(pred), &gold_keys(inst)));
    }
    Ok(c)
}

/// Scores predictions keyed by instance id against `gold`. Sentences with
/// one gold triplet feed accuracy, the rest feed the micro scores; missing
/// predictions count as empty.
pub fn score(predictions: &HashMap<String, Prediction>, gold: &[Instance]) -> Result<ScoreReport> {
    check_ids(predictions, gold)?;
    let empty = Prediction::default();
    let mut correct = 0usize;
    let mut single = 0usize;
    let mut multi = 0usize;
    let mut triplets = Counts::default();
    let mut relations = Counts::default();
    for inst in gold {
        let pred = predictions.get(&inst.id).unwrap_or(&empty);
        let gold_set = gold_keys(inst);
        if inst.triplets.len() == 1 {
            single += 1;
            if let Some(t) = top1(&pred.triplets) {
                if gold_set.contains(&(t.head, t.tail, t.relation.text.clone())) {
                    correct += 1;
                }
            }
        } else {
            multi += 1;
            triplets.add(Counts::of_sets(&predicted_keys(&pred.triplets), &gold_set));
        }
        let pred_rel: HashSet<&str> = pred.relations.iter().map(|r| r.text.as_str()).collect();
        let gold_rel: HashSet<&str> = inst.triplets.iter().map(|t| t.relation.text.as_str()).collect();
        relations.add(Counts::of_sets(&pred_rel, &gold_rel));
    }
    Ok(ScoreReport {
        acc: ratio(correct, single),
        precision: triplets.precision(),
        recall: triplets.recall(),
        f1: triplets.f1(),
        relation_precision: relations.precision(),
        relation_recall: relations.recall(),
        relation_f1: relations.f1(),
        single_count: single,
        multi_count: multi,
    })
}

/// Arithmetic mean of every metric; counts are summed.
pub fn average_folds(reports: &[ScoreReport]) -> ScoreReport {
    if reports.is_empty() {
        return ScoreReport::default();
    }
    let n = reports.len() as f64;
    // Offsets from the first report keep the mean of identical values exact.
    let mean = |f: fn(&ScoreReport) -> f64| {
        let base = f(&reports[0]);
        base + reports.iter().map(|r| f(r) - base).sum::<f64>() / n
    };
    ScoreReport {
        acc: mean(|r| r.acc),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        relation_precision: mean(|r| r.relation_precision),
        relation_recall: mean(|r| r.relation_recall),
        relation_f1: mean(|r| r.relation_f1),
        single_count: reports.iter().map(|r| r.single_count).sum(),
        multi_count: reports.iter().map(|r| r.multi_count).sum(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Relation selection by uniform random probabilities: a candidate passes
/// when its draw is at least `delta`. Counts are pooled over all trials.
pub fn random_selector_baseline<R: Rng + ?Sized>(
    gold_mask: &[bool],
    delta: f64,
    rng: &mut R,
    trials: usize,
) -> RelationScores {
    let mut c = Counts::default();
    for _ in 0..trials {
        for &gold in gold_mask {
            let pass = rng.random::<f64>() >= delta;
            match (pass, gold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    RelationScores {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
    }
}

/// Evaluation output: one report per fold and their mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub m: Option<usize>,
    pub folds: Vec<(usize, ScoreReport)>,
    pub mean: ScoreReport,
}

impl EvalSummary {
    pub fn new(m: Option<usize>, folds: Vec<(usize, ScoreReport)>) -> Self {
        let mean = average_folds(&folds.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
        Self { m, folds, mean }
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let m = self.m.map_or("-".to_string(), |m| m.to_string());
        writeln!(
            out,
            "{:<6} {:<4} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "fold", "m", "Acc", "P", "R", "F1", "RelP", "RelR", "RelF1"
        )
        .unwrap();
        let mut row = |name: &str, r: &ScoreReport| {
            writeln!(
                out,
                "{:<6} {:<4} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                name,
                m,
                100.0 * r.acc,
                100.0 * r.precision,
                100.0 * r.recall,
                100.0 * r.f1,
                100.0 * r.relation_precision,
                100.0 * r.relation_recall,
                100.0 * r.relation_f1
            )
            .unwrap();
        };
        for (fold, r) in &self.folds {
            row(&fold.to_string(), r);
        }
        if self.folds.len() > 1 {
            row("mean", &self.mean);
        }
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let json = serde_json::to_string_pretty(self)? + "\n";
        let write = |name: &str, text: &str| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
        };
        write("report.json", &json)?;
        write("report.txt", &self.table())
    }
}
