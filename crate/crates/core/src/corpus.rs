//! Sentence/triplet data model, JSONL ingestion and the zero-shot fold protocol.
//!
//! Corpus files are JSON lines. Each record carries the sentence words and a
//! list of triplets whose head and tail are lists of contiguous word indices
//! plus the relation surface text (see `docs/corpus-format.md`). Records in
//! the layout of the publicly released zero-shot processed FewRel/Wiki-ZSL
//! files, where the words live inside each triplet, load as-is.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of unseen relation labels reserved for validation in every fold.
pub const VALIDATION_LABELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationLabel {
    pub id: usize,
    pub text: String,
}

/// Deduplicated relation labels; ids are dense and follow first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<RelationLabel>,
    by_text: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_texts<I, S>(texts: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set = Self::new();
        for text in texts {
            set.intern(text.as_ref())?;
        }
        Ok(set)
    }

    /// Returns the label for `text`, inserting it if new.
    pub fn intern(&mut self, text: &str) -> Result<RelationLabel> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::Validation("relation label text is empty".into()));
        }
        if let Some(&id) = self.by_text.get(text) {
            return Ok(self.labels[id].clone());
        }
        let label = RelationLabel {
            id: self.labels.len(),
            text: text.to_string(),
        };
        self.by_text.insert(label.text.clone(), label.id);
        self.labels.push(label.clone());
        Ok(label)
    }

    pub fn get(&self, id: usize) -> Option<&RelationLabel> {
        self.labels.get(id)
    }

    pub fn by_text(&self, text: &str) -> Option<&RelationLabel> {
        self.by_text.get(text.trim()).map(|&id| &self.labels[id])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RelationLabel> {
        self.labels.iter()
    }

    pub fn as_slice(&self) -> &[RelationLabel] {
        &self.labels
    }
}

/// Inclusive word span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Number of words covered.
    pub fn width(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_valid_for(&self, word_count: usize) -> bool {
        self.start <= self.end && self.end < word_count
    }

    pub fn text(&self, words: &[String]) -> String {
        words[self.start..=self.end].join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub head: Span,
    pub tail: Span,
    pub relation: RelationLabel,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub words: Vec<String>,
    pub triplets: Vec<Triplet>,
}

impl Instance {
    /// Distinct gold relations in first-appearance order.
    pub fn gold_relations(&self) -> Vec<RelationLabel> {
        let mut seen = HashSet::new();
        self.triplets
            .iter()
            .filter(|t| seen.insert(t.relation.id))
            .map(|t| t.relation.clone())
            .collect()
    }

    fn relation_ids(&self) -> BTreeSet<usize> {
        self.triplets.iter().map(|t| t.relation.id).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub labels: LabelSet,
}

impl Corpus {
    pub fn by_id(&self) -> HashMap<&str, &Instance> {
        self.instances.iter().map(|i| (i.id.as_str(), i)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default, alias = "words")]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    triplets: Vec<RawTriplet>,
}

#[derive(Debug, Deserialize)]
struct RawTriplet {
    #[serde(default)]
    tokens: Option<Vec<String>>,
    head: Vec<usize>,
    tail: Vec<usize>,
    label: String,
}

#[derive(Debug, Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    tokens: &'a [String],
    triplets: Vec<OutTriplet<'a>>,
}

#[derive(Debug, Serialize)]
struct OutTriplet<'a> {
    head: Vec<usize>,
    tail: Vec<usize>,
    label: &'a str,
}

fn indices_to_span(indices: &[usize], what: &str) -> std::result::Result<Span, String> {
    let (&first, &last) = match (indices.first(), indices.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(format!("{what} has no word indices")),
    };
    for pair in indices.windows(2) {
        if pair[1] != pair[0] + 1 {
            return Err(format!("{what} indices {indices:?} are not contiguous"));
        }
    }
    Ok(Span::new(first, last))
}

/// Reads a corpus file. Labels are deduplicated by text.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let path = path.as_ref();
    match format {
        CorpusFormat::Jsonl => {
            let file = fs::File::open(path)
                .map_err(|e| Error::io(format!("opening corpus {}", path.display()), e))?;
            parse_jsonl(BufReader::new(file), path)
        }
    }
}

pub(crate) fn parse_jsonl(reader: impl BufRead, path: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: RawRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let words = match (&record.tokens, record.triplets.first()) {
            (Some(tokens), _) => tokens.clone(),
            (None, Some(RawTriplet { tokens: Some(t), .. })) => t.clone(),
            _ => return Err(parse_err("record carries no tokens".into())),
        };
        if record.triplets.is_empty() {
            return Err(parse_err("record has no triplets".into()));
        }
        let id = record.id.unwrap_or_else(|| format!("line-{line_no}"));
        if !ids.insert(id.clone()) {
            return Err(parse_err(format!("duplicate instance id {id:?}")));
        }
        let mut triplets = Vec::with_capacity(record.triplets.len());
        for (t_idx, raw) in record.triplets.iter().enumerate() {
            if let Some(tokens) = &raw.tokens {
                if *tokens != words {
                    return Err(parse_err(format!(
                        "triplet {t_idx} tokens differ from the sentence tokens"
                    )));
                }
            }
            let head = indices_to_span(&raw.head, "head").map_err(parse_err)?;
            let tail = indices_to_span(&raw.tail, "tail").map_err(parse_err)?;
            for (span, what) in [(head, "head"), (tail, "tail")] {
                if !span.is_valid_for(words.len()) {
                    return Err(Error::Validation(format!(
                        "{}:{line_no}: {what} span {}..={} out of range for {} words",
                        path.display(),
                        span.start,
                        span.end,
                        words.len()
                    )));
                }
            }
            let relation = corpus.labels.intern(&raw.label).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("{}:{line_no}: {m}", path.display())),
                other => other,
            })?;
            triplets.push(Triplet {
                head,
                tail,
                relation,
            });
        }
        corpus.instances.push(Instance {
            id,
            words,
            triplets,
        });
    }
    Ok(corpus)
}

/// Writes instances in the ingestion schema.
pub fn write_jsonl(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for inst in instances {
        let record = OutRecord {
            id: &inst.id,
            tokens: &inst.words,
            triplets: inst
                .triplets
                .iter()
                .map(|t| OutTriplet {
                    head: (t.head.start..=t.head.end).collect(),
                    tail: (t.tail.start..=t.tail.end).collect(),
                    label: &t.relation.text,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&out)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotSplit {
    pub fold_seed: u64,
    pub seen_labels: Vec<RelationLabel>,
    pub validation_labels: Vec<RelationLabel>,
    /// Unseen labels of the test partition.
    pub unseen_labels: Vec<RelationLabel>,
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Serialized form of one fold: labels by text, instances by id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub fold: usize,
    pub fold_seed: u64,
    pub m: usize,
    pub seen_labels: Vec<String>,
    pub validation_labels: Vec<String>,
    pub test_labels: Vec<String>,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl ZeroShotSplit {
    pub fn to_manifest(&self, fold: usize) -> SplitManifest {
        let texts = |labels: &[RelationLabel]| labels.iter().map(|l| l.text.clone()).collect();
        let ids = |insts: &[Instance]| insts.iter().map(|i| i.id.clone()).collect();
        SplitManifest {
            fold,
            fold_seed: self.fold_seed,
            m: self.unseen_labels.len(),
            seen_labels: texts(&self.seen_labels),
            validation_labels: texts(&self.validation_labels),
            test_labels: texts(&self.unseen_labels),
            train: ids(&self.train),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }

    /// Rebuilds a fold from its manifest against the corpus it was cut from.
    pub fn from_manifest(manifest: &SplitManifest, corpus: &Corpus) -> Result<Self> {
        let labels = |texts: &[String]| -> Result<Vec<RelationLabel>> {
            texts
                .iter()
                .map(|t| {
                    corpus.labels.by_text(t).cloned().ok_or_else(|| {
                        Error::Validation(format!("manifest label {t:?} not in corpus"))
                    })
                })
                .collect()
        };
        let by_id = corpus.by_id();
        let insts = |ids: &[String]| -> Result<Vec<Instance>> {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|&i| i.clone()).ok_or_else(|| {
                        Error::Validation(format!("manifest instance {id:?} not in corpus"))
                    })
                })
                .collect()
        };
        Ok(Self {
            fold_seed: manifest.fold_seed,
            seen_labels: labels(&manifest.seen_labels)?,
            validation_labels: labels(&manifest.validation_labels)?,
            unseen_labels: labels(&manifest.test_labels)?,
            train: insts(&manifest.train)?,
            validation: insts(&manifest.validation)?,
            test: insts(&manifest.test)?,
        })
    }
}

impl SplitManifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Cuts `n_folds` zero-shot folds. Per fold, `m` test labels and
/// [`VALIDATION_LABELS`] validation labels are drawn with the fold seed and
/// the rest are seen. An instance lands in the partition that holds all of its
/// relations; instances spanning partitions are dropped.
pub fn make_splits(
    instances: &[Instance],
    labels: &LabelSet,
    m: usize,
    n_folds: usize,
    seeds: &[u64],
) -> Result<Vec<ZeroShotSplit>> {
    if m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    if m + VALIDATION_LABELS > labels.len() {
        return Err(Error::Config(format!(
            "m={m} plus {VALIDATION_LABELS} validation labels exceeds the {} available labels",
            labels.len()
        )));
    }
    if seeds.len() != n_folds {
        return Err(Error::Config(format!(
            "{} seeds given for {n_folds} folds",
            seeds.len()
        )));
    }
    let folds = seeds
        .iter()
        .map(|&seed| {
            let mut ids: Vec<usize> = labels.iter().map(|l| l.id).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ids.shuffle(&mut rng);
            let mut test: Vec<usize> = ids[..m].to_vec();
            let mut validation: Vec<usize> = ids[m..m + VALIDATION_LABELS].to_vec();
            let mut seen: Vec<usize> = ids[m + VALIDATION_LABELS..].to_vec();
            test.sort_unstable();
            validation.sort_unstable();
            seen.sort_unstable();

            let seen_set: BTreeSet<usize> = seen.iter().copied().collect();
            let val_set: BTreeSet<usize> = validation.iter().copied().collect();
            let test_set: BTreeSet<usize> = test.iter().copied().collect();
            let (mut train_i, mut val_i, mut test_i) = (Vec::new(), Vec::new(), Vec::new());
            for inst in instances {
                let rels = inst.relation_ids();
                if rels.is_subset(&seen_set) {
                    train_i.push(inst.clone());
                } else if rels.is_subset(&val_set) {
                    val_i.push(inst.clone());
                } else if rels.is_subset(&test_set) {
                    test_i.push(inst.clone());
                }
            }
            let to_labels =
                |ids: &[usize]| ids.iter().map(|&i| labels.as_slice()[i].clone()).collect();
            ZeroShotSplit {
                fold_seed: seed,
                seen_labels: to_labels(&seen),
                validation_labels: to_labels(&validation),
                unseen_labels: to_labels(&test),
                train: train_i,
                validation: val_i,
                test: test_i,
            }
        })
        .collect();
    Ok(folds)
}
