//! Run configuration: a flat `key = value` file with `#` comments. Command
//! line overrides use the same keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    FewRel,
    WikiZsl,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fewrel" => Ok(Self::FewRel),
            "wiki-zsl" | "wikizsl" => Ok(Self::WikiZsl),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FewRel => "fewrel",
            Self::WikiZsl => "wiki-zsl",
        }
    }
}

/// Which encoder to build.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderChoice {
    /// Small randomly initialized encoder with a vocabulary built from the
    /// corpus.
    Tiny,
    /// Directory with `config.json`, `vocab.txt` and `model.safetensors`.
    Pretrained(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub corpus: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub encoder: EncoderChoice,
    pub lowercase: bool,
    pub device: String,

    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub warmup_ratio: f64,
    pub max_span: usize,
    pub max_seq_len: usize,
    /// Relation threshold δ.
    pub relation_threshold: f64,
    /// Boundary threshold β.
    pub boundary_threshold: f64,
    /// Candidate relations per training sentence (G).
    pub group_size: usize,
    /// Decoder queries per relation (N).
    pub queries: usize,
    /// Loss weight α.
    pub alpha: f64,
    /// Stop as soon as the validation score reaches this value.
    pub target_score: Option<f64>,

    pub tiny_hidden: usize,
    pub tiny_layers: usize,
    pub tiny_heads: usize,
    pub tiny_intermediate: usize,
    pub decoder_heads: usize,
    pub decoder_layers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::FewRel)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (group_size, queries) = match preset {
            Preset::FewRel => (5, 4),
            Preset::WikiZsl => (6, 6),
        };
        Self {
            preset,
            corpus: None,
            splits: None,
            output: None,
            seed: 42,
            encoder: EncoderChoice::Tiny,
            lowercase: true,
            device: "cpu".into(),
            batch_size: 16,
            max_epochs: 10,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            patience: 4,
            warmup_ratio: 0.2,
            max_span: 15,
            max_seq_len: 100,
            relation_threshold: 0.5,
            boundary_threshold: 0.4,
            group_size,
            queries,
            alpha: 1.0,
            target_score: None,
            tiny_hidden: 16,
            tiny_layers: 2,
            tiny_heads: 2,
            tiny_intermediate: 32,
            decoder_heads: 2,
            decoder_layers: 1,
        }
    }

    /// Parses `key = value` lines. A `preset` line, wherever it appears,
    /// selects the defaults the other keys override.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, found {raw:?}", i + 1))
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let mut config = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => Self::preset(Preset::parse(v)?),
            None => Self::default(),
        };
        for (k, v) in &pairs {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Applies one override. Call [`RunConfig::validate`] afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, found {value:?}"))),
            }
        }
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "preset" => {
                let p = Preset::parse(value)?;
                if p != self.preset {
                    let fresh = Self::preset(p);
                    self.preset = p;
                    self.group_size = fresh.group_size;
                    self.queries = fresh.queries;
                }
            }
            "corpus" => self.corpus = path(value),
            "splits" => self.splits = path(value),
            "output" => self.output = path(value),
            "seed" => self.seed = num(key, value)?,
            "encoder" => {
                self.encoder = match value {
                    "tiny" => EncoderChoice::Tiny,
                    dir => EncoderChoice::Pretrained(PathBuf::from(dir)),
                }
            }
            "lowercase" => self.lowercase = flag(key, value)?,
            "device" => self.device = value.to_string(),
            "batch_size" => self.batch_size = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "warmup_ratio" => self.warmup_ratio = num(key, value)?,
            "max_span" => self.max_span = num(key, value)?,
            "max_seq_len" => self.max_seq_len = num(key, value)?,
            "relation_threshold" => self.relation_threshold = num(key, value)?,
            "boundary_threshold" => self.boundary_threshold = num(key, value)?,
            "group_size" => self.group_size = num(key, value)?,
            "queries" => self.queries = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "target_score" => {
                self.target_score = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "tiny_hidden" => self.tiny_hidden = num(key, value)?,
            "tiny_layers" => self.tiny_layers = num(key, value)?,
            "tiny_heads" => self.tiny_heads = num(key, value)?,
            "tiny_intermediate" => self.tiny_intermediate = num(key, value)?,
            "decoder_heads" => self.decoder_heads = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("relation_threshold", self.relation_threshold),
            ("boundary_threshold", self.boundary_threshold),
            ("warmup_ratio", self.warmup_ratio),
            ("alpha", self.alpha),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("max_span", self.max_span),
            ("max_seq_len", self.max_seq_len),
            ("group_size", self.group_size),
            ("queries", self.queries),
            ("tiny_hidden", self.tiny_hidden),
            ("tiny_layers", self.tiny_layers),
            ("tiny_heads", self.tiny_heads),
            ("tiny_intermediate", self.tiny_intermediate),
            ("decoder_heads", self.decoder_heads),
            ("decoder_layers", self.decoder_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !self.tiny_hidden.is_multiple_of(self.tiny_heads) || !self.tiny_hidden.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config("hidden size must be divisible by the head counts".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("device {:?} is not available; only cpu is", self.device)));
        }
        Ok(())
    }

    /// Serializes every key; `parse` of the result gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = |v: &Option<PathBuf>| v.as_ref().map_or(String::new(), |p| p.display().to_string());
        let encoder = match &self.encoder {
            EncoderChoice::Tiny => "tiny".to_string(),
            EncoderChoice::Pretrained(d) => d.display().to_string(),
        };
        let target = self.target_score.map_or("none".to_string(), |t| t.to_string());
        let entries: Vec<(&str, String)> = vec![
            ("preset", self.preset.name().into()),
            ("corpus", p(&self.corpus)),
            ("splits", p(&self.splits)),
            ("output", p(&self.output)),
            ("seed", self.seed.to_string()),
            ("encoder", encoder),
            ("lowercase", self.lowercase.to_string()),
            ("device", self.device.clone()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("patience", self.patience.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("max_span", self.max_span.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("relation_threshold", self.relation_threshold.to_string()),
            ("boundary_threshold", self.boundary_threshold.to_string()),
            ("group_size", self.group_size.to_string()),
            ("queries", self.queries.to_string()),
            ("alpha", self.alpha.to_string()),
            ("target_score", target),
            ("tiny_hidden", self.tiny_hidden.to_string()),
            ("tiny_layers", self.tiny_layers.to_string()),
            ("tiny_heads", self.tiny_heads.to_string()),
            ("tiny_intermediate", self.tiny_intermediate.to_string()),
            ("decoder_heads", self.decoder_heads.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
        ];
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_presets() {
        let f = RunConfig::default();
        assert_eq!((f.batch_size, f.max_epochs, f.patience, f.max_span, f.max_seq_len), (16, 10, 4, 15, 100));
        assert_eq!((f.learning_rate, f.relation_threshold, f.boundary_threshold), (5e-5, 0.5, 0.4));
        assert_eq!((f.group_size, f.queries, f.warmup_ratio, f.alpha), (5, 4, 0.2, 1.0));
        let w = RunConfig::preset(Preset::WikiZsl);
        assert_eq!((w.group_size, w.queries), (6, 6));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::preset(Preset::WikiZsl);
        c.corpus = Some("data/x.jsonl".into());
        c.alpha = 0.5;
        c.target_score = Some(0.95);
        c.encoder = EncoderChoice::Pretrained("models/bert".into());
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_overrides_and_errors() {
        let c = RunConfig::parse("# run\nqueries = 3 # fewer\n\npreset = wiki-zsl\n").unwrap();
        assert_eq!((c.queries, c.group_size), (3, 6));
        assert!(matches!(RunConfig::parse("alpha = 1.5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("batch_size = 0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("device = cuda"), Err(Error::Config(_))));
    }
}
