//! Bidirectional transformer encoder over sentence/relation rows.
//!
//! The same post-norm architecture serves two roles: a small randomly
//! initialized encoder (tests, synthetic runs) and an adapter for pretrained
//! BERT-style checkpoints in safetensors format, whose tensors are mapped
//! onto this layout by [`Encoder::load_pretrained`].

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedGroup;
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, INIT_STD};
use crate::params::{normal_mat, view_to_mat, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_positions: usize,
    pub type_vocab: usize,
    pub layer_norm_eps: f64,
    pub freeze_word_embeddings: bool,
}

impl EncoderConfig {
    /// Two layers, 16 hidden units, two heads.
    pub fn tiny(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            vocab_size,
            hidden: 16,
            layers: 2,
            heads: 2,
            intermediate: 32,
            max_positions,
            type_vocab: 2,
            layer_norm_eps: 1e-12,
            freeze_word_embeddings: false,
        }
    }

    /// Reads a BERT `config.json`.
    pub fn from_bert_config(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Bert {
            vocab_size: usize,
            hidden_size: usize,
            num_hidden_layers: usize,
            num_attention_heads: usize,
            intermediate_size: usize,
            max_position_embeddings: usize,
            #[serde(default = "two")]
            type_vocab_size: usize,
            #[serde(default = "bert_eps")]
            layer_norm_eps: f64,
        }
        fn two() -> usize {
            2
        }
        fn bert_eps() -> f64 {
            1e-12
        }
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let b: Bert = serde_json::from_str(&text)?;
        Ok(Self {
            vocab_size: b.vocab_size,
            hidden: b.hidden_size,
            layers: b.num_hidden_layers,
            heads: b.num_attention_heads,
            intermediate: b.intermediate_size,
            max_positions: b.max_position_embeddings,
            type_vocab: b.type_vocab_size,
            layer_norm_eps: b.layer_norm_eps,
            freeze_word_embeddings: true,
        })
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attention: Attention,
    attention_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    word: ParamId,
    position: ParamId,
    segment: ParamId,
    embedding_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
}

/// `values` is `G × l × d`; `cls` holds position 0 of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualRepr {
    pub values: Array3<f64>,
    pub cls: Array2<f64>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = config.hidden;
        let word = store.add(
            "encoder.embeddings.word",
            normal_mat(rng, config.vocab_size, d, INIT_STD),
            !config.freeze_word_embeddings,
        );
        let position = store.add(
            "encoder.embeddings.position",
            normal_mat(rng, config.max_positions, d, INIT_STD),
            true,
        );
        let segment = store.add(
            "encoder.embeddings.segment",
            normal_mat(rng, config.type_vocab, d, INIT_STD),
            true,
        );
        let embedding_norm = LayerNorm::new(store, "encoder.embeddings.norm", d, config.layer_norm_eps);
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncoderLayer {
                    attention: Attention::new(store, rng, &format!("{p}.attention"), d, config.heads),
                    attention_norm: LayerNorm::new(store, &format!("{p}.attention_norm"), d, config.layer_norm_eps),
                    ffn: FeedForward::new(store, rng, &format!("{p}.ffn"), d, config.intermediate),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d, config.layer_norm_eps),
                }
            })
            .collect();
        Self {
            config,
            word,
            position,
            segment,
            embedding_norm,
            layers,
        }
    }

    pub fn word_embeddings(&self) -> ParamId {
        self.word
    }

    /// Rejects ids outside the vocabulary and rows longer than the position table.
    pub fn check_group(&self, group: &AugmentedGroup) -> Result<()> {
        if let Some(&bad) = group.token_ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&bad) = group.segment_ids.iter().find(|&&s| s as usize >= self.config.type_vocab) {
            return Err(Error::Input(format!("segment id {bad} outside type vocabulary")));
        }
        if group.max_len() > self.config.max_positions {
            return Err(Error::Input(format!(
                "sequence length {} exceeds {} positions",
                group.max_len(),
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Encodes one row to an `l × d` variable. With `trace`, the last layer's
    /// per-head attention matrices are recorded.
    pub fn forward_row(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        group: &AugmentedGroup,
        row: usize,
        trace: Option<&mut Vec<Mat>>,
    ) -> Var {
        let ids: Vec<usize> = group.token_ids.row(row).iter().map(|&i| i as usize).collect();
        let segs: Vec<usize> = group.segment_ids.row(row).iter().map(|&s| s as usize).collect();
        let mask: Arc<[bool]> = Arc::from(group.key_mask(row));
        let l = ids.len();

        let word = tape.param(store, self.word);
        let position = tape.param(store, self.position);
        let segment = tape.param(store, self.segment);
        let w = tape.gather(word, ids);
        let p = tape.gather(position, (0..l).collect());
        let s = tape.gather(segment, segs);
        let x = tape.add(w, p);
        let x = tape.add(x, s);
        let mut x = self.embedding_norm.forward(tape, store, x);

        let mut trace = trace;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let t = if i == last { trace.as_deref_mut() } else { None };
            let a = layer.attention.forward(tape, store, x, x, Arc::clone(&mask), t);
            let x1 = tape.add(x, a);
            let x1 = layer.attention_norm.forward(tape, store, x1);
            let f = layer.ffn.forward(tape, store, x1);
            let x2 = tape.add(x1, f);
            x = layer.ffn_norm.forward(tape, store, x2);
        }
        x
    }

    /// Evaluation-mode encoding of a whole group.
    pub fn encode(&self, store: &ParamStore, group: &AugmentedGroup) -> Result<ContextualRepr> {
        self.check_group(group)?;
        let (g, l, d) = (group.len(), group.max_len(), self.config.hidden);
        let mut values = Array3::zeros((g, l, d));
        for r in 0..g {
            let mut tape = Tape::inference();
            let h = self.forward_row(&mut tape, store, group, r, None);
            values.index_axis_mut(Axis(0), r).assign(tape.value(h));
        }
        let cls = values.index_axis(Axis(1), 0).to_owned();
        Ok(ContextualRepr { values, cls })
    }

    /// Pairs every encoder parameter with its name in a BERT checkpoint and
    /// whether the stored matrix is transposed relative to ours.
    fn pretrained_names(&self) -> Vec<(ParamId, String, bool)> {
        let mut out = vec![
            (self.word, "embeddings.word_embeddings.weight".to_string(), false),
            (self.position, "embeddings.position_embeddings.weight".into(), false),
            (self.segment, "embeddings.token_type_embeddings.weight".into(), false),
            (self.embedding_norm.gamma, "embeddings.LayerNorm.weight".into(), false),
            (self.embedding_norm.beta, "embeddings.LayerNorm.bias".into(), false),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("encoder.layer.{i}");
            let a = &layer.attention;
            for (lin, name) in [
                (&a.query, format!("{p}.attention.self.query")),
                (&a.key, format!("{p}.attention.self.key")),
                (&a.value, format!("{p}.attention.self.value")),
                (&a.output, format!("{p}.attention.output.dense")),
                (&layer.ffn.inner, format!("{p}.intermediate.dense")),
                (&layer.ffn.outer, format!("{p}.output.dense")),
            ] {
                out.push((lin.weight, format!("{name}.weight"), true));
                if let Some(b) = lin.bias {
                    out.push((b, format!("{name}.bias"), false));
                }
            }
            for (norm, name) in [
                (&layer.attention_norm, format!("{p}.attention.output.LayerNorm")),
                (&layer.ffn_norm, format!("{p}.output.LayerNorm")),
            ] {
                out.push((norm.gamma, format!("{name}.weight"), false));
                out.push((norm.beta, format!("{name}.bias"), false));
            }
        }
        out
    }

    /// Overwrites the encoder parameters from a BERT safetensors file. Accepts
    /// names with or without a `bert.` prefix and the legacy
    /// `gamma`/`beta` LayerNorm names.
    pub fn load_pretrained(&self, store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let file = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        let lookup = |name: &str| {
            let legacy = name
                .replace("LayerNorm.weight", "LayerNorm.gamma")
                .replace("LayerNorm.bias", "LayerNorm.beta");
            [name.to_string(), format!("bert.{name}"), legacy.clone(), format!("bert.{legacy}")]
                .into_iter()
                .find_map(|n| file.tensor(&n).ok())
        };
        for (id, name, transposed) in self.pretrained_names() {
            let view = lookup(&name)
                .ok_or_else(|| Error::Load(format!("{} lacks tensor {name}", path.display())))?;
            let mut value = view_to_mat(&view)?;
            if transposed {
                value = value.t().to_owned();
            }
            let expected = store.value(id).dim();
            if value.dim() != expected {
                return Err(Error::Load(format!(
                    "pretrained tensor {name} has shape {:?}, expected {expected:?}",
                    value.dim()
                )));
            }
            store.set(id, value);
        }
        Ok(())
    }
}
