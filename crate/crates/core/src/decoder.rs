//! Entity boundary detection over one selected relation row at a time.
//!
//! `N` learned query vectors pass through self-attention, then attend to the
//! row's encoder states. Each of the four boundary heads scores every
//! position `i` for query `j` as `w · GELU(h_j W_q + H_i W_s) + b` and
//! normalizes with a softmax restricted to the sentinel and sentence
//! positions.

use std::sync::Arc;

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Attention, LayerNorm, Linear, INIT_STD};
use crate::params::{normal_mat, ParamId, ParamStore};
use crate::tape::{Mat, Tape, Var};

/// Boundary heads in output order.
pub const HEADS: [&str; 4] = ["head_start", "head_end", "tail_start", "tail_end"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Queries per relation (maximum triplets per relation).
    pub queries: usize,
    pub heads: usize,
    pub layers: usize,
    pub layer_norm_eps: f64,
}

impl DecoderConfig {
    pub fn new(queries: usize, heads: usize) -> Self {
        Self {
            queries,
            heads,
            layers: 1,
            layer_norm_eps: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attention: Attention,
    self_norm: LayerNorm,
    cross_attention: Attention,
    cross_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct BoundaryHead {
    query_proj: ParamId,
    seq_proj: ParamId,
    score: Linear,
}

#[derive(Clone, Debug)]
pub struct BoundaryDecoder {
    pub config: DecoderConfig,
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    heads: Vec<BoundaryHead>,
}

/// Per query row, a distribution over the `l` row positions, for each of
/// the four boundaries. Each matrix is `N × l`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadrupleDistributions {
    pub head_start: Mat,
    pub head_end: Mat,
    pub tail_start: Mat,
    pub tail_end: Mat,
}

impl QuadrupleDistributions {
    pub fn heads(&self) -> [&Mat; 4] {
        [&self.head_start, &self.head_end, &self.tail_start, &self.tail_end]
    }

    pub fn queries(&self) -> usize {
        self.head_start.nrows()
    }

    pub fn positions(&self) -> usize {
        self.head_start.ncols()
    }

    pub fn from_heads([hs, he, ts, te]: [Mat; 4]) -> Self {
        Self {
            head_start: hs,
            head_end: he,
            tail_start: ts,
            tail_end: te,
        }
    }
}

/// Distributions for every kept relation, in `kept_indices` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundarySet {
    pub relations: Vec<QuadrupleDistributions>,
}

/// Per-row attention record for visualization.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace {
    pub cross_attention: Vec<Mat>,
}

impl BoundaryDecoder {
    pub fn new<R: Rng + ?Sized>(
        config: DecoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
        hidden: usize,
    ) -> Self {
        let queries = store.add(
            "decoder.queries",
            normal_mat(rng, config.queries, hidden, INIT_STD),
            true,
        );
        let layers = (0..config.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attention: Attention::new(store, rng, &format!("{p}.self_attention"), hidden, config.heads),
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), hidden, config.layer_norm_eps),
                    cross_attention: Attention::new(store, rng, &format!("{p}.cross_attention"), hidden, config.heads),
                    cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), hidden, config.layer_norm_eps),
                }
            })
            .collect();
        let heads = HEADS
            .iter()
            .map(|name| BoundaryHead {
                query_proj: store.add(
                    format!("decoder.{name}.query_proj"),
                    normal_mat(rng, hidden, hidden, INIT_STD),
                    true,
                ),
                seq_proj: store.add(
                    format!("decoder.{name}.seq_proj"),
                    normal_mat(rng, hidden, hidden, INIT_STD),
                    true,
                ),
                score: Linear::new(store, rng, &format!("decoder.{name}.score"), hidden, 1, true),
            })
            .collect();
        Self {
            config,
            queries,
            layers,
            heads,
        }
    }

    pub fn query_embeddings(&self) -> ParamId {
        self.queries
    }

    /// Log-probabilities (`N × l` each) of the four boundaries for one
    /// relation row `seq` (`l × d`). `key_mask` marks non-padding positions;
    /// `boundary_mask` marks positions allowed to carry boundary mass.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
        key_mask: Arc<[bool]>,
        boundary_mask: Arc<[bool]>,
        mut trace: Option<&mut DecoderTrace>,
    ) -> [Var; 4] {
        let n = self.config.queries;
        let l = tape.value(seq).nrows();
        let mut q = tape.param(store, self.queries);
        let all_queries: Arc<[bool]> = Arc::from(vec![true; n]);
        for layer in &self.layers {
            let a = layer
                .self_attention
                .forward(tape, store, q, q, Arc::clone(&all_queries), None);
            let q1 = tape.add(q, a);
            let q1 = layer.self_norm.forward(tape, store, q1);
            let t = trace.as_deref_mut().map(|t| &mut t.cross_attention);
            let c = layer
                .cross_attention
                .forward(tape, store, q1, seq, Arc::clone(&key_mask), t);
            let q2 = tape.add(q1, c);
            q = layer.cross_norm.forward(tape, store, q2);
        }
        let mut out = Vec::with_capacity(4);
        for head in &self.heads {
            let wq = tape.param(store, head.query_proj);
            let ws = tape.param(store, head.seq_proj);
            let qh = tape.matmul(q, wq);
            let sh = tape.matmul(seq, ws);
            let pair = tape.pairwise_add(qh, sh);
            let act = tape.gelu(pair);
            let scores = head.score.forward(tape, store, act);
            let scores = tape.reshape(scores, n, l);
            out.push(tape.log_softmax(scores, Arc::clone(&boundary_mask)));
        }
        [out[0], out[1], out[2], out[3]]
    }

    /// Evaluation-mode decoding of filtered rows `h_f` (`λ × l × d`).
    /// `key_masks[r]` and `boundary_masks[r]` describe row `r`.
    pub fn decode_boundaries(
        &self,
        store: &ParamStore,
        h_f: &Array3<f64>,
        key_masks: &[Vec<bool>],
        boundary_masks: &[Vec<bool>],
    ) -> BoundarySet {
        let relations = h_f
            .axis_iter(Axis(0))
            .enumerate()
            .map(|(r, row)| {
                let mut tape = Tape::inference();
                let seq = tape.constant(row.to_owned());
                let logp = self.forward(
                    &mut tape,
                    store,
                    seq,
                    Arc::from(key_masks[r].clone()),
                    Arc::from(boundary_masks[r].clone()),
                    None,
                );
                distributions(&tape, logp)
            })
            .collect();
        BoundarySet { relations }
    }
}

/// Exponentiates the four log-probability matrices.
pub fn distributions(tape: &Tape, logp: [Var; 4]) -> QuadrupleDistributions {
    QuadrupleDistributions::from_heads(logp.map(|v| tape.value(v).mapv(f64::exp)))
}
