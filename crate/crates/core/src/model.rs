//! The contextual triple classifier.
//!
//! A triple's assembled slot sequence is embedded as follows: anchor and
//! padding slots draw rows from a marker table, context slots are encoded
//! from their triple's entity/relation embeddings by a single-layer
//! feed-forward triple encoder, and every slot gets its segment embedding
//! added. No positional signal is used anywhere.
//!
//! The embedded sequence runs through a stack of bidirectional post-norm
//! transformer layers in which padding slots are masked out of attention.
//! Classification reads the anchor positions:
//!
//! * pretraining combines the head/relation/tail anchors through an
//!   interaction layer, then projects to two classes;
//! * task finetuning projects the aggregate anchor directly.
//!
//! Both heads emit softmax probabilities with the positive class first.

use std::collections::HashMap;

use rand::Rng;

use crate::context::{
    anchor_positions, ContextSequence, Slot, MARKER_COUNT, SEGMENT_COUNT,
};
use crate::kg::{Triple, TripleStore};
use crate::tensor::{
    add, add_row, backprop, concat_cols, concat_rows, dropout, gather_rows, layer_norm,
    log_clamped, matmul, mul, relu, scale, slice_cols, slice_rows, softmax_rows, sum_all,
    transpose, Result, Tensor, TensorError,
};

/// Additive attention bias for masked keys. Large enough that the softmax
/// exponent underflows to exactly zero, so padding contributes nothing.
pub const MASK_BIAS: f64 = -1e30;

/// Probabilities are clamped to this floor before the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Initialization deviation for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Which classification head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHead {
    /// Triple classification over anchor readouts (pretraining objective).
    Pretrain,
    /// Pair classification over the aggregate readout (task objective).
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context slots per anchor segment.
    pub cap: usize,
    pub dropout: f64,
    pub n_entities: usize,
    pub n_relations: usize,
}

impl ModelConfig {
    /// Full-scale defaults; entity/relation counts come from the graph.
    pub fn full_scale(n_entities: usize, n_relations: usize) -> Self {
        ModelConfig { dim: 192, layers: 6, heads: 3, cap: 84, dropout: 0.1, n_entities, n_relations }
    }

    /// Small configuration for quick experiments and tests.
    pub fn toy(n_entities: usize, n_relations: usize) -> Self {
        ModelConfig { dim: 32, layers: 2, heads: 2, cap: 8, dropout: 0.0, n_entities, n_relations }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "model_config",
                details: format!("dim {} not divisible by heads {}", self.dim, self.heads),
            });
        }
        Ok(())
    }
}

/// Anchor readouts after the final layer, each of shape `[1, dim]`.
pub struct AnchorReadout {
    pub agg: Tensor,
    pub head: Tensor,
    pub relation: Tensor,
    pub tail: Tensor,
}

pub struct ScopModel {
    pub config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ScopModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<ScopModel> {
        config.validate()?;
        let d = config.dim;
        let mut m =
            ScopModel { config, names: Vec::new(), tensors: Vec::new(), index: HashMap::new() };

        m.push_weight("entity_embeddings", &[config.n_entities, d], rng);
        m.push_weight("relation_embeddings", &[config.n_relations, d], rng);
        m.push_weight("markers", &[MARKER_COUNT, d], rng);
        m.push_weight("segments", &[SEGMENT_COUNT, d], rng);
        m.push_weight("triple_encoder.weight", &[3 * d, d], rng);
        m.push_zeros("triple_encoder.bias", &[d]);

        for i in 0..config.layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                m.push_weight(&format!("layers.{i}.attn.{proj}"), &[d, d], rng);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                m.push_zeros(&format!("layers.{i}.attn.{bias}"), &[d]);
            }
            m.push_ones(&format!("layers.{i}.norm1.gain"), &[d]);
            m.push_zeros(&format!("layers.{i}.norm1.bias"), &[d]);
            m.push_weight(&format!("layers.{i}.ffn.w1"), &[d, 4 * d], rng);
            m.push_zeros(&format!("layers.{i}.ffn.b1"), &[4 * d]);
            m.push_weight(&format!("layers.{i}.ffn.w2"), &[4 * d, d], rng);
            m.push_zeros(&format!("layers.{i}.ffn.b2"), &[d]);
            m.push_ones(&format!("layers.{i}.norm2.gain"), &[d]);
            m.push_zeros(&format!("layers.{i}.norm2.bias"), &[d]);
        }

        m.push_weight("pretrain.w_int", &[3 * d, d], rng);
        m.push_zeros("pretrain.b_int", &[d]);
        m.push_weight("pretrain.w_cls", &[d, 2], rng);
        m.push_weight("finetune.w", &[d, 2], rng);

        Ok(m)
    }

    fn push_weight<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) {
        self.push(name.to_string(), Tensor::randn(shape, INIT_STD, rng));
    }

    fn push_zeros(&mut self, name: &str, shape: &[usize]) {
        self.push(name.to_string(), Tensor::zeros(shape, true));
    }

    fn push_ones(&mut self, name: &str, shape: &[usize]) {
        self.push(name.to_string(), Tensor::full(shape, 1.0, true));
    }

    fn push(&mut self, name: String, t: Tensor) {
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    /// All parameters in creation order.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name:?}"))]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Encode context triples into `[n, dim]` rows:
    /// `relu([e_head ; e_rel ; e_tail] · W + b)`.
    pub fn encode_context_triples(&self, triples: &[Triple]) -> Result<Tensor> {
        let heads: Vec<usize> = triples.iter().map(|t| t.head as usize).collect();
        let rels: Vec<usize> = triples.iter().map(|t| t.relation as usize).collect();
        let tails: Vec<usize> = triples.iter().map(|t| t.tail as usize).collect();
        let eh = gather_rows(self.param("entity_embeddings"), &heads)?;
        let er = gather_rows(self.param("relation_embeddings"), &rels)?;
        let et = gather_rows(self.param("entity_embeddings"), &tails)?;
        let joint = concat_cols(&[eh, er, et])?;
        Ok(relu(&add_row(
            &matmul(&joint, self.param("triple_encoder.weight"))?,
            self.param("triple_encoder.bias"),
        )?))
    }

    /// Embed a slot sequence into `[len, dim]`: marker or encoded-triple
    /// content plus the slot's segment embedding.
    pub fn embed_sequence(&self, seq: &ContextSequence) -> Result<Tensor> {
        let ctx_triples: Vec<Triple> = seq
            .slots
            .iter()
            .filter_map(|s| if let Slot::Context(t) = s { Some(*t) } else { None })
            .collect();
        let encoded =
            if ctx_triples.is_empty() { None } else { Some(self.encode_context_triples(&ctx_triples)?) };

        // Group consecutive slots into marker runs and context runs so the
        // sequence is assembled from a handful of gathers and slices.
        enum Run {
            Markers(Vec<usize>),
            Contexts { start: usize, len: usize },
        }
        let mut runs: Vec<Run> = Vec::new();
        let mut ctx_seen = 0usize;
        for slot in &seq.slots {
            match slot.marker_id() {
                Some(id) => match runs.last_mut() {
                    Some(Run::Markers(ids)) => ids.push(id),
                    _ => runs.push(Run::Markers(vec![id])),
                },
                None => {
                    match runs.last_mut() {
                        Some(Run::Contexts { len, .. }) => *len += 1,
                        _ => runs.push(Run::Contexts { start: ctx_seen, len: 1 }),
                    }
                    ctx_seen += 1;
                }
            }
        }

        let markers = self.param("markers");
        let mut parts = Vec::with_capacity(runs.len());
        for run in &runs {
            match run {
                Run::Markers(ids) => parts.push(gather_rows(markers, ids)?),
                Run::Contexts { start, len } => {
                    parts.push(slice_rows(encoded.as_ref().expect("context slots imply encoding"), *start, *len)?)
                }
            }
        }
        let content = concat_rows(&parts)?;

        let seg_ids: Vec<usize> = seq.segments.iter().map(|&s| s as usize).collect();
        let seg = gather_rows(self.param("segments"), &seg_ids)?;
        add(&content, &seg)
    }

    /// `[len, len]` additive bias: 0 on columns whose key slot is real,
    /// `MASK_BIAS` on padded key columns, for every query row.
    fn attention_bias(&self, mask: &[bool]) -> Tensor {
        let len = mask.len();
        let mut vals = vec![0.0f64; len * len];
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                for i in 0..len {
                    vals[i * len + j] = MASK_BIAS;
                }
            }
        }
        Tensor::constant(&[len, len], vals)
    }

    fn attention(
        &self,
        layer: usize,
        x: &Tensor,
        bias: &Tensor,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let d = self.config.dim;
        let h = self.config.heads;
        let hd = d / h;
        let q = add_row(&matmul(x, self.param(&format!("layers.{layer}.attn.wq")))?, self.param(&format!("layers.{layer}.attn.bq")))?;
        let k = add_row(&matmul(x, self.param(&format!("layers.{layer}.attn.wk")))?, self.param(&format!("layers.{layer}.attn.bk")))?;
        let v = add_row(&matmul(x, self.param(&format!("layers.{layer}.attn.wv")))?, self.param(&format!("layers.{layer}.attn.bv")))?;
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qi = slice_cols(&q, i * hd, hd)?;
            let ki = slice_cols(&k, i * hd, hd)?;
            let vi = slice_cols(&v, i * hd, hd)?;
            let scores = scale(&matmul(&qi, &transpose(&ki)?)?, 1.0 / (hd as f64).sqrt());
            let weights = softmax_rows(&add(&scores, bias)?)?;
            let weights = dropout(&weights, self.config.dropout, train, rng);
            heads.push(matmul(&weights, &vi)?);
        }
        let ctx = concat_cols(&heads)?;
        add_row(
            &matmul(&ctx, self.param(&format!("layers.{layer}.attn.wo")))?,
            self.param(&format!("layers.{layer}.attn.bo")),
        )
    }

    fn encoder_layer(
        &self,
        layer: usize,
        x: &Tensor,
        bias: &Tensor,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let p = self.config.dropout;
        let attn = self.attention(layer, x, bias, train, rng)?;
        let attn = dropout(&attn, p, train, rng);
        let x = layer_norm(
            &add(x, &attn)?,
            self.param(&format!("layers.{layer}.norm1.gain")),
            self.param(&format!("layers.{layer}.norm1.bias")),
        )?;
        let hidden = relu(&add_row(
            &matmul(&x, self.param(&format!("layers.{layer}.ffn.w1")))?,
            self.param(&format!("layers.{layer}.ffn.b1")),
        )?);
        let ff = add_row(
            &matmul(&hidden, self.param(&format!("layers.{layer}.ffn.w2")))?,
            self.param(&format!("layers.{layer}.ffn.b2")),
        )?;
        let ff = dropout(&ff, p, train, rng);
        layer_norm(
            &add(&x, &ff)?,
            self.param(&format!("layers.{layer}.norm2.gain")),
            self.param(&format!("layers.{layer}.norm2.bias")),
        )
    }

    /// Run the full encoder over one sequence and read out the anchors.
    pub fn encode(
        &self,
        seq: &ContextSequence,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<AnchorReadout> {
        let mut x = self.embed_sequence(seq)?;
        x = dropout(&x, self.config.dropout, train, rng);
        let bias = self.attention_bias(&seq.mask);
        for layer in 0..self.config.layers {
            x = self.encoder_layer(layer, &x, &bias, train, rng)?;
        }
        let a = anchor_positions(seq.cap);
        Ok(AnchorReadout {
            agg: slice_rows(&x, a.agg, 1)?,
            head: slice_rows(&x, a.head, 1)?,
            relation: slice_rows(&x, a.relation, 1)?,
            tail: slice_rows(&x, a.tail, 1)?,
        })
    }

    /// Class probabilities `[1, 2]` for one sequence; positive class first.
    pub fn classify(
        &self,
        seq: &ContextSequence,
        head: TaskHead,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let out = self.encode(seq, train, rng)?;
        let logits = match head {
            TaskHead::Pretrain => {
                let joint = concat_cols(&[out.head, out.relation, out.tail])?;
                let inter = add_row(
                    &matmul(&joint, self.param("pretrain.w_int"))?,
                    self.param("pretrain.b_int"),
                )?;
                matmul(&inter, self.param("pretrain.w_cls"))?
            }
            TaskHead::Finetune => matmul(&out.agg, self.param("finetune.w"))?,
        };
        softmax_rows(&logits)
    }

    /// Positive-class probability of one sequence, in evaluation mode.
    pub fn score(&self, seq: &ContextSequence, head: TaskHead) -> Result<f64> {
        let mut no_dropout = NoRng;
        Ok(self.classify(seq, head, false, &mut no_dropout)?.value_at(0))
    }

    /// Assemble and score a triple against a store in evaluation mode.
    pub fn score_triple(
        &self,
        store: &TripleStore,
        triple: Triple,
        head: TaskHead,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let seq = crate::context::assemble_sequence(store, triple, self.config.cap, rng);
        self.score(&seq, head)
    }

    /// Mean negative log-likelihood over a labeled batch.
    pub fn batch_loss(
        &self,
        batch: &[(ContextSequence, bool)],
        head: TaskHead,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(TensorError::Empty { op: "batch_loss" });
        }
        let mut prob_rows = Vec::with_capacity(batch.len());
        for (seq, _) in batch {
            prob_rows.push(self.classify(seq, head, train, rng)?);
        }
        let probs = concat_rows(&prob_rows)?;
        let logs = log_clamped(&probs, PROB_FLOOR);
        let selector: Vec<f64> = batch
            .iter()
            .flat_map(|(_, positive)| if *positive { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        let y = Tensor::constant(&[batch.len(), 2], selector);
        Ok(scale(&sum_all(&mul(&y, &logs)?), -1.0 / batch.len() as f64))
    }

    /// One training step: forward, backward, then the caller applies the
    /// optimizer. Returns the loss value.
    pub fn loss_and_backward(
        &self,
        batch: &[(ContextSequence, bool)],
        head: TaskHead,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let loss = self.batch_loss(batch, head, true, rng)?;
        backprop(&loss)?;
        Ok(loss.scalar())
    }
}

/// Stand-in RNG for paths where no randomness may be consumed. Any draw is a
/// bug, so it panics.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        panic!("evaluation path consumed randomness");
    }
    fn next_u64(&mut self) -> u64 {
        panic!("evaluation path consumed randomness");
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        panic!("evaluation path consumed randomness");
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        panic!("evaluation path consumed randomness");
    }
}
