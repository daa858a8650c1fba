//! Causal self-attention sequence encoder.
//!
//! Layout per block (pre-norm residual, as in SASRec):
//!
//! ```text
//! x = mask ⊙ dropout(√d · E[items] + P)
//! for each block:
//!     a = LN₁(x);  x = x + dropout(MHA(a, a, a))
//!     b = LN₂(x);  x = x + dropout(W₂ · dropout(relu(W₁ b + b₁)) + b₂)
//!     x = mask ⊙ x
//! H = LN_out(x)
//! ```
//!
//! Attention combines a causal mask with a key-side pad mask; queries at
//! pad positions attend to nothing and yield zero rows.

use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::data::{ItemId, PaddedSequence};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

use rand::Rng as _;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// `|V| + 2`: pad, real items, mask.
    pub vocab_size: usize,
}

impl EncoderConfig {
    pub fn new(n_items: usize) -> Self {
        EncoderConfig {
            dim: 64,
            max_len: 50,
            n_blocks: 2,
            n_heads: 2,
            ffn_mult: 4,
            dropout: 0.2,
            vocab_size: n_items + 2,
        }
    }

    pub fn n_items(&self) -> usize {
        self.vocab_size - 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.max_len == 0
            || self.n_blocks == 0
            || self.n_heads == 0
            || self.ffn_mult == 0
        {
            return Err(Error::arg("encoder sizes must all be at least 1"));
        }
        if !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::arg(format!(
                "dim {} is not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::arg(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size < 3 {
            return Err(Error::arg("vocabulary needs at least one real item"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_gamma: usize,
    ln1_beta: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_gamma: usize,
    ln2_beta: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Named parameter tensors, addressed by index on the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

pub const ITEM_EMB: usize = 0;
pub const POS_EMB: usize = 1;
const FIRST_BLOCK: usize = 2;
const PER_BLOCK: usize = 16;

fn block_ids(b: usize) -> BlockIds {
    let o = FIRST_BLOCK + b * PER_BLOCK;
    BlockIds {
        ln1_gamma: o,
        ln1_beta: o + 1,
        wq: o + 2,
        bq: o + 3,
        wk: o + 4,
        bk: o + 5,
        wv: o + 6,
        bv: o + 7,
        wo: o + 8,
        bo: o + 9,
        ln2_gamma: o + 10,
        ln2_beta: o + 11,
        w1: o + 12,
        b1: o + 13,
        w2: o + 14,
        b2: o + 15,
    }
}

fn final_ln(cfg: &EncoderConfig) -> (usize, usize) {
    let o = FIRST_BLOCK + cfg.n_blocks * PER_BLOCK;
    (o, o + 1)
}

/// Names and shapes of every tensor, in storage order.
pub fn layout(cfg: &EncoderConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.dim;
    let h = cfg.ffn_mult * d;
    let mut out = vec![
        ("item_emb".to_string(), cfg.vocab_size, d),
        ("pos_emb".to_string(), cfg.max_len, d),
    ];
    for b in 0..cfg.n_blocks {
        let p = |s: &str| format!("block{b}.{s}");
        out.extend([
            (p("ln1.gamma"), 1, d),
            (p("ln1.beta"), 1, d),
            (p("attn.wq"), d, d),
            (p("attn.bq"), 1, d),
            (p("attn.wk"), d, d),
            (p("attn.bk"), 1, d),
            (p("attn.wv"), d, d),
            (p("attn.bv"), 1, d),
            (p("attn.wo"), d, d),
            (p("attn.bo"), 1, d),
            (p("ln2.gamma"), 1, d),
            (p("ln2.beta"), 1, d),
            (p("ffn.w1"), d, h),
            (p("ffn.b1"), 1, h),
            (p("ffn.w2"), h, d),
            (p("ffn.b2"), 1, d),
        ]);
    }
    out.push(("final_ln.gamma".to_string(), 1, d));
    out.push(("final_ln.beta".to_string(), 1, d));
    out
}

impl EncoderParams {
    /// Normal(0, 0.02) embeddings and projections, zero biases, unit
    /// layer-norm scales. The pad row of the item table is zero.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: &EncoderConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c) in layout(config) {
            let t = if name.ends_with("gamma") {
                Matrix::filled(r, c, 1.0)
            } else if r == 1 {
                Matrix::zeros(r, c)
            } else {
                let mut m = Matrix::randn(r, c, std, &mut rng);
                if name == "item_emb" {
                    m.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
                }
                m
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(EncoderParams {
            config: config.clone(),
            names,
            tensors,
        })
    }

    pub fn item_table(&self) -> &Matrix {
        &self.tensors[ITEM_EMB]
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Checks that the tensors match the layout implied by the config.
    pub fn check_layout(&self) -> Result<()> {
        self.config.validate()?;
        let expected = layout(&self.config);
        if expected.len() != self.tensors.len() || expected.len() != self.names.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, r, c), (n, t)) in expected.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || (*r, *c) != t.shape() || t.len() != r * c {
                return Err(Error::Format(format!(
                    "tensor {n} {:?} does not match expected {name} ({r}, {c})",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Encoder output kept on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `T×d` per-position representations.
    pub per_position: Var,
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

struct Dropout {
    p: f64,
    rng: Option<Rng>,
}

impl Dropout {
    fn new(cfg: &EncoderConfig, mode: Mode, seed: u64) -> Self {
        let active = mode == Mode::Train && cfg.dropout > 0.0;
        Dropout {
            p: cfg.dropout,
            rng: active.then(|| rng::seeded(seed)),
        }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match &mut self.rng {
            None => x,
            Some(rng) => {
                let (r, c) = tape.value(x).shape();
                let m = dropout_mask(r, c, self.p, rng);
                tape.mul_const(x, m)
            }
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: usize, b: usize) -> Var {
    let w = tape.param(w);
    let b = tape.param(b);
    let xw = tape.matmul(x, w);
    tape.add_row(xw, b)
}

/// Records the forward pass of one padded sequence on `tape`.
///
/// The tape must have been created over `params.tensors`.
pub fn forward(
    tape: &mut Tape,
    params: &EncoderParams,
    seq: &PaddedSequence,
    mode: Mode,
    rng_seed: u64,
) -> Result<Encoded> {
    let cfg = &params.config;
    let t = cfg.max_len;
    let d = cfg.dim;
    if seq.items.len() != t {
        return Err(Error::arg(format!(
            "sequence length {} does not match encoder max_len {t}",
            seq.items.len()
        )));
    }
    if let Some(&bad) = seq.items.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "item id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut dropout = Dropout::new(cfg, mode, rng_seed);

    let first_real = seq.first_real();
    let mut keep = Matrix::zeros(t, d);
    for r in first_real..t {
        keep.row_mut(r).iter_mut().for_each(|v| *v = 1.0);
    }
    let mut allowed = vec![false; t * t];
    for q in first_real..t {
        for k in first_real..=q {
            allowed[q * t + k] = true;
        }
    }

    let emb = tape.gather(ITEM_EMB, &seq.items)?;
    let emb = tape.scale(emb, (d as f64).sqrt());
    let pos = tape.param(POS_EMB);
    let mut x = tape.add(emb, pos);
    x = dropout.apply(tape, x);
    x = tape.mul_const(x, keep.clone());

    let head_dim = d / cfg.n_heads;
    let attn_scale = 1.0 / (head_dim as f64).sqrt();
    for b in 0..cfg.n_blocks {
        let ids = block_ids(b);
        let (g1, b1) = (tape.param(ids.ln1_gamma), tape.param(ids.ln1_beta));
        let a = tape.layer_norm(x, g1, b1);
        let q = linear(tape, a, ids.wq, ids.bq);
        let k = linear(tape, a, ids.wk, ids.bk);
        let v = linear(tape, a, ids.wv, ids.bv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let vh = tape.slice_cols(v, h * head_dim, head_dim);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, attn_scale);
            let weights = tape.masked_softmax(scores, &allowed);
            heads.push(tape.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let attn = linear(tape, merged, ids.wo, ids.bo);
        let attn = dropout.apply(tape, attn);
        x = tape.add(x, attn);

        let (g2, b2) = (tape.param(ids.ln2_gamma), tape.param(ids.ln2_beta));
        let bn = tape.layer_norm(x, g2, b2);
        let hidden = linear(tape, bn, ids.w1, ids.b1);
        let hidden = tape.relu(hidden);
        let hidden = dropout.apply(tape, hidden);
        let ffn = linear(tape, hidden, ids.w2, ids.b2);
        let ffn = dropout.apply(tape, ffn);
        x = tape.add(x, ffn);
        x = tape.mul_const(x, keep.clone());
    }
    let (gf, bf) = final_ln(cfg);
    let (gf, bf) = (tape.param(gf), tape.param(bf));
    let h = tape.layer_norm(x, gf, bf);
    Ok(Encoded { per_position: h })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Concat,
}

/// Mean-pooling weights over non-pad positions.
fn mean_weights(seq: &PaddedSequence) -> Result<Vec<f64>> {
    if seq.real_len == 0 {
        return Err(Error::Degenerate("mean pooling over an all-pad sequence".into()));
    }
    let w = 1.0 / seq.real_len as f64;
    Ok((0..seq.items.len())
        .map(|p| if seq.is_pad(p) { 0.0 } else { w })
        .collect())
}

/// Pools the encoded sequence into a single row on the tape.
pub fn aggregate_on_tape(
    tape: &mut Tape,
    enc: Encoded,
    seq: &PaddedSequence,
    scheme: Aggregation,
) -> Result<Var> {
    match scheme {
        Aggregation::Mean => Ok(tape.weighted_row_sum(enc.per_position, mean_weights(seq)?)),
        Aggregation::Concat => {
            if seq.real_len == 0 {
                return Err(Error::Degenerate("concatenation of an all-pad sequence".into()));
            }
            Ok(tape.flatten(enc.per_position))
        }
    }
}

/// Detached encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRepresentation {
    /// `T×d`.
    pub per_position: Matrix,
    /// Indices `< pad_prefix` are padding.
    pub pad_prefix: usize,
}

impl SequenceRepresentation {
    /// Arithmetic mean of the non-pad rows.
    pub fn pooled(&self) -> Result<Vec<f64>> {
        let rows = self.per_position.rows;
        if self.pad_prefix >= rows {
            return Err(Error::Degenerate("mean pooling over an all-pad sequence".into()));
        }
        let w = 1.0 / (rows - self.pad_prefix) as f64;
        let mut out = vec![0.0; self.per_position.cols];
        for r in self.pad_prefix..rows {
            for (o, v) in out.iter_mut().zip(self.per_position.row(r)) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Position-major concatenation: `[h_0 ‖ h_1 ‖ … ‖ h_{T-1}]`.
    pub fn concat(&self) -> Result<Vec<f64>> {
        if self.pad_prefix >= self.per_position.rows {
            return Err(Error::Degenerate("concatenation of an all-pad sequence".into()));
        }
        Ok(self.per_position.data.clone())
    }

    pub fn last(&self) -> &[f64] {
        self.per_position.row(self.per_position.rows - 1)
    }
}

pub fn aggregate(rep: &SequenceRepresentation, scheme: Aggregation) -> Result<Vec<f64>> {
    match scheme {
        Aggregation::Mean => rep.pooled(),
        Aggregation::Concat => rep.concat(),
    }
}

/// Runs the encoder outside of any training graph.
pub fn encode(
    params: &EncoderParams,
    seq: &PaddedSequence,
    mode: Mode,
    rng_seed: u64,
) -> Result<SequenceRepresentation> {
    let mut tape = Tape::new(&params.tensors);
    let enc = forward(&mut tape, params, seq, mode, rng_seed)?;
    Ok(SequenceRepresentation {
        per_position: tape.value(enc.per_position).clone(),
        pad_prefix: seq.first_real(),
    })
}

/// Eval-mode mean-pooled representations of many sequences.
pub fn encode_pooled(params: &EncoderParams, seqs: &[PaddedSequence]) -> Result<Vec<Vec<f64>>> {
    seqs.iter()
        .map(|s| encode(params, s, Mode::Eval, 0)?.pooled())
        .collect()
}

/// Gradient of a scalar built on a fresh tape over `params`.
pub fn gradients<F>(params: &EncoderParams, loss: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(&params.tensors);
    let out = loss(&mut tape)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    let grads = tape.backward(out)?;
    Ok((value, grads))
}

/// Item ids scored during full ranking: every real item.
pub fn real_items(cfg: &EncoderConfig) -> std::ops::RangeInclusive<ItemId> {
    1..=cfg.n_items()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::pad_truncate;

    fn tiny() -> EncoderParams {
        let mut cfg = EncoderConfig::new(20);
        cfg.dim = 8;
        cfg.max_len = 6;
        cfg.n_blocks = 2;
        cfg.n_heads = 2;
        EncoderParams::init_with_std(&cfg, 5, 0.3).unwrap()
    }

    #[test]
    fn layout_matches_tensors() {
        let p = tiny();
        p.check_layout().unwrap();
        assert_eq!(p.names[0], "item_emb");
        assert_eq!(p.tensors[0].shape(), (22, 8));
        assert!(p.tensors[0].row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::new(10);
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 2;
        cfg.n_blocks = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let p = tiny();
        let s = pad_truncate(&[3, 4, 5], 6);
        let a = encode(&p, &s, Mode::Eval, 0).unwrap();
        let b = encode(&p, &s, Mode::Eval, 99).unwrap();
        assert_eq!(a.per_position.shape(), (6, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn causal_masking() {
        let p = tiny();
        let a = encode(&p, &pad_truncate(&[3, 4, 5, 6], 6), Mode::Eval, 0).unwrap();
        let b = encode(&p, &pad_truncate(&[3, 4, 5, 9], 6), Mode::Eval, 0).unwrap();
        for r in 0..5 {
            assert_eq!(a.per_position.row(r), b.per_position.row(r));
        }
        assert_ne!(a.per_position.row(5), b.per_position.row(5));
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut p = tiny();
        p.config.dropout = 0.0;
        let s = pad_truncate(&[1, 2, 3], 6);
        assert_eq!(
            encode(&p, &s, Mode::Train, 3).unwrap(),
            encode(&p, &s, Mode::Eval, 3).unwrap()
        );
        p.config.dropout = 0.5;
        assert_ne!(
            encode(&p, &s, Mode::Train, 3).unwrap(),
            encode(&p, &s, Mode::Eval, 3).unwrap()
        );
    }

    #[test]
    fn out_of_vocabulary_is_an_index_error() {
        let p = tiny();
        let s = pad_truncate(&[1, 22], 6);
        assert!(matches!(encode(&p, &s, Mode::Eval, 0), Err(Error::Index(_))));
        let s = pad_truncate(&[1, 21], 6);
        encode(&p, &s, Mode::Eval, 0).unwrap();
    }

    #[test]
    fn aggregation_examples() {
        let rep = SequenceRepresentation {
            per_position: Matrix::from_rows(&[vec![2.0, 3.0], vec![2.0, 3.0], vec![2.0, 3.0]]),
            pad_prefix: 0,
        };
        assert_eq!(aggregate(&rep, Aggregation::Mean).unwrap(), vec![2.0, 3.0]);
        let rep = SequenceRepresentation {
            per_position: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            pad_prefix: 0,
        };
        assert_eq!(aggregate(&rep, Aggregation::Mean).unwrap(), vec![0.5, 0.5]);
        assert_eq!(
            aggregate(&rep, Aggregation::Concat).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0]
        );
        let pad = SequenceRepresentation {
            per_position: Matrix::zeros(2, 2),
            pad_prefix: 2,
        };
        assert!(matches!(aggregate(&pad, Aggregation::Mean), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pooling_ignores_pad_rows() {
        let p = tiny();
        let s = pad_truncate(&[7, 8], 6);
        let rep = encode(&p, &s, Mode::Eval, 0).unwrap();
        let pooled = rep.pooled().unwrap();
        for c in 0..8 {
            let m = (rep.per_position.get(4, c) + rep.per_position.get(5, c)) / 2.0;
            assert!((pooled[c] - m).abs() < 1e-15);
        }
        let mut tape = Tape::new(&p.tensors);
        let enc = forward(&mut tape, &p, &s, Mode::Eval, 0).unwrap();
        let v = aggregate_on_tape(&mut tape, enc, &s, Aggregation::Mean).unwrap();
        assert_eq!(tape.value(v).data, pooled);
    }
}
