//! Training objectives: sampled next-item BCE, sequence-level InfoNCE
//! between augmented views, and intent-level InfoNCE against cluster
//! prototypes with false-negative mitigation.
//!
//! Every loss is built on a [`Tape`] so the trainer can differentiate it;
//! the `*_loss` functions evaluate the same graph on plain vectors.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{ItemId, PaddedSequence};
use crate::encoder::ITEM_EMB;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Intent contrastive strength.
    pub lambda: f64,
    /// Sequence contrastive strength.
    pub beta: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return Err(Error::arg(format!(
                "loss weights must be non-negative (lambda {}, beta {})",
                self.lambda, self.beta
            )));
        }
        Ok(())
    }
}

pub fn multi_task_loss(next: f64, icl: f64, seqcl: f64, w: LossWeights) -> f64 {
    next + w.lambda * icl + w.beta * seqcl
}

/// `−log σ(h·pos) − log(1 − σ(h·neg))` on single vectors.
pub fn next_item_loss(h_prev: &[f64], pos_emb: &[f64], neg_emb: &[f64]) -> f64 {
    let params: Vec<Matrix> = Vec::new();
    let mut t = Tape::new(&params);
    let h = t.input(Matrix::row_vector(h_prev.to_vec()));
    let p = t.input(Matrix::row_vector(pos_emb.to_vec()));
    let n = t.input(Matrix::row_vector(neg_emb.to_vec()));
    let out = bce_pair(&mut t, h, p, n);
    t.scalar(out)
}

fn bce_pair(t: &mut Tape, h: Var, pos: Var, neg: Var) -> Var {
    let pl = t.row_dot(h, pos);
    let nl = t.row_dot(h, neg);
    let nl = t.scale(nl, -1.0);
    let a = t.neg_log_sigmoid(pl);
    let b = t.neg_log_sigmoid(nl);
    let a = t.sum(a);
    let b = t.sum(b);
    t.add(a, b)
}

/// Positions of a padded input whose output predicts a real next item:
/// `(source position, target item)`.
pub fn next_item_targets(seq: &PaddedSequence) -> Vec<(usize, ItemId)> {
    let t = seq.items.len();
    (seq.first_real()..t.saturating_sub(1))
        .map(|p| (p, seq.items[p + 1]))
        .collect()
}

/// Sum over positions of the sampled next-item loss for one sequence.
///
/// `negatives[i]` pairs with the i-th entry of [`next_item_targets`].
/// Returns `None` when the sequence has fewer than two real items.
pub fn next_item_on_tape(
    tape: &mut Tape,
    per_position: Var,
    seq: &PaddedSequence,
    negatives: &[ItemId],
) -> Result<Option<Var>> {
    let targets = next_item_targets(seq);
    if targets.len() != negatives.len() {
        return Err(Error::arg(format!(
            "{} negatives for {} target positions",
            negatives.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(None);
    }
    let rows: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    let pos_ids: Vec<ItemId> = targets.iter().map(|&(_, i)| i).collect();
    let h = tape.select_rows(per_position, &rows);
    let pos = tape.gather(ITEM_EMB, &pos_ids)?;
    let neg = tape.gather(ITEM_EMB, negatives)?;
    Ok(Some(bce_pair(tape, h, pos, neg)))
}

/// Uniform draw from `1..=n_items` outside `history`.
pub fn sample_negative_with(history: &HashSet<ItemId>, n_items: usize, rng: &mut Rng) -> Result<ItemId> {
    let covered = history.iter().filter(|&&i| (1..=n_items).contains(&i)).count();
    if covered >= n_items {
        return Err(Error::Exhausted(n_items));
    }
    loop {
        let i = rng.gen_range(1..=n_items);
        if !history.contains(&i) {
            return Ok(i);
        }
    }
}

pub fn sample_negative(history: &HashSet<ItemId>, n_items: usize, rng_seed: u64) -> Result<ItemId> {
    sample_negative_with(history, n_items, &mut rng::seeded(rng_seed))
}

/// Symmetric InfoNCE over `2N` views, summed over users and both
/// directions. Row `i` of `[view1; view2]` is contrasted with its partner
/// against the other `2N − 2` views; self-similarity is excluded.
pub fn seqcl_on_tape(tape: &mut Tape, view1: &[Var], view2: &[Var], temperature: f64) -> Result<Var> {
    let n = view1.len();
    if n < 2 {
        return Err(Error::arg(format!("sequence contrastive loss needs N ≥ 2, got {n}")));
    }
    if view2.len() != n {
        return Err(Error::arg("view batches differ in size"));
    }
    let all: Vec<Var> = view1.iter().chain(view2).copied().collect();
    let z = tape.stack_rows(&all);
    let mut logits = tape.matmul_bt(z, z);
    if temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / temperature);
    }
    let m = 2 * n;
    let targets: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    let allowed: Vec<bool> = (0..m * m).map(|k| k / m != k % m).collect();
    tape.masked_cross_entropy(logits, &targets, &allowed)
}

pub fn seqcl_loss(view1: &[Vec<f64>], view2: &[Vec<f64>], temperature: f64) -> Result<f64> {
    let params: Vec<Matrix> = Vec::new();
    let mut t = Tape::new(&params);
    let a: Vec<Var> = view1.iter().map(|v| t.input(Matrix::row_vector(v.clone()))).collect();
    let b: Vec<Var> = view2.iter().map(|v| t.input(Matrix::row_vector(v.clone()))).collect();
    let out = seqcl_on_tape(&mut t, &a, &b, temperature)?;
    Ok(t.scalar(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IclOptions {
    /// Drop same-intent prototypes of other batch users from the denominator.
    pub fnm: bool,
    pub temperature: f64,
}

impl Default for IclOptions {
    fn default() -> Self {
        IclOptions {
            fnm: true,
            temperature: 1.0,
        }
    }
}

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let n = crate::tensor::dot(m.row(r), m.row(r)).sqrt().max(1e-12);
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Intent contrastive term for one view of a batch, summed over users.
///
/// User `u`'s L2-normalized representation is scored against the
/// normalized prototypes `c_v` of every batch user `v`; the positive is
/// `c_u`. With FNM, columns `v ≠ u` sharing `u`'s intent are removed.
/// `assignments[u] ≥ K` marks an unassigned user.
pub fn icl_view_on_tape(
    tape: &mut Tape,
    view: &[Var],
    assignments: &[usize],
    centroids: &Matrix,
    opts: IclOptions,
) -> Result<Var> {
    let n = view.len();
    if assignments.len() != n {
        return Err(Error::arg("one assignment per batch user is required"));
    }
    if n == 0 {
        return Err(Error::arg("empty batch"));
    }
    let k = centroids.rows;
    if let Some((u, &a)) = assignments.iter().enumerate().find(|(_, &a)| a >= k) {
        return Err(Error::State(format!(
            "batch user {u} has no intent assignment (got {a}, K = {k})"
        )));
    }
    let unit = unit_rows(centroids);
    let mut protos = Matrix::zeros(n, centroids.cols);
    for (u, &a) in assignments.iter().enumerate() {
        protos.row_mut(u).copy_from_slice(unit.row(a));
    }
    let protos = tape.input(protos);
    let h = tape.stack_rows(view);
    let h = tape.row_normalize(h);
    let mut logits = tape.matmul_bt(h, protos);
    if opts.temperature != 1.0 {
        logits = tape.scale(logits, 1.0 / opts.temperature);
    }
    let targets: Vec<usize> = (0..n).collect();
    let allowed: Vec<bool> = (0..n * n)
        .map(|idx| {
            let (u, v) = (idx / n, idx % n);
            !opts.fnm || u == v || assignments[u] != assignments[v]
        })
        .collect();
    tape.masked_cross_entropy(logits, &targets, &allowed)
}

/// Sum of the intent contrastive terms of both views.
pub fn icl_on_tape(
    tape: &mut Tape,
    view1: &[Var],
    view2: &[Var],
    assignments: &[usize],
    centroids: &Matrix,
    opts: IclOptions,
) -> Result<Var> {
    let a = icl_view_on_tape(tape, view1, assignments, centroids, opts)?;
    let b = icl_view_on_tape(tape, view2, assignments, centroids, opts)?;
    Ok(tape.add(a, b))
}

/// Per-user intent contrastive terms of a single view.
pub fn icl_view_terms(
    view: &[Vec<f64>],
    assignments: &[usize],
    centroids: &Matrix,
    opts: IclOptions,
) -> Result<Vec<f64>> {
    let params: Vec<Matrix> = Vec::new();
    let mut t = Tape::new(&params);
    let vars: Vec<Var> = view.iter().map(|v| t.input(Matrix::row_vector(v.clone()))).collect();
    let out = icl_view_on_tape(&mut t, &vars, assignments, centroids, opts)?;
    Ok(t.row_terms(out).expect("cross-entropy node"))
}

pub fn icl_loss_fnm(
    view1: &[Vec<f64>],
    view2: &[Vec<f64>],
    assignments: &[usize],
    centroids: &Matrix,
    opts: IclOptions,
) -> Result<f64> {
    let params: Vec<Matrix> = Vec::new();
    let mut t = Tape::new(&params);
    let a: Vec<Var> = view1.iter().map(|v| t.input(Matrix::row_vector(v.clone()))).collect();
    let b: Vec<Var> = view2.iter().map(|v| t.input(Matrix::row_vector(v.clone()))).collect();
    let out = icl_on_tape(&mut t, &a, &b, assignments, centroids, opts)?;
    Ok(t.scalar(out))
}
