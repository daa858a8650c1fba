//! Alternating training: cluster pooled representations (E-step), then
//! minimise next-item + λ·ICL + β·SeqCL over shuffled mini-batches (M-step).
//!
//! Each user's graph lives on its own tape. The contrastive terms couple
//! users inside a batch, so a batch is processed in three passes: encode
//! the augmented views, differentiate the contrastive losses with respect
//! to the view representations, then re-run each user's graph and
//! backpropagate the next-item loss together with those upstream
//! gradients. Re-running is exact because every dropout mask is drawn from
//! a seed fixed by (epoch, user, slot).

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_view_pair_with, AugmentConfig};
use crate::autograd::{Tape, Var};
use crate::clustering::{estep, IntentModel, DEFAULT_MAX_ITER};
use crate::data::{pad_truncate, ItemId, PaddedSequence, SplitDataset};
use crate::encoder::{aggregate_on_tape, encode, forward, Aggregation, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalResult, Phase};
use crate::losses::{
    icl_on_tape, multi_task_loss, next_item_on_tape, next_item_targets, sample_negative_with, seqcl_on_tape,
    IclOptions, LossWeights,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, tag};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    /// Epochs without a validation NDCG@20 improvement before stopping.
    pub patience: usize,
    /// Number of intent prototypes.
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub temperature: f64,
    pub fnm: bool,
    pub augment: AugmentConfig,
    pub kmeans_max_iter: usize,
    pub exclude_seen: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(n_items: usize) -> Self {
        TrainConfig {
            encoder: EncoderConfig::new(n_items),
            batch_size: 256,
            adam: AdamConfig::default(),
            max_epochs: 100,
            patience: 10,
            k: 256,
            lambda: 0.1,
            beta: 0.1,
            temperature: 1.0,
            fnm: true,
            augment: AugmentConfig::default(),
            kmeans_max_iter: DEFAULT_MAX_ITER,
            exclude_seen: true,
            seed: 42,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            beta: self.beta,
        }
    }

    pub fn icl_options(&self) -> IclOptions {
        IclOptions {
            fnm: self.fnm,
            temperature: self.temperature,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            exclude_seen: self.exclude_seen,
            ..EvalOptions::default()
        }
    }

    /// Human-readable name of the objective being optimised.
    pub fn label(&self) -> &'static str {
        match (self.lambda > 0.0, self.beta > 0.0) {
            (false, false) => "next-item only",
            (false, true) => "next-item + seqcl",
            (true, false) => "next-item + icl",
            (true, true) => "next-item + icl + seqcl",
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.augment.validate()?;
        self.weights().validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.k == 0 {
            return Err(Error::arg("batch_size, max_epochs, patience and k must be at least 1"));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::arg("kmeans_max_iter must be at least 1"));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::arg(format!(
                "invalid optimizer settings: lr {}, beta1 {}, beta2 {}, eps {}",
                a.lr, a.beta1, a.beta2, a.eps
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::arg(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Per-user means of the loss components over a batch or an epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub next: f64,
    pub icl: f64,
    pub seqcl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: LossComponents,
    pub valid: EvalResult,
    /// E-step distortion; absent when the intent term is disabled.
    pub distortion: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub estep_secs: f64,
    pub mstep_secs: f64,
    pub eval_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Test metrics of the restored best parameters.
    pub test: EvalResult,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub intents: IntentModel,
    pub report: TrainReport,
    pub optimizer: AdamState,
    /// Wall-clock time per phase; kept apart from the report so reports
    /// stay bit-identical across runs.
    pub timings: Vec<EpochTiming>,
}

/// Left-padded training sequences, one per user.
pub fn padded_train_seqs(data: &SplitDataset, max_len: usize) -> Vec<PaddedSequence> {
    data.users.iter().map(|u| pad_truncate(&u.train_seq, max_len)).collect()
}

/// Dropout seed of `slot` (0 original, 1 and 2 the views) for a user in an epoch.
pub fn dropout_seed(master: u64, epoch: usize, user: usize, slot: u64) -> u64 {
    rng::derive_seed(master, &[tag::DROPOUT, epoch as u64, user as u64, slot])
}

/// One negative per next-item target position, drawn outside the user's
/// training history.
pub fn draw_negatives(
    seq: &PaddedSequence,
    history: &[ItemId],
    n_items: usize,
    master: u64,
    epoch: usize,
    user: usize,
) -> Result<Vec<ItemId>> {
    let seen: HashSet<ItemId> = history.iter().copied().collect();
    let mut r = rng::stream(master, &[tag::NEGATIVE, epoch as u64, user as u64]);
    next_item_targets(seq)
        .iter()
        .map(|_| sample_negative_with(&seen, n_items, &mut r))
        .collect()
}

/// Shuffled user indices split into consecutive batches.
pub fn epoch_batches(n_users: usize, batch_size: usize, master: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut rng::stream(master, &[tag::SHUFFLE, epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

struct Views {
    v1: PaddedSequence,
    v2: PaddedSequence,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{name} loss evaluated to {v}")))
    }
}

fn accumulate(acc: &mut [Matrix], grads: &[Matrix]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_assign(g);
    }
}

/// Upstream gradients of the contrastive terms with respect to every
/// view representation, plus the summed ICL and SeqCL values.
struct ContrastiveGrads {
    pooled: Vec<(Matrix, Matrix)>,
    concat: Vec<(Matrix, Matrix)>,
    icl: f64,
    seqcl: f64,
}

fn contrastive_grads(
    pooled: &[(Vec<f64>, Vec<f64>)],
    concat: &[(Vec<f64>, Vec<f64>)],
    assignments: Option<(&[usize], &Matrix)>,
    cfg: &TrainConfig,
) -> Result<ContrastiveGrads> {
    let none: Vec<Matrix> = Vec::new();
    let mut t = Tape::new(&none);
    let row = |t: &mut Tape, v: &Vec<f64>| t.input(Matrix::row_vector(v.clone()));
    let p1: Vec<Var> = pooled.iter().map(|(a, _)| row(&mut t, a)).collect();
    let p2: Vec<Var> = pooled.iter().map(|(_, b)| row(&mut t, b)).collect();
    let c1: Vec<Var> = concat.iter().map(|(a, _)| row(&mut t, a)).collect();
    let c2: Vec<Var> = concat.iter().map(|(_, b)| row(&mut t, b)).collect();

    let mut terms = Vec::new();
    let mut icl = 0.0;
    let mut seqcl = 0.0;
    if let Some((assign, centroids)) = assignments {
        let l = icl_on_tape(&mut t, &p1, &p2, assign, centroids, cfg.icl_options())?;
        icl = finite("intent contrastive", t.scalar(l))?;
        terms.push(t.scale(l, cfg.lambda));
    }
    if !concat.is_empty() {
        let l = seqcl_on_tape(&mut t, &c1, &c2, cfg.temperature)?;
        seqcl = finite("sequence contrastive", t.scalar(l))?;
        terms.push(t.scale(l, cfg.beta));
    }
    let mut out = terms[0];
    for &x in &terms[1..] {
        out = t.add(out, x);
    }
    let g = t.backward(out)?;
    let take = |v: &Var| g.wrt(*v).cloned().unwrap_or_else(|| Matrix::zeros(1, t.value(*v).cols));
    Ok(ContrastiveGrads {
        pooled: p1.iter().zip(&p2).map(|(a, b)| (take(a), take(b))).collect(),
        concat: c1.iter().zip(&c2).map(|(a, b)| (take(a), take(b))).collect(),
        icl,
        seqcl,
    })
}

/// Loss components and parameter gradients of the batch objective
/// `(Σ next + λ·ICL + β·SeqCL) / N`.
pub fn batch_gradients(
    params: &EncoderParams,
    data: &SplitDataset,
    batch: &[usize],
    intents: Option<&IntentModel>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(LossComponents, Vec<Matrix>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::arg("empty batch"));
    }
    let t_len = cfg.encoder.max_len;
    let n_items = cfg.encoder.n_items();
    let mask_id = data.mask_id();
    let use_icl = cfg.lambda > 0.0;
    let use_seqcl = cfg.beta > 0.0 && n >= 2;
    let use_views = use_icl || use_seqcl;

    let originals: Vec<PaddedSequence> = batch
        .iter()
        .map(|&u| pad_truncate(&data.users[u].train_seq, t_len))
        .collect();
    let negatives: Vec<Vec<ItemId>> = batch
        .iter()
        .zip(&originals)
        .map(|(&u, s)| draw_negatives(s, &data.users[u].train_seq, n_items, cfg.seed, epoch, u))
        .collect::<Result<_>>()?;

    let mut views: Vec<Views> = Vec::new();
    let mut cgrads = None;
    if use_views {
        let mut pooled = Vec::with_capacity(n);
        let mut concat = Vec::with_capacity(n);
        for &u in batch {
            let mut r = rng::stream(cfg.seed, &[tag::AUGMENT, epoch as u64, u as u64]);
            let (a, b) = sample_view_pair_with(&data.users[u].train_seq, &cfg.augment, mask_id, &mut r);
            let v = Views {
                v1: pad_truncate(&a, t_len),
                v2: pad_truncate(&b, t_len),
            };
            let r1 = encode(params, &v.v1, Mode::Train, dropout_seed(cfg.seed, epoch, u, 1))?;
            let r2 = encode(params, &v.v2, Mode::Train, dropout_seed(cfg.seed, epoch, u, 2))?;
            if use_icl {
                pooled.push((r1.pooled()?, r2.pooled()?));
            }
            if use_seqcl {
                concat.push((r1.concat()?, r2.concat()?));
            }
            views.push(v);
        }
        let assignments = if use_icl {
            let model = intents.ok_or_else(|| Error::State("intent term enabled without an intent model".into()))?;
            let assign: Vec<usize> = batch.iter().map(|&u| model.assignments[u]).collect();
            Some((assign, &model.centroids))
        } else {
            None
        };
        cgrads = Some(contrastive_grads(
            &pooled,
            &concat,
            assignments.as_ref().map(|(a, c)| (a.as_slice(), *c)),
            cfg,
        )?);
    }

    let mut acc: Vec<Matrix> = params.tensors.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
    let mut next_sum = 0.0;
    for (i, &u) in batch.iter().enumerate() {
        let mut tape = Tape::new(&params.tensors);
        let mut seeds: Vec<(Var, Matrix)> = Vec::new();
        let enc = forward(&mut tape, params, &originals[i], Mode::Train, dropout_seed(cfg.seed, epoch, u, 0))?;
        if let Some(l) = next_item_on_tape(&mut tape, enc.per_position, &originals[i], &negatives[i])? {
            next_sum += finite("next-item", tape.scalar(l))?;
            seeds.push((l, Matrix::scalar(1.0)));
        }
        if let Some(cg) = &cgrads {
            let v = &views[i];
            for (slot, seq) in [(1u64, &v.v1), (2, &v.v2)] {
                let e = forward(&mut tape, params, seq, Mode::Train, dropout_seed(cfg.seed, epoch, u, slot))?;
                let pick = |pair: &(Matrix, Matrix)| if slot == 1 { pair.0.clone() } else { pair.1.clone() };
                if use_icl {
                    let p = aggregate_on_tape(&mut tape, e, seq, Aggregation::Mean)?;
                    seeds.push((p, pick(&cg.pooled[i])));
                }
                if use_seqcl {
                    let c = aggregate_on_tape(&mut tape, e, seq, Aggregation::Concat)?;
                    seeds.push((c, pick(&cg.concat[i])));
                }
            }
        }
        if seeds.is_empty() {
            continue;
        }
        let g = tape.backward_seeded(&seeds)?;
        accumulate(&mut acc, &g.params);
    }

    let inv = 1.0 / n as f64;
    for g in &mut acc {
        g.scale_in_place(inv);
    }
    let (icl, seqcl) = cgrads.as_ref().map_or((0.0, 0.0), |c| (c.icl * inv, c.seqcl * inv));
    let next = next_sum * inv;
    let losses = LossComponents {
        total: multi_task_loss(next, icl, seqcl, cfg.weights()),
        next,
        icl,
        seqcl,
    };
    finite("total", losses.total)?;
    Ok((losses, acc))
}

/// One optimizer step on one batch of user indices.
pub fn mstep_batch(
    params: &mut EncoderParams,
    state: &mut AdamState,
    data: &SplitDataset,
    batch: &[usize],
    intents: Option<&IntentModel>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossComponents> {
    let (losses, grads) = batch_gradients(params, data, batch, intents, cfg, epoch)?;
    adam_step(&mut params.tensors, &grads, state, &cfg.adam)?;
    Ok(losses)
}

/// All batches of one epoch; the intent model stays fixed throughout.
/// Returns per-user mean losses over the epoch.
pub fn epoch_mstep(
    params: &mut EncoderParams,
    state: &mut AdamState,
    data: &SplitDataset,
    batches: &[Vec<usize>],
    intents: Option<&IntentModel>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossComponents> {
    let mut sum = LossComponents::default();
    let mut users = 0usize;
    for b in batches {
        let l = mstep_batch(params, state, data, b, intents, cfg, epoch)?;
        let w = b.len() as f64;
        sum.total += w * l.total;
        sum.next += w * l.next;
        sum.icl += w * l.icl;
        sum.seqcl += w * l.seqcl;
        users += b.len();
    }
    let inv = 1.0 / users.max(1) as f64;
    Ok(LossComponents {
        total: sum.total * inv,
        next: sum.next * inv,
        icl: sum.icl * inv,
        seqcl: sum.seqcl * inv,
    })
}

fn check_inputs(data: &SplitDataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.encoder.vocab_size != data.vocab_size + 2 {
        return Err(Error::arg(format!(
            "encoder vocabulary {} does not fit {} items",
            cfg.encoder.vocab_size, data.vocab_size
        )));
    }
    if cfg.k > data.users.len() {
        return Err(Error::arg(format!("k = {} exceeds {} users", cfg.k, data.users.len())));
    }
    Ok(())
}

pub fn train(data: &SplitDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(data, cfg, |_, _| {})
}

/// [`train`] with a callback after every completed epoch.
pub fn train_with<F>(data: &SplitDataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutput>
where
    F: FnMut(&EpochRecord, &EpochTiming),
{
    check_inputs(data, cfg)?;
    let mut params = EncoderParams::init(&cfg.encoder, cfg.seed)?;
    let mut state = AdamState::new(&params.tensors);
    let train_seqs = padded_train_seqs(data, cfg.encoder.max_len);
    let eval_opts = cfg.eval_options();

    let mut epochs = Vec::new();
    let mut timings = Vec::new();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let intents = if cfg.lambda > 0.0 {
            let seed = rng::derive_seed(cfg.seed, &[tag::KMEANS, epoch as u64]);
            Some(estep(&params, &train_seqs, cfg.k, cfg.kmeans_max_iter, seed)?)
        } else {
            None
        };
        let t1 = Instant::now();
        let batches = epoch_batches(data.users.len(), cfg.batch_size, cfg.seed, epoch);
        let loss = epoch_mstep(&mut params, &mut state, data, &batches, intents.as_ref(), cfg, epoch)?;
        let t2 = Instant::now();
        let valid = evaluate(&params, data, Phase::Valid, &eval_opts)?;
        let t3 = Instant::now();

        let record = EpochRecord {
            epoch: epoch + 1,
            loss,
            distortion: intents.as_ref().map(|m| m.distortion),
            valid,
        };
        let timing = EpochTiming {
            epoch: epoch + 1,
            estep_secs: (t1 - t0).as_secs_f64(),
            mstep_secs: (t2 - t1).as_secs_f64(),
            eval_secs: (t3 - t2).as_secs_f64(),
        };
        on_epoch(&record, &timing);

        let score = record.valid.ndcg_at(20);
        let improved = best.as_ref().is_none_or(|(s, _, _)| score > *s);
        if improved {
            best = Some((score, epoch + 1, params.clone()));
        }
        epochs.push(record);
        timings.push(timing);
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch + 1 - best_epoch >= cfg.patience {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    let seed = rng::derive_seed(cfg.seed, &[tag::KMEANS, u64::MAX]);
    let intents = estep(&best_params, &train_seqs, cfg.k, cfg.kmeans_max_iter, seed)?;
    let test = evaluate(&best_params, data, Phase::Test, &eval_opts)?;
    Ok(TrainOutput {
        params: best_params,
        intents,
        report: TrainReport {
            label: cfg.label().to_string(),
            epochs,
            best_epoch,
            stopped_early,
            test,
        },
        optimizer: state,
        timings,
    })
}
