//! Full-ranking evaluation and the robustness harness.
//!
//! Every real item is scored against the last-position representation;
//! the reported rank counts non-excluded items scoring at least as high as
//! the target, so ties always go against the target.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{inject_test_noise, pad_truncate, ItemId, SplitDataset, SplitUser, PAD};
use crate::encoder::{encode, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

pub const DEFAULT_KS: [usize; 2] = [5, 20];
pub const DEFAULT_NOISE_RATIOS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Valid,
    Test,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Phase::Valid),
            "test" => Ok(Phase::Test),
            other => Err(Error::arg(format!("unknown phase {other:?} (valid|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Remove the user's input items (other than the target) from ranking.
    pub exclude_seen: bool,
    pub ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_seen: true,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
}

impl EvalResult {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr[&k]
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg[&k]
    }
}

/// `1 + |{i ∉ exclude, i ≠ target : scores[i] ≥ scores[target]}|`.
pub fn rank_from_scores(scores: &[f64], target: usize, exclude: &HashSet<usize>) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::arg(format!("target {target} outside {} scores", scores.len())));
    }
    if exclude.contains(&target) {
        return Err(Error::arg(format!("target {target} is excluded from ranking")));
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite ranking score for item {bad}")));
    }
    let t = scores[target];
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target && s >= t && !exclude.contains(&i))
        .count();
    Ok(1 + above)
}

/// Scores every real item of `item_table` (rows `1..rows-1`; row 0 is pad
/// and the last row is the mask token) by dot product with `h_last`.
pub fn rank_target(
    h_last: &[f64],
    item_table: &Matrix,
    target: ItemId,
    exclude: &HashSet<ItemId>,
) -> Result<usize> {
    let scores: Vec<f64> = (0..item_table.rows).map(|i| dot(h_last, item_table.row(i))).collect();
    let mut ex = exclude.clone();
    ex.insert(PAD);
    ex.insert(item_table.rows - 1);
    rank_from_scores(&scores, target, &ex)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

fn phase_input(u: &SplitUser, phase: Phase) -> (&[ItemId], ItemId) {
    match phase {
        Phase::Valid => (&u.train_seq, u.valid_target),
        Phase::Test => (&u.test_input, u.test_target),
    }
}

/// Rank of the phase target for every user, in user order.
pub fn user_ranks(
    params: &EncoderParams,
    data: &SplitDataset,
    phase: Phase,
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    let t = params.config.max_len;
    data.users
        .iter()
        .map(|u| {
            let (input, target) = phase_input(u, phase);
            let rep = encode(params, &pad_truncate(input, t), Mode::Eval, 0)?;
            let mut exclude: HashSet<ItemId> = HashSet::new();
            if opts.exclude_seen {
                exclude.extend(input.iter().copied());
                exclude.remove(&target);
            }
            rank_target(rep.last(), params.item_table(), target, &exclude)
        })
        .collect()
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> EvalResult {
    let n = ranks.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let h: f64 = ranks.iter().map(|&r| hr_at_k(r, k)).sum();
        let g: f64 = ranks.iter().map(|&r| ndcg_at_k(r, k)).sum();
        hr.insert(k, h / n);
        ndcg.insert(k, g / n);
    }
    EvalResult {
        hr,
        ndcg,
        n_users: ranks.len(),
    }
}

pub fn evaluate(
    params: &EncoderParams,
    data: &SplitDataset,
    phase: Phase,
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if data.users.is_empty() {
        return Err(Error::arg("no users to evaluate"));
    }
    let ranks = user_ranks(params, data, phase, opts)?;
    Ok(metrics_from_ranks(&ranks, &opts.ks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub ratio: f64,
    pub result: EvalResult,
    /// Relative NDCG@5 loss against the clean test set.
    pub drop_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean: EvalResult,
    pub noise: Vec<NoiseRow>,
    pub groups: Vec<GroupRow>,
}

/// `(m₀ − m_r) / m₀`, zero when the clean metric is zero.
pub fn drop_rate(clean: f64, noisy: f64) -> f64 {
    if clean == 0.0 {
        0.0
    } else {
        (clean - noisy) / clean
    }
}

/// Test-phase evaluation under injected noise and per length group.
/// `n_groups = 0` skips the grouping.
pub fn robustness_report(
    params: &EncoderParams,
    data: &SplitDataset,
    ratios: &[f64],
    n_groups: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<RobustnessReport> {
    let mut opts = opts.clone();
    if !opts.ks.contains(&5) {
        opts.ks.push(5);
        opts.ks.sort_unstable();
    }
    let clean = evaluate(params, data, Phase::Test, &opts)?;
    let m0 = clean.ndcg_at(5);
    let noise = ratios
        .iter()
        .map(|&ratio| {
            let noisy = inject_test_noise(data, ratio, seed)?;
            let result = evaluate(params, &noisy, Phase::Test, &opts)?;
            Ok(NoiseRow {
                ratio,
                drop_rate: drop_rate(m0, result.ndcg_at(5)),
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let groups = if n_groups == 0 {
        Vec::new()
    } else {
        data.group_by_length(n_groups)
            .into_iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(i, g)| {
                let lens: Vec<usize> = g.users.iter().map(SplitUser::len).collect();
                Ok(GroupRow {
                    group: i,
                    min_len: *lens.iter().min().unwrap(),
                    max_len: *lens.iter().max().unwrap(),
                    result: evaluate(params, &g, Phase::Test, &opts)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(RobustnessReport {
        clean,
        noise,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng;

    #[test]
    fn metric_examples() {
        assert_eq!(hr_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(1, 5), 1.0);
        assert_eq!(ndcg_at_k(3, 5), 0.5);
        assert_eq!(hr_at_k(21, 20), 0.0);
        assert_eq!(ndcg_at_k(21, 20), 0.0);
    }

    #[test]
    fn rank_examples() {
        let none = HashSet::new();
        assert_eq!(rank_from_scores(&[0.1, 0.9, 0.3], 1, &none).unwrap(), 1);
        // Ties count against the target.
        let flat = vec![0.5; 11];
        let ex: HashSet<usize> = [2, 3, 4].into_iter().collect();
        assert_eq!(rank_from_scores(&flat, 7, &ex).unwrap(), 11 - 3);
        assert!(rank_from_scores(&flat, 2, &ex).is_err());
        let nan = [0.1, f64::NAN, 0.3];
        assert!(matches!(rank_from_scores(&nan, 0, &HashSet::new()), Err(Error::Numeric(_))));

        // Through the table: |V| = 10, pad and mask never compete.
        let table = Matrix::filled(12, 3, 1.0);
        let ex: HashSet<ItemId> = [1, 2].into_iter().collect();
        assert_eq!(rank_target(&[1.0, 0.0, 0.0], &table, 5, &ex).unwrap(), 10 - 2);
    }

    #[test]
    fn rank_matches_sort_oracle() {
        let mut r = rng::seeded(21);
        for _ in 0..200 {
            let s = Matrix::uniform(1, 50, -1.0, 1.0, &mut r).data;
            let target = 7;
            let mut order: Vec<usize> = (0..50).collect();
            // Target last among equals.
            order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then((a == target).cmp(&(b == target))));
            let oracle = order.iter().position(|&i| i == target).unwrap() + 1;
            assert_eq!(rank_from_scores(&s, target, &HashSet::new()).unwrap(), oracle);
        }
    }

    fn tiny_split(n_items: usize) -> (EncoderParams, SplitDataset) {
        let mut cfg = EncoderConfig::new(n_items);
        cfg.dim = 8;
        cfg.max_len = 8;
        let p = EncoderParams::init(&cfg, 1).unwrap();
        let users = (0..12)
            .map(|u| {
                let seq: Vec<ItemId> = (0..6).map(|k| 1 + (u * 7 + k * 3) % n_items).collect();
                SplitUser {
                    user: format!("u{u}"),
                    train_seq: seq[..4].to_vec(),
                    valid_target: seq[4],
                    test_target: seq[5],
                    test_input: seq[..5].to_vec(),
                }
            })
            .collect();
        (
            p,
            SplitDataset {
                users,
                vocab_size: n_items,
            },
        )
    }

    #[test]
    fn metric_ordering_and_user_order_invariance() {
        let (p, d) = tiny_split(40);
        let o = EvalOptions::default();
        let r = evaluate(&p, &d, Phase::Test, &o).unwrap();
        assert!(r.hr_at(5) <= r.hr_at(20));
        for k in [5, 20] {
            assert!(r.ndcg_at(k) <= r.hr_at(k));
            assert!((0.0..=1.0).contains(&r.hr_at(k)));
        }
        let mut rev = d.clone();
        rev.users.reverse();
        let mut ranks = user_ranks(&p, &d, Phase::Test, &o).unwrap();
        let mut rranks = user_ranks(&p, &rev, Phase::Test, &o).unwrap();
        ranks.sort_unstable();
        rranks.sort_unstable();
        assert_eq!(ranks, rranks);
        let empty = SplitDataset {
            users: vec![],
            vocab_size: 40,
        };
        assert!(evaluate(&p, &empty, Phase::Test, &o).is_err());
    }

    #[test]
    fn target_row_as_query_ranks_first() {
        // Unit-norm rows: by Cauchy-Schwarz the target's own row scores highest.
        let mut r = rng::seeded(4);
        let mut table = Matrix::randn(52, 6, 1.0, &mut r);
        for i in 0..table.rows {
            let n = dot(table.row(i), table.row(i)).sqrt();
            table.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        for target in 1..=50 {
            let h = table.row(target).to_vec();
            let rank = rank_target(&h, &table, target, &HashSet::new()).unwrap();
            assert_eq!(hr_at_k(rank, 5), 1.0);
        }
    }

    #[test]
    fn random_model_matches_uniform_null() {
        // With the target drawn uniformly from the unseen items its rank is
        // uniform over the candidates, so HR@20 = 20 / |candidates|.
        let n_items = 1000;
        let mut cfg = EncoderConfig::new(n_items);
        cfg.dim = 16;
        cfg.max_len = 10;
        cfg.n_blocks = 1;
        let p = EncoderParams::init(&cfg, 8).unwrap();
        let mut r = rng::seeded(6);
        let n_users = 3000;
        let users: Vec<SplitUser> = (0..n_users)
            .map(|u| {
                use rand::Rng as _;
                let hist: Vec<ItemId> = rand::seq::index::sample(&mut r, n_items, 5)
                    .into_iter()
                    .map(|i| i + 1)
                    .collect();
                let target = loop {
                    let t = r.gen_range(1..=n_items);
                    if !hist.contains(&t) {
                        break t;
                    }
                };
                SplitUser {
                    user: format!("u{u}"),
                    train_seq: hist[..4].to_vec(),
                    valid_target: hist[4],
                    test_target: target,
                    test_input: hist.clone(),
                }
            })
            .collect();
        let d = SplitDataset {
            users,
            vocab_size: n_items,
        };
        let res = evaluate(&p, &d, Phase::Test, &EvalOptions::default()).unwrap();
        let pr = 20.0 / (n_items - 5) as f64;
        let sigma = (pr * (1.0 - pr) / n_users as f64).sqrt();
        assert!((res.hr_at(20) - pr).abs() < 3.0 * sigma, "{} vs {pr}", res.hr_at(20));
    }

    #[test]
    fn noise_ratio_zero_equals_plain_evaluation() {
        let (p, d) = tiny_split(60);
        let o = EvalOptions::default();
        let rep = robustness_report(&p, &d, &[0.0], 0, 3, &o).unwrap();
        assert_eq!(rep.noise[0].result, evaluate(&p, &d, Phase::Test, &o).unwrap());
        assert_eq!(rep.noise[0].drop_rate, 0.0);
        let a = robustness_report(&p, &d, &[0.0, 0.1], 2, 3, &o).unwrap();
        let b = robustness_report(&p, &d, &[0.0, 0.1], 2, 3, &o).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noise.len(), 2);
        assert_eq!(a.groups.iter().map(|g| g.result.n_users).sum::<usize>(), 12);
        assert_eq!(drop_rate(0.5, 0.4), (0.5 - 0.4) / 0.5);
    }
}
