//! Synthetic corpus with planted intents.
//!
//! Items are split into `n_intents` disjoint pools. Each user belongs to one
//! pool and only interacts with its items: the first item is uniform, and
//! every later item is either the pool successor of the previous one (with
//! probability `follow_prob`) or another uniform draw from the pool.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, ItemId, UserSequence};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_intents: usize,
    pub pool_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub follow_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 400,
            n_intents: 4,
            pool_size: 25,
            min_len: 10,
            max_len: 20,
            follow_prob: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_intents == 0 || self.pool_size == 0 {
            return Err(Error::arg("n_users, n_intents and pool_size must be at least 1"));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::arg(format!(
                "length range [{}, {}] must satisfy 3 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.follow_prob) {
            return Err(Error::arg(format!("follow_prob {} outside [0, 1]", self.follow_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub dataset: InteractionDataset,
    /// Generating intent of every user, aligned with `dataset.users`.
    pub labels: Vec<usize>,
}

/// Pool of item `id`: ids `p·pool_size + 1 ..= (p+1)·pool_size` form pool `p`.
pub fn pool_of(id: ItemId, pool_size: usize) -> usize {
    (id - 1) / pool_size
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut labels = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut r = rng::stream(cfg.seed, &[tag::SYNTHETIC, u as u64]);
        let pool = u % cfg.n_intents;
        let base = pool * cfg.pool_size + 1;
        let len = r.gen_range(cfg.min_len..=cfg.max_len);
        let mut offset = r.gen_range(0..cfg.pool_size);
        let mut items = Vec::with_capacity(len);
        items.push(base + offset);
        for _ in 1..len {
            offset = if r.gen_bool(cfg.follow_prob) {
                (offset + 1) % cfg.pool_size
            } else {
                r.gen_range(0..cfg.pool_size)
            };
            items.push(base + offset);
        }
        users.push(UserSequence {
            user: format!("u{u}"),
            items,
        });
        labels.push(pool);
    }
    Ok(SyntheticCorpus {
        dataset: InteractionDataset::new(users, cfg.n_intents * cfg.pool_size),
        labels,
    })
}
