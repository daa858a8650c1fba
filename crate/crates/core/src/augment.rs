//! Sequence augmentations (crop, mask, reorder) and positive-view sampling.
//!
//! Augmentations act on the un-padded item list; padding happens afterwards.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentKind {
    Crop,
    Mask,
    Reorder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
    /// Operations views are drawn from, uniformly.
    pub ops: Vec<AugmentKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_ratio: 0.6,
            mask_ratio: 0.3,
            reorder_ratio: 0.2,
            ops: vec![AugmentKind::Crop, AugmentKind::Mask, AugmentKind::Reorder],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("crop", self.crop_ratio),
            ("mask", self.mask_ratio),
            ("reorder", self.reorder_ratio),
        ] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::arg(format!("{name} ratio {r} outside (0, 1]")));
            }
        }
        if self.ops.is_empty() {
            return Err(Error::arg("augmentation op set is empty"));
        }
        Ok(())
    }
}

fn floor_len(ratio: f64, len: usize) -> usize {
    (ratio * len as f64).floor() as usize
}

fn crop_window(ratio: f64, len: usize) -> usize {
    floor_len(ratio, len).max(1)
}

/// Contiguous window of `max(1, ⌊ratio·len⌋)` items starting at `start`.
pub fn crop(seq: &[ItemId], ratio: f64, start: usize) -> Result<Vec<ItemId>> {
    if seq.is_empty() {
        return Err(Error::arg("crop of an empty sequence"));
    }
    let w = crop_window(ratio, seq.len());
    if start + w > seq.len() {
        return Err(Error::arg(format!(
            "crop window [{start}, {}) exceeds length {}",
            start + w,
            seq.len()
        )));
    }
    Ok(seq[start..start + w].to_vec())
}

/// Replaces the items at `positions` with `mask_id`.
pub fn mask(seq: &[ItemId], ratio: f64, positions: &[usize], mask_id: ItemId) -> Result<Vec<ItemId>> {
    let expected = floor_len(ratio, seq.len());
    if positions.len() != expected {
        return Err(Error::arg(format!(
            "mask expects {expected} positions, got {}",
            positions.len()
        )));
    }
    let mut out = seq.to_vec();
    for &p in positions {
        if p >= seq.len() {
            return Err(Error::arg(format!("mask position {p} out of range")));
        }
        out[p] = mask_id;
    }
    Ok(out)
}

/// Permutes the window `[start, start + ⌊ratio·len⌋)`; `permutation[i]` is
/// the window offset whose item lands at offset `i`.
pub fn reorder(seq: &[ItemId], ratio: f64, start: usize, permutation: &[usize]) -> Result<Vec<ItemId>> {
    let w = floor_len(ratio, seq.len());
    if start + w > seq.len() {
        return Err(Error::arg("reorder window out of bounds"));
    }
    if permutation.len() != w {
        return Err(Error::arg(format!(
            "permutation has {} entries, window has {w}",
            permutation.len()
        )));
    }
    let mut seen = vec![false; w];
    for &p in permutation {
        if p >= w || std::mem::replace(&mut seen[p], true) {
            return Err(Error::arg("reorder input is not a permutation of the window"));
        }
    }
    let mut out = seq.to_vec();
    for (i, &p) in permutation.iter().enumerate() {
        out[start + i] = seq[start + p];
    }
    Ok(out)
}

/// Applies `kind` with freshly drawn free parameters.
pub fn apply_random(
    kind: AugmentKind,
    seq: &[ItemId],
    cfg: &AugmentConfig,
    mask_id: ItemId,
    rng: &mut rng::Rng,
) -> Vec<ItemId> {
    let len = seq.len();
    let out = match kind {
        AugmentKind::Crop => {
            let w = crop_window(cfg.crop_ratio, len);
            let start = rng.gen_range(0..=len - w);
            crop(seq, cfg.crop_ratio, start)
        }
        AugmentKind::Mask => {
            let k = floor_len(cfg.mask_ratio, len);
            let positions = index::sample(rng, len, k).into_vec();
            mask(seq, cfg.mask_ratio, &positions, mask_id)
        }
        AugmentKind::Reorder => {
            let w = floor_len(cfg.reorder_ratio, len);
            let start = rng.gen_range(0..=len - w);
            let mut perm: Vec<usize> = (0..w).collect();
            perm.shuffle(rng);
            reorder(seq, cfg.reorder_ratio, start, &perm)
        }
    };
    out.expect("sampled parameters are always in range")
}

fn draw_kind(cfg: &AugmentConfig, rng: &mut rng::Rng) -> AugmentKind {
    cfg.ops[rng.gen_range(0..cfg.ops.len())]
}

/// Draws two operations uniformly from the configured set and applies each
/// to `seq`.
pub fn sample_view_pair_with(
    seq: &[ItemId],
    cfg: &AugmentConfig,
    mask_id: ItemId,
    rng: &mut rng::Rng,
) -> (Vec<ItemId>, Vec<ItemId>) {
    assert!(!seq.is_empty(), "views need at least one item");
    let k1 = draw_kind(cfg, rng);
    let k2 = draw_kind(cfg, rng);
    let v1 = apply_random(k1, seq, cfg, mask_id, rng);
    let v2 = apply_random(k2, seq, cfg, mask_id, rng);
    (v1, v2)
}

pub fn sample_view_pair(
    seq: &[ItemId],
    cfg: &AugmentConfig,
    mask_id: ItemId,
    rng_seed: u64,
) -> (Vec<ItemId>, Vec<ItemId>) {
    let mut rng = rng::seeded(rng_seed);
    sample_view_pair_with(seq, cfg, mask_id, &mut rng)
}
