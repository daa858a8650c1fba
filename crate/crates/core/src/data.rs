//! Interaction corpora: loading, 5-core filtering, leave-one-out splitting,
//! fixed-length padding and the robustness transformations (test-time
//! noise, length groups).
//!
//! Item ids are dense: `0` is padding, `1..=|V|` are real items and
//! `|V| + 1` is the mask token used by augmentation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type ItemId = usize;

pub const PAD: ItemId = 0;

/// Minimum interactions per user and per item kept by [`five_core_filter`].
pub const CORE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FileFormat {
    /// `<user> <item> <item> ...`, one user per line, items chronological.
    #[default]
    UserPerLine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub users: Vec<UserSequence>,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_actions: usize,
    pub avg_len: f64,
}

impl InteractionDataset {
    pub fn new(users: Vec<UserSequence>, vocab_size: usize) -> Self {
        InteractionDataset { users, vocab_size }
    }

    pub fn pad_id(&self) -> ItemId {
        PAD
    }

    pub fn mask_id(&self) -> ItemId {
        self.vocab_size + 1
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn stats(&self) -> DatasetStats {
        let n_actions: usize = self.users.iter().map(|u| u.items.len()).sum();
        let n_users = self.users.len();
        DatasetStats {
            n_users,
            n_items: self.vocab_size,
            n_actions,
            avg_len: if n_users == 0 {
                0.0
            } else {
                n_actions as f64 / n_users as f64
            },
        }
    }

    /// Checks that every id lies in `1..=vocab_size`.
    pub fn validate(&self) -> Result<()> {
        for u in &self.users {
            if let Some(&bad) = u.items.iter().find(|&&i| i == PAD || i > self.vocab_size) {
                return Err(Error::Index(format!(
                    "user {} has item {bad} outside 1..={}",
                    u.user, self.vocab_size
                )));
            }
        }
        Ok(())
    }
}

/// Reads a user-per-line interaction file and remaps raw item ids to
/// `1..=|V|` in order of first appearance.
pub fn load_interactions(path: &Path, format: FileFormat) -> Result<InteractionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, path, format)
}

pub fn parse_interactions(text: &str, path: &Path, format: FileFormat) -> Result<InteractionDataset> {
    match format {
        FileFormat::UserPerLine => {}
    }
    let mut remap: HashMap<u64, ItemId> = HashMap::new();
    let mut users = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut tokens = line.split_whitespace();
        let Some(user) = tokens.next() else { continue };
        let mut items = Vec::new();
        for tok in tokens {
            let raw: u64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("item id {tok:?} is not a positive integer"),
            })?;
            if raw == 0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "item id 0 is not a positive integer".into(),
                });
            }
            let next = remap.len() + 1;
            items.push(*remap.entry(raw).or_insert(next));
        }
        if items.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("user {user} has no items"),
            });
        }
        users.push(UserSequence {
            user: user.to_string(),
            items,
        });
    }
    if users.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(InteractionDataset::new(users, remap.len()))
}

/// Writes a dataset in the user-per-line layout using the dense ids.
pub fn write_interactions(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for u in &ds.users {
        out.push_str(&u.user);
        for i in &u.items {
            out.push(' ');
            out.push_str(&i.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Repeatedly drops users and items with fewer than five interactions until
/// nothing changes, then re-densifies item ids preserving their order.
pub fn five_core_filter(ds: &InteractionDataset) -> InteractionDataset {
    let mut users: Vec<UserSequence> = ds.users.clone();
    loop {
        let mut item_count: HashMap<ItemId, usize> = HashMap::new();
        for u in &users {
            for &i in &u.items {
                *item_count.entry(i).or_default() += 1;
            }
        }
        let mut changed = false;
        let mut next = Vec::with_capacity(users.len());
        for mut u in users {
            if u.items.len() < CORE {
                changed = true;
                continue;
            }
            let before = u.items.len();
            u.items.retain(|i| item_count[i] >= CORE);
            changed |= u.items.len() != before;
            next.push(u);
        }
        users = next;
        if !changed {
            break;
        }
    }

    let kept: BTreeMap<ItemId, ()> = users
        .iter()
        .flat_map(|u| u.items.iter().map(|&i| (i, ())))
        .collect();
    let dense: HashMap<ItemId, ItemId> = kept
        .keys()
        .enumerate()
        .map(|(n, &i)| (i, n + 1))
        .collect();
    for u in &mut users {
        for i in &mut u.items {
            *i = dense[i];
        }
    }
    InteractionDataset::new(users, dense.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUser {
    pub user: String,
    pub train_seq: Vec<ItemId>,
    pub valid_target: ItemId,
    pub test_target: ItemId,
    /// Input prefix used when ranking `test_target`: `train_seq` followed by
    /// `valid_target`, possibly with injected noise.
    pub test_input: Vec<ItemId>,
}

impl SplitUser {
    pub fn full_sequence(&self) -> Vec<ItemId> {
        let mut s = self.train_seq.clone();
        s.push(self.valid_target);
        s.push(self.test_target);
        s
    }

    pub fn len(&self) -> usize {
        self.train_seq.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub users: Vec<SplitUser>,
    pub vocab_size: usize,
}

impl SplitDataset {
    pub fn mask_id(&self) -> ItemId {
        self.vocab_size + 1
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Partitions users by full sequence length, shortest first.
    pub fn group_by_length(&self, n_groups: usize) -> Vec<SplitDataset> {
        let lengths: Vec<usize> = self.users.iter().map(SplitUser::len).collect();
        partition_by_length(&lengths, n_groups)
            .into_iter()
            .map(|idx| SplitDataset {
                users: idx.into_iter().map(|i| self.users[i].clone()).collect(),
                vocab_size: self.vocab_size,
            })
            .collect()
    }
}

/// Last item → test, second to last → validation, the rest → training.
/// Users with fewer than three items are dropped.
pub fn split_leave_one_out(ds: &InteractionDataset) -> SplitDataset {
    let users = ds
        .users
        .iter()
        .filter(|u| u.items.len() >= 3)
        .map(|u| {
            let n = u.items.len();
            SplitUser {
                user: u.user.clone(),
                train_seq: u.items[..n - 2].to_vec(),
                valid_target: u.items[n - 2],
                test_target: u.items[n - 1],
                test_input: u.items[..n - 1].to_vec(),
            }
        })
        .collect();
    SplitDataset {
        users,
        vocab_size: ds.vocab_size,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedSequence {
    pub items: Vec<ItemId>,
    pub real_len: usize,
}

impl PaddedSequence {
    pub fn max_len(&self) -> usize {
        self.items.len()
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        pos < self.items.len() - self.real_len
    }

    pub fn first_real(&self) -> usize {
        self.items.len() - self.real_len
    }
}

/// Keeps the most recent `max_len` items and left-pads with [`PAD`].
pub fn pad_truncate(seq: &[ItemId], max_len: usize) -> PaddedSequence {
    assert!(max_len >= 1, "max_len must be positive");
    let tail = &seq[seq.len().saturating_sub(max_len)..];
    let mut items = vec![PAD; max_len - tail.len()];
    items.extend_from_slice(tail);
    PaddedSequence {
        items,
        real_len: tail.len(),
    }
}

/// Inserts `⌈ratio·len⌉` never-interacted items at uniform positions into
/// every user's test input. Training data is untouched.
pub fn inject_test_noise(split: &SplitDataset, ratio: f64, rng_seed: u64) -> Result<SplitDataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::arg(format!("noise ratio {ratio} outside [0, 1]")));
    }
    if ratio == 0.0 {
        return Ok(split.clone());
    }
    let mut out = split.clone();
    for (u, user) in out.users.iter_mut().enumerate() {
        let mut rng = rng::stream(rng_seed, &[rng::tag::NOISE, u as u64]);
        let history: HashSet<ItemId> = user.full_sequence().into_iter().collect();
        let n_insert = (ratio * user.test_input.len() as f64).ceil() as usize;
        let candidates: Vec<ItemId> = (1..=split.vocab_size)
            .filter(|i| !history.contains(i))
            .collect();
        let chosen: Vec<ItemId> = candidates
            .choose_multiple(&mut rng, n_insert.min(candidates.len()))
            .copied()
            .collect();
        for item in chosen {
            let pos = rng.gen_range(0..=user.test_input.len());
            user.test_input.insert(pos, item);
        }
    }
    Ok(out)
}

/// Sorts user indices by length (stable) and cuts them into `n_groups`
/// contiguous buckets whose sizes differ by at most one, larger buckets first.
pub fn partition_by_length(lengths: &[usize], n_groups: usize) -> Vec<Vec<usize>> {
    assert!(n_groups >= 1, "n_groups must be positive");
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let base = order.len() / n_groups;
    let extra = order.len() % n_groups;
    let mut out = Vec::with_capacity(n_groups);
    let mut start = 0;
    for g in 0..n_groups {
        let size = base + usize::from(g < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

pub fn group_by_length(ds: &InteractionDataset, n_groups: usize) -> Vec<InteractionDataset> {
    if n_groups == 1 {
        return vec![ds.clone()];
    }
    let lengths: Vec<usize> = ds.users.iter().map(|u| u.items.len()).collect();
    partition_by_length(&lengths, n_groups)
        .into_iter()
        .map(|idx| {
            InteractionDataset::new(
                idx.into_iter().map(|i| ds.users[i].clone()).collect(),
                ds.vocab_size,
            )
        })
        .collect()
}
