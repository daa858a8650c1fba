//! Intent prototypes: k-means over pooled sequence representations.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::PaddedSequence;
use crate::encoder::{encode_pooled, EncoderParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{squared_distance, Matrix};

pub const DEFAULT_MAX_ITER: usize = 20;

/// K centroids plus the hard assignment of every fitted point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentModel {
    pub k: usize,
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub distortion: f64,
    /// Distortion after every Lloyd update, in order.
    pub history: Vec<f64>,
    pub seed: u64,
}

impl IntentModel {
    /// Nearest centroid by squared Euclidean distance; ties go to the lower index.
    pub fn assign(&self, h: &[f64]) -> (usize, &[f64]) {
        let i = nearest(&self.centroids, h);
        (i, self.centroids.row(i))
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest(centroids: &Matrix, h: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows {
        let d = squared_distance(h, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn assign_all(points: &Matrix, centroids: &Matrix) -> Vec<usize> {
    (0..points.rows).map(|i| nearest(centroids, points.row(i))).collect()
}

fn distortion(points: &Matrix, centroids: &Matrix, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_distance(points.row(i), centroids.row(a)))
        .sum()
}

fn plus_plus_init(points: &Matrix, k: usize, rng: &mut rng::Rng) -> Matrix {
    let n = points.rows;
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            // Every remaining point coincides with a chosen centre.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    let mut c = Matrix::zeros(k, points.cols);
    for (r, &i) in chosen.iter().enumerate() {
        c.row_mut(r).copy_from_slice(points.row(i));
    }
    c
}

/// Recomputes centroids as means of their members, summing in point order.
/// Empty clusters take the point farthest from its centroid among clusters
/// with more than one member.
fn update_centroids(points: &Matrix, k: usize, assignments: &mut [usize], centroids: &mut Matrix) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assignments.iter().enumerate() {
            if sizes[a] > 1 {
                let d = squared_distance(points.row(i), centroids.row(a));
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let i = far.expect("k ≤ n guarantees a cluster with two members");
        assignments[i] = empty;
    }
    let mut sums = Matrix::zeros(k, points.cols);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        let n = counts[c] as f64;
        for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
            *dst = s / n;
        }
    }
}

/// k-means++ seeding followed by at most `max_iter` Lloyd rounds, stopping
/// early once assignments no longer change.
pub fn kmeans_fit(points: &Matrix, k: usize, max_iter: usize, rng_seed: u64) -> Result<IntentModel> {
    let n = points.rows;
    if n == 0 {
        return Err(Error::arg("k-means needs at least one point"));
    }
    if k == 0 || k > n {
        return Err(Error::arg(format!("K = {k} must lie in 1..={n}")));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("k-means input contains non-finite values".into()));
    }
    let mut rng = rng::stream(rng_seed, &[rng::tag::KMEANS]);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = assign_all(points, &centroids);
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        update_centroids(points, k, &mut assignments, &mut centroids);
        history.push(distortion(points, &centroids, &assignments));
        let next = assign_all(points, &centroids);
        if next == assignments {
            break;
        }
        assignments = next;
    }
    // Leave assignments consistent with the returned centroids.
    assignments = assign_all(points, &centroids);
    let d = distortion(points, &centroids, &assignments);
    if d < *history.last().expect("at least one round") {
        history.push(d);
    }
    Ok(IntentModel {
        k,
        centroids,
        assignments,
        distortion: d,
        history,
        seed: rng_seed,
    })
}

/// Encodes every sequence in eval mode, mean-pools and clusters.
pub fn estep(
    params: &EncoderParams,
    train_seqs: &[PaddedSequence],
    k: usize,
    max_iter: usize,
    rng_seed: u64,
) -> Result<IntentModel> {
    let reps = encode_pooled(params, train_seqs)?;
    kmeans_fit(&Matrix::from_rows(&reps), k, max_iter, rng_seed)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2·I(A;B) / (H(A) + H(B))` of two labelings.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let ha = entropy(ca.iter().copied(), n);
    let hb = entropy(cb.iter().copied(), n);
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy / ((ca[x] as f64 / n) * (cb[y] as f64 / n))).ln();
            }
        }
    }
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

/// Per-intent view of a set of representations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntentSummary {
    pub sizes: Vec<usize>,
    /// For each centroid, the `top_m` closest points as `(index, squared distance)`,
    /// closest first, ties by lower index.
    pub nearest: Vec<Vec<(usize, f64)>>,
    /// Euclidean distances between centroids.
    pub centroid_distances: Matrix,
}

pub fn summarize(model: &IntentModel, reps: &Matrix, top_m: usize) -> IntentSummary {
    let mut sizes = vec![0usize; model.k];
    for i in 0..reps.rows {
        sizes[model.assign(reps.row(i)).0] += 1;
    }
    let nearest = (0..model.k)
        .map(|c| {
            let mut d: Vec<(usize, f64)> = (0..reps.rows)
                .map(|i| (i, squared_distance(reps.row(i), model.centroids.row(c))))
                .collect();
            d.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
            d.truncate(top_m);
            d
        })
        .collect();
    let mut cd = Matrix::zeros(model.k, model.k);
    for i in 0..model.k {
        for j in 0..model.k {
            cd.set(
                i,
                j,
                squared_distance(model.centroids.row(i), model.centroids.row(j)).sqrt(),
            );
        }
    }
    IntentSummary {
        sizes,
        nearest,
        centroid_distances: cd,
    }
}
