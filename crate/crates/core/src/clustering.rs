//! K-means over embedding vectors and routing of data groups to learners.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Result of a K-means run over `N` row vectors of width `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster index of each input row.
    pub assignment: Vec<usize>,
    /// Row-major `K×dim`.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every centroid update, in order.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Inertia recomputed from `assignment` and `centroids`.
    pub fn recompute_inertia(&self, vectors: &[f64]) -> f64 {
        inertia(vectors, self.dim, &self.centroids, &self.assignment)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_input(vectors: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(Error::Dimension(format!("{} values do not form rows of width {dim}", vectors.len())));
    }
    let n = vectors.len() / dim;
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidInput(format!("cannot form {k} clusters from {n} points")));
    }
    Ok(n)
}

/// k-means++ seeding: first centre uniform, then proportional to the squared
/// distance to the nearest chosen centre.
pub fn kmeanspp_init<R: Rng>(vectors: &[f64], dim: usize, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let n = check_input(vectors, dim, k)?;
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.extend_from_slice(row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(pick)));
        }
    }
    Ok(centroids)
}

/// Nearest centroid per row; ties go to the lowest cluster index.
pub fn nearest_centroids(vectors: &[f64], dim: usize, centroids: &[f64]) -> Vec<usize> {
    let k = centroids.len() / dim;
    vectors
        .chunks(dim)
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..k {
                let d = sq_dist(x, &centroids[j * dim..(j + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn inertia(vectors: &[f64], dim: usize, centroids: &[f64], assignment: &[usize]) -> f64 {
    vectors
        .chunks(dim)
        .zip(assignment)
        .map(|(x, &a)| sq_dist(x, &centroids[a * dim..(a + 1) * dim]))
        .sum()
}

fn update_centroids(vectors: &[f64], dim: usize, k: usize, assignment: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &a) in vectors.chunks(dim).zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let c = counts[j] as f64;
            sums[j * dim..(j + 1) * dim].iter_mut().for_each(|s| *s /= c);
        }
    }
    (sums, counts)
}

/// Lloyd iterations from the given centres.
///
/// Stops when assignments are stable, the relative inertia change drops below
/// `tol`, or after `max_iter` updates. An empty cluster takes the point of the
/// largest cluster that lies farthest from that cluster's centre.
pub fn lloyd(vectors: &[f64], dim: usize, init: Vec<f64>, max_iter: usize, tol: f64) -> Result<ClusterAssignment> {
    if !init.len().is_multiple_of(dim.max(1)) {
        return Err(Error::Dimension("centroid buffer is not a multiple of dim".into()));
    }
    let k = init.len() / dim;
    let n = check_input(vectors, dim, k)?;
    let mut assignment = nearest_centroids(vectors, dim, &init);
    let mut centroids = init;
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let (mut c, mut counts) = update_centroids(vectors, dim, k, &assignment);
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let donor = (0..k).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).expect("k >= 1");
            let far = (0..n)
                .filter(|&i| assignment[i] == donor)
                .max_by(|&a, &b| {
                    let da = sq_dist(&vectors[a * dim..(a + 1) * dim], &c[donor * dim..(donor + 1) * dim]);
                    let db = sq_dist(&vectors[b * dim..(b + 1) * dim], &c[donor * dim..(donor + 1) * dim]);
                    da.total_cmp(&db).then(b.cmp(&a))
                })
                .expect("donor cluster is non-empty");
            assignment[far] = j;
            (c, counts) = update_centroids(vectors, dim, k, &assignment);
        }
        centroids = c;
        let cur = inertia(vectors, dim, &centroids, &assignment);
        let prev = history.last().copied();
        history.push(cur);
        let next = nearest_centroids(vectors, dim, &centroids);
        if next == assignment {
            break;
        }
        if let Some(p) = prev {
            if p > 0.0 && (p - cur).abs() / p < tol {
                break;
            }
        }
        if iterations == max_iter.max(1) {
            break;
        }
        assignment = next;
    }
    let inertia = inertia(vectors, dim, &centroids, &assignment);
    Ok(ClusterAssignment { assignment, centroids, k, dim, inertia, iterations, inertia_history: history })
}

/// K-means with k-means++ seeding from `seed`.
pub fn kmeans(vectors: &[f64], dim: usize, k: usize, seed: u64, max_iter: usize) -> Result<ClusterAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeanspp_init(vectors, dim, k, &mut rng)?;
    lloyd(vectors, dim, init, max_iter, DEFAULT_TOL)
}

/// Best-inertia result over `restarts` seeds derived from `seed`.
pub fn kmeans_best_of(vectors: &[f64], dim: usize, k: usize, seed: u64, restarts: usize) -> Result<ClusterAssignment> {
    let mut best: Option<ClusterAssignment> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(vectors, dim, k, seed.wrapping_add(r as u64 * 0x9E37_79B9), DEFAULT_MAX_ITER)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Splits `0..N` into the `K` groups induced by the assignment; group `k`
/// is routed to learner `k`.
pub fn assign_groups(assignment: &ClusterAssignment) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); assignment.k];
    for (i, &a) in assignment.assignment.iter().enumerate() {
        groups[a].push(i);
    }
    groups
}

/// Writes `id,cluster` rows.
pub fn write_assignment_csv(path: &Path, ids: &[String], assignment: &ClusterAssignment) -> Result<()> {
    if ids.len() != assignment.assignment.len() {
        return Err(Error::Dimension("id list does not match the assignment".into()));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "id,cluster")?;
    for (id, a) in ids.iter().zip(&assignment.assignment) {
        writeln!(f, "{id},{a}")?;
    }
    Ok(())
}
