//! Clustering, retrieval and segmentation metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::kmeans_best_of;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layout::{l2_normalize, SubspaceLayout};
use crate::model::{EmbeddingModel, FeatureExtractor};
use crate::nn::Real;

/// Restarts used for the evaluation K-means.
pub const EVAL_KMEANS_RESTARTS: usize = 10;

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(L;C) / √(H(L)·H(C))` (natural log).
/// Returns 0 when either entropy is 0.
pub fn nmi(labels: &[usize], clusters: &[usize]) -> Result<f64> {
    if labels.len() != clusters.len() {
        return Err(Error::Dimension(format!("{} labels vs {} cluster ids", labels.len(), clusters.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("nmi of an empty labeling".into()));
    }
    let n = labels.len() as f64;
    // Ordered maps fix the summation order.
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut lc: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cc: BTreeMap<usize, usize> = BTreeMap::new();
    for (&l, &c) in labels.iter().zip(clusters) {
        *joint.entry((l, c)).or_default() += 1;
        *lc.entry(l).or_default() += 1;
        *cc.entry(c).or_default() += 1;
    }
    let hl = entropy(lc.values().copied(), n);
    let hc = entropy(cc.values().copied(), n);
    if hl <= 0.0 || hc <= 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(l, c), &nlc)| {
            let p = nlc as f64 / n;
            p * (nlc as f64 * n / (lc[&l] as f64 * cc[&c] as f64)).ln()
        })
        .sum();
    Ok((mi / (hl * hc).sqrt()).clamp(0.0, 1.0))
}

/// Indices of the `n` gallery rows nearest to `query`, ascending Euclidean
/// distance, ties broken by index. `skip` is excluded.
fn nearest(query: &[f64], gallery: &[f64], dim: usize, n: usize, skip: Option<usize>) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = gallery
        .chunks(dim)
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, g)| (g.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    let n = n.min(d.len());
    if n == 0 {
        return Vec::new();
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if n < d.len() {
        d.select_nth_unstable_by(n - 1, cmp);
        d.truncate(n);
    }
    d.sort_unstable_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

/// Fraction of rows whose `k` nearest other rows contain a same-label row.
/// A sample whose class has no other member always counts as a miss.
pub fn recall_at_k(embeddings: &[f64], dim: usize, labels: &[usize], k: usize) -> Result<f64> {
    if dim == 0 || embeddings.len() != labels.len() * dim {
        return Err(Error::Dimension("embeddings do not match labels".into()));
    }
    let n = labels.len();
    if k == 0 || n <= k {
        return Err(Error::InvalidInput(format!("recall@{k} needs more than {k} samples (got {n})")));
    }
    let hits = (0..n)
        .filter(|&i| {
            nearest(&embeddings[i * dim..(i + 1) * dim], embeddings, dim, k, Some(i))
                .iter()
                .any(|&j| labels[j] == labels[i])
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// The `n` gallery ids nearest to `query`, ascending distance, ties by
/// gallery order.
pub fn retrieve<'a>(query: &[f64], gallery: &[f64], ids: &'a [String], n: usize) -> Result<Vec<&'a str>> {
    let dim = query.len();
    if dim == 0 || gallery.len() != ids.len() * dim {
        return Err(Error::Dimension("gallery does not match ids".into()));
    }
    if n > ids.len() {
        return Err(Error::InvalidInput(format!("asked for {n} of {} gallery items", ids.len())));
    }
    Ok(nearest(query, gallery, dim, n, None).into_iter().map(|i| ids[i].as_str()).collect())
}

/// Dice coefficient `2|a∩b| / (|a|+|b|)`; 1 when both masks are empty.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| *v > 1) {
        return Err(Error::InvalidInput("dice expects binary masks".into()));
    }
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += usize::from(*x & *y);
        sa += usize::from(*x);
        sb += usize::from(*y);
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nmi: f64,
    /// Recall@K keyed by K.
    pub recall: BTreeMap<usize, f64>,
    pub n_queries: usize,
    pub seed: u64,
    /// Seconds since the Unix epoch; excluded from reproducibility checks.
    pub timestamp: u64,
}

impl MetricReport {
    pub fn r_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Appends the report as one JSON line.
    pub fn append_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(self)?)?;
        Ok(())
    }
}

pub fn unix_time() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Clustering and retrieval metrics of arbitrary embeddings (`N×dim`).
///
/// NMI uses K-means with K = number of distinct labels (best of
/// [`EVAL_KMEANS_RESTARTS`]); recall is reported at K ∈ {1, 4}.
pub fn evaluate_embeddings(embeddings: &[f64], dim: usize, labels: &[usize], seed: u64) -> Result<MetricReport> {
    let n = labels.len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len().clamp(1, n.max(1));
    let clusters = kmeans_best_of(embeddings, dim, k, seed, EVAL_KMEANS_RESTARTS)?;
    let nmi = nmi(labels, &clusters.assignment)?;
    let mut recall = BTreeMap::new();
    for r in [1, 4] {
        if n > r {
            recall.insert(r, recall_at_k(embeddings, dim, labels, r)?);
        }
    }
    Ok(MetricReport { nmi, recall, n_queries: n, seed, timestamp: unix_time() })
}

/// Full L2-normalized embeddings of every sample, as `f64`.
pub fn normalized_embeddings<F: Real, B: FeatureExtractor<F>>(model: &EmbeddingModel<F, B>, data: &Dataset) -> Result<Vec<f64>> {
    let d = model.embedding_dim();
    let raw = model.embed_records(&data.samples, 64)?;
    let mut out: Vec<f64> = raw.iter().map(|v| v.as_f64()).collect();
    out.chunks_mut(d).for_each(l2_normalize);
    Ok(out)
}

/// Embeds `data` with the full normalized embedding and reports NMI and
/// Recall@{1,4}. Slice order does not affect distances, so the layout is
/// only checked against the model.
pub fn evaluate_checkpoint<F: Real, B: FeatureExtractor<F>>(
    model: &EmbeddingModel<F, B>,
    layout: &SubspaceLayout,
    data: &Dataset,
    seed: u64,
) -> Result<MetricReport> {
    if layout.dim() != model.embedding_dim() {
        return Err(Error::Dimension("layout does not match the embedding size".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let emb = normalized_embeddings(model, data)?;
    evaluate_embeddings(&emb, model.embedding_dim(), &data.labels(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 9]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 1, 2, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
        assert!(nmi(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn nmi_contingency_example() {
        // Contingency oracle, computed by hand: H(L) = ln 2,
        // H(C) = 1.5 ln 2, I = ln 2  ⇒  NMI = 1/√1.5.
        let v = nmi(&[0, 0, 1, 1], &[0, 0, 1, 2]).unwrap();
        assert!((v - 1.0 / 1.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        let emb = [0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0];
        assert_eq!(recall_at_k(&emb, 2, &[0, 0, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&emb, 2, &[0, 1, 2, 3], 2).unwrap(), 0.0);
        assert!(recall_at_k(&emb, 2, &[0, 0, 1, 1], 4).is_err());
    }

    #[test]
    fn retrieval_examples() {
        let gallery = [0.0, 0.0, 3.0, 0.0, 1.0, 0.0];
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(retrieve(&[3.0, 0.0], &gallery, &ids, 1).unwrap(), vec!["b"]);
        assert_eq!(retrieve(&[0.0, 0.0], &gallery, &ids, 3).unwrap(), vec!["a", "c", "b"]);
        // equidistant → gallery order
        assert_eq!(retrieve(&[2.0, 0.0], &gallery, &ids, 2).unwrap(), vec!["b", "c"]);
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(dice(&[1, 1, 1, 1, 0, 0], &[0, 0, 1, 1, 1, 1]).unwrap(), 0.5);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert!(dice(&[0, 2], &[0, 1]).is_err());
        assert!(dice(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn perfect_embedding_scores_one() {
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for c in 0..4 {
            for _ in 0..5 {
                let mut v = vec![0.0; 4];
                v[c] = 1.0;
                emb.extend(v);
                labels.push(c);
            }
        }
        let r = evaluate_embeddings(&emb, 4, &labels, 3).unwrap();
        assert!((r.nmi - 1.0).abs() < 1e-12);
        assert_eq!(r.r_at(1), 1.0);
        assert_eq!(r.r_at(4), 1.0);
    }

    proptest! {
        #[test]
        fn nmi_symmetric_and_relabel_invariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..5), 1..40),
            shift in 1usize..7,
        ) {
            let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let ab = nmi(&a, &b).unwrap();
            prop_assert!((ab - nmi(&b, &a).unwrap()).abs() < 1e-12);
            let relabeled: Vec<usize> = b.iter().map(|x| (x * 7 + shift) % 37).collect();
            prop_assert!((ab - nmi(&a, &relabeled).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn recall_is_monotone_in_k(
            emb in proptest::collection::vec(-1.0f64..1.0, 30),
            labels in proptest::collection::vec(0usize..3, 15),
        ) {
            let mut prev = 0.0;
            for k in 1..10 {
                let r = recall_at_k(&emb, 2, &labels, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
        }

        #[test]
        fn dice_symmetric_in_range(a in proptest::collection::vec(0u8..2, 16), b in proptest::collection::vec(0u8..2, 16)) {
            let x = dice(&a, &b).unwrap();
            prop_assert_eq!(x, dice(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn retrieval_translation_invariant(
            gallery in proptest::collection::vec(-4i32..4, 24),
            query in proptest::collection::vec(-4i32..4, 3),
            offset in proptest::collection::vec(-8i32..8, 3),
        ) {
            // Integer-valued coordinates keep the shifted distances exact.
            let g: Vec<f64> = gallery.iter().map(|&x| x as f64).collect();
            let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
            let ids: Vec<String> = (0..8).map(|i| i.to_string()).collect();
            let base = retrieve(&q, &g, &ids, 8).unwrap();
            let gs: Vec<f64> = g.iter().enumerate().map(|(i, v)| v + offset[i % 3] as f64).collect();
            let qs: Vec<f64> = q.iter().enumerate().map(|(i, v)| v + offset[i] as f64).collect();
            prop_assert_eq!(base, retrieve(&qs, &gs, &ids, 8).unwrap());
        }
    }
}
