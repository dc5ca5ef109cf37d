//! Margin-loss objective, class-balanced batches and in-batch pair mining.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{raw_sub_embedding, SubspaceLayout, NORM_EPS};
use crate::nn::Real;

/// `alpha` is the separation margin, `beta` the similar/dissimilar boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginLossParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MarginLossParams {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 1.2 }
    }
}

impl MarginLossParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "margin loss needs alpha >= 0 and beta > 0 (got {}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Similar (`+1`) or dissimilar (`-1`) pair indicator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Similarity {
    Positive,
    Negative,
}

impl Similarity {
    pub fn sign(self) -> f64 {
        match self {
            Similarity::Positive => 1.0,
            Similarity::Negative => -1.0,
        }
    }

    pub fn of(a: usize, b: usize) -> Self {
        if a == b {
            Similarity::Positive
        } else {
            Similarity::Negative
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub anchor: usize,
    pub partner: usize,
    pub mu: Similarity,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, mu: Similarity) -> usize {
        self.pairs.iter().filter(|p| p.mu == mu).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairPolicy {
    /// Every unordered pair once.
    All,
    /// Every positive pair once plus one random negative partner per anchor.
    #[default]
    AnchorRandomNegative,
}

impl std::str::FromStr for PairPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "anchor-random-negative" => Ok(Self::AnchorRandomNegative),
            other => Err(Error::Config(format!("unknown pair policy {other:?}"))),
        }
    }
}

/// Euclidean distance `‖a − b‖₂`.
pub fn pairwise_distance<F: Real>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(squared_distance(a, b).sqrt())
}

#[inline]
pub(crate) fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

/// `[alpha + mu·(dist − beta)]₊`
pub fn margin_loss_pair(dist: f64, mu: Similarity, params: &MarginLossParams) -> f64 {
    (params.alpha + mu.sign() * (dist - params.beta)).max(0.0)
}

/// Draws a class-balanced batch from `group` (indices into `labels`).
///
/// `batch_size / per_class` class slots are filled with `per_class` samples
/// each; classes smaller than `per_class` are sampled with replacement. When
/// the group has fewer classes than slots, extra slots reuse classes drawn
/// uniformly. A single-class group yields `batch_size` samples of that class
/// (positives only) and logs a warning. Returns indices into `labels`.
pub fn build_batch<R: Rng>(
    labels: &[usize],
    group: &[usize],
    batch_size: usize,
    per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if group.is_empty() {
        return Err(Error::InvalidInput("cannot build a batch from an empty group".into()));
    }
    if batch_size == 0 || per_class == 0 {
        return Err(Error::Config("batch_size and per_class must be positive".into()));
    }
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in group {
        classes.entry(labels[i]).or_default().push(i);
    }
    let members: Vec<&Vec<usize>> = classes.values().collect();
    let draw = |pool: &[usize], n: usize, rng: &mut R| -> Vec<usize> {
        if pool.len() >= n {
            sample_indices(rng, pool.len(), n).into_iter().map(|j| pool[j]).collect()
        } else {
            (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        }
    };
    if members.len() == 1 {
        log::warn!("batch group has a single class; only positive pairs are available");
        return Ok(draw(members[0], batch_size, rng));
    }
    let slots = (batch_size / per_class).max(1);
    let mut chosen: Vec<usize> = if members.len() >= slots {
        sample_indices(rng, members.len(), slots).into_vec()
    } else {
        let mut c: Vec<usize> = (0..members.len()).collect();
        c.extend((members.len()..slots).map(|_| rng.gen_range(0..members.len())));
        c
    };
    chosen.sort_unstable();
    let mut batch = Vec::with_capacity(batch_size);
    for &c in &chosen {
        let take = per_class.min(batch_size - batch.len());
        batch.extend(draw(members[c], take, rng));
    }
    while batch.len() < batch_size {
        let c = chosen[rng.gen_range(0..chosen.len())];
        batch.extend(draw(members[c], 1, rng));
    }
    Ok(batch)
}

/// Builds the in-batch pair set for `labels` under `policy`.
pub fn mine_pairs<R: Rng>(labels: &[usize], policy: PairPolicy, rng: &mut R) -> PairSet {
    let n = labels.len();
    let mut pairs = Vec::new();
    match policy {
        PairPolicy::All => {
            for i in 0..n {
                for j in i + 1..n {
                    pairs.push(Pair { anchor: i, partner: j, mu: Similarity::of(labels[i], labels[j]) });
                }
            }
        }
        PairPolicy::AnchorRandomNegative => {
            for i in 0..n {
                for j in i + 1..n {
                    if labels[i] == labels[j] {
                        pairs.push(Pair { anchor: i, partner: j, mu: Similarity::Positive });
                    }
                }
            }
            for i in 0..n {
                let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
                if !negatives.is_empty() {
                    let j = negatives[rng.gen_range(0..negatives.len())];
                    pairs.push(Pair { anchor: i, partner: j, mu: Similarity::Negative });
                }
            }
        }
    }
    PairSet { pairs }
}

/// Summed margin loss of one learner over a batch, with its gradient.
#[derive(Clone, Debug)]
pub struct LearnerLoss<F> {
    /// Sum of pair losses.
    pub sum: F,
    /// Number of mined pairs.
    pub pairs: usize,
    /// Pairs with strictly positive loss.
    pub active: usize,
    /// `∂sum/∂(raw embedding)`, row-major `B×d`.
    pub grad: Vec<F>,
}

impl<F: Real> LearnerLoss<F> {
    /// Mean over active pairs (0 when none are active).
    pub fn mean(&self) -> F {
        if self.active == 0 {
            F::zero()
        } else {
            self.sum / F::lit(self.active as f64)
        }
    }

    /// Gradient of [`mean`](Self::mean).
    pub fn mean_grad(&self) -> Vec<F> {
        if self.active == 0 {
            return vec![F::zero(); self.grad.len()];
        }
        let s = F::one() / F::lit(self.active as f64);
        self.grad.iter().map(|g| *g * s).collect()
    }
}

/// Margin loss of learner `k` over a batch of raw embeddings (`B×d`),
/// measuring distances between L2-normalized sub-embeddings.
pub fn learner_loss_batch<F: Real>(
    embeddings: &[F],
    d: usize,
    layout: &SubspaceLayout,
    k: usize,
    params: &MarginLossParams,
    pairs: &PairSet,
) -> Result<LearnerLoss<F>> {
    if d != layout.dim() || !embeddings.len().is_multiple_of(d) {
        return Err(Error::Dimension(format!("{} values do not form rows of {d}", embeddings.len())));
    }
    let b = embeddings.len() / d;
    let coords = layout.slice(k)?;
    let eps = F::lit(NORM_EPS);
    let mut raw = Vec::with_capacity(b);
    let mut norms = Vec::with_capacity(b);
    let mut unit = Vec::with_capacity(b);
    for row in embeddings.chunks(d) {
        let x = raw_sub_embedding(row, layout, k)?;
        let n = x.iter().map(|v| *v * *v).sum::<F>().sqrt();
        let z: Vec<F> = x.iter().map(|v| *v / (n + eps)).collect();
        raw.push(x);
        norms.push(n);
        unit.push(z);
    }
    let alpha = F::lit(params.alpha);
    let beta = F::lit(params.beta);
    let width = coords.len();
    let mut dz = vec![vec![F::zero(); width]; b];
    let mut sum = F::zero();
    let mut active = 0;
    for p in &pairs.pairs {
        if p.anchor >= b || p.partner >= b || p.anchor == p.partner {
            return Err(Error::Index(format!("pair ({}, {}) invalid for batch of {b}", p.anchor, p.partner)));
        }
        let (zi, zj) = (&unit[p.anchor], &unit[p.partner]);
        let dist = squared_distance(zi, zj).sqrt();
        let mu = F::lit(p.mu.sign());
        let l = alpha + mu * (dist - beta);
        if l > F::zero() {
            sum += l;
            active += 1;
            if dist > F::zero() {
                for t in 0..width {
                    let g = mu * (zi[t] - zj[t]) / dist;
                    dz[p.anchor][t] += g;
                    dz[p.partner][t] -= g;
                }
            }
        }
    }
    let mut grad = vec![F::zero(); b * d];
    for i in 0..b {
        let n = norms[i];
        let ne = n + eps;
        let xg: F = raw[i].iter().zip(&dz[i]).map(|(x, g)| *x * *g).sum();
        for (t, &c) in coords.iter().enumerate() {
            let mut g = dz[i][t] / ne;
            if n > F::zero() {
                g -= raw[i][t] * xg / (n * ne * ne);
            }
            grad[i * d + c] = g;
        }
    }
    Ok(LearnerLoss { sum, pairs: pairs.len(), active, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::sub_embedding;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distance_examples() {
        assert_eq!(pairwise_distance(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((pairwise_distance(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(pairwise_distance(&[1.0f64, 2.0, 2.0], &[0.0, 0.0, 0.0]).unwrap(), 3.0);
        assert!(pairwise_distance(&[1.0f64], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn margin_loss_examples() {
        let p = MarginLossParams::default();
        assert!((margin_loss_pair(1.2, Similarity::Positive, &p) - 0.2).abs() < 1e-12);
        assert_eq!(margin_loss_pair(0.9, Similarity::Positive, &p), 0.0);
        assert!((margin_loss_pair(1.1, Similarity::Negative, &p) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(MarginLossParams::new(-0.1, 1.2).is_err());
        assert!(MarginLossParams::new(0.2, 0.0).is_err());
    }

    #[test]
    fn batch_of_32_with_8_per_class_has_four_classes() {
        let labels: Vec<usize> = (0..200).map(|i| i % 10).collect();
        let group: Vec<usize> = (0..200).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = build_batch(&labels, &group, 32, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        let mut counts = BTreeMap::new();
        for &i in &batch {
            *counts.entry(labels[i]).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 8));
    }

    #[test]
    fn small_class_sampled_with_replacement() {
        // class 0 has 3 members, class 1 has 20; two slots of 8.
        let labels: Vec<usize> = (0..23).map(|i| usize::from(i >= 3)).collect();
        let group: Vec<usize> = (0..23).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = build_batch(&labels, &group, 16, 8, &mut rng).unwrap();
        let a: Vec<usize> = batch.iter().copied().filter(|&i| labels[i] == 0).collect();
        assert_eq!(a.len(), 8);
        let mut uniq = a.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert!(uniq.len() <= 3);
    }

    #[test]
    fn batches_replay_under_fixed_seed() {
        let labels: Vec<usize> = (0..100).map(|i| i % 7).collect();
        let group: Vec<usize> = (0..100).step_by(2).collect();
        let a = build_batch(&labels, &group, 32, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_batch(&labels, &group, 32, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|i| group.contains(i)));
    }

    #[test]
    fn single_class_group_falls_back() {
        let labels = vec![3; 5];
        let group: Vec<usize> = (0..5).collect();
        let batch = build_batch(&labels, &group, 12, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.len(), 12);
    }

    #[test]
    fn all_pairs_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps = mine_pairs(&[0, 0, 1, 1], PairPolicy::All, &mut rng);
        assert_eq!(ps.len(), 6);
        assert_eq!(ps.count(Similarity::Positive), 2);
        assert_eq!(ps.count(Similarity::Negative), 4);
        let ps = mine_pairs(&[5, 5, 5], PairPolicy::All, &mut rng);
        assert!(ps.pairs.iter().all(|p| p.mu == Similarity::Positive));
    }

    #[test]
    fn anchor_policy_on_two_distinct_labels() {
        let ps = mine_pairs(&[0, 1], PairPolicy::AnchorRandomNegative, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(ps.count(Similarity::Negative), 2);
        assert_eq!(ps.count(Similarity::Positive), 0);
    }

    #[test]
    fn positives_at_distance_beta_each_cost_alpha() {
        // Unit vectors 1.2 apart.
        let emb = [0.8f64, 0.6, 0.8, -0.6];
        let layout = SubspaceLayout::single(2);
        let ps = mine_pairs(&[0, 0], PairPolicy::All, &mut ChaCha8Rng::seed_from_u64(0));
        let l = learner_loss_batch(&emb, 2, &layout, 0, &MarginLossParams::default(), &ps).unwrap();
        assert!((l.sum - 0.2).abs() < 1e-9);
    }

    #[test]
    fn identical_embeddings_distinct_labels_cost_one_point_four() {
        let emb = [1.0f64, 2.0, 1.0, 2.0, 1.0, 2.0];
        let ps = mine_pairs(&[0, 1, 2], PairPolicy::All, &mut ChaCha8Rng::seed_from_u64(0));
        let l = learner_loss_batch(&emb, 2, &SubspaceLayout::single(2), 0, &MarginLossParams::default(), &ps).unwrap();
        assert!((l.sum - 3.0 * 1.4).abs() < 1e-12);
        assert_eq!(l.active, 3);
    }

    #[test]
    fn empty_pair_set_is_zero() {
        let l = learner_loss_batch(&[1.0f64, 2.0], 2, &SubspaceLayout::single(2), 0, &MarginLossParams::default(), &PairSet::default())
            .unwrap();
        assert_eq!((l.sum, l.pairs, l.mean()), (0.0, 0, 0.0));
    }

    /// Independent brute force: normalize, measure, apply the hinge termwise.
    fn brute_force(emb: &[f64], d: usize, layout: &SubspaceLayout, k: usize, ps: &PairSet) -> f64 {
        let p = MarginLossParams::default();
        let rows: Vec<Vec<f64>> = emb.chunks(d).map(|r| sub_embedding(r, layout, k).unwrap()).collect();
        ps.pairs
            .iter()
            .map(|q| {
                let dist = rows[q.anchor].iter().zip(&rows[q.partner]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                margin_loss_pair(dist, q.mu, &p)
            })
            .sum()
    }

    #[test]
    fn random_batch_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layout = SubspaceLayout::from_parts(6, vec![vec![1, 4]], vec![0, 2, 3, 5]).unwrap();
        for _ in 0..20 {
            let emb: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..3)).collect();
            let ps = mine_pairs(&labels, PairPolicy::AnchorRandomNegative, &mut rng);
            for k in 0..2 {
                let l = learner_loss_batch(&emb, 6, &layout, k, &MarginLossParams::default(), &ps).unwrap();
                assert!((l.sum - brute_force(&emb, 6, &layout, k, &ps)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_touches_only_the_learner_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = SubspaceLayout::from_parts(5, vec![vec![0, 3]], vec![1, 2, 4]).unwrap();
        let emb: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ps = mine_pairs(&[0, 0, 1, 1, 2, 2], PairPolicy::All, &mut rng);
        let l = learner_loss_batch(&emb, 5, &layout, 0, &MarginLossParams::default(), &ps).unwrap();
        for (i, g) in l.grad.iter().enumerate() {
            if ![0, 3].contains(&(i % 5)) {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layout = SubspaceLayout::from_parts(4, vec![vec![2]], vec![0, 1, 3]).unwrap();
        let emb: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0, 0, 1, 1, 2, 2];
        let ps = mine_pairs(&labels, PairPolicy::All, &mut rng);
        let p = MarginLossParams::default();
        let l = learner_loss_batch(&emb, 4, &layout, 1, &p, &ps).unwrap();
        let h = 1e-6;
        for i in 0..emb.len() {
            let mut e = emb.clone();
            e[i] += h;
            let up = learner_loss_batch(&e, 4, &layout, 1, &p, &ps).unwrap().sum;
            e[i] -= 2.0 * h;
            let dn = learner_loss_batch(&e, 4, &layout, 1, &p, &ps).unwrap().sum;
            assert!(((up - dn) / (2.0 * h) - l.grad[i]).abs() < 1e-6, "coord {i}");
        }
    }

    proptest! {
        #[test]
        fn margin_loss_is_symmetric(a in proptest::collection::vec(-3.0f64..3.0, 4), b in proptest::collection::vec(-3.0f64..3.0, 4), neg in any::<bool>()) {
            let mu = if neg { Similarity::Negative } else { Similarity::Positive };
            let p = MarginLossParams::default();
            let dab = pairwise_distance(&a, &b).unwrap();
            let dba = pairwise_distance(&b, &a).unwrap();
            prop_assert_eq!(margin_loss_pair(dab, mu, &p), margin_loss_pair(dba, mu, &p));
        }

        #[test]
        fn loss_is_scale_invariant(emb in proptest::collection::vec(0.1f64..2.0, 18), scale in 0.01f64..100.0) {
            let layout = SubspaceLayout::from_parts(3, vec![vec![0]], vec![1, 2]).unwrap();
            let ps = mine_pairs(&[0, 1, 0, 1, 2, 2], PairPolicy::All, &mut ChaCha8Rng::seed_from_u64(0));
            let scaled: Vec<f64> = emb.iter().map(|x| x * scale).collect();
            for k in 0..2 {
                let a = learner_loss_batch(&emb, 3, &layout, k, &MarginLossParams::default(), &ps).unwrap().sum;
                let b = learner_loss_batch(&scaled, 3, &layout, k, &MarginLossParams::default(), &ps).unwrap().sum;
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn inactive_hinges_contribute_nothing(dist in 0.0f64..3.0) {
            let p = MarginLossParams::default();
            if dist <= p.beta - p.alpha {
                prop_assert_eq!(margin_loss_pair(dist, Similarity::Positive, &p), 0.0);
            }
            if dist >= p.beta + p.alpha {
                prop_assert_eq!(margin_loss_pair(dist, Similarity::Negative, &p), 0.0);
            }
        }
    }
}
