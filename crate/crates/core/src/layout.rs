//! Partition of the embedding coordinates into learner subspaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Frozen learner slices plus the trainable remainder.
///
/// Learners are indexed `0..K`. Learner `k < K-1` owns `frozen[k]`; the
/// newest learner `K-1` owns the remainder. Coordinates inside a slice are
/// kept in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubspaceLayout {
    d: usize,
    frozen: Vec<Vec<usize>>,
    remainder: Vec<usize>,
}

impl SubspaceLayout {
    /// One learner owning the whole embedding.
    pub fn single(d: usize) -> Self {
        Self { d, frozen: Vec::new(), remainder: (0..d).collect() }
    }

    /// `k` contiguous, (nearly) equal slices. When `d` is not divisible by
    /// `k` the first `d mod k` slices get one extra coordinate.
    pub fn equal_split(d: usize, k: usize) -> Result<Self> {
        if k == 0 || k > d {
            return Err(Error::Config(format!("cannot split {d} dimensions into {k} learners")));
        }
        let mut slices = Vec::with_capacity(k);
        let mut start = 0;
        for i in 0..k {
            let len = d / k + usize::from(i < d % k);
            slices.push((start..start + len).collect::<Vec<_>>());
            start += len;
        }
        let remainder = slices.pop().expect("k >= 1");
        Ok(Self { d, frozen: slices, remainder })
    }

    /// Builds a layout from explicit index lists and checks the partition.
    pub fn from_parts(d: usize, frozen: Vec<Vec<usize>>, remainder: Vec<usize>) -> Result<Self> {
        let layout = Self { d, frozen, remainder };
        layout.validate()?;
        Ok(layout)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Current learner count `K`.
    pub fn k(&self) -> usize {
        self.frozen.len() + 1
    }

    pub fn frozen(&self) -> &[Vec<usize>] {
        &self.frozen
    }

    pub fn remainder(&self) -> &[usize] {
        &self.remainder
    }

    /// Coordinates owned by learner `k` (`k == K-1` is the remainder).
    pub fn slice(&self, k: usize) -> Result<&[usize]> {
        if k < self.frozen.len() {
            Ok(&self.frozen[k])
        } else if k == self.frozen.len() {
            Ok(&self.remainder)
        } else {
            Err(Error::Index(format!("learner {k} out of range for K={}", self.k())))
        }
    }

    /// Sizes of `e_1..e_{K-1}` followed by the remainder size.
    pub fn slice_sizes(&self) -> Vec<usize> {
        self.frozen.iter().map(Vec::len).chain(std::iter::once(self.remainder.len())).collect()
    }

    /// All coordinates in learner order; a permutation of `0..d`.
    pub fn concat_order(&self) -> Vec<usize> {
        self.frozen.iter().flatten().chain(&self.remainder).copied().collect()
    }

    /// Checks that slices and remainder are disjoint, non-empty and cover `0..d`.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.d];
        for (i, s) in self.frozen.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidInput(format!("frozen slice {i} is empty")));
            }
        }
        for &c in self.frozen.iter().flatten().chain(&self.remainder) {
            if c >= self.d {
                return Err(Error::InvalidInput(format!("coordinate {c} outside 0..{}", self.d)));
            }
            if seen[c] {
                return Err(Error::InvalidInput(format!("coordinate {c} assigned twice")));
            }
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidInput(format!("coordinate {missing} not assigned")));
        }
        Ok(())
    }

    /// Moves `coords` from the remainder into a new frozen slice.
    pub fn commit(&self, coords: &[usize]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidInput("new slice is empty".into()));
        }
        if coords.len() >= self.remainder.len() {
            return Err(Error::InvalidInput("split would empty the remainder".into()));
        }
        let mut slice = coords.to_vec();
        slice.sort_unstable();
        slice.dedup();
        if slice.len() != coords.len() {
            return Err(Error::InvalidInput("duplicate coordinates in new slice".into()));
        }
        if let Some(c) = slice.iter().find(|c| self.remainder.binary_search(c).is_err()) {
            return Err(Error::InvalidInput(format!("coordinate {c} is not in the remainder")));
        }
        let remainder = self.remainder.iter().copied().filter(|c| slice.binary_search(c).is_err()).collect();
        let mut frozen = self.frozen.clone();
        frozen.push(slice);
        let out = Self { d: self.d, frozen, remainder };
        out.validate()?;
        Ok(out)
    }
}

/// Coordinates of `embedding` owned by learner `k`, without normalization.
pub fn raw_sub_embedding<F: Real>(embedding: &[F], layout: &SubspaceLayout, k: usize) -> Result<Vec<F>> {
    if embedding.len() != layout.dim() {
        return Err(Error::Dimension(format!(
            "embedding has {} dims, layout has {}",
            embedding.len(),
            layout.dim()
        )));
    }
    Ok(layout.slice(k)?.iter().map(|&i| embedding[i]).collect())
}

/// Learner `k`'s sub-vector, L2-normalized as `x / (‖x‖ + 1e-12)`.
pub fn sub_embedding<F: Real>(embedding: &[F], layout: &SubspaceLayout, k: usize) -> Result<Vec<F>> {
    let mut v = raw_sub_embedding(embedding, layout, k)?;
    l2_normalize(&mut v);
    Ok(v)
}

pub const NORM_EPS: f64 = 1e-12;

pub fn l2_normalize<F: Real>(v: &mut [F]) {
    let n = v.iter().map(|x| *x * *x).sum::<F>().sqrt() + F::lit(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= n);
}
