use serde::{Deserialize, Serialize};

use super::{Param, Real};

/// Adam with bias correction. Moments live on each [`Param`]; the step
/// counter lives here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0 }
    }

    /// Advances the shared step counter. Call once per optimizer step,
    /// before updating the parameters.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update<F: Real>(&self, p: &mut Param<F>) {
        self.update_range(p, 0, p.len());
    }

    /// Updates only the rows of a row-major matrix parameter whose index is
    /// selected by `rows`; all other entries and their moments are untouched.
    pub fn update_rows<F: Real>(&self, p: &mut Param<F>, row_len: usize, rows: &[usize]) {
        for &r in rows {
            self.update_range(p, r * row_len, (r + 1) * row_len);
        }
    }

    fn update_range<F: Real>(&self, p: &mut Param<F>, start: usize, end: usize) {
        let t = self.t.max(1) as i32;
        let b1 = F::lit(self.beta1);
        let b2 = F::lit(self.beta2);
        let one = F::one();
        let c1 = F::lit(1.0 - self.beta1.powi(t));
        let c2 = F::lit(1.0 - self.beta2.powi(t));
        let lr = F::lit(self.lr);
        let eps = F::lit(self.eps);
        for i in start..end {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + (one - b1) * g;
            p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
            let mh = p.m[i] / c1;
            let vh = p.v[i] / c2;
            p.value[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}
