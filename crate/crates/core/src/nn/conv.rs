use rand::Rng;

use super::{gemm, he_uniform, FeatureMap, Param, Real};

/// Square-kernel 2-D convolution with bias, evaluated as im2col + GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    col: Vec<F>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = Param::new(vec![cout, fan_in], he_uniform(fan_in, cout * fan_in, rng));
        let bias = Param::zeros(vec![cout]);
        Self { weight, bias, cin, cout, kernel, stride, pad }
    }

    /// "Same" convolution: 3×3 stride 1 pad 1 style.
    pub fn same<R: Rng>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        Self::new(cin, cout, kernel, 1, kernel / 2, rng)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &FeatureMap<F>, oh: usize, ow: usize) -> Vec<F> {
        let k = self.kernel;
        let ncol = x.b * oh * ow;
        let mut col = vec![F::zero(); self.cin * k * k * ncol];
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut col[row * ncol..(row + 1) * ncol];
                    for b in 0..x.b {
                        let src = &x.data[(ci * x.b + b) * x.h * x.w..(ci * x.b + b + 1) * x.h * x.w];
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let dst = &mut dst_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, dcol: &[F], shape: (usize, usize, usize, usize), oh: usize, ow: usize) -> FeatureMap<F> {
        let (c, b_n, h, w) = shape;
        let k = self.kernel;
        let ncol = b_n * oh * ow;
        let mut dx = FeatureMap::zeros(c, b_n, h, w);
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &dcol[row * ncol..(row + 1) * ncol];
                    for b in 0..b_n {
                        let base = (ci * b_n + b) * h * w;
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &src_row[(b * oh + oy) * ow..(b * oh + oy + 1) * ow];
                            let dst = &mut dx.data[base + iy as usize * w..base + (iy as usize + 1) * w];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += *v;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, ConvCache<F>) {
        assert_eq!(x.c, self.cin, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let col = self.im2col(x, oh, ow);
        let out = self.apply(&col, x.b, oh, ow);
        (out, ConvCache { col, in_shape: (x.c, x.b, x.h, x.w), out_hw: (oh, ow) })
    }

    /// Forward pass without keeping the backward cache.
    pub fn infer(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        assert_eq!(x.c, self.cin, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let col = self.im2col(x, oh, ow);
        self.apply(&col, x.b, oh, ow)
    }

    fn apply(&self, col: &[F], b: usize, oh: usize, ow: usize) -> FeatureMap<F> {
        let ncol = b * oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut out = FeatureMap::zeros(self.cout, b, oh, ow);
        gemm(false, false, self.cout, ncol, kk, F::one(), &self.weight.value, col, F::zero(), &mut out.data);
        for (co, chunk) in out.data.chunks_mut(ncol).enumerate() {
            let bias = self.bias.value[co];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: ConvCache<F>, dy: &FeatureMap<F>, need_dx: bool) -> Option<FeatureMap<F>> {
        let (oh, ow) = cache.out_hw;
        let ncol = cache.in_shape.1 * oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        assert_eq!(dy.data.len(), self.cout * ncol, "conv output gradient shape");
        gemm(false, true, self.cout, kk, ncol, F::one(), &dy.data, &cache.col, F::one(), &mut self.weight.grad);
        for (co, chunk) in dy.data.chunks(ncol).enumerate() {
            let s: F = chunk.iter().copied().sum();
            self.bias.grad[co] += s;
        }
        if !need_dx {
            return None;
        }
        let mut dcol = cache.col;
        gemm(true, false, kk, ncol, self.cout, F::one(), &self.weight.value, &dy.data, F::zero(), &mut dcol);
        Some(self.col2im(&dcol, cache.in_shape, oh, ow))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let (oh, ow) = conv.out_hw(x.h, x.w);
        let mut out = FeatureMap::zeros(conv.cout, x.b, oh, ow);
        let k = conv.kernel;
        for co in 0..conv.cout {
            for b in 0..x.b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[co];
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[co * conv.cin * k * k + (ci * k + ky) * k + kx];
                                    acc += wv * x.get(ci, b, iy as usize, ix as usize);
                                }
                            }
                        }
                        let i = out.idx(co, b, oy, ox);
                        out.data[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut conv = Conv2d::<f64>::new(2, 3, 3, stride, pad, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let x = FeatureMap::from_vec(2, 2, 5, 6, (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (y, _) = conv.forward(&x);
            let y2 = naive_conv(&conv, &x);
            assert_eq!((y.h, y.w), (y2.h, y2.w));
            for (a, b) in y.data.iter().zip(&y2.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 2, 1, &mut rng);
        let x = FeatureMap::from_vec(2, 2, 5, 5, (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (y, cache) = conv.forward(&x);
        let r: Vec<f64> = (0..y.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss = <r, y>
        let dy = FeatureMap::from_vec(y.c, y.b, y.h, y.w, r.clone());
        let dx = conv.backward(cache, &dy, true).unwrap();
        let loss = |c: &Conv2d<f64>, x: &FeatureMap<f64>| -> f64 {
            c.infer(x).data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in [0, 7, 17, 35] {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let up = loss(&cp, &x);
            cp.weight.value[i] -= 2.0 * h;
            let dn = loss(&cp, &x);
            assert!(((up - dn) / (2.0 * h) - conv.weight.grad[i]).abs() < 1e-7);
        }
        for i in [0, 13, 49, 99] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let up = loss(&conv, &xp);
            xp.data[i] -= 2.0 * h;
            let dn = loss(&conv, &xp);
            assert!(((up - dn) / (2.0 * h) - dx.data[i]).abs() < 1e-7);
        }
    }
}
