use super::{FeatureMap, Real};

pub fn relu_inplace<F: Real>(x: &mut FeatureMap<F>) {
    x.data.iter_mut().for_each(|v| {
        if *v < F::zero() {
            *v = F::zero()
        }
    });
}

/// Masks `dy` in place with the post-activation output of a ReLU.
pub fn relu_backward<F: Real>(dy: &mut FeatureMap<F>, out: &FeatureMap<F>) {
    dy.data.iter_mut().zip(&out.data).for_each(|(g, o)| {
        if *o <= F::zero() {
            *g = F::zero()
        }
    });
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

/// 2×2 max pooling with stride 2. Odd trailing rows/columns are dropped.
pub fn maxpool2<F: Real>(x: &FeatureMap<F>) -> (FeatureMap<F>, MaxPoolCache) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = FeatureMap::zeros(x.c, x.b, oh, ow);
    let mut argmax = vec![0; out.data.len()];
    for cb in 0..x.c * x.b {
        let base = cb * x.h * x.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * x.w + 2 * ox + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (cb * oh + oy) * ow + ox;
                out.data[o] = x.data[best];
                argmax[o] = best;
            }
        }
    }
    (out, MaxPoolCache { argmax, in_shape: (x.c, x.b, x.h, x.w) })
}

pub fn maxpool2_backward<F: Real>(cache: &MaxPoolCache, dy: &FeatureMap<F>) -> FeatureMap<F> {
    let (c, b, h, w) = cache.in_shape;
    let mut dx = FeatureMap::zeros(c, b, h, w);
    for (g, &i) in dy.data.iter().zip(&cache.argmax) {
        dx.data[i] += *g;
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample_nearest2<F: Real>(x: &FeatureMap<F>) -> FeatureMap<F> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = FeatureMap::zeros(x.c, x.b, oh, ow);
    for cb in 0..x.c * x.b {
        for oy in 0..oh {
            for ox in 0..ow {
                out.data[(cb * oh + oy) * ow + ox] = x.data[(cb * x.h + oy / 2) * x.w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<F: Real>(dy: &FeatureMap<F>) -> FeatureMap<F> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = FeatureMap::zeros(dy.c, dy.b, h, w);
    for cb in 0..dy.c * dy.b {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                dx.data[(cb * h + oy / 2) * w + ox / 2] += dy.data[(cb * dy.h + oy) * dy.w + ox];
            }
        }
    }
    dx
}

/// Bilinear resize of one `h×w` plane to `oh×ow` using half-pixel centres
/// (source coordinate `(dst + 0.5)·scale − 0.5`, clamped to the border).
/// Every output is a convex combination of inputs.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(oh, h);
    let xs = coords(ow, w);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}
