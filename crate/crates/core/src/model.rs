//! Embedding network: feature extractor → attention module → attentive
//! global average pooling → affine embedding head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::layout::SubspaceLayout;
use crate::nn::{
    fan_in_uniform, gemm, relu_backward, relu_inplace, sigmoid, Conv2d, ConvCache, FeatureMap, Param,
    Parameterized, Real,
};

/// A convolutional feature extractor `S(·)`: image batch → `c×m×n` maps.
pub trait FeatureExtractor<F: Real>: Parameterized<F> + Clone + Send + Sync {
    type Cache;

    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn output_hw(&self, h: usize, w: usize) -> (usize, usize);
    fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, Self::Cache);
    fn infer(&self, x: &FeatureMap<F>) -> FeatureMap<F>;
    /// Accumulates parameter gradients given `dL/d(features)`.
    fn backward(&mut self, cache: Self::Cache, dy: &FeatureMap<F>);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallCnnConfig {
    pub in_channels: usize,
    /// Output width of each stride-2 3×3 conv block.
    pub widths: Vec<usize>,
}

impl Default for SmallCnnConfig {
    fn default() -> Self {
        Self { in_channels: 3, widths: vec![16, 32, 64, 128] }
    }
}

/// Default backbone: a stack of `conv3×3(stride 2) → ReLU` blocks.
#[derive(Clone, Debug)]
pub struct SmallCnn<F> {
    pub convs: Vec<Conv2d<F>>,
}

pub struct SmallCnnCache<F> {
    convs: Vec<ConvCache<F>>,
    outs: Vec<FeatureMap<F>>,
}

impl<F: Real> SmallCnn<F> {
    pub fn new(cfg: &SmallCnnConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut cin = cfg.in_channels;
        let convs = cfg
            .widths
            .iter()
            .map(|&w| {
                let c = Conv2d::new(cin, w, 3, 2, 1, rng);
                cin = w;
                c
            })
            .collect();
        Self { convs }
    }
}

impl<F: Real> Parameterized<F> for SmallCnn<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(&format!("backbone.conv{i}.weight"), &c.weight);
            f(&format!("backbone.conv{i}.bias"), &c.bias);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(&format!("backbone.conv{i}.weight"), &mut c.weight);
            f(&format!("backbone.conv{i}.bias"), &mut c.bias);
        }
    }
}

impl<F: Real> FeatureExtractor<F> for SmallCnn<F> {
    type Cache = SmallCnnCache<F>;

    fn in_channels(&self) -> usize {
        self.convs.first().map_or(0, |c| c.cin)
    }

    fn out_channels(&self) -> usize {
        self.convs.last().map_or(0, |c| c.cout)
    }

    fn output_hw(&self, mut h: usize, mut w: usize) -> (usize, usize) {
        for c in &self.convs {
            (h, w) = c.out_hw(h, w);
        }
        (h, w)
    }

    fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, Self::Cache) {
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut outs = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for c in &self.convs {
            let (mut y, cache) = c.forward(&cur);
            relu_inplace(&mut y);
            caches.push(cache);
            outs.push(y.clone());
            cur = y;
        }
        (cur, SmallCnnCache { convs: caches, outs })
    }

    fn infer(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        let mut cur = x.clone();
        for c in &self.convs {
            cur = c.infer(&cur);
            relu_inplace(&mut cur);
        }
        cur
    }

    fn backward(&mut self, cache: Self::Cache, dy: &FeatureMap<F>) {
        let mut grad = dy.clone();
        let n = self.convs.len();
        for (i, (cc, out)) in cache.convs.into_iter().zip(cache.outs.iter()).enumerate().rev() {
            relu_backward(&mut grad, out);
            match self.convs[i].backward(cc, &grad, i > 0) {
                Some(g) => grad = g,
                None => debug_assert_eq!(i, 0, "only the first of {n} layers skips dx"),
            }
        }
    }
}

/// Hidden widths of the attention module: three 3×3 convolutions
/// `c_in → 128 → 32 → 1`, ReLU between, sigmoid at the end.
pub const ATTENTION_WIDTHS: [usize; 2] = [128, 32];

#[derive(Clone, Debug)]
pub struct AttentionModule<F> {
    pub convs: Vec<Conv2d<F>>,
}

pub struct AttentionCache<F> {
    convs: Vec<ConvCache<F>>,
    hidden: Vec<FeatureMap<F>>,
}

/// Builds the attention module `A(·)` for `c_in` input channels.
pub fn build_attention_module<F: Real>(c_in: usize, rng: &mut ChaCha8Rng) -> AttentionModule<F> {
    let chans = [c_in, ATTENTION_WIDTHS[0], ATTENTION_WIDTHS[1], 1];
    let convs = chans.windows(2).map(|w| Conv2d::same(w[0], w[1], 3, rng)).collect();
    AttentionModule { convs }
}

impl<F: Real> AttentionModule<F> {
    /// `(in, out)` channels per layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        self.convs.iter().map(|c| (c.cin, c.cout)).collect()
    }

    /// Returns the sigmoid attention (one channel, `B×m×n`) and the cache.
    pub fn forward(&self, features: &FeatureMap<F>) -> (FeatureMap<F>, AttentionCache<F>) {
        let mut caches = Vec::with_capacity(3);
        let mut hidden = Vec::with_capacity(2);
        let mut cur = features.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            let (mut y, cache) = c.forward(&cur);
            caches.push(cache);
            if i < last {
                relu_inplace(&mut y);
                hidden.push(y.clone());
            } else {
                y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            cur = y;
        }
        (cur, AttentionCache { convs: caches, hidden })
    }

    pub fn infer(&self, features: &FeatureMap<F>) -> FeatureMap<F> {
        let mut cur = features.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            cur = c.infer(&cur);
            if i < last {
                relu_inplace(&mut cur);
            }
        }
        cur.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        cur
    }

    /// `d_att` is the gradient w.r.t. the sigmoid output; returns
    /// the gradient w.r.t. the input features.
    pub fn backward(&mut self, cache: AttentionCache<F>, attention: &FeatureMap<F>, d_att: &FeatureMap<F>) -> FeatureMap<F> {
        let mut grad = d_att.clone();
        for (g, a) in grad.data.iter_mut().zip(&attention.data) {
            *g *= *a * (F::one() - *a);
        }
        let last = self.convs.len() - 1;
        for (i, cc) in cache.convs.into_iter().enumerate().rev() {
            if i < last {
                relu_backward(&mut grad, &cache.hidden[i]);
            }
            grad = self.convs[i].backward(cc, &grad, true).expect("dx requested");
        }
        grad
    }
}

/// Attentive global average pooling: `pooled[b,c] = mean_{y,x} a[b,y,x]·s[c,b,y,x]`.
///
/// `attention` is `B×m×n` (one channel). Output is row-major `B×c`.
pub fn attentive_pool<F: Real>(features: &FeatureMap<F>, attention: &[F]) -> Vec<F> {
    let hw = features.plane();
    assert_eq!(attention.len(), features.b * hw, "attention/feature size mismatch");
    let inv = F::one() / F::lit(hw as f64);
    let mut pooled = vec![F::zero(); features.b * features.c];
    for ch in 0..features.c {
        for b in 0..features.b {
            let s = &features.data[(ch * features.b + b) * hw..(ch * features.b + b + 1) * hw];
            let a = &attention[b * hw..(b + 1) * hw];
            let acc: F = s.iter().zip(a).map(|(x, y)| *x * *y).sum();
            pooled[b * features.c + ch] = acc * inv;
        }
    }
    pooled
}

/// Affine map from pooled `c`-vectors to `d`-dimensional embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingHead<F> {
    /// `d×c`, row `j` produces embedding coordinate `j`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> EmbeddingHead<F> {
    pub fn new(c: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Param::new(vec![d, c], fan_in_uniform(c, d * c, rng));
        let bias = Param::new(vec![d], fan_in_uniform(c, d, rng));
        Self { weight, bias }
    }

    pub fn d(&self) -> usize {
        self.bias.len()
    }

    pub fn c(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, pooled: &[F], b: usize) -> Vec<F> {
        let (d, c) = (self.d(), self.c());
        let mut out = vec![F::zero(); b * d];
        gemm(false, true, b, d, c, F::one(), pooled, &self.weight.value, F::zero(), &mut out);
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(&self.bias.value).for_each(|(o, bv)| *o += *bv);
        }
        out
    }

    /// Accumulates head gradients and returns `dL/d(pooled)`.
    pub fn backward(&mut self, pooled: &[F], d_emb: &[F], b: usize) -> Vec<F> {
        let (d, c) = (self.d(), self.c());
        gemm(true, false, d, c, b, F::one(), d_emb, pooled, F::one(), &mut self.weight.grad);
        for row in d_emb.chunks(d) {
            self.bias.grad.iter_mut().zip(row).for_each(|(g, x)| *g += *x);
        }
        let mut dp = vec![F::zero(); b * c];
        gemm(false, false, b, c, d, F::one(), d_emb, &self.weight.value, F::zero(), &mut dp);
        dp
    }
}

/// Geometry of the images a model accepts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputSpec {
    pub fn square(channels: usize, size: usize) -> Self {
        Self { channels, height: size, width: size }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input: InputSpec,
    pub backbone: SmallCnnConfig,
    pub embedding_dim: usize,
    /// When false the attention module is bypassed (attention ≡ 1).
    pub use_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input: InputSpec::square(3, 64), backbone: SmallCnnConfig::default(), embedding_dim: 32, use_attention: true }
    }
}

/// The embedding network `f_θ`.
#[derive(Clone, Debug)]
pub struct EmbeddingModel<F, B = SmallCnn<F>> {
    pub backbone: B,
    pub attention: AttentionModule<F>,
    pub head: EmbeddingHead<F>,
    pub input: InputSpec,
    pub use_attention: bool,
}

/// Outputs of a training-mode forward pass.
pub struct ForwardPass<F, C> {
    /// `c×B×m×n` backbone features.
    pub features: FeatureMap<F>,
    /// `1×B×m×n` attention values in (0,1).
    pub attention: FeatureMap<F>,
    /// `B×c` attentive pooled vectors.
    pub pooled: Vec<F>,
    /// `B×d` raw embeddings.
    pub embedding: Vec<F>,
    backbone_cache: C,
    attention_cache: Option<AttentionCache<F>>,
}

impl<F: Real, C> ForwardPass<F, C> {
    pub fn batch(&self) -> usize {
        self.features.b
    }
}

/// Inference-only outputs.
#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub attention: FeatureMap<F>,
    pub embedding: Vec<F>,
}

impl<F: Real> EmbeddingModel<F, SmallCnn<F>> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.backbone.in_channels != cfg.input.channels {
            return Err(Error::Config(format!(
                "backbone expects {} channels but input has {}",
                cfg.backbone.in_channels, cfg.input.channels
            )));
        }
        if cfg.backbone.widths.is_empty() || cfg.embedding_dim == 0 {
            return Err(Error::Config("backbone widths and embedding_dim must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = SmallCnn::new(&cfg.backbone, &mut rng);
        let (m, n) = backbone.output_hw(cfg.input.height, cfg.input.width);
        if m == 0 || n == 0 {
            return Err(Error::Config("input too small for the backbone".into()));
        }
        Self::with_backbone(backbone, cfg.input, cfg.embedding_dim, cfg.use_attention, &mut rng)
    }
}

impl<F: Real, B: FeatureExtractor<F>> EmbeddingModel<F, B> {
    pub fn with_backbone(backbone: B, input: InputSpec, d: usize, use_attention: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        if backbone.in_channels() != input.channels {
            return Err(Error::Config("backbone/input channel mismatch".into()));
        }
        let c = backbone.out_channels();
        let attention = build_attention_module(c, rng);
        let head = EmbeddingHead::new(c, d, rng);
        Ok(Self { backbone, attention, head, input, use_attention })
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.d()
    }

    /// Spatial size `(m, n)` of the attention map.
    pub fn attention_hw(&self) -> (usize, usize) {
        self.backbone.output_hw(self.input.height, self.input.width)
    }

    /// Packs records into a batch after checking their geometry.
    pub fn batch_input(&self, records: &[&SampleRecord]) -> Result<FeatureMap<F>> {
        if records.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let spec = self.input;
        let mut data = vec![F::zero(); records.len() * spec.len()];
        let hw = spec.height * spec.width;
        let b = records.len();
        for (bi, r) in records.iter().enumerate() {
            if (r.channels, r.height, r.width) != (spec.channels, spec.height, spec.width) {
                return Err(Error::Config(format!(
                    "sample {} is {}×{}×{} but the model expects {}×{}×{}",
                    r.id, r.channels, r.height, r.width, spec.channels, spec.height, spec.width
                )));
            }
            for ci in 0..spec.channels {
                let dst = (ci * b + bi) * hw;
                for (d, s) in data[dst..dst + hw].iter_mut().zip(&r.image[ci * hw..(ci + 1) * hw]) {
                    *d = F::lit(*s as f64);
                }
            }
        }
        Ok(FeatureMap::from_vec(spec.channels, b, spec.height, spec.width, data))
    }

    fn ones_attention(features: &FeatureMap<F>) -> FeatureMap<F> {
        FeatureMap::from_vec(1, features.b, features.h, features.w, vec![F::one(); features.b * features.plane()])
    }

    pub fn forward(&self, x: &FeatureMap<F>) -> ForwardPass<F, B::Cache> {
        let (features, backbone_cache) = self.backbone.forward(x);
        let (attention, attention_cache) = if self.use_attention {
            let (a, c) = self.attention.forward(&features);
            (a, Some(c))
        } else {
            (Self::ones_attention(&features), None)
        };
        let pooled = attentive_pool(&features, &attention.data);
        let embedding = self.head.forward(&pooled, x.b);
        ForwardPass { features, attention, pooled, embedding, backbone_cache, attention_cache }
    }

    pub fn infer(&self, x: &FeatureMap<F>) -> Inference<F> {
        let features = self.backbone.infer(x);
        let attention = if self.use_attention { self.attention.infer(&features) } else { Self::ones_attention(&features) };
        let pooled = attentive_pool(&features, &attention.data);
        let embedding = self.head.forward(&pooled, x.b);
        Inference { attention, embedding }
    }

    /// Backpropagates `dL/d(embedding)` (row-major `B×d`) into every
    /// parameter gradient.
    pub fn backward(&mut self, pass: ForwardPass<F, B::Cache>, d_emb: &[F]) {
        let b = pass.batch();
        assert_eq!(d_emb.len(), b * self.embedding_dim(), "embedding gradient shape");
        let dp = self.head.backward(&pass.pooled, d_emb, b);
        let feats = &pass.features;
        let hw = feats.plane();
        let inv = F::one() / F::lit(hw as f64);
        let mut d_feat = FeatureMap::zeros(feats.c, b, feats.h, feats.w);
        let mut d_att = FeatureMap::zeros(1, b, feats.h, feats.w);
        for ch in 0..feats.c {
            for bi in 0..b {
                let g = dp[bi * feats.c + ch] * inv;
                let off = (ch * b + bi) * hw;
                let a = &pass.attention.data[bi * hw..(bi + 1) * hw];
                let s = &feats.data[off..off + hw];
                for p in 0..hw {
                    d_feat.data[off + p] = g * a[p];
                    d_att.data[bi * hw + p] += g * s[p];
                }
            }
        }
        if let Some(ac) = pass.attention_cache {
            let via_attention = self.attention.backward(ac, &pass.attention, &d_att);
            d_feat.add_assign(&via_attention);
        }
        self.backbone.backward(pass.backbone_cache, &d_feat);
    }

    /// Runs the network on a batch and evaluates a scalar loss on the
    /// embedding layer, returning per-sample activations and `∂loss/∂e`
    /// (both row-major `B×d`).
    pub fn embedding_activation_grad(
        &self,
        x: &FeatureMap<F>,
        loss: impl FnOnce(&[F]) -> (F, Vec<F>),
    ) -> (Vec<F>, Vec<F>, F) {
        let out = self.infer(x);
        let (value, grad) = loss(&out.embedding);
        (out.embedding, grad, value)
    }

    /// Raw embeddings for `records`, row-major `N×d`, evaluated in chunks.
    pub fn embed_records(&self, records: &[SampleRecord], chunk: usize) -> Result<Vec<F>> {
        let mut out = Vec::with_capacity(records.len() * self.embedding_dim());
        for part in records.chunks(chunk.max(1)) {
            let refs: Vec<&SampleRecord> = part.iter().collect();
            let x = self.batch_input(&refs)?;
            out.extend(self.infer(&x).embedding);
        }
        Ok(out)
    }

    /// Attention maps (`m×n` each) for `records`.
    pub fn attention_records(&self, records: &[SampleRecord], chunk: usize) -> Result<Vec<Vec<F>>> {
        let mut out = Vec::with_capacity(records.len());
        for part in records.chunks(chunk.max(1)) {
            let refs: Vec<&SampleRecord> = part.iter().collect();
            let x = self.batch_input(&refs)?;
            let att = self.infer(&x).attention;
            let hw = att.plane();
            out.extend(att.data.chunks(hw).map(<[F]>::to_vec));
        }
        Ok(out)
    }

    /// Re-draws the head rows (weights and bias) that produce the remainder
    /// coordinates, using the same fan-in scheme as at construction, and
    /// clears their optimizer moments. All other rows are left untouched.
    pub fn reset_remainder(&mut self, layout: &SubspaceLayout, seed: u64) -> Result<()> {
        if layout.dim() != self.embedding_dim() {
            return Err(Error::Dimension("layout does not match the embedding size".into()));
        }
        if layout.remainder().is_empty() {
            return Err(Error::InvalidInput("remainder is empty".into()));
        }
        let c = self.head.c();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &row in layout.remainder() {
            let w: Vec<F> = fan_in_uniform(c, c, &mut rng);
            let b: Vec<F> = fan_in_uniform(c, 1, &mut rng);
            let r = row * c..(row + 1) * c;
            self.head.weight.value[r.clone()].copy_from_slice(&w);
            self.head.weight.m[r.clone()].iter_mut().for_each(|x| *x = F::zero());
            self.head.weight.v[r].iter_mut().for_each(|x| *x = F::zero());
            self.head.bias.value[row] = b[0];
            self.head.bias.m[row] = F::zero();
            self.head.bias.v[row] = F::zero();
        }
        Ok(())
    }
}

impl<F: Real, B: FeatureExtractor<F>> Parameterized<F> for EmbeddingModel<F, B> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.backbone.visit_params(f);
        for (i, c) in self.attention.convs.iter().enumerate() {
            f(&format!("attention.conv{i}.weight"), &c.weight);
            f(&format!("attention.conv{i}.bias"), &c.bias);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.backbone.visit_params_mut(f);
        for (i, c) in self.attention.convs.iter_mut().enumerate() {
            f(&format!("attention.conv{i}.weight"), &mut c.weight);
            f(&format!("attention.conv{i}.bias"), &mut c.bias);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg(d: usize) -> ModelConfig {
        ModelConfig {
            input: InputSpec::square(3, 16),
            backbone: SmallCnnConfig { in_channels: 3, widths: vec![4, 8] },
            embedding_dim: d,
            use_attention: true,
        }
    }

    fn random_batch<F: Real>(b: usize, spec: InputSpec, seed: u64) -> FeatureMap<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * spec.len()).map(|_| F::lit(rng.gen_range(0.0..1.0))).collect();
        FeatureMap::from_vec(spec.channels, b, spec.height, spec.width, data)
    }

    #[test]
    fn attention_module_channel_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = build_attention_module::<f32>(256, &mut rng);
        assert_eq!(a.layer_channels(), vec![(256, 128), (128, 32), (32, 1)]);
    }

    #[test]
    fn attention_module_preserves_spatial_dims_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = build_attention_module::<f32>(5, &mut rng);
        let x = FeatureMap::from_vec(5, 2, 8, 8, (0..640).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let y = a.infer(&x);
        assert_eq!((y.c, y.b, y.h, y.w), (1, 2, 8, 8));
        assert!(y.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn unit_attention_pools_to_gap() {
        let fm = FeatureMap::<f64>::from_vec(2, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0]);
        let pooled = attentive_pool(&fm, &[1.0; 4]);
        assert_eq!(pooled, vec![2.5, 2.0]);
    }

    #[test]
    fn saturated_attention_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut att = build_attention_module::<f64>(3, &mut rng);
        let fm = FeatureMap::<f64>::from_vec(3, 1, 2, 2, (0..12).map(|_| rng.gen_range(0.0..1.0)).collect());
        let gap = attentive_pool(&fm, &[1.0; 4]);
        let last = att.convs.len() - 1;
        att.convs[last].weight.value.iter_mut().for_each(|w| *w = 0.0);
        let mut prev_dist = f64::INFINITY;
        for bias in [0.0, 5.0, 10.0, 20.0, 40.0] {
            att.convs[last].bias.value[0] = bias;
            let a = att.infer(&fm);
            let p = attentive_pool(&fm, &a.data);
            let dist: f64 = p.iter().zip(&gap).map(|(x, y)| (x - y).abs()).sum();
            assert!(dist <= prev_dist);
            prev_dist = dist;
        }
        assert_eq!(prev_dist, 0.0);
        let mut prev_norm = f64::INFINITY;
        for bias in [0.0, -5.0, -10.0, -40.0, -800.0] {
            att.convs[last].bias.value[0] = bias;
            let a = att.infer(&fm);
            let norm: f64 = attentive_pool(&fm, &a.data).iter().map(|x| x.abs()).sum();
            assert!(norm <= prev_norm);
            prev_norm = norm;
        }
        assert_eq!(prev_norm, 0.0);
    }

    #[test]
    fn forward_shapes_and_attention_range() {
        let cfg = ModelConfig { embedding_dim: 128, ..ModelConfig::default() };
        let model = EmbeddingModel::<f32>::new(&cfg, 7).unwrap();
        let x = random_batch::<f32>(4, cfg.input, 3);
        let out = model.infer(&x);
        let (m, n) = model.attention_hw();
        assert_eq!(out.embedding.len(), 4 * 128);
        assert_eq!(out.attention.data.len(), 4 * m * n);
        assert!(out.attention.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg(8);
        let model = EmbeddingModel::<f32>::new(&cfg, 1).unwrap();
        let x = random_batch::<f32>(3, cfg.input, 9);
        assert_eq!(model.infer(&x).embedding, model.infer(&x).embedding);
        assert_eq!(model.forward(&x).embedding, model.infer(&x).embedding);
    }

    #[test]
    fn rejects_mismatched_images() {
        let cfg = tiny_cfg(4);
        let model = EmbeddingModel::<f32>::new(&cfg, 1).unwrap();
        let rec = SampleRecord::new("x", vec![0.5; 3 * 8 * 8], 3, 8, 8, 0, None).unwrap();
        assert!(matches!(model.batch_input(&[&rec]), Err(Error::Config(_))));
    }

    #[test]
    fn backward_matches_finite_differences_through_every_layer() {
        let cfg = tiny_cfg(3);
        let mut model = EmbeddingModel::<f64>::new(&cfg, 4).unwrap();
        let x = random_batch::<f64>(2, cfg.input, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |m: &EmbeddingModel<f64>| -> f64 { m.infer(&x).embedding.iter().zip(&r).map(|(a, b)| a * b).sum() };
        let pass = model.forward(&x);
        model.zero_grad();
        model.backward(pass, &r);
        let mut names = Vec::new();
        model.visit_params(&mut |n, p| names.push((n.to_string(), p.len())));
        let h = 1e-6;
        for (name, len) in names {
            for idx in [0, len / 2, len - 1] {
                let mut analytic = 0.0;
                let mut probe = model.clone();
                probe.visit_params(&mut |n, p| {
                    if n == name {
                        analytic = p.grad[idx];
                    }
                });
                probe.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.value[idx] += h;
                    }
                });
                let up = loss(&probe);
                probe.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.value[idx] -= 2.0 * h;
                    }
                });
                let dn = loss(&probe);
                let numeric = (up - dn) / (2.0 * h);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-4, "{name}[{idx}]: numeric {numeric} analytic {analytic}");
            }
        }
    }

    #[test]
    fn reset_touches_only_remainder_rows() {
        let cfg = tiny_cfg(6);
        let mut model = EmbeddingModel::<f32>::new(&cfg, 11).unwrap();
        let layout = SubspaceLayout::from_parts(6, vec![vec![0, 2, 4]], vec![1, 3, 5]).unwrap();
        let x = random_batch::<f32>(3, cfg.input, 12);
        let before = model.infer(&x).embedding;
        model.reset_remainder(&layout, 99).unwrap();
        let after = model.infer(&x).embedding;
        for b in 0..3 {
            for j in 0..6 {
                let (u, v) = (before[b * 6 + j], after[b * 6 + j]);
                if layout.frozen()[0].contains(&j) {
                    assert_eq!(u, v);
                } else {
                    assert_ne!(u, v);
                }
            }
        }
        let mut again = model.clone();
        model.reset_remainder(&layout, 5).unwrap();
        again.reset_remainder(&layout, 5).unwrap();
        assert_eq!(model.head.weight.value, again.head.weight.value);
        assert_eq!(model.head.bias.value, again.head.bias.value);
    }
}
