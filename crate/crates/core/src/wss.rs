//! Attention maps as pixel-level pseudo labels, and a small UNet trained on
//! them.

use std::path::Path;

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::evaluation::dice;
use crate::model::{EmbeddingModel, FeatureExtractor};
use crate::nn::{
    bilinear_resize, maxpool2, maxpool2_backward, relu_backward, relu_inplace, sigmoid, upsample_nearest2,
    upsample_nearest2_backward, Adam, Conv2d, ConvCache, FeatureMap, MaxPoolCache, Param, Parameterized, Real,
};

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub sample_id: String,
    /// Feature-resolution map, `map_height×map_width`.
    pub values: Vec<f64>,
    pub map_height: usize,
    pub map_width: usize,
    /// Bilinear upsampling to `height×width`.
    pub upsampled: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl AttentionMap {
    pub fn new(sample_id: String, values: Vec<f64>, map_hw: (usize, usize), image_hw: (usize, usize)) -> Result<Self> {
        if values.len() != map_hw.0 * map_hw.1 || values.is_empty() {
            return Err(Error::Dimension(format!("{} attention values for a {map_hw:?} map", values.len())));
        }
        let upsampled = bilinear_resize(&values, map_hw.0, map_hw.1, image_hw.0, image_hw.1)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Ok(Self {
            sample_id,
            values,
            map_height: map_hw.0,
            map_width: map_hw.1,
            upsampled,
            height: image_hw.0,
            width: image_hw.1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyMask {
    pub sample_id: String,
    pub mask: Vec<u8>,
    pub threshold: f64,
}

/// One attention map per sample of `data`, in order.
pub fn extract_attention<F: Real, B: FeatureExtractor<F>>(model: &EmbeddingModel<F, B>, data: &Dataset) -> Result<Vec<AttentionMap>> {
    let maps = model.attention_records(&data.samples, 64)?;
    let hw = model.attention_hw();
    data.samples
        .iter()
        .zip(maps)
        .map(|(s, m)| AttentionMap::new(s.id.clone(), m.iter().map(|v| v.as_f64()).collect(), hw, (s.height, s.width)))
        .collect()
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("threshold {t} outside (0,1)")))
    }
}

/// Foreground where the upsampled attention is strictly above `threshold`.
pub fn binarize(maps: &[AttentionMap], threshold: f64) -> Result<Vec<ProxyMask>> {
    check_threshold(threshold)?;
    Ok(maps
        .iter()
        .map(|m| ProxyMask {
            sample_id: m.sample_id.clone(),
            mask: m.upsampled.iter().map(|v| u8::from(*v > threshold)).collect(),
            threshold,
        })
        .collect())
}

/// The default sweep `0.1, 0.2, …, 0.9`.
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub grid: Vec<f64>,
    pub mean_dice: Vec<f64>,
    pub best: f64,
    pub best_dice: f64,
}

/// Mean Dice of binarized `maps` against `gt` for every grid value; the
/// best threshold wins, ties going to the smaller one.
pub fn select_threshold(maps: &[AttentionMap], gt: &[Vec<u8>], grid: &[f64]) -> Result<ThresholdSweep> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty threshold grid".into()));
    }
    if maps.is_empty() || maps.len() != gt.len() {
        return Err(Error::Dimension(format!("{} maps vs {} masks", maps.len(), gt.len())));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut mean_dice = Vec::with_capacity(grid.len());
    for &t in &grid {
        let masks = binarize(maps, t)?;
        let mut total = 0.0;
        for (m, g) in masks.iter().zip(gt) {
            total += dice(&m.mask, g)?;
        }
        mean_dice.push(total / maps.len() as f64);
    }
    let mut best = 0;
    for (i, d) in mean_dice.iter().enumerate() {
        if *d > mean_dice[best] {
            best = i;
        }
    }
    Ok(ThresholdSweep { best: grid[best], best_dice: mean_dice[best], grid, mean_dice })
}

/// Mean pixel binary cross-entropy with probabilities clamped to
/// `[ε, 1−ε]`.
pub fn bce_loss(predictions: &[f64], targets: &[u8]) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::Dimension(format!("{} predictions vs {} targets", predictions.len(), targets.len())));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if *t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to the pre-sigmoid logits.
pub fn bce_logit_grad<F: Real>(probs: &[F], targets: &[u8]) -> Vec<F> {
    let n = F::lit(probs.len() as f64);
    let (lo, hi) = (F::lit(BCE_EPS), F::lit(1.0 - BCE_EPS));
    probs
        .iter()
        .zip(targets)
        .map(|(p, t)| if *p < lo || *p > hi { F::zero() } else { (*p - F::lit(f64::from(*t))) / n })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    /// Channels of the first encoder block; doubled at every level.
    pub base_width: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self { in_channels: 3, base_width: 8, depth: 3 }
    }
}

/// Two 3×3 conv + ReLU layers.
#[derive(Clone, Debug)]
struct Block<F> {
    c1: Conv2d<F>,
    c2: Conv2d<F>,
}

struct BlockCache<F> {
    k1: ConvCache<F>,
    a1: FeatureMap<F>,
    k2: ConvCache<F>,
    a2: FeatureMap<F>,
}

impl<F: Real> Block<F> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { c1: Conv2d::same(cin, cout, 3, rng), c2: Conv2d::same(cout, cout, 3, rng) }
    }

    fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, BlockCache<F>) {
        let (mut a1, k1) = self.c1.forward(x);
        relu_inplace(&mut a1);
        let (mut a2, k2) = self.c2.forward(&a1);
        relu_inplace(&mut a2);
        (a2.clone(), BlockCache { k1, a1, k2, a2 })
    }

    fn infer(&self, x: &FeatureMap<F>) -> FeatureMap<F> {
        let mut a = self.c1.infer(x);
        relu_inplace(&mut a);
        let mut b = self.c2.infer(&a);
        relu_inplace(&mut b);
        b
    }

    fn backward(&mut self, cache: BlockCache<F>, mut dy: FeatureMap<F>, need_dx: bool) -> Option<FeatureMap<F>> {
        relu_backward(&mut dy, &cache.a2);
        let mut d1 = self.c2.backward(cache.k2, &dy, true).expect("dx requested");
        relu_backward(&mut d1, &cache.a1);
        self.c1.backward(cache.k1, &d1, need_dx)
    }

    fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&format!("{name}.conv0.weight"), &self.c1.weight);
        f(&format!("{name}.conv0.bias"), &self.c1.bias);
        f(&format!("{name}.conv1.weight"), &self.c2.weight);
        f(&format!("{name}.conv1.bias"), &self.c2.bias);
    }

    fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{name}.conv0.weight"), &mut self.c1.weight);
        f(&format!("{name}.conv0.bias"), &mut self.c1.bias);
        f(&format!("{name}.conv1.weight"), &mut self.c2.weight);
        f(&format!("{name}.conv1.bias"), &mut self.c2.bias);
    }
}

/// Encoder–decoder with skip connections producing per-pixel foreground
/// probabilities.
#[derive(Clone, Debug)]
pub struct Segmenter<F> {
    pub config: SegmenterConfig,
    encoders: Vec<Block<F>>,
    bottleneck: Block<F>,
    /// `decoders[i]` produces level `i`.
    decoders: Vec<Block<F>>,
    head: Conv2d<F>,
}

struct SegmenterCache<F> {
    enc: Vec<BlockCache<F>>,
    pools: Vec<MaxPoolCache>,
    bottleneck: BlockCache<F>,
    dec: Vec<BlockCache<F>>,
    head: ConvCache<F>,
}

impl<F: Real> Segmenter<F> {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        if config.in_channels == 0 || config.base_width == 0 || config.depth == 0 {
            return Err(Error::Config("segmenter needs positive in_channels, base_width and depth".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = |l: usize| config.base_width << l;
        let encoders =
            (0..config.depth).map(|l| Block::new(if l == 0 { config.in_channels } else { w(l - 1) }, w(l), &mut rng)).collect();
        let bottleneck = Block::new(w(config.depth - 1), w(config.depth), &mut rng);
        let decoders = (0..config.depth).map(|l| Block::new(w(l + 1) + w(l), w(l), &mut rng)).collect();
        let head = Conv2d::same(w(0), 1, 1, &mut rng);
        Ok(Self { config, encoders, bottleneck, decoders, head })
    }

    fn check_input(&self, x: &FeatureMap<F>) -> Result<()> {
        let m = 1 << self.config.depth;
        if x.c != self.config.in_channels || !x.h.is_multiple_of(m) || !x.w.is_multiple_of(m) || x.h == 0 || x.w == 0 {
            return Err(Error::Dimension(format!(
                "segmenter needs {} channels and sides divisible by {m}, got {}×{}×{}",
                self.config.in_channels, x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &FeatureMap<F>) -> (FeatureMap<F>, SegmenterCache<F>) {
        let mut skips = Vec::new();
        let mut enc = Vec::new();
        let mut pools = Vec::new();
        let mut h = x.clone();
        for e in &self.encoders {
            let (s, c) = e.forward(&h);
            let (p, pc) = maxpool2(&s);
            skips.push(s);
            enc.push(c);
            pools.push(pc);
            h = p;
        }
        let (mut u, bottleneck) = self.bottleneck.forward(&h);
        let mut dec: Vec<Option<BlockCache<F>>> = (0..self.config.depth).map(|_| None).collect();
        for l in (0..self.config.depth).rev() {
            let cat = upsample_nearest2(&u).concat_channels(&skips[l]);
            let (o, c) = self.decoders[l].forward(&cat);
            dec[l] = Some(c);
            u = o;
        }
        let (mut logits, head) = self.head.forward(&u);
        logits.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let dec = dec.into_iter().map(|c| c.expect("every level decoded")).collect();
        (logits, SegmenterCache { enc, pools, bottleneck, dec, head })
    }

    /// Foreground probabilities, `1×B×H×W`.
    pub fn predict(&self, x: &FeatureMap<F>) -> Result<FeatureMap<F>> {
        self.check_input(x)?;
        let mut skips = Vec::new();
        let mut h = x.clone();
        for e in &self.encoders {
            let s = e.infer(&h);
            h = maxpool2(&s).0;
            skips.push(s);
        }
        let mut u = self.bottleneck.infer(&h);
        for l in (0..self.config.depth).rev() {
            u = self.decoders[l].infer(&upsample_nearest2(&u).concat_channels(&skips[l]));
        }
        let mut p = self.head.infer(&u);
        p.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(p)
    }

    /// Backpropagates `dL/d(logits)` into the parameter gradients.
    fn backward(&mut self, cache: SegmenterCache<F>, d_logits: FeatureMap<F>) {
        let base = self.config.base_width;
        let w = |l: usize| base << l;
        let mut du = self.head.backward(cache.head, &d_logits, true).expect("dx requested");
        let mut d_skips: Vec<Option<FeatureMap<F>>> = (0..self.config.depth).map(|_| None).collect();
        for (l, c) in cache.dec.into_iter().enumerate() {
            let d_cat = self.decoders[l].backward(c, du, true).expect("dx requested");
            let (d_up, d_skip) = d_cat.split_channels(w(l + 1));
            d_skips[l] = Some(d_skip);
            du = upsample_nearest2_backward(&d_up);
        }
        let mut dh = self.bottleneck.backward(cache.bottleneck, du, true).expect("dx requested");
        let enc = cache.enc.into_iter().zip(cache.pools).enumerate().rev();
        for (l, (c, pc)) in enc {
            let mut ds = maxpool2_backward(&pc, &dh);
            ds.add_assign(d_skips[l].as_ref().expect("skip gradient"));
            match self.encoders[l].backward(c, ds, l > 0) {
                Some(d) => dh = d,
                None => break,
            }
        }
    }

    /// One BCE gradient computation on a batch; returns the loss.
    pub fn accumulate_grad(&mut self, x: &FeatureMap<F>, targets: &[u8]) -> Result<f64> {
        self.check_input(x)?;
        if targets.len() != x.b * x.plane() {
            return Err(Error::Dimension("targets do not match the batch".into()));
        }
        let (probs, cache) = self.forward(x);
        let p64: Vec<f64> = probs.data.iter().map(|v| v.as_f64()).collect();
        let loss = bce_loss(&p64, targets)?;
        let g = bce_logit_grad(&probs.data, targets);
        self.backward(cache, FeatureMap::from_vec(1, x.b, x.h, x.w, g));
        Ok(loss)
    }
}

impl<F: Real> Parameterized<F> for Segmenter<F> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit(&format!("encoder{i}"), f);
        }
        self.bottleneck.visit("bottleneck", f);
        for (i, d) in self.decoders.iter().enumerate() {
            d.visit(&format!("decoder{i}"), f);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&format!("encoder{i}"), f);
        }
        self.bottleneck.visit_mut("bottleneck", f);
        for (i, d) in self.decoders.iter_mut().enumerate() {
            d.visit_mut(&format!("decoder{i}"), f);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }
}

/// Packs record images into a batch of the segmenter's float type.
pub fn image_batch<F: Real>(records: &[&SampleRecord]) -> Result<FeatureMap<F>> {
    let first = records.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    if records.iter().any(|r| (r.channels, r.height, r.width) != (c, h, w)) {
        return Err(Error::Dimension("images in a batch must share a shape".into()));
    }
    let conv: Vec<Vec<F>> = records.iter().map(|r| r.image.iter().map(|v| F::lit(*v as f64)).collect()).collect();
    let refs: Vec<&[F]> = conv.iter().map(Vec::as_slice).collect();
    Ok(FeatureMap::from_samples(c, h, w, &refs))
}

/// Binary mask of one image: probability strictly above `threshold`.
pub fn segment<F: Real>(segmenter: &Segmenter<F>, image: &SampleRecord, threshold: f64) -> Result<Vec<u8>> {
    Ok(segment_all(segmenter, std::slice::from_ref(image), threshold)?.remove(0))
}

pub fn segment_all<F: Real>(segmenter: &Segmenter<F>, images: &[SampleRecord], threshold: f64) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(16) {
        let refs: Vec<&SampleRecord> = part.iter().collect();
        let p = segmenter.predict(&image_batch(&refs)?)?;
        let t = F::lit(threshold);
        out.extend(p.data.chunks(p.plane()).map(|m| m.iter().map(|v| u8::from(*v > t)).collect()));
    }
    Ok(out)
}

/// Mean Dice of predicted masks against `targets`.
pub fn mean_dice<F: Real>(segmenter: &Segmenter<F>, images: &[SampleRecord], targets: &[Vec<u8>]) -> Result<f64> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::Dimension("images and targets differ in count".into()));
    }
    let pred = segment_all(segmenter, images, 0.5)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(targets) {
        total += dice(p, t)?;
    }
    Ok(total / images.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the proxy-labeled images held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
    pub network: SegmenterConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, lr: 1e-3, val_fraction: 0.2, seed: 0, network: SegmenterConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Dice against the held-out proxy masks.
    pub val_dice: f64,
}

/// Trains a segmenter on `(image, proxy mask)` pairs with BCE and returns
/// the epoch with the best held-out Dice. `epochs = 0` returns the freshly
/// initialized network.
pub fn train_segmenter(
    images: &[SampleRecord],
    proxy_masks: &[Vec<u8>],
    config: &SegTrainConfig,
) -> Result<(Segmenter<f32>, Vec<SegEpoch>)> {
    if images.len() != proxy_masks.len() || images.is_empty() {
        return Err(Error::Dimension(format!("{} images vs {} masks", images.len(), proxy_masks.len())));
    }
    if !(0.0..1.0).contains(&config.val_fraction) || config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config("need 0 ≤ val_fraction < 1, batch_size ≥ 1 and lr > 0".into()));
    }
    for (im, m) in images.iter().zip(proxy_masks) {
        if m.len() != im.height * im.width {
            return Err(Error::Dimension(format!("proxy mask of {} is not at image resolution", im.id)));
        }
    }
    if proxy_masks.iter().all(|m| m.iter().all(|v| *v == 0)) {
        log::warn!("all proxy masks are empty; the segmenter will learn background only");
    }
    let mut net = Segmenter::<f32>::new(config.network, config.seed)?;
    if config.epochs == 0 {
        return Ok((net, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((images.len() as f64 * config.val_fraction).round() as usize).min(images.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_images: Vec<SampleRecord> = val_idx.iter().map(|&i| images[i].clone()).collect();
    let val_masks: Vec<Vec<u8>> = val_idx.iter().map(|&i| proxy_masks[i].clone()).collect();

    let mut opt = Adam::new(config.lr);
    let mut best: Option<(f64, Segmenter<f32>)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in train_idx.chunks(config.batch_size) {
            let refs: Vec<&SampleRecord> = chunk.iter().map(|&i| &images[i]).collect();
            let x = image_batch::<f32>(&refs)?;
            let targets: Vec<u8> = chunk.iter().flat_map(|&i| proxy_masks[i].iter().copied()).collect();
            net.zero_grad();
            let loss = net.accumulate_grad(&x, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, detail: "segmenter loss is not finite".into() });
            }
            opt.tick();
            net.visit_params_mut(&mut |_, p| opt.update(p));
            total += loss;
            batches += 1;
        }
        let val_dice = if val_images.is_empty() { f64::NAN } else { mean_dice(&net, &val_images, &val_masks)? };
        log::info!("segmenter epoch {epoch}: loss {:.4}, held-out dice {val_dice:.4}", total / batches as f64);
        history.push(SegEpoch { epoch, train_loss: total / batches as f64, val_dice });
        // Without a held-out split the last epoch is kept.
        let score = if val_dice.is_nan() { epoch as f64 } else { val_dice };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, net.clone()));
        }
    }
    Ok((best.expect("at least one epoch").1, history))
}

/// Writes a map as a 16-bit grayscale PNG with value `round(p·65535)`.
pub fn write_probability_png(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Dimension("map size differs from its resolution".into()));
    }
    let px: Vec<u16> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, px).expect("buffer size checked");
    img.save(path)?;
    Ok(())
}

pub fn read_probability_png(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok((img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(), h as usize, w as usize))
}

/// Writes a binary mask as an 8-bit PNG with values {0, 255}.
pub fn write_mask_png(path: &Path, mask: &[u8], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::Dimension("mask size differs from its resolution".into()));
    }
    let px: Vec<u8> = mask.iter().map(|v| if *v > 0 { 255 } else { 0 }).collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, px).expect("buffer size checked");
    img.save(path)?;
    Ok(())
}

/// Reads a grayscale mask; any non-zero pixel is foreground.
pub fn read_mask_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw().into_iter().map(|v| u8::from(v > 0)).collect(), h as usize, w as usize))
}

#[derive(Serialize)]
struct MapEntry<'a> {
    sample_id: &'a str,
    file: String,
    height: usize,
    width: usize,
    map_height: usize,
    map_width: usize,
}

/// Exports upsampled attention maps as `<id>.png` plus `attention.json`
/// describing ids and resolutions.
pub fn export_attention(dir: &Path, maps: &[AttentionMap]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(maps.len());
    for m in maps {
        let file = format!("{}.png", m.sample_id);
        write_probability_png(&dir.join(&file), &m.upsampled, m.height, m.width)?;
        entries.push(MapEntry {
            sample_id: &m.sample_id,
            file,
            height: m.height,
            width: m.width,
            map_height: m.map_height,
            map_width: m.map_width,
        });
    }
    std::fs::write(dir.join("attention.json"), serde_json::to_string_pretty(&entries)?)?;
    Ok(())
}

/// Writes every mask as `<id>.png` under `dir`.
pub fn export_masks(dir: &Path, ids: &[String], masks: &[Vec<u8>], height: usize, width: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (id, m) in ids.iter().zip(masks) {
        write_mask_png(&dir.join(format!("{id}.png")), m, height, width)?;
    }
    Ok(())
}
