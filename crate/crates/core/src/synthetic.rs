//! Synthetic images: one colored shape on a noisy gray background, labeled by
//! color, shape or both, with an exact foreground mask.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::trainer::derive_seed;

pub const PALETTE: [(&str, [f32; 3]); 6] = [
    ("red", [0.85, 0.15, 0.15]),
    ("blue", [0.15, 0.25, 0.85]),
    ("green", [0.15, 0.75, 0.2]),
    ("yellow", [0.9, 0.85, 0.15]),
    ("magenta", [0.8, 0.2, 0.8]),
    ("cyan", [0.15, 0.8, 0.85]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Triangle, Shape::Square, Shape::Diamond];

impl Shape {
    /// Whether point `(x, y)` lies inside the shape of half-size `r`
    /// centred at `(cx, cy)`.
    pub fn contains(self, cx: f32, cy: f32, r: f32, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            // apex up, base at cy + r/2
            Shape::Triangle => dy <= r * 0.5 && dy >= -r && dx.abs() <= (dy + r) * 0.577_35 * 1.5,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }
}

/// Rasterizes a shape at pixel centres into an `h×w` binary mask.
pub fn rasterize(shape: Shape, cx: f32, cy: f32, r: f32, h: usize, w: usize) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            m[y * w + x] = u8::from(shape.contains(cx, cy, r, x as f32 + 0.5, y as f32 + 0.5));
        }
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRule {
    #[serde(rename = "color")]
    Color,
    #[serde(rename = "shape")]
    Shape,
    #[default]
    #[serde(rename = "color×shape", alias = "color-shape", alias = "colorxshape")]
    ColorShape,
}

impl FromStr for LabelRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(Self::Color),
            "shape" => Ok(Self::Shape),
            "color×shape" | "color-shape" | "colorxshape" => Ok(Self::ColorShape),
            o => Err(Error::Config(format!("unknown labeling rule {o:?}"))),
        }
    }
}

impl fmt::Display for LabelRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Color => "color",
            Self::Shape => "shape",
            Self::ColorShape => "color×shape",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    /// Amplitude of the uniform per-pixel noise.
    pub texture_noise: f32,
    pub rule: LabelRule,
    /// Shape half-size range as fractions of the image side.
    pub blob_min: f32,
    pub blob_max: f32,
    /// Mixed into every background so two specs can share foregrounds but
    /// differ in texture.
    pub background_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            image_size: 64,
            n_colors: 2,
            n_shapes: 2,
            texture_noise: 0.15,
            rule: LabelRule::ColorShape,
            blob_min: 0.15,
            blob_max: 0.28,
            background_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_colors == 0 || self.n_colors > PALETTE.len() {
            return Err(Error::Config(format!("n_colors must lie in 1..={}", PALETTE.len())));
        }
        if self.n_shapes == 0 || self.n_shapes > SHAPES.len() {
            return Err(Error::Config(format!("n_shapes must lie in 1..={}", SHAPES.len())));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        if !(0.0..=0.5).contains(&self.texture_noise) {
            return Err(Error::Config("texture_noise must lie in [0, 0.5]".into()));
        }
        if !(self.blob_min > 0.0 && self.blob_min <= self.blob_max && self.blob_max <= 0.45) {
            return Err(Error::Config("need 0 < blob_min ≤ blob_max ≤ 0.45".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.rule {
            LabelRule::Color => self.n_colors,
            LabelRule::Shape => self.n_shapes,
            LabelRule::ColorShape => self.n_colors * self.n_shapes,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|c| match self.rule {
                LabelRule::Color => PALETTE[c].0.to_string(),
                LabelRule::Shape => SHAPES[c].name().to_string(),
                LabelRule::ColorShape => {
                    format!("{}-{}", PALETTE[c / self.n_shapes].0, SHAPES[c % self.n_shapes].name())
                }
            })
            .collect()
    }
}

/// Generates `spec.n_samples` images; sample `i` has label `i mod classes`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let classes = spec.num_classes();
    let s = spec.image_size;
    let sf = s as f32;
    let samples = (0..spec.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5EED, i as u64));
            let mut bg = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ spec.background_seed, 0xB6, i as u64));
            let label = i % classes;
            let (color, shape) = match spec.rule {
                LabelRule::Color => (label, rng.gen_range(0..spec.n_shapes)),
                LabelRule::Shape => (rng.gen_range(0..spec.n_colors), label),
                LabelRule::ColorShape => (label / spec.n_shapes, label % spec.n_shapes),
            };
            let r = rng.gen_range(spec.blob_min..=spec.blob_max) * sf;
            let cx = rng.gen_range(r..=sf - r);
            let cy = rng.gen_range(r..=sf - r);
            let mask = rasterize(SHAPES[shape], cx, cy, r, s, s);
            let base = PALETTE[color].1;
            let jitter: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.05..0.05));
            let gray = bg.gen_range(0.35f32..0.65);
            let mut image = vec![0f32; 3 * s * s];
            for p in 0..s * s {
                let n = bg.gen_range(-spec.texture_noise..=spec.texture_noise);
                for ch in 0..3 {
                    let v = if mask[p] == 1 { base[ch] + jitter[ch] + 0.3 * n } else { gray + n };
                    image[ch * s * s + p] = v.clamp(0.0, 1.0);
                }
            }
            SampleRecord::new(format!("syn{i:05}"), image, 3, s, s, label, Some(mask))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, spec.class_names())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::dice;

    #[test]
    fn class_counts_follow_rule() {
        let spec = SyntheticSpec { n_samples: 8, ..Default::default() };
        assert_eq!(spec.num_classes(), 4);
        let d = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(d.present_classes(), 4);
        assert_eq!(SyntheticSpec { rule: LabelRule::Color, n_colors: 3, ..spec.clone() }.num_classes(), 3);
        assert_eq!(d.class_names[3], "blue-triangle");
    }

    #[test]
    fn masks_cover_exactly_the_shape() {
        let spec = SyntheticSpec { n_samples: 12, n_shapes: 4, texture_noise: 0.0, ..Default::default() };
        let d = generate_synthetic(&spec, 9).unwrap();
        let s = spec.image_size;
        for rec in &d.samples {
            let m = rec.mask.as_ref().unwrap();
            assert!(m.contains(&1));
            // without noise, foreground pixels are exactly the non-gray ones
            let gray = rec.image[m.iter().position(|v| *v == 0).unwrap()];
            let fg: Vec<u8> = (0..s * s)
                .map(|p| u8::from((0..3).any(|c| (rec.image[c * s * s + p] - gray).abs() > 1e-6)))
                .collect();
            assert_eq!(dice(m, &fg).unwrap(), 1.0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec { n_samples: 6, image_size: 16, ..Default::default() };
        assert_eq!(generate_synthetic(&spec, 3).unwrap(), generate_synthetic(&spec, 3).unwrap());
        assert_ne!(generate_synthetic(&spec, 3).unwrap(), generate_synthetic(&spec, 4).unwrap());
    }

    #[test]
    fn rasterized_circle_area() {
        let m = rasterize(Shape::Circle, 32.0, 32.0, 10.0, 64, 64);
        let area = m.iter().filter(|v| **v == 1).count() as f64;
        assert!((area - std::f64::consts::PI * 100.0).abs() < 15.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SyntheticSpec { n_colors: 7, ..Default::default() }.validate().is_err());
        assert!(SyntheticSpec { blob_min: 0.3, blob_max: 0.2, ..Default::default() }.validate().is_err());
    }
}
