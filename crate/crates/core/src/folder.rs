//! Loading a "one subdirectory per class" image tree.
//!
//! ```text
//! root/
//!   benign/    a.png b.jpg ...
//!     masks/   a.png ...        (optional, matched by file stem)
//!   malignant/ ...
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::model::InputSpec;
use crate::trainer::derive_seed;

/// Subdirectory of a class folder holding ground-truth masks.
pub const MASK_DIR: &str = "masks";

/// Worker threads used for decoding: `DSL_NUM_WORKERS` if set, else the
/// available parallelism.
pub fn num_workers() -> usize {
    std::env::var("DSL_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn has_extension(p: &Path, extensions: &[String]) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

struct Job {
    path: PathBuf,
    mask: Option<PathBuf>,
    label: usize,
}

fn decode(job: &Job, input: InputSpec) -> Result<SampleRecord> {
    let (w, h) = (input.width as u32, input.height as u32);
    let img = image::open(&job.path)?.resize_exact(w, h, FilterType::Triangle);
    let hw = input.height * input.width;
    let image: Vec<f32> = match input.channels {
        1 => img.into_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        3 => {
            let raw = img.into_rgb8().into_raw();
            let mut planar = vec![0f32; 3 * hw];
            for (p, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * hw + p] = px[c] as f32 / 255.0;
                }
            }
            planar
        }
        c => return Err(Error::Config(format!("image folders support 1 or 3 channels, not {c}"))),
    };
    let mask = match &job.mask {
        Some(m) => {
            let mi = image::open(m)?.resize_exact(w, h, FilterType::Nearest).into_luma8();
            Some(mi.into_raw().into_iter().map(|v| u8::from(v > 127)).collect())
        }
        None => None,
    };
    let id = job.path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    SampleRecord::new(id, image, input.channels, input.height, input.width, job.label, mask)
}

/// Loads and resizes every image, then splits each class by `split`
/// (train, validation, test fractions) after a seeded shuffle.
/// Unreadable files are skipped with a warning.
pub fn load_image_folder(
    root: &Path,
    extensions: &[String],
    split: [f64; 3],
    seed: u64,
    input: InputSpec,
) -> Result<(Dataset, Dataset, Dataset)> {
    if split.iter().any(|f| *f < 0.0) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
    }
    let mut class_names = Vec::new();
    let mut jobs = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_names.len();
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let masks: BTreeMap<String, PathBuf> = if dir.join(MASK_DIR).is_dir() {
            sorted_entries(&dir.join(MASK_DIR))?
                .into_iter()
                .filter(|p| has_extension(p, extensions))
                .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p)))
                .collect()
        } else {
            BTreeMap::new()
        };
        let files: Vec<PathBuf> = sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && has_extension(p, extensions)).collect();
        if files.is_empty() {
            return Err(Error::InvalidInput(format!("class folder {} contains no images", dir.display())));
        }
        for path in files {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mask = masks.get(stem).cloned();
            jobs.push(Job { path, mask, label });
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no class subdirectories", root.display())));
    }

    let workers = num_workers().min(jobs.len()).max(1);
    let mut decoded: Vec<Option<SampleRecord>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = jobs.len().div_ceil(workers);
        for (job_part, out_part) in jobs.chunks(chunk).zip(decoded.chunks_mut(chunk)) {
            s.spawn(move || {
                for (j, o) in job_part.iter().zip(out_part) {
                    match decode(j, input) {
                        Ok(r) => *o = Some(r),
                        Err(e) => log::warn!("skipping {}: {e}", j.path.display()),
                    }
                }
            });
        }
    });

    let mut by_class: BTreeMap<usize, Vec<SampleRecord>> = BTreeMap::new();
    for r in decoded.into_iter().flatten() {
        by_class.entry(r.label).or_default().push(r);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (label, mut recs) in by_class {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF01D, label as u64));
        recs.shuffle(&mut rng);
        let n = recs.len();
        let n_train = ((n as f64 * split[0]).round() as usize).min(n);
        let n_val = ((n as f64 * split[1]).round() as usize).min(n - n_train);
        let rest = recs.split_off(n_train + n_val);
        let v = recs.split_off(n_train);
        train.extend(recs);
        val.extend(v);
        test.extend(rest);
    }
    Ok((
        Dataset::new(train, class_names.clone())?,
        Dataset::new(val, class_names.clone())?,
        Dataset::new(test, class_names)?,
    ))
}

/// Writes `data` as a class-per-folder PNG tree that [`load_image_folder`]
/// reads back, with masks under [`MASK_DIR`]. Refuses a non-empty `root`.
pub fn write_image_folder(data: &Dataset, root: &Path) -> Result<()> {
    if root.exists() && std::fs::read_dir(root)?.next().is_some() {
        return Err(Error::InvalidInput(format!("{} is not empty", root.display())));
    }
    for s in &data.samples {
        let class = data.class_names.get(s.label).cloned().unwrap_or_else(|| format!("class{}", s.label));
        let dir = root.join(&class);
        std::fs::create_dir_all(&dir)?;
        let (h, w, hw) = (s.height as u32, s.width as u32, s.height * s.width);
        let px = |c: usize, p: usize| (s.image[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        let file = dir.join(format!("{}.png", s.id));
        match s.channels {
            1 => image::GrayImage::from_fn(w, h, |x, y| image::Luma([px(0, (y * w + x) as usize)])).save(&file)?,
            3 => image::RgbImage::from_fn(w, h, |x, y| {
                let p = (y * w + x) as usize;
                image::Rgb([px(0, p), px(1, p), px(2, p)])
            })
            .save(&file)?,
            c => return Err(Error::InvalidInput(format!("cannot write {c}-channel images"))),
        }
        if let Some(m) = &s.mask {
            std::fs::create_dir_all(dir.join(MASK_DIR))?;
            image::GrayImage::from_fn(w, h, |x, y| image::Luma([m[(y * w + x) as usize] * 255]))
                .save(dir.join(MASK_DIR).join(format!("{}.png", s.id)))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_tree(root: &Path, classes: &[&str], per_class: usize, with_masks: bool) {
        for (ci, c) in classes.iter().enumerate() {
            let dir = root.join(c);
            std::fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                let img = RgbImage::from_pixel(10, 6, Rgb([(ci * 100) as u8, i as u8 * 10, 50]));
                img.save(dir.join(format!("{c}_{i:02}.png"))).unwrap();
            }
            if with_masks {
                std::fs::create_dir_all(dir.join(MASK_DIR)).unwrap();
                let m = image::GrayImage::from_fn(10, 6, |x, _| image::Luma([if x < 5 { 255 } else { 0 }]));
                m.save(dir.join(MASK_DIR).join(format!("{c}_00.png"))).unwrap();
            }
        }
    }

    fn exts() -> Vec<String> {
        vec!["png".into()]
    }

    #[test]
    fn stratified_split_sizes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &["a", "b"], 10, false);
        let input = InputSpec::square(3, 8);
        let (tr, va, te) = load_image_folder(dir.path(), &exts(), [0.6, 0.2, 0.2], 1, input).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (12, 4, 4));
        for d in [&tr, &va, &te] {
            let counts: Vec<usize> = d.by_class().values().map(Vec::len).collect();
            assert_eq!(counts[0], counts[1]);
        }
        assert!(tr.samples.iter().all(|s| s.image.len() == 3 * 64 && s.image.iter().all(|v| (0.0..=1.0).contains(v))));
        let again = load_image_folder(dir.path(), &exts(), [0.6, 0.2, 0.2], 1, input).unwrap();
        assert_eq!(again.0, tr);
        assert_eq!(tr.class_names, vec!["a", "b"]);
    }

    #[test]
    fn masks_attach_by_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &["a", "b"], 3, true);
        let (tr, va, te) = load_image_folder(dir.path(), &exts(), [1.0, 0.0, 0.0], 0, InputSpec::square(1, 4)).unwrap();
        assert!(va.is_empty() && te.is_empty());
        for s in &tr.samples {
            assert_eq!(s.mask.is_some(), s.id.ends_with("_00"), "{}", s.id);
        }
        let m = tr.samples.iter().find_map(|s| s.mask.clone()).unwrap();
        assert_eq!(m, vec![1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0]);
    }

    #[test]
    fn empty_class_folder_is_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &["a"], 2, false);
        std::fs::create_dir_all(dir.path().join("empty")).unwrap();
        let err = load_image_folder(dir.path(), &exts(), [0.6, 0.2, 0.2], 0, InputSpec::square(3, 4)).unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn written_tree_loads_back() {
        let spec = crate::synthetic::SyntheticSpec { n_samples: 8, image_size: 16, ..Default::default() };
        let data = crate::synthetic::generate_synthetic(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_image_folder(&data, dir.path()).unwrap();
        assert!(write_image_folder(&data, dir.path()).is_err());
        let (tr, _, _) = load_image_folder(dir.path(), &exts(), [1.0, 0.0, 0.0], 0, InputSpec::square(3, 16)).unwrap();
        assert_eq!(tr.len(), 8);
        let mut names = tr.class_names.clone();
        names.sort();
        let mut expected = data.class_names.clone();
        expected.sort();
        assert_eq!(names, expected);
        for s in &tr.samples {
            let orig = data.samples.iter().find(|o| o.id == s.id).unwrap();
            assert_eq!(s.mask, orig.mask);
            assert_eq!(tr.class_names[s.label], data.class_names[orig.label]);
            assert!(s.image.iter().zip(&orig.image).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }

    #[test]
    fn unreadable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), &["a", "b"], 2, false);
        std::fs::write(dir.path().join("a").join("broken.png"), b"not a png").unwrap();
        let (tr, _, _) = load_image_folder(dir.path(), &exts(), [1.0, 0.0, 0.0], 0, InputSpec::square(3, 4)).unwrap();
        assert_eq!(tr.len(), 4);
    }
}
