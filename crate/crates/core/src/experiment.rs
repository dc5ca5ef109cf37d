//! Multi-seed experiment driver and its on-disk artifacts.
//!
//! ```text
//! <out_dir>/<name>/
//!   config.toml  summary.json  results.jsonl
//!   seed-<s>/ history.jsonl  metrics.json  timing.json  final.ckpt  best.ckpt  split-K<k>.ckpt
//!             embeddings.bin  embeddings.csv  history.svg  history-K.svg  learners.svg
//!             wss.json  dice_vs_threshold.svg  segmenter.ckpt  attention/  masks/
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataConfig, ExperimentConfig, WssConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{dice, evaluate_checkpoint, normalized_embeddings, MetricReport};
use crate::folder::load_image_folder;
use crate::layout::SubspaceLayout;
use crate::model::{EmbeddingModel, FeatureExtractor, ModelConfig, SmallCnn};
use crate::nn::Real;
use crate::plot;
use crate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::trainer::{derive_seed, EpochRecord, TrainObserver, Trainer};
use crate::wss::{binarize, export_attention, export_masks, extract_attention, segment_all, select_threshold, train_segmenter, ThresholdSweep};

/// Seed added to the evaluation K-means of the test report.
const TEST_EVAL_SEED: u64 = 17;

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Builds train/validation/test data as configured.
pub fn load_data(config: &ExperimentConfig) -> Result<Splits> {
    match &config.data {
        DataConfig::Synthetic(s) => {
            let gen = |n: usize, part: u64| {
                let spec = SyntheticSpec { n_samples: n, ..s.spec.clone() };
                generate_synthetic(&spec, derive_seed(s.data_seed, 0xDA7A, part))
            };
            Ok(Splits { train: gen(s.spec.n_samples, 0)?, val: gen(s.n_val, 1)?, test: gen(s.n_test, 2)? })
        }
        DataConfig::Folder(f) => {
            let (train, val, test) = load_image_folder(&f.path, &f.extensions, f.split, f.data_seed, config.model.input)?;
            Ok(Splits { train, val, test })
        }
    }
}

/// Writes history lines and checkpoints as training progresses.
struct RunObserver<'a> {
    dir: &'a Path,
    history: BufWriter<fs::File>,
    model_config: &'a ModelConfig,
}

impl TrainObserver<f32, SmallCnn<f32>> for RunObserver<'_> {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.history, "{}", serde_json::to_string(record)?)?;
        self.history.flush()?;
        Ok(())
    }

    fn on_checkpoint(&mut self, kind: &str, run: &Trainer<f32, SmallCnn<f32>>) -> Result<()> {
        let name = match kind {
            "split" => format!("split-K{}.ckpt", run.layout.k()),
            other => format!("{other}.ckpt"),
        };
        checkpoint::save_trainer(&self.dir.join(name), run, self.model_config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WssReport {
    pub sweep: ThresholdSweep,
    /// Mean validation Dice of attention maps binarized at the chosen
    /// threshold.
    pub init_dice: f64,
    /// Mean validation Dice of the segmenter trained on proxy masks.
    pub refined_dice: f64,
    pub segmenter_history: Vec<crate::wss::SegEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub test: MetricReport,
    #[serde(rename = "K")]
    pub k: usize,
    pub slice_sizes: Vec<usize>,
    pub wss: Option<WssReport>,
}

/// Runs the attention → proxy mask → segmenter pipeline. Validation images
/// need ground-truth masks; they choose the threshold and score both the
/// raw maps and the segmenter.
pub fn run_wss<F: Real, B: FeatureExtractor<F>>(
    model: &EmbeddingModel<F, B>,
    splits: &Splits,
    config: &WssConfig,
    seed: u64,
    dir: Option<&Path>,
) -> Result<WssReport> {
    let gt: Vec<Vec<u8>> = splits
        .val
        .samples
        .iter()
        .map(|s| s.mask.clone().ok_or_else(|| Error::InvalidInput(format!("validation sample {} has no mask", s.id))))
        .collect::<Result<_>>()?;
    let val_maps = extract_attention(model, &splits.val)?;
    let sweep = select_threshold(&val_maps, &gt, &config.grid)?;
    let init_dice = sweep.best_dice;
    let train_maps = extract_attention(model, &splits.train)?;
    let proxies: Vec<Vec<u8>> = binarize(&train_maps, sweep.best)?.into_iter().map(|p| p.mask).collect();
    let seg_cfg = crate::wss::SegTrainConfig { seed: derive_seed(seed, 0x5E6, 0), ..config.segmenter.clone() };
    let (net, history) = train_segmenter(&splits.train.samples, &proxies, &seg_cfg)?;
    let pred = segment_all(&net, &splits.val.samples, 0.5)?;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(&gt) {
        total += dice(p, g)?;
    }
    let refined_dice = total / gt.len() as f64;
    if let Some(dir) = dir {
        checkpoint::save_segmenter(&dir.join("segmenter.ckpt"), &net)?;
        let n = config.export_limit.min(val_maps.len());
        export_attention(&dir.join("attention"), &val_maps[..n])?;
        let ids: Vec<String> = splits.val.samples[..n].iter().map(|s| s.id.clone()).collect();
        let (h, w) = (splits.val.samples[0].height, splits.val.samples[0].width);
        let proxy_val: Vec<Vec<u8>> = binarize(&val_maps[..n], sweep.best)?.into_iter().map(|p| p.mask).collect();
        export_masks(&dir.join("masks").join("proxy"), &ids, &proxy_val, h, w)?;
        export_masks(&dir.join("masks").join("predicted"), &ids, &pred[..n], h, w)?;
        plot::threshold_curve(&dir.join("dice_vs_threshold.svg"), &sweep)?;
    }
    Ok(WssReport { sweep, init_dice, refined_dice, segmenter_history: history })
}

/// Trains, evaluates and (optionally) runs the segmentation pipeline for
/// one seed, writing artifacts under `dir`.
pub fn run_seed(config: &ExperimentConfig, splits: &Splits, seed: u64, dir: &Path) -> Result<SeedOutcome> {
    fs::create_dir_all(dir)?;
    let model = EmbeddingModel::<f32>::new(&config.model, seed)?;
    let trainer_cfg = crate::trainer::TrainerConfig { seed, ..config.trainer.clone() };
    let mut trainer = Trainer::new(trainer_cfg, model)?;
    train_with_artifacts(&mut trainer, config, splits, seed, dir)
}

/// Continues `trainer` to the end and writes every artifact of the seed.
pub fn train_with_artifacts(
    trainer: &mut Trainer<f32, SmallCnn<f32>>,
    config: &ExperimentConfig,
    splits: &Splits,
    seed: u64,
    dir: &Path,
) -> Result<SeedOutcome> {
    fs::create_dir_all(dir)?;
    // A resumed run rewrites the epochs it already has.
    let mut history = BufWriter::new(fs::File::create(dir.join("history.jsonl"))?);
    for r in &trainer.state.history {
        writeln!(history, "{}", serde_json::to_string(r)?)?;
    }
    let mut observer = RunObserver { dir, history, model_config: &config.model };
    let clock = Instant::now();
    trainer.run(&splits.train, &splits.val, &mut observer)?;
    checkpoint::save_trainer(&dir.join("final.ckpt"), trainer, &config.model)?;

    let test = evaluate_checkpoint(&trainer.model, &trainer.layout, &splits.test, TEST_EVAL_SEED)?;
    export_embeddings(&trainer.model, &trainer.layout, &splits.test, &dir.join("embeddings.bin"))?;
    plot::history(&dir.join("history.svg"), &trainer.state.history)?;
    plot::learners(&dir.join("learners.svg"), &trainer.state.history)?;
    let train_secs = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let wss = if config.wss.enabled && splits.val.samples.iter().all(|s| s.mask.is_some()) {
        let r = run_wss(&trainer.model, splits, &config.wss, seed, Some(dir))?;
        fs::write(dir.join("wss.json"), serde_json::to_string_pretty(&r)?)?;
        Some(r)
    } else {
        if config.wss.enabled {
            log::warn!("segmentation stage skipped: validation images lack masks");
        }
        None
    };
    let timing = Timing { train_secs, wss_secs: clock.elapsed().as_secs_f64() };
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)?)?;
    let outcome = SeedOutcome { seed, test, k: trainer.layout.k(), slice_sizes: trainer.layout.slice_sizes(), wss };
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

/// Wall-clock seconds of one seed, kept apart from the metrics so reruns
/// stay byte-identical.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Training, test evaluation and exports.
    pub train_secs: f64,
    pub wss_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub values: Vec<f64>,
}

impl Stat {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedSeed {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mode: String,
    pub seeds: Vec<u64>,
    pub completed: Vec<u64>,
    pub failed: Vec<FailedSeed>,
    /// Mean and standard deviation over completed seeds, by metric name.
    pub metrics: BTreeMap<String, Stat>,
    pub outcomes: Vec<SeedOutcome>,
}

/// Aggregates seed outcomes. Report timestamps are zeroed so that a rerun
/// produces an identical summary.
pub fn summarize(config: &ExperimentConfig, mut outcomes: Vec<SeedOutcome>, failed: Vec<FailedSeed>) -> Summary {
    for o in &mut outcomes {
        o.test.timestamp = 0;
    }
    let mut metrics = BTreeMap::new();
    if !outcomes.is_empty() {
        let col = |f: &dyn Fn(&SeedOutcome) -> f64| Stat::of(outcomes.iter().map(f).collect());
        metrics.insert("nmi".into(), col(&|o| o.test.nmi));
        metrics.insert("recall@1".into(), col(&|o| o.test.r_at(1)));
        metrics.insert("recall@4".into(), col(&|o| o.test.r_at(4)));
        metrics.insert("K".into(), col(&|o| o.k as f64));
        if outcomes.iter().all(|o| o.wss.is_some()) {
            metrics.insert("wss_init_dice".into(), col(&|o| o.wss.as_ref().map_or(f64::NAN, |w| w.init_dice)));
            metrics.insert("wss_refined_dice".into(), col(&|o| o.wss.as_ref().map_or(f64::NAN, |w| w.refined_dice)));
            metrics.insert("wss_threshold".into(), col(&|o| o.wss.as_ref().map_or(f64::NAN, |w| w.sweep.best)));
        }
    }
    Summary {
        name: config.name.clone(),
        mode: config.trainer.mode.to_string(),
        seeds: config.seeds.clone(),
        completed: outcomes.iter().map(|o| o.seed).collect(),
        failed,
        metrics,
        outcomes,
    }
}

/// Runs every seed and writes the summary. A failing seed is recorded and
/// the others still run. Returns the run directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<PathBuf> {
    config.validate()?;
    let root = config.out_dir.join(&config.name);
    fs::create_dir_all(&root)?;
    fs::write(root.join("config.toml"), config.to_toml_string()?)?;
    let splits = load_data(config)?;
    let mut outcomes = Vec::new();
    let mut failed = Vec::new();
    for &seed in &config.seeds {
        log::info!("{}: seed {seed}", config.name);
        match run_seed(config, &splits, seed, &root.join(format!("seed-{seed}"))) {
            Ok(o) => {
                o.test.append_jsonl(&root.join("results.jsonl"))?;
                outcomes.push(o);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failed.push(FailedSeed { seed, error: e.to_string() });
            }
        }
    }
    let summary = summarize(config, outcomes, failed);
    fs::write(root.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(root)
}

/// Recomputes `summary.json` from the `metrics.json` of every seed
/// directory under `root`.
pub fn report(root: &Path) -> Result<Summary> {
    let config = ExperimentConfig::load(&root.join("config.toml"))?;
    let mut outcomes = Vec::new();
    let mut failed = Vec::new();
    for &seed in &config.seeds {
        let p = root.join(format!("seed-{seed}")).join("metrics.json");
        match fs::read_to_string(&p) {
            Ok(t) => outcomes.push(serde_json::from_str(&t)?),
            Err(e) => failed.push(FailedSeed { seed, error: format!("{}: {e}", p.display()) }),
        }
    }
    let s = summarize(&config, outcomes, failed);
    fs::write(root.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    Ok(s)
}

/// Reads per-epoch records written during training.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = std::io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub const EMBEDDING_MAGIC: &[u8; 8] = b"DSLEMB01";

/// Writes the L2-normalized embeddings of `data` with coordinates in slice
/// order.
///
/// Layout: magic, then little-endian `u64` N, d, K and the K slice sizes,
/// then N rows of d `f32`. A CSV next to the file (same stem, `.csv`) lists
/// `row,id,label,class` for every row.
pub fn export_embeddings<F: Real, B: FeatureExtractor<F>>(
    model: &EmbeddingModel<F, B>,
    layout: &SubspaceLayout,
    data: &Dataset,
    path: &Path,
) -> Result<()> {
    let d = model.embedding_dim();
    if layout.dim() != d {
        return Err(Error::Dimension("layout does not match the embedding size".into()));
    }
    let emb = normalized_embeddings(model, data)?;
    let order = layout.concat_order();
    let sizes = layout.slice_sizes();
    let mut buf = Vec::with_capacity(32 + 8 * sizes.len() + 4 * emb.len());
    buf.extend_from_slice(EMBEDDING_MAGIC);
    for v in [data.len(), d, sizes.len()].into_iter().chain(sizes.iter().copied()) {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for row in emb.chunks(d) {
        for &c in &order {
            buf.extend_from_slice(&(row[c] as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    let mut csv = String::from("row,id,label,class\n");
    for (i, s) in data.samples.iter().enumerate() {
        let class = data.class_names.get(s.label).map(String::as_str).unwrap_or("");
        csv.push_str(&format!("{i},{},{},{}\n", s.id, s.label, class));
    }
    fs::write(path.with_extension("csv"), csv)?;
    Ok(())
}

/// Embedding file contents: `(rows, d, slice sizes, values)`.
pub type EmbeddingFile = (usize, usize, Vec<usize>, Vec<f32>);

pub fn read_embeddings(path: &Path) -> Result<EmbeddingFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = || Error::Format(format!("{} is not an embedding file", path.display()));
    if bytes.len() < 32 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(fail());
    }
    let word = |i: usize| -> Result<usize> {
        let s = bytes.get(8 + 8 * i..16 + 8 * i).ok_or_else(fail)?;
        Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")) as usize)
    };
    let (n, d, k) = (word(0)?, word(1)?, word(2)?);
    let sizes = (0..k).map(|i| word(3 + i)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 8 * (3 + k);
    if bytes.len() != start + 4 * n * d || sizes.iter().sum::<usize>() != d {
        return Err(fail());
    }
    let values = bytes[start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((n, d, sizes, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputSpec, SmallCnnConfig};

    #[test]
    fn stats_use_sample_std() {
        let s = Stat::of(vec![1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert_eq!(Stat::of(vec![5.0]).std, 0.0);
    }

    #[test]
    fn embedding_file_round_trip() {
        let cfg = ModelConfig {
            input: InputSpec::square(3, 16),
            backbone: SmallCnnConfig { in_channels: 3, widths: vec![4, 8] },
            embedding_dim: 6,
            use_attention: true,
        };
        let model = EmbeddingModel::<f32>::new(&cfg, 2).unwrap();
        let spec = SyntheticSpec { n_samples: 5, image_size: 16, ..Default::default() };
        let data = generate_synthetic(&spec, 1).unwrap();
        let layout = SubspaceLayout::single(6).commit(&[1, 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        export_embeddings(&model, &layout, &data, &p).unwrap();
        let header = 8 + 8 * (3 + 2);
        assert_eq!(fs::metadata(&p).unwrap().len() as usize, header + 4 * 5 * 6);
        let (n, d, sizes, values) = read_embeddings(&p).unwrap();
        assert_eq!((n, d), (5, 6));
        assert_eq!(sizes.iter().sum::<usize>(), 6);
        let emb = normalized_embeddings(&model, &data).unwrap();
        let order = layout.concat_order();
        for i in 0..5 {
            for (j, &c) in order.iter().enumerate() {
                assert_eq!(values[i * 6 + j], emb[i * 6 + c] as f32);
            }
        }
        let csv = fs::read_to_string(p.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
    }
}
