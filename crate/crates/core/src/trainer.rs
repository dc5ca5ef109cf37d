//! Training loop with dynamically spawned subspace learners.
//!
//! Learner `k` owns slice `k` of the embedding; the newest learner owns the
//! remainder. When validation Recall@1 stops improving for `t_p` epochs the
//! remainder coordinates are scored by `|activation × gradient|`, the
//! confident ones are frozen into a new slice and the rest of the remainder is
//! re-initialized. Training data is re-clustered every `t_c` epochs and after
//! every split; cluster `k` feeds learner `k`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::kmeans_best_of;
use crate::data::{Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_checkpoint, normalized_embeddings};
use crate::layout::SubspaceLayout;
use crate::model::{EmbeddingModel, FeatureExtractor};
use crate::nn::{Adam, Parameterized, Real};
use crate::objectives::{build_batch, learner_loss_batch, mine_pairs, MarginLossParams, PairPolicy, PairSet};

/// Restarts of the K-means used to route data to learners.
const ROUTING_RESTARTS: usize = 3;

/// Mixes a run seed with a stream tag and an index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

mod stream {
    pub const EPOCH: u64 = 1;
    pub const CLUSTER: u64 = 2;
    pub const SCORING: u64 = 3;
    pub const RESET: u64 = 4;
    pub const EVAL: u64 = 5;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[default]
    #[serde(rename = "dynamic")]
    Dynamic,
    #[serde(rename = "static-K")]
    StaticK,
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Self::Dynamic),
            "static-K" | "static-k" | "static" => Ok(Self::StaticK),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected dynamic or static-K)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dynamic => "dynamic",
            Self::StaticK => "static-K",
        })
    }
}

/// How the learner trained by each iteration is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSchedule {
    /// Iteration `i` trains learner `i mod K`.
    #[default]
    RoundRobin,
    /// Each iteration draws a learner uniformly.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Re-clustering period in epochs.
    pub t_c: usize,
    /// Plateau patience in epochs.
    pub t_p: usize,
    pub total_epochs: usize,
    /// The last `finetune_epochs` epochs train the full embedding.
    pub finetune_epochs: usize,
    pub embedding_dim: usize,
    pub batch_size: usize,
    pub per_class: usize,
    /// Normalized score a remainder coordinate must exceed to be frozen.
    pub score_threshold: f64,
    /// No split is made once the remainder has this many coordinates.
    pub min_remainder: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub static_k: usize,
    pub margin: MarginLossParams,
    pub pair_policy: PairPolicy,
    /// Training samples used for neuron scoring; `None` uses all of them.
    pub scoring_samples: Option<usize>,
    pub schedule: ClusterSchedule,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainerConfig {
    /// Full-scale hyperparameters.
    pub fn full() -> Self {
        Self {
            t_c: 2,
            t_p: 10,
            total_epochs: 300,
            finetune_epochs: 50,
            embedding_dim: 128,
            batch_size: 32,
            per_class: 8,
            score_threshold: 0.5,
            min_remainder: 4,
            lr: 1e-4,
            seed: 0,
            mode: TrainMode::Dynamic,
            static_k: 1,
            margin: MarginLossParams::default(),
            pair_policy: PairPolicy::default(),
            scoring_samples: Some(2048),
            schedule: ClusterSchedule::RoundRobin,
        }
    }

    /// Small-scale hyperparameters for CPU runs on 64×64 inputs.
    pub fn desk() -> Self {
        Self { total_epochs: 60, finetune_epochs: 10, embedding_dim: 32, lr: 1e-3, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.t_c == 0 {
            return fail("t_c must be at least 1");
        }
        if self.t_p == 0 {
            return fail("t_p must be at least 1");
        }
        if self.total_epochs == 0 || self.finetune_epochs >= self.total_epochs {
            return fail("finetune_epochs must be smaller than total_epochs");
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return fail("score_threshold must lie in (0,1)");
        }
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be positive");
        }
        if self.min_remainder == 0 || self.min_remainder >= self.embedding_dim {
            return fail("min_remainder must lie in [1, embedding_dim)");
        }
        if self.batch_size < 2 || self.per_class == 0 || self.per_class > self.batch_size {
            return fail("need batch_size ≥ 2 and 1 ≤ per_class ≤ batch_size");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.mode == TrainMode::StaticK && (self.static_k == 0 || self.static_k > self.embedding_dim) {
            return fail("static_k must lie in [1, embedding_dim]");
        }
        if self.scoring_samples == Some(0) {
            return fail("scoring_samples must be positive");
        }
        self.margin.validate()
    }

    /// Layout at the start of training.
    pub fn initial_layout(&self) -> Result<SubspaceLayout> {
        match self.mode {
            TrainMode::Dynamic => Ok(SubspaceLayout::single(self.embedding_dim)),
            TrainMode::StaticK => SubspaceLayout::equal_split(self.embedding_dim, self.static_k),
        }
    }

    /// First epoch of the full-embedding fine-tuning phase.
    pub fn finetune_start(&self) -> usize {
        self.total_epochs - self.finetune_epochs
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub slice_sizes: Vec<usize>,
    /// Mean loss over all iterations of the epoch.
    pub train_loss: f64,
    /// Mean loss per learner; `None` for learners that did not train.
    pub learner_losses: Vec<Option<f64>>,
    pub val_nmi: f64,
    pub val_r1: f64,
    /// `split`, `split-refused`, `finetune` or `null`.
    pub event: Option<String>,
    /// Whether the training data was re-clustered before this epoch.
    #[serde(default)]
    pub reclustered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    /// Epochs finished so far; training resumes at this index.
    pub completed: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Best validation Recall@1 so far.
    pub best_score: Option<f64>,
    pub best_epoch: usize,
    pub recluster_flag: bool,
    /// Data cluster of every training sample (empty before the first
    /// clustering).
    pub clusters: Vec<usize>,
    /// Set once a split has been refused; plateaus are then only logged.
    pub splits_exhausted: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainingState {
    pub fn new(k: usize) -> Self {
        Self {
            epoch: 0,
            completed: 0,
            k,
            best_score: None,
            best_epoch: 0,
            recluster_flag: true,
            clusters: Vec::new(),
            splits_exhausted: false,
            history: Vec::new(),
        }
    }
}

/// `true` once `t_p` epochs have passed since the best epoch.
pub fn detect_plateau(state: &TrainingState, t_p: usize) -> bool {
    state.epoch >= state.best_epoch + t_p
}

pub fn should_recluster(epoch: usize, t_c: usize, event: bool) -> bool {
    event || (t_c > 0 && epoch.is_multiple_of(t_c))
}

/// Per-coordinate importance of the embedding layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronScoreVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl NeuronScoreVector {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let max = raw.iter().copied().fold(0.0f64, f64::max);
        let normalized = if max > 0.0 { raw.iter().map(|r| r / max).collect() } else { vec![0.0; raw.len()] };
        Self { raw, normalized }
    }

    pub fn is_dead(&self) -> bool {
        self.raw.iter().all(|r| *r == 0.0)
    }
}

/// Signed sums of `e_i · ∂L/∂e_i` over the rows of one batch for every
/// coordinate, where `L` is the mean margin loss of learner `k`. The
/// absolute value is taken by the caller once all batches are added, so
/// the score estimates the loss change of zeroing the coordinate everywhere.
pub fn score_batch<F: Real>(
    embeddings: &[F],
    d: usize,
    layout: &SubspaceLayout,
    k: usize,
    params: &MarginLossParams,
    pairs: &PairSet,
) -> Result<Vec<f64>> {
    let loss = learner_loss_batch(embeddings, d, layout, k, params, pairs)?;
    let grad = loss.mean_grad();
    let mut acc = vec![0.0; d];
    for (row, g) in embeddings.chunks(d).zip(grad.chunks(d)) {
        for (c, a) in acc.iter_mut().enumerate() {
            *a += row[c].as_f64() * g[c].as_f64();
        }
    }
    Ok(acc)
}

/// Scores the remainder coordinates of the newest learner over
/// `scoring_data`, processed in shuffled batches of `batch_size`.
/// Frozen coordinates score 0.
pub fn score_neurons<F: Real, B: FeatureExtractor<F>>(
    model: &EmbeddingModel<F, B>,
    layout: &SubspaceLayout,
    scoring_data: &[SampleRecord],
    params: &MarginLossParams,
    policy: PairPolicy,
    batch_size: usize,
    seed: u64,
) -> Result<NeuronScoreVector> {
    if layout.remainder().is_empty() {
        return Err(Error::InvalidInput("cannot score an empty remainder".into()));
    }
    if scoring_data.is_empty() {
        return Err(Error::InvalidInput("no scoring data".into()));
    }
    let d = model.embedding_dim();
    if layout.dim() != d {
        return Err(Error::Dimension("layout does not match the embedding size".into()));
    }
    let k = layout.k() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..scoring_data.len()).collect();
    order.shuffle(&mut rng);
    let mut total = vec![0.0; d];
    for chunk in order.chunks(batch_size.max(2)) {
        let records: Vec<&SampleRecord> = chunk.iter().map(|&i| &scoring_data[i]).collect();
        let x = model.batch_input(&records)?;
        let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
        let pairs = mine_pairs(&labels, policy, &mut rng);
        let (emb, _, _) = model.embedding_activation_grad(&x, |_| (F::zero(), Vec::new()));
        let s = score_batch(&emb, d, layout, k, params, &pairs)?;
        total.iter_mut().zip(&s).for_each(|(t, v)| *t += v);
    }
    let n = scoring_data.len() as f64;
    let mut raw = vec![0.0; d];
    for &c in layout.remainder() {
        raw[c] = (total[c] / n).abs();
    }
    Ok(NeuronScoreVector::from_raw(raw))
}

/// Freezes the confident remainder coordinates into a new slice.
///
/// Coordinates whose normalized score exceeds `threshold` qualify. With no
/// qualifier the single best coordinate is taken; if too many qualify only
/// the best `remainder − min_remainder` are kept. Ties go to the lower
/// coordinate index.
pub fn split_learner(
    scores: &NeuronScoreVector,
    layout: &SubspaceLayout,
    threshold: f64,
    min_remainder: usize,
) -> Result<SubspaceLayout> {
    let rem = layout.remainder();
    if scores.normalized.len() != layout.dim() {
        return Err(Error::Dimension("score vector does not match the layout".into()));
    }
    if rem.len() <= min_remainder {
        return Err(Error::InvalidInput(format!(
            "split refused: remainder has {} coordinates (minimum {min_remainder})",
            rem.len()
        )));
    }
    let mut ranked: Vec<usize> = rem.to_vec();
    ranked.sort_by(|&a, &b| scores.normalized[b].total_cmp(&scores.normalized[a]).then(a.cmp(&b)));
    let qualifying = ranked.iter().filter(|&&c| scores.normalized[c] > threshold).count();
    let take = qualifying.clamp(1, rem.len() - min_remainder);
    layout.commit(&ranked[..take])
}

/// Receives training progress; all methods default to no-ops.
pub trait TrainObserver<F: Real, B: FeatureExtractor<F>> {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    /// Called at a new best epoch (`"best"`), after each split (`"split"`)
    /// and before aborting on divergence (`"diverged"`).
    fn on_checkpoint(&mut self, _kind: &str, _run: &Trainer<F, B>) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl<F: Real, B: FeatureExtractor<F>> TrainObserver<F, B> for Silent {}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Trainer<F: Real, B: FeatureExtractor<F>> {
    pub config: TrainerConfig,
    pub model: EmbeddingModel<F, B>,
    pub layout: SubspaceLayout,
    pub state: TrainingState,
    pub optimizer: Adam,
}

#[derive(Clone, Copy, Debug, Default)]
struct EpochLoss {
    total: f64,
    count: usize,
}

impl<F: Real, B: FeatureExtractor<F>> Trainer<F, B> {
    pub fn new(config: TrainerConfig, model: EmbeddingModel<F, B>) -> Result<Self> {
        config.validate()?;
        if model.embedding_dim() != config.embedding_dim {
            return Err(Error::Config(format!(
                "model embeds into {} dims but the trainer expects {}",
                model.embedding_dim(),
                config.embedding_dim
            )));
        }
        let layout = config.initial_layout()?;
        let state = TrainingState::new(layout.k());
        let optimizer = Adam::new(config.lr);
        Ok(Self { config, model, layout, state, optimizer })
    }

    /// Continues a run restored from a checkpoint.
    pub fn resume(
        config: TrainerConfig,
        model: EmbeddingModel<F, B>,
        layout: SubspaceLayout,
        state: TrainingState,
        optimizer: Adam,
    ) -> Result<Self> {
        config.validate()?;
        layout.validate()?;
        if layout.dim() != model.embedding_dim() || layout.k() != state.k {
            return Err(Error::Config("checkpoint layout disagrees with model or state".into()));
        }
        Ok(Self { config, model, layout, state, optimizer })
    }

    fn check_data(&self, train: &Dataset, val: &Dataset) -> Result<()> {
        if train.present_classes() < 2 {
            return Err(Error::InvalidInput("training data needs at least two classes".into()));
        }
        if val.len() < 2 {
            return Err(Error::InvalidInput("validation data needs at least two samples".into()));
        }
        if !self.state.clusters.is_empty() && self.state.clusters.len() != train.len() {
            return Err(Error::InvalidInput("stored clusters do not match the training data".into()));
        }
        Ok(())
    }

    /// One optimizer step of learner `k` on the given sample indices.
    /// `layout = None` trains the full normalized embedding.
    fn step(&mut self, data: &Dataset, batch: &[usize], k: usize, full: bool, rng: &mut ChaCha8Rng) -> Result<f64> {
        let records: Vec<&SampleRecord> = batch.iter().map(|&i| &data.samples[i]).collect();
        let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
        let x = self.model.batch_input(&records)?;
        let pairs = mine_pairs(&labels, self.config.pair_policy, rng);
        let d = self.model.embedding_dim();
        let whole = SubspaceLayout::single(d);
        let (layout, k) = if full { (&whole, 0) } else { (&self.layout, k) };
        let pass = self.model.forward(&x);
        let loss = learner_loss_batch(&pass.embedding, d, layout, k, &self.config.margin, &pairs)?;
        let value = loss.mean().as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        self.model.zero_grad();
        self.model.backward(pass, &loss.mean_grad());
        self.optimizer.tick();
        let rows = layout.slice(k)?.to_vec();
        let opt = &self.optimizer;
        let c = self.model.head.c();
        self.model.visit_params_mut(&mut |name, p| match name {
            "head.weight" => opt.update_rows(p, c, &rows),
            "head.bias" => opt.update_rows(p, 1, &rows),
            _ => opt.update(p),
        });
        Ok(value)
    }

    fn recluster(&mut self, train: &Dataset, epoch: usize) -> Result<()> {
        let k = self.layout.k();
        if k == 1 {
            self.state.clusters = vec![0; train.len()];
            return Ok(());
        }
        let emb = normalized_embeddings(&self.model, train)?;
        let seed = derive_seed(self.config.seed, stream::CLUSTER, epoch as u64);
        let assignment = kmeans_best_of(&emb, self.model.embedding_dim(), k, seed, ROUTING_RESTARTS)?;
        self.state.clusters = assignment.assignment;
        Ok(())
    }

    fn groups(&self) -> Vec<Vec<usize>> {
        let k = self.layout.k();
        let mut g = vec![Vec::new(); k];
        for (i, &c) in self.state.clusters.iter().enumerate() {
            g[c.min(k - 1)].push(i);
        }
        g
    }

    fn scoring_subset(&self, train: &Dataset) -> Vec<SampleRecord> {
        let n = train.len();
        let m = self.config.scoring_samples.unwrap_or(n).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, stream::SCORING, 0));
        let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| train.samples[i].clone()).collect()
    }

    fn diverged(&mut self, epoch: usize, observer: &mut dyn TrainObserver<F, B>) -> Error {
        let detail = "non-finite loss".to_string();
        log::error!("epoch {epoch}: {detail}; writing a diagnostic checkpoint");
        if let Err(e) = observer.on_checkpoint("diverged", self) {
            log::error!("diagnostic checkpoint failed: {e}");
        }
        Error::Diverged { epoch, detail }
    }

    /// Trains one epoch and returns its history record.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset, observer: &mut dyn TrainObserver<F, B>) -> Result<EpochRecord> {
        self.check_data(train, val)?;
        let epoch = self.state.completed;
        let cfg = self.config.clone();
        let finetune = epoch >= cfg.finetune_start();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::EPOCH, epoch as u64));
        let labels = train.labels();
        let iterations = train.len().div_ceil(cfg.batch_size);
        let k_count = self.layout.k();
        let mut losses = vec![EpochLoss::default(); k_count];
        let mut event = None;
        let mut reclustered = false;

        if finetune {
            if epoch == cfg.finetune_start() {
                event = Some("finetune".to_string());
            }
            let all: Vec<usize> = (0..train.len()).collect();
            for _ in 0..iterations {
                let batch = build_batch(&labels, &all, cfg.batch_size, cfg.per_class, &mut rng)?;
                let l = self.step(train, &batch, 0, true, &mut rng)?;
                if !l.is_finite() {
                    return Err(self.diverged(epoch, observer));
                }
                losses[0].total += l;
                losses[0].count += 1;
            }
        } else {
            if should_recluster(epoch, cfg.t_c, self.state.recluster_flag) || self.state.clusters.len() != train.len() {
                self.recluster(train, epoch)?;
                reclustered = true;
                self.state.recluster_flag = false;
            }
            let groups = self.groups();
            for it in 0..iterations {
                let k = match cfg.schedule {
                    ClusterSchedule::RoundRobin => it % k_count,
                    ClusterSchedule::Uniform => rng.gen_range(0..k_count),
                };
                // An empty cluster falls back to the whole training set.
                let all;
                let group = if groups[k].is_empty() {
                    all = (0..train.len()).collect::<Vec<_>>();
                    &all
                } else {
                    &groups[k]
                };
                let batch = build_batch(&labels, group, cfg.batch_size, cfg.per_class, &mut rng)?;
                let l = self.step(train, &batch, k, false, &mut rng)?;
                if !l.is_finite() {
                    return Err(self.diverged(epoch, observer));
                }
                losses[k].total += l;
                losses[k].count += 1;
            }
        }

        let eval_seed = derive_seed(cfg.seed, stream::EVAL, 0);
        let report = evaluate_checkpoint(&self.model, &self.layout, val, eval_seed)?;
        let r1 = report.r_at(1);
        self.state.epoch = epoch;
        self.state.completed = epoch + 1;
        let improved = self.state.best_score.is_none_or(|b| r1 > b);
        if improved {
            self.state.best_score = Some(r1);
            self.state.best_epoch = epoch;
        }

        if !finetune && cfg.mode == TrainMode::Dynamic && detect_plateau(&self.state, cfg.t_p) {
            event = Some(self.try_split(train, epoch)?);
        }

        let count: usize = losses.iter().map(|l| l.count).sum();
        let record = EpochRecord {
            epoch,
            k: k_count,
            slice_sizes: self.layout.slice_sizes(),
            train_loss: losses.iter().map(|l| l.total).sum::<f64>() / count.max(1) as f64,
            learner_losses: losses
                .iter()
                .map(|l| (l.count > 0).then(|| l.total / l.count as f64))
                .collect(),
            val_nmi: report.nmi,
            val_r1: r1,
            event,
            reclustered,
        };
        // Layout changes from a split show up in the next record.
        if record.slice_sizes.iter().sum::<usize>() != cfg.embedding_dim {
            return Err(Error::Dimension("layout lost coordinates".into()));
        }
        self.state.history.push(record.clone());
        observer.on_epoch(&record)?;
        // Checkpoints carry the finished epoch so that resuming continues
        // with the next one.
        if improved {
            observer.on_checkpoint("best", self)?;
        }
        if record.event.as_deref() == Some("split") {
            observer.on_checkpoint("split", self)?;
        }
        Ok(record)
    }

    fn try_split(&mut self, train: &Dataset, epoch: usize) -> Result<String> {
        let cfg = &self.config;
        if self.state.splits_exhausted || self.layout.remainder().len() <= cfg.min_remainder {
            if !self.state.splits_exhausted {
                log::info!("epoch {epoch}: plateau but the remainder is at its minimum; no further learners");
                self.state.splits_exhausted = true;
            }
            return Ok("split-refused".into());
        }
        let subset = self.scoring_subset(train);
        let seed = derive_seed(cfg.seed, stream::SCORING, 1 + epoch as u64);
        let scores = score_neurons(&self.model, &self.layout, &subset, &cfg.margin, cfg.pair_policy, cfg.batch_size, seed)?;
        if scores.is_dead() {
            log::warn!("epoch {epoch}: all neuron scores are zero; no split possible");
            self.state.best_epoch = epoch;
            return Ok("split-refused".into());
        }
        let layout = split_learner(&scores, &self.layout, cfg.score_threshold, cfg.min_remainder)?;
        let reset_seed = derive_seed(cfg.seed, stream::RESET, layout.k() as u64);
        self.model.reset_remainder(&layout, reset_seed)?;
        log::info!("epoch {epoch}: new learner, slice sizes {:?}", layout.slice_sizes());
        self.layout = layout;
        self.state.k = self.layout.k();
        self.state.recluster_flag = true;
        // Patience restarts so the new learner gets t_p epochs.
        self.state.best_epoch = epoch;
        Ok("split".into())
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, train: &Dataset, val: &Dataset, observer: &mut dyn TrainObserver<F, B>) -> Result<()> {
        while self.state.completed < self.config.total_epochs {
            let r = self.run_epoch(train, val, observer)?;
            log::info!(
                "epoch {:>3} K={} loss={:.4} val NMI={:.4} R@1={:.4}{}",
                r.epoch,
                r.k,
                r.train_loss,
                r.val_nmi,
                r.val_r1,
                r.event.as_deref().map(|e| format!(" [{e}]")).unwrap_or_default()
            );
        }
        Ok(())
    }
}

/// Trains `model` from scratch under `config`.
pub fn train<F: Real, B: FeatureExtractor<F>>(
    config: &TrainerConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    model: EmbeddingModel<F, B>,
    observer: &mut dyn TrainObserver<F, B>,
) -> Result<(EmbeddingModel<F, B>, SubspaceLayout, TrainingState)> {
    let mut t = Trainer::new(config.clone(), model)?;
    t.run(train_data, val_data, observer)?;
    Ok((t.model, t.layout, t.state))
}

/// Fine-tunes the full normalized embedding on all of `data` with a fresh
/// optimizer. `layout` is only checked, never changed.
pub fn finetune_full<F: Real, B: FeatureExtractor<F>>(
    model: EmbeddingModel<F, B>,
    layout: &SubspaceLayout,
    data: &Dataset,
    epochs: usize,
    config: &TrainerConfig,
) -> Result<EmbeddingModel<F, B>> {
    if layout.dim() != model.embedding_dim() {
        return Err(Error::Dimension("layout does not match the embedding size".into()));
    }
    if epochs == 0 {
        return Ok(model);
    }
    let mut t = Trainer::new(config.clone(), model)?;
    t.layout = layout.clone();
    let labels = data.labels();
    let all: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::EPOCH, (config.finetune_start() + epoch) as u64));
        for _ in 0..data.len().div_ceil(config.batch_size) {
            let batch = build_batch(&labels, &all, config.batch_size, config.per_class, &mut rng)?;
            let l = t.step(data, &batch, 0, true, &mut rng)?;
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, detail: "non-finite loss during fine-tuning".into() });
            }
        }
    }
    Ok(t.model)
}
