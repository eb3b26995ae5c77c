//! Dual-branch pretraining: configuration, the training step, the epoch
//! loop and metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, ChannelStats, MultiChannelImage};
use crate::error::{DamaError, Result};
use crate::loss::{combine, pixel_loss, smooth_l1, total_loss, LossReport};
use crate::mask::{adaptive_mask, random_mask, random_overlap_mask, AdaptiveCounts, Mask, MaskPair};
use crate::model::{feature_target, Bound, Geometry, ModelConfig, ParamStore, Vit};
use crate::optim::{lambda_at, Adam, AdamConfig, LrSchedule};
use crate::patch::{patch_targets, patchify};
use crate::tensor::Graph;

pub use crate::checkpoint::{load_checkpoint, save_checkpoint};

/// How branch 2's parameters relate to branch 1's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Branch 2 is an EMA copy of branch 1 and receives no gradients.
    StudentEma,
    /// Both branches use one parameter set.
    SharedWeights,
    /// Two independently trained parameter sets.
    TwoStudents,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RandomOverlap,
    AdaptiveNoOverlap,
    AdaptiveOverlap,
}

impl Coupling {
    pub const ALL: [Coupling; 3] = [Coupling::StudentEma, Coupling::SharedWeights, Coupling::TwoStudents];

    pub fn name(self) -> &'static str {
        match self {
            Coupling::StudentEma => "student_ema",
            Coupling::SharedWeights => "shared_weights",
            Coupling::TwoStudents => "two_students",
        }
    }
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] =
        [MaskStrategy::RandomOverlap, MaskStrategy::AdaptiveNoOverlap, MaskStrategy::AdaptiveOverlap];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::RandomOverlap => "random_overlap",
            MaskStrategy::AdaptiveNoOverlap => "adaptive_no_overlap",
            MaskStrategy::AdaptiveOverlap => "adaptive_overlap",
        }
    }
}

/// Branch coupling, mask strategy and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchConfig {
    pub coupling: Coupling,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub overlap_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_blocks: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            coupling: Coupling::TwoStudents,
            mask_strategy: MaskStrategy::AdaptiveOverlap,
            mask_ratio: 0.8,
            overlap_ratio: 0.5,
            alpha: 1.0,
            beta: 2.0,
            k_blocks: 6,
        }
    }
}

impl BranchConfig {
    /// Overlap actually used when building the second mask.
    pub fn effective_overlap(&self) -> f64 {
        match self.mask_strategy {
            MaskStrategy::AdaptiveNoOverlap => 0.0,
            _ => self.overlap_ratio,
        }
    }

    /// Check against a model of `depth` blocks over `patches` patches.
    pub fn validate(&self, depth: usize, patches: usize) -> Result<()> {
        // every strategy derives m2 by the same exchange, which needs
        // at least as many masked patches as visible ones
        let counts = AdaptiveCounts::new(patches, self.mask_ratio, self.overlap_ratio)?;
        if counts.keep == 0 {
            return Err(DamaError::Config(format!(
                "mask ratio {} leaves no visible patch out of {patches}",
                self.mask_ratio
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(DamaError::Config(format!("alpha must be a non-negative number, got {}", self.alpha)));
        }
        if !(self.beta > 0.0) {
            return Err(DamaError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.k_blocks == 0 || self.k_blocks > depth {
            return Err(DamaError::Config(format!("k_blocks must lie in 1..={depth}, got {}", self.k_blocks)));
        }
        Ok(())
    }
}

/// Full pretraining configuration, read from JSON. Missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub branch: BranchConfig,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub model: ModelConfig,
    /// Random flips, quarter turns, shifts and scaling of every sample.
    pub augment: bool,
    pub max_shift: i32,
    /// Standardize each target patch before the pixel loss.
    pub normalize_targets: bool,
    /// Checkpoint interval in epochs; 0 saves only at the end.
    pub save_every: usize,
    /// Standardize input channels with statistics of the training set.
    pub normalize_inputs: bool,
    /// Channel statistics used for input standardization. Filled in by
    /// [`pretrain`] when `normalize_inputs` is set and this is empty.
    pub input_stats: Option<ChannelStats>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            branch: BranchConfig::default(),
            lr: 1.5e-4,
            min_lr: 0.0,
            weight_decay: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            warmup_epochs: 1.0,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            image_size: 64,
            patch_size: 8,
            channels: 7,
            model: ModelConfig::default(),
            augment: true,
            max_shift: 4,
            normalize_targets: false,
            save_every: 0,
            normalize_inputs: false,
            input_stats: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DamaError::Config(format!("bad config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DamaError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let geometry = self.geometry()?;
        self.branch.validate(self.model.depth, geometry.num_patches())?;
        let bad = |m: String| Err(DamaError::Config(m));
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.lr {
            return bad(format!("need 0 <= min_lr <= lr and lr > 0, got {} and {}", self.min_lr, self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("Adam betas must lie in [0, 1), got {b}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0) || self.warmup_epochs > self.epochs as f64 {
            return bad(format!("warmup of {} epochs does not fit in {}", self.warmup_epochs, self.epochs));
        }
        if self.max_shift < 0 {
            return bad("max_shift must be non-negative".into());
        }
        Ok(())
    }

    /// Measure input statistics on `data` if they are wanted but missing.
    pub fn resolve_input_stats(&mut self, data: &[MultiChannelImage]) -> Result<()> {
        if self.normalize_inputs && self.input_stats.is_none() {
            self.input_stats = Some(ChannelStats::measure(data)?);
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.image_size, self.patch_size, self.channels)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        dataset_len.div_ceil(self.batch_size) as u64
    }

    pub fn plan(&self, dataset_len: usize) -> Plan {
        let spe = self.steps_per_epoch(dataset_len);
        Plan {
            steps_per_epoch: spe,
            schedule: LrSchedule {
                base: self.lr,
                min: self.min_lr,
                warmup_steps: (self.warmup_epochs * spe as f64).round() as u64,
                total_steps: spe * self.epochs as u64,
            },
        }
    }
}

/// Step layout of a run over a particular dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    pub steps_per_epoch: u64,
    pub schedule: LrSchedule,
}

impl Plan {
    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }
}

/// Branch 2's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Partner {
    /// Branch 2 runs on branch 1's parameters.
    Shared,
    /// EMA teacher.
    Teacher(ParamStore),
    /// Second student with its own optimizer moments.
    Student(ParamStore),
}

/// One row of the per-step metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub lambda: f64,
    pub pixel_1: f64,
    pub pixel_2: f64,
    pub feature: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,lr,lambda,L_p1,L_p2,L_f,L_total";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.lr, self.lambda, self.pixel_1, self.pixel_2, self.feature, self.total
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Patch tokens and pixel targets for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub tokens: Vec<f32>,
    pub targets: Vec<f32>,
}

impl Batch {
    pub fn from_images(images: &[MultiChannelImage], patch: usize, normalize: bool) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut targets = Vec::new();
        for img in images {
            let grid = patchify(img, patch)?;
            targets.extend(patch_targets(&grid, normalize));
            tokens.extend(grid.tokens);
        }
        Ok(Self { size: images.len(), tokens, targets })
    }
}

/// Everything a training step produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub pairs: Vec<MaskPair>,
}

/// Complete trainer state. The metrics buffer is not persisted by
/// checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vit: Vit,
    pub branch1: ParamStore,
    pub partner: Partner,
    pub adam: Adam,
    /// Completed steps.
    pub step: u64,
    /// Source of the per-sample masks.
    pub rng: ChaCha8Rng,
    pub metrics: Vec<MetricsRow>,
}

const STREAM_MASKS: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 40;
const STREAM_AUGMENT: u64 = 2 << 40;

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let vit = Vit::new(config.model.clone(), config.geometry()?)?.with_input_norm(config.input_stats.clone())?;
        let mut init_rng = derived_rng(config.seed, 0);
        let branch1 = vit.init(&mut init_rng);
        let partner = match config.branch.coupling {
            Coupling::SharedWeights => Partner::Shared,
            Coupling::StudentEma => Partner::Teacher(branch1.clone()),
            Coupling::TwoStudents => Partner::Student(vit.init(&mut init_rng)),
        };
        Ok(Self {
            adam: Adam::new(config.adam()),
            rng: derived_rng(config.seed, STREAM_MASKS),
            vit,
            branch1,
            partner,
            step: 0,
            metrics: Vec::new(),
            config,
        })
    }

    /// Parameters branch 2 runs on.
    pub fn branch2(&self) -> &ParamStore {
        match &self.partner {
            Partner::Shared => &self.branch1,
            Partner::Teacher(p) | Partner::Student(p) => p,
        }
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.config.plan(dataset_len).total_steps()
    }

    /// Dataset order for `epoch`, fixed by the seed.
    pub fn epoch_order(&self, dataset_len: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut derived_rng(self.config.seed, STREAM_SHUFFLE + epoch));
        order
    }

    /// The batch that step `step` trains on. Depends only on the config,
    /// the dataset and `step`.
    pub fn batch_for_step(&self, data: &[MultiChannelImage], step: u64) -> Result<Batch> {
        let spe = self.config.steps_per_epoch(data.len());
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let order = self.epoch_order(data.len(), epoch);
        let bs = self.config.batch_size;
        let picked = &order[pos * bs..((pos + 1) * bs).min(data.len())];
        let images: Vec<MultiChannelImage> = picked
            .iter()
            .map(|&i| {
                if self.config.augment {
                    let stream = STREAM_AUGMENT + epoch * data.len() as u64 + i as u64;
                    augment(&data[i], &mut derived_rng(self.config.seed, stream), self.config.max_shift)
                } else {
                    data[i].clone()
                }
            })
            .collect();
        Batch::from_images(&images, self.config.patch_size, self.config.normalize_targets)
    }

    fn check_data(&self, data: &[MultiChannelImage]) -> Result<()> {
        if data.is_empty() {
            return Err(DamaError::Config("training needs a nonempty dataset".into()));
        }
        let c = &self.config;
        if let Some(img) =
            data.iter().find(|i| i.height != c.image_size || i.width != c.image_size || i.channels != c.channels)
        {
            return Err(DamaError::Shape(format!(
                "dataset image is {}x{}x{}, config expects {}x{}x{}",
                img.height, img.width, img.channels, c.image_size, c.image_size, c.channels
            )));
        }
        Ok(())
    }

    /// One optimization step on `batch` at position `self.step` of `plan`.
    pub fn train_step(&mut self, batch: &Batch, plan: &Plan) -> Result<StepOutput> {
        if batch.size == 0 {
            return Err(DamaError::Contract("empty batch".into()));
        }
        let step = self.step;
        let bc = self.config.branch.clone();
        let n = self.vit.num_patches();
        let overlap = bc.effective_overlap();

        let mut m1s = Vec::with_capacity(batch.size);
        for _ in 0..batch.size {
            m1s.push(random_mask(n, bc.mask_ratio, &mut self.rng)?);
        }
        let vis1: Vec<Vec<usize>> = m1s.iter().map(Mask::visible).collect();

        let mut g = Graph::<f32>::new();
        let p1 = Bound::new(&mut g, &self.branch1, true)?;
        let enc1 = self.vit.encode(&mut g, &p1, &batch.tokens, &vis1)?;
        let dec1 = self.vit.decode(&mut g, &p1, &enc1)?;
        let pix1 = pixel_loss(&mut g, dec1.pixels, &batch.targets, &m1s)?;

        let mut pairs = Vec::with_capacity(batch.size);
        for (b, m1) in m1s.iter().enumerate() {
            let losses = pix1.per_patch[b * n..(b + 1) * n].to_vec();
            let m2 = match bc.mask_strategy {
                MaskStrategy::RandomOverlap => random_overlap_mask(m1, bc.mask_ratio, overlap, &mut self.rng)?,
                _ => adaptive_mask(m1, &losses, bc.mask_ratio, overlap)?,
            };
            pairs.push(MaskPair { m1: m1.clone(), m2, patch_losses: losses, overlap_ratio: overlap });
        }
        let m2s: Vec<Mask> = pairs.iter().map(|p| p.m2.clone()).collect();
        let vis2: Vec<Vec<usize>> = m2s.iter().map(Mask::visible).collect();

        let p2 = match &self.partner {
            Partner::Shared => None,
            Partner::Teacher(t) => Some(Bound::new(&mut g, t, false)?),
            Partner::Student(s) => Some(Bound::new(&mut g, s, true)?),
        };
        let p2_ref = p2.as_ref().unwrap_or(&p1);
        let enc2 = self.vit.encode(&mut g, p2_ref, &batch.tokens, &vis2)?;
        let dec2 = self.vit.decode(&mut g, p2_ref, &enc2)?;
        let pix2 = pixel_loss(&mut g, dec2.pixels, &batch.targets, &m2s)?;

        let block_values: Vec<&[f32]> = enc2.blocks.iter().map(|&t| g.value(t)).collect();
        let target = feature_target(&block_values, self.config.model.dim, bc.k_blocks)?;
        let pred = self.vit.feature_predict(&mut g, &p1, &dec1, &vis2)?;
        let lf = smooth_l1(&mut g, pred, &target, bc.beta)?;
        let total = total_loss(&mut g, pix1.scalar, pix2.scalar, lf, bc.alpha)?;

        let value = |g: &Graph<f32>, t| g.scalar(t).map(|v| v as f64);
        let (l1, l2, lfv) = (value(&g, pix1.scalar)?, value(&g, pix2.scalar)?, value(&g, lf)?);
        combine(l1, l2, lfv, bc.alpha, step)?;
        let tv = value(&g, total)?;
        if !tv.is_finite() {
            return Err(DamaError::Numeric { step, what: "L_total".into() });
        }
        g.backward(total)?;

        let grads1 = collect_grads(&g, &p1);
        let grads2 = p2.as_ref().map(|p| collect_grads(&g, p));
        for (name, grad) in grads1.iter().chain(grads2.iter().flatten()) {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(DamaError::Numeric { step, what: format!("gradient of {name}") });
            }
        }

        let lr = plan.schedule.lr_at(step);
        let lambda = lambda_at(step, plan.total_steps());
        self.adam.begin_step();
        self.adam.update("branch1", &mut self.branch1, &grads1, lr)?;
        match &mut self.partner {
            Partner::Shared => {}
            Partner::Student(s) => {
                self.adam.update("branch2", s, grads2.as_ref().expect("student handles"), lr)?;
            }
            Partner::Teacher(t) => {
                if grads2.as_ref().is_some_and(|g| !g.is_empty()) {
                    return Err(DamaError::Contract("teacher parameters received gradients".into()));
                }
                t.ema_update(&self.branch1, lambda)?;
            }
        }

        self.metrics.push(MetricsRow {
            step,
            epoch: step / plan.steps_per_epoch,
            lr,
            lambda,
            pixel_1: l1,
            pixel_2: l2,
            feature: lfv,
            total: tv,
        });
        self.step += 1;
        Ok(StepOutput {
            report: LossReport { pixel_1: l1, pixel_2: l2, feature: lfv, total: tv, patch_losses_1: pix1.per_patch },
            pairs,
        })
    }

    /// Train until `until` steps are complete (capped at the configured
    /// total), calling `on_step` after each one.
    pub fn run<F>(&mut self, data: &[MultiChannelImage], until: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&TrainState) -> Result<()>,
    {
        self.check_data(data)?;
        let plan = self.config.plan(data.len());
        let until = until.min(plan.total_steps());
        while self.step < until {
            let batch = self.batch_for_step(data, self.step)?;
            self.train_step(&batch, &plan)?;
            on_step(self)?;
        }
        Ok(())
    }
}

/// Gradients of every trainable handle in `p`, by parameter name.
fn collect_grads(g: &Graph<f32>, p: &Bound) -> HashMap<String, Vec<f32>> {
    p.iter().filter_map(|(name, &t)| g.grad(t).map(|gr| (name.clone(), gr.to_vec()))).collect()
}

/// Where `pretrain` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct Outputs {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// Train from scratch for the configured number of epochs.
///
/// Metrics are appended to `out.metrics` as steps complete. The checkpoint
/// is written every `save_every` epochs (if set) and at the end.
pub fn pretrain(config: &TrainConfig, data: &[MultiChannelImage], out: &Outputs) -> Result<TrainState> {
    let mut config = config.clone();
    config.resolve_input_stats(data)?;
    let mut state = TrainState::new(config)?;
    resume(&mut state, data, out)?;
    Ok(state)
}

/// Continue `state` to the end of its schedule, writing artifacts like
/// [`pretrain`]. An existing metrics file is appended to.
pub fn resume(state: &mut TrainState, data: &[MultiChannelImage], out: &Outputs) -> Result<()> {
    use std::io::Write;
    state.check_data(data)?;
    let mut metrics = match &out.metrics {
        Some(path) => {
            let fresh = state.step == 0 || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)
                .map_err(|e| DamaError::io(path, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| DamaError::io(path, e))?;
            }
            Some((path.clone(), std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let spe = state.config.steps_per_epoch(data.len());
    let every = state.config.save_every as u64 * spe;
    let total = state.total_steps(data.len());
    state.run(data, total, |s| {
        if let Some((path, f)) = metrics.as_mut() {
            let row = s.metrics.last().expect("row per step");
            writeln!(f, "{}", row.csv_line()).map_err(|e| DamaError::io(path.as_path(), e))?;
        }
        if let Some(ck) = &out.checkpoint {
            if every > 0 && s.step % every == 0 && s.step < total {
                save_checkpoint(s, ck)?;
            }
        }
        Ok(())
    })?;
    if let Some((path, mut f)) = metrics {
        f.flush().map_err(|e| DamaError::io(path, e))?;
    }
    if let Some(ck) = &out.checkpoint {
        save_checkpoint(state, ck)?;
    }
    Ok(())
}
