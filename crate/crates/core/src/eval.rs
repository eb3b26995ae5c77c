//! Downstream classification, ablation sweeps and mask tracing.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiChannelImage;
use crate::error::{DamaError, Result};
use crate::loss::pixel_loss;
use crate::mask::{adaptive_mask, random_mask, Mask, MaskPair};
use crate::model::{linear, Bound, ParamStore, Vit};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::tensor::Graph;
use crate::train::{pretrain, BranchConfig, Coupling, MaskStrategy, Outputs, TrainConfig, TrainState};

/// Name prefix of the classifier parameters.
pub const HEAD: &str = "cls";

/// Images per forward pass when extracting features.
const FEATURE_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Frozen encoder, trained linear head.
    LinearProbe,
    /// Encoder and head trained together.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    /// Share of each fold's training split whose labels are used.
    pub fraction: f64,
    pub folds: usize,
    /// Defaults to 100 for probing and 10 for finetuning.
    pub epochs: Option<usize>,
    /// Defaults to 0.05 for probing and 1e-3 for finetuning.
    pub lr: Option<f64>,
    pub seed: u64,
    /// Finetuning minibatch size; probing trains full-batch.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    /// Share of the dataset used for training in every fold.
    pub train_share: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::LinearProbe,
            fraction: 1.0,
            folds: 10,
            epochs: None,
            lr: None,
            seed: 0,
            batch_size: 16,
            weight_decay: 0.05,
            warmup_epochs: 1.0,
            train_share: 0.6,
        }
    }
}

impl EvalConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            EvalMode::LinearProbe => 100,
            EvalMode::Finetune => 10,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.mode {
            EvalMode::LinearProbe => 0.05,
            EvalMode::Finetune => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DamaError::Config(m));
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("label fraction must lie in (0, 1], got {}", self.fraction));
        }
        if !(self.train_share > 0.0 && self.train_share < 1.0) {
            return bad(format!("train share must lie in (0, 1), got {}", self.train_share));
        }
        if self.folds == 0 || self.epochs() == 0 || self.batch_size == 0 {
            return bad("folds, epochs and batch_size must be positive".into());
        }
        if !(self.lr() > 0.0) || !(self.weight_decay >= 0.0) || !(self.warmup_epochs >= 0.0) {
            return bad("lr must be positive, weight decay and warmup non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub fraction: f64,
    /// Test accuracy of every fold, in fold order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single fold.
    pub std: f64,
}

impl EvalReport {
    pub fn from_accuracies(mode: EvalMode, fraction: f64, accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let std = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mode, fraction, accuracies, mean, std }
    }
}

/// Fresh classifier: zero weights and biases mapping `dim` features to
/// `classes` logits.
pub fn init_head(dim: usize, classes: usize) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert(format!("{HEAD}.w"), vec![dim, classes], vec![0.0; dim * classes]).expect("fresh store");
    s.insert(format!("{HEAD}.b"), vec![classes], vec![0.0; classes]).expect("fresh store");
    s
}

/// Class logits `[batch, classes]`: the encoder sees every patch, its
/// output tokens are mean-pooled and mapped linearly.
pub fn classify_head<T: crate::tensor::Element>(
    g: &mut Graph<T>,
    vit: &Vit,
    encoder: &Bound,
    head: &Bound,
    tokens: &[f32],
    batch: usize,
) -> Result<crate::tensor::Tensor> {
    let pooled = pooled(g, vit, encoder, tokens, batch)?;
    linear(g, head, HEAD, pooled)
}

fn pooled<T: crate::tensor::Element>(
    g: &mut Graph<T>,
    vit: &Vit,
    encoder: &Bound,
    tokens: &[f32],
    batch: usize,
) -> Result<crate::tensor::Tensor> {
    let n = vit.num_patches();
    let all: Vec<Vec<usize>> = vec![(0..n).collect(); batch];
    let enc = vit.encode(g, encoder, tokens, &all)?;
    let x = g.reshape(enc.output, &[batch, n, vit.config.dim])?;
    Ok(g.mean_over_axis(x, 1)?)
}

fn tokens_of(images: &[&MultiChannelImage], patch: usize) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for img in images {
        out.extend(crate::patch::patchify(img, patch)?.tokens);
    }
    Ok(out)
}

/// Mean-pooled encoder features of every image, `images.len() × dim`.
pub fn pooled_features(vit: &Vit, encoder: &ParamStore, images: &[&MultiChannelImage]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(images.len() * vit.config.dim);
    for chunk in images.chunks(FEATURE_CHUNK) {
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, encoder, false)?;
        let tokens = tokens_of(chunk, vit.geometry.patch)?;
        let f = pooled(&mut g, vit, &p, &tokens, chunk.len())?;
        out.extend_from_slice(g.value(f));
    }
    Ok(out)
}

fn labels_of(data: &[MultiChannelImage]) -> Result<(Vec<usize>, usize)> {
    let labels = data
        .iter()
        .map(|i| i.label.map(|l| l as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| DamaError::Config("evaluation needs a labeled dataset".into()))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok((labels, classes))
}

/// Train and test indices of one fold, stratified by class: each class
/// puts `round(train_share · count)` of its shuffled members (at least one,
/// and at least one fewer than all when it has two or more) into training.
/// Training indices are the labeled subset, the first
/// `ceil(fraction · k)` of each class's `k` training members.
pub fn fold_split(labels: &[usize], classes: usize, cfg: &EvalConfig, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if (cfg.fraction * (n as f64 * cfg.train_share)).floor() < classes as f64 {
        return Err(DamaError::Config(format!(
            "label fraction {} of {n} images cannot cover {classes} classes",
            cfg.fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(fold as u64);
    order.shuffle(&mut rng);
    let mut per_class = vec![Vec::new(); classes];
    for &i in &order {
        per_class[labels[i]].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, members) in per_class.iter().enumerate() {
        let m = members.len();
        if m == 0 {
            return Err(DamaError::Config(format!("class {class} has no images")));
        }
        let k = ((m as f64 * cfg.train_share).round() as usize).clamp(1, m.saturating_sub(1).max(1));
        let labeled = ((k as f64 * cfg.fraction).ceil() as usize).min(k);
        train.extend_from_slice(&members[..labeled]);
        test.extend_from_slice(&members[k..]);
    }
    if test.is_empty() {
        return Err(DamaError::Config(format!("fold {fold} leaves no test images")));
    }
    let mut rank = vec![0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    train.sort_unstable_by_key(|&i| rank[i]);
    test.sort_unstable_by_key(|&i| rank[i]);
    Ok((train, test))
}

fn accuracy(logits: &[f32], classes: usize, labels: &[usize]) -> f64 {
    let correct = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best =
                row.iter().enumerate().fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            best.0 == y
        })
        .count();
    correct as f64 / labels.len() as f64
}

fn grads_of(g: &Graph<f32>, p: &Bound) -> HashMap<String, Vec<f32>> {
    p.iter().filter_map(|(n, &t)| g.grad(t).map(|gr| (n.clone(), gr.to_vec()))).collect()
}

/// One cross-validation fold over a labeled dataset.
struct Fold<'a> {
    index: usize,
    labels: &'a [usize],
    classes: usize,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Per-fold accuracy of a linear probe on frozen, standardized features.
fn probe_fold(features: &[f32], dim: usize, fold: &Fold, cfg: &EvalConfig) -> Result<f64> {
    let Fold { labels, classes, train, test, .. } = fold;
    let classes = *classes;
    let rows =
        |idx: &[usize]| -> Vec<f32> { idx.iter().flat_map(|&i| features[i * dim..(i + 1) * dim].to_vec()).collect() };
    let (mut xtr, mut xte) = (rows(train), rows(test));
    // standardize with training statistics
    for j in 0..dim {
        let col: Vec<f64> = xtr.iter().skip(j).step_by(dim).map(|&v| v as f64).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for x in [&mut xtr, &mut xte] {
            x.iter_mut().skip(j).step_by(dim).for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
        }
    }
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let mut head = init_head(dim, classes);
    let mut adam = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
    for _ in 0..cfg.epochs() {
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &head, true)?;
        let x = g.constant(xtr.clone(), &[train.len(), dim])?;
        let logits = linear(&mut g, &p, HEAD, x)?;
        let loss = g.cross_entropy(logits, &ytr)?;
        g.backward(loss)?;
        adam.begin_step();
        adam.update(HEAD, &mut head, &grads_of(&g, &p), cfg.lr())?;
    }
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, &head, false)?;
    let x = g.constant(xte, &[test.len(), dim])?;
    let logits = linear(&mut g, &p, HEAD, x)?;
    Ok(accuracy(g.value(logits), classes, &yte))
}

fn finetune_fold(
    vit: &Vit,
    encoder: &ParamStore,
    data: &[MultiChannelImage],
    fold: &Fold,
    cfg: &EvalConfig,
) -> Result<f64> {
    let Fold { index, labels, classes, train, test } = fold;
    let classes = *classes;
    let mut enc = encoder.clone();
    let mut head = init_head(vit.config.dim, classes);
    let mut adam = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let spe = train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule {
        base: cfg.lr(),
        min: 0.0,
        warmup_steps: (cfg.warmup_epochs * spe as f64).round() as u64,
        total_steps: spe * cfg.epochs() as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((1 << 32) + *index as u64);
    let mut order = train.to_vec();
    let mut step = 0;
    for _ in 0..cfg.epochs() {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&MultiChannelImage> = chunk.iter().map(|&i| &data[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let pe = Bound::new(&mut g, &enc, true)?;
            let ph = Bound::new(&mut g, &head, true)?;
            let tokens = tokens_of(&images, vit.geometry.patch)?;
            let logits = classify_head(&mut g, vit, &pe, &ph, &tokens, images.len())?;
            let loss = g.cross_entropy(logits, &y)?;
            let value = g.scalar(loss)? as f64;
            if !value.is_finite() {
                return Err(DamaError::Numeric { step, what: "finetune loss".into() });
            }
            g.backward(loss)?;
            let lr = schedule.lr_at(step);
            adam.begin_step();
            adam.update("encoder", &mut enc, &grads_of(&g, &pe), lr)?;
            adam.update(HEAD, &mut head, &grads_of(&g, &ph), lr)?;
            step += 1;
        }
    }
    let mut logits = Vec::with_capacity(test.len() * classes);
    for chunk in test.chunks(FEATURE_CHUNK) {
        let images: Vec<&MultiChannelImage> = chunk.iter().map(|&i| &data[i]).collect();
        let mut g = Graph::<f32>::new();
        let pe = Bound::new(&mut g, &enc, false)?;
        let ph = Bound::new(&mut g, &head, false)?;
        let tokens = tokens_of(&images, vit.geometry.patch)?;
        let l = classify_head(&mut g, vit, &pe, &ph, &tokens, images.len())?;
        logits.extend_from_slice(g.value(l));
    }
    let y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    Ok(accuracy(&logits, classes, &y))
}

/// Fold-averaged classification accuracy of `encoder` on `data`. The
/// encoder store is never modified.
pub fn evaluate(vit: &Vit, encoder: &ParamStore, data: &[MultiChannelImage], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let (labels, classes) = labels_of(data)?;
    let features = match cfg.mode {
        EvalMode::LinearProbe => Some(pooled_features(vit, encoder, &data.iter().collect::<Vec<_>>())?),
        EvalMode::Finetune => None,
    };
    let mut accuracies = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let (train, test) = fold_split(&labels, classes, cfg, fold)?;
        let fold = Fold { index: fold, labels: &labels, classes, train, test };
        let acc = match &features {
            Some(f) => probe_fold(f, vit.config.dim, &fold, cfg)?,
            None => finetune_fold(vit, encoder, data, &fold, cfg)?,
        };
        accuracies.push(acc);
    }
    Ok(EvalReport::from_accuracies(cfg.mode, cfg.fraction, accuracies))
}

/// A grid of pretraining variants, each pretrained and then evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    /// Settings shared by every cell.
    pub base: TrainConfig,
    pub strategies: Vec<MaskStrategy>,
    pub ratios: Vec<f64>,
    pub couplings: Vec<Coupling>,
    pub seeds: Vec<u64>,
    pub eval: EvalConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            strategies: MaskStrategy::ALL.to_vec(),
            ratios: vec![0.6, 0.7, 0.8, 0.9],
            couplings: Coupling::ALL.to_vec(),
            seeds: vec![0],
            eval: EvalConfig::default(),
        }
    }
}

impl AblationGrid {
    /// Every cell in row-major order (strategy, ratio, coupling, seed).
    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &mask_strategy in &self.strategies {
            for &mask_ratio in &self.ratios {
                for &coupling in &self.couplings {
                    for &seed in &self.seeds {
                        let mut c = self.base.clone();
                        c.branch = BranchConfig { coupling, mask_strategy, mask_ratio, ..self.base.branch.clone() };
                        c.seed = seed;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub coupling: Coupling,
    pub seed: u64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Cells that were not run, with the reason.
    pub skipped: Vec<(String, String)>,
}

pub const ABLATION_HEADER: &str = "strategy,mask_ratio,coupling,seed,accuracy_mean,accuracy_std,final_L_total";

impl Ablation {
    pub fn csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.strategy.name(),
                r.mask_ratio,
                r.coupling.name(),
                r.seed,
                r.accuracy_mean,
                r.accuracy_std,
                r.final_loss
            );
        }
        out
    }
}

fn cell_name(c: &TrainConfig) -> String {
    format!("{}/{}/{}/seed {}", c.branch.mask_strategy.name(), c.branch.mask_ratio, c.branch.coupling.name(), c.seed)
}

/// Pretrain and evaluate every valid cell. Invalid cells are skipped and
/// reported through `log` and [`Ablation::skipped`].
pub fn ablate(grid: &AblationGrid, data: &[MultiChannelImage], mut log: impl FnMut(&str)) -> Result<Ablation> {
    let mut out = Ablation::default();
    for cell in grid.cells() {
        let name = cell_name(&cell);
        if let Err(e) = cell.validate() {
            log(&format!("skipping {name}: {e}"));
            out.skipped.push((name, e.to_string()));
            continue;
        }
        log(&format!("running {name}"));
        let state = pretrain(&cell, data, &Outputs::default())?;
        let report = evaluate(&state.vit, &state.branch1, data, &grid.eval)?;
        let tail = (state.metrics.len() / 10).max(1);
        let final_loss = state.metrics[state.metrics.len() - tail..].iter().map(|r| r.total).sum::<f64>() / tail as f64;
        out.rows.push(AblationRow {
            strategy: cell.branch.mask_strategy,
            mask_ratio: cell.branch.mask_ratio,
            coupling: cell.branch.coupling,
            seed: cell.seed,
            accuracy_mean: report.mean,
            accuracy_std: report.std,
            final_loss,
        });
    }
    Ok(out)
}

/// One patch of one traced step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub image: usize,
    pub patch: usize,
    pub m1: u8,
    pub loss: f32,
    pub m2: u8,
}

pub const TRACE_HEADER: &str = "step,image,patch,m1,loss,m2";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.image, r.patch, r.m1, r.loss, r.m2);
    }
    out
}

/// Run branch 1 of a trained state on fresh random masks and derive the
/// loss-guided second mask each time. Image `step % len` is used at each
/// step. Every pair is checked against the mask invariants.
pub fn mask_trace(
    state: &TrainState,
    data: &[MultiChannelImage],
    steps: usize,
    seed: u64,
) -> Result<(Vec<MaskPair>, Vec<TraceRow>)> {
    if data.is_empty() {
        return Err(DamaError::Config("mask trace needs at least one image".into()));
    }
    let c = &state.config;
    let n = state.vit.num_patches();
    let overlap = c.branch.effective_overlap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(steps);
    let mut rows = Vec::with_capacity(steps * n);
    for step in 0..steps {
        let image = step % data.len();
        let grid = crate::patch::patchify(&data[image], c.patch_size)?;
        let targets = crate::patch::patch_targets(&grid, c.normalize_targets);
        let m1 = random_mask(n, c.branch.mask_ratio, &mut rng)?;
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &state.branch1, false)?;
        let enc = state.vit.encode(&mut g, &p, &grid.tokens, &[m1.visible()])?;
        let dec = state.vit.decode(&mut g, &p, &enc)?;
        let loss = pixel_loss(&mut g, dec.pixels, &targets, std::slice::from_ref(&m1))?.per_patch;
        let m2 = adaptive_mask(&m1, &loss, c.branch.mask_ratio, overlap)?;
        let pair = MaskPair { m1, m2, patch_losses: loss, overlap_ratio: overlap };
        pair.validate(c.branch.mask_ratio, true)?;
        for patch in 0..n {
            rows.push(TraceRow {
                step,
                image,
                patch,
                m1: pair.m1.bits()[patch],
                loss: pair.patch_losses[patch],
                m2: pair.m2.bits()[patch],
            });
        }
        pairs.push(pair);
    }
    Ok((pairs, rows))
}

/// Masks of `rows` regrouped per step, for checking traces read back from
/// disk.
pub fn trace_masks(rows: &[TraceRow]) -> Result<Vec<(Mask, Mask)>> {
    let mut by_step: BTreeMap<usize, (Vec<u8>, Vec<u8>)> = BTreeMap::new();
    for r in rows {
        let e = by_step.entry(r.step).or_default();
        e.0.push(r.m1);
        e.1.push(r.m2);
    }
    by_step.into_values().map(|(a, b)| Ok((Mask::from_bits(a)?, Mask::from_bits(b)?))).collect()
}
