//! Shared test oracles.
#![allow(dead_code)]

use dama::tensor::{Element, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A scalar function of some input tensors, buildable at any precision.
pub trait Probe {
    fn inputs(&self) -> Vec<(Vec<f64>, Vec<usize>)>;
    fn loss<T: Element>(&self, g: &mut Graph<T>, xs: &[Tensor]) -> Tensor;
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst_rel: f64,
    pub worst_at: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.worst_rel < tol
    }
}

pub fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn eval_f64<P: Probe>(probe: &P, inputs: &[(Vec<f64>, Vec<usize>)]) -> f64 {
    let mut g = Graph::<f64>::new();
    let xs: Vec<Tensor> = inputs.iter().map(|(d, s)| g.param(d.clone(), s).unwrap()).collect();
    let l = probe.loss(&mut g, &xs);
    g.scalar(l).unwrap()
}

/// Compare the f32 reverse-mode gradient against f64 central differences at
/// `coords` randomly chosen input coordinates. Coordinates whose analytic
/// gradient is below 1e-6 in magnitude are skipped.
pub fn grad_check<P: Probe>(probe: &P, coords: usize, seed: u64) -> GradCheck {
    let mut inputs = probe.inputs();
    // evaluate both routes at the same f32-representable point
    for (d, _) in inputs.iter_mut() {
        d.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }

    let mut g = Graph::<f32>::new();
    let xs: Vec<Tensor> =
        inputs.iter().map(|(d, s)| g.param(d.iter().map(|&v| v as f32).collect(), s).unwrap()).collect();
    let l = probe.loss(&mut g, &xs);
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f32>> = xs
        .iter()
        .zip(&inputs)
        .map(|(&x, (d, _))| g.grad(x).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = inputs.iter().map(|(d, _)| d.len()).sum();
    let mut report = GradCheck { checked: 0, skipped: 0, worst_rel: 0.0, worst_at: None };
    let mut attempts = 0;
    while report.checked < coords && attempts < coords * 50 {
        attempts += 1;
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].0.len() {
            flat -= inputs[which].0.len();
            which += 1;
        }
        let a = analytic[which][flat] as f64;
        if a.abs() < 1e-6 {
            report.skipped += 1;
            continue;
        }
        let x0 = inputs[which].0[flat];
        let h = 1e-5 * x0.abs().max(1.0);
        inputs[which].0[flat] = x0 + h;
        let up = eval_f64(probe, &inputs);
        inputs[which].0[flat] = x0 - h;
        let down = eval_f64(probe, &inputs);
        inputs[which].0[flat] = x0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        if rel > report.worst_rel {
            report.worst_rel = rel;
            report.worst_at = Some((which, flat, a, numeric));
        }
        report.checked += 1;
    }
    report
}

/// Reduce any tensor to a scalar through fixed pseudo-random weights so
/// that every output coordinate carries a distinct upstream gradient.
pub fn weighted_sum<T: Element>(g: &mut Graph<T>, t: Tensor, seed: u64) -> Tensor {
    let n = g.value(t).len();
    let shape = g.shape(t).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<T> = normal_vec(n, &mut rng).into_iter().map(T::from_f64).collect();
    let w = g.constant(w, &shape).unwrap();
    let p = g.mul(t, w).unwrap();
    g.sum(p)
}

/// One differentiable op applied to N(0,1) inputs.
#[derive(Debug, Clone, Copy)]
pub enum OpCase {
    MatMul,
    MatMulBatched,
    Bmm,
    BmmTransposed,
    Add,
    AddBroadcast,
    Sub,
    Mul,
    MulSelf,
    Scale,
    Gelu,
    Softmax,
    LayerNorm,
    Permute,
    Transpose,
    Reshape,
    GatherRows,
    Concat,
    MeanOverAxis,
    Sum,
    Mean,
    SmoothL1,
    CrossEntropy,
}

impl OpCase {
    pub const ALL: [OpCase; 23] = [
        OpCase::MatMul,
        OpCase::MatMulBatched,
        OpCase::Bmm,
        OpCase::BmmTransposed,
        OpCase::Add,
        OpCase::AddBroadcast,
        OpCase::Sub,
        OpCase::Mul,
        OpCase::MulSelf,
        OpCase::Scale,
        OpCase::Gelu,
        OpCase::Softmax,
        OpCase::LayerNorm,
        OpCase::Permute,
        OpCase::Transpose,
        OpCase::Reshape,
        OpCase::GatherRows,
        OpCase::Concat,
        OpCase::MeanOverAxis,
        OpCase::Sum,
        OpCase::Mean,
        OpCase::SmoothL1,
        OpCase::CrossEntropy,
    ];

    fn shapes(self) -> Vec<Vec<usize>> {
        use OpCase::*;
        match self {
            MatMul => vec![vec![3, 4], vec![4, 5]],
            MatMulBatched => vec![vec![2, 3, 4], vec![4, 2]],
            Bmm => vec![vec![2, 3, 4], vec![2, 4, 5]],
            BmmTransposed => vec![vec![2, 3, 4], vec![2, 5, 4]],
            Add | Sub | Mul => vec![vec![3, 4], vec![3, 4]],
            AddBroadcast => vec![vec![2, 3, 4], vec![4]],
            LayerNorm => vec![vec![3, 6], vec![6], vec![6]],
            Concat => vec![vec![2, 3, 4], vec![2, 1, 4], vec![2, 2, 4]],
            Permute => vec![vec![2, 3, 4, 2]],
            _ => vec![vec![3, 4]],
        }
    }
}

impl Probe for OpCase {
    fn inputs(&self) -> Vec<(Vec<f64>, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(*self as u64 + 100);
        self.shapes().into_iter().map(|s| (normal_vec(s.iter().product(), &mut rng), s)).collect()
    }

    fn loss<T: Element>(&self, g: &mut Graph<T>, x: &[Tensor]) -> Tensor {
        use OpCase::*;
        let out = match self {
            MatMul | MatMulBatched => g.matmul(x[0], x[1]).unwrap(),
            Bmm => g.bmm(x[0], x[1], false).unwrap(),
            BmmTransposed => g.bmm(x[0], x[1], true).unwrap(),
            Add | AddBroadcast => g.add(x[0], x[1]).unwrap(),
            Sub => g.sub(x[0], x[1]).unwrap(),
            Mul => g.mul(x[0], x[1]).unwrap(),
            MulSelf => g.mul(x[0], x[0]).unwrap(),
            Scale => g.scale(x[0], -1.7),
            Gelu => g.gelu(x[0]),
            Softmax => g.softmax(x[0]),
            LayerNorm => g.layer_norm(x[0], x[1], x[2], 1e-6).unwrap(),
            Permute => g.permute(x[0], &[3, 1, 0, 2]).unwrap(),
            Transpose => g.transpose(x[0]).unwrap(),
            Reshape => g.reshape(x[0], &[2, 6]).unwrap(),
            GatherRows => g.gather_rows(x[0], &[2, 0, 2, 1]).unwrap(),
            Concat => g.concat(x, 1).unwrap(),
            MeanOverAxis => g.mean_over_axis(x[0], 0).unwrap(),
            Sum => g.sum(x[0]),
            Mean => g.mean(x[0]),
            SmoothL1 => g.smooth_l1(x[0], 0.7).unwrap(),
            CrossEntropy => g.cross_entropy(x[0], &[2, 0, 3]).unwrap(),
        };
        weighted_sum(g, out, 7)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPart {
    Encoder,
    Decoder,
    /// Pixel loss on the masked patches plus smooth-L1 feature regression.
    DualLoss,
    /// Mean-pooled classifier with cross-entropy.
    Classifier,
}

/// Small two-block encoder / two-block decoder with all parameters as
/// differentiable inputs.
pub struct ModelProbe {
    pub vit: dama::model::Vit,
    pub store: dama::model::ParamStore,
    pub tokens: Vec<f32>,
    pub masks: Vec<dama::mask::Mask>,
    pub predict_at: Vec<Vec<usize>>,
    pub part: ModelPart,
}

impl ModelProbe {
    pub fn new(part: ModelPart, seed: u64) -> Self {
        use dama::mask::random_mask;
        use dama::model::{Geometry, ModelConfig, Vit};
        let cfg = ModelConfig { dim: 16, depth: 2, heads: 2, mlp_ratio: 2, decoder_dim: 8, decoder_depth: 2 };
        let vit = Vit::new(cfg, Geometry::new(16, 4, 3).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = vit.init(&mut rng);
        if part == ModelPart::Classifier {
            for (name, p) in dama::eval::init_head(16, 5).iter() {
                store.insert(name.clone(), p.shape.clone(), p.data.clone()).unwrap();
            }
        }
        // move norms and biases off their trivial init so they are exercised
        for (_, p) in store.iter_mut() {
            p.data.iter_mut().for_each(|v| *v += 0.1 * rng.sample::<f32, _>(StandardNormal));
        }
        let n = vit.num_patches();
        let tokens = (0..2 * n * vit.geometry.token_dim()).map(|_| rng.gen()).collect();
        let masks: Vec<_> = (0..2).map(|_| random_mask(n, 0.75, &mut rng).unwrap()).collect();
        let predict_at = (0..2).map(|_| random_mask(n, 0.75, &mut rng).unwrap().visible()).collect();
        Self { vit, store, tokens, masks, predict_at, part }
    }
}

impl Probe for ModelProbe {
    fn inputs(&self) -> Vec<(Vec<f64>, Vec<usize>)> {
        self.store.iter().map(|(_, p)| (p.data.iter().map(|&v| v as f64).collect(), p.shape.clone())).collect()
    }

    fn loss<T: Element>(&self, g: &mut Graph<T>, xs: &[Tensor]) -> Tensor {
        use dama::loss::{pixel_loss, smooth_l1, total_loss};
        use dama::model::Bound;
        let p = Bound::from_handles(self.store.iter().map(|(n, _)| n.clone()).zip(xs.iter().copied()));
        let visible: Vec<Vec<usize>> = self.masks.iter().map(|m| m.visible()).collect();
        let enc = self.vit.encode(g, &p, &self.tokens, &visible).unwrap();
        match self.part {
            ModelPart::Encoder => {
                let last = *enc.blocks.last().unwrap();
                let a = weighted_sum(g, enc.output, 3);
                let b = weighted_sum(g, last, 4);
                g.add(a, b).unwrap()
            }
            ModelPart::Decoder => {
                let dec = self.vit.decode(g, &p, &enc).unwrap();
                let a = weighted_sum(g, dec.pixels, 5);
                let b = weighted_sum(g, dec.features, 6);
                g.add(a, b).unwrap()
            }
            ModelPart::DualLoss => {
                let dec = self.vit.decode(g, &p, &enc).unwrap();
                let target: Vec<f32> = self.tokens.iter().map(|v| 1.0 - v).collect();
                let pix = pixel_loss(g, dec.pixels, &target, &self.masks).unwrap();
                let pred = self.vit.feature_predict(g, &p, &dec, &self.predict_at).unwrap();
                let n = g.value(pred).len();
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let tgt: Vec<T> = normal_vec(n, &mut rng).into_iter().map(|v| T::from_f64(2.0 * v)).collect();
                let feat = smooth_l1(g, pred, &tgt, 2.0).unwrap();
                let zero = g.constant(vec![T::zero()], &[1]).unwrap();
                total_loss(g, pix.scalar, zero, feat, 1.0).unwrap()
            }
            ModelPart::Classifier => {
                let logits = dama::eval::classify_head(g, &self.vit, &p, &p, &self.tokens, 2).unwrap();
                g.cross_entropy(logits, &[4, 1]).unwrap()
            }
        }
    }
}

/// Line-by-line reference execution of the second-mask rule on one row:
/// `loss * m1`, a stable argsort taking the top `loss_len + overlap_len`
/// ids, inversion, re-masking those ids, then unmasking the first
/// `overlap_len` ids of a stable argsort of `m1`. A zero-length tail slice
/// selects nothing.
pub fn literal_adaptive_mask(m1: &[u8], loss: &[f32], mask_ratio: f64, overlap_ratio: f64) -> Vec<u8> {
    let l = m1.len();
    let len_keep = (l as f64 * (1.0 - mask_ratio)) as i64;
    let loss_len = l as i64 - len_keep * 2;
    let overlap_len = (len_keep as f64 * overlap_ratio) as i64;

    let loss: Vec<f32> = loss.iter().zip(m1).map(|(&v, &m)| v * m as f32).collect();
    let mut loss_sorted: Vec<usize> = (0..l).collect();
    loss_sorted.sort_by(|&a, &b| loss[a].partial_cmp(&loss[b]).unwrap());
    let take = (loss_len + overlap_len) as usize;
    let loss_ids = &loss_sorted[l - take..];

    let mut m2: Vec<u8> = m1.iter().map(|&b| if b == 1 { 0 } else { 1 }).collect();
    for &i in loss_ids {
        m2[i] = 1;
    }

    let mut m1_ids: Vec<usize> = (0..l).collect();
    m1_ids.sort_by_key(|&i| m1[i]);
    for &i in &m1_ids[..overlap_len as usize] {
        m2[i] = 0;
    }
    m2
}
