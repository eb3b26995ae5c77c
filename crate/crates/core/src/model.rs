//! Masked-autoencoder vision transformer used by both branches.
//!
//! The encoder only ever sees visible patches. The decoder scatters the
//! encoded tokens back to their grid positions, fills the holes with a
//! learned mask token and predicts pixels for every position. A separate
//! linear head maps decoder tokens into the encoder's feature space so
//! one branch can regress the other branch's block features.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{DamaError, Result};
use crate::tensor::{normalize_rows, Element, Graph, Tensor, LAYER_NORM_EPS};

fn default_mlp_ratio() -> usize {
    4
}

/// Transformer sizes, as they appear under `model` in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { dim: 64, depth: 6, heads: 4, mlp_ratio: 4, decoder_dim: 48, decoder_depth: 2 }
    }
}

/// Patch grid the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub patch: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Geometry {
    pub fn new(image_size: usize, patch: usize, channels: usize) -> Result<Self> {
        if patch == 0 || !image_size.is_multiple_of(patch) {
            return Err(DamaError::Config(format!("image size {image_size} is not a multiple of patch {patch}")));
        }
        Ok(Self { patch, channels, rows: image_size / patch, cols: image_size / patch })
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameter set, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DamaError::Shape(format!("parameter shape {shape:?} holds {} values", data.len())));
        }
        self.params.insert(name.into(), ParamTensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    fn check_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(DamaError::Contract("parameter sets differ in size".into()));
        }
        for ((na, a), (nb, b)) in self.params.iter().zip(&other.params) {
            if na != nb || a.shape != b.shape {
                return Err(DamaError::Contract(format!("parameter {na}{:?} vs {nb}{:?}", a.shape, b.shape)));
            }
        }
        Ok(())
    }

    /// `self ← λ·self + (1 − λ)·student`, in place.
    pub fn ema_update(&mut self, student: &ParamStore, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(DamaError::Contract(format!("EMA coefficient {lambda} outside [0, 1]")));
        }
        self.check_congruent(student)?;
        let l = lambda as f32;
        for (t, s) in self.params.values_mut().zip(student.params.values()) {
            for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
                *tv = l * *tv + (1.0 - l) * sv;
            }
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a store.
pub struct Bound {
    handles: HashMap<String, Tensor>,
}

impl Bound {
    /// Register `store` in `g`, as trainable leaves or as constants.
    pub fn new<T: Element>(g: &mut Graph<T>, store: &ParamStore, trainable: bool) -> Result<Self> {
        let mut handles = HashMap::with_capacity(store.len());
        for (name, p) in store.iter() {
            let data = p.data.iter().map(|&v| T::from_f32(v)).collect();
            handles.insert(name.clone(), g.leaf(data, &p.shape, trainable)?);
        }
        Ok(Self { handles })
    }

    /// Wrap handles that were registered some other way.
    pub fn from_handles(handles: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Self { handles: handles.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.handles.get(name).copied().ok_or_else(|| DamaError::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.handles.iter()
    }
}

/// Fixed 2-D sine-cosine table, `rows·cols × dim`. Half the channels
/// encode the row, half the column.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Vec<f32> {
    let quarter = dim / 4;
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for coord in [r as f64, c as f64] {
                let enc: Vec<f64> = (0..quarter).map(|i| coord / 10000f64.powf(i as f64 / quarter as f64)).collect();
                out.extend(enc.iter().map(|v| v.sin() as f32));
                out.extend(enc.iter().map(|v| v.cos() as f32));
            }
        }
    }
    out
}

/// Encoder output for a batch of samples that each keep the same number
/// of visible patches.
pub struct Encoded {
    /// `[batch·keep, dim]`, after the final layer norm.
    pub output: Tensor,
    /// Output of every encoder block, each `[batch·keep, dim]`.
    pub blocks: Vec<Tensor>,
    /// Visible patch indices per sample, ascending.
    pub visible: Vec<Vec<usize>>,
}

impl Encoded {
    pub fn keep(&self) -> usize {
        self.visible[0].len()
    }
}

pub struct Decoded {
    /// `[batch·N, decoder_dim]`, after the decoder's final layer norm.
    pub features: Tensor,
    /// `[batch·N, patch·patch·channels]`.
    pub pixels: Tensor,
}

/// Architecture plus its fixed positional tables.
#[derive(Debug, Clone)]
pub struct Vit {
    pub config: ModelConfig,
    pub geometry: Geometry,
    enc_pos: Vec<f32>,
    dec_pos: Vec<f32>,
    input_norm: Option<ChannelStats>,
}

impl Vit {
    pub fn new(config: ModelConfig, geometry: Geometry) -> Result<Self> {
        let c = &config;
        let bad = |m: String| Err(DamaError::Config(m));
        if c.dim == 0 || c.heads == 0 || !c.dim.is_multiple_of(c.heads) || !c.decoder_dim.is_multiple_of(c.heads) {
            return bad(format!("dims {}/{} must be divisible by {} heads", c.dim, c.decoder_dim, c.heads));
        }
        if !c.dim.is_multiple_of(4) || !c.decoder_dim.is_multiple_of(4) {
            return bad("embedding dims must be multiples of 4 for the 2-D positional table".into());
        }
        if c.depth == 0 || c.mlp_ratio == 0 {
            return bad("encoder depth and MLP ratio must be positive".into());
        }
        let enc_pos = sincos_2d(geometry.rows, geometry.cols, c.dim);
        let dec_pos = sincos_2d(geometry.rows, geometry.cols, c.decoder_dim);
        Ok(Self { config, geometry, enc_pos, dec_pos, input_norm: None })
    }

    /// Standardize every input channel with `stats` before embedding.
    pub fn with_input_norm(mut self, stats: Option<ChannelStats>) -> Result<Self> {
        if let Some(s) = &stats {
            let c = self.geometry.channels;
            if s.mean.len() != c || s.std.len() != c || s.std.iter().any(|&v| !(v > 0.0)) {
                return Err(DamaError::Config(format!("input statistics must hold {c} channels with positive std")));
            }
        }
        self.input_norm = stats;
        Ok(self)
    }

    pub fn input_norm(&self) -> Option<&ChannelStats> {
        self.input_norm.as_ref()
    }

    pub fn num_patches(&self) -> usize {
        self.geometry.num_patches()
    }

    pub fn encoder_pos(&self) -> &[f32] {
        &self.enc_pos
    }

    pub fn decoder_pos(&self) -> &[f32] {
        &self.dec_pos
    }

    /// Fresh parameters: Xavier-uniform weights, zero biases, unit norms,
    /// N(0, 0.02²) mask token.
    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let c = &self.config;
        let (d, dd, td) = (c.dim, c.decoder_dim, self.geometry.token_dim());
        let mut s = ParamStore::new();
        let linear = |s: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut dyn rand::RngCore| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            s.insert(format!("{name}.w"), vec![fan_in, fan_out], w).unwrap();
            s.insert(format!("{name}.b"), vec![fan_out], vec![0.0; fan_out]).unwrap();
        };
        let norm = |s: &mut ParamStore, name: &str, n: usize| {
            s.insert(format!("{name}.g"), vec![n], vec![1.0; n]).unwrap();
            s.insert(format!("{name}.b"), vec![n], vec![0.0; n]).unwrap();
        };
        let block = |s: &mut ParamStore, prefix: &str, width: usize, rng: &mut dyn rand::RngCore| {
            norm(s, &format!("{prefix}.ln1"), width);
            for part in ["q", "k", "v", "proj"] {
                linear(s, &format!("{prefix}.attn.{part}"), width, width, rng);
            }
            norm(s, &format!("{prefix}.ln2"), width);
            linear(s, &format!("{prefix}.mlp.fc1"), width, width * c.mlp_ratio, rng);
            linear(s, &format!("{prefix}.mlp.fc2"), width * c.mlp_ratio, width, rng);
        };
        linear(&mut s, "patch_embed", td, d, rng);
        for i in 0..c.depth {
            block(&mut s, &format!("enc.{i}"), d, rng);
        }
        norm(&mut s, "enc.norm", d);
        linear(&mut s, "dec.embed", d, dd, rng);
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let token = (0..dd).map(|_| normal.sample(rng)).collect();
        s.insert("dec.mask_token", vec![dd], token).unwrap();
        for i in 0..c.decoder_depth {
            block(&mut s, &format!("dec.{i}"), dd, rng);
        }
        norm(&mut s, "dec.norm", dd);
        linear(&mut s, "head.pixel", dd, td, rng);
        linear(&mut s, "head.feature", dd, d, rng);
        s
    }

    /// Run the encoder on the visible patches of each sample.
    ///
    /// `tokens` holds `batch·N` patch tokens; `visible[b]` lists the patch
    /// indices sample `b` may see. Masked patch content is never read.
    pub fn encode<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: &[f32],
        visible: &[Vec<usize>],
    ) -> Result<Encoded> {
        let (n, td, d) = (self.num_patches(), self.geometry.token_dim(), self.config.dim);
        let batch = visible.len();
        let keep = visible.first().map_or(0, Vec::len);
        if batch == 0 || keep == 0 {
            return Err(DamaError::Contract("encoder needs at least one visible patch".into()));
        }
        if tokens.len() != batch * n * td {
            return Err(DamaError::Shape(format!("{} token values for {batch} samples of {n}x{td}", tokens.len())));
        }
        let mut gathered = Vec::with_capacity(batch * keep * td);
        let mut pos = Vec::with_capacity(batch * keep * d);
        for (b, vis) in visible.iter().enumerate() {
            if vis.len() != keep {
                return Err(DamaError::Contract("samples in a batch must keep equally many patches".into()));
            }
            for &i in vis {
                if i >= n {
                    return Err(DamaError::Shape(format!("patch index {i} out of {n}")));
                }
                let o = (b * n + i) * td;
                let tok = &tokens[o..o + td];
                match &self.input_norm {
                    None => gathered.extend(tok.iter().map(|&v| T::from_f32(v))),
                    Some(s) => {
                        let c = s.mean.len();
                        gathered.extend(
                            tok.iter().enumerate().map(|(j, &v)| T::from_f32((v - s.mean[j % c]) / s.std[j % c])),
                        );
                    }
                }
                pos.extend(self.enc_pos[i * d..(i + 1) * d].iter().map(|&v| T::from_f32(v)));
            }
        }
        let x = g.constant(gathered, &[batch * keep, td])?;
        let x = linear(g, p, "patch_embed", x)?;
        let pos = g.constant(pos, &[batch * keep, d])?;
        let x = g.add(x, pos)?;
        let mut x = g.reshape(x, &[batch, keep, d])?;
        let mut blocks = Vec::with_capacity(self.config.depth);
        for i in 0..self.config.depth {
            x = self.block(g, p, &format!("enc.{i}"), x)?;
            blocks.push(g.reshape(x, &[batch * keep, d])?);
        }
        let out = norm(g, p, "enc.norm", x)?;
        let output = g.reshape(out, &[batch * keep, d])?;
        Ok(Encoded { output, blocks, visible: visible.to_vec() })
    }

    /// Decode every grid position from the encoded visible tokens.
    pub fn decode<T: Element>(&self, g: &mut Graph<T>, p: &Bound, enc: &Encoded) -> Result<Decoded> {
        let (n, dd) = (self.num_patches(), self.config.decoder_dim);
        let (batch, keep) = (enc.visible.len(), enc.keep());
        let proj = linear(g, p, "dec.embed", enc.output)?;
        let token = g.reshape(p.get("dec.mask_token")?, &[1, dd])?;
        let table = g.concat(&[proj, token], 0)?;
        let mask_row = batch * keep;
        let mut index = vec![mask_row; batch * n];
        for (b, vis) in enc.visible.iter().enumerate() {
            for (rank, &i) in vis.iter().enumerate() {
                index[b * n + i] = b * keep + rank;
            }
        }
        let x = g.gather_rows(table, &index)?;
        let x = g.reshape(x, &[batch, n, dd])?;
        let pos = g.constant_f32(&self.dec_pos, &[n, dd])?;
        let mut x = g.add(x, pos)?;
        for i in 0..self.config.decoder_depth {
            x = self.block(g, p, &format!("dec.{i}"), x)?;
        }
        let x = norm(g, p, "dec.norm", x)?;
        let features = g.reshape(x, &[batch * n, dd])?;
        let pixels = linear(g, p, "head.pixel", features)?;
        Ok(Decoded { features, pixels })
    }

    /// Map decoder tokens at `positions[b]` of each sample into encoder
    /// feature space, `[Σ|positions[b]|, dim]`.
    pub fn feature_predict<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        dec: &Decoded,
        positions: &[Vec<usize>],
    ) -> Result<Tensor> {
        let n = self.num_patches();
        let rows: Vec<usize> =
            positions.iter().enumerate().flat_map(|(b, pos)| pos.iter().map(move |&i| b * n + i)).collect();
        if rows.is_empty() {
            return Err(DamaError::Contract("feature prediction needs at least one position".into()));
        }
        if let Some(&i) = positions.iter().flatten().find(|&&i| i >= n) {
            return Err(DamaError::Shape(format!("position {i} out of {n}")));
        }
        let x = g.gather_rows(dec.features, &rows)?;
        linear(g, p, "head.feature", x)
    }

    fn block<T: Element>(&self, g: &mut Graph<T>, p: &Bound, prefix: &str, x: Tensor) -> Result<Tensor> {
        let h = norm(g, p, &format!("{prefix}.ln1"), x)?;
        let a = self.attention(g, p, &format!("{prefix}.attn"), h)?;
        let x = g.add(x, a)?;
        let h = norm(g, p, &format!("{prefix}.ln2"), x)?;
        let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
        let h = g.gelu(h);
        let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
        Ok(g.add(x, h)?)
    }

    /// Multi-head self-attention over `[batch, tokens, width]`.
    fn attention<T: Element>(&self, g: &mut Graph<T>, p: &Bound, prefix: &str, x: Tensor) -> Result<Tensor> {
        let shape = g.shape(x).to_vec();
        let (b, t, w) = (shape[0], shape[1], shape[2]);
        let heads = self.config.heads;
        let hd = w / heads;
        let split = |g: &mut Graph<T>, part: &str| -> Result<Tensor> {
            let y = linear(g, p, &format!("{prefix}.{part}"), x)?;
            let y = g.reshape(y, &[b, t, heads, hd])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[b * heads, t, hd])?)
        };
        let q = split(g, "q")?;
        let k = split(g, "k")?;
        let v = split(g, "v")?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let att = g.softmax(scores);
        let y = g.bmm(att, v, false)?;
        let y = g.reshape(y, &[b, heads, t, hd])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, t, w])?;
        linear(g, p, &format!("{prefix}.proj"), y)
    }
}

pub fn linear<T: Element>(g: &mut Graph<T>, p: &Bound, name: &str, x: Tensor) -> Result<Tensor> {
    let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    Ok(g.add(y, p.get(&format!("{name}.b"))?)?)
}

fn norm<T: Element>(g: &mut Graph<T>, p: &Bound, name: &str, x: Tensor) -> Result<Tensor> {
    let gain = p.get(&format!("{name}.g"))?;
    let bias = p.get(&format!("{name}.b"))?;
    Ok(g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
}

/// Regression target from per-block encoder outputs: layer-normalize each
/// of the last `k` blocks (no affine) and average them.
pub fn feature_target<T: Element>(blocks: &[&[T]], dim: usize, k: usize) -> Result<Vec<T>> {
    if k == 0 || k > blocks.len() {
        return Err(DamaError::Config(format!("cannot average the last {k} of {} blocks", blocks.len())));
    }
    let len = blocks[0].len();
    let mut acc = vec![T::zero(); len];
    for block in &blocks[blocks.len() - k..] {
        if block.len() != len {
            return Err(DamaError::Shape("blocks differ in size".into()));
        }
        for (a, v) in acc.iter_mut().zip(normalize_rows(block, dim, LAYER_NORM_EPS)) {
            *a = *a + v;
        }
    }
    let inv = T::one() / T::from_f64(k as f64);
    acc.iter_mut().for_each(|v| *v = *v * inv);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Vit {
        let cfg = ModelConfig { dim: 16, depth: 2, heads: 2, mlp_ratio: 2, decoder_dim: 8, decoder_depth: 1 };
        Vit::new(cfg, Geometry::new(16, 4, 2).unwrap()).unwrap()
    }

    fn tokens(vit: &Vit, batch: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..batch * vit.num_patches() * vit.geometry.token_dim()).map(|_| rng.gen()).collect()
    }

    #[test]
    fn shapes() {
        let vit = tiny();
        let store = vit.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &store, true).unwrap();
        let vis = vec![vec![0, 3, 5, 9], vec![1, 2, 14, 15]];
        let x = tokens(&vit, 2, 1);
        let enc = vit.encode(&mut g, &p, &x, &vis).unwrap();
        assert_eq!(g.shape(enc.output), &[8, 16]);
        assert_eq!(enc.blocks.len(), 2);
        let dec = vit.decode(&mut g, &p, &enc).unwrap();
        assert_eq!(g.shape(dec.pixels), &[32, 32]);
        assert_eq!(g.shape(dec.features), &[32, 8]);
        let pred = vit.feature_predict(&mut g, &p, &dec, &[vec![1, 2, 4, 6], vec![0, 7, 8, 9]]).unwrap();
        assert_eq!(g.shape(pred), &[8, 16]);
        assert!(vit.feature_predict(&mut g, &p, &dec, &[vec![], vec![]]).is_err());
    }

    #[test]
    fn encoder_ignores_masked_content() {
        let vit = tiny();
        let store = vit.init(&mut ChaCha8Rng::seed_from_u64(0));
        let vis = vec![vec![2, 7, 11]];
        let a = tokens(&vit, 1, 1);
        let mut b = tokens(&vit, 1, 2);
        let td = vit.geometry.token_dim();
        for &i in &vis[0] {
            b[i * td..(i + 1) * td].copy_from_slice(&a[i * td..(i + 1) * td]);
        }
        let run = |x: &[f32]| {
            let mut g = Graph::<f32>::new();
            let p = Bound::new(&mut g, &store, false).unwrap();
            let enc = vit.encode(&mut g, &p, x, &vis).unwrap();
            g.value(enc.output).to_vec()
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn empty_visible_set_is_rejected() {
        let vit = tiny();
        let store = vit.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &store, false).unwrap();
        let x = tokens(&vit, 1, 0);
        assert!(matches!(vit.encode(&mut g, &p, &x, &[vec![]]), Err(DamaError::Contract(_))));
    }

    #[test]
    fn feature_target_rules() {
        let a = [1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0];
        let b = [0.5f64, 0.1, 0.3, 0.9, 2.0, 1.0, 0.0, 3.0];
        let last = normalize_rows(&b, 4, LAYER_NORM_EPS);
        assert_eq!(feature_target(&[&a[..], &b[..]], 4, 1).unwrap(), last);
        let same = feature_target(&[&b[..], &b[..]], 4, 2).unwrap();
        for (x, y) in same.iter().zip(&last) {
            assert!((x - y).abs() < 1e-12);
        }
        for row in feature_target(&[&a[..], &b[..]], 4, 1).unwrap().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() / 4.0 < 1e-5);
        }
        assert!(matches!(feature_target(&[&a[..]], 4, 2), Err(DamaError::Config(_))));
    }

    #[test]
    fn ema_limits_and_composition() {
        let vit = tiny();
        let student = vit.init(&mut ChaCha8Rng::seed_from_u64(1));
        let teacher0 = vit.init(&mut ChaCha8Rng::seed_from_u64(2));

        let mut t = teacher0.clone();
        t.ema_update(&student, 1.0).unwrap();
        assert_eq!(t, teacher0);
        t.ema_update(&student, 0.0).unwrap();
        assert_eq!(t, student);

        let lambda = 0.996f64;
        let mut twice = teacher0.clone();
        twice.ema_update(&student, lambda).unwrap();
        twice.ema_update(&student, lambda).unwrap();
        let mut once = teacher0.clone();
        once.ema_update(&student, lambda * lambda).unwrap();
        for ((_, a), (_, b)) in twice.iter().zip(once.iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-5);
            }
        }

        let mut other = ParamStore::new();
        other.insert("x", vec![1], vec![0.0]).unwrap();
        assert!(t.ema_update(&other, 0.5).is_err());
    }

    #[test]
    fn positional_table_is_fixed() {
        let a = sincos_2d(8, 8, 64);
        assert_eq!(a, sincos_2d(8, 8, 64));
        assert_eq!(a.len(), 64 * 64);
        // position 0 encodes sin(0)=0, cos(0)=1
        assert_eq!(&a[..2], &[0.0, 0.0]);
        assert_eq!(a[16], 1.0);
    }
}
