//! Synthetic multi-channel cell images, affine augmentation and the MCS
//! container format.
//!
//! Channels 0 and 1 mark nuclei for every cell. Channels 2.. are marker
//! channels, one per class; a cell of class `k` lights up channel `k + 2`.
//! The label of an image is the class of the cell closest to its centre,
//! other cells act as background clutter.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DamaError, Result};

/// Number of leading nucleus channels shared by every class.
pub const NUCLEUS_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-last, values in [0, 1].
    pub data: Vec<f32>,
    pub label: Option<u32>,
}

impl MultiChannelImage {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels], label: None }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// Mean of one channel over all pixels.
    pub fn channel_mean(&self, c: usize) -> f64 {
        let sum: f64 = self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).sum();
        sum / (self.height * self.width) as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-channel mean and standard deviation of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Statistics over every pixel of `images`, computed in f64. A channel
    /// with no spread gets std 1.
    pub fn measure(images: &[MultiChannelImage]) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(DamaError::Config("cannot measure an empty dataset".into()));
        };
        let c = first.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for img in images {
            if img.channels != c {
                return Err(DamaError::Shape(format!("images have {} and {c} channels", img.channels)));
            }
            for px in img.data.chunks(c) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
            }
            count += img.height * img.width;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-8 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean: mean.iter().map(|&m| m as f32).collect(), std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// Inclusive range of clutter cells around the central one.
    pub clutter_cells: (usize, usize),
    /// Cell body radius range in pixels.
    pub body_radius: (f32, f32),
    /// Nucleus radius as a fraction of the body radius.
    pub nucleus_fraction: f32,
    /// Marker channel peak intensity range.
    pub marker_intensity: (f32, f32),
    /// Peak intensity that leaks into the other marker channels.
    pub crosstalk: f32,
    /// Largest offset of the central cell from the image centre.
    pub center_jitter: f32,
    /// Smallest distance between a clutter cell and the central cell.
    pub clutter_distance: f32,
    pub background: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 7,
            classes: 5,
            clutter_cells: (1, 4),
            body_radius: (4.0, 8.0),
            nucleus_fraction: 0.5,
            marker_intensity: (0.25, 0.9),
            crosstalk: 0.2,
            center_jitter: 4.0,
            clutter_distance: 12.0,
            background: 0.05,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DamaError::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.classes == 0 || self.channels < NUCLEUS_CHANNELS + self.classes {
            return bad(format!(
                "{} classes need at least {} channels, got {}",
                self.classes,
                NUCLEUS_CHANNELS + self.classes,
                self.channels
            ));
        }
        let (r0, r1) = self.body_radius;
        if !(r0 > 0.0 && r1 >= r0) {
            return bad(format!("body radius range {r0}..{r1} is degenerate"));
        }
        if !(self.nucleus_fraction > 0.0) {
            return bad("nucleus fraction must be positive".into());
        }
        if !(self.clutter_distance >= 0.0) {
            return bad(format!("clutter distance must be non-negative, got {}", self.clutter_distance));
        }
        if self.clutter_cells.0 > self.clutter_cells.1 {
            return bad("clutter cell range is reversed".into());
        }
        let (i0, i1) = self.marker_intensity;
        if !(i0 >= 0.0 && i1 >= i0) || self.noise_sigma < 0.0 || self.crosstalk < 0.0 {
            return bad("intensities and noise must be non-negative".into());
        }
        Ok(())
    }
}

struct Cell {
    cy: f32,
    cx: f32,
    radius: f32,
    aspect: f32,
    angle: f32,
    class: usize,
    marker: f32,
    nucleus: f32,
    leak: Vec<f32>,
}

impl Cell {
    fn sample(cfg: &SynthConfig, cy: f32, cx: f32, class: usize, rng: &mut impl Rng) -> Self {
        let (r0, r1) = cfg.body_radius;
        let (i0, i1) = cfg.marker_intensity;
        Cell {
            cy,
            cx,
            radius: if r1 > r0 { rng.gen_range(r0..r1) } else { r0 },
            aspect: rng.gen_range(0.6..1.0),
            angle: rng.gen_range(0.0..std::f32::consts::PI),
            class,
            marker: if i1 > i0 { rng.gen_range(i0..i1) } else { i0 },
            nucleus: rng.gen_range(0.5..0.9),
            leak: (0..cfg.classes).map(|_| rng.gen_range(0.0..=1.0) * cfg.crosstalk).collect(),
        }
    }

    /// Anisotropic Gaussian profile at (y, x) with the given radius scale.
    fn profile(&self, y: f32, x: f32, scale: f32) -> f32 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let a = self.radius * scale;
        let b = a * self.aspect;
        (-0.5 * (u * u / (a * a) + v * v / (b * b))).exp()
    }

    fn paint(&self, img: &mut MultiChannelImage, cfg: &SynthConfig) {
        let reach = (self.radius * 3.0).ceil() as isize;
        let (y0, y1) = (self.cy as isize - reach, self.cy as isize + reach);
        let (x0, x1) = (self.cx as isize - reach, self.cx as isize + reach);
        let ch = img.channels;
        for y in y0.max(0)..=y1.min(img.height as isize - 1) {
            for x in x0.max(0)..=x1.min(img.width as isize - 1) {
                let (yf, xf) = (y as f32, x as f32);
                let body = self.profile(yf, xf, 1.0);
                let nucleus = self.profile(yf, xf, cfg.nucleus_fraction);
                let o = (y as usize * img.width + x as usize) * ch;
                let px = &mut img.data[o..o + ch];
                px[0] += nucleus * self.nucleus;
                px[1] += nucleus * self.nucleus * 0.8;
                for k in 0..cfg.classes {
                    let peak = if k == self.class { self.marker } else { self.leak[k] };
                    px[NUCLEUS_CHANNELS + k] += body * peak;
                }
            }
        }
    }
}

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Render image `index` of the dataset described by `cfg`. Labels cycle
/// through the classes so any multiple of `classes` images is balanced.
pub fn generate_one(cfg: &SynthConfig, index: usize) -> Result<MultiChannelImage> {
    cfg.validate()?;
    let mut rng = image_rng(cfg.seed, index as u64);
    let class = index % cfg.classes;
    let mut img = MultiChannelImage::zeros(cfg.height, cfg.width, cfg.channels);
    let noise = Normal::new(0.0f32, cfg.noise_sigma.max(1e-12)).expect("finite sigma");
    for v in img.data.iter_mut() {
        *v = cfg.background + if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
    }

    let (h, w) = (cfg.height as f32, cfg.width as f32);
    let j = cfg.center_jitter;
    let jitter = |rng: &mut ChaCha8Rng| if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
    let cy = (h - 1.0) / 2.0 + jitter(&mut rng);
    let cx = (w - 1.0) / 2.0 + jitter(&mut rng);
    let centre = Cell::sample(cfg, cy, cx, class, &mut rng);

    let clutter = rng.gen_range(cfg.clutter_cells.0..=cfg.clutter_cells.1);
    let min_dist = cfg.clutter_distance;
    let mut cells = Vec::with_capacity(clutter);
    for _ in 0..clutter {
        // keep clutter away from the centre so the central cell stays closest
        let (mut y, mut x);
        let mut tries = 0;
        loop {
            y = rng.gen_range(0.0..h);
            x = rng.gen_range(0.0..w);
            tries += 1;
            if ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() >= min_dist || tries > 32 {
                break;
            }
        }
        let k = rng.gen_range(0..cfg.classes);
        cells.push(Cell::sample(cfg, y, x, k, &mut rng));
    }
    for cell in cells.iter().chain(std::iter::once(&centre)) {
        cell.paint(&mut img, cfg);
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img.label = Some(class as u32);
    Ok(img)
}

/// `n` labeled images; the same config always yields the same dataset.
pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<MultiChannelImage>> {
    if n == 0 {
        return Err(DamaError::Config("cannot generate an empty dataset".into()));
    }
    (0..n).map(|i| generate_one(cfg, i)).collect()
}

/// Parameters of one affine augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Number of counter-clockwise quarter turns.
    pub quarter_turns: u8,
    /// Cyclic shift in pixels (rows, cols).
    pub shift: (i32, i32),
    pub scale: f32,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self { flip_h: false, flip_v: false, quarter_turns: 0, shift: (0, 0), scale: 1.0 };

    /// Random draw with shifts strictly smaller than `max_shift + 1` pixels
    /// and scale in [0.8, 1.2].
    pub fn sample(rng: &mut impl Rng, max_shift: i32) -> Self {
        Self {
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
            quarter_turns: rng.gen_range(0..4),
            shift: (rng.gen_range(-max_shift..=max_shift), rng.gen_range(-max_shift..=max_shift)),
            scale: rng.gen_range(0.8..=1.2),
        }
    }
}

/// Apply scaling (nearest neighbour about the centre), quarter turns,
/// flips and a cyclic shift. Pixel channel vectors are moved, never mixed,
/// and the label is kept.
pub fn augment_with(img: &MultiChannelImage, p: &AugmentParams) -> MultiChannelImage {
    let mut cur = img.clone();
    if p.scale != 1.0 {
        cur = remap(&cur, cur.height, cur.width, |y, x| {
            let cy = (img.height as f32 - 1.0) / 2.0;
            let cx = (img.width as f32 - 1.0) / 2.0;
            let sy = ((y as f32 - cy) / p.scale + cy).round().clamp(0.0, img.height as f32 - 1.0);
            let sx = ((x as f32 - cx) / p.scale + cx).round().clamp(0.0, img.width as f32 - 1.0);
            (sy as usize, sx as usize)
        });
    }
    for _ in 0..p.quarter_turns % 4 {
        let (h, w) = (cur.height, cur.width);
        // counter-clockwise: out[y][x] = in[x][w - 1 - y], output is w×h
        cur = remap(&cur, w, h, |y, x| (x, w - 1 - y));
    }
    if p.flip_h {
        let w = cur.width;
        cur = remap(&cur, cur.height, w, |y, x| (y, w - 1 - x));
    }
    if p.flip_v {
        let h = cur.height;
        cur = remap(&cur, h, cur.width, |y, x| (h - 1 - y, x));
    }
    if p.shift != (0, 0) {
        let (h, w) = (cur.height as i64, cur.width as i64);
        let (dy, dx) = (p.shift.0 as i64, p.shift.1 as i64);
        cur = remap(&cur, cur.height, cur.width, |y, x| {
            ((y as i64 - dy).rem_euclid(h) as usize, (x as i64 - dx).rem_euclid(w) as usize)
        });
    }
    cur
}

pub fn augment(img: &MultiChannelImage, rng: &mut impl Rng, max_shift: i32) -> MultiChannelImage {
    augment_with(img, &AugmentParams::sample(rng, max_shift))
}

fn remap(
    src: &MultiChannelImage,
    height: usize,
    width: usize,
    source_of: impl Fn(usize, usize) -> (usize, usize),
) -> MultiChannelImage {
    let mut out = MultiChannelImage::zeros(height, width, src.channels);
    out.label = src.label;
    for y in 0..height {
        for x in 0..width {
            let (sy, sx) = source_of(y, x);
            let o = (y * width + x) * src.channels;
            out.data[o..o + src.channels].copy_from_slice(src.pixel(sy, sx));
        }
    }
    out
}

const MCS_MAGIC: &[u8; 4] = b"MCS1";
const MCS_VERSION: u32 = 1;

/// Encode images into the MCS container. All images must share one size
/// and either all carry labels or none do.
pub fn encode_mcs(images: &[MultiChannelImage]) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| DamaError::Config("no images to write".into()))?;
    let (h, w, c) = (first.height, first.width, first.channels);
    let labeled = first.label.is_some();
    for img in images {
        if (img.height, img.width, img.channels) != (h, w, c) || img.data.len() != h * w * c {
            return Err(DamaError::Shape(format!(
                "image {}x{}x{} does not match {h}x{w}x{c}",
                img.height, img.width, img.channels
            )));
        }
        if img.label.is_some() != labeled {
            return Err(DamaError::Contract("images mix labeled and unlabeled entries".into()));
        }
    }
    let mut out = Vec::with_capacity(28 + images.len() * (4 + 4 * h * w * c));
    out.extend_from_slice(MCS_MAGIC);
    for v in [MCS_VERSION, images.len() as u32, h as u32, w as u32, c as u32, labeled as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if labeled {
        for img in images {
            out.extend_from_slice(&img.label.unwrap().to_le_bytes());
        }
    }
    for img in images {
        for v in &img.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DamaError::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_mcs(buf: &[u8]) -> Result<Vec<MultiChannelImage>> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != MCS_MAGIC {
        return Err(DamaError::Format { offset: 0, msg: "bad magic, expected MCS1".into() });
    }
    let version = cur.u32("version")?;
    if version != MCS_VERSION {
        return Err(DamaError::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let count = cur.u32("count")? as usize;
    let (h, w, c) = (cur.u32("height")? as usize, cur.u32("width")? as usize, cur.u32("channels")? as usize);
    let flag_at = cur.pos as u64;
    let labeled = match cur.u32("label flag")? {
        0 => false,
        1 => true,
        f => return Err(DamaError::Format { offset: flag_at, msg: format!("label flag {f} is not 0/1") }),
    };
    let pixels = h * w * c;
    let payload = count.checked_mul(pixels * 4 + if labeled { 4 } else { 0 });
    let remaining = buf.len() - cur.pos;
    if payload != Some(remaining) {
        let payload = payload.map_or("overflowing".to_string(), |p| p.to_string());
        return Err(DamaError::Format {
            offset: cur.pos as u64,
            msg: format!("header declares {count} images ({payload} bytes) but {remaining} bytes follow"),
        });
    }
    let labels: Vec<Option<u32>> = if labeled {
        (0..count).map(|_| cur.u32("label").map(Some)).collect::<Result<_>>()?
    } else {
        vec![None; count]
    };
    let mut images = Vec::with_capacity(count);
    for label in labels {
        let raw = cur.take(pixels * 4, "pixels")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        images.push(MultiChannelImage { height: h, width: w, channels: c, data, label });
    }
    Ok(images)
}

pub fn write_mcs(path: impl AsRef<Path>, images: &[MultiChannelImage]) -> Result<()> {
    let bytes = encode_mcs(images)?;
    fs::write(path.as_ref(), bytes).map_err(|e| DamaError::io(path.as_ref(), e))
}

pub fn read_mcs(path: impl AsRef<Path>) -> Result<Vec<MultiChannelImage>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| DamaError::io(path.as_ref(), e))?;
    decode_mcs(&bytes)
}
