//! Patch masks for the two branches.
//!
//! Branch 1 always sees a uniformly random mask. Branch 2's mask is built
//! from branch 1's mask and its per-patch reconstruction losses: the
//! hardest masked patches stay masked, the easiest become visible, and a
//! fixed share of branch 1's visible patches is kept visible as overlap.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DamaError, Result};

/// Binary patch mask, `1` = masked, `0` = visible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    bits: Vec<u8>,
}

/// Number of visible patches for `len` patches at `ratio`, truncating
/// toward zero the same way `int(L * (1 - ratio))` does in f64.
pub fn keep_len(len: usize, ratio: f64) -> usize {
    (len as f64 * (1.0 - ratio)).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DamaError::Config(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    Ok(())
}

impl Mask {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(DamaError::Contract(format!("mask bit {b} is not 0/1")));
        }
        Ok(Self { bits })
    }

    /// Mask with nothing hidden.
    pub fn all_visible(len: usize) -> Self {
        Self { bits: vec![0; len] }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn visible_count(&self) -> usize {
        self.len() - self.masked_count()
    }

    /// Fraction of patches that are masked.
    pub fn ratio(&self) -> f64 {
        self.masked_count() as f64 / self.len() as f64
    }

    /// Visible patch indices, ascending.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_masked(i)).collect()
    }

    /// Masked patch indices, ascending.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }
}

/// Uniformly random mask over `len` patches hiding all but
/// `keep_len(len, ratio)` of them.
pub fn random_mask<R: Rng + ?Sized>(len: usize, ratio: f64, rng: &mut R) -> Result<Mask> {
    check_ratio(ratio)?;
    if len < 2 {
        return Err(DamaError::Config(format!("need at least 2 patches, got {len}")));
    }
    let keep = keep_len(len, ratio);
    if keep == 0 {
        return Err(DamaError::Config(format!("mask ratio {ratio} leaves no visible patch out of {len}")));
    }
    let mut bits = vec![1u8; len];
    for i in index::sample(rng, len, keep) {
        bits[i] = 0;
    }
    Ok(Mask { bits })
}

/// Patch counts used when deriving the second mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveCounts {
    pub keep: usize,
    /// Masked patches of m1 that stay masked beyond what inversion requires.
    pub loss_len: usize,
    pub overlap: usize,
}

impl AdaptiveCounts {
    pub fn new(len: usize, ratio: f64, overlap_ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        if ratio < 0.5 {
            return Err(DamaError::UnsupportedRatio { ratio });
        }
        if !(0.0..=1.0).contains(&overlap_ratio) {
            return Err(DamaError::Config(format!("overlap ratio must lie in [0, 1], got {overlap_ratio}")));
        }
        let keep = keep_len(len, ratio);
        Ok(Self { keep, loss_len: len - 2 * keep, overlap: (keep as f64 * overlap_ratio).floor() as usize })
    }

    /// How many of m1's masked patches are masked again in m2.
    pub fn remask(&self) -> usize {
        self.loss_len + self.overlap
    }
}

fn check_pair_inputs(m1: &Mask, loss: &[f32], counts: &AdaptiveCounts) -> Result<()> {
    if loss.len() != m1.len() {
        return Err(DamaError::Shape(format!("loss has {} entries for a mask of {} patches", loss.len(), m1.len())));
    }
    if m1.visible_count() != counts.keep {
        return Err(DamaError::Contract(format!(
            "first mask keeps {} patches but the ratio implies {}",
            m1.visible_count(),
            counts.keep
        )));
    }
    Ok(())
}

/// Second-branch mask from the first mask and its per-patch losses.
///
/// Masked patches of `m1` are ranked by loss with a stable ascending sort
/// (ties go to the lower index first); the top `loss_len + overlap` of them
/// stay masked and the rest become visible. Of `m1`'s visible patches, the
/// `overlap` lowest-indexed stay visible and the rest are masked. Losses at
/// positions visible in `m1` are ignored.
pub fn adaptive_mask(m1: &Mask, loss: &[f32], ratio: f64, overlap_ratio: f64) -> Result<Mask> {
    let counts = AdaptiveCounts::new(m1.len(), ratio, overlap_ratio)?;
    check_pair_inputs(m1, loss, &counts)?;
    let mut ranked = m1.masked();
    ranked.sort_by(|&a, &b| loss[a].total_cmp(&loss[b]));
    Ok(exchange(m1, &ranked, &counts))
}

/// The same exchange as [`adaptive_mask`], except the re-masked patches of
/// `m1` are drawn uniformly at random instead of by loss.
pub fn random_overlap_mask<R: Rng + ?Sized>(m1: &Mask, ratio: f64, overlap_ratio: f64, rng: &mut R) -> Result<Mask> {
    let counts = AdaptiveCounts::new(m1.len(), ratio, overlap_ratio)?;
    if m1.visible_count() != counts.keep {
        return Err(DamaError::Contract(format!(
            "first mask keeps {} patches but the ratio implies {}",
            m1.visible_count(),
            counts.keep
        )));
    }
    let masked = m1.masked();
    let order = index::sample(rng, masked.len(), masked.len());
    let ranked: Vec<usize> = order.iter().map(|i| masked[i]).collect();
    Ok(exchange(m1, &ranked, &counts))
}

/// `ranked` lists m1's masked patches from "most visible" to "most masked".
fn exchange(m1: &Mask, ranked: &[usize], counts: &AdaptiveCounts) -> Mask {
    let mut bits: Vec<u8> = m1.bits.iter().map(|&b| 1 - b).collect();
    for &i in &ranked[ranked.len() - counts.remask()..] {
        bits[i] = 1;
    }
    for i in m1.visible().into_iter().take(counts.overlap) {
        bits[i] = 0;
    }
    Mask { bits }
}

/// Both branch masks plus the detached per-patch losses that shaped `m2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub m1: Mask,
    pub m2: Mask,
    pub patch_losses: Vec<f32>,
    pub overlap_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskStats {
    pub visible_m1: usize,
    pub visible_m2: usize,
    pub overlap: usize,
    /// Mean loss over patches masked in both masks.
    pub mean_loss_masked: Option<f64>,
    /// Mean loss over patches masked in `m1` but visible in `m2`.
    pub mean_loss_visible: Option<f64>,
}

fn mean_of(loss: &[f32], idx: impl Iterator<Item = usize>) -> Option<f64> {
    let (sum, n) = idx.fold((0.0, 0usize), |(s, n), i| (s + loss[i] as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MaskPair {
    pub fn stats(&self) -> MaskStats {
        let n = self.m1.len();
        MaskStats {
            visible_m1: self.m1.visible_count(),
            visible_m2: self.m2.visible_count(),
            overlap: (0..n).filter(|&i| !self.m1.is_masked(i) && !self.m2.is_masked(i)).count(),
            mean_loss_masked: mean_of(
                &self.patch_losses,
                (0..n).filter(|&i| self.m1.is_masked(i) && self.m2.is_masked(i)),
            ),
            mean_loss_visible: mean_of(
                &self.patch_losses,
                (0..n).filter(|&i| self.m1.is_masked(i) && !self.m2.is_masked(i)),
            ),
        }
    }

    /// Checks the counting invariants shared by every adaptive or
    /// random-overlap pair, plus the loss ordering when `by_loss` is set.
    pub fn validate(&self, ratio: f64, by_loss: bool) -> Result<()> {
        let counts = AdaptiveCounts::new(self.m1.len(), ratio, self.overlap_ratio)?;
        let s = self.stats();
        let fail = |what: String| Err(DamaError::Contract(what));
        if self.m2.len() != self.m1.len() || self.patch_losses.len() != self.m1.len() {
            return fail("pair components differ in length".into());
        }
        if s.visible_m1 != counts.keep || s.visible_m2 != counts.keep {
            return fail(format!("visible counts {}/{} != {}", s.visible_m1, s.visible_m2, counts.keep));
        }
        if s.overlap != counts.overlap {
            return fail(format!("overlap {} != {}", s.overlap, counts.overlap));
        }
        if by_loss {
            let hi = (0..self.m1.len()).filter(|&i| self.m1.is_masked(i) && self.m2.is_masked(i));
            let lo = (0..self.m1.len()).filter(|&i| self.m1.is_masked(i) && !self.m2.is_masked(i));
            let min_hi = hi.map(|i| self.patch_losses[i]).fold(f32::INFINITY, f32::min);
            let max_lo = lo.map(|i| self.patch_losses[i]).fold(f32::NEG_INFINITY, f32::max);
            if max_lo > min_hi {
                return fail(format!("a visible patch has loss {max_lo} above a re-masked {min_hi}"));
            }
        }
        Ok(())
    }
}
