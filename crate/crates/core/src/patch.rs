//! Image <-> patch token conversion.

use crate::data::MultiChannelImage;
use crate::error::{DamaError, Result};

/// An image cut into non-overlapping `patch × patch` tiles.
///
/// Token `i` covers grid cell `(i / cols, i % cols)`; inside a token,
/// pixels are row-major and channels are last.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// `len() × token_dim()` values.
    pub tokens: Vec<f32>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.token_dim();
        &self.tokens[i * d..(i + 1) * d]
    }

    /// Grid cell (row, col) of token `i`.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }
}

pub fn patchify(img: &MultiChannelImage, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(DamaError::Shape(format!(
            "{}x{} image is not divisible into {patch}px patches",
            img.height, img.width
        )));
    }
    let (rows, cols, c) = (img.height / patch, img.width / patch, img.channels);
    let mut tokens = Vec::with_capacity(img.data.len());
    for r in 0..rows {
        for q in 0..cols {
            for y in r * patch..(r + 1) * patch {
                let start = (y * img.width + q * patch) * c;
                tokens.extend_from_slice(&img.data[start..start + patch * c]);
            }
        }
    }
    Ok(PatchGrid { patch, channels: c, rows, cols, tokens })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<MultiChannelImage> {
    if grid.tokens.len() != grid.len() * grid.token_dim() || grid.is_empty() {
        return Err(DamaError::Shape(format!(
            "{} token values do not fill a {}x{} grid of {}-dim tokens",
            grid.tokens.len(),
            grid.rows,
            grid.cols,
            grid.token_dim()
        )));
    }
    let (p, c) = (grid.patch, grid.channels);
    let mut img = MultiChannelImage::zeros(grid.rows * p, grid.cols * p, c);
    let row_len = p * c;
    for i in 0..grid.len() {
        let (r, q) = grid.cell(i);
        for (dy, chunk) in grid.token(i).chunks(row_len).enumerate() {
            let start = ((r * p + dy) * img.width + q * p) * c;
            img.data[start..start + row_len].copy_from_slice(chunk);
        }
    }
    Ok(img)
}

/// Per-patch reconstruction targets. With `normalize`, every patch is
/// shifted and scaled to zero mean and unit variance (eps 1e-6).
pub fn patch_targets(grid: &PatchGrid, normalize: bool) -> Vec<f32> {
    if !normalize {
        return grid.tokens.clone();
    }
    let d = grid.token_dim();
    let mut out = Vec::with_capacity(grid.tokens.len());
    for tok in grid.tokens.chunks(d) {
        let mean = tok.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = tok.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        out.extend(tok.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> MultiChannelImage {
        let mut img = MultiChannelImage::zeros(h, w, c);
        img.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 997) as f32 / 997.0);
        img
    }

    #[test]
    fn token_counts() {
        assert_eq!(patchify(&ramp(128, 128, 7), 16).unwrap().len(), 64);
        assert_eq!(patchify(&ramp(64, 64, 7), 8).unwrap().len(), 64);
    }

    #[test]
    fn round_trip_is_exact() {
        for size in [32, 64, 128] {
            let img = ramp(size, size, 7);
            let grid = patchify(&img, 8).unwrap();
            assert_eq!(unpatchify(&grid).unwrap(), img);
        }
    }

    #[test]
    fn token_layout_matches_grid_cell() {
        let img = ramp(32, 48, 3);
        let grid = patchify(&img, 8).unwrap();
        assert_eq!((grid.rows, grid.cols), (4, 6));
        let i = 13;
        let (r, q) = grid.cell(i);
        assert_eq!((r, q), (2, 1));
        // pixel (dy=3, dx=5, ch=2) of token 13
        assert_eq!(grid.token(i)[(3 * 8 + 5) * 3 + 2], img.at(r * 8 + 3, q * 8 + 5, 2));
    }

    #[test]
    fn indivisible_size_is_rejected() {
        assert!(matches!(patchify(&ramp(30, 32, 1), 8), Err(DamaError::Shape(_))));
        let mut grid = patchify(&ramp(16, 16, 1), 8).unwrap();
        grid.rows = 3;
        assert!(unpatchify(&grid).is_err());
    }

    #[test]
    fn targets() {
        let mut img = ramp(16, 16, 2);
        let grid = patchify(&img, 8).unwrap();
        assert_eq!(patch_targets(&grid, false), grid.tokens);
        for t in patch_targets(&grid, true).chunks(grid.token_dim()) {
            let mean: f64 = t.iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
            assert!(mean.abs() < 1e-5);
        }
        img.data.iter_mut().for_each(|v| *v = 0.3);
        let flat = patch_targets(&patchify(&img, 8).unwrap(), true);
        assert!(flat.iter().all(|&v| v == 0.0));
    }
}
