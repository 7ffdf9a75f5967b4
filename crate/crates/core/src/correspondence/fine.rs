//! Fine matching inside 8×8 windows of full-resolution feature maps.

use nalgebra::{DMatrix, DVector};

use super::{cosine_similarity_matrix, dual_softmax, mnn};
use crate::error::{Error, Result};
use crate::geometry::PixelPoint;

/// Fine cells per coarse cell along each axis.
pub const FINE_WINDOW: usize = 8;

const EMPTY: u32 = u32::MAX;

/// Sparse per-cell feature map. Cells without a feature are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    dim: usize,
    index: Vec<u32>,
    features: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        Self { width, height, dim, index: vec![EMPTY; width * height], features: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn valid_cells(&self) -> usize {
        self.features.len() / self.dim.max(1)
    }

    pub fn set(&mut self, x: usize, y: usize, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: feature.len() });
        }
        if x >= self.width || y >= self.height {
            return Err(Error::InvalidParams(format!("cell ({x}, {y}) outside {}x{}", self.width, self.height)));
        }
        let slot = &mut self.index[y * self.width + x];
        if *slot == EMPTY {
            *slot = (self.features.len() / self.dim) as u32;
            self.features.extend_from_slice(feature);
        } else {
            let start = *slot as usize * self.dim;
            self.features[start..start + self.dim].copy_from_slice(feature);
        }
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize) -> Option<&[f64]> {
        if x >= self.width || y >= self.height {
            return None;
        }
        match self.index[y * self.width + x] {
            EMPTY => None,
            slot => {
                let start = slot as usize * self.dim;
                Some(&self.features[start..start + self.dim])
            }
        }
    }

    /// Valid cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = ((usize, usize), &[f64])> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).filter_map(move |x| self.get(x, y).map(|f| ((x, y), f))))
    }

    /// Top-left fine cell and extent of the window under coarse cell `c`,
    /// clamped to the map.
    fn window(&self, c: (usize, usize)) -> (usize, usize, usize, usize) {
        let clamp = |coarse: usize, len: usize| {
            let size = FINE_WINDOW.min(len);
            ((coarse * FINE_WINDOW).min(len - size), size)
        };
        let (x0, w) = clamp(c.0, self.width);
        let (y0, h) = clamp(c.1, self.height);
        (x0, y0, w, h)
    }

    fn window_cells(&self, c: (usize, usize)) -> (Vec<(usize, usize)>, Vec<DVector<f64>>) {
        let (x0, y0, w, h) = self.window(c);
        let mut cells = Vec::new();
        let mut feats = Vec::new();
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if let Some(f) = self.get(x, y) {
                    cells.push((x, y));
                    feats.push(DVector::from_column_slice(f));
                }
            }
        }
        (cells, feats)
    }
}

/// Fine correspondence between two map cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch {
    pub query: (usize, usize),
    pub reference: (usize, usize),
    pub score: f64,
}

impl FineMatch {
    pub fn query_pixel(&self) -> PixelPoint {
        PixelPoint::new(self.query.0 as f64 + 0.5, self.query.1 as f64 + 0.5)
    }

    pub fn reference_pixel(&self) -> PixelPoint {
        PixelPoint::new(self.reference.0 as f64 + 0.5, self.reference.1 as f64 + 0.5)
    }
}

/// Matches the two windows under a coarse correspondence and keeps the mutual
/// pair with the highest dual-softmax probability.
pub fn fine_match_window(
    query_cell: (usize, usize),
    reference_cell: (usize, usize),
    query: &FeatureMap,
    reference: &FeatureMap,
    temperature: f64,
) -> Result<FineMatch> {
    if query.dim != reference.dim {
        return Err(Error::DimensionMismatch { expected: query.dim, got: reference.dim });
    }
    if query.width == 0 || query.height == 0 || reference.width == 0 || reference.height == 0 {
        return Err(Error::EmptyWindow);
    }
    let (qc, qf) = query.window_cells(query_cell);
    let (rc, rf) = reference.window_cells(reference_cell);
    if qf.is_empty() || rf.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let sim: DMatrix<f64> = cosine_similarity_matrix(&qf, &rf)?;
    let prob = dual_softmax(&sim, temperature)?;
    let best = mnn(&prob, None)
        .into_iter()
        .reduce(|a, b| if b.score > a.score { b } else { a })
        .expect("a global maximum is always mutual");
    Ok(FineMatch { query: qc[best.query], reference: rc[best.reference], score: best.score })
}

/// Fine matches for a list of coarse cell pairs; `None` marks empty windows.
pub fn fine_match(
    coarse: &[((usize, usize), (usize, usize))],
    query: &FeatureMap,
    reference: &FeatureMap,
    temperature: f64,
) -> Result<Vec<Option<FineMatch>>> {
    use rayon::prelude::*;
    coarse
        .par_iter()
        .map(|&(q, r)| match fine_match_window(q, r, query, reference, temperature) {
            Ok(m) => Ok(Some(m)),
            Err(Error::EmptyWindow) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}
