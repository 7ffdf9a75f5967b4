//! Local geometric consistency verification.

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::kdtree::KdTree;

/// Triangles with an edge shorter than this give no support.
pub const MIN_EDGE_PX: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleRule {
    /// `max |s_a − s_b| < τ_s` over the three edge ratios `s = l_x / l_y`.
    #[default]
    MaxPairwise,
    /// Sample variance of `(R_ik, R_ij, R_ik·R_ij)` below `τ_s`, with
    /// `R = l_y / l_x`. Pairs are counted once, so the support threshold is
    /// halved relative to an ordered count.
    TripletVariance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LgcvConfig {
    pub k: usize,
    pub tau_a: f64,
    pub tau_s: f64,
    pub support: f64,
    pub eps: f64,
    pub rule: ScaleRule,
}

impl Default for LgcvConfig {
    fn default() -> Self {
        Self { k: 8, tau_a: 0.9659, tau_s: 0.1, support: 4.0, eps: 1e-12, rule: ScaleRule::MaxPairwise }
    }
}

impl LgcvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParams("lgcv needs k >= 2".into()));
        }
        if !(self.tau_a > 0.0 && self.tau_a < 1.0) {
            return Err(Error::InvalidParams("tau_a must lie in (0, 1)".into()));
        }
        if !(self.tau_s > 0.0) || !(self.support >= 0.0) || !(self.eps >= 0.0) {
            return Err(Error::InvalidParams("tau_s must be positive, support and eps non-negative".into()));
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        match self.rule {
            ScaleRule::MaxPairwise => self.support,
            ScaleRule::TripletVariance => self.support / 2.0,
        }
    }
}

fn sub(a: &PixelPoint, b: &PixelPoint) -> (f64, f64) {
    (a.u - b.u, a.v - b.v)
}

fn cos_at_vertex(i: &PixelPoint, j: &PixelPoint, k: &PixelPoint, lij: f64, lik: f64) -> f64 {
    let (a, b) = (sub(j, i), sub(k, i));
    (a.0 / lij) * (b.0 / lik) + (a.1 / lij) * (b.1 / lik)
}

fn unbiased_var(xs: [f64; 3]) -> f64 {
    let m = (xs[0] + xs[1] + xs[2]) / 3.0;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 2.0
}

/// Whether the triangle pair `(x_i x_j x_k, y_i y_j y_k)` supports match `i`.
fn supports(x: [&PixelPoint; 3], y: [&PixelPoint; 3], cfg: &LgcvConfig) -> bool {
    let edges = |p: [&PixelPoint; 3]| [p[1].distance(p[0]), p[2].distance(p[0]), p[2].distance(p[1])];
    let (lx, ly) = (edges(x), edges(y));
    if lx.iter().chain(&ly).any(|l| *l < MIN_EDGE_PX) {
        return false;
    }
    let cx = cos_at_vertex(x[0], x[1], x[2], lx[0], lx[1]);
    let cy = cos_at_vertex(y[0], y[1], y[2], ly[0], ly[1]);
    if (cx - cy).abs() >= 1.0 - cfg.tau_a {
        return false;
    }
    match cfg.rule {
        ScaleRule::MaxPairwise => {
            let s = [0, 1, 2].map(|e| lx[e] / (ly[e] + cfg.eps));
            let spread = (s[0] - s[1]).abs().max((s[0] - s[2]).abs()).max((s[1] - s[2]).abs());
            spread < cfg.tau_s
        }
        ScaleRule::TripletVariance => {
            let rj = ly[0] / (lx[0] + cfg.eps);
            let rk = ly[1] / (lx[1] + cfg.eps);
            unbiased_var([rk, rj, rk * rj]) < cfg.tau_s
        }
    }
}

/// Number of supporting triangle pairs for every match. Neighbourhoods are
/// the `k` nearest points in `x` other than the match itself.
pub fn lgcv_support(x: &[PixelPoint], y: &[PixelPoint], cfg: &LgcvConfig) -> Result<Vec<usize>> {
    use rayon::prelude::*;
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { expected: x.len(), got: y.len() });
    }
    if x.len() <= cfg.k {
        return Err(Error::TooFewMatches { needed: cfg.k + 1, got: x.len() });
    }
    let tree = KdTree::new(x.iter().map(|p| [p.u, p.v]).collect());
    Ok((0..x.len())
        .into_par_iter()
        .map(|i| {
            let hood: Vec<usize> = tree
                .nearest(&[x[i].u, x[i].v], cfg.k + 1)
                .into_iter()
                .map(|(j, _)| j)
                .filter(|&j| j != i)
                .take(cfg.k)
                .collect();
            let mut count = 0;
            for (a, &j) in hood.iter().enumerate() {
                for &l in &hood[a + 1..] {
                    count += supports([&x[i], &x[j], &x[l]], [&y[i], &y[j], &y[l]], cfg) as usize;
                }
            }
            count
        })
        .collect())
}

/// Validity mask: a match survives when enough of its local triangle pairs
/// agree in angle and scale.
pub fn lgcv_filter(x: &[PixelPoint], y: &[PixelPoint], cfg: &LgcvConfig) -> Result<Vec<bool>> {
    let threshold = cfg.threshold();
    Ok(lgcv_support(x, y, cfg)?.into_iter().map(|s| s as f64 >= threshold).collect())
}
