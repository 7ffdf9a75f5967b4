//! Labeled synthetic match sets and the LGCV threshold sweep built on them.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;
use crate::rng::{self, label};

use super::lgcv::{lgcv_filter, LgcvConfig};

/// 2D similarity `y = s·R(θ)·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity2 {
    pub angle: f64,
    pub scale: f64,
    pub t: (f64, f64),
}

impl Similarity2 {
    pub fn apply(&self, p: &PixelPoint) -> PixelPoint {
        let (s, c) = self.angle.sin_cos();
        PixelPoint::new(self.scale * (c * p.u - s * p.v) + self.t.0, self.scale * (s * p.u + c * p.v) + self.t.1)
    }

    pub fn random(rng: &mut rng::Rng) -> Self {
        Self {
            angle: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            scale: rng.random_range(0.7..1.4),
            t: (rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatches {
    pub x: Vec<PixelPoint>,
    pub y: Vec<PixelPoint>,
    pub inlier: Vec<bool>,
}

impl LabeledMatches {
    /// Inliers follow `sim` up to isotropic Gaussian noise; outliers land
    /// uniformly in the target image. Points are spread over `width × height`.
    pub fn generate(
        n: usize,
        outlier_fraction: f64,
        noise_px: f64,
        sim: &Similarity2,
        (width, height): (f64, f64),
        rng: &mut rng::Rng,
    ) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        if !(0.0..=1.0).contains(&outlier_fraction) || !(noise_px >= 0.0) || !(width > 0.0 && height > 0.0) {
            return Err(Error::InvalidParams("bad synthetic match parameters".into()));
        }
        let noise = Normal::new(0.0, noise_px).map_err(|e| Error::InvalidParams(e.to_string()))?;
        let n_out = (outlier_fraction * n as f64).round() as usize;
        let mut m = Self { x: Vec::with_capacity(n), y: Vec::with_capacity(n), inlier: Vec::with_capacity(n) };
        for i in 0..n {
            let x = PixelPoint::new(rng.random_range(0.0..width), rng.random_range(0.0..height));
            let is_in = i >= n_out;
            let y = if is_in {
                let p = sim.apply(&x);
                PixelPoint::new(p.u + noise.sample(rng), p.v + noise.sample(rng))
            } else {
                PixelPoint::new(rng.random_range(0.0..width), rng.random_range(0.0..height))
            };
            m.x.push(x);
            m.y.push(y);
            m.inlier.push(is_in);
        }
        Ok(m)
    }

    /// Fraction of inliers among the masked matches; NaN when the mask is empty.
    pub fn precision(&self, mask: &[bool]) -> f64 {
        let kept = mask.iter().filter(|&&k| k).count();
        let good = mask.iter().zip(&self.inlier).filter(|(&k, &i)| k && i).count();
        if kept == 0 {
            f64::NAN
        } else {
            good as f64 / kept as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub trials: usize,
    pub matches: usize,
    pub outlier_fraction: f64,
    pub inlier_noise_px: f64,
    /// `k`, `support`, `eps` and `rule` are taken from here; the thresholds
    /// come from the grid.
    pub base: LgcvConfig,
    pub width: f64,
    pub height: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            matches: 300,
            outlier_fraction: 0.5,
            inlier_noise_px: 0.5,
            base: LgcvConfig::default(),
            width: 640.0,
            height: 480.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub tau_a: f64,
    pub tau_s: f64,
    /// Pooled over trials; NaN if nothing survived.
    pub precision: f64,
    pub recall: f64,
    pub kept: usize,
    pub total: usize,
}

pub const SWEEP_CSV_HEADER: &str = "tau_a,tau_s,precision,recall,kept,total,input_precision";

/// Post-filter precision and recall for every `(τ_a, τ_s)` pair. All cells
/// see the same seeded match sets.
pub fn lgcv_sweep(tau_a: &[f64], tau_s: &[f64], cfg: &SweepConfig, seed: u64) -> Result<(Vec<SweepCell>, f64)> {
    use rayon::prelude::*;
    if tau_a.is_empty() || tau_s.is_empty() || cfg.trials == 0 {
        return Err(Error::InvalidConfig("sweep needs non-empty threshold lists and trials".into()));
    }
    let sets = (0..cfg.trials as u64)
        .map(|t| {
            let mut r = rng::stream(seed, label::SWEEP, t);
            let sim = Similarity2::random(&mut r);
            LabeledMatches::generate(
                cfg.matches,
                cfg.outlier_fraction,
                cfg.inlier_noise_px,
                &sim,
                (cfg.width, cfg.height),
                &mut r,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let n_in: usize = sets.iter().map(|s| s.inlier.iter().filter(|&&i| i).count()).sum();
    let n_all: usize = sets.iter().map(|s| s.inlier.len()).sum();
    let input_precision = if n_all == 0 { f64::NAN } else { n_in as f64 / n_all as f64 };
    let grid: Vec<(f64, f64)> = tau_a.iter().flat_map(|&a| tau_s.iter().map(move |&s| (a, s))).collect();
    let cells = grid
        .par_iter()
        .map(|&(a, s)| {
            let lgcv = LgcvConfig { tau_a: a, tau_s: s, ..cfg.base };
            let (mut kept, mut good) = (0, 0);
            for set in &sets {
                let mask = lgcv_filter(&set.x, &set.y, &lgcv)?;
                kept += mask.iter().filter(|&&k| k).count();
                good += mask.iter().zip(&set.inlier).filter(|(&k, &i)| k && i).count();
            }
            Ok(SweepCell {
                tau_a: a,
                tau_s: s,
                precision: if kept == 0 { f64::NAN } else { good as f64 / kept as f64 },
                recall: if n_in == 0 { f64::NAN } else { good as f64 / n_in as f64 },
                kept,
                total: n_all,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cells, input_precision))
}

pub fn sweep_csv(cells: &[SweepCell], input_precision: f64) -> String {
    use std::fmt::Write as _;
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{},{:.6}",
            c.tau_a, c.tau_s, c.precision, c.recall, c.kept, c.total, input_precision
        );
    }
    out
}
