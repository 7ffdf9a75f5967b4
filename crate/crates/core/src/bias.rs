//! Bias of alpha-blended feature optimization.
//!
//! A pixel that mixes a target Gaussian with the Gaussians around it is written
//! as `F = w·f_t + (1 − w)·B`. Fitting `f_t` to noisy 2D features under that
//! model gives a closed-form optimum whose expectation differs from the true
//! feature unless every view sees the target at full weight or the background
//! already equals the target. This module evaluates the optimum, its analytic
//! and Monte-Carlo bias, and the per-Gaussian feature-distance diagnostic.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fusion::{fuse_gaussian, NormalMode};
use crate::rng::{self, label};
use crate::scene::{render_feature_ray, Scene, ViewObservation};

/// Weights at or above this are treated as a full contribution.
pub const FULL_CONTRIBUTION_TOL: f64 = 1e-12;
/// Lower bound on `Σ w_k²` for a well-posed optimum.
pub const MIN_WEIGHT_SQ_SUM: f64 = 1e-15;
pub const MIN_TRIALS: usize = 100;

/// Per-view target weights and normalized backgrounds for one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendDecomposition {
    pub weights: Vec<f64>,
    pub backgrounds: Vec<DVector<f64>>,
}

impl BlendDecomposition {
    pub fn views(&self) -> usize {
        self.weights.len()
    }
}

/// Splits a front-to-back sorted ray into `(w_t, B)` with `w_t = α_t T_t` and
/// `B = Σ_{i≠t} f_i α_i T_i / (1 − w_t)`. Transmittance left over after the
/// last entry acts as a zero feature, so `F = w_t f_t + (1 − w_t) B` exactly.
pub fn decompose_blend(entries: &[(&DVector<f64>, f64)], target: usize) -> Result<(f64, DVector<f64>)> {
    if target >= entries.len() {
        return Err(Error::InvalidParams(format!("target {target} outside ray of {}", entries.len())));
    }
    let dim = entries[target].0.len();
    let ray = render_feature_ray(entries, dim);
    let w = ray.weights[target];
    if w >= 1.0 - FULL_CONTRIBUTION_TOL {
        return Err(Error::FullContribution(w));
    }
    let mut background = DVector::zeros(dim);
    for (i, ((f, _), wi)) in entries.iter().zip(&ray.weights).enumerate() {
        if i != target {
            background.axpy(*wi, f, 1.0);
        }
    }
    Ok((w, background / (1.0 - w)))
}

fn check_views(n_obs: usize, w: &[f64], b: &[DVector<f64>]) -> Result<f64> {
    if w.len() != n_obs {
        return Err(Error::LengthMismatch { expected: n_obs, got: w.len() });
    }
    if b.len() != n_obs {
        return Err(Error::LengthMismatch { expected: n_obs, got: b.len() });
    }
    let s: f64 = w.iter().map(|x| x * x).sum();
    if s <= MIN_WEIGHT_SQ_SUM {
        return Err(Error::DegenerateWeights(s));
    }
    Ok(s)
}

/// Least-squares optimum `f* = Σ w_k (f_k − (1 − w_k) B_k) / Σ w_k²`.
pub fn optimal_feature_joint(observations: &[DVector<f64>], w: &[f64], b: &[DVector<f64>]) -> Result<DVector<f64>> {
    let s = check_views(observations.len(), w, b)?;
    let dim = observations[0].len();
    let mut acc = DVector::zeros(dim);
    for ((f, wk), bk) in observations.iter().zip(w).zip(b) {
        if f.len() != dim || bk.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.len().max(bk.len()) });
        }
        acc.axpy(*wk, f, 1.0);
        acc.axpy(-wk * (1.0 - wk), bk, 1.0);
    }
    Ok(acc / s)
}

/// `E[f*] − μ = Σ w_k (1 − w_k)(μ − B_k) / Σ w_k²`.
pub fn analytic_bias(mu: &DVector<f64>, w: &[f64], b: &[DVector<f64>]) -> Result<DVector<f64>> {
    let s = check_views(w.len(), w, b)?;
    let mut acc = DVector::zeros(mu.len());
    for (wk, bk) in w.iter().zip(b) {
        if bk.len() != mu.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: bk.len() });
        }
        acc += (mu - bk) * (wk * (1.0 - wk));
    }
    Ok(acc / s)
}

/// Single-view bias `((1 − w)/w)(μ − B)`, averaged over views.
pub fn single_view_bias(mu: &DVector<f64>, w: &[f64], b: &[DVector<f64>]) -> Result<DVector<f64>> {
    check_views(w.len(), w, b)?;
    if let Some(&wk) = w.iter().find(|wk| **wk <= 0.0) {
        return Err(Error::DegenerateWeights(wk));
    }
    let mut acc = DVector::zeros(mu.len());
    for (wk, bk) in w.iter().zip(b) {
        acc += (mu - bk) * ((1.0 - wk) / wk);
    }
    Ok(acc / w.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    /// Optimum at noise-free observations.
    pub optimal_feature: DVector<f64>,
    pub analytic_bias: DVector<f64>,
    pub single_view_bias: Option<DVector<f64>>,
    pub empirical_bias: DVector<f64>,
    pub trials: usize,
    pub std_error: DVector<f64>,
}

impl BiasReport {
    /// Components where `|empirical − analytic| > z · stderr`.
    pub fn disagreements(&self, z: f64) -> Vec<usize> {
        (0..self.analytic_bias.len())
            .filter(|&c| (self.empirical_bias[c] - self.analytic_bias[c]).abs() > z * self.std_error[c])
            .collect()
    }

    pub fn to_record(&self) -> String {
        let join = |v: &DVector<f64>| v.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(" ");
        let mut out = format!("trials {}\n", self.trials);
        out.push_str(&format!("optimal_feature {}\n", join(&self.optimal_feature)));
        out.push_str(&format!("analytic_bias {}\n", join(&self.analytic_bias)));
        match &self.single_view_bias {
            Some(v) => out.push_str(&format!("single_view_bias {}\n", join(v))),
            None => out.push_str("single_view_bias none\n"),
        }
        out.push_str(&format!("empirical_bias {}\n", join(&self.empirical_bias)));
        out.push_str(&format!("std_error {}\n", join(&self.std_error)));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,analytic,single_view,empirical,std_error\n");
        for c in 0..self.analytic_bias.len() {
            let sv = self.single_view_bias.as_ref().map_or("nan".to_string(), |v| format!("{:.9e}", v[c]));
            out.push_str(&format!(
                "{c},{:.9e},{sv},{:.9e},{:.9e}\n",
                self.analytic_bias[c], self.empirical_bias[c], self.std_error[c]
            ));
        }
        out
    }
}

/// Monte-Carlo estimate of the optimum's bias with observations
/// `f_k = μ + ε_k`, `ε_k ~ N(0, diag(noise_var))`. Trial `t` draws from its
/// own substream, so the result does not depend on the thread count.
pub fn empirical_bias(
    mu: &DVector<f64>,
    noise_var: &[f64],
    w: &[f64],
    b: &[DVector<f64>],
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    use rayon::prelude::*;
    if trials < MIN_TRIALS {
        return Err(Error::InvalidParams(format!("need at least {MIN_TRIALS} trials")));
    }
    if noise_var.len() != mu.len() {
        return Err(Error::DimensionMismatch { expected: mu.len(), got: noise_var.len() });
    }
    if noise_var.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParams("noise variances must be non-negative".into()));
    }
    let clean: Vec<DVector<f64>> = vec![mu.clone(); w.len()];
    let optimal_feature = optimal_feature_joint(&clean, w, b)?;
    let analytic = analytic_bias(mu, w, b)?;
    let single = single_view_bias(mu, w, b).ok();
    let std: Vec<f64> = noise_var.iter().map(|v| v.sqrt()).collect();

    let samples: Vec<DVector<f64>> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, label::BIAS_TRIAL, t);
            let obs: Vec<DVector<f64>> = (0..w.len())
                .map(|_| {
                    DVector::from_iterator(
                        mu.len(),
                        mu.iter().zip(&std).map(|(m, s)| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + s * z
                        }),
                    )
                })
                .collect();
            optimal_feature_joint(&obs, w, b).expect("weights already validated")
        })
        .collect();

    // Welford keeps the mean exact when every sample is identical.
    let mut mean = DVector::zeros(mu.len());
    let mut m2 = DVector::zeros(mu.len());
    for (n, x) in samples.iter().enumerate() {
        let delta = x - &mean;
        mean += &delta / (n + 1) as f64;
        m2 += delta.component_mul(&(x - &mean));
    }
    let n = trials as f64;
    let std_error = m2.map(|s| (s / (n - 1.0) / n).sqrt());
    Ok(BiasReport {
        optimal_feature,
        analytic_bias: analytic,
        single_view_bias: single,
        empirical_bias: mean - mu,
        trials,
        std_error,
    })
}

/// `𝒟 = 1 − mean_k cos(f, f_k)`, in `[0, 2]`.
pub fn feature_distance(feature: &DVector<f64>, observations: &[&DVector<f64>]) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::NoVisibleViews);
    }
    let nf = feature.norm();
    if nf == 0.0 {
        return Err(Error::ZeroVector);
    }
    let mut sum = 0.0;
    for obs in observations {
        if obs.len() != feature.len() {
            return Err(Error::DimensionMismatch { expected: feature.len(), got: obs.len() });
        }
        let no = obs.norm();
        if no == 0.0 {
            return Err(Error::ZeroVector);
        }
        sum += (feature.dot(obs) / (nf * no)).clamp(-1.0, 1.0);
    }
    Ok((1.0 - sum / observations.len() as f64).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Per-Gaussian least-squares optimum with all other Gaussians frozen at
    /// their true features.
    AlphaOptimum,
    /// Geometry-weighted fusion of the observations.
    Fused,
}

impl FeatureSource {
    pub fn label(self) -> &'static str {
        match self {
            FeatureSource::AlphaOptimum => "alpha_optimum",
            FeatureSource::Fused => "fused",
        }
    }
}

/// Per-view `(w_k, B_k)` of Gaussian `index` from the rays through its own
/// projected center, other Gaussians carrying their true features.
pub fn scene_decomposition(
    scene: &Scene,
    index: usize,
    observations: &[ViewObservation],
) -> Result<(BlendDecomposition, Vec<DVector<f64>>)> {
    let mut weights = Vec::new();
    let mut backgrounds = Vec::new();
    let mut feats = Vec::new();
    for obs in observations {
        let (Some(f), Some(px)) = (&obs.features[index], &obs.pixels[index]) else { continue };
        let hits = scene.ray_hits(&scene.cameras[obs.view], px);
        let Some(t) = hits.iter().position(|h| h.index == index) else { continue };
        let entries: Vec<(&DVector<f64>, f64)> =
            hits.iter().map(|h| (&scene.gaussians[h.index].true_feature, h.alpha)).collect();
        let (w, b) = match decompose_blend(&entries, t) {
            Ok(d) => d,
            Err(Error::FullContribution(_)) => (1.0, DVector::zeros(f.len())),
            Err(e) => return Err(e),
        };
        weights.push(w);
        backgrounds.push(b);
        feats.push(f.clone());
    }
    if feats.is_empty() {
        return Err(Error::NoVisibleViews);
    }
    Ok((BlendDecomposition { weights, backgrounds }, feats))
}

/// The alpha-blending optimum for one Gaussian. Falls back to the plain
/// observation mean when the weights are degenerate.
pub fn alpha_optimum_feature(scene: &Scene, index: usize, observations: &[ViewObservation]) -> Result<DVector<f64>> {
    let (d, feats) = scene_decomposition(scene, index, observations)?;
    match optimal_feature_joint(&feats, &d.weights, &d.backgrounds) {
        Err(Error::DegenerateWeights(_)) => {
            let sum = feats.iter().fold(DVector::zeros(feats[0].len()), |a, f| a + f);
            Ok(sum / feats.len() as f64)
        }
        r => r,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub source: FeatureSource,
    /// Per-Gaussian distances; `None` for Gaussians never seen.
    pub distances: Vec<Option<f64>>,
}

impl DistanceHistogram {
    pub fn scored(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        out
    }
}

/// Histogram over `[0, 2]` of per-Gaussian feature distances, using the
/// training observations drawn with `seed`.
pub fn distance_histogram(scene: &Scene, source: FeatureSource, bins: usize, seed: u64) -> Result<DistanceHistogram> {
    use rayon::prelude::*;
    if bins == 0 {
        return Err(Error::InvalidParams("bins must be positive".into()));
    }
    let observations = scene.observe_all(seed);
    let distances: Vec<Option<f64>> = (0..scene.gaussians.len())
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            let seen: Vec<&DVector<f64>> = observations.iter().filter_map(|o| o.features[i].as_ref()).collect();
            if seen.is_empty() {
                return Ok(None);
            }
            let feature = match source {
                FeatureSource::Fused => fuse_gaussian(scene, i, &observations, NormalMode::Global)?.feature,
                FeatureSource::AlphaOptimum => alpha_optimum_feature(scene, i, &observations)?,
            };
            match feature_distance(&feature, &seen) {
                Ok(d) => Ok(Some(d)),
                // A vanishing estimate points nowhere; score it as orthogonal.
                Err(Error::ZeroVector) => Ok(Some(1.0)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let edges: Vec<f64> = (0..=bins).map(|i| 2.0 * i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    let mut total = 0.0;
    for d in distances.iter().flatten() {
        counts[((d / 2.0 * bins as f64) as usize).min(bins - 1)] += 1;
        total += d;
    }
    let scored: usize = counts.iter().sum();
    if scored == 0 {
        return Err(Error::NoVisibleViews);
    }
    Ok(DistanceHistogram { edges, counts, mean: total / scored as f64, source, distances })
}
