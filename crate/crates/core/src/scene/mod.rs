//! Synthetic ground-truth scenes.
//!
//! A scene is a set of anisotropic Gaussians with latent unit features, a ring
//! of training cameras on a hemisphere, a diagonal feature-noise covariance
//! and per-view keypoints. Observed 2D features follow `f = μ + ε`,
//! `ε ~ N(0, Σ)`, drawn independently for every (view, Gaussian) pair.

mod format;

use std::collections::HashMap;

use nalgebra::{DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{in_frustum, project, Camera, Intrinsics, PixelPoint, Pose};
use crate::rng::{self, label, Rng};

/// Occluder must be at least this much closer (relative depth).
const OCCLUSION_DEPTH_MARGIN: f64 = 0.01;
/// Occluder center must project within this many pixels.
const OCCLUSION_RADIUS_PX: f64 = 0.5;
/// Screen-space footprint cut-off in standard deviations.
const FOOTPRINT_SIGMAS: f64 = 3.0;
const MIN_ALPHA: f64 = 1.0 / 255.0;
const MAX_ALPHA: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    pub scales: Vector3<f64>,
    /// Rotation of the local scale axes.
    pub orientation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub true_feature: DVector<f64>,
    pub stored_feature: Option<DVector<f64>>,
}

impl Gaussian {
    pub fn orientation_matrix(&self) -> Matrix3<f64> {
        *self.orientation.to_rotation_matrix().matrix()
    }

    /// `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.orientation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scales.component_mul(&self.scales));
        r * s2 * r.transpose()
    }

    /// Standard deviation of the isotropic screen footprint at `depth`.
    pub fn footprint_sigma_px(&self, focal: f64, depth: f64) -> f64 {
        focal * self.scales.max() / depth
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scales.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidConfig("gaussian scales must be positive".into()));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::InvalidConfig("gaussian opacity must be in (0, 1]".into()));
        }
        if !self.true_feature.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidConfig("gaussian feature must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub n_gaussians: usize,
    pub n_cameras: usize,
    pub feature_dim: usize,
    /// Per-component standard deviation of the view noise.
    pub sigma: f64,
    /// Radius of the ball holding the Gaussian centers.
    pub extent: f64,
    /// Fraction of clutter among each view's keypoints.
    pub clutter_fraction: f64,
    /// Fraction of Gaussians that produce keypoints.
    pub textured_fraction: f64,
    /// Correlation of the noise of one Gaussian across views (0 = independent).
    pub view_correlation: f64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 1000,
            n_cameras: 24,
            feature_dim: 32,
            sigma: 0.05,
            extent: 1.0,
            clutter_fraction: 0.2,
            textured_fraction: 0.5,
            view_correlation: 0.0,
            width: 640,
            height: 480,
            focal: 500.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_gaussians == 0 || self.n_cameras == 0 {
            return bad("n_gaussians and n_cameras must be positive");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be non-negative");
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        if !(0.0..=1.0).contains(&self.clutter_fraction) {
            return bad("clutter_fraction must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.textured_fraction) {
            return bad("textured_fraction must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.view_correlation) {
            return bad("view_correlation must be in [0, 1]");
        }
        if self.width < 2 || self.height < 2 || !(self.focal > 0.0) {
            return bad("image size and focal length must be positive");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    /// Distance of the camera hemisphere from the scene centroid.
    pub fn camera_distance(&self) -> f64 {
        3.0 * self.extent
    }
}

/// A 2D keypoint with its descriptor. `source` names the Gaussian that
/// produced it; clutter keypoints have none.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub pixel: PixelPoint,
    pub descriptor: DVector<f64>,
    pub source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub seed: u64,
    pub gaussians: Vec<Gaussian>,
    pub cameras: Vec<Camera>,
    /// Diagonal of Σ.
    pub noise_cov: Vec<f64>,
    /// Gaussians that produce keypoints.
    pub textured: Vec<bool>,
    pub keypoints_per_view: Vec<Vec<Keypoint>>,
}

/// Features seen from one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservation {
    pub view: usize,
    pub visible: Vec<bool>,
    /// Present only for visible Gaussians.
    pub features: Vec<Option<DVector<f64>>>,
    pub pixels: Vec<Option<PixelPoint>>,
    pub depths: Vec<Option<f64>>,
}

impl ViewObservation {
    pub fn visible_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.visible.iter().enumerate().filter(|(_, v)| **v).map(|(i, _)| i)
    }
}

/// One Gaussian crossing a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub index: usize,
    pub alpha: f64,
    pub depth: f64,
}

/// Result of front-to-back compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedRay {
    pub feature: DVector<f64>,
    /// `w_i = α_i T_i` per entry.
    pub weights: Vec<f64>,
    /// `Π_i (1 − α_i)`.
    pub residual_transmittance: f64,
}

/// α-blends features front to back: `F = Σ f_i α_i T_i`, `T_i = Π_{j<i} (1 − α_j)`.
pub fn render_feature_ray(entries: &[(&DVector<f64>, f64)], dim: usize) -> BlendedRay {
    let mut feature = DVector::zeros(dim);
    let mut weights = Vec::with_capacity(entries.len());
    let mut transmittance = 1.0;
    for (f, alpha) in entries {
        let w = alpha * transmittance;
        feature.axpy(w, f, 1.0);
        weights.push(w);
        transmittance *= 1.0 - alpha;
    }
    BlendedRay { feature, weights, residual_transmittance: transmittance }
}

pub fn random_unit_vector(rng: &mut Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut *rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

fn random_rotation(rng: &mut Rng) -> UnitQuaternion<f64> {
    let q = Quaternion::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    );
    UnitQuaternion::from_quaternion(q)
}

/// Camera on the viewing hemisphere around `centroid`.
fn hemisphere_camera(
    rng: &mut Rng,
    config: &SceneConfig,
    intrinsics: Intrinsics,
    centroid: &Vector3<f64>,
) -> Result<Camera> {
    let azimuth: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let elevation: f64 = rng.random_range(10f64.to_radians()..70f64.to_radians());
    let r = config.camera_distance();
    let center =
        centroid + r * Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
    let pose = Pose::look_at(center, *centroid, Vector3::z())?;
    Camera::new(intrinsics, pose)
}

/// Generates a deterministic scene for `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng::stream(seed, label::SCENE, 0);
    let d = config.feature_dim;
    let mut gaussians = Vec::with_capacity(config.n_gaussians);
    let mut textured = Vec::with_capacity(config.n_gaussians);
    for _ in 0..config.n_gaussians {
        let center = loop {
            let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if p.norm() <= 1.0 {
                break p * config.extent;
            }
        };
        let a = config.extent * rng.random_range(0.03..0.08);
        let b = config.extent * rng.random_range(0.03..0.08);
        let c = a.min(b) * rng.random_range(0.1..0.3);
        gaussians.push(Gaussian {
            center,
            scales: Vector3::new(a, b, c),
            orientation: random_rotation(&mut rng),
            opacity: rng.random_range(0.3..0.95),
            true_feature: random_unit_vector(&mut rng, d),
            stored_feature: None,
        });
        textured.push(rng.random_bool(config.textured_fraction));
    }
    let centroid = gaussians.iter().map(|g| g.center).sum::<Vector3<f64>>() / gaussians.len() as f64;
    let intrinsics = config.intrinsics()?;
    let cameras = (0..config.n_cameras)
        .map(|_| hemisphere_camera(&mut rng, config, intrinsics, &centroid))
        .collect::<Result<Vec<_>>>()?;
    let mut scene = Scene {
        config: config.clone(),
        seed,
        gaussians,
        cameras,
        noise_cov: vec![config.sigma * config.sigma; d],
        textured,
        keypoints_per_view: Vec::new(),
    };
    let keypoints = (0..scene.cameras.len())
        .map(|k| synthesize_keypoints(&scene, k, config.clutter_fraction, seed))
        .collect::<Result<Vec<_>>>()?;
    scene.keypoints_per_view = keypoints;
    Ok(scene)
}

/// Visibility, pixel and depth of every Gaussian in one camera. A Gaussian is
/// occluded when another center projects within half a pixel at a depth more
/// than 1% smaller.
pub fn visibility(scene: &Scene, camera: &Camera) -> (Vec<bool>, Vec<Option<PixelPoint>>, Vec<Option<f64>>) {
    let n = scene.gaussians.len();
    let mut pixels = vec![None; n];
    let mut depths = vec![None; n];
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        if let Ok((px, depth)) = project(camera, &g.center) {
            pixels[i] = Some(px);
            depths[i] = Some(depth);
            buckets.entry((px.u.floor() as i64, px.v.floor() as i64)).or_default().push(i);
        }
    }
    let mut visible = vec![false; n];
    for i in 0..n {
        let (Some(px), Some(depth)) = (pixels[i], depths[i]) else { continue };
        if !camera.intrinsics.contains(&px, 0.0) {
            continue;
        }
        let (bu, bv) = (px.u.floor() as i64, px.v.floor() as i64);
        let mut occluded = false;
        'search: for du in -1..=1 {
            for dv in -1..=1 {
                if let Some(cell) = buckets.get(&(bu + du, bv + dv)) {
                    for &j in cell {
                        if j == i {
                            continue;
                        }
                        let (pj, dj) = (pixels[j].unwrap(), depths[j].unwrap());
                        if pj.distance(&px) <= OCCLUSION_RADIUS_PX && dj < depth * (1.0 - OCCLUSION_DEPTH_MARGIN) {
                            occluded = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        visible[i] = !occluded;
    }
    (visible, pixels, depths)
}

/// Observes every Gaussian from `camera`, drawing the noise from `rng`
/// (`noise_std` per component). `shared_seed`, when given, mixes in a
/// per-Gaussian component common to all views with weight `correlation`.
pub fn observe_with(
    scene: &Scene,
    camera: &Camera,
    view: usize,
    noise_std: &[f64],
    rng: &mut Rng,
    shared: Option<(u64, f64)>,
) -> ViewObservation {
    let (visible, pixels, depths) = visibility(scene, camera);
    let d = noise_std.len();
    let mut features = Vec::with_capacity(scene.gaussians.len());
    for (i, g) in scene.gaussians.iter().enumerate() {
        // Draw for every Gaussian so a Gaussian's noise does not depend on the
        // visibility of the others.
        let eta: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut *rng));
        if !visible[i] {
            features.push(None);
            continue;
        }
        let eps = match shared {
            Some((seed, rho)) if rho > 0.0 => {
                let mut srng = rng::stream(seed, label::OBSERVE_SHARED, i as u64);
                let common: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut srng));
                eta * (1.0 - rho).sqrt() + common * rho.sqrt()
            }
            _ => eta,
        };
        let f = DVector::from_fn(d, |c, _| g.true_feature[c] + noise_std[c] * eps[c]);
        features.push(Some(f));
    }
    ViewObservation { view, visible, features, pixels, depths }
}

/// Noisy 2D features of every visible Gaussian in training view `view`.
pub fn observe_features(scene: &Scene, view: usize, seed: u64) -> Result<ViewObservation> {
    let camera = scene.cameras.get(view).ok_or_else(|| Error::InvalidParams(format!("view {view} out of range")))?;
    let std = scene.noise_std();
    let mut rng = rng::stream(seed, label::OBSERVE, view as u64);
    let shared = Some((seed, scene.config.view_correlation));
    Ok(observe_with(scene, camera, view, &std, &mut rng, shared))
}

/// Number of clutter keypoints accompanying `textured` real ones so that
/// clutter makes up the fraction `clutter` of the total.
pub fn clutter_count(textured: usize, clutter: f64, visible: usize) -> usize {
    if clutter >= 1.0 {
        visible
    } else {
        (textured as f64 * clutter / (1.0 - clutter)).round() as usize
    }
}

/// Keypoints for view `view`: textured visible Gaussians at their exact
/// projections with their observed features as descriptors, plus clutter at
/// uniform pixels with random descriptors. With `clutter = 1` only clutter is
/// produced, one point per visible Gaussian.
pub fn synthesize_keypoints(scene: &Scene, view: usize, clutter: f64, seed: u64) -> Result<Vec<Keypoint>> {
    if !(0.0..=1.0).contains(&clutter) {
        return Err(Error::InvalidConfig("clutter fraction must be in [0, 1]".into()));
    }
    let obs = observe_features(scene, view, seed)?;
    let mut out = Vec::new();
    let n_visible = obs.visible_indices().count();
    if clutter < 1.0 {
        for i in obs.visible_indices() {
            if scene.textured[i] {
                out.push(Keypoint {
                    pixel: obs.pixels[i].expect("visible gaussian has a pixel"),
                    descriptor: obs.features[i].clone().expect("visible gaussian has a feature"),
                    source: Some(i),
                });
            }
        }
    }
    let n_clutter = clutter_count(out.len(), clutter, n_visible);
    let mut rng = rng::stream(seed, label::KEYPOINTS, view as u64);
    let k = &scene.cameras[view].intrinsics;
    for _ in 0..n_clutter {
        let pixel = PixelPoint::new(rng.random_range(0.0..k.width as f64), rng.random_range(0.0..k.height as f64));
        out.push(Keypoint { pixel, descriptor: random_unit_vector(&mut rng, scene.config.feature_dim), source: None });
    }
    Ok(out)
}

impl Scene {
    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.noise_cov.iter().map(|v| v.sqrt()).collect()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.gaussians.iter().map(|g| g.center).sum::<Vector3<f64>>() / self.gaussians.len() as f64
    }

    /// Observations of all training views.
    pub fn observe_all(&self, seed: u64) -> Vec<ViewObservation> {
        use rayon::prelude::*;
        (0..self.cameras.len())
            .into_par_iter()
            .map(|k| observe_features(self, k, seed).expect("view index in range"))
            .collect()
    }

    /// A held-out camera drawn from the same hemisphere as the training views.
    pub fn query_camera(&self, index: u64, seed: u64) -> Result<Camera> {
        let mut rng = rng::stream(seed, label::QUERY, index);
        hemisphere_camera(&mut rng, &self.config, self.config.intrinsics()?, &self.centroid())
    }

    /// Gaussians crossing the ray of `pixel`, sorted front to back by center
    /// depth. Each contributes `α = opacity · exp(−r² / 2s²)` with an isotropic
    /// screen footprint `s`.
    pub fn ray_hits(&self, camera: &Camera, pixel: &PixelPoint) -> Vec<RayHit> {
        let mut hits = Vec::new();
        for (i, g) in self.gaussians.iter().enumerate() {
            let Ok((px, depth)) = project(camera, &g.center) else { continue };
            let s = g.footprint_sigma_px(camera.intrinsics.fx, depth);
            let r = px.distance(pixel);
            if r > FOOTPRINT_SIGMAS * s {
                continue;
            }
            let alpha = (g.opacity * (-0.5 * r * r / (s * s)).exp()).min(MAX_ALPHA);
            if alpha < MIN_ALPHA {
                continue;
            }
            hits.push(RayHit { index: i, alpha, depth });
        }
        hits.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        hits
    }

    pub fn in_view(&self, view: usize, index: usize) -> bool {
        in_frustum(&self.cameras[view], &self.gaussians[index].center, 0.0)
    }

    /// SHA-256 of the canonical text serialization.
    pub fn content_hash(&self) -> String {
        crate::textio::sha256_hex(&self.to_text())
    }
}

#[cfg(test)]
mod tests;
