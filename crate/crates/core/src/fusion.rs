//! Geometry-weighted feature fusion.
//!
//! A landmark's feature is the convex combination of its 2D observations,
//! weighted by the cosine between the Gaussian's surface normal (the axis of
//! its smallest scale) and the direction towards each observing camera.

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{viewing_direction, Camera};
use crate::sampling::LandmarkDb;
use crate::scene::{Gaussian, Scene, ViewObservation};

/// Floor applied to non-positive (grazing or back-facing) raw weights.
pub const GRAZING_WEIGHT: f64 = 1e-6;
const AMBIGUOUS_SCALE_TOL: f64 = 1e-9;

/// How the sign of the normal is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalMode {
    /// One sign per Gaussian, facing the centroid of the observing cameras.
    #[default]
    Global,
    /// Flip independently for every view (every weight becomes `|n·d|`).
    PerView,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    pub views: Vec<usize>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl FusionWeights {
    pub fn uniform(views: Vec<usize>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::NoVisibleViews);
        }
        let k = views.len();
        Ok(Self { raw: vec![1.0; k], normalized: vec![1.0 / k as f64; k], views })
    }

    fn from_raw(views: Vec<usize>, raw: Vec<f64>) -> Self {
        let total: f64 = raw.iter().sum();
        let normalized = raw.iter().map(|w| w / total).collect();
        Self { views, raw, normalized }
    }
}

/// Unit surface normal: the orientation axis of the smallest scale, signed to
/// face the centroid of `camera_centers` (left unsigned when empty).
pub fn gaussian_normal(g: &Gaussian, camera_centers: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    let s = &g.scales;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    let (smallest, second) = (s[order[0]], s[order[1]]);
    if !(smallest > 0.0) {
        return Err(Error::InvalidParams("scales must be positive".into()));
    }
    if second - smallest <= AMBIGUOUS_SCALE_TOL * second {
        return Err(Error::AmbiguousNormal);
    }
    let axis = g.orientation_matrix().column(order[0]).into_owned();
    let n = axis.normalize();
    if camera_centers.is_empty() {
        return Ok(n);
    }
    let centroid = camera_centers.iter().sum::<Vector3<f64>>() / camera_centers.len() as f64;
    Ok(if n.dot(&(centroid - g.center)) < 0.0 { -n } else { n })
}

/// Fusion weights `w_k = n · d_k` over the observing cameras.
pub fn fusion_weights(g: &Gaussian, cameras: &[(usize, &Camera)], mode: NormalMode) -> Result<FusionWeights> {
    if cameras.is_empty() {
        return Err(Error::NoVisibleViews);
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|(_, c)| c.center()).collect();
    let n = gaussian_normal(g, &centers)?;
    let mut raw = Vec::with_capacity(cameras.len());
    for (_, cam) in cameras {
        let d = viewing_direction(&g.center, cam)?;
        let w = match mode {
            NormalMode::Global => n.dot(&d),
            NormalMode::PerView => n.dot(&d).abs(),
        };
        raw.push(if w <= GRAZING_WEIGHT { GRAZING_WEIGHT } else { w });
    }
    Ok(FusionWeights::from_raw(cameras.iter().map(|(k, _)| *k).collect(), raw))
}

/// `f = Σ_k w_k f_k` with normalized weights.
pub fn fuse(observations: &[&DVector<f64>], weights: &FusionWeights) -> Result<DVector<f64>> {
    if observations.len() != weights.normalized.len() {
        return Err(Error::LengthMismatch { expected: weights.normalized.len(), got: observations.len() });
    }
    let first = observations.first().ok_or(Error::NoVisibleViews)?;
    let mut out = DVector::zeros(first.len());
    for (f, w) in observations.iter().zip(&weights.normalized) {
        if f.len() != out.len() {
            return Err(Error::DimensionMismatch { expected: out.len(), got: f.len() });
        }
        out.axpy(*w, f, 1.0);
    }
    Ok(out)
}

/// Outcome of fusing one Gaussian from a set of training observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub feature: DVector<f64>,
    pub weights: FusionWeights,
    /// Uniform weights were used because the normal is undefined.
    pub ambiguous: bool,
}

/// Fuses the observations of Gaussian `index` across every view where it is
/// visible. Near-isotropic Gaussians fall back to uniform weights.
pub fn fuse_gaussian(
    scene: &Scene,
    index: usize,
    observations: &[ViewObservation],
    mode: NormalMode,
) -> Result<FusedFeature> {
    let mut cams = Vec::new();
    let mut feats = Vec::new();
    for obs in observations {
        if let Some(f) = &obs.features[index] {
            cams.push((obs.view, &scene.cameras[obs.view]));
            feats.push(f);
        }
    }
    if cams.is_empty() {
        return Err(Error::NoVisibleViews);
    }
    let g = &scene.gaussians[index];
    let (weights, ambiguous) = match fusion_weights(g, &cams, mode) {
        Ok(w) => (w, false),
        Err(Error::AmbiguousNormal) => (FusionWeights::uniform(cams.iter().map(|(k, _)| *k).collect())?, true),
        Err(e) => return Err(e),
    };
    Ok(FusedFeature { feature: fuse(&feats, &weights)?, weights, ambiguous })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FusionStats {
    /// Landmarks removed for lack of visible views.
    pub dropped: usize,
    /// Landmarks fused with uniform weights.
    pub ambiguous: usize,
}

/// Fills the feature block of `db` from the training observations drawn
/// with `seed`. Landmarks without any visible view are dropped.
pub fn build_landmark_features(
    scene: &Scene,
    db: &LandmarkDb,
    seed: u64,
    mode: NormalMode,
) -> Result<(LandmarkDb, FusionStats)> {
    use rayon::prelude::*;
    if let Some(&bad) = db.indices.iter().find(|&&i| i >= scene.gaussians.len()) {
        return Err(Error::InvalidParams(format!("landmark index {bad} out of range")));
    }
    let observations = scene.observe_all(seed);
    let fused: Vec<Result<FusedFeature>> =
        db.indices.par_iter().map(|&i| fuse_gaussian(scene, i, &observations, mode)).collect();
    let mut stats = FusionStats::default();
    let mut indices = Vec::with_capacity(db.indices.len());
    let mut features = Vec::with_capacity(db.indices.len());
    for (&i, r) in db.indices.iter().zip(fused) {
        match r {
            Ok(f) => {
                stats.ambiguous += f.ambiguous as usize;
                indices.push(i);
                features.push(f.feature);
            }
            Err(Error::NoVisibleViews) => stats.dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if stats.dropped > 0 {
        log::warn!("dropped {} landmarks without visible views", stats.dropped);
    }
    let mut out = db.clone();
    out.indices = indices;
    out.features = Some(features);
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::scene::{generate_scene, random_unit_vector, SceneConfig};
    use nalgebra::{SymmetricEigen, UnitQuaternion};
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(scales: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Gaussian {
        Gaussian {
            center: Vector3::zeros(),
            scales,
            orientation,
            opacity: 0.5,
            true_feature: DVector::from_vec(vec![1.0, 0.0]),
            stored_feature: None,
        }
    }

    fn camera_at(center: Vector3<f64>) -> Camera {
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let up = if center.cross(&Vector3::z()).norm() < 1e-9 { Vector3::y() } else { Vector3::z() };
        Camera::new(k, Pose::look_at(center, Vector3::zeros(), up).unwrap()).unwrap()
    }

    #[test]
    fn normal_of_flat_gaussian_faces_cameras() {
        let g = gaussian(Vector3::new(1.0, 1.0, 0.01), UnitQuaternion::identity());
        let up = gaussian_normal(&g, &[Vector3::new(0.3, 0.0, 2.0)]).unwrap();
        assert_eq!(up, Vector3::new(0.0, 0.0, 1.0));
        let down = gaussian_normal(&g, &[Vector3::new(0.3, 0.0, -2.0)]).unwrap();
        assert_eq!(down, Vector3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn rotated_gaussian_normal_follows_orientation() {
        let q = UnitQuaternion::from_scaled_axis(Vector3::new(0.4, -0.3, 0.2));
        let g = gaussian(Vector3::new(0.5, 0.02, 0.7), q);
        let expected = q * Vector3::y();
        let cam = expected * 3.0;
        let n = gaussian_normal(&g, &[cam]).unwrap();
        assert!((n - expected).norm() < 1e-12);
    }

    #[test]
    fn near_isotropic_gaussian_is_ambiguous() {
        let g = gaussian(Vector3::new(0.5, 0.01, 0.01), UnitQuaternion::identity());
        assert_eq!(gaussian_normal(&g, &[]), Err(Error::AmbiguousNormal));
    }

    #[test]
    fn normal_matches_covariance_eigenvector() {
        let mut rng = crate::rng::from_seed(31);
        for _ in 0..200 {
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ));
            let scales =
                Vector3::new(rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0));
            let g = gaussian(scales, q);
            let n = gaussian_normal(&g, &[]).unwrap();
            let eig = SymmetricEigen::new(g.covariance());
            let imin = eig.eigenvalues.imin();
            let v = eig.eigenvectors.column(imin);
            assert!(n.dot(&v).abs() >= 1.0 - 1e-9);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_on_view_has_unit_weight() {
        let g = gaussian(Vector3::new(1.0, 1.0, 0.01), UnitQuaternion::identity());
        let cam = camera_at(Vector3::new(0.0, 0.0, 3.0));
        let w = fusion_weights(&g, &[(0, &cam)], NormalMode::Global).unwrap();
        assert!((w.raw[0] - 1.0).abs() < 1e-12);
        assert_eq!(w.normalized, vec![1.0]);
    }

    #[test]
    fn symmetric_views_get_equal_weights() {
        let g = gaussian(Vector3::new(1.0, 1.0, 0.01), UnitQuaternion::identity());
        let a = camera_at(Vector3::new(1.0, 0.0, 2.0));
        let b = camera_at(Vector3::new(-1.0, 0.0, 2.0));
        let w = fusion_weights(&g, &[(0, &a), (1, &b)], NormalMode::Global).unwrap();
        assert!((w.normalized[0] - 0.5).abs() < 1e-12 && (w.normalized[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_views_is_an_error() {
        let g = gaussian(Vector3::new(1.0, 1.0, 0.01), UnitQuaternion::identity());
        assert_eq!(fusion_weights(&g, &[], NormalMode::Global), Err(Error::NoVisibleViews));
    }

    #[test]
    fn random_weights_follow_incidence_cosine() {
        let mut rng = crate::rng::from_seed(2);
        for _ in 0..50 {
            let q = UnitQuaternion::from_scaled_axis(Vector3::new(rng.random(), rng.random(), rng.random()));
            let g = gaussian(Vector3::new(0.6, 0.4, 0.05), q);
            let cams: Vec<Camera> = (0..5)
                .map(|_| {
                    let mut c = Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(&mut rng));
                    c = c.normalize() * 3.0;
                    camera_at(c)
                })
                .collect();
            let list: Vec<(usize, &Camera)> = cams.iter().enumerate().collect();
            let w = fusion_weights(&g, &list, NormalMode::Global).unwrap();
            assert!((w.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Oracle: cosine between the signed normal and the unit view vector.
            let centroid = cams.iter().map(|c| c.center()).sum::<Vector3<f64>>() / 5.0;
            let mut n = q * Vector3::z();
            if n.dot(&centroid) < 0.0 {
                n = -n;
            }
            let cosines: Vec<f64> = cams.iter().map(|c| n.dot(&c.center().normalize()).max(GRAZING_WEIGHT)).collect();
            for a in 0..5 {
                assert!((w.raw[a] - cosines[a]).abs() < 1e-12);
                for b in 0..5 {
                    if cosines[a] < cosines[b] {
                        assert!(w.raw[a] <= w.raw[b]);
                    }
                }
            }
            assert!(w.raw.iter().all(|x| *x > 0.0));
        }
    }

    #[test]
    fn per_view_mode_uses_absolute_cosine() {
        let g = gaussian(Vector3::new(1.0, 1.0, 0.01), UnitQuaternion::identity());
        let a = camera_at(Vector3::new(0.0, 0.5, 3.0));
        let b = camera_at(Vector3::new(0.0, 2.0, -1.0));
        let global = fusion_weights(&g, &[(0, &a), (1, &b)], NormalMode::Global).unwrap();
        let per_view = fusion_weights(&g, &[(0, &a), (1, &b)], NormalMode::PerView).unwrap();
        assert_eq!(global.raw[1], GRAZING_WEIGHT);
        assert!(per_view.raw[1] > 0.4);
    }

    #[test]
    fn fuse_examples() {
        let c = DVector::from_vec(vec![0.3, -0.7]);
        let w = FusionWeights::from_raw(vec![0, 1, 2], vec![0.2, 0.5, 1.3]);
        let f = fuse(&[&c, &c, &c], &w).unwrap();
        assert!((f - &c).amax() < 1e-15);
        let w = FusionWeights { views: vec![0, 1], raw: vec![1.0, 3.0], normalized: vec![0.25, 0.75] };
        let f = fuse(&[&DVector::from_vec(vec![0.0]), &DVector::from_vec(vec![4.0])], &w).unwrap();
        assert_eq!(f[0], 3.0);
        assert!(matches!(fuse(&[&c], &w), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn fusion_is_unbiased_monte_carlo() {
        let sigma = 0.05;
        let trials = 10_000;
        let w = FusionWeights::from_raw((0..5).collect(), vec![0.9, 0.2, 0.5, 0.7, 0.05]);
        let mut rng = crate::rng::from_seed(123);
        let mu = random_unit_vector(&mut rng, 4);
        let mut mean = DVector::zeros(4);
        for _ in 0..trials {
            let obs: Vec<DVector<f64>> = (0..5)
                .map(|_| {
                    &mu + DVector::<f64>::from_fn(4, |_, _| {
                        sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                })
                .collect();
            let refs: Vec<&DVector<f64>> = obs.iter().collect();
            mean += fuse(&refs, &w).unwrap();
        }
        mean /= trials as f64;
        let sw2: f64 = w.normalized.iter().map(|x| x * x).sum();
        let bound = 4.0 * sigma * sw2.sqrt() / (trials as f64).sqrt();
        assert!((mean - mu).amax() <= bound);
    }

    proptest! {
        #[test]
        fn fuse_is_linear(
            xs in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 4),
            ys in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 4),
            raw in prop::collection::vec(0.01f64..1.0, 4),
            a in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let w = FusionWeights::from_raw((0..4).collect(), raw);
            let xv: Vec<DVector<f64>> = xs.iter().map(|x| DVector::from_row_slice(x)).collect();
            let yv: Vec<DVector<f64>> = ys.iter().map(|y| DVector::from_row_slice(y)).collect();
            let comb: Vec<DVector<f64>> = xv.iter().zip(&yv).map(|(x, y)| x * a + y * b).collect();
            let lhs = fuse(&comb.iter().collect::<Vec<_>>(), &w).unwrap();
            let rhs = fuse(&xv.iter().collect::<Vec<_>>(), &w).unwrap() * a
                + fuse(&yv.iter().collect::<Vec<_>>(), &w).unwrap() * b;
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn weights_are_permutation_equivariant(seed in 0u64..1000) {
            let mut rng = crate::rng::from_seed(seed);
            let q = UnitQuaternion::from_scaled_axis(Vector3::new(rng.random(), rng.random(), rng.random()));
            let g = gaussian(Vector3::new(0.6, 0.4, 0.05), q);
            let cams: Vec<Camera> = (0..4)
                .map(|_| camera_at(Vector3::<f64>::from_fn(|_, _| StandardNormal.sample(&mut rng)).normalize() * 3.0))
                .collect();
            let fwd: Vec<(usize, &Camera)> = cams.iter().enumerate().collect();
            let rev: Vec<(usize, &Camera)> = cams.iter().enumerate().rev().collect();
            let a = fusion_weights(&g, &fwd, NormalMode::Global).unwrap();
            let b = fusion_weights(&g, &rev, NormalMode::Global).unwrap();
            for i in 0..4 {
                prop_assert!((a.normalized[i] - b.normalized[3 - i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_noise_landmarks_store_true_features() {
        let cfg = SceneConfig { n_gaussians: 80, n_cameras: 6, feature_dim: 8, sigma: 0.0, ..SceneConfig::default() };
        let scene = generate_scene(&cfg, 3).unwrap();
        let db = LandmarkDb::new((0..80).collect(), 80, 1, 1.0, 3, scene.content_hash());
        let (db, stats) = build_landmark_features(&scene, &db, 3, NormalMode::Global).unwrap();
        assert_eq!(stats.dropped, 0);
        for (i, f) in db.indices.iter().zip(db.features.as_ref().unwrap()) {
            assert!((f - &scene.gaussians[*i].true_feature).amax() < 1e-15);
        }
    }

    #[test]
    fn one_view_landmark_stores_its_observation() {
        let cfg = SceneConfig { n_gaussians: 20, n_cameras: 1, feature_dim: 8, ..SceneConfig::default() };
        let scene = generate_scene(&cfg, 4).unwrap();
        let obs = crate::scene::observe_features(&scene, 0, 4).unwrap();
        let idx = obs.visible_indices().next().unwrap();
        let db = LandmarkDb::new(vec![idx], 1, 1, 1.0, 4, scene.content_hash());
        let (db, _) = build_landmark_features(&scene, &db, 4, NormalMode::Global).unwrap();
        assert!((&db.features.unwrap()[0] - obs.features[idx].as_ref().unwrap()).amax() < 1e-15);
    }
}
