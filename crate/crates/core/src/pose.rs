//! Camera pose from 2D–3D correspondences.

use nalgebra::{DMatrix, Matrix2x6, Matrix3, Matrix3x4, Matrix6, Vector3, Vector6, SVD};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PixelPoint, Pose};
use crate::rng::{self, label};

pub const MIN_PNP_MATCHES: usize = 6;
/// Degeneracy cut on the DLT singular values.
pub const DLT_RANK_TOL: f64 = 1e-10;
const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match2D3D {
    pub pixel: PixelPoint,
    pub world: Vector3<f64>,
    pub score: f64,
}

impl Match2D3D {
    pub fn new(pixel: PixelPoint, world: Vector3<f64>) -> Self {
        Self { pixel, world, score: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    pub confidence: f64,
    pub seed: u64,
    pub min_inliers: usize,
    /// Gauss–Newton iterations for the final polish.
    pub refine_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            threshold: 12.0,
            confidence: 0.9999,
            seed: 0,
            min_inliers: 12,
            refine_iterations: 30,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.threshold > 0.0) {
            return Err(Error::InvalidParams("ransac needs iterations >= 1 and threshold > 0".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidParams("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Mean reprojection error over inliers, pixels.
    pub mean_error: f64,
    pub iterations: usize,
}

/// Reprojection error in pixels, `None` behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, m: &Match2D3D) -> Option<f64> {
    let p = pose.transform_point(&m.world);
    (p.z > MIN_DEPTH).then(|| k.project_camera_point(&p).distance(&m.pixel))
}

/// Linear PnP from six or more correspondences, followed by projection onto
/// the nearest rotation.
pub fn pnp_minimal(matches: &[Match2D3D], k: &Intrinsics) -> Result<Pose> {
    let n = matches.len();
    if n < MIN_PNP_MATCHES {
        return Err(Error::TooFewMatches { needed: MIN_PNP_MATCHES, got: n });
    }
    // Normalize world points: zero mean, mean distance √3.
    let centroid = matches.iter().fold(Vector3::zeros(), |a, m| a + m.world) / n as f64;
    let spread = matches.iter().map(|m| (m.world - centroid).norm()).sum::<f64>() / n as f64;
    if !(spread > 0.0) {
        return Err(Error::DegenerateConfiguration);
    }
    let s = 3f64.sqrt() / spread;

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (r, m) in matches.iter().enumerate() {
        let x = (m.world - centroid) * s;
        let xh = [x.x, x.y, x.z, 1.0];
        let u = (m.pixel.u - k.cx) / k.fx;
        let v = (m.pixel.v - k.cy) / k.fy;
        for c in 0..4 {
            a[(2 * r, c)] = -xh[c];
            a[(2 * r, 8 + c)] = u * xh[c];
            a[(2 * r + 1, 4 + c)] = -xh[c];
            a[(2 * r + 1, 8 + c)] = v * xh[c];
        }
    }
    let svd = SVD::new(a, false, true);
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |rank: usize| svd.singular_values[order[rank]];
    // The smallest value vanishes for exact data; a second null direction
    // means the system does not pin down the projection.
    if sv(10) < DLT_RANK_TOL * sv(0) {
        return Err(Error::DegenerateConfiguration);
    }
    let p = v_t.row(order[11]);
    let mut proj = Matrix3x4::from_fn(|r, c| p[4 * r + c]);
    // Undo the world normalization: P · [sI, −s·c; 0, 1].
    let mut denorm = nalgebra::Matrix4::identity();
    denorm.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * s));
    denorm.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-centroid * s));
    proj *= denorm;
    // Pick the sign that puts the points in front of the camera.
    let depth_sum: f64 = matches.iter().map(|m| proj.row(2).dot(&m.world.push(1.0).transpose())).sum();
    if depth_sum < 0.0 {
        proj = -proj;
    }
    let m3: Matrix3<f64> = proj.fixed_view::<3, 3>(0, 0).into();
    let svd3 = m3.svd(true, true);
    let (u, vt) = (svd3.u.unwrap(), svd3.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    let rotation = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    let scale = svd3.singular_values.sum() / 3.0;
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration);
    }
    let translation: Vector3<f64> = proj.column(3) / scale;
    let pose = Pose::new(rotation, translation).map_err(|_| Error::DegenerateConfiguration)?;
    if pose.transform_point(&centroid).z <= 0.0 {
        return Err(Error::DegenerateConfiguration);
    }
    Ok(pose)
}

/// `∂π(exp(δ)·P·X)/∂δ` at `δ = 0`, for `δ = (ρ, φ)`.
pub fn reprojection_jacobian(pose: &Pose, world: &Vector3<f64>, k: &Intrinsics) -> Result<Matrix2x6<f64>> {
    let p = pose.transform_point(world);
    if p.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(p.z));
    }
    let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
    let dpi = nalgebra::Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2, 0.0, k.fy * iz, -k.fy * p.y * iz2);
    let mut dp = nalgebra::Matrix3x6::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-p.cross_matrix()));
    Ok(dpi * dp)
}

/// Sum of squared reprojection errors; infinite if any point is behind the
/// camera.
pub fn reprojection_cost(pose: &Pose, matches: &[Match2D3D], k: &Intrinsics) -> f64 {
    let mut cost = 0.0;
    for m in matches {
        let p = pose.transform_point(&m.world);
        if p.z <= MIN_DEPTH {
            return f64::INFINITY;
        }
        let px = k.project_camera_point(&p);
        cost += (px.u - m.pixel.u).powi(2) + (px.v - m.pixel.v).powi(2);
    }
    cost
}

/// Levenberg–Marquardt on the squared reprojection error. Only strictly
/// improving steps are taken; damping doubles after each rejection.
pub fn refine_pose(initial: &Pose, matches: &[Match2D3D], k: &Intrinsics, iterations: usize) -> Pose {
    let mut pose = *initial;
    let mut cost = reprojection_cost(&pose, matches, k);
    if !cost.is_finite() || matches.len() < 3 {
        return pose;
    }
    let mut lambda = 1e-6;
    let mut accepted = 0;
    let mut rejections = 0;
    while accepted < iterations && rejections < 40 && cost > 0.0 {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for m in matches {
            let j = reprojection_jacobian(&pose, &m.world, k).expect("finite cost implies positive depth");
            let px = k.project_camera_point(&pose.transform_point(&m.world));
            let r = nalgebra::Vector2::new(px.u - m.pixel.u, px.v - m.pixel.v);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let mut damped = h;
        for d in 0..6 {
            damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 2.0;
            rejections += 1;
            continue;
        };
        let delta = -chol.solve(&g);
        let candidate = pose.retract(&delta);
        let new_cost = reprojection_cost(&candidate, matches, k);
        if new_cost < cost {
            pose = candidate;
            let gain = cost - new_cost;
            cost = new_cost;
            lambda = (lambda / 2.0).max(1e-12);
            accepted += 1;
            rejections = 0;
            if gain <= 1e-18 * cost.max(1e-300) || delta.norm() < 1e-15 {
                break;
            }
        } else {
            lambda *= 2.0;
            rejections += 1;
        }
    }
    pose
}

fn score(pose: &Pose, matches: &[Match2D3D], k: &Intrinsics, threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; matches.len()];
    let (mut count, mut total) = (0, 0.0);
    for (slot, m) in mask.iter_mut().zip(matches) {
        if let Some(e) = reprojection_error(pose, k, m) {
            if e < threshold {
                *slot = true;
                count += 1;
                total += e;
            }
        }
    }
    let mean = if count > 0 { total / count as f64 } else { f64::NAN };
    (mask, count, mean)
}

/// Draws needed to see an all-inlier sample with the given confidence.
fn required_draws(confidence: f64, inlier_ratio: f64) -> f64 {
    if inlier_ratio >= 1.0 {
        return 0.0;
    }
    let miss = 1.0 - inlier_ratio.powi(MIN_PNP_MATCHES as i32);
    if miss >= 1.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / miss.ln()
}

/// RANSAC over six-point DLT hypotheses, then a least-squares polish on the
/// consensus set. Hypotheses are scored in parallel batches and folded in
/// draw order, so the result matches a serial run.
pub fn ransac_pnp(matches: &[Match2D3D], k: &Intrinsics, cfg: &RansacConfig) -> Result<PoseEstimate> {
    use rayon::prelude::*;
    cfg.validate()?;
    let n = matches.len();
    if n < MIN_PNP_MATCHES {
        return Err(Error::TooFewMatches { needed: MIN_PNP_MATCHES, got: n });
    }
    let required = cfg.min_inliers.max(MIN_PNP_MATCHES);
    let mut rng = rng::stream(cfg.seed, label::RANSAC, 0);
    let mut best: Option<(Pose, usize)> = None;
    let mut iterations = 0;
    const BATCH: usize = 64;
    'outer: while iterations < cfg.max_iterations {
        let size = BATCH.min(cfg.max_iterations - iterations);
        let draws: Vec<Vec<usize>> =
            (0..size).map(|_| rand::seq::index::sample(&mut rng, n, MIN_PNP_MATCHES).into_vec()).collect();
        let scored: Vec<Option<(Pose, usize)>> = draws
            .par_iter()
            .map(|idx| {
                let sample: Vec<Match2D3D> = idx.iter().map(|&i| matches[i]).collect();
                let pose = pnp_minimal(&sample, k).ok()?;
                Some((pose, score(&pose, matches, k, cfg.threshold).1))
            })
            .collect();
        for hyp in scored {
            iterations += 1;
            if let Some((pose, count)) = hyp {
                if best.as_ref().is_none_or(|(_, c)| count > *c) {
                    best = Some((pose, count));
                }
            }
            if let Some((_, c)) = &best {
                if iterations as f64 >= required_draws(cfg.confidence, *c as f64 / n as f64) {
                    break 'outer;
                }
            }
        }
    }
    let Some((mut pose, count)) = best else {
        return Err(Error::NoConsensus { inliers: 0, required });
    };
    if count < required {
        return Err(Error::NoConsensus { inliers: count, required });
    }
    let (mut mask, _, _) = score(&pose, matches, k, cfg.threshold);
    for _ in 0..2 {
        let inliers: Vec<Match2D3D> = matches.iter().zip(&mask).filter(|(_, v)| **v).map(|(m, _)| *m).collect();
        pose = refine_pose(&pose, &inliers, k, cfg.refine_iterations);
        let (next, _, _) = score(&pose, matches, k, cfg.threshold);
        if next == mask {
            break;
        }
        mask = next;
    }
    let (inliers, inlier_count, mean_error) = score(&pose, matches, k, cfg.threshold);
    if inlier_count < required {
        return Err(Error::NoConsensus { inliers: inlier_count, required });
    }
    Ok(PoseEstimate { pose, inliers, inlier_count, mean_error, iterations })
}

/// Per-pixel camera-frame depth; missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, depth: vec![f64::NAN; width * height] }
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        self.depth[y * self.width + x] = depth;
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let d = self.depth[y * self.width + x];
        (d > 0.0).then_some(d)
    }

    /// Depth of the cell containing `pixel`.
    pub fn at_pixel(&self, pixel: &PixelPoint) -> Option<f64> {
        if !(pixel.u >= 0.0 && pixel.v >= 0.0) {
            return None;
        }
        self.get(pixel.u.floor() as usize, pixel.v.floor() as usize)
    }
}

/// Lifts `(query pixel, rendered pixel)` pairs to 2D–3D matches through the
/// rendered depth. Returns the lifted matches and how many were dropped.
pub fn lift_to_3d(
    pairs: &[(PixelPoint, PixelPoint, f64)],
    depth: &DepthMap,
    render_pose: &Pose,
    k: &Intrinsics,
) -> (Vec<Match2D3D>, usize) {
    let mut out = Vec::with_capacity(pairs.len());
    for (query, rendered, score) in pairs {
        if let Some(d) = depth.at_pixel(rendered) {
            let world = render_pose.inverse_transform_point(&k.unproject(rendered, d));
            out.push(Match2D3D { pixel: *query, world, score: *score });
        }
    }
    let dropped = pairs.len() - out.len();
    (out, dropped)
}
