//! Coarse-to-fine localization of held-out query views.
//!
//! A query is first localized against the landmark database by sparse
//! descriptor matching and RANSAC PnP. Each refinement iteration then renders
//! feature and depth grids at the current estimate, matches coarse grid cells
//! against grids splatted from the query observation, matches inside the 8×8
//! windows under each coarse pair, drops pairs that fail LGCV, lifts the
//! surviving fine matches through the rendered depth and solves PnP again.
//!
//! Every random draw comes from a stream derived from the master seed and the
//! query id, so a result is a pure function of its inputs.

mod render;
mod report;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub use render::{
    observation_grid, render_synthetic_view, splat, CoarseCell, FeatureGrid, GhostConfig, RenderedView, Splat,
};
pub use report::{median, Benchmark, QueryOutcome, Recall, Summary, CSV_HEADER, DEFAULT_RECALL_THRESHOLDS};

use crate::correspondence::{
    cosine_similarity_matrix, dual_softmax, fine_match_window, lgcv_filter, mnn, sparse_match, FineMatch, LgcvConfig,
    MatchSet, Stage, DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::geometry::{pose_error, Camera, PixelPoint, Pose, PoseError};
use crate::pose::{lift_to_3d, ransac_pnp, Match2D3D, PoseEstimate, RansacConfig, MIN_PNP_MATCHES};
use crate::rng::{self, label};
use crate::sampling::LandmarkDb;
use crate::scene::{clutter_count, observe_with, random_unit_vector, Keypoint, Scene};

pub const DEFAULT_QUERY_KEYPOINTS: usize = 2048;
/// Cosine floor for sparse query-to-landmark matches.
pub const DEFAULT_SIMILARITY_FLOOR: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryConfig {
    pub max_keypoints: usize,
    /// Standard deviation of the detector's localization error, pixels.
    pub keypoint_noise_px: f64,
    /// Clutter fraction among query keypoints; `None` uses the scene's.
    pub clutter_fraction: Option<f64>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { max_keypoints: DEFAULT_QUERY_KEYPOINTS, keypoint_noise_px: 1.0, clutter_fraction: None }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_keypoints == 0 {
            return Err(Error::InvalidConfig("query needs at least one keypoint".into()));
        }
        if !(self.keypoint_noise_px >= 0.0 && self.keypoint_noise_px.is_finite()) {
            return Err(Error::InvalidConfig("keypoint noise must be finite and non-negative".into()));
        }
        if self.clutter_fraction.is_some_and(|c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidConfig("clutter fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseConfig {
    pub min_similarity: Option<f64>,
    pub ransac: RansacConfig,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self { min_similarity: Some(DEFAULT_SIMILARITY_FLOOR), ransac: RansacConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub iterations: usize,
    pub temperature: f64,
    /// Minimum dual-softmax probability for coarse grid matches.
    pub mnn_floor: Option<f64>,
    /// `None` disables LGCV.
    pub lgcv: Option<LgcvConfig>,
    /// Rendering noise as a multiple of the scene's per-component σ.
    pub render_noise_scale: f64,
    pub ghosts: GhostConfig,
    pub ransac: RansacConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            temperature: DEFAULT_TEMPERATURE,
            mnn_floor: None,
            lgcv: Some(LgcvConfig::default()),
            render_noise_scale: 2.0,
            ghosts: GhostConfig::ARTIFACTS,
            ransac: RansacConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(self.render_noise_scale >= 0.0 && self.render_noise_scale.is_finite()) {
            return Err(Error::InvalidConfig("render noise scale must be finite and non-negative".into()));
        }
        if let Some(l) = &self.lgcv {
            l.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        self.ghosts.validate()?;
        self.ransac.validate().map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineConfig {
    pub query: QueryConfig,
    pub coarse: CoarseConfig,
    pub refine: RefineConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.query.validate()?;
        self.coarse.ransac.validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        self.refine.validate()
    }
}

/// A held-out view: its true camera, detected keypoints and the feature grid
/// splatted from its observation.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryView {
    pub id: u64,
    pub camera: Camera,
    pub keypoints: Vec<Keypoint>,
    pub grid: FeatureGrid,
}

fn query_seed(seed: u64, id: u64) -> u64 {
    rng::derive_seed(seed, label::QUERY, id)
}

/// Query `id` drawn from the scene's viewing hemisphere.
pub fn build_query(scene: &Scene, id: u64, cfg: &QueryConfig, seed: u64) -> Result<QueryView> {
    let camera = scene.query_camera(id, seed)?;
    query_at(scene, camera, id, cfg, seed)
}

/// Query `id` seen from `camera`. Textured Gaussians yield keypoints at their
/// projections plus detector noise; clutter keypoints carry random
/// descriptors. The grid uses the exact projections.
pub fn query_at(scene: &Scene, camera: Camera, id: u64, cfg: &QueryConfig, seed: u64) -> Result<QueryView> {
    cfg.validate()?;
    let qseed = query_seed(seed, id);
    let mut orng = rng::stream(qseed, label::OBSERVE, 0);
    // Not a training view, so the view index is a sentinel.
    let obs = observe_with(scene, &camera, usize::MAX, &scene.noise_std(), &mut orng, None);
    let clutter = cfg.clutter_fraction.unwrap_or(scene.config.clutter_fraction);
    let mut krng = rng::stream(qseed, label::KEYPOINTS, 0);
    let mut keypoints = Vec::new();
    if clutter < 1.0 {
        for i in obs.visible_indices().filter(|&i| scene.textured[i]) {
            let px = obs.pixels[i].expect("visible gaussian has a pixel");
            let du: f64 = StandardNormal.sample(&mut krng);
            let dv: f64 = StandardNormal.sample(&mut krng);
            keypoints.push(Keypoint {
                pixel: PixelPoint::new(px.u + cfg.keypoint_noise_px * du, px.v + cfg.keypoint_noise_px * dv),
                descriptor: obs.features[i].clone().expect("visible gaussian has a feature"),
                source: Some(i),
            });
        }
    }
    let k = &camera.intrinsics;
    for _ in 0..clutter_count(keypoints.len(), clutter, obs.visible_indices().count()) {
        let pixel = PixelPoint::new(krng.random_range(0.0..k.width as f64), krng.random_range(0.0..k.height as f64));
        keypoints.push(Keypoint {
            pixel,
            descriptor: random_unit_vector(&mut krng, scene.feature_dim()),
            source: None,
        });
    }
    if keypoints.len() > cfg.max_keypoints {
        keypoints.shuffle(&mut krng);
        keypoints.truncate(cfg.max_keypoints);
    }
    let grid = observation_grid(&obs, &camera, scene.feature_dim())?;
    Ok(QueryView { id, camera, keypoints, grid })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseResult {
    pub estimate: PoseEstimate,
    /// Sparse matches from query keypoints to database entries.
    pub matches: MatchSet,
    pub correspondences: Vec<Match2D3D>,
}

/// Sparse landmark matching followed by RANSAC PnP on the landmark centers.
pub fn localize_coarse(scene: &Scene, db: &LandmarkDb, query: &QueryView, cfg: &CoarseConfig) -> Result<CoarseResult> {
    db.check_scene(scene)?;
    let features =
        db.features.as_ref().ok_or_else(|| Error::InvalidParams("landmark database carries no features".into()))?;
    if query.keypoints.len() < MIN_PNP_MATCHES {
        return Err(Error::TooFewMatches { needed: MIN_PNP_MATCHES, got: query.keypoints.len() });
    }
    let descriptors: Vec<_> = query.keypoints.iter().map(|k| k.descriptor.clone()).collect();
    let matches = sparse_match(&descriptors, features, cfg.min_similarity)?;
    let correspondences: Vec<Match2D3D> = matches
        .matches
        .iter()
        .map(|m| Match2D3D {
            pixel: query.keypoints[m.query].pixel,
            world: scene.gaussians[db.indices[m.reference]].center,
            score: m.score,
        })
        .collect();
    let estimate = ransac_pnp(&correspondences, &query.camera.intrinsics, &cfg.ransac)?;
    Ok(CoarseResult { estimate, matches, correspondences })
}

/// Match counts and outcome of one refinement iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    /// Coarse grid matches after dual-softmax and MNN.
    pub n_c: usize,
    /// Coarse matches surviving LGCV.
    pub n_c_lgcv: usize,
    pub n_f: usize,
    /// Fine matches with a rendered depth.
    pub n_lifted: usize,
    pub inliers: usize,
    /// `None` when PnP failed at this iteration.
    pub estimate: Option<PoseEstimate>,
}

impl IterationStats {
    /// Fraction of the matches fed to PnP that ended up inliers.
    pub fn inlier_ratio(&self) -> f64 {
        if self.n_lifted == 0 {
            0.0
        } else {
            self.inliers as f64 / self.n_lifted as f64
        }
    }
}

/// Dense matches between a query grid and a rendered grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatches {
    /// Dual-softmax MNN matches between coarse cells; `valid` is the LGCV mask.
    pub coarse: MatchSet,
    /// Best fine pair inside each coarse match's windows.
    pub fine: Vec<FineMatch>,
}

impl DenseMatches {
    /// Fine matches whose coarse match survived LGCV.
    pub fn kept(&self) -> impl Iterator<Item = &FineMatch> + '_ {
        self.fine.iter().zip(&self.coarse.valid).filter(|(_, v)| **v).map(|(f, _)| f)
    }
}

/// Coarse matching, fine matching inside each coarse pair, then LGCV.
///
/// LGCV runs on the fine-match positions of each coarse match. Coarse-cell
/// centroids shift by whole pixels whenever cell occupancy differs between the
/// two grids, which is enough to break triangle agreement between neighbours
/// eight pixels apart. Fine matching inside a window does not depend on the
/// other windows, so the surviving fine matches are the same as matching
/// after the filter.
pub fn dense_matches(query: &FeatureGrid, rendered: &FeatureGrid, cfg: &RefineConfig) -> Result<DenseMatches> {
    use rayon::prelude::*;
    let qf: Vec<_> = query.coarse.iter().map(|c| c.feature.clone()).collect();
    let rf: Vec<_> = rendered.coarse.iter().map(|c| c.feature.clone()).collect();
    if qf.is_empty() || rf.is_empty() {
        return Ok(DenseMatches { coarse: MatchSet::new(Stage::CoarseDense, Vec::new()), fine: Vec::new() });
    }
    let prob = dual_softmax(&cosine_similarity_matrix(&qf, &rf)?, cfg.temperature)?;
    let mut coarse = MatchSet::new(Stage::CoarseDense, mnn(&prob, cfg.mnn_floor));
    let fine: Vec<FineMatch> = coarse
        .matches
        .par_iter()
        .map(|m| {
            let (q, r) = (query.coarse[m.query].cell, rendered.coarse[m.reference].cell);
            fine_match_window(q, r, &query.fine, &rendered.fine, cfg.temperature)
        })
        .collect::<Result<_>>()?;
    if let Some(lgcv) = &cfg.lgcv {
        if coarse.len() > lgcv.k {
            let x: Vec<PixelPoint> = fine.iter().map(FineMatch::query_pixel).collect();
            let y: Vec<PixelPoint> = fine.iter().map(FineMatch::reference_pixel).collect();
            coarse.valid = lgcv_filter(&x, &y, lgcv)?;
            coarse.stage = Stage::Lgcv;
        }
    }
    Ok(DenseMatches { coarse, fine })
}

fn refine_step(
    scene: &Scene,
    query: &QueryView,
    pose: &Pose,
    cfg: &RefineConfig,
    qseed: u64,
    iteration: usize,
) -> Result<IterationStats> {
    let camera = query.camera.with_pose(*pose);
    let sigma_r = cfg.render_noise_scale * scene.config.sigma;
    let render_seed = rng::derive_seed(qseed, label::RENDER, iteration as u64);
    let view = render_synthetic_view(scene, &camera, sigma_r, &cfg.ghosts, render_seed);
    let dense = dense_matches(&query.grid, &view.grid, cfg)?;
    let pairs: Vec<_> = dense.kept().map(|f| (f.query_pixel(), f.reference_pixel(), f.score)).collect();
    let (lifted, _) = lift_to_3d(&pairs, &view.grid.depth, pose, &camera.intrinsics);
    let ransac = RansacConfig { seed: rng::derive_seed(qseed, label::RANSAC, iteration as u64 + 1), ..cfg.ransac };
    let mut stats = IterationStats {
        n_c: dense.coarse.len(),
        n_c_lgcv: dense.coarse.valid_count(),
        n_f: pairs.len(),
        n_lifted: lifted.len(),
        inliers: 0,
        estimate: None,
    };
    match ransac_pnp(&lifted, &camera.intrinsics, &ransac) {
        Ok(est) => {
            stats.inliers = est.inlier_count;
            stats.estimate = Some(est);
        }
        Err(Error::NoConsensus { inliers, .. }) => stats.inliers = inliers,
        Err(Error::TooFewMatches { .. }) => {}
        Err(e) => return Err(e),
    }
    Ok(stats)
}

/// Outcome of refining one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub history: Vec<IterationStats>,
    /// Last pose PnP accepted, or the initial pose.
    pub pose: Pose,
    pub estimate: Option<PoseEstimate>,
    /// Iteration whose PnP found no consensus.
    pub diverged_at: Option<usize>,
}

impl Refinement {
    /// `RefinementDiverged` when an iteration failed.
    pub fn status(&self) -> Result<()> {
        self.diverged_at.map_or(Ok(()), |i| Err(Error::RefinementDiverged(i)))
    }
}

/// Render-and-match refinement from `initial`. Each iteration re-renders at the
/// current pose. A failed iteration stops the loop and keeps the last good pose.
pub fn refine(scene: &Scene, query: &QueryView, initial: &Pose, cfg: &RefineConfig, seed: u64) -> Result<Refinement> {
    cfg.validate()?;
    let qseed = query_seed(seed, query.id);
    let mut out = Refinement { history: Vec::new(), pose: *initial, estimate: None, diverged_at: None };
    for it in 0..cfg.iterations {
        let stats = refine_step(scene, query, &out.pose, cfg, qseed, it)?;
        let accepted = stats.estimate.clone();
        out.history.push(stats);
        match accepted {
            Some(est) => {
                out.pose = est.pose;
                out.estimate = Some(est);
            }
            None => {
                log::debug!("query {}: refinement diverged at iteration {it}", query.id);
                out.diverged_at = Some(it);
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query_id: u64,
    pub truth: Pose,
    pub coarse: PoseEstimate,
    /// Sparse matches that entered coarse PnP.
    pub n_coarse: usize,
    pub fine: Refinement,
    pub wall_time: Duration,
}

impl LocalizationResult {
    pub fn coarse_error(&self) -> PoseError {
        pose_error(&self.coarse.pose, &self.truth)
    }

    pub fn fine_error(&self) -> PoseError {
        pose_error(&self.fine.pose, &self.truth)
    }

    /// Completed refinement iterations.
    pub fn iterations(&self) -> usize {
        self.fine.history.len() - self.fine.diverged_at.is_some() as usize
    }

    /// Stage counts of the last attempted iteration.
    pub fn last_stats(&self) -> Option<&IterationStats> {
        self.fine.history.last()
    }
}

/// Coarse localization followed by refinement.
pub fn localize(
    scene: &Scene,
    db: &LandmarkDb,
    query: &QueryView,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<LocalizationResult> {
    let start = Instant::now();
    cfg.validate()?;
    let coarse_cfg = CoarseConfig {
        ransac: RansacConfig {
            seed: rng::derive_seed(query_seed(seed, query.id), label::RANSAC, 0),
            ..cfg.coarse.ransac
        },
        ..cfg.coarse
    };
    let coarse = localize_coarse(scene, db, query, &coarse_cfg)?;
    let fine = refine(scene, query, &coarse.estimate.pose, &cfg.refine, seed)?;
    Ok(LocalizationResult {
        query_id: query.id,
        truth: query.camera.pose,
        n_coarse: coarse.matches.len(),
        coarse: coarse.estimate,
        fine,
        wall_time: start.elapsed(),
    })
}
