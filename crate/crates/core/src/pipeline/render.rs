//! Feature and depth grids splatted from scene Gaussians.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::correspondence::{FeatureMap, FINE_WINDOW};
use crate::error::{Error, Result};
use crate::geometry::{Camera, PixelPoint};
use crate::pose::DepthMap;
use crate::rng::{self, label};
use crate::scene::{visibility, Scene, ViewObservation};

/// Ghosts sit this much deeper than their source, so the source wins a shared cell.
const GHOST_DEPTH_FACTOR: f64 = 1.002;

/// Displaced duplicates of rendered Gaussians that stand in for rendering
/// artifacts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhostConfig {
    /// Probability that a rendered Gaussian also leaves a ghost.
    pub fraction: f64,
    pub min_offset_px: f64,
    pub max_offset_px: f64,
}

impl GhostConfig {
    pub const NONE: GhostConfig = GhostConfig { fraction: 0.0, min_offset_px: 0.0, max_offset_px: 0.0 };
    /// Default artifact level of a degraded render.
    pub const ARTIFACTS: GhostConfig = GhostConfig { fraction: 0.1, min_offset_px: 2.0, max_offset_px: 8.0 };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidConfig("ghost fraction must be in [0, 1]".into()));
        }
        if !(self.min_offset_px >= 0.0 && self.max_offset_px >= self.min_offset_px && self.max_offset_px.is_finite()) {
            return Err(Error::InvalidConfig("ghost offsets need 0 <= min <= max".into()));
        }
        Ok(())
    }
}

impl Default for GhostConfig {
    fn default() -> Self {
        Self::NONE
    }
}

/// One feature dropped onto the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub pixel: PixelPoint,
    pub depth: f64,
    pub feature: DVector<f64>,
    pub source: usize,
    pub ghost: bool,
}

/// Average-pooled 8×8 block of the fine grid. `centroid` is the mean center
/// of the occupied fine cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseCell {
    pub cell: (usize, usize),
    pub feature: DVector<f64>,
    pub centroid: PixelPoint,
    pub occupied: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub fine: FeatureMap,
    pub depth: DepthMap,
    /// Occupied coarse cells in row-major order.
    pub coarse: Vec<CoarseCell>,
    owners: Vec<Option<(u32, bool)>>,
}

impl FeatureGrid {
    pub fn width(&self) -> usize {
        self.fine.width()
    }

    pub fn height(&self) -> usize {
        self.fine.height()
    }

    /// Gaussian that won fine cell `(x, y)` and whether it was a ghost.
    pub fn owner(&self, x: usize, y: usize) -> Option<(usize, bool)> {
        if x >= self.width() || y >= self.height() {
            return None;
        }
        self.owners[y * self.width() + x].map(|(i, g)| (i as usize, g))
    }
}

/// Z-buffered splat into a `width × height` grid: each splat lands in the cell
/// containing its pixel and the nearest one wins (the earlier one on ties).
pub fn splat(splats: &[Splat], width: usize, height: usize, dim: usize) -> Result<FeatureGrid> {
    let mut winner: Vec<Option<usize>> = vec![None; width * height];
    for (i, s) in splats.iter().enumerate() {
        if !(s.pixel.u >= 0.0 && s.pixel.v >= 0.0 && s.depth > 0.0) {
            continue;
        }
        let (x, y) = (s.pixel.u.floor() as usize, s.pixel.v.floor() as usize);
        if x >= width || y >= height {
            continue;
        }
        let slot = &mut winner[y * width + x];
        if slot.is_none_or(|j| s.depth < splats[j].depth) {
            *slot = Some(i);
        }
    }
    let mut fine = FeatureMap::new(width, height, dim);
    let mut depth = DepthMap::new(width, height);
    let mut owners = vec![None; width * height];
    let mut pooled: BTreeMap<(usize, usize), (DVector<f64>, f64, f64, usize)> = BTreeMap::new();
    for y in 0..height {
        for x in 0..width {
            let Some(j) = winner[y * width + x] else { continue };
            let s = &splats[j];
            fine.set(x, y, s.feature.as_slice())?;
            depth.set(x, y, s.depth);
            owners[y * width + x] = Some((s.source as u32, s.ghost));
            let entry =
                pooled.entry((y / FINE_WINDOW, x / FINE_WINDOW)).or_insert_with(|| (DVector::zeros(dim), 0.0, 0.0, 0));
            entry.0 += &s.feature;
            entry.1 += x as f64 + 0.5;
            entry.2 += y as f64 + 0.5;
            entry.3 += 1;
        }
    }
    let area = (FINE_WINDOW * FINE_WINDOW) as f64;
    let coarse = pooled
        .into_iter()
        .map(|((cy, cx), (f, su, sv, n))| CoarseCell {
            cell: (cx, cy),
            feature: f / area,
            centroid: PixelPoint::new(su / n as f64, sv / n as f64),
            occupied: n,
        })
        .collect();
    Ok(FeatureGrid { fine, depth, coarse, owners })
}

/// Grid of an observation at the true projections of its visible Gaussians.
pub fn observation_grid(obs: &ViewObservation, camera: &Camera, dim: usize) -> Result<FeatureGrid> {
    let splats: Vec<Splat> = obs
        .visible_indices()
        .map(|i| Splat {
            pixel: obs.pixels[i].expect("visible gaussian has a pixel"),
            depth: obs.depths[i].expect("visible gaussian has a depth"),
            feature: obs.features[i].clone().expect("visible gaussian has a feature"),
            source: i,
            ghost: false,
        })
        .collect();
    let k = &camera.intrinsics;
    splat(&splats, k.width as usize, k.height as usize, dim)
}

/// Synthetic rendering at a camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub grid: FeatureGrid,
    pub camera: Camera,
}

/// Splats every visible Gaussian with its true feature plus `σ_r`-scaled
/// Gaussian noise, then any ghosts. Noise for Gaussian `i` comes from its own
/// stream, so the render at a given seed does not depend on visibility of
/// the others.
pub fn render_synthetic_view(
    scene: &Scene,
    camera: &Camera,
    sigma_r: f64,
    ghosts: &GhostConfig,
    seed: u64,
) -> RenderedView {
    let (visible, pixels, depths) = visibility(scene, camera);
    let dim = scene.feature_dim();
    let mut splats = Vec::new();
    for (i, g) in scene.gaussians.iter().enumerate() {
        if !visible[i] {
            continue;
        }
        let mut rng = rng::stream(seed, label::RENDER, i as u64);
        let feature = DVector::from_fn(dim, |c, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            g.true_feature[c] + sigma_r * z
        });
        splats.push(Splat {
            pixel: pixels[i].expect("visible gaussian has a pixel"),
            depth: depths[i].expect("visible gaussian has a depth"),
            feature,
            source: i,
            ghost: false,
        });
    }
    if ghosts.fraction > 0.0 {
        let real = splats.len();
        for j in 0..real {
            let s = &splats[j];
            let mut rng = rng::stream(seed, label::GHOST, s.source as u64);
            if !rng.random_bool(ghosts.fraction) {
                continue;
            }
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = if ghosts.max_offset_px > ghosts.min_offset_px {
                rng.random_range(ghosts.min_offset_px..ghosts.max_offset_px)
            } else {
                ghosts.min_offset_px
            };
            let ghost = Splat {
                pixel: PixelPoint::new(s.pixel.u + r * angle.cos(), s.pixel.v + r * angle.sin()),
                depth: s.depth * GHOST_DEPTH_FACTOR,
                feature: s.feature.clone(),
                source: s.source,
                ghost: true,
            };
            splats.push(ghost);
        }
    }
    let k = &camera.intrinsics;
    let grid = splat(&splats, k.width as usize, k.height as usize, dim).expect("scene features share one dimension");
    RenderedView { grid, camera: *camera }
}
