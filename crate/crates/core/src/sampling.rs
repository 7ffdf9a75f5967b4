//! Keypoint-consensus landmark sampling.
//!
//! Every Gaussian is scored by the number of training views in which its
//! projected center lands within `τ_D` pixels of a detected keypoint. Random
//! anchors then pick the best-scored Gaussian among their `k` nearest
//! neighbours, which keeps the landmark set both reliable and spread out.

use std::collections::{BTreeSet, HashMap};

use nalgebra::DVector;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::geometry::{in_frustum, project, PixelPoint};
use crate::kdtree::KdTree;
use crate::rng;
use crate::scene::Scene;
use crate::textio::{push_all, push_f64, Lines};

pub const DEFAULT_TAU_D: f64 = 1.0;
pub const DEFAULT_LANDMARKS: usize = 20_000;
pub const DEFAULT_NEIGHBORS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusScores {
    pub scores: Vec<u32>,
    pub tau_d: f64,
    pub n_views: usize,
}

/// Keypoints hashed into square cells of side `cell`.
struct PointGrid<'a> {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<&'a PixelPoint>>,
}

impl<'a> PointGrid<'a> {
    fn new(points: impl Iterator<Item = &'a PixelPoint>, cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<&PixelPoint>> = HashMap::new();
        for p in points {
            buckets.entry(Self::key(p, cell)).or_default().push(p);
        }
        Self { cell, buckets }
    }

    fn key(p: &PixelPoint, cell: f64) -> (i64, i64) {
        ((p.u / cell).floor() as i64, (p.v / cell).floor() as i64)
    }

    /// Whether any point lies within `radius <= cell` of `p`.
    fn any_within(&self, p: &PixelPoint, radius: f64) -> bool {
        let (cu, cv) = Self::key(p, self.cell);
        for du in -1..=1 {
            for dv in -1..=1 {
                if let Some(bucket) = self.buckets.get(&(cu + du, cv + dv)) {
                    if bucket.iter().any(|q| q.distance(p) <= radius) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// `S_i = Σ_v 𝕀[min_κ ‖P_v(g_i) − κ‖ ≤ τ_D]` over the views where `g_i`
/// projects inside the image.
pub fn consensus_scores(scene: &Scene, tau_d: f64) -> Result<ConsensusScores> {
    use rayon::prelude::*;
    if !(tau_d > 0.0 && tau_d.is_finite()) {
        return Err(Error::InvalidParams("tau_d must be positive".into()));
    }
    if scene.keypoints_per_view.len() != scene.cameras.len() {
        return Err(Error::InvalidParams("keypoints missing for some views".into()));
    }
    let per_view: Vec<Vec<bool>> = scene
        .cameras
        .par_iter()
        .zip(scene.keypoints_per_view.par_iter())
        .map(|(cam, kps)| {
            let grid = PointGrid::new(kps.iter().map(|k| &k.pixel), tau_d);
            scene
                .gaussians
                .iter()
                .map(|g| {
                    if !in_frustum(cam, &g.center, 0.0) {
                        return false;
                    }
                    let (px, _) = project(cam, &g.center).expect("in-frustum point projects");
                    grid.any_within(&px, tau_d)
                })
                .collect()
        })
        .collect();
    let mut scores = vec![0u32; scene.gaussians.len()];
    for hits in &per_view {
        for (s, h) in scores.iter_mut().zip(hits) {
            *s += *h as u32;
        }
    }
    Ok(ConsensusScores { scores, tau_d, n_views: scene.cameras.len() })
}

/// Sparse landmark set, optionally carrying fused features.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkDb {
    /// Sorted, unique Gaussian indices.
    pub indices: Vec<usize>,
    /// One feature per landmark once fused.
    pub features: Option<Vec<DVector<f64>>>,
    pub n: usize,
    pub k: usize,
    pub tau_d: f64,
    pub seed: u64,
    pub scene_hash: String,
}

impl LandmarkDb {
    pub fn new(indices: Vec<usize>, n: usize, k: usize, tau_d: f64, seed: u64, scene_hash: String) -> Self {
        Self { indices, features: None, n, k, tau_d, seed, scene_hash }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        let got = scene.content_hash();
        if got != self.scene_hash {
            return Err(Error::SceneHashMismatch { expected: self.scene_hash.clone(), got });
        }
        Ok(())
    }
}

/// Anchor indices: without replacement when `n <= total`, with replacement
/// otherwise.
pub fn draw_anchors(rng: &mut rng::Rng, total: usize, n: usize) -> Vec<usize> {
    if n <= total {
        rand::seq::index::sample(rng, total, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..total)).collect()
    }
}

/// Keypoint-consensus sampling: for every random anchor, the highest-scored
/// Gaussian among its `k` nearest centers (lowest index on ties) joins the
/// landmark set.
pub fn kc_sample(scene: &Scene, scores: &ConsensusScores, n: usize, k: usize, seed: u64) -> Result<LandmarkDb> {
    use rayon::prelude::*;
    if n == 0 || k == 0 {
        return Err(Error::InvalidParams("n and k must be positive".into()));
    }
    let total = scene.gaussians.len();
    if total == 0 {
        return Err(Error::InvalidParams("scene has no gaussians".into()));
    }
    if scores.scores.len() != total {
        return Err(Error::LengthMismatch { expected: total, got: scores.scores.len() });
    }
    let mut rng = rng::from_seed(seed);
    let anchors = draw_anchors(&mut rng, total, n);
    let tree = KdTree::new(scene.gaussians.iter().map(|g| g.center.into()).collect::<Vec<[f64; 3]>>());
    let winners: Vec<usize> = anchors
        .par_iter()
        .map(|&a| {
            let neighbors = tree.nearest(tree.point(a), k.min(total));
            let mut best = neighbors[0].0;
            for &(i, _) in &neighbors[1..] {
                let (si, sb) = (scores.scores[i], scores.scores[best]);
                if si > sb || (si == sb && i < best) {
                    best = i;
                }
            }
            best
        })
        .collect();
    let set: BTreeSet<usize> = winners.into_iter().collect();
    Ok(LandmarkDb::new(set.into_iter().collect(), n, k, scores.tau_d, seed, scene.content_hash()))
}

pub const LANDMARK_MAGIC: &str = "gsloc-landmarks";
pub const LANDMARK_VERSION: u32 = 1;

const LANDMARK_HEADER: &str = "\
# gsloc landmark database. Records, in order:
#   scene_hash <sha256 of the scene file>
#   params tau_d n k seed
#   landmarks <count> <has_features 0|1> <feature_dim>
#   l <gaussian index> [feature[feature_dim]]
#   end
";

impl LandmarkDb {
    pub fn to_text(&self) -> String {
        let mut out = format!("{LANDMARK_MAGIC} {LANDMARK_VERSION}\n{LANDMARK_HEADER}");
        out.push_str(&format!("scene_hash {}\nparams", self.scene_hash));
        push_f64(&mut out, self.tau_d);
        out.push_str(&format!(" {} {} {}\n", self.n, self.k, self.seed));
        let dim = self.features.as_ref().and_then(|f| f.first()).map_or(0, |f| f.len());
        out.push_str(&format!("landmarks {} {} {}\n", self.indices.len(), self.features.is_some() as u8, dim));
        for (j, i) in self.indices.iter().enumerate() {
            out.push_str(&format!("l {i}"));
            if let Some(f) = &self.features {
                push_all(&mut out, f[j].iter().copied());
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let mut rec = lines.expect(LANDMARK_MAGIC)?;
        let version: u32 = rec.parse()?;
        if version != LANDMARK_VERSION {
            return Err(rec.error(format!("unsupported landmark version {version}")));
        }
        rec.finish()?;
        let mut rec = lines.expect("scene_hash")?;
        let scene_hash = rec.word()?.to_string();
        rec.finish()?;
        let mut rec = lines.expect("params")?;
        let tau_d: f64 = rec.parse()?;
        let n: usize = rec.parse()?;
        let k: usize = rec.parse()?;
        let seed: u64 = rec.parse()?;
        rec.finish()?;
        let mut rec = lines.expect("landmarks")?;
        let count: usize = rec.parse()?;
        let has_features: u8 = rec.parse()?;
        let dim: usize = rec.parse()?;
        rec.finish()?;
        let mut indices = Vec::with_capacity(count);
        let mut features = Vec::new();
        for _ in 0..count {
            let mut rec = lines.expect("l")?;
            let i: usize = rec.parse()?;
            if indices.last().is_some_and(|&prev| prev >= i) {
                return Err(rec.error("landmark indices must be strictly increasing"));
            }
            indices.push(i);
            if has_features != 0 {
                features.push(DVector::from_vec(rec.floats(dim)?));
            }
            rec.finish()?;
        }
        lines.expect("end")?.finish()?;
        Ok(Self { indices, features: (has_features != 0).then_some(features), n, k, tau_d, seed, scene_hash })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Keypoint, SceneConfig};
    use proptest::prelude::*;

    fn scene(n: usize, views: usize, seed: u64) -> Scene {
        let cfg = SceneConfig {
            n_gaussians: n,
            n_cameras: views,
            feature_dim: 4,
            clutter_fraction: 0.3,
            ..SceneConfig::default()
        };
        generate_scene(&cfg, seed).unwrap()
    }

    fn brute_scores(scene: &Scene, tau: f64) -> Vec<u32> {
        let mut s = vec![0u32; scene.gaussians.len()];
        for (cam, kps) in scene.cameras.iter().zip(&scene.keypoints_per_view) {
            for (i, g) in scene.gaussians.iter().enumerate() {
                if !in_frustum(cam, &g.center, 0.0) {
                    continue;
                }
                let (px, _) = project(cam, &g.center).unwrap();
                let dmin = kps.iter().map(|k| k.pixel.distance(&px)).fold(f64::INFINITY, f64::min);
                if dmin <= tau {
                    s[i] += 1;
                }
            }
        }
        s
    }

    #[test]
    fn constructed_consensus_count() {
        let mut sc = scene(1, 5, 2);
        sc.gaussians[0].center = sc.centroid();
        let g = sc.gaussians[0].center;
        for v in 0..5 {
            let (px, _) = project(&sc.cameras[v], &g).unwrap();
            let offset = if v < 3 { 0.0 } else { 5.0 };
            sc.keypoints_per_view[v] = vec![Keypoint {
                pixel: PixelPoint::new(px.u + offset, px.v),
                descriptor: DVector::zeros(4),
                source: None,
            }];
        }
        assert_eq!(consensus_scores(&sc, 1.0).unwrap().scores, vec![3]);
    }

    #[test]
    fn no_keypoints_means_zero_scores() {
        let mut sc = scene(30, 4, 2);
        for kps in &mut sc.keypoints_per_view {
            kps.clear();
        }
        assert!(consensus_scores(&sc, 1.0).unwrap().scores.iter().all(|s| *s == 0));
    }

    #[test]
    fn scores_match_brute_force() {
        for seed in 0..5 {
            let sc = scene(300, 8, seed);
            for tau in [0.5, 1.0, 3.0, 20.0] {
                let fast = consensus_scores(&sc, tau).unwrap();
                assert_eq!(fast.scores, brute_scores(&sc, tau));
                assert!(fast.scores.iter().all(|s| *s as usize <= fast.n_views));
            }
        }
    }

    #[test]
    fn rejects_bad_tau() {
        assert!(consensus_scores(&scene(5, 1, 0), 0.0).is_err());
    }

    #[test]
    fn raising_tau_never_lowers_scores() {
        let sc = scene(200, 6, 4);
        let mut prev = consensus_scores(&sc, 0.25).unwrap().scores;
        for tau in [0.5, 1.0, 2.0, 8.0, 40.0] {
            let cur = consensus_scores(&sc, tau).unwrap().scores;
            assert!(prev.iter().zip(&cur).all(|(a, b)| a <= b));
            prev = cur;
        }
    }

    #[test]
    fn unit_neighborhood_selects_every_anchor() {
        let sc = scene(40, 3, 1);
        let scores = consensus_scores(&sc, 1.0).unwrap();
        let db = kc_sample(&sc, &scores, 40, 1, 5).unwrap();
        assert_eq!(db.indices, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn dominant_score_wins_its_neighborhood() {
        let sc = scene(50, 3, 1);
        let mut scores = consensus_scores(&sc, 1.0).unwrap();
        scores.scores.iter_mut().for_each(|s| *s = 0);
        scores.scores[17] = 10;
        let db = kc_sample(&sc, &scores, 200, 50, 3).unwrap();
        assert_eq!(db.indices, vec![17]);
    }

    #[test]
    fn invalid_params() {
        let sc = scene(10, 2, 1);
        let scores = consensus_scores(&sc, 1.0).unwrap();
        assert!(matches!(kc_sample(&sc, &scores, 0, 3, 0), Err(Error::InvalidParams(_))));
        assert!(matches!(kc_sample(&sc, &scores, 3, 0, 0), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn landmarks_are_neighborhood_argmaxes() {
        let sc = scene(150, 6, 9);
        let scores = consensus_scores(&sc, 1.0).unwrap();
        let db = kc_sample(&sc, &scores, 60, 8, 21).unwrap();
        assert!(db.len() <= 60);
        assert!(db.indices.windows(2).all(|w| w[0] < w[1]));
        for &l in &db.indices {
            // Some Gaussian's 8-neighbourhood must contain l as its argmax.
            let ok = (0..sc.gaussians.len()).any(|a| {
                let mut d: Vec<(f64, usize)> = sc
                    .gaussians
                    .iter()
                    .enumerate()
                    .map(|(i, g)| ((g.center - sc.gaussians[a].center).norm_squared(), i))
                    .collect();
                d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let hood: Vec<usize> = d[..8].iter().map(|x| x.1).collect();
                let best =
                    *hood.iter().max_by(|&&x, &&y| scores.scores[x].cmp(&scores.scores[y]).then(y.cmp(&x))).unwrap();
                best == l
            });
            assert!(ok, "landmark {l} is not a neighbourhood argmax");
        }
    }

    #[test]
    fn matches_reference_implementation() {
        let sc = scene(50, 4, 13);
        let scores = consensus_scores(&sc, 2.0).unwrap();
        let db = kc_sample(&sc, &scores, 20, 5, 77).unwrap();
        // Reference: same anchor stream, exhaustive neighbour search.
        let mut rng = rng::from_seed(77);
        let anchors = draw_anchors(&mut rng, 50, 20);
        let mut out = BTreeSet::new();
        for a in anchors {
            let mut order: Vec<usize> = (0..50).collect();
            order.sort_by(|&x, &y| {
                let dx = (sc.gaussians[x].center - sc.gaussians[a].center).norm_squared();
                let dy = (sc.gaussians[y].center - sc.gaussians[a].center).norm_squared();
                dx.total_cmp(&dy).then(x.cmp(&y))
            });
            let mut best = order[0];
            for &i in &order[1..5] {
                if scores.scores[i] > scores.scores[best] || (scores.scores[i] == scores.scores[best] && i < best) {
                    best = i;
                }
            }
            out.insert(best);
        }
        assert_eq!(db.indices, out.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn sampling_is_deterministic() {
        let sc = scene(100, 4, 3);
        let scores = consensus_scores(&sc, 1.0).unwrap();
        assert_eq!(kc_sample(&sc, &scores, 30, 5, 8).unwrap(), kc_sample(&sc, &scores, 30, 5, 8).unwrap());
    }

    #[test]
    fn landmark_text_roundtrip() {
        let sc = scene(40, 3, 1);
        let scores = consensus_scores(&sc, 1.0).unwrap();
        let mut db = kc_sample(&sc, &scores, 20, 4, 2).unwrap();
        assert_eq!(LandmarkDb::from_text(&db.to_text()).unwrap(), db);
        db.features = Some(db.indices.iter().map(|&i| DVector::from_element(4, i as f64 / 7.0)).collect());
        let text = db.to_text();
        assert_eq!(LandmarkDb::from_text(&text).unwrap(), db);
        assert!(db.check_scene(&sc).is_ok());
        let other = scene(40, 3, 2);
        assert!(matches!(db.check_scene(&other), Err(Error::SceneHashMismatch { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn landmark_count_is_bounded(seed in 0u64..1000, n in 1usize..300) {
            let sc = scene(25, 2, 7);
            let scores = consensus_scores(&sc, 1.0).unwrap();
            let db = kc_sample(&sc, &scores, n, 3, seed).unwrap();
            prop_assert!(db.len() <= n.min(25));
        }
    }
}
