//! One function per subcommand. Each writes its reports into `--out` and
//! returns the manifest it wrote there.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use gsloc::bias::{self, FeatureSource, MIN_TRIALS};
use gsloc::correspondence::{self, LgcvConfig, ScaleRule, SweepConfig};
use gsloc::fusion::{self, NormalMode};
use gsloc::pipeline::{self, Benchmark, GhostConfig, PipelineConfig, DEFAULT_RECALL_THRESHOLDS};
use gsloc::pose::RansacConfig;
use gsloc::rng::{self, label};
use gsloc::sampling::{self, LandmarkDb};
use gsloc::scene::{self, random_unit_vector};
use gsloc::{Error, Scene, SceneConfig};

use crate::manifest::{read_input, Run, RunManifest};

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

/// Absolute input paths keep a manifest replayable from any directory.
fn absolute(path: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(path).with_context(|| format!("resolving {}", path.display()))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SceneGenArgs {
    #[arg(long, default_value_t = 1000)]
    pub n_gaussians: usize,
    #[arg(long, default_value_t = 24)]
    pub n_cameras: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    /// Per-component view-noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub extent: f64,
    #[arg(long, default_value_t = 0.2)]
    pub clutter_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub textured_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub view_correlation: f64,
    #[arg(long, default_value_t = 640)]
    pub width: u32,
    #[arg(long, default_value_t = 480)]
    pub height: u32,
    #[arg(long, default_value_t = 500.0)]
    pub focal: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl SceneGenArgs {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            n_gaussians: self.n_gaussians,
            n_cameras: self.n_cameras,
            feature_dim: self.feature_dim,
            sigma: self.sigma,
            extent: self.extent,
            clutter_fraction: self.clutter_fraction,
            textured_fraction: self.textured_fraction,
            view_correlation: self.view_correlation,
            width: self.width,
            height: self.height,
            focal: self.focal,
        }
    }
}

pub const SCENE_FILE: &str = "scene.txt";

pub fn scene_gen(args: &SceneGenArgs) -> Result<RunManifest> {
    let scene = scene::generate_scene(&args.scene_config(), args.seed)?;
    let mut run = Run::start(&args.out, "scene-gen", args.seed, args)?;
    run.write(SCENE_FILE, &scene.to_text())?;
    run.finish()
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BiasArgs {
    /// Scene file; enables the distance histograms.
    #[arg(long, conflicts_with = "synthetic_weights", required_unless_present = "synthetic_weights")]
    pub scene: Option<PathBuf>,
    /// Comma-separated per-view weights for a synthetic instance.
    #[arg(long, value_delimiter = ',')]
    pub synthetic_weights: Option<Vec<f64>>,
    /// Synthetic backgrounds are `μ + offset` in every component.
    #[arg(long, default_value_t = 1.0)]
    pub background_offset: f64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Synthetic per-component noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Gaussian analysed for bias in scene mode; defaults to the most observed.
    #[arg(long)]
    pub gaussian: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Per-Gaussian fused vs alpha-optimum distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceComparison {
    pub mean_fused: f64,
    pub mean_alpha: f64,
    pub paired: usize,
    pub favor_fused: usize,
}

impl DistanceComparison {
    pub fn favor_fraction(&self) -> f64 {
        self.favor_fused as f64 / self.paired as f64
    }
}

fn render_bias(report: &bias::BiasReport, w: &[f64], target: &str) -> String {
    let weights: Vec<String> = w.iter().map(|x| format!("{x:.9e}")).collect();
    format!("target {target}\nweights {}\n{}", weights.join(" "), report.to_record())
}

pub fn bias_experiment(args: &BiasArgs) -> Result<RunManifest> {
    if args.trials == 0 {
        return Err(invalid("trials must be positive"));
    }
    if args.trials < MIN_TRIALS {
        return Err(invalid(format!("trials must be at least {MIN_TRIALS}")));
    }
    let scene_path = args.scene.as_deref().map(absolute).transpose()?;
    let args = &BiasArgs { scene: scene_path.clone(), ..args.clone() };
    let mut run = Run::start(&args.out, "bias-experiment", args.seed, args)?;
    if let Some(w) = &args.synthetic_weights {
        if args.dim == 0 || args.sigma.is_nan() || args.sigma < 0.0 {
            return Err(invalid("dim must be positive and sigma non-negative"));
        }
        let mu = random_unit_vector(&mut rng::stream(args.seed, label::SCENE, 0), args.dim);
        let b: Vec<DVector<f64>> = w.iter().map(|_| mu.add_scalar(args.background_offset)).collect();
        let report =
            bias::empirical_bias(&mu, &vec![args.sigma * args.sigma; args.dim], w, &b, args.trials, args.seed)?;
        run.write("bias_report.txt", &render_bias(&report, w, "synthetic"))?;
        run.write("bias.csv", &report.to_csv())?;
        return run.finish();
    }

    let input = read_input(&scene_path.ok_or_else(|| invalid("either a scene or synthetic weights is required"))?)?;
    let scene = Scene::from_text(&input.text)?;
    run.input("scene", &input);

    let fused = bias::distance_histogram(&scene, FeatureSource::Fused, args.bins, scene.seed)?;
    let alpha = bias::distance_histogram(&scene, FeatureSource::AlphaOptimum, args.bins, scene.seed)?;
    let mut rows = String::from("gaussian,fused,alpha_optimum\n");
    let fmt = |d: Option<f64>| d.map_or("nan".to_string(), |x| format!("{x:.9e}"));
    let mut cmp = DistanceComparison { mean_fused: fused.mean, mean_alpha: alpha.mean, paired: 0, favor_fused: 0 };
    for (i, (f, a)) in fused.distances.iter().zip(&alpha.distances).enumerate() {
        let _ = writeln!(rows, "{i},{},{}", fmt(*f), fmt(*a));
        if let (Some(f), Some(a)) = (f, a) {
            cmp.paired += 1;
            cmp.favor_fused += (f < a) as usize;
        }
    }
    run.write("hist_fused.csv", &fused.to_csv())?;
    run.write("hist_alpha.csv", &alpha.to_csv())?;
    run.write("distances.csv", &rows)?;
    run.write(
        "distance_summary.txt",
        &format!(
            "mean_fused {:.9e}\nmean_alpha_optimum {:.9e}\npaired {}\nfavor_fused {}\n",
            cmp.mean_fused, cmp.mean_alpha, cmp.paired, cmp.favor_fused
        ),
    )?;

    let observations = scene.observe_all(scene.seed);
    let target = match args.gaussian {
        Some(g) if g < scene.gaussians.len() => g,
        Some(g) => return Err(invalid(format!("gaussian {g} out of range"))),
        None => (0..scene.gaussians.len())
            .max_by_key(|&i| {
                let seen = observations.iter().filter(|o| o.features[i].is_some()).count();
                (seen, std::cmp::Reverse(i))
            })
            .ok_or_else(|| invalid("scene has no gaussians"))?,
    };
    let (d, _) = bias::scene_decomposition(&scene, target, &observations)?;
    let mu = &scene.gaussians[target].true_feature;
    let report = bias::empirical_bias(mu, &scene.noise_cov, &d.weights, &d.backgrounds, args.trials, args.seed)?;
    run.write("bias_report.txt", &render_bias(&report, &d.weights, &format!("gaussian {target}")))?;
    run.write("bias.csv", &report.to_csv())?;
    run.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalArg {
    Global,
    PerView,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BuildDbArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Keypoint reprojection agreement radius, pixels.
    #[arg(long, default_value_t = sampling::DEFAULT_TAU_D)]
    pub tau_d: f64,
    /// Number of anchors drawn.
    #[arg(long, default_value_t = sampling::DEFAULT_LANDMARKS)]
    pub n: usize,
    /// Neighbourhood size per anchor.
    #[arg(long, default_value_t = sampling::DEFAULT_NEIGHBORS)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = NormalArg::Global)]
    pub normal_mode: NormalArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub const DB_FILE: &str = "landmarks.txt";

pub fn build_db(args: &BuildDbArgs) -> Result<RunManifest> {
    if args.k == 0 || args.n == 0 {
        return Err(invalid("n and k must be positive"));
    }
    if !(args.tau_d > 0.0 && args.tau_d.is_finite()) {
        return Err(invalid("tau_d must be positive"));
    }
    let args = &BuildDbArgs { scene: absolute(&args.scene)?, ..args.clone() };
    let input = read_input(&args.scene)?;
    let scene = Scene::from_text(&input.text)?;
    let scores = sampling::consensus_scores(&scene, args.tau_d)?;
    let db = sampling::kc_sample(&scene, &scores, args.n, args.k, args.seed)?;
    let mode = match args.normal_mode {
        NormalArg::Global => NormalMode::Global,
        NormalArg::PerView => NormalMode::PerView,
    };
    let (db, stats) = fusion::build_landmark_features(&scene, &db, scene.seed, mode)?;

    let mut run = Run::start(&args.out, "build-db", args.seed, args)?;
    run.input("scene", &input);
    run.write(DB_FILE, &db.to_text())?;
    run.write(
        "db_summary.txt",
        &format!("landmarks {}\ndropped {}\nambiguous_normals {}\n", db.len(), stats.dropped, stats.ambiguous),
    )?;
    run.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleArg {
    MaxPairwise,
    TripletVariance,
}

impl From<RuleArg> for ScaleRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::MaxPairwise => ScaleRule::MaxPairwise,
            RuleArg::TripletVariance => ScaleRule::TripletVariance,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LgcvArgs {
    #[arg(long, default_value_t = 8)]
    pub lgcv_k: usize,
    #[arg(long, default_value_t = 4.0)]
    pub lgcv_support: f64,
    #[arg(long, value_enum, default_value_t = RuleArg::MaxPairwise)]
    pub lgcv_rule: RuleArg,
}

impl LgcvArgs {
    fn config(&self, tau_a: f64, tau_s: f64) -> LgcvConfig {
        LgcvConfig {
            k: self.lgcv_k,
            tau_a,
            tau_s,
            support: self.lgcv_support,
            rule: self.lgcv_rule.into(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub queries: u64,
    /// Refinement iterations after the coarse pose.
    #[arg(long, default_value_t = 1)]
    pub iters: usize,
    #[arg(long)]
    pub no_lgcv: bool,
    #[arg(long, default_value_t = 0.9659)]
    pub tau_a: f64,
    #[arg(long, default_value_t = 0.1)]
    pub tau_s: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub lgcv: LgcvArgs,
    /// RANSAC inlier threshold, pixels.
    #[arg(long, default_value_t = 12.0)]
    pub ransac_threshold: f64,
    #[arg(long, default_value_t = 10_000)]
    pub ransac_iterations: usize,
    #[arg(long, default_value_t = 0.9999)]
    pub ransac_confidence: f64,
    #[arg(long, default_value_t = 12)]
    pub min_inliers: usize,
    /// Gauss-Newton polish iterations after RANSAC.
    #[arg(long, default_value_t = 30)]
    pub polish_iterations: usize,
    #[arg(long, default_value_t = pipeline::DEFAULT_QUERY_KEYPOINTS)]
    pub max_keypoints: usize,
    #[arg(long, default_value_t = 1.0)]
    pub keypoint_noise: f64,
    /// Minimum cosine similarity for sparse landmark matches; 0 disables.
    #[arg(long, default_value_t = pipeline::DEFAULT_SIMILARITY_FLOOR)]
    pub min_similarity: f64,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    /// Rendering noise in units of the scene's σ.
    #[arg(long, default_value_t = 2.0)]
    pub render_noise: f64,
    #[arg(long, default_value_t = GhostConfig::ARTIFACTS.fraction)]
    pub ghost_fraction: f64,
    #[arg(long, default_value_t = GhostConfig::ARTIFACTS.min_offset_px)]
    pub ghost_min_offset: f64,
    #[arg(long, default_value_t = GhostConfig::ARTIFACTS.max_offset_px)]
    pub ghost_max_offset: f64,
    /// Recall thresholds as `translation/degrees`, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0.005/0.25,0.01/0.5,0.05/2")]
    pub recall: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl LocalizeArgs {
    pub fn pipeline_config(&self) -> PipelineConfig {
        let ransac = RansacConfig {
            max_iterations: self.ransac_iterations,
            threshold: self.ransac_threshold,
            confidence: self.ransac_confidence,
            min_inliers: self.min_inliers,
            refine_iterations: self.polish_iterations,
            ..Default::default()
        };
        let mut cfg = PipelineConfig::default();
        cfg.query.max_keypoints = self.max_keypoints;
        cfg.query.keypoint_noise_px = self.keypoint_noise;
        cfg.coarse.min_similarity = (self.min_similarity > 0.0).then_some(self.min_similarity);
        cfg.coarse.ransac = ransac;
        cfg.refine.iterations = self.iters;
        cfg.refine.temperature = self.temperature;
        cfg.refine.lgcv = (!self.no_lgcv).then(|| self.lgcv.config(self.tau_a, self.tau_s));
        cfg.refine.render_noise_scale = self.render_noise;
        cfg.refine.ghosts = GhostConfig {
            fraction: self.ghost_fraction,
            min_offset_px: self.ghost_min_offset,
            max_offset_px: self.ghost_max_offset,
        };
        cfg.refine.ransac = ransac;
        cfg
    }

    pub fn recall_thresholds(&self) -> Result<Vec<(f64, f64)>> {
        if self.recall.is_empty() {
            return Ok(DEFAULT_RECALL_THRESHOLDS.to_vec());
        }
        self.recall
            .iter()
            .map(|s| {
                let parsed =
                    s.split_once('/').and_then(|(t, r)| Some((t.trim().parse().ok()?, r.trim().parse().ok()?)));
                parsed.ok_or_else(|| invalid(format!("recall threshold {s:?} is not translation/degrees")))
            })
            .collect()
    }
}

pub fn localize(args: &LocalizeArgs) -> Result<RunManifest> {
    let cfg = args.pipeline_config();
    cfg.validate()?;
    if let Some(l) = &cfg.refine.lgcv {
        l.validate().map_err(|e| invalid(e.to_string()))?;
    }
    let thresholds = args.recall_thresholds()?;
    let args = &LocalizeArgs { scene: absolute(&args.scene)?, db: absolute(&args.db)?, ..args.clone() };
    let scene_in = read_input(&args.scene)?;
    let db_in = read_input(&args.db)?;
    let scene = Scene::from_text(&scene_in.text)?;
    let db = LandmarkDb::from_text(&db_in.text)?;
    let bench = Benchmark::run(&scene, &db, args.queries, &cfg, args.seed)?;

    let mut run = Run::start(&args.out, "localize", args.seed, args)?;
    run.input("scene", &scene_in);
    run.input("db", &db_in);
    run.write("benchmark.csv", &bench.to_csv())?;
    run.write("summary.txt", &bench.summary(&thresholds).to_text())?;
    run.finish()
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.8059,0.8559,0.9059,0.9659,0.9759,0.9859")]
    pub tau_a: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.4")]
    pub tau_s: Vec<f64>,
    /// Match sets per grid cell.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 300)]
    pub matches: usize,
    #[arg(long, default_value_t = 0.5)]
    pub outlier_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    pub inlier_noise: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub lgcv: LgcvArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub fn lgcv_sweep(args: &SweepArgs) -> Result<RunManifest> {
    let base = args.lgcv.config(0.9659, 0.1);
    for &a in &args.tau_a {
        for &s in &args.tau_s {
            LgcvConfig { tau_a: a, tau_s: s, ..base }.validate().map_err(|e| invalid(e.to_string()))?;
        }
    }
    let cfg = SweepConfig {
        trials: args.trials,
        matches: args.matches,
        outlier_fraction: args.outlier_fraction,
        inlier_noise_px: args.inlier_noise,
        base,
        ..Default::default()
    };
    let (cells, input_precision) =
        correspondence::lgcv_sweep(&args.tau_a, &args.tau_s, &cfg, args.seed).map_err(|e| match e {
            Error::InvalidParams(m) => Error::InvalidConfig(m),
            e => e,
        })?;
    let mut run = Run::start(&args.out, "lgcv-sweep", args.seed, args)?;
    run.write("sweep.csv", &correspondence::sweep_csv(&cells, input_precision))?;
    run.finish()
}
