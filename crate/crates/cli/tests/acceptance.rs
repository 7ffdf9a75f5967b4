//! Acceptance criteria, each checked against an oracle written here rather
//! than reused from the library. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::Parser;
use nalgebra::{DVector, Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use gsloc::bias::{self, FeatureSource};
use gsloc::correspondence::{lgcv_filter, LabeledMatches, LgcvConfig, Similarity2};
use gsloc::fusion::{self, FusionWeights, NormalMode};
use gsloc::geometry::pose_error;
use gsloc::pipeline::{median, Benchmark, PipelineConfig};
use gsloc::pose::{ransac_pnp, reprojection_jacobian, Match2D3D, RansacConfig};
use gsloc::rng::{self, label};
use gsloc::sampling::{self, draw_anchors};
use gsloc::scene::generate_scene;
use gsloc::{Intrinsics, PixelPoint, Pose, Scene, SceneConfig};
use gsloc_cli::{Cli, RunManifest};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian_vec(r: &mut rng::Rng, dim: usize, scale: f64) -> DVector<f64> {
    DVector::from_iterator(
        dim,
        (0..dim).map(|_| {
            let z: f64 = StandardNormal.sample(&mut *r);
            scale * z
        }),
    )
}

/// Plain gradient descent on `Σ_k ‖w_k f + (1 − w_k) B_k − f_k‖²`.
fn descend(obs: &[DVector<f64>], w: &[f64], b: &[DVector<f64>]) -> DVector<f64> {
    let s: f64 = w.iter().map(|x| x * x).sum();
    let step = 0.2 / s;
    let mut f = DVector::zeros(obs[0].len());
    for _ in 0..400 {
        let mut grad = DVector::zeros(f.len());
        for ((fk, wk), bk) in obs.iter().zip(w).zip(b) {
            let r = &f * *wk + bk * (1.0 - wk) - fk;
            grad += r * (2.0 * wk);
        }
        f -= grad * step;
    }
    f
}

fn bias_formula_exactness() -> Outcome {
    let (mut worst_opt, mut worst_bias) = (0.0f64, 0.0f64);
    for seed in 0..200 {
        let mut r = rng::from_seed(seed);
        let k = r.random_range(1..=10);
        let d = r.random_range(1..=8);
        let w: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
        let mu = gaussian_vec(&mut r, d, 1.0);
        let b: Vec<_> = (0..k).map(|_| gaussian_vec(&mut r, d, 1.0)).collect();
        let obs: Vec<_> = (0..k).map(|_| &mu + gaussian_vec(&mut r, d, 0.1)).collect();
        let closed = bias::optimal_feature_joint(&obs, &w, &b).unwrap();
        worst_opt = worst_opt.max((closed - descend(&obs, &w, &b)).amax());
        let clean = vec![mu.clone(); k];
        let shift = bias::optimal_feature_joint(&clean, &w, &b).unwrap() - &mu;
        worst_bias = worst_bias.max((bias::analytic_bias(&mu, &w, &b).unwrap() - shift).amax());
    }
    outcome(
        worst_opt <= 1e-8 && worst_bias <= 1e-12,
        format!("200 instances, optimum vs descent {worst_opt:.2e}, bias vs clean optimum {worst_bias:.2e}"),
    )
}

fn bias_nullity() -> Outcome {
    let mut ok = true;
    for seed in 0..100 {
        let mut r = rng::from_seed(1000 + seed);
        let k = r.random_range(1..=10);
        let d = r.random_range(1..=8);
        let mu = gaussian_vec(&mut r, d, 1.0);
        let b: Vec<_> = (0..k).map(|_| gaussian_vec(&mut r, d, 1.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| r.random_range(0.05..1.0)).collect();
        let full = bias::analytic_bias(&mu, &vec![1.0; k], &b).unwrap();
        let consistent = bias::analytic_bias(&mu, &w, &vec![mu.clone(); k]).unwrap();
        ok &= full.iter().chain(consistent.iter()).all(|&x| x == 0.0);
        ok &= bias::analytic_bias(&mu, &w, &b).unwrap().amax() > 0.0;
    }
    let mu = DVector::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
    let counter = bias::analytic_bias(&mu, &[0.5], &[mu.add_scalar(1.0)]).unwrap();
    let dev = counter.add_scalar(1.0).amax();
    outcome(ok && dev <= 1e-12, format!("zero on 100 null instances, w=0.5/B=mu+1 gives -1 within {dev:.1e}"))
}

fn fusion_unbiasedness() -> Outcome {
    const TRIALS: usize = 10_000;
    let (sigma, views, dim) = (0.05, 5, 8);
    let mut r = rng::from_seed(77);
    let raw: Vec<f64> = (0..views).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights =
        FusionWeights { views: (0..views).collect(), normalized: raw.iter().map(|x| x / total).collect(), raw };
    let mu = gaussian_vec(&mut r, dim, 1.0);
    let mut mean = DVector::zeros(dim);
    for t in 0..TRIALS as u64 {
        let mut tr = rng::stream(77, label::BIAS_TRIAL, t);
        let obs: Vec<_> = (0..views).map(|_| &mu + gaussian_vec(&mut tr, dim, sigma)).collect();
        let refs: Vec<&DVector<f64>> = obs.iter().collect();
        mean += fusion::fuse(&refs, &weights).unwrap();
    }
    mean /= TRIALS as f64;
    let sq: f64 = weights.normalized.iter().map(|w| w * w).sum();
    let bound = 4.0 * sigma * sq.sqrt() / (TRIALS as f64).sqrt();
    let dev = (mean - mu).amax();
    outcome(dev <= bound, format!("max |mean - mu| {dev:.2e} vs bound {bound:.2e}"))
}

fn distance_direction() -> Outcome {
    let scene = generate_scene(&SceneConfig::default(), 0).unwrap();
    let fused = bias::distance_histogram(&scene, FeatureSource::Fused, 50, scene.seed).unwrap();
    let alpha = bias::distance_histogram(&scene, FeatureSource::AlphaOptimum, 50, scene.seed).unwrap();
    let pairs: Vec<(f64, f64)> =
        fused.distances.iter().zip(&alpha.distances).filter_map(|(f, a)| Some(((*f)?, (*a)?))).collect();
    let favor = pairs.iter().filter(|(f, a)| f < a).count() as f64 / pairs.len() as f64;
    outcome(
        fused.mean < alpha.mean && favor >= 0.95,
        format!(
            "{} gaussians, {} views: mean fused {:.4} vs alpha {:.4}, {:.1}% pairs favor fusion",
            scene.gaussians.len(),
            scene.cameras.len(),
            fused.mean,
            alpha.mean,
            100.0 * favor
        ),
    )
}

/// Triangle enumeration over brute-force neighbourhoods, default thresholds.
fn brute_lgcv(x: &[PixelPoint], y: &[PixelPoint], cfg: &LgcvConfig) -> Vec<bool> {
    let edge = |a: &PixelPoint, b: &PixelPoint| (a.u - b.u).hypot(a.v - b.v);
    let cosine = |o: &PixelPoint, p: &PixelPoint, q: &PixelPoint| {
        let (a, b) = ((p.u - o.u, p.v - o.v), (q.u - o.u, q.v - o.v));
        let (la, lb) = (edge(o, p), edge(o, q));
        (a.0 / la) * (b.0 / lb) + (a.1 / la) * (b.1 / lb)
    };
    (0..x.len())
        .map(|i| {
            let mut order: Vec<usize> = (0..x.len()).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| edge(&x[i], &x[a]).total_cmp(&edge(&x[i], &x[b])));
            let hood = &order[..cfg.k];
            let mut support = 0;
            for a in 0..hood.len() {
                for b in a + 1..hood.len() {
                    let (j, l) = (hood[a], hood[b]);
                    let lx = [edge(&x[i], &x[j]), edge(&x[i], &x[l]), edge(&x[j], &x[l])];
                    let ly = [edge(&y[i], &y[j]), edge(&y[i], &y[l]), edge(&y[j], &y[l])];
                    if lx.iter().chain(&ly).any(|&e| e < 1e-9) {
                        continue;
                    }
                    if (cosine(&x[i], &x[j], &x[l]) - cosine(&y[i], &y[j], &y[l])).abs() >= 1.0 - cfg.tau_a {
                        continue;
                    }
                    let s: Vec<f64> = (0..3).map(|e| lx[e] / (ly[e] + cfg.eps)).collect();
                    let spread = (s[0] - s[1]).abs().max((s[0] - s[2]).abs()).max((s[1] - s[2]).abs());
                    support += (spread < cfg.tau_s) as usize;
                }
            }
            support as f64 >= cfg.support
        })
        .collect()
}

fn lgcv_invariance() -> Outcome {
    let cfg = LgcvConfig::default();
    let (mut exact_ok, mut precision_ok, mut brute_ok) = (true, true, true);
    let mut lowest_gain = f64::INFINITY;
    for seed in 0..100u64 {
        let mut r = rng::from_seed(seed);
        let sim = Similarity2::random(&mut r);
        let exact = LabeledMatches::generate(200, 0.0, 0.0, &sim, (640.0, 480.0), &mut r).unwrap();
        exact_ok &= lgcv_filter(&exact.x, &exact.y, &cfg).unwrap().iter().all(|&v| v);

        let noisy = LabeledMatches::generate(300, 0.5, 0.5, &sim, (640.0, 480.0), &mut r).unwrap();
        let before = noisy.precision(&vec![true; 300]);
        let after = noisy.precision(&lgcv_filter(&noisy.x, &noisy.y, &cfg).unwrap());
        precision_ok &= after >= before;
        lowest_gain = lowest_gain.min(after - before);

        let n = r.random_range(cfg.k + 1..=30);
        let small = LabeledMatches::generate(n, r.random_range(0.0..0.6), 1.0, &sim, (200.0, 200.0), &mut r).unwrap();
        brute_ok &= lgcv_filter(&small.x, &small.y, &cfg).unwrap() == brute_lgcv(&small.x, &small.y, &cfg);
    }
    outcome(
        exact_ok && precision_ok && brute_ok,
        format!(
            "100 seeds: exact similarity all pass {exact_ok}, precision never drops {precision_ok} (min gain {lowest_gain:.3}), brute-force equal {brute_ok}"
        ),
    )
}

fn synthetic_view(r: &mut rng::Rng, n: usize) -> (Pose, Intrinsics, Vec<Match2D3D>) {
    let k = Intrinsics::new(500.0, 520.0, 320.0, 240.0, 640, 480).unwrap();
    let axis = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
    let pose = Pose::from_axis_angle(
        axis,
        Vector3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)),
    );
    let matches = (0..n)
        .map(|_| {
            let z = r.random_range(2.0..8.0);
            let pc = Vector3::new(r.random_range(-0.6..0.6) * z, r.random_range(-0.45..0.45) * z, z);
            Match2D3D::new(k.project_camera_point(&pc), pose.inverse_transform_point(&pc))
        })
        .collect();
    (pose, k, matches)
}

fn pose_round_trip() -> Outcome {
    let (mut worst_t, mut worst_r) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut r = rng::from_seed(seed);
        let (truth, k, matches) = synthetic_view(&mut r, 60);
        let est = ransac_pnp(&matches, &k, &RansacConfig { seed, ..Default::default() }).unwrap();
        let e = pose_error(&est.pose, &truth);
        worst_t = worst_t.max(e.translation);
        worst_r = worst_r.max(e.rotation_deg);
    }
    let mut worst_jac = 0.0f64;
    for seed in 0..10 {
        let mut r = rng::from_seed(500 + seed);
        let (pose, k, matches) = synthetic_view(&mut r, 1);
        let x = matches[0].world;
        let j = reprojection_jacobian(&pose, &x, &k).unwrap();
        let h = 1e-6;
        let mut fd = nalgebra::Matrix2x6::zeros();
        for c in 0..6 {
            let mut d = Vector6::zeros();
            d[c] = h;
            let plus = k.project_camera_point(&pose.retract(&d).transform_point(&x));
            let minus = k.project_camera_point(&pose.retract(&-d).transform_point(&x));
            fd[(0, c)] = (plus.u - minus.u) / (2.0 * h);
            fd[(1, c)] = (plus.v - minus.v) / (2.0 * h);
        }
        worst_jac = worst_jac.max((j - fd).norm() / fd.norm());
    }
    outcome(
        worst_t <= 1e-6 && worst_r <= 1e-6 && worst_jac <= 1e-4,
        format!("100 poses: max {worst_t:.1e} units / {worst_r:.1e} deg; jacobian relative error {worst_jac:.1e}"),
    )
}

fn end_to_end() -> Outcome {
    let scene = generate_scene(&SceneConfig::default(), 0).unwrap();
    let scores = sampling::consensus_scores(&scene, sampling::DEFAULT_TAU_D).unwrap();
    let db = sampling::kc_sample(&scene, &scores, sampling::DEFAULT_LANDMARKS, sampling::DEFAULT_NEIGHBORS, 0).unwrap();
    let (db, _) = fusion::build_landmark_features(&scene, &db, scene.seed, NormalMode::Global).unwrap();
    let on = PipelineConfig::default();
    assert_eq!(on.refine.render_noise_scale, 2.0);
    let mut off = on;
    off.refine.lgcv = None;
    let t = |b: &Benchmark, fine: bool| {
        let errs: Vec<f64> = b
            .outcomes
            .iter()
            .map(|o| {
                let e = if fine { o.fine_error() } else { o.coarse_error() };
                e.map_or(f64::INFINITY, |e| e.translation)
            })
            .collect();
        median(&errs)
    };
    let with = Benchmark::run(&scene, &db, 50, &on, 0).unwrap();
    let without = Benchmark::run(&scene, &db, 50, &off, 0).unwrap();
    let (coarse, fine_on, fine_off) = (t(&with, false), t(&with, true), t(&without, true));
    outcome(
        fine_on < coarse && fine_on <= fine_off,
        format!(
            "50 queries: median translation coarse {coarse:.2e}, fine with LGCV {fine_on:.2e}, without {fine_off:.2e}"
        ),
    )
}

fn cli(args: &[&str]) -> RunManifest {
    let argv = std::iter::once("gsloc").chain(args.iter().copied());
    gsloc_cli::run(Cli::try_parse_from(argv).unwrap()).unwrap()
}

fn read_outputs(dir: &Path, m: &RunManifest) -> Vec<(String, Vec<u8>)> {
    m.outputs.keys().map(|f| (f.clone(), std::fs::read(dir.join(f)).unwrap())).collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).display().to_string();
    let scene_gen =
        |out: &str| cli(&["scene-gen", "--n-gaussians", "400", "--n-cameras", "16", "--seed", "3", "--out", out]);
    cli(&["scene-gen", "--n-gaussians", "400", "--n-cameras", "16", "--seed", "3", "--out", &p("scene")]);
    let scene = format!("{}/scene.txt", p("scene"));
    cli(&["build-db", "--scene", &scene, "--seed", "5", "--out", &p("db")]);
    let db = format!("{}/landmarks.txt", p("db"));

    type Cmd<'a> = Box<dyn Fn(&str) -> RunManifest + 'a>;
    let commands: Vec<(&str, Cmd)> = vec![
        ("scene-gen", Box::new(scene_gen)),
        (
            "bias-experiment",
            Box::new(|o: &str| cli(&["bias-experiment", "--scene", &scene, "--trials", "500", "--out", o])),
        ),
        (
            "bias-synthetic",
            Box::new(|o: &str| {
                cli(&["bias-experiment", "--synthetic-weights", "0.3,0.6,0.9", "--trials", "500", "--out", o])
            }),
        ),
        ("build-db", Box::new(|o: &str| cli(&["build-db", "--scene", &scene, "--seed", "5", "--out", o]))),
        (
            "localize",
            Box::new(|o: &str| {
                cli(&["localize", "--scene", &scene, "--db", &db, "--queries", "6", "--iters", "2", "--out", o])
            }),
        ),
        ("lgcv-sweep", Box::new(|o: &str| cli(&["lgcv-sweep", "--trials", "3", "--out", o]))),
    ];
    let mut failures = Vec::new();
    for (name, run) in &commands {
        let (a, b, c) = (p(&format!("{name}-a")), p(&format!("{name}-b")), p(&format!("{name}-replay")));
        let (ma, mb) = (run(&a), run(&b));
        let same_files = read_outputs(Path::new(&a), &ma) == read_outputs(Path::new(&b), &mb);
        let recorded = RunManifest::load(&Path::new(&a).join(gsloc_cli::MANIFEST_FILE)).unwrap();
        let replayed = gsloc_cli::replay(&recorded, c.into()).is_ok();
        if !(ma == mb && same_files && replayed) {
            failures.push(*name);
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} commands re-run and replayed from manifest; mismatches {failures:?}", commands.len()),
    )
}

/// Exhaustive `k` nearest centers of every anchor drawn from the shared stream.
fn neighborhoods(scene: &Scene, n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let anchors = draw_anchors(&mut rng::from_seed(seed), scene.gaussians.len(), n);
    anchors
        .iter()
        .map(|&a| {
            let c = scene.gaussians[a].center;
            let dist = |i: usize| (scene.gaussians[i].center - c).norm();
            let mut order: Vec<usize> = (0..scene.gaussians.len()).collect();
            order.sort_by(|&i, &j| dist(i).total_cmp(&dist(j)));
            order.truncate(k.min(order.len()));
            order
        })
        .collect()
}

fn reference_kc(hoods: &[Vec<usize>], scores: &[u32]) -> Vec<usize> {
    let mut out: Vec<usize> =
        hoods.iter().map(|h| *h.iter().max_by_key(|&&i| (scores[i], std::cmp::Reverse(i))).unwrap()).collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn sampling_correctness() -> Outcome {
    let (mut equal, mut argmax) = (true, true);
    let mut runs = 0;
    for seed in 0..20u64 {
        let cfg = SceneConfig { n_gaussians: 40 + 3 * seed as usize, n_cameras: 8, ..Default::default() };
        let scene = generate_scene(&cfg, seed).unwrap();
        let scores = sampling::consensus_scores(&scene, 1.0).unwrap();
        for (n, k) in [(10, 4), (50, 8), (200, 32), (5, 1)] {
            runs += 1;
            let db = sampling::kc_sample(&scene, &scores, n, k, seed).unwrap();
            let hoods = neighborhoods(&scene, n, k, seed);
            equal &= db.indices == reference_kc(&hoods, &scores.scores);
            argmax &= db.indices.iter().all(|&l| {
                hoods.iter().any(|h| h.contains(&l) && h.iter().all(|&j| scores.scores[l] >= scores.scores[j]))
            });
        }
    }
    outcome(
        equal && argmax,
        format!("{runs} scene/parameter combinations: equal to reference {equal}, every landmark a neighbourhood argmax {argmax}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 9] = [
        ("bias-formula-exactness", Duration::from_secs(5), bias_formula_exactness),
        ("bias-nullity", Duration::from_secs(60), bias_nullity),
        ("fusion-unbiasedness", Duration::from_secs(5), fusion_unbiasedness),
        ("fused-distance-direction", Duration::from_secs(30), distance_direction),
        ("lgcv-similarity-invariance", Duration::from_secs(60), lgcv_invariance),
        ("pose-round-trip", Duration::from_secs(10), pose_round_trip),
        ("end-to-end-improvement", Duration::from_secs(120), end_to_end),
        ("cli-determinism", Duration::from_secs(300), determinism),
        ("sampling-correctness", Duration::from_secs(60), sampling_correctness),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let o = check();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        failed += !pass as usize;
        println!(
            "{} {name}: {} [{:.2}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
