//! Batch benchmark over seeded queries and its CSV/text report.

use std::fmt::Write as _;

use crate::error::Result;
use crate::geometry::PoseError;
use crate::sampling::LandmarkDb;
use crate::scene::Scene;

use super::{build_query, localize, LocalizationResult, PipelineConfig};

/// `(translation, rotation in degrees)` recall thresholds.
pub const DEFAULT_RECALL_THRESHOLDS: [(f64, f64); 3] = [(0.005, 0.25), (0.01, 0.5), (0.05, 2.0)];

pub const CSV_HEADER: &str =
    "query_id,coarse_t_err,coarse_r_err,fine_t_err,fine_r_err,n_coarse,n_c,n_c_lgcv,n_f,iterations";

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query_id: u64,
    pub result: Result<LocalizationResult>,
}

impl QueryOutcome {
    pub fn coarse_error(&self) -> Option<PoseError> {
        self.result.as_ref().ok().map(|r| r.coarse_error())
    }

    pub fn fine_error(&self) -> Option<PoseError> {
        self.result.as_ref().ok().map(|r| r.fine_error())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub outcomes: Vec<QueryOutcome>,
}

/// Median; NaN for an empty slice. Infinite entries sort last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub translation: f64,
    pub rotation_deg: f64,
    /// Percent of queries under both thresholds.
    pub coarse: f64,
    pub fine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub queries: usize,
    pub failed: usize,
    pub coarse_t: f64,
    pub coarse_r: f64,
    pub fine_t: f64,
    pub fine_r: f64,
    pub recall: Vec<Recall>,
}

impl Benchmark {
    /// Localizes queries `0..n` concurrently; a failing query becomes a failed
    /// row instead of aborting the batch.
    pub fn run(scene: &Scene, db: &LandmarkDb, n: u64, cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        use rayon::prelude::*;
        db.check_scene(scene)?;
        cfg.validate()?;
        let outcomes = (0..n)
            .into_par_iter()
            .map(|id| {
                let result = build_query(scene, id, &cfg.query, seed).and_then(|q| localize(scene, db, &q, cfg, seed));
                if let Err(e) = &result {
                    log::warn!("query {id} failed: {e}");
                }
                QueryOutcome { query_id: id, result }
            })
            .collect();
        Ok(Self { outcomes })
    }

    /// Per-query rows. Failed queries carry `nan` errors; wall time is left out
    /// so the file is reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for o in &self.outcomes {
            match &o.result {
                Ok(r) => {
                    let (c, f) = (r.coarse_error(), r.fine_error());
                    let s = r.last_stats();
                    let count = |g: fn(&super::IterationStats) -> usize| s.map_or(0, g);
                    let _ = writeln!(
                        out,
                        "{},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{},{},{}",
                        o.query_id,
                        c.translation,
                        c.rotation_deg,
                        f.translation,
                        f.rotation_deg,
                        r.n_coarse,
                        count(|s| s.n_c),
                        count(|s| s.n_c_lgcv),
                        count(|s| s.n_f),
                        r.iterations()
                    );
                }
                Err(_) => {
                    let _ = writeln!(out, "{},nan,nan,nan,nan,0,0,0,0,0", o.query_id);
                }
            }
        }
        out
    }

    /// Medians count failures as infinite error.
    pub fn summary(&self, thresholds: &[(f64, f64)]) -> Summary {
        let pick = |f: fn(&QueryOutcome) -> Option<PoseError>| -> Vec<PoseError> {
            self.outcomes
                .iter()
                .map(|o| f(o).unwrap_or(PoseError { translation: f64::INFINITY, rotation_deg: f64::INFINITY }))
                .collect()
        };
        let coarse = pick(QueryOutcome::coarse_error);
        let fine = pick(QueryOutcome::fine_error);
        let n = self.outcomes.len();
        let pct = |errs: &[PoseError], t: f64, r: f64| {
            if n == 0 {
                f64::NAN
            } else {
                100.0 * errs.iter().filter(|e| e.translation < t && e.rotation_deg < r).count() as f64 / n as f64
            }
        };
        let recall = thresholds
            .iter()
            .map(|&(t, r)| Recall {
                translation: t,
                rotation_deg: r,
                coarse: pct(&coarse, t, r),
                fine: pct(&fine, t, r),
            })
            .collect();
        let med = |errs: &[PoseError], f: fn(&PoseError) -> f64| median(&errs.iter().map(f).collect::<Vec<_>>());
        Summary {
            queries: n,
            failed: self.outcomes.iter().filter(|o| o.result.is_err()).count(),
            coarse_t: med(&coarse, |e| e.translation),
            coarse_r: med(&coarse, |e| e.rotation_deg),
            fine_t: med(&fine, |e| e.translation),
            fine_r: med(&fine, |e| e.rotation_deg),
            recall,
        }
    }
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "queries {}", self.queries);
        let _ = writeln!(out, "failed {}", self.failed);
        let _ = writeln!(out, "median_coarse {:.9e} {:.9e}", self.coarse_t, self.coarse_r);
        let _ = writeln!(out, "median_fine {:.9e} {:.9e}", self.fine_t, self.fine_r);
        for r in &self.recall {
            let _ =
                writeln!(out, "recall {}/{} coarse {:.2} fine {:.2}", r.translation, r.rotation_deg, r.coarse, r.fine);
        }
        out
    }
}
