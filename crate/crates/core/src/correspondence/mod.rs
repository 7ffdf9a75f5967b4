//! Descriptor matching: sparse keypoint-to-landmark search, dual-softmax over
//! dense similarity matrices, mutual nearest neighbours, local geometric
//! verification and fine window matching.

mod fine;
mod lgcv;
mod synth;

pub use fine::{fine_match, fine_match_window, FeatureMap, FineMatch, FINE_WINDOW};
pub use lgcv::{lgcv_filter, lgcv_support, LgcvConfig, ScaleRule};
pub use synth::{lgcv_sweep, sweep_csv, LabeledMatches, Similarity2, SweepCell, SweepConfig, SWEEP_CSV_HEADER};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::PixelPoint;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    CoarseSparse,
    CoarseDense,
    Lgcv,
    Fine,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::CoarseSparse => "coarse_sparse",
            Stage::CoarseDense => "coarse_dense",
            Stage::Lgcv => "lgcv",
            Stage::Fine => "fine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub query: usize,
    pub reference: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub stage: Stage,
    pub matches: Vec<Match>,
    pub valid: Vec<bool>,
}

impl MatchSet {
    pub fn new(stage: Stage, matches: Vec<Match>) -> Self {
        let valid = vec![true; matches.len()];
        Self { stage, matches, valid }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn valid_matches(&self) -> impl Iterator<Item = &Match> + '_ {
        self.matches.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(m, _)| m)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

fn unit(v: &DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

fn check_dims(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<usize> {
    let dim = a.first().or(b.first()).map_or(0, |v| v.len());
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
        }
    }
    Ok(dim)
}

/// Rows are queries, columns references. Zero vectors score 0 against
/// everything.
pub fn cosine_similarity_matrix(queries: &[DVector<f64>], references: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let dim = check_dims(queries, references)?;
    let stack = |vs: &[DVector<f64>]| {
        let mut m = DMatrix::zeros(vs.len(), dim);
        for (i, v) in vs.iter().enumerate() {
            m.set_row(i, &unit(v).transpose());
        }
        m
    };
    Ok(stack(queries) * stack(references).transpose())
}

/// One-directional argmax: each query takes its most similar landmark (lowest
/// index on ties). Queries below `min_similarity` are left out.
pub fn sparse_match(
    queries: &[DVector<f64>],
    landmarks: &[DVector<f64>],
    min_similarity: Option<f64>,
) -> Result<MatchSet> {
    use rayon::prelude::*;
    check_dims(queries, landmarks)?;
    if landmarks.is_empty() {
        return Err(Error::InvalidParams("no landmarks to match against".into()));
    }
    let refs: Vec<DVector<f64>> = landmarks.iter().map(unit).collect();
    let matches: Vec<Option<Match>> = queries
        .par_iter()
        .enumerate()
        .map(|(q, f)| {
            let f = unit(f);
            let (mut best, mut score) = (0, f64::NEG_INFINITY);
            for (j, r) in refs.iter().enumerate() {
                let s = f.dot(r);
                if s > score {
                    best = j;
                    score = s;
                }
            }
            (min_similarity.is_none_or(|m| score >= m)).then_some(Match { query: q, reference: best, score })
        })
        .collect();
    Ok(MatchSet::new(Stage::CoarseSparse, matches.into_iter().flatten().collect()))
}

/// `softmax_rows(S/τ) ⊙ softmax_cols(S/τ)`.
pub fn dual_softmax(sim: &DMatrix<f64>, temperature: f64) -> Result<DMatrix<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidParams("temperature must be positive".into()));
    }
    let (r, c) = sim.shape();
    let scaled = sim / temperature;
    let mut rows = scaled.clone();
    for i in 0..r {
        let m = scaled.row(i).max();
        let mut row = scaled.row(i).map(|x| (x - m).exp());
        row /= row.sum();
        rows.set_row(i, &row);
    }
    let mut cols = scaled.clone();
    for j in 0..c {
        let m = scaled.column(j).max();
        let mut col = scaled.column(j).map(|x| (x - m).exp());
        col /= col.sum();
        cols.set_column(j, &col);
    }
    Ok(rows.component_mul(&cols))
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let (mut best, mut top) = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > top {
            best = i;
            top = v;
        }
    }
    best
}

/// Mutual nearest neighbours of a probability matrix, optionally requiring
/// `P[i,j] >= floor`.
pub fn mnn(prob: &DMatrix<f64>, floor: Option<f64>) -> Vec<Match> {
    let (r, c) = prob.shape();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    let col_best: Vec<usize> = (0..c).map(|j| argmax(prob.column(j).iter().copied())).collect();
    (0..r)
        .filter_map(|i| {
            let j = argmax(prob.row(i).iter().copied());
            let p = prob[(i, j)];
            (col_best[j] == i && floor.is_none_or(|f| p >= f)).then_some(Match { query: i, reference: j, score: p })
        })
        .collect()
}

/// Where the reference end of a dumped match lives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefLocation {
    Pixel(PixelPoint),
    Landmark(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DumpRow {
    pub stage: Stage,
    pub query: PixelPoint,
    pub reference: RefLocation,
    pub score: f64,
    pub valid: bool,
}

/// CSV with columns `stage,query_u,query_v,ref_u,ref_v,score,valid`. Landmark
/// references put the landmark index in `ref_u` and leave `ref_v` empty.
pub fn match_dump_csv(rows: &[DumpRow]) -> String {
    let mut out = String::from("stage,query_u,query_v,ref_u,ref_v,score,valid\n");
    for r in rows {
        let reference = match r.reference {
            RefLocation::Pixel(p) => format!("{},{}", p.u, p.v),
            RefLocation::Landmark(i) => format!("{i},"),
        };
        out.push_str(&format!(
            "{},{},{},{reference},{},{}\n",
            r.stage.label(),
            r.query.u,
            r.query.v,
            r.score,
            r.valid as u8
        ));
    }
    out
}
