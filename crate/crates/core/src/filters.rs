//! Case selection: best-by-time, Pareto time/size frontier, noise checks
//! and manual ranking.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::stats::dispersion;
use crate::model::{Aggregator, EntityId, OptimizationCase};
use crate::repository::{RepoError, Repository};

/// Default relative spread above which a case counts as noisy.
pub const NOISE_GATE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no run times to assess")]
    EmptyInput,
    #[error("unknown filter {0:?}")]
    UnknownFilter(String),
    #[error(transparent)]
    Repository(#[from] RepoError),
}

/// The metrics a filter looks at, detached from the records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricPoint {
    pub case_ref: EntityId,
    pub speedup: f64,
    pub size_ratio: f64,
    pub compile_time_ratio: f64,
    pub dispersion: f64,
}

impl MetricPoint {
    pub fn of(case: &OptimizationCase) -> Self {
        Self {
            case_ref: case.compile_id(),
            speedup: case.speedup,
            size_ratio: case.size_ratio,
            compile_time_ratio: case.compile_time_ratio,
            dispersion: case.dispersion,
        }
    }
}

/// Named filters, as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterName {
    BestTime,
    TimeSizePareto,
}

impl FilterName {
    pub const ALL: [FilterName; 2] = [FilterName::BestTime, FilterName::TimeSizePareto];

    pub fn cli_name(self) -> &'static str {
        match self {
            FilterName::BestTime => "get-all-best-flags-time",
            FilterName::TimeSizePareto => "get-all-best-flags-time-size-pareto",
        }
    }
}

impl fmt::Display for FilterName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for FilterName {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterName::ALL
            .into_iter()
            .find(|f| f.cli_name() == s)
            .ok_or_else(|| FilterError::UnknownFilter(s.to_string()))
    }
}

/// Correct, stable cases with `speedup >= min_speedup`, best first.
pub fn best_time_filter(cases: &[OptimizationCase], min_speedup: f64) -> Vec<OptimizationCase> {
    best_time_filter_gated(cases, min_speedup, NOISE_GATE)
}

pub fn best_time_filter_gated(
    cases: &[OptimizationCase],
    min_speedup: f64,
    gate: f64,
) -> Vec<OptimizationCase> {
    let mut out: Vec<OptimizationCase> = cases
        .iter()
        .filter(|c| c.output_correct && c.dispersion <= gate && c.speedup >= min_speedup)
        .cloned()
        .collect();
    // stable sort: equal speedups keep input order
    out.sort_by(|a, b| b.speedup.total_cmp(&a.speedup));
    out
}

/// `a` weakly dominates `b`: no worse on every axis, better on at least one.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Less => return false,
            Ordering::Greater => strict = true,
            Ordering::Equal => {}
        }
    }
    strict
}

/// Indices of the non-dominated `(speedup, size_ratio)` points, ascending.
/// Of several identical points only the first is kept.
pub fn pareto_indices(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[j]
            .0
            .total_cmp(&points[i].0)
            .then(points[j].1.total_cmp(&points[i].1))
            .then(i.cmp(&j))
    });
    let mut keep = Vec::new();
    let mut best_size = f64::NEG_INFINITY;
    for i in order {
        if points[i].1 > best_size {
            best_size = points[i].1;
            keep.push(i);
        }
    }
    keep.sort_unstable();
    keep
}

/// Non-dominated points over any number of axes, ascending. Quadratic.
pub fn pareto_indices_nd(points: &[Vec<f64>]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !points
                .iter()
                .enumerate()
                .any(|(j, p)| dominates(p, &points[i]) || (j < i && p == &points[i]))
        })
        .collect()
}

/// Cases on the speedup/size frontier, in input order.
pub fn pareto_filter(cases: &[OptimizationCase]) -> Vec<OptimizationCase> {
    let points: Vec<(f64, f64)> = cases.iter().map(|c| (c.speedup, c.size_ratio)).collect();
    pareto_indices(&points)
        .into_iter()
        .map(|i| cases[i].clone())
        .collect()
}

/// Frontier over speedup, size ratio and compile-time ratio.
pub fn pareto_filter_with_compile_time(cases: &[OptimizationCase]) -> Vec<OptimizationCase> {
    let points: Vec<Vec<f64>> = cases
        .iter()
        .map(|c| vec![c.speedup, c.size_ratio, c.compile_time_ratio])
        .collect();
    pareto_indices_nd(&points)
        .into_iter()
        .map(|i| cases[i].clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseAssessment {
    pub aggregate: f64,
    pub dispersion: f64,
    pub stable: bool,
}

pub fn assess_noise(
    run_times: &[f64],
    aggregator: Aggregator,
    gate: f64,
) -> Result<NoiseAssessment, FilterError> {
    let aggregate = aggregator.apply(run_times).ok_or(FilterError::EmptyInput)?;
    let dispersion = dispersion(run_times).ok_or(FilterError::EmptyInput)?;
    Ok(NoiseAssessment {
        aggregate,
        dispersion,
        stable: dispersion <= gate,
    })
}

/// Persists a manual rank for `case`.
pub fn rank_case(
    case: &OptimizationCase,
    rank: i64,
    repo: &mut Repository,
) -> Result<OptimizationCase, FilterError> {
    Ok(repo.rank_case(case, rank)?)
}
