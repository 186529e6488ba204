//! Edge truncation by midpoint distance: the distribution of the squared
//! distance between two uniform points in `[0, a]²`, the expected number of
//! surviving edges, and threshold sweeps.

use std::f64::consts::PI;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fgnn::{evaluate_against, train, FgnnConfig, FgnnError, Sample, ValidationSet};
use crate::graphrep::{build_pair_graph, truncate_edges};
use crate::netgen::{sample_instance, ExperimentConfig, NetgenError};
use crate::rng::{child_seed, rng_from_seed, Rng};

#[derive(Debug, Error)]
pub enum ThresholdError {
    #[error("z = {z} outside [0, {max}]")]
    Domain { z: f64, max: f64 },
    #[error("no threshold reaches {target} (best {best})")]
    Unreachable { target: f64, best: f64 },
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Netgen(#[from] NetgenError),
    #[error(transparent)]
    Fgnn(#[from] FgnnError),
}

/// `P(Z ≤ z)` for `Z = (X₁−X₂)² + (Y₁−Y₂)²` with all coordinates i.i.d.
/// uniform on `[0, a]`.
pub fn cdf_squared_distance(z: f64, a: f64) -> Result<f64, ThresholdError> {
    let a2 = a * a;
    if !(0.0..=2.0 * a2).contains(&z) {
        return Err(ThresholdError::Domain { z, max: 2.0 * a2 });
    }
    let f = if z <= a2 {
        cdf_near(z, a)
    } else {
        cdf_far(z, a)
    };
    Ok(f.clamp(0.0, 1.0))
}

/// Both closed forms at `z`, without choosing by range. They agree at `a²`.
pub fn cdf_branch_values(z: f64, a: f64) -> [f64; 2] {
    [cdf_near(z, a), cdf_far(z, a)]
}

fn cdf_near(z: f64, a: f64) -> f64 {
    let a2 = a * a;
    -8.0 / (3.0 * a2 * a) * z.powf(1.5) + PI * z / a2 + z * z / (2.0 * a2 * a2)
}

fn cdf_far(z: f64, a: f64) -> f64 {
    let a2 = a * a;
    1.0 / 3.0 - (2.0 + PI) / a2 * z
        + 4.0 / a2 * ((a / z.sqrt()).asin() * z + a * (z - a2).sqrt())
        + 8.0 / (3.0 * a2 * a) * (z - a2).powf(1.5)
        - z * z / (2.0 * a2 * a2)
}

/// `V(V−1)/2 · F(t²)`, with `t²` clamped to the support `[0, 2a²]`.
pub fn expected_edges(t: f64, num_vertices: usize, a: f64) -> f64 {
    let pairs = (num_vertices * num_vertices.saturating_sub(1) / 2) as f64;
    let z = (t.max(0.0) * t.max(0.0)).min(2.0 * a * a);
    pairs * cdf_squared_distance(z, a).expect("clamped into the support")
}

/// `n` squared distances between independent uniform point pairs.
pub fn sample_squared_distances(a: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let dx = rng.gen_range(0.0..a) - rng.gen_range(0.0..a);
            let dy = rng.gen_range(0.0..a) - rng.gen_range(0.0..a);
            dx * dx + dy * dy
        })
        .collect()
}

/// Largest gap between the empirical CDF of `samples` and `cdf`.
pub fn sup_cdf_error(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let f = cdf(z);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

/// Where the pair midpoints of an empirical count come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MidpointModel {
    /// Full network instances: count surviving non-SI edges of the pair
    /// graph.
    Netgen,
    /// `K` i.i.d. uniform midpoints per instance, every pair eligible.
    Uniform,
}

/// Mean number of surviving edges over `num_instances` instances.
pub fn empirical_edges(
    cfg: &ExperimentConfig,
    t: f64,
    num_instances: usize,
    seed: u64,
    model: MidpointModel,
) -> Result<f64, ThresholdError> {
    assert!(num_instances >= 1, "need at least one instance");
    let counts = (0..num_instances)
        .into_par_iter()
        .map(|i| {
            let s = child_seed(seed, i as u64);
            Ok(match model {
                MidpointModel::Netgen => {
                    let g = build_pair_graph(&sample_instance(cfg, s)?);
                    truncate_edges(&g, t).num_interference_edges()
                }
                MidpointModel::Uniform => uniform_midpoint_count(cfg, t, s),
            })
        })
        .collect::<Result<Vec<usize>, ThresholdError>>()?;
    Ok(counts.iter().sum::<usize>() as f64 / num_instances as f64)
}

fn uniform_midpoint_count(cfg: &ExperimentConfig, t: f64, seed: u64) -> usize {
    let a = cfg.area_side_m;
    let mut rng = rng_from_seed(seed);
    let pts: Vec<(f64, f64)> = (0..cfg.num_links)
        .map(|_| (rng.gen_range(0.0..a), rng.gen_range(0.0..a)))
        .collect();
    let t2 = t * t;
    let mut n = 0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let (dx, dy) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
            if dx * dx + dy * dy <= t2 {
                n += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub thresholds: Vec<f64>,
    pub analytic_expected_edges: Vec<f64>,
    pub empirical_mean_edges: Vec<f64>,
    pub normalized_performance: Vec<f64>,
    pub training_time_s: Vec<f64>,
}

impl ThresholdReport {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        let n = self.thresholds.len();
        if n == 0 {
            return Err(ThresholdError::Report("empty".into()));
        }
        if [
            self.analytic_expected_edges.len(),
            self.empirical_mean_edges.len(),
            self.normalized_performance.len(),
            self.training_time_s.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(ThresholdError::Report("columns differ in length".into()));
        }
        Ok(())
    }
}

/// Smallest listed threshold whose normalized performance reaches `target`.
pub fn ideal_threshold(report: &ThresholdReport, target: f64) -> Result<f64, ThresholdError> {
    report.validate()?;
    let mut rows: Vec<(f64, f64)> = report
        .thresholds
        .iter()
        .copied()
        .zip(report.normalized_performance.iter().copied())
        .collect();
    rows.sort_by(|x, y| x.0.total_cmp(&y.0));
    rows.iter()
        .find(|(_, perf)| *perf >= target)
        .map(|(t, _)| *t)
        .ok_or(ThresholdError::Unreachable {
            target,
            best: rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max),
        })
}

/// Held-out data for a sweep with reference (WMMSE) sum rates.
pub struct SweepData<'a> {
    pub train: &'a [Sample],
    pub validation: Option<(&'a [Sample], &'a [f64])>,
    pub test: &'a [Sample],
    pub test_reference: &'a [f64],
}

/// Trains and evaluates one model per threshold; training and test graphs
/// are truncated alike. References stay those of the full network.
pub fn threshold_sweep(
    data: &SweepData<'_>,
    thresholds: &[f64],
    model: &FgnnConfig,
    seed: u64,
) -> Result<ThresholdReport, ThresholdError> {
    let mut report = ThresholdReport {
        thresholds: thresholds.to_vec(),
        analytic_expected_edges: Vec::new(),
        empirical_mean_edges: Vec::new(),
        normalized_performance: Vec::new(),
        training_time_s: Vec::new(),
    };
    for &t in thresholds {
        let cut =
            |xs: &[Sample]| -> Vec<Sample> { xs.par_iter().map(|s| s.truncated(t)).collect() };
        let train_set = cut(data.train);
        let test_set = cut(data.test);
        let val_set = data.validation.map(|(v, _)| cut(v));
        let validation = match (&val_set, data.validation) {
            (Some(samples), Some((_, refs))) => Some(ValidationSet {
                samples,
                reference_rates: refs.to_vec(),
            }),
            _ => None,
        };
        let out = train(&train_set, validation.as_ref(), model, seed)?;
        let metrics = evaluate_against(&out.params, model, &test_set, data.test_reference)?;

        let k = data.test.first().map_or(0, |s| s.instance.num_links());
        let a = data
            .test
            .first()
            .map_or(1.0, |s| s.instance.config.area_side_m);
        report.analytic_expected_edges.push(expected_edges(t, k, a));
        report.empirical_mean_edges.push(
            test_set
                .iter()
                .map(|s| s.graph.num_interference_edges() as f64)
                .sum::<f64>()
                / test_set.len() as f64,
        );
        report
            .normalized_performance
            .push(metrics.ratio_vs_reference);
        report.training_time_s.push(out.wall_time_s);
    }
    Ok(report)
}
