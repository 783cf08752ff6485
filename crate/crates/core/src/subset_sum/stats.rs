use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{sample_problem, solve_optimal, solve_threshold, BaseDistribution};
use crate::error::{Error, Result};
use crate::network::{csv_reader, csv_writer};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Optimal,
    Threshold,
}

impl std::str::FromStr for SolveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" => Ok(SolveMode::Optimal),
            "threshold" => Ok(SolveMode::Threshold),
            _ => Err(Error::InvalidArgument(format!("unknown solve mode `{s}`"))),
        }
    }
}

/// One trial. In threshold mode a trial that finds nothing within tolerance
/// records the optimal subset instead, with `found = false`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub error: f64,
    pub subset_size: usize,
    pub found: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub distribution: BaseDistribution,
    pub m: usize,
    pub trials: usize,
    pub tolerance: f64,
    pub mode: SolveMode,
    pub seed: u64,
    pub mean_error: f64,
    pub error_stddev: f64,
    pub mean_error_ci95: (f64, f64),
    pub fraction_exceeding_tolerance: f64,
    pub not_found_rate: f64,
    /// Entry `k` counts trials whose subset had `k` elements.
    pub subset_size_histogram: Vec<u64>,
    pub mean_subset_size: f64,
    /// Mean over trials with `found = true` only.
    pub mean_subset_size_found: f64,
    #[serde(skip)]
    pub rows: Vec<TrialRow>,
}

/// Per-trial stream so results do not depend on the thread count.
pub(crate) fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn run_statistics(
    dist: BaseDistribution,
    m: usize,
    trials: usize,
    tolerance: f64,
    mode: SolveMode,
    seed: u64,
) -> Result<StatsReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if mode == SolveMode::Threshold && !(tolerance > 0.0) {
        return Err(Error::InvalidArgument(
            "threshold mode needs a positive tolerance".into(),
        ));
    }
    let rows = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let p = sample_problem(dist, m, tolerance, &mut rng)?;
            let row = match mode {
                SolveMode::Optimal => {
                    let s = solve_optimal(&p);
                    TrialRow {
                        error: s.achieved_error,
                        subset_size: s.len(),
                        found: s.achieved_error <= tolerance,
                    }
                }
                SolveMode::Threshold => match solve_threshold(&p) {
                    Some(s) => TrialRow {
                        error: s.achieved_error,
                        subset_size: s.len(),
                        found: true,
                    },
                    None => {
                        let s = solve_optimal(&p);
                        TrialRow {
                            error: s.achieved_error,
                            subset_size: s.len(),
                            found: false,
                        }
                    }
                },
            };
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(dist, m, tolerance, mode, seed, rows))
}

fn summarize(
    dist: BaseDistribution,
    m: usize,
    tolerance: f64,
    mode: SolveMode,
    seed: u64,
    rows: Vec<TrialRow>,
) -> StatsReport {
    let n = rows.len() as f64;
    let mean_error = rows.iter().map(|r| r.error).sum::<f64>() / n;
    let var = if rows.len() > 1 {
        rows.iter().map(|r| (r.error - mean_error).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let sd = var.sqrt();
    let half = 1.96 * sd / n.sqrt();
    let mut hist = vec![0u64; m + 1];
    for r in &rows {
        hist[r.subset_size] += 1;
    }
    let found: Vec<&TrialRow> = rows.iter().filter(|r| r.found).collect();
    let mean_found = if found.is_empty() {
        f64::NAN
    } else {
        found.iter().map(|r| r.subset_size as f64).sum::<f64>() / found.len() as f64
    };
    StatsReport {
        distribution: dist,
        m,
        trials: rows.len(),
        tolerance,
        mode,
        seed,
        mean_error,
        error_stddev: sd,
        mean_error_ci95: (mean_error - half, mean_error + half),
        fraction_exceeding_tolerance: rows.iter().filter(|r| r.error > tolerance).count() as f64
            / n,
        not_found_rate: (rows.len() - found.len()) as f64 / n,
        subset_size_histogram: hist,
        mean_subset_size: rows.iter().map(|r| r.subset_size as f64).sum::<f64>() / n,
        mean_subset_size_found: mean_found,
        rows,
    }
}

impl StatsReport {
    /// One row per trial: `error,subset_size,found`.
    pub fn write_csv(&self, path: &Path, config: &Value) -> Result<()> {
        let mut w = csv_writer(path, config)?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads rows written by [`StatsReport::write_csv`].
    pub fn read_rows(path: &Path) -> Result<Vec<TrialRow>> {
        csv_reader(path)?
            .deserialize()
            .map(|r| r.map_err(|e| Error::Format(e.to_string())))
            .collect()
    }
}

/// Draws (error, subset size) pairs from the empirical distribution of a
/// stored report, as a stand-in for solving problems on very large networks.
#[derive(Debug, Clone)]
pub struct EmpiricalSampler {
    rows: Vec<TrialRow>,
}

impl EmpiricalSampler {
    pub fn new(report: &StatsReport) -> Result<Self> {
        Self::from_rows(report.rows.clone())
    }

    pub fn from_rows(rows: Vec<TrialRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empirical sampler needs rows".into()));
        }
        Ok(Self { rows })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrialRow {
        self.rows[rng.gen_range(0..self.rows.len())]
    }
}
