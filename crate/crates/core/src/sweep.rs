//! Grid sweeps of per-unit shares over a flexibility area.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::coalition::Coalition;
use crate::coopgame::{build_game, shapley_exact, Metric, ValueCache};
use crate::flexarea::{grid_requests, trace_area, DEFAULT_DIRS};
use crate::net_model::{Case, OperatingPoint};
use crate::opf::{initial_point, solve_dispatch, SwapPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Share of apparent flexible power in the cost-minimal dispatch.
    CostminShare,
    /// Shapley share of the capacity game.
    ShapleyCapacity,
    /// Shapley share of the surplus game.
    ShapleySurplus,
}

impl fmt::Display for SweepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepMode::CostminShare => "costmin_share",
            SweepMode::ShapleyCapacity => "shapley_capacity",
            SweepMode::ShapleySurplus => "shapley_surplus",
        })
    }
}

impl FromStr for SweepMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "costmin_share" => Ok(SweepMode::CostminShare),
            "shapley_capacity" => Ok(SweepMode::ShapleyCapacity),
            "shapley_surplus" => Ok(SweepMode::ShapleySurplus),
            _ => Err(format!(
                "unknown sweep mode `{s}` (expected costmin_share, shapley_capacity or shapley_surplus)"
            )),
        }
    }
}

impl SweepMode {
    pub fn effective_policy(self, policy: SwapPolicy) -> SwapPolicy {
        match self {
            SweepMode::ShapleySurplus => SwapPolicy::Forbid,
            _ => policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Ok,
    /// Nothing to share (zero total), shares reported as 0.
    Idle,
    Failed(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub point: OperatingPoint,
    /// Percent per unit.
    pub shares: Vec<f64>,
    pub status: PointStatus,
    /// Swap flag of the cost-minimal dispatch (costmin mode only).
    pub swap_active_p: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepDataset {
    pub mode: SweepMode,
    pub policy: SwapPolicy,
    pub step: f64,
    pub units: Vec<String>,
    pub initial: OperatingPoint,
    pub points: Vec<SweepPoint>,
}

impl SweepDataset {
    pub fn failures(&self) -> usize {
        self.points
            .iter()
            .filter(|p| matches!(p.status, PointStatus::Failed(_)))
            .count()
    }
}

fn percent(values: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = values.iter().sum();
    (total.abs() > 1e-12).then(|| values.iter().map(|v| 100.0 * v / total).collect())
}

fn evaluate(
    case: &Case,
    mode: SweepMode,
    point: OperatingPoint,
    policy: SwapPolicy,
    cache: Option<&ValueCache>,
) -> SweepPoint {
    let n = case.n_units();
    let mut out = SweepPoint {
        point,
        shares: vec![0.0; n],
        status: PointStatus::Idle,
        swap_active_p: false,
    };
    let values = match mode {
        SweepMode::CostminShare => {
            let sol = solve_dispatch(case, Coalition::grand(n), point, policy);
            if !sol.is_optimal() {
                out.status = PointStatus::Failed(format!("{:?}: {}", sol.status, sol.diagnostics));
                return out;
            }
            out.swap_active_p = sol.swap_active_p;
            sol.regulations.iter().map(|r| r.apparent()).collect::<Vec<_>>()
        }
        SweepMode::ShapleyCapacity | SweepMode::ShapleySurplus => {
            let metric = if mode == SweepMode::ShapleyCapacity {
                Metric::Capacity
            } else {
                Metric::Surplus
            };
            match build_game(metric, case, point, policy, cache) {
                Ok(game) => shapley_exact(&game).values,
                Err(e) => {
                    out.status = PointStatus::Failed(e.to_string());
                    return out;
                }
            }
        }
    };
    if let Some(shares) = percent(&values) {
        out.shares = shares;
        out.status = PointStatus::Ok;
    }
    out
}

/// Shares at explicit points.
pub fn sweep_points(
    case: &Case,
    mode: SweepMode,
    points: &[OperatingPoint],
    policy: SwapPolicy,
    step: f64,
    cache: Option<&ValueCache>,
) -> SweepDataset {
    let policy = mode.effective_policy(policy);
    let evaluated: Vec<SweepPoint> = points
        .par_iter()
        .map(|&p| evaluate(case, mode, p, policy, cache))
        .collect();
    for p in &evaluated {
        if let PointStatus::Failed(why) = &p.status {
            log::warn!("sweep point {}: {why}", p.point);
        }
    }
    SweepDataset {
        mode,
        policy,
        step,
        units: case.units.iter().map(|u| u.id.clone()).collect(),
        initial: initial_point(case),
        points: evaluated,
    }
}

/// Shares on the grid covering the grand-coalition area.
pub fn sweep(
    case: &Case,
    mode: SweepMode,
    step: f64,
    policy: SwapPolicy,
    cache: Option<&ValueCache>,
) -> SweepDataset {
    let policy = mode.effective_policy(policy);
    let area = trace_area(case, Coalition::grand(case.n_units()), DEFAULT_DIRS, policy);
    let points = grid_requests(&area, step);
    sweep_points(case, mode, &points, policy, step, cache)
}
