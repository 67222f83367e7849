//! Payment study: random flexibility requests priced by cost reimbursement and
//! by cost reimbursement plus a Shapley share of the economic surplus.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coalition::Coalition;
use crate::coopgame::{build_game, shapley_exact, GameError, Metric, ValueCache};
use crate::flexarea::{contains, FlexibilityArea};
use crate::net_model::{Case, OperatingPoint};
use crate::opf::{initial_point, solve_dispatch, DispatchSolution, SwapPolicy, ACTIVE_TOL};

/// Redraws allowed per request slot before sampling gives up.
pub const MAX_REDRAWS: usize = 100;
/// Payments below this ($/h) count as zero.
pub const PAYMENT_TOL: f64 = 1e-9;
pub const SAMPLING_NOTE: &str =
    "per-axis normal deviations (delta_p, delta_q) ~ N(0, sigma) each, rejection outside the no-swap area";

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("request slot {slot}: {MAX_REDRAWS} redraws all fell outside the area (sigma too large for the area)")]
    RedrawCap { slot: usize },
    #[error("request ({dp:.6}, {dq:.6}) is not deliverable by the grand coalition without swaps: {diagnostics}")]
    Infeasible { dp: f64, dq: f64, diagnostics: String },
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Deviation of interface consumption from the initial point, MW / MVAr.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlexRequest {
    pub delta_p: f64,
    pub delta_q: f64,
}

impl FlexRequest {
    pub fn target(&self, case: &Case) -> OperatingPoint {
        let p0 = initial_point(case);
        OperatingPoint::new(p0.p + self.delta_p, p0.q + self.delta_q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Costmin,
    Shapley,
}

#[derive(Debug, Clone, Serialize)]
pub struct PaymentRecord {
    pub request: FlexRequest,
    pub scheme: Scheme,
    /// $/h per unit.
    pub payments: Vec<f64>,
    /// Apparent power delivered per unit, MVA.
    pub delivered: Vec<f64>,
    /// Tariff revenue at the achieved point, $/h.
    pub revenue: f64,
    /// Regulation cost of the dispatch, $/h.
    pub cost: f64,
    pub dso_surplus: f64,
}

impl PaymentRecord {
    pub fn total(&self) -> f64 {
        self.payments.iter().sum()
    }
}

fn unit_costs(case: &Case, sol: &DispatchSolution) -> Vec<f64> {
    case.units
        .iter()
        .zip(&sol.regulations)
        .map(|(u, r)| u.cost_p * (r.p_up + r.p_down) + u.cost_q * (r.q_up + r.q_down))
        .collect()
}

fn grand_dispatch(case: &Case, request: FlexRequest) -> Result<DispatchSolution, PricingError> {
    let sol = solve_dispatch(
        case,
        Coalition::grand(case.n_units()),
        request.target(case),
        SwapPolicy::Forbid,
    );
    if sol.is_optimal() {
        Ok(sol)
    } else {
        Err(PricingError::Infeasible {
            dp: request.delta_p,
            dq: request.delta_q,
            diagnostics: sol.diagnostics,
        })
    }
}

fn record(case: &Case, request: FlexRequest, scheme: Scheme, sol: &DispatchSolution, payments: Vec<f64>) -> PaymentRecord {
    let p0 = initial_point(case);
    let revenue = case.tariff.revenue(sol.achieved.p - p0.p, sol.achieved.q - p0.q);
    let dso_surplus = revenue - payments.iter().sum::<f64>();
    PaymentRecord {
        request,
        scheme,
        delivered: sol.regulations.iter().map(|r| r.apparent()).collect(),
        payments,
        revenue,
        cost: sol.total_cost,
        dso_surplus,
    }
}

/// Each unit is paid its declared cost for what it delivers.
pub fn payments_costmin(case: &Case, request: FlexRequest) -> Result<PaymentRecord, PricingError> {
    let sol = grand_dispatch(case, request)?;
    let pay = unit_costs(case, &sol);
    Ok(record(case, request, Scheme::Costmin, &sol, pay))
}

/// Cost reimbursement plus the unit's Shapley share of the surplus game.
pub fn payments_shapley(case: &Case, request: FlexRequest) -> Result<PaymentRecord, PricingError> {
    payments_shapley_cached(case, request, None)
}

pub fn payments_shapley_cached(
    case: &Case,
    request: FlexRequest,
    cache: Option<&ValueCache>,
) -> Result<PaymentRecord, PricingError> {
    let sol = grand_dispatch(case, request)?;
    let game = build_game(Metric::Surplus, case, request.target(case), SwapPolicy::Forbid, cache)?;
    let sh = shapley_exact(&game);
    let pay = unit_costs(case, &sol)
        .into_iter()
        .zip(&sh.values)
        .map(|(c, s)| c + s)
        .collect();
    Ok(record(case, request, Scheme::Shapley, &sol, pay))
}

/// Independent random stream for one request slot.
fn slot_rng(seed: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slot as u64);
    rng
}

/// Draws `count` requests inside the grand-coalition no-swap area.
///
/// `area` must be the forbid-policy area of the grand coalition. A draw is
/// accepted when it lies in the traced area and a no-swap dispatch exists.
pub fn sample_requests(
    case: &Case,
    area: &FlexibilityArea,
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<FlexRequest>, PricingError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PricingError::BadSigma(sigma));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked");
    let p0 = initial_point(case);
    (0..count)
        .into_par_iter()
        .map(|slot| {
            let mut rng = slot_rng(seed, slot);
            for _ in 0..=MAX_REDRAWS {
                let r = FlexRequest {
                    delta_p: normal.sample(&mut rng),
                    delta_q: normal.sample(&mut rng),
                };
                let target = OperatingPoint::new(p0.p + r.delta_p, p0.q + r.delta_q);
                if contains(area, target) && grand_dispatch(case, r).is_ok() {
                    return Ok(r);
                }
            }
            Err(PricingError::RedrawCap { slot })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PaymentStudyReport {
    pub seed: u64,
    pub count: usize,
    pub sigma: f64,
    pub sampling: String,
    pub units: Vec<String>,
    pub requests: Vec<FlexRequest>,
    pub costmin: Vec<PaymentRecord>,
    pub shapley: Vec<PaymentRecord>,
    /// Per unit, payments in descending order.
    pub costmin_sorted: Vec<Vec<f64>>,
    pub shapley_sorted: Vec<Vec<f64>>,
    /// Fraction of requests in which each unit delivers more than 1e-6 MVA.
    pub activation_frequency: Vec<f64>,
    /// Fraction of requests with a nonzero payment, per scheme and unit.
    pub costmin_paid_frequency: Vec<f64>,
    pub shapley_paid_frequency: Vec<f64>,
    pub costmin_totals: Vec<f64>,
    pub shapley_totals: Vec<f64>,
}

fn per_unit<T>(n: usize, records: &[PaymentRecord], f: impl Fn(&PaymentRecord, usize) -> T) -> Vec<Vec<T>> {
    (0..n).map(|i| records.iter().map(|r| f(r, i)).collect()).collect()
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

fn frequency(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// Prices the same request sample under both schemes.
pub fn run_payment_study(
    case: &Case,
    area: &FlexibilityArea,
    count: usize,
    sigma: f64,
    seed: u64,
    cache: Option<&ValueCache>,
) -> Result<PaymentStudyReport, PricingError> {
    let requests = sample_requests(case, area, count, sigma, seed)?;
    let priced: Vec<(PaymentRecord, PaymentRecord)> = requests
        .par_iter()
        .map(|&r| Ok((payments_costmin(case, r)?, payments_shapley_cached(case, r, cache)?)))
        .collect::<Result<_, PricingError>>()?;
    let (costmin, shapley): (Vec<_>, Vec<_>) = priced.into_iter().unzip();
    let n = case.n_units();
    let paid = |recs: &[PaymentRecord]| -> Vec<f64> {
        per_unit(n, recs, |r, i| r.payments[i].abs() > PAYMENT_TOL)
            .iter()
            .map(|f| frequency(f))
            .collect()
    };
    let totals = |recs: &[PaymentRecord]| -> Vec<f64> {
        (0..n).map(|i| recs.iter().map(|r| r.payments[i]).sum()).collect()
    };
    Ok(PaymentStudyReport {
        seed,
        count,
        sigma,
        sampling: SAMPLING_NOTE.to_string(),
        units: case.units.iter().map(|u| u.id.clone()).collect(),
        costmin_sorted: per_unit(n, &costmin, |r, i| r.payments[i]).into_iter().map(sorted_desc).collect(),
        shapley_sorted: per_unit(n, &shapley, |r, i| r.payments[i]).into_iter().map(sorted_desc).collect(),
        activation_frequency: per_unit(n, &costmin, |r, i| r.delivered[i] > ACTIVE_TOL)
            .iter()
            .map(|f| frequency(f))
            .collect(),
        costmin_paid_frequency: paid(&costmin),
        shapley_paid_frequency: paid(&shapley),
        costmin_totals: totals(&costmin),
        shapley_totals: totals(&shapley),
        requests,
        costmin,
        shapley,
    })
}
