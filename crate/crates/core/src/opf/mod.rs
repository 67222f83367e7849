//! Boundary and cost-minimising optimal power flow for a coalition of units.
//!
//! Units outside the coalition stay at their initial setpoints. Under
//! [`SwapPolicy::Forbid`] every active unit must move in the same direction on
//! each axis; this is solved by enumerating the four global sign patterns.

mod slp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coalition::Coalition;
use crate::net_model::{Case, OperatingPoint};
use crate::powerflow::{self, PowerFlowSolution};
use slp::{Nlp, Outcome, Ray, SlpOptions, SlpResult};

/// Threshold (MW / MVAr) below which a unit movement counts as zero.
pub const ACTIVE_TOL: f64 = 1e-6;

const COST_REGULARIZER: f64 = 1e-6;
const TIE_BREAK: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum OpfError {
    #[error("direction weights must not both be zero")]
    ZeroDirection,
    #[error("unknown swap policy `{0}` (expected allow or forbid)")]
    UnknownPolicy(String),
}

/// Objective weights on `(P_ref, Q_ref)`, normalized to unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DirectionWeights {
    w_p: f64,
    w_q: f64,
}

impl DirectionWeights {
    pub fn new(w_p: f64, w_q: f64) -> Result<Self, OpfError> {
        let norm = w_p.hypot(w_q);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(OpfError::ZeroDirection);
        }
        Ok(DirectionWeights {
            w_p: w_p / norm,
            w_q: w_q / norm,
        })
    }

    pub fn from_angle(theta: f64) -> Self {
        DirectionWeights {
            w_p: theta.cos(),
            w_q: theta.sin(),
        }
    }

    pub fn w_p(&self) -> f64 {
        self.w_p
    }

    pub fn w_q(&self) -> f64 {
        self.w_q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapPolicy {
    #[default]
    Allow,
    Forbid,
}

impl fmt::Display for SwapPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SwapPolicy::Allow => "allow",
            SwapPolicy::Forbid => "forbid",
        })
    }
}

impl FromStr for SwapPolicy {
    type Err = OpfError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "allow" => Ok(SwapPolicy::Allow),
            "forbid" => Ok(SwapPolicy::Forbid),
            _ => Err(OpfError::UnknownPolicy(s.to_string())),
        }
    }
}

/// Movement of one unit away from its initial setpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Regulation {
    pub unit: String,
    pub p_up: f64,
    pub p_down: f64,
    pub q_up: f64,
    pub q_down: f64,
}

impl Regulation {
    fn from_net(unit: &str, dp: f64, dq: f64) -> Self {
        Regulation {
            unit: unit.to_string(),
            p_up: dp.max(0.0),
            p_down: (-dp).max(0.0),
            q_up: dq.max(0.0),
            q_down: (-dq).max(0.0),
        }
    }

    /// Net active power change, MW (positive = more injection).
    pub fn delta_p(&self) -> f64 {
        self.p_up - self.p_down
    }

    pub fn delta_q(&self) -> f64 {
        self.q_up - self.q_down
    }

    /// Apparent flexible power delivered, MVA.
    pub fn apparent(&self) -> f64 {
        self.delta_p().hypot(self.delta_q())
    }

    pub fn is_active(&self) -> bool {
        self.apparent() > ACTIVE_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NotConverged,
}

#[derive(Debug, Clone, Serialize)]
pub struct DispatchSolution {
    pub regulations: Vec<Regulation>,
    #[serde(skip)]
    pub state: PowerFlowSolution,
    /// $/h
    pub total_cost: f64,
    pub achieved: OperatingPoint,
    pub swap_active_p: bool,
    pub swap_active_q: bool,
    pub status: SolveStatus,
    pub iterations: usize,
    pub diagnostics: String,
}

impl DispatchSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Unit setpoints (MW, MVAr) of the solution.
    pub fn setpoints(&self) -> &[(f64, f64)] {
        &self.state.setpoints
    }

    /// Total apparent flexible power moved by the units, MVA.
    pub fn total_apparent(&self) -> f64 {
        self.regulations.iter().map(Regulation::apparent).sum()
    }
}

/// Pairs of units moving in opposite directions.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SwapReport {
    pub p_pairs: Vec<(String, String)>,
    pub q_pairs: Vec<(String, String)>,
    pub active_p: bool,
    pub active_q: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct OpfOptions {
    /// Initial trust-region radius, p.u.
    pub trust_radius: f64,
    pub max_iter: usize,
    /// Try the additional starting points besides the initial state.
    pub multistart: bool,
}

impl Default for OpfOptions {
    fn default() -> Self {
        OpfOptions {
            trust_radius: 0.1,
            max_iter: 300,
            multistart: true,
        }
    }
}

impl OpfOptions {
    fn slp(&self) -> SlpOptions {
        SlpOptions {
            trust_radius: self.trust_radius,
            max_iter: self.max_iter,
            ..SlpOptions::default()
        }
    }
}

/// Interface consumption `(P_ref, Q_ref)` with every unit at its initial
/// setpoint.
pub fn initial_point(case: &Case) -> OperatingPoint {
    let sol = powerflow::solve_powerflow_with(case, &case.initial_setpoints(), slp::PF_TIGHT);
    OperatingPoint::new(sol.p_ref, sol.q_ref)
}

/// Allowed direction of unit movements on one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Free,
    /// Injection may only increase.
    Up,
    /// Injection may only decrease.
    Down,
}

/// Joint restriction of all coalition members on the active and reactive
/// axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct SignPattern {
    pub p: Sign,
    pub q: Sign,
}

impl SignPattern {
    pub const FREE: SignPattern = SignPattern {
        p: Sign::Free,
        q: Sign::Free,
    };

    /// The four global patterns whose union is the no-swap region.
    pub const NO_SWAP: [SignPattern; 4] = [
        SignPattern { p: Sign::Up, q: Sign::Up },
        SignPattern { p: Sign::Up, q: Sign::Down },
        SignPattern { p: Sign::Down, q: Sign::Up },
        SignPattern { p: Sign::Down, q: Sign::Down },
    ];

    pub fn label(&self) -> String {
        let s = |x: Sign| match x {
            Sign::Free => "*",
            Sign::Up => "+",
            Sign::Down => "-",
        };
        format!("p{}q{}", s(self.p), s(self.q))
    }
}

/// Sign patterns to enumerate for a policy. Forbid needs no enumeration when
/// at most one member can move.
pub fn patterns(case: &Case, coalition: Coalition, policy: SwapPolicy) -> Vec<SignPattern> {
    let movable = coalition
        .members()
        .filter(|&i| i < case.n_units() && !case.units[i].is_null())
        .count();
    if policy == SwapPolicy::Allow || movable <= 1 {
        vec![SignPattern::FREE]
    } else {
        SignPattern::NO_SWAP.to_vec()
    }
}

enum Goal {
    Direction(DirectionWeights),
    Dispatch(OperatingPoint),
    Reach { dir: (f64, f64), cap: f64 },
}

fn build_nlp<'a>(case: &'a Case, coalition: Coalition, pattern: SignPattern, goal: &Goal) -> Nlp<'a> {
    let base = case.network.base_power;
    let members: Vec<usize> = coalition.members().filter(|&i| i < case.n_units()).collect();
    let c_ref = case
        .units
        .iter()
        .flat_map(|u| [u.cost_p, u.cost_q])
        .fold(0.0f64, f64::max)
        .max(1e-12);
    // Rank by label for deterministic tie-breaking.
    let mut order: Vec<usize> = (0..case.n_units()).collect();
    order.sort_by(|&a, &b| case.units[a].id.cmp(&case.units[b].id));
    let rank = |u: usize| order.iter().position(|&x| x == u).unwrap() as f64;

    let (mut lo, mut hi, mut c) = (Vec::new(), Vec::new(), Vec::new());
    for &u in &members {
        let unit = &case.units[u];
        let bounds = [
            (unit.p_range.1 - unit.p0, pattern.p != Sign::Down),
            (unit.p0 - unit.p_range.0, pattern.p != Sign::Up),
            (unit.q_range.1 - unit.q0, pattern.q != Sign::Down),
            (unit.q0 - unit.q_range.0, pattern.q != Sign::Up),
        ];
        let costs = [unit.cost_p, unit.cost_p, unit.cost_q, unit.cost_q];
        for ((room, open), cost) in bounds.into_iter().zip(costs) {
            lo.push(0.0);
            hi.push(if open { (room / base).max(0.0) } else { 0.0 });
            let scaled = cost / c_ref * (1.0 + TIE_BREAK * rank(u)) + 1e-9;
            c.push(scaled);
        }
    }
    let p0 = initial_point(case);
    let origin = (p0.p / base, p0.q / base);
    let (w_ref, ray, has_t) = match *goal {
        Goal::Direction(w) => {
            c.iter_mut().for_each(|x| *x *= COST_REGULARIZER);
            ((w.w_p, w.w_q), None, false)
        }
        Goal::Dispatch(target) => (
            (0.0, 0.0),
            Some(Ray {
                origin: (target.p / base, target.q / base),
                dir: (0.0, 0.0),
            }),
            false,
        ),
        Goal::Reach { dir, cap } => {
            c.iter_mut().for_each(|x| *x *= COST_REGULARIZER);
            c.push(-1.0);
            lo.push(0.0);
            hi.push(cap / base);
            ((0.0, 0.0), Some(Ray { origin, dir }), true)
        }
    };
    Nlp {
        case,
        members,
        lo,
        hi,
        c,
        w_ref,
        ray,
        has_t,
    }
}

/// Index of the preferred result: optimal before not converged before
/// infeasible, then lowest objective, then earliest.
fn best_of(results: &[SlpResult]) -> Option<usize> {
    let rank = |o: Outcome| match o {
        Outcome::Optimal => 0,
        Outcome::NotConverged => 1,
        Outcome::Infeasible => 2,
    };
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let b = &results[b];
                match rank(r.outcome).cmp(&rank(b.outcome)) {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Greater => false,
                    std::cmp::Ordering::Equal => {
                        r.outcome == Outcome::Optimal
                            && r.objective < b.objective - 1e-10 * (1.0 + b.objective.abs())
                    }
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Decision vector for a member-level regulation given as net unit moves in
/// p.u.
fn encode(nlp: &Nlp, moves: &[(f64, f64)]) -> Vec<f64> {
    let mut z = vec![0.0; nlp.n_vars()];
    for (m, &(dp, dq)) in moves.iter().enumerate() {
        z[4 * m] = dp.max(0.0);
        z[4 * m + 1] = (-dp).max(0.0);
        z[4 * m + 2] = dq.max(0.0);
        z[4 * m + 3] = (-dq).max(0.0);
    }
    z
}

/// Net member moves (p.u.) from unit setpoints in MW / MVAr.
fn moves_from_setpoints(case: &Case, nlp: &Nlp, setpoints: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let base = case.network.base_power;
    nlp.members
        .iter()
        .map(|&u| {
            let unit = &case.units[u];
            ((setpoints[u].0 - unit.p0) / base, (setpoints[u].1 - unit.q0) / base)
        })
        .collect()
}

fn assemble(case: &Case, nlp: &Nlp, res: &SlpResult) -> DispatchSolution {
    let base = case.network.base_power;
    let setpoints = nlp.setpoints(&res.z);
    let mut regulations = Vec::with_capacity(case.n_units());
    let mut total_cost = 0.0;
    for (k, unit) in case.units.iter().enumerate() {
        let (dp, dq) = if let Some(m) = nlp.members.iter().position(|&u| u == k) {
            (
                (res.z[4 * m] - res.z[4 * m + 1]) * base,
                (res.z[4 * m + 2] - res.z[4 * m + 3]) * base,
            )
        } else {
            (0.0, 0.0)
        };
        let reg = Regulation::from_net(&unit.id, dp, dq);
        total_cost += unit.cost_p * (reg.p_up + reg.p_down) + unit.cost_q * (reg.q_up + reg.q_down);
        regulations.push(reg);
    }
    let state = powerflow::to_solution(case, &setpoints, &res.state);
    let status = match res.outcome {
        Outcome::Optimal => SolveStatus::Optimal,
        Outcome::Infeasible => SolveStatus::Infeasible,
        Outcome::NotConverged => SolveStatus::NotConverged,
    };
    let mut sol = DispatchSolution {
        regulations,
        achieved: OperatingPoint::new(state.p_ref, state.q_ref),
        state,
        total_cost,
        swap_active_p: false,
        swap_active_q: false,
        status,
        iterations: res.iterations,
        diagnostics: res.message.clone(),
    };
    let swaps = detect_swap(&sol);
    sol.swap_active_p = swaps.active_p;
    sol.swap_active_q = swaps.active_q;
    sol
}

fn trivial(case: &Case, status: SolveStatus, message: &str) -> DispatchSolution {
    let setpoints = case.initial_setpoints();
    let state = powerflow::solve_powerflow_with(case, &setpoints, slp::PF_TIGHT);
    DispatchSolution {
        regulations: case
            .units
            .iter()
            .map(|u| Regulation::from_net(&u.id, 0.0, 0.0))
            .collect(),
        achieved: OperatingPoint::new(state.p_ref, state.q_ref),
        state,
        total_cost: 0.0,
        swap_active_p: false,
        swap_active_q: false,
        status,
        iterations: 0,
        diagnostics: message.to_string(),
    }
}

fn aligned_corner(nlp: &Nlp, towards: (f64, f64), scale: f64) -> Vec<f64> {
    // Injection lowers interface consumption, so move against `towards`.
    let mut z = vec![0.0; nlp.n_vars()];
    for m in 0..nlp.members.len() {
        let (wp, wq) = towards;
        if wp < 0.0 {
            z[4 * m] = scale * nlp.hi[4 * m];
        } else if wp > 0.0 {
            z[4 * m + 1] = scale * nlp.hi[4 * m + 1];
        }
        if wq < 0.0 {
            z[4 * m + 2] = scale * nlp.hi[4 * m + 2];
        } else if wq > 0.0 {
            z[4 * m + 3] = scale * nlp.hi[4 * m + 3];
        }
    }
    z
}

fn solve_candidates<'a>(
    case: &'a Case,
    coalition: Coalition,
    pats: &[SignPattern],
    goal: &Goal,
    warm: Option<&[(f64, f64)]>,
    opts: &OpfOptions,
) -> Option<(Nlp<'a>, SlpResult)> {
    let slp_opts = opts.slp();
    let mut candidates: Vec<(Nlp, SlpResult)> = Vec::new();
    for &pattern in pats {
        let nlp = build_nlp(case, coalition, pattern, goal);
        let n = nlp.n_vars();
        let mut starts = vec![vec![0.0; n]];
        if opts.multistart {
            match goal {
                Goal::Direction(w) => starts.push(aligned_corner(&nlp, (-w.w_p, -w.w_q), 0.5)),
                Goal::Dispatch(target) => {
                    let p0 = initial_point(case);
                    starts.push(proportional_start(&nlp, (target.p - p0.p, target.q - p0.q)));
                }
                Goal::Reach { .. } => {}
            }
        }
        if let Some(sp) = warm {
            let mut z = encode(&nlp, &moves_from_setpoints(case, &nlp, sp));
            if nlp.has_t {
                z.push(0.0);
            }
            starts.push(z);
        }
        for z in &starts {
            let res = nlp.solve(z, &slp_opts);
            candidates.push((nlp.clone(), res));
        }
    }
    let results: Vec<SlpResult> = candidates.iter().map(|(_, r)| r.clone()).collect();
    best_of(&results).map(|i| candidates.swap_remove(i))
}

fn solve_goal(
    case: &Case,
    coalition: Coalition,
    policy: SwapPolicy,
    goal: &Goal,
    warm: Option<&[(f64, f64)]>,
    opts: &OpfOptions,
) -> DispatchSolution {
    let pats = patterns(case, coalition, policy);
    match solve_candidates(case, coalition, &pats, goal, warm, opts) {
        Some((nlp, res)) => assemble(case, &nlp, &res),
        None => trivial(case, SolveStatus::NotConverged, "no sign pattern solved"),
    }
}

fn has_movable(case: &Case, coalition: Coalition) -> bool {
    coalition
        .members()
        .any(|i| i < case.n_units() && !case.units[i].is_null())
}

/// Pushes the interface consumption as far as possible against `w`, i.e.
/// minimizes `w_p * P_ref + w_q * Q_ref`.
pub fn solve_direction(
    case: &Case,
    coalition: Coalition,
    w: DirectionWeights,
    policy: SwapPolicy,
) -> DispatchSolution {
    solve_direction_with(case, coalition, w, policy, None, &OpfOptions::default())
}

/// As [`solve_direction`], with an extra warm start given as unit setpoints.
pub fn solve_direction_with(
    case: &Case,
    coalition: Coalition,
    w: DirectionWeights,
    policy: SwapPolicy,
    warm: Option<&[(f64, f64)]>,
    opts: &OpfOptions,
) -> DispatchSolution {
    if !has_movable(case, coalition) {
        return trivial(case, SolveStatus::Optimal, "");
    }
    solve_goal(case, coalition, policy, &Goal::Direction(w), warm, opts)
}

/// Boundary point for one fixed sign pattern.
pub fn solve_direction_pattern(
    case: &Case,
    coalition: Coalition,
    w: DirectionWeights,
    pattern: SignPattern,
    warm: Option<&[(f64, f64)]>,
    opts: &OpfOptions,
) -> DispatchSolution {
    if !has_movable(case, coalition) {
        return trivial(case, SolveStatus::Optimal, "");
    }
    match solve_candidates(case, coalition, &[pattern], &Goal::Direction(w), warm, opts) {
        Some((nlp, res)) => assemble(case, &nlp, &res),
        None => trivial(case, SolveStatus::NotConverged, "no start solved"),
    }
}

/// Cheapest regulation of the coalition that moves the interface to
/// `target` (MW, MVAr).
pub fn solve_dispatch(
    case: &Case,
    coalition: Coalition,
    target: OperatingPoint,
    policy: SwapPolicy,
) -> DispatchSolution {
    solve_dispatch_with(case, coalition, target, policy, None, &OpfOptions::default())
}

pub fn solve_dispatch_with(
    case: &Case,
    coalition: Coalition,
    target: OperatingPoint,
    policy: SwapPolicy,
    warm: Option<&[(f64, f64)]>,
    opts: &OpfOptions,
) -> DispatchSolution {
    if !has_movable(case, coalition) {
        let p0 = initial_point(case);
        let tol = 1e-6 * case.network.base_power;
        return if p0.distance(&target) <= tol {
            trivial(case, SolveStatus::Optimal, "")
        } else {
            trivial(case, SolveStatus::Infeasible, "coalition cannot move the interface")
        };
    }
    solve_goal(case, coalition, policy, &Goal::Dispatch(target), warm, opts)
}

/// Largest scale `t` (MVA) such that `initial + t * direction` is reachable,
/// together with the cheapest dispatch there.
pub fn max_reach(
    case: &Case,
    coalition: Coalition,
    direction: (f64, f64),
    policy: SwapPolicy,
) -> (f64, DispatchSolution) {
    max_reach_with(case, coalition, direction, policy, None, &OpfOptions::default())
}

/// As [`max_reach`], optionally stopping at `cap` MVA.
pub fn max_reach_with(
    case: &Case,
    coalition: Coalition,
    direction: (f64, f64),
    policy: SwapPolicy,
    cap: Option<f64>,
    opts: &OpfOptions,
) -> (f64, DispatchSolution) {
    let norm = direction.0.hypot(direction.1);
    assert!(norm > 0.0, "direction must be nonzero");
    let dir = (direction.0 / norm, direction.1 / norm);
    if !has_movable(case, coalition) || cap.is_some_and(|c| c <= 0.0) {
        return (0.0, trivial(case, SolveStatus::Optimal, ""));
    }
    let physical: f64 = coalition
        .members()
        .map(|i| {
            let u = &case.units[i];
            let dp = (u.p_range.1 - u.p0).max(u.p0 - u.p_range.0);
            let dq = (u.q_range.1 - u.q0).max(u.q0 - u.q_range.0);
            2.0 * dp.hypot(dq)
        })
        .sum::<f64>()
        + 1e-3;
    let t_cap = cap.map_or(physical, |c| c.min(physical));
    let goal = Goal::Reach { dir, cap: t_cap };
    let base = case.network.base_power;
    let pats = patterns(case, coalition, policy);
    let (t, warm) = match solve_candidates(case, coalition, &pats, &goal, None, opts) {
        Some((nlp, res)) if res.violation <= SlpOptions::default().feas_tol => {
            let t = res.z[res.z.len() - 1] * base;
            (t, Some(nlp.setpoints(&res.z)))
        }
        _ => (0.0, None),
    };
    if t <= 0.0 {
        return (0.0, trivial(case, SolveStatus::Optimal, ""));
    }
    let p0 = initial_point(case);
    // Back off slightly if the cost-minimal dispatch cannot sit exactly on
    // the boundary.
    for back in [0.0, 1e-7, 1e-5] {
        let t_try = (t - back * base).max(0.0);
        let target = OperatingPoint::new(p0.p + t_try * dir.0, p0.q + t_try * dir.1);
        let sol = solve_dispatch_with(case, coalition, target, policy, warm.as_deref(), opts);
        if sol.is_optimal() {
            return (t_try, sol);
        }
    }
    let mut sol = trivial(case, SolveStatus::NotConverged, "");
    sol.diagnostics = format!("no dispatch found at reach {t:.6} MVA");
    (t, sol)
}

/// Units moving in opposite directions on each axis.
pub fn detect_swap(solution: &DispatchSolution) -> SwapReport {
    let mut report = SwapReport::default();
    let regs = &solution.regulations;
    for (i, a) in regs.iter().enumerate() {
        for b in &regs[i + 1..] {
            if opposite(a.delta_p(), b.delta_p()) {
                report.p_pairs.push((a.unit.clone(), b.unit.clone()));
            }
            if opposite(a.delta_q(), b.delta_q()) {
                report.q_pairs.push((a.unit.clone(), b.unit.clone()));
            }
        }
    }
    report.active_p = !report.p_pairs.is_empty();
    report.active_q = !report.q_pairs.is_empty();
    report
}

fn opposite(a: f64, b: f64) -> bool {
    (a > ACTIVE_TOL && b < -ACTIVE_TOL) || (a < -ACTIVE_TOL && b > ACTIVE_TOL)
}

fn proportional_start(nlp: &Nlp, delta: (f64, f64)) -> Vec<f64> {
    // Share the request by capability, ignoring losses.
    let base = nlp.case.network.base_power;
    let (dp, dq) = (-delta.0 / base, -delta.1 / base);
    let cap_p: f64 = (0..nlp.members.len())
        .map(|m| if dp >= 0.0 { nlp.hi[4 * m] } else { nlp.hi[4 * m + 1] })
        .sum();
    let cap_q: f64 = (0..nlp.members.len())
        .map(|m| if dq >= 0.0 { nlp.hi[4 * m + 2] } else { nlp.hi[4 * m + 3] })
        .sum();
    let mut z = vec![0.0; nlp.n_vars()];
    for m in 0..nlp.members.len() {
        if cap_p > 0.0 {
            let frac = (dp.abs() / cap_p).min(1.0);
            if dp >= 0.0 {
                z[4 * m] = frac * nlp.hi[4 * m];
            } else {
                z[4 * m + 1] = frac * nlp.hi[4 * m + 1];
            }
        }
        if cap_q > 0.0 {
            let frac = (dq.abs() / cap_q).min(1.0);
            if dq >= 0.0 {
                z[4 * m + 2] = frac * nlp.hi[4 * m + 2];
            } else {
                z[4 * m + 3] = frac * nlp.hi[4 * m + 3];
            }
        }
    }
    z
}
