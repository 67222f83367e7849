//! Radial power flow by backward/forward sweep on the DistFlow equations.
//!
//! For a branch from parent `i` to child `j`:
//!
//! ```text
//! P_ij - r_ij l_ij + p_j = sum_k P_jk
//! Q_ij - x_ij l_ij + q_j = sum_k Q_jk
//! v_j = v_i - 2 (r_ij P_ij + x_ij Q_ij) + (r_ij^2 + x_ij^2) l_ij
//! l_ij v_i = P_ij^2 + Q_ij^2
//! ```
//!
//! with `p_j`, `q_j` the net injection (units minus load) at bus `j`, `v` the
//! squared voltage magnitude and `l` the squared current magnitude, all in
//! per-unit. The reference bus holds `v = 1`.

use serde::Serialize;
use thiserror::Error;

use crate::net_model::Case;

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    /// Largest DistFlow equation residual accepted, p.u.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Power-flow state in per-unit, indexed like the case buses/branches.
#[derive(Debug, Clone, PartialEq)]
pub struct PuState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub l: Vec<f64>,
    pub v: Vec<f64>,
    pub p_ref: f64,
    pub q_ref: f64,
    pub converged: bool,
    pub iterations: usize,
    pub mismatch: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerFlowSolution {
    /// Unit setpoints (MW, MVAr) the flow was solved for.
    pub setpoints: Vec<(f64, f64)>,
    /// Squared voltage magnitude per bus, p.u.²
    pub v_sq: Vec<f64>,
    /// Sending-end flows, MW / MVAr.
    pub branch_p: Vec<f64>,
    pub branch_q: Vec<f64>,
    /// Squared current magnitude, p.u.²
    pub branch_l: Vec<f64>,
    /// Interface consumption, MW / MVAr (positive = network imports).
    pub p_ref: f64,
    pub q_ref: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn voltage(&self, bus: usize) -> f64 {
        self.v_sq[bus].sqrt()
    }

    /// Index and magnitude (p.u.) of the lowest bus voltage.
    pub fn min_voltage(&self) -> (usize, f64) {
        let (i, v) = self
            .v_sq
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("network has at least one bus");
        (i, v.sqrt())
    }
}

/// Net bus injections (p.u.) for the given unit setpoints in MW / MVAr.
pub fn net_injections(case: &Case, setpoints: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let base = case.network.base_power;
    let mut p: Vec<f64> = case.network.buses.iter().map(|b| -b.p_load / base).collect();
    let mut q: Vec<f64> = case.network.buses.iter().map(|b| -b.q_load / base).collect();
    for (k, &(sp, sq)) in setpoints.iter().enumerate() {
        let bus = case.unit_bus[k];
        p[bus] += sp / base;
        q[bus] += sq / base;
    }
    (p, q)
}

/// Backward/forward sweep from a flat start (v = 1, l = 0).
pub fn sweep(case: &Case, net_p: &[f64], net_q: &[f64], opts: PfOptions) -> PuState {
    let topo = &case.topology;
    let branches = &case.network.branches;
    let n = case.network.buses.len();
    let m = branches.len();
    let mut st = PuState {
        p: vec![0.0; m],
        q: vec![0.0; m],
        l: vec![0.0; m],
        v: vec![1.0; n],
        p_ref: 0.0,
        q_ref: 0.0,
        converged: false,
        iterations: 0,
        mismatch: f64::INFINITY,
    };

    backward(case, net_p, net_q, &mut st);
    for iter in 1..=opts.max_iter {
        // Forward: voltages from the root down with the current flows.
        let mut diverged = false;
        for &k in &topo.order {
            let (i, j) = (topo.up[k], topo.down[k]);
            let br = &branches[k];
            let v_new = st.v[i] - 2.0 * (br.r * st.p[k] + br.x * st.q[k])
                + (br.r * br.r + br.x * br.x) * st.l[k];
            if !(v_new > 0.0) || !v_new.is_finite() {
                diverged = true;
            }
            st.v[j] = v_new;
        }
        for k in 0..m {
            let i = topo.up[k];
            st.l[k] = (st.p[k] * st.p[k] + st.q[k] * st.q[k]) / st.v[i];
        }
        // Backward with the new losses keeps the balance equations exact.
        backward(case, net_p, net_q, &mut st);
        st.iterations = iter;
        st.mismatch = residual(case, &st);
        if diverged || !st.mismatch.is_finite() {
            break;
        }
        if st.mismatch <= opts.tol {
            st.converged = true;
            break;
        }
    }

    let root = topo.root;
    let (mut pr, mut qr) = (0.0, 0.0);
    for &c in &topo.child_branches[root] {
        pr += st.p[c];
        qr += st.q[c];
    }
    st.p_ref = pr - net_p[root];
    st.q_ref = qr - net_q[root];
    st
}

fn backward(case: &Case, net_p: &[f64], net_q: &[f64], st: &mut PuState) {
    let topo = &case.topology;
    let branches = &case.network.branches;
    for &k in topo.order.iter().rev() {
        let j = topo.down[k];
        let (mut sp, mut sq) = (0.0, 0.0);
        for &c in &topo.child_branches[j] {
            sp += st.p[c];
            sq += st.q[c];
        }
        st.p[k] = sp + branches[k].r * st.l[k] - net_p[j];
        st.q[k] = sq + branches[k].x * st.l[k] - net_q[j];
    }
}

/// Largest residual of the voltage-drop and current equations. The balance
/// equations hold exactly after a backward pass.
fn residual(case: &Case, st: &PuState) -> f64 {
    let topo = &case.topology;
    let mut worst = 0.0f64;
    for (k, br) in case.network.branches.iter().enumerate() {
        let (i, j) = (topo.up[k], topo.down[k]);
        let flow = st.p[k] * st.p[k] + st.q[k] * st.q[k];
        let drop = st.v[i] - 2.0 * (br.r * st.p[k] + br.x * st.q[k])
            + (br.r * br.r + br.x * br.x) * st.l[k]
            - st.v[j];
        worst = worst.max((st.l[k] * st.v[i] - flow).abs()).max(drop.abs());
    }
    worst
}

/// Solves the power flow for the given unit setpoints (MW / MVAr, one pair
/// per case unit). Setpoints outside the capability boxes are allowed.
pub fn solve_powerflow(case: &Case, setpoints: &[(f64, f64)]) -> PowerFlowSolution {
    solve_powerflow_with(case, setpoints, PfOptions::default())
}

pub fn solve_powerflow_with(
    case: &Case,
    setpoints: &[(f64, f64)],
    opts: PfOptions,
) -> PowerFlowSolution {
    assert_eq!(
        setpoints.len(),
        case.n_units(),
        "one setpoint per unit expected"
    );
    let (np, nq) = net_injections(case, setpoints);
    let st = sweep(case, &np, &nq, opts);
    to_solution(case, setpoints, &st)
}

pub(crate) fn to_solution(case: &Case, setpoints: &[(f64, f64)], st: &PuState) -> PowerFlowSolution {
    let base = case.network.base_power;
    PowerFlowSolution {
        setpoints: setpoints.to_vec(),
        v_sq: st.v.clone(),
        branch_p: st.p.iter().map(|x| x * base).collect(),
        branch_q: st.q.iter().map(|x| x * base).collect(),
        branch_l: st.l.clone(),
        p_ref: st.p_ref * base,
        q_ref: st.q_ref * base,
        converged: st.converged,
        iterations: st.iterations,
        max_mismatch: st.mismatch,
    }
}

/// First-order response of the converged state to a unit injection at one bus.
#[derive(Debug, Clone)]
pub struct Tangent {
    pub p_ref: f64,
    pub q_ref: f64,
    pub v: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Sensitivities of the DistFlow solution with respect to a net injection
/// `(dp, dq)` p.u. at `bus`, by iterating the linearized sweep.
pub fn tangent(case: &Case, st: &PuState, bus: usize, dp: f64, dq: f64) -> Tangent {
    let topo = &case.topology;
    let branches = &case.network.branches;
    let n = st.v.len();
    let m = st.p.len();
    let mut t = Tangent {
        p_ref: 0.0,
        q_ref: 0.0,
        v: vec![0.0; n],
        p: vec![0.0; m],
        q: vec![0.0; m],
    };
    let mut dl = vec![0.0; m];
    for _ in 0..200 {
        let mut change = 0.0f64;
        for &k in topo.order.iter().rev() {
            let j = topo.down[k];
            let (mut sp, mut sq) = (0.0, 0.0);
            for &c in &topo.child_branches[j] {
                sp += t.p[c];
                sq += t.q[c];
            }
            let seed = if j == bus { (dp, dq) } else { (0.0, 0.0) };
            t.p[k] = sp + branches[k].r * dl[k] - seed.0;
            t.q[k] = sq + branches[k].x * dl[k] - seed.1;
        }
        for k in 0..m {
            let i = topo.up[k];
            let new = (2.0 * st.p[k] * t.p[k] + 2.0 * st.q[k] * t.q[k] - st.l[k] * t.v[i]) / st.v[i];
            change = change.max((new - dl[k]).abs());
            dl[k] = new;
        }
        for &k in &topo.order {
            let (i, j) = (topo.up[k], topo.down[k]);
            let br = &branches[k];
            let new = t.v[i] - 2.0 * (br.r * t.p[k] + br.x * t.q[k])
                + (br.r * br.r + br.x * br.x) * dl[k];
            change = change.max((new - t.v[j]).abs());
            t.v[j] = new;
        }
        if change < 1e-14 {
            break;
        }
    }
    let root = topo.root;
    for &c in &topo.child_branches[root] {
        t.p_ref += t.p[c];
        t.q_ref += t.q[c];
    }
    if root == bus {
        t.p_ref -= dp;
        t.q_ref -= dq;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    VoltageLow,
    VoltageHigh,
    Thermal,
    UnitBound,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityViolation {
    pub kind: ConstraintKind,
    pub element: String,
    /// p.u. voltage for voltage limits, MVA for thermal, MW/MVAr for units.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub violations: Vec<FeasibilityViolation>,
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:e} p.u.)")]
    NotConverged { iterations: usize, mismatch: f64 },
}

/// Checks a converged solution against voltage limits (on v²), thermal limits
/// and unit capability boxes, each with slack `tol` in p.u.
pub fn check_feasibility(
    case: &Case,
    solution: &PowerFlowSolution,
    tol: f64,
) -> Result<FeasibilityReport, PowerFlowError> {
    if !solution.converged {
        return Err(PowerFlowError::NotConverged {
            iterations: solution.iterations,
            mismatch: solution.max_mismatch,
        });
    }
    let net = &case.network;
    let (v_min, v_max) = net.voltage_limits;
    let base = net.base_power;
    let mut violations = Vec::new();
    for (i, &v) in solution.v_sq.iter().enumerate() {
        let id = net.buses[i].id;
        if v < v_min * v_min - tol {
            violations.push(FeasibilityViolation {
                kind: ConstraintKind::VoltageLow,
                element: format!("bus {id}"),
                magnitude: v_min - v.max(0.0).sqrt(),
            });
        } else if v > v_max * v_max + tol {
            violations.push(FeasibilityViolation {
                kind: ConstraintKind::VoltageHigh,
                element: format!("bus {id}"),
                magnitude: v.sqrt() - v_max,
            });
        }
    }
    for (k, br) in net.branches.iter().enumerate() {
        if let Some(limit) = br.thermal_limit {
            let s = solution.branch_p[k].hypot(solution.branch_q[k]);
            if s / base > limit / base + tol {
                violations.push(FeasibilityViolation {
                    kind: ConstraintKind::Thermal,
                    element: format!("branch {}-{}", br.from_bus, br.to_bus),
                    magnitude: s - limit,
                });
            }
        }
    }
    let slack = tol * base;
    for (u, &(p, q)) in case.units.iter().zip(&solution.setpoints) {
        let over = [
            u.p_range.0 - p,
            p - u.p_range.1,
            u.q_range.0 - q,
            q - u.q_range.1,
        ]
        .into_iter()
        .fold(0.0f64, f64::max);
        if over > slack {
            violations.push(FeasibilityViolation {
                kind: ConstraintKind::UnitBound,
                element: format!("unit {}", u.id),
                magnitude: over,
            });
        }
    }
    Ok(FeasibilityReport {
        feasible: violations.is_empty(),
        violations,
    })
}
