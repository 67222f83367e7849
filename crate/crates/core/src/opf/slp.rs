//! Sequential linear programming over unit regulations.
//!
//! The decision vector holds `(p_up, p_down, q_up, q_down)` in p.u. for every
//! coalition member, optionally followed by a scale `t` along a ray in the
//! P-Q plane. Each iterate is evaluated with an exact sweep, and the linear
//! model comes from the sweep tangents. Constraints enter the LP through
//! elastic slacks priced by an l1 penalty, with a box trust region on the
//! step and a second-order correction after rejected steps.

use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};

use crate::net_model::Case;
use crate::powerflow::{sweep, tangent, PfOptions, PuState};

const CRITICALITY_TOL: f64 = 1e-5;

pub(crate) const PF_TIGHT: PfOptions = PfOptions {
    tol: 1e-12,
    max_iter: 200,
};

#[derive(Debug, Clone, Copy)]
pub(crate) struct SlpOptions {
    pub trust_radius: f64,
    pub max_iter: usize,
    pub step_tol: f64,
    pub feas_tol: f64,
}

impl Default for SlpOptions {
    fn default() -> Self {
        SlpOptions {
            trust_radius: 0.1,
            max_iter: 300,
            step_tol: 1e-7,
            feas_tol: 1e-8,
        }
    }
}

/// Equality rows `(P_ref, Q_ref) = origin + t * dir`, with `t` either a
/// decision variable (last entry of `z`) or zero.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ray {
    pub origin: (f64, f64),
    pub dir: (f64, f64),
}

#[derive(Debug, Clone)]
pub(crate) struct Nlp<'a> {
    pub case: &'a Case,
    pub members: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Linear objective coefficients on `z`.
    pub c: Vec<f64>,
    /// Objective weight on `(P_ref, Q_ref)` in p.u.
    pub w_ref: (f64, f64),
    pub ray: Option<Ray>,
    /// Whether `z` ends with the ray scale `t`.
    pub has_t: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Outcome {
    Optimal,
    Infeasible,
    NotConverged,
}

#[derive(Debug, Clone)]
pub(crate) struct SlpResult {
    pub z: Vec<f64>,
    pub state: PuState,
    pub objective: f64,
    pub violation: f64,
    pub outcome: Outcome,
    pub iterations: usize,
    pub message: String,
}

struct Point {
    z: Vec<f64>,
    st: PuState,
    f: f64,
    h: Vec<f64>,
    g: Vec<f64>,
    viol: f64,
}

struct Jacobian {
    f: Vec<f64>,
    h: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

struct Step {
    d: Vec<f64>,
    /// Linearized violation at the step.
    lin_viol: f64,
}

impl<'a> Nlp<'a> {
    pub fn n_vars(&self) -> usize {
        self.lo.len()
    }

    /// Unit setpoints in MW / MVAr for a decision vector.
    pub fn setpoints(&self, z: &[f64]) -> Vec<(f64, f64)> {
        let base = self.case.network.base_power;
        let mut sp = self.case.initial_setpoints();
        for (m, &u) in self.members.iter().enumerate() {
            sp[u].0 += (z[4 * m] - z[4 * m + 1]) * base;
            sp[u].1 += (z[4 * m + 2] - z[4 * m + 3]) * base;
        }
        sp
    }

    fn injections(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let net = &self.case.network;
        let base = net.base_power;
        let mut p: Vec<f64> = net.buses.iter().map(|b| -b.p_load / base).collect();
        let mut q: Vec<f64> = net.buses.iter().map(|b| -b.q_load / base).collect();
        for (k, u) in self.case.units.iter().enumerate() {
            p[self.case.unit_bus[k]] += u.p0 / base;
            q[self.case.unit_bus[k]] += u.q0 / base;
        }
        for (m, &u) in self.members.iter().enumerate() {
            let b = self.case.unit_bus[u];
            p[b] += z[4 * m] - z[4 * m + 1];
            q[b] += z[4 * m + 2] - z[4 * m + 3];
        }
        (p, q)
    }

    fn t(&self, z: &[f64]) -> f64 {
        if self.has_t {
            z[z.len() - 1]
        } else {
            0.0
        }
    }

    fn evaluate(&self, z: Vec<f64>) -> Option<Point> {
        let (np, nq) = self.injections(&z);
        let st = sweep(self.case, &np, &nq, PF_TIGHT);
        if !st.converged {
            return None;
        }
        let f = dot(&self.c, &z) + self.w_ref.0 * st.p_ref + self.w_ref.1 * st.q_ref;
        let h = match self.ray {
            Some(r) => {
                let t = self.t(&z);
                vec![
                    st.p_ref - r.origin.0 - t * r.dir.0,
                    st.q_ref - r.origin.1 - t * r.dir.1,
                ]
            }
            None => Vec::new(),
        };
        let g = self.inequalities(&st);
        let viol = h.iter().map(|x| x.abs()).sum::<f64>() + g.iter().map(|x| x.max(0.0)).sum::<f64>();
        Some(Point {
            z,
            st,
            f,
            h,
            g,
            viol,
        })
    }

    fn inequalities(&self, st: &PuState) -> Vec<f64> {
        let net = &self.case.network;
        let (lo, hi) = net.voltage_limits;
        let root = self.case.topology.root;
        let mut g = Vec::with_capacity(2 * st.v.len());
        for (i, &v) in st.v.iter().enumerate() {
            if i != root {
                g.push(lo * lo - v);
                g.push(v - hi * hi);
            }
        }
        for (k, br) in net.branches.iter().enumerate() {
            if let Some(s) = br.thermal_limit {
                let s = s / net.base_power;
                g.push((st.p[k] * st.p[k] + st.q[k] * st.q[k]) / (s * s) - 1.0);
            }
        }
        g
    }

    fn jacobian(&self, pt: &Point) -> Jacobian {
        let n = self.n_vars();
        let net = &self.case.network;
        let root = self.case.topology.root;
        let n_g = pt.g.len();
        let mut jf = self.c.clone();
        let mut jh = vec![vec![0.0; n]; pt.h.len()];
        let mut jg = vec![vec![0.0; n]; n_g];
        let mut cache: Vec<(usize, [crate::powerflow::Tangent; 2])> = Vec::new();
        for (m, &u) in self.members.iter().enumerate() {
            let bus = self.case.unit_bus[u];
            if !cache.iter().any(|(b, _)| *b == bus) {
                let tp = tangent(self.case, &pt.st, bus, 1.0, 0.0);
                let tq = tangent(self.case, &pt.st, bus, 0.0, 1.0);
                cache.push((bus, [tp, tq]));
            }
            let tans = &cache.iter().find(|(b, _)| *b == bus).unwrap().1;
            for (axis, tan) in tans.iter().enumerate() {
                for (sign, col) in [(1.0, 4 * m + 2 * axis), (-1.0, 4 * m + 2 * axis + 1)] {
                    jf[col] += sign * (self.w_ref.0 * tan.p_ref + self.w_ref.1 * tan.q_ref);
                    if !jh.is_empty() {
                        jh[0][col] = sign * tan.p_ref;
                        jh[1][col] = sign * tan.q_ref;
                    }
                    let mut row = 0;
                    for (i, &dv) in tan.v.iter().enumerate() {
                        if i != root {
                            jg[row][col] = -sign * dv;
                            jg[row + 1][col] = sign * dv;
                            row += 2;
                        }
                    }
                    for (k, br) in net.branches.iter().enumerate() {
                        if let Some(s) = br.thermal_limit {
                            let s = s / net.base_power;
                            let st = &pt.st;
                            jg[row][col] = sign * 2.0 * (st.p[k] * tan.p[k] + st.q[k] * tan.q[k]) / (s * s);
                            row += 1;
                        }
                    }
                }
            }
        }
        if self.has_t {
            if let Some(r) = self.ray {
                jh[0][n - 1] = -r.dir.0;
                jh[1][n - 1] = -r.dir.1;
            }
        }
        Jacobian {
            f: jf,
            h: jh,
            g: jg,
        }
    }

    /// Solves the elastic LP for a step from `z`, with constraint constants
    /// `h0`, `g0` and the Jacobian `jac`.
    fn lp_step(
        &self,
        z: &[f64],
        h0: &[f64],
        g0: &[f64],
        jac: &Jacobian,
        radius: f64,
        mu: f64,
    ) -> Option<Step> {
        let n = self.n_vars();
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let mut width = vec![0.0; n];
        let vars: Vec<Variable> = (0..n)
            .map(|i| {
                let lo = (self.lo[i] - z[i]).max(-radius).min(0.0);
                let hi = (self.hi[i] - z[i]).min(radius).max(0.0);
                width[i] = lo.abs().max(hi.abs());
                lp.add_var(jac.f[i], (lo, hi))
            })
            .collect();
        let mut slacks = Vec::new();
        for (row, &c) in jac.h.iter().zip(h0) {
            let ep = lp.add_var(mu, (0.0, f64::INFINITY));
            let em = lp.add_var(mu, (0.0, f64::INFINITY));
            let mut expr: Vec<(Variable, f64)> = terms(&vars, row);
            expr.push((ep, -1.0));
            expr.push((em, 1.0));
            lp.add_constraint(expr, ComparisonOp::Eq, -c);
            slacks.push(ep);
            slacks.push(em);
        }
        for (row, &c) in jac.g.iter().zip(g0) {
            let reach: f64 = row.iter().zip(&width).map(|(a, w)| a.abs() * w).sum();
            if c + reach < -1e-9 {
                continue;
            }
            let s = lp.add_var(mu, (0.0, f64::INFINITY));
            let mut expr = terms(&vars, row);
            expr.push((s, -1.0));
            lp.add_constraint(expr, ComparisonOp::Le, -c);
            slacks.push(s);
        }
        let outcome = lp.solve().ok()?;
        let sol = outcome.solution()?;
        let d: Vec<f64> = vars.iter().map(|&v| sol.var_value(v)).collect();
        let lin_viol = slacks.iter().map(|&s| sol.var_value(s)).sum();
        Some(Step { d, lin_viol })
    }

    fn clamp(&self, z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = z[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Runs the SLP from `start` (clamped into the box).
    pub fn solve(&self, start: &[f64], opts: &SlpOptions) -> SlpResult {
        let mut z0 = start.to_vec();
        self.clamp(&mut z0);
        let fail = |z: Vec<f64>, msg: &str| SlpResult {
            state: {
                let (np, nq) = self.injections(&z);
                sweep(self.case, &np, &nq, PF_TIGHT)
            },
            z,
            objective: f64::NAN,
            violation: f64::INFINITY,
            outcome: Outcome::NotConverged,
            iterations: 0,
            message: msg.to_string(),
        };
        let Some(mut pt) = self.evaluate(z0.clone()) else {
            return fail(z0, "power flow diverged at the starting point");
        };
        let mut jac = self.jacobian(&pt);
        let mut radius = opts.trust_radius;
        let mut mu = 1e2;
        const MU_MAX: f64 = 1e7;
        const ETA: f64 = 1e-4;
        let mut message = String::new();
        let mut outcome = Outcome::NotConverged;
        let mut iters = 0;
        while iters < opts.max_iter {
            iters += 1;
            let Some(step) = self.lp_step(&pt.z, &pt.h, &pt.g, &jac, radius, mu) else {
                message = "LP subproblem failed".into();
                break;
            };
            let dnorm = step.d.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            let merit = pt.f + mu * pt.viol;
            let pred = -dot(&jac.f, &step.d) + mu * (pt.viol - step.lin_viol);
            log::trace!(
                "slp it {iters}: f {:.12} viol {:.3e} step {:.3e} pred {:.3e} radius {:.3e} mu {mu:e}",
                pt.f,
                pt.viol,
                dnorm,
                pred,
                radius
            );
            // Besides a vanishing step, stop when the model decrease per unit
            // step is negligible: the iterate is then first-order critical
            // on a curved part of the boundary where steps only zigzag.
            let stationary = dnorm < opts.step_tol
                || pred <= 1e-13 * (1.0 + merit.abs())
                || (pred <= CRITICALITY_TOL * dnorm && pt.viol <= opts.feas_tol);
            if stationary && pt.viol > opts.feas_tol && step.lin_viol < 0.5 * pt.viol {
                // A short restoration step that the model says removes most of
                // the remaining violation: take it if it does.
                let mut z: Vec<f64> = pt.z.iter().zip(&step.d).map(|(a, b)| a + b).collect();
                self.clamp(&mut z);
                if let Some(trial) = self.evaluate(z) {
                    if trial.viol < 0.5 * pt.viol {
                        pt = trial;
                        jac = self.jacobian(&pt);
                        continue;
                    }
                }
            }
            if stationary {
                if pt.viol <= opts.feas_tol {
                    outcome = Outcome::Optimal;
                    break;
                }
                if mu < MU_MAX {
                    mu *= 10.0;
                    radius = radius.max(1e-2);
                    continue;
                }
                outcome = Outcome::Infeasible;
                message = format!("stationary with violation {:.3e}", pt.viol);
                break;
            }
            let mut trial_z: Vec<f64> = pt.z.iter().zip(&step.d).map(|(a, b)| a + b).collect();
            self.clamp(&mut trial_z);
            let mut accepted = None;
            if let Some(trial) = self.evaluate(trial_z) {
                let ared = merit - (trial.f + mu * trial.viol);
                if ared >= ETA * pred {
                    if ared >= 0.75 * pred && dnorm >= 0.9 * radius {
                        radius = (2.0 * radius).min(1.0);
                    }
                    accepted = Some(trial);
                } else if trial.viol > pt.viol.max(opts.feas_tol) {
                    // Second-order correction for curvature of the constraints.
                    let h_c: Vec<f64> = trial
                        .h
                        .iter()
                        .zip(&jac.h)
                        .map(|(hv, row)| hv - dot(row, &step.d))
                        .collect();
                    let g_c: Vec<f64> = trial
                        .g
                        .iter()
                        .zip(&jac.g)
                        .map(|(gv, row)| gv - dot(row, &step.d))
                        .collect();
                    if let Some(soc) = self.lp_step(&pt.z, &h_c, &g_c, &jac, radius, mu) {
                        let mut soc_z: Vec<f64> = pt.z.iter().zip(&soc.d).map(|(a, b)| a + b).collect();
                        self.clamp(&mut soc_z);
                        if let Some(t2) = self.evaluate(soc_z) {
                            if merit - (t2.f + mu * t2.viol) >= ETA * pred {
                                accepted = Some(t2);
                            }
                        }
                    }
                }
            }
            match accepted {
                Some(next) => {
                    pt = next;
                    jac = self.jacobian(&pt);
                }
                None => {
                    radius = 0.5 * radius.min(dnorm);
                    if radius < 0.1 * opts.step_tol {
                        // Cannot make progress: treat as stationary.
                        if pt.viol <= opts.feas_tol {
                            outcome = Outcome::Optimal;
                        } else if mu < MU_MAX {
                            mu *= 10.0;
                            radius = 1e-2;
                            continue;
                        } else {
                            outcome = Outcome::Infeasible;
                            message = format!("no descent with violation {:.3e}", pt.viol);
                        }
                        break;
                    }
                }
            }
        }
        if outcome == Outcome::NotConverged && message.is_empty() {
            message = format!("iteration limit {} reached", opts.max_iter);
        }
        SlpResult {
            objective: pt.f,
            violation: pt.viol,
            z: pt.z,
            state: pt.st,
            outcome,
            iterations: iters,
            message,
        }
    }
}

fn terms(vars: &[Variable], row: &[f64]) -> Vec<(Variable, f64)> {
    vars.iter()
        .zip(row)
        .filter(|(_, &a)| a != 0.0)
        .map(|(&v, &a)| (v, a))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
