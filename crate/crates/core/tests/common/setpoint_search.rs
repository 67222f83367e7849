//! Derivative-free searches over unit setpoints, judged only by power flow
//! evaluations and the feasibility check.

use flexcoop::net_model::Case;
use rayon::prelude::*;
use flexcoop::powerflow::{check_feasibility, solve_powerflow, PowerFlowSolution};

/// Power flow of a setpoint vector, if it converges and respects every limit.
pub fn feasible(case: &Case, sp: &[(f64, f64)]) -> Option<PowerFlowSolution> {
    let pf = solve_powerflow(case, sp);
    if !pf.converged {
        return None;
    }
    let report = check_feasibility(case, &pf, 0.0).ok()?;
    report.feasible.then_some(pf)
}

fn in_box(case: &Case, k: usize, p: f64, q: f64) -> bool {
    let u = &case.units[k];
    p >= u.p_range.0 - 1e-12 && p <= u.p_range.1 + 1e-12 && q >= u.q_range.0 - 1e-12 && q <= u.q_range.1 + 1e-12
}

/// Pattern search over the setpoints of `members`, minimizing `score` among
/// feasible points. Starts from the initial state and every feasible corner
/// of the half-size boxes, and polls every coordinate and every pair of
/// coordinates with strides from `16 * lattice` down to `lattice / 32`.
pub fn lattice_search(
    case: &Case,
    members: &[usize],
    lattice: f64,
    score: impl Fn(&PowerFlowSolution) -> f64 + Sync,
) -> (f64, Vec<(f64, f64)>) {
    let n = 2 * members.len();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut d = vec![0.0; n];
            d[i] = s;
            dirs.push(d);
        }
        for j in i + 1..n {
            for (a, b) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                let mut d = vec![0.0; n];
                d[i] = a;
                d[j] = b;
                dirs.push(d);
            }
        }
    }
    let apply = |x: &[f64]| -> Vec<(f64, f64)> {
        let mut sp = case.initial_setpoints();
        for (m, &k) in members.iter().enumerate() {
            sp[k] = (x[2 * m], x[2 * m + 1]);
        }
        sp
    };
    let eval = |x: &[f64]| -> f64 {
        let sp = apply(x);
        if members.iter().any(|&k| !in_box(case, k, sp[k].0, sp[k].1)) {
            return f64::INFINITY;
        }
        feasible(case, &sp).map_or(f64::INFINITY, |pf| score(&pf))
    };
    let descend = |mut x: Vec<f64>| -> (f64, Vec<f64>) {
        let mut best = eval(&x);
        let mut stride = 16.0 * lattice;
        while stride >= lattice / 32.0 {
            let mut improved = true;
            while improved {
                improved = false;
                for d in &dirs {
                    let y: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + stride * b).collect();
                    let v = eval(&y);
                    if v < best - 1e-12 {
                        best = v;
                        x = y;
                        improved = true;
                    }
                }
            }
            stride /= 2.0;
        }
        (best, x)
    };
    let half: Vec<f64> = members
        .iter()
        .flat_map(|&k| {
            let u = &case.units[k];
            [0.5 * u.p_range.1, 0.5 * u.q_range.1]
        })
        .collect();
    let mut starts = vec![vec![0.0; n]];
    for code in 0..1usize << n {
        let x: Vec<f64> = (0..n)
            .map(|i| if code >> i & 1 == 1 { half[i] } else { -half[i] })
            .collect();
        if eval(&x).is_finite() {
            starts.push(x);
        }
    }
    assert!(!starts.is_empty(), "no feasible starting point");
    let (best, x) = starts
        .into_par_iter()
        .map(descend)
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    (best, apply(&x))
}

/// Root of a monotone scalar function on `[lo, hi]` by bisection.
pub fn bisect_root(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if f(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Largest pure active-power move of the interface (sign `dir` = +1 for
/// more consumption) reachable by unit `k` alone: scan its active setpoint
/// on a 1 kW grid and solve the reactive setpoint that keeps `Q_ref` fixed.
pub fn single_unit_p_reach(case: &Case, k: usize, dir: f64) -> f64 {
    let init = solve_powerflow(case, &case.initial_setpoints());
    let u = &case.units[k];
    let steps = ((u.p_range.1 - u.p_range.0) / 1e-3).round() as usize;
    let mut best = 0.0f64;
    for i in 0..=steps {
        let p = u.p_range.0 + i as f64 * 1e-3;
        let q_gap = |q: f64| {
            let mut sp = case.initial_setpoints();
            sp[k] = (p, q);
            solve_powerflow(case, &sp).q_ref - init.q_ref
        };
        let Some(q) = bisect_root(q_gap, u.q_range.0, u.q_range.1) else {
            continue;
        };
        let mut sp = case.initial_setpoints();
        sp[k] = (p, q);
        if let Some(pf) = feasible(case, &sp) {
            best = best.max(dir * (pf.p_ref - init.p_ref));
        }
    }
    best
}

/// Cheapest two-unit dispatch meeting `target` (MW, MVAr): unit 0 scanned on
/// nested grids (5 kW, then 0.5 kW and 0.05 kW around the incumbent), unit 1
/// solved by Newton's method to meet the target exactly.
pub fn two_unit_min_cost(case: &Case, target: (f64, f64)) -> Option<f64> {
    assert_eq!(case.n_units(), 2);
    let ua = &case.units[0];
    let cost = |k: usize, sp: (f64, f64)| {
        let u = &case.units[k];
        u.cost_p * (sp.0 - u.p0).abs() + u.cost_q * (sp.1 - u.q0).abs()
    };
    let solve_b = |a: (f64, f64)| -> Option<f64> {
        let resid = |b: (f64, f64)| {
            let pf = solve_powerflow(case, &[a, b]);
            (pf.p_ref - target.0, pf.q_ref - target.1)
        };
        let mut b = (case.units[1].p0, case.units[1].q0);
        for _ in 0..30 {
            let r = resid(b);
            if r.0.abs() < 1e-11 && r.1.abs() < 1e-11 {
                if !in_box(case, 1, b.0, b.1) {
                    return None;
                }
                feasible(case, &[a, b])?;
                return Some(cost(0, a) + cost(1, b));
            }
            let h = 1e-7;
            let rp = resid((b.0 + h, b.1));
            let rq = resid((b.0, b.1 + h));
            let (j11, j21) = ((rp.0 - r.0) / h, (rp.1 - r.1) / h);
            let (j12, j22) = ((rq.0 - r.0) / h, (rq.1 - r.1) / h);
            let det = j11 * j22 - j12 * j21;
            if det.abs() < 1e-14 {
                return None;
            }
            b.0 -= (j22 * r.0 - j12 * r.1) / det;
            b.1 -= (-j21 * r.0 + j11 * r.1) / det;
            if !b.0.is_finite() || b.0.abs() > 10.0 || b.1.abs() > 10.0 {
                return None;
            }
        }
        None
    };
    let scan = |p_lo: f64, p_hi: f64, q_lo: f64, q_hi: f64, step: f64, best: &mut Option<(f64, (f64, f64))>| {
        let np = ((p_hi - p_lo) / step).round() as i64;
        let nq = ((q_hi - q_lo) / step).round() as i64;
        for i in 0..=np {
            for j in 0..=nq {
                let a = (p_lo + i as f64 * step, q_lo + j as f64 * step);
                if !in_box(case, 0, a.0, a.1) {
                    continue;
                }
                if let Some(c) = solve_b(a) {
                    if best.is_none_or(|(bc, _)| c < bc) {
                        *best = Some((c, a));
                    }
                }
            }
        }
    };
    let mut best = None;
    scan(ua.p_range.0, ua.p_range.1, ua.q_range.0, ua.q_range.1, 5e-3, &mut best);
    for (radius, step) in [(5e-3, 5e-4), (5e-4, 5e-5)] {
        let (_, a) = best?;
        scan(a.0 - radius, a.0 + radius, a.1 - radius, a.1 + radius, step, &mut best);
    }
    best.map(|(c, _)| c)
}
