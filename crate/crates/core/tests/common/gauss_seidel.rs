//! Bus-injection AC power flow solved by Gauss-Seidel on the admittance
//! matrix. Shares no code with the DistFlow sweep.

use flexcoop::net_model::Case;
use num_complex::Complex64;

pub struct GsSolution {
    /// Voltage magnitude per bus, p.u.
    pub v: Vec<f64>,
    /// Interface consumption, MW / MVAr.
    pub p_ref: f64,
    pub q_ref: f64,
    pub iterations: usize,
}

pub fn solve(case: &Case, setpoints: &[(f64, f64)]) -> GsSolution {
    let net = &case.network;
    let n = net.buses.len();
    let base = net.base_power;
    let idx = |id: u32| net.buses.iter().position(|b| b.id == id).unwrap();
    let root = idx(net.reference_bus);

    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for br in &net.branches {
        let (a, b) = (idx(br.from_bus), idx(br.to_bus));
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        y[a][a] += ys;
        y[b][b] += ys;
        y[a][b] -= ys;
        y[b][a] -= ys;
    }

    let mut s = vec![Complex64::new(0.0, 0.0); n];
    for (i, b) in net.buses.iter().enumerate() {
        s[i] = Complex64::new(-b.p_load / base, -b.q_load / base);
    }
    for (u, &(p, q)) in case.units.iter().zip(setpoints) {
        s[idx(u.bus)] += Complex64::new(p / base, q / base);
    }

    let mut v = vec![Complex64::new(1.0, 0.0); n];
    let mut iterations = 0;
    for it in 0..2_000_000 {
        let mut change = 0.0f64;
        for k in 0..n {
            if k == root {
                continue;
            }
            let mut acc = s[k].conj() / v[k].conj();
            for j in 0..n {
                if j != k && y[k][j].norm() > 0.0 {
                    acc -= y[k][j] * v[j];
                }
            }
            let new = acc / y[k][k];
            change = change.max((new - v[k]).norm());
            v[k] = new;
        }
        iterations = it + 1;
        if change < 1e-14 {
            break;
        }
    }

    let mut i_root = Complex64::new(0.0, 0.0);
    for j in 0..n {
        i_root += y[root][j] * v[j];
    }
    let s_root = v[root] * i_root.conj() - s[root];
    GsSolution {
        v: v.iter().map(|x| x.norm()).collect(),
        p_ref: s_root.re * base,
        q_ref: s_root.im * base,
        iterations,
    }
}
