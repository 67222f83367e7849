//! Flexibility areas: the set of interface operating points a coalition can
//! reach, traced as polygons in the P-Q plane.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::Serialize;

use crate::coalition::Coalition;
use crate::net_model::{Case, OperatingPoint};
use crate::opf::{
    initial_point, patterns, solve_direction_pattern, DirectionWeights, DispatchSolution,
    OpfOptions, SignPattern, SolveStatus, SwapPolicy,
};

/// Vertices closer than this (MVA) are merged.
pub const MERGE_TOL: f64 = 1e-6;
/// Points within this distance (MVA) of an edge count as inside.
pub const EDGE_TOL: f64 = 1e-6;
pub const DEFAULT_DIRS: usize = 72;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Vertex {
    /// Sweep angle of the objective weights, degrees.
    pub theta_deg: f64,
    pub p: f64,
    pub q: f64,
}

impl Vertex {
    pub fn point(&self) -> OperatingPoint {
        OperatingPoint::new(self.p, self.q)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlexibilityArea {
    pub coalition: Coalition,
    pub policy: SwapPolicy,
    pub initial: OperatingPoint,
    /// Closed boundary ring ordered by sweep angle (first = last). Under
    /// forbid this is the best point over all sign patterns per direction.
    pub vertices: Vec<Vertex>,
    /// Closed rings whose union is the area: one per sign pattern under
    /// forbid, the boundary ring otherwise.
    pub components: Vec<Vec<Vertex>>,
    /// Unit setpoints (MW, MVAr) realizing each entry of `vertices`.
    pub vertex_setpoints: Vec<Vec<(f64, f64)>>,
    /// Sign pattern of each component, e.g. `p+q-`.
    pub component_labels: Vec<String>,
    pub warnings: Vec<String>,
}

impl FlexibilityArea {
    /// Distinct boundary points (the ring without its closing copy).
    pub fn boundary(&self) -> &[Vertex] {
        open_ring(&self.vertices)
    }

    /// Largest and smallest `P_ref`, `Q_ref` over all rings.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (self.initial.p, self.initial.p, self.initial.q, self.initial.q);
        for v in self.components.iter().flatten().chain(&self.vertices) {
            b.0 = b.0.min(v.p);
            b.1 = b.1.max(v.p);
            b.2 = b.2.min(v.q);
            b.3 = b.3.max(v.q);
        }
        b
    }

    /// Polygon area in MVA² of the union, estimated as the largest component
    /// ring (exact for a single ring).
    pub fn ring_area(&self) -> f64 {
        self.components
            .iter()
            .map(|r| shoelace(open_ring(r)).abs())
            .fold(0.0, f64::max)
    }
}

fn open_ring(ring: &[Vertex]) -> &[Vertex] {
    if ring.len() > 1 {
        &ring[..ring.len() - 1]
    } else {
        ring
    }
}

fn shoelace(pts: &[Vertex]) -> f64 {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            a.p * b.q - b.p * a.q
        })
        .sum::<f64>()
        / 2.0
}

fn angle(k: usize, n: usize) -> f64 {
    TAU * k as f64 / n as f64
}

/// Traces one ring with warm starts from the previous angle.
fn trace_ring(
    case: &Case,
    coalition: Coalition,
    n_dirs: usize,
    pattern: SignPattern,
    opts: &OpfOptions,
    warnings: &mut Vec<String>,
) -> Vec<(usize, DispatchSolution)> {
    let mut out = Vec::with_capacity(n_dirs);
    let mut warm: Option<Vec<(f64, f64)>> = None;
    for k in 0..n_dirs {
        let w = DirectionWeights::from_angle(angle(k, n_dirs));
        let sol = solve_direction_pattern(case, coalition, w, pattern, warm.as_deref(), opts);
        match sol.status {
            SolveStatus::Optimal => {
                warm = Some(sol.setpoints().to_vec());
                out.push((k, sol));
            }
            status => warnings.push(format!(
                "{} {}: direction {:.1} deg excluded ({status:?}: {})",
                coalition.label(case),
                pattern.label(),
                angle(k, n_dirs).to_degrees(),
                sol.diagnostics
            )),
        }
    }
    out
}

type Traced<'a> = (usize, OperatingPoint, &'a [(f64, f64)]);

/// Closed ring from per-direction points, merging near duplicates.
fn ring(points: &[Traced], n_dirs: usize, case: &Case) -> (Vec<Vertex>, Vec<Vec<(f64, f64)>>) {
    let mut ring: Vec<Vertex> = Vec::with_capacity(points.len() + 1);
    let mut setpoints = Vec::with_capacity(points.len() + 1);
    for &(k, pt, sp) in points {
        if ring
            .last()
            .is_some_and(|v: &Vertex| v.point().distance(&pt) <= MERGE_TOL)
        {
            continue;
        }
        ring.push(Vertex {
            theta_deg: angle(k, n_dirs).to_degrees(),
            p: pt.p,
            q: pt.q,
        });
        setpoints.push(sp.to_vec());
    }
    while ring.len() > 1 && ring[ring.len() - 1].point().distance(&ring[0].point()) <= MERGE_TOL {
        ring.pop();
        setpoints.pop();
    }
    if ring.is_empty() {
        let initial = initial_point(case);
        ring.push(Vertex {
            theta_deg: 0.0,
            p: initial.p,
            q: initial.q,
        });
        setpoints.push(case.initial_setpoints());
    }
    ring.push(ring[0]);
    setpoints.push(setpoints[0].clone());
    (ring, setpoints)
}

/// Traces the area of `coalition` with `n_dirs` boundary directions.
pub fn trace_area(case: &Case, coalition: Coalition, n_dirs: usize, policy: SwapPolicy) -> FlexibilityArea {
    trace_area_with(case, coalition, n_dirs, policy, &OpfOptions::default())
}

pub fn trace_area_with(
    case: &Case,
    coalition: Coalition,
    n_dirs: usize,
    policy: SwapPolicy,
    opts: &OpfOptions,
) -> FlexibilityArea {
    assert!(n_dirs >= 8, "at least 8 directions required");
    let initial = initial_point(case);
    let pats = patterns(case, coalition, policy);
    let traced: Vec<(Vec<(usize, DispatchSolution)>, Vec<String>)> = pats
        .par_iter()
        .map(|&pat| {
            let mut warnings = Vec::new();
            let sols = trace_ring(case, coalition, n_dirs, pat, opts, &mut warnings);
            (sols, warnings)
        })
        .collect();
    let mut warnings: Vec<String> = traced.iter().flat_map(|(_, w)| w.clone()).collect();
    let components: Vec<Vec<Vertex>> = traced
        .iter()
        .map(|(sols, _)| {
            let pts: Vec<Traced> = sols.iter().map(|(k, s)| (*k, s.achieved, s.setpoints())).collect();
            ring(&pts, n_dirs, case).0
        })
        .collect();
    // Best point per direction over all patterns.
    let mut best: Vec<Traced> = Vec::with_capacity(n_dirs);
    for k in 0..n_dirs {
        let w = DirectionWeights::from_angle(angle(k, n_dirs));
        let score = |p: &OperatingPoint| w.w_p() * p.p + w.w_q() * p.q;
        let candidate = traced
            .iter()
            .filter_map(|(sols, _)| sols.iter().find(|(j, _)| *j == k).map(|(_, s)| s))
            .min_by(|a, b| score(&a.achieved).total_cmp(&score(&b.achieved)));
        match candidate {
            Some(s) => best.push((k, s.achieved, s.setpoints())),
            None if pats.len() > 1 => warnings.push(format!(
                "{}: no pattern solved direction {:.1} deg",
                coalition.label(case),
                angle(k, n_dirs).to_degrees()
            )),
            None => {}
        }
    }
    let (vertices, vertex_setpoints) = ring(&best, n_dirs, case);
    for w in &warnings {
        log::warn!("{w}");
    }
    FlexibilityArea {
        coalition,
        policy,
        initial,
        vertices,
        vertex_setpoints,
        components,
        component_labels: pats.iter().map(SignPattern::label).collect(),
        warnings,
    }
}

/// Areas of every nonempty coalition, traced in parallel.
pub fn coalition_areas(
    case: &Case,
    n_dirs: usize,
    policy: SwapPolicy,
) -> BTreeMap<Coalition, FlexibilityArea> {
    let n = case.n_units();
    assert!(n <= 10, "exact enumeration supports at most 10 units");
    Coalition::all(n)
        .skip(1)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| (c, trace_area(case, c, n_dirs, policy)))
        .collect()
}

fn point_segment_distance(p: OperatingPoint, a: Vertex, b: Vertex) -> f64 {
    let (dx, dy) = (b.p - a.p, b.q - a.q);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.p - a.p) * dx + (p.q - a.q) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.p - a.p - t * dx).hypot(p.q - a.q - t * dy)
}

/// Even-odd test against a closed ring, with points near an edge inside.
pub fn ring_contains(ring: &[Vertex], point: OperatingPoint) -> bool {
    if ring.len() == 1 {
        return ring[0].point().distance(&point) <= EDGE_TOL;
    }
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if point_segment_distance(point, a, b) <= EDGE_TOL {
            return true;
        }
        if (a.q > point.q) != (b.q > point.q) {
            let x = a.p + (point.q - a.q) / (b.q - a.q) * (b.p - a.p);
            if point.p < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Whether `point` lies in the area (the union of its components).
pub fn contains(area: &FlexibilityArea, point: OperatingPoint) -> bool {
    area.components.iter().any(|r| ring_contains(r, point))
}

/// Points of the square grid with spacing `step` (MVA), anchored at the
/// initial operating point, that lie inside the area.
pub fn grid_requests(area: &FlexibilityArea, step: f64) -> Vec<OperatingPoint> {
    assert!(step > 0.0, "grid step must be positive");
    let (p_lo, p_hi, q_lo, q_hi) = area.bounds();
    let o = area.initial;
    let i_lo = ((p_lo - o.p) / step).floor() as i64;
    let i_hi = ((p_hi - o.p) / step).ceil() as i64;
    let j_lo = ((q_lo - o.q) / step).floor() as i64;
    let j_hi = ((q_hi - o.q) / step).ceil() as i64;
    let mut out = Vec::new();
    for j in j_lo..=j_hi {
        for i in i_lo..=i_hi {
            let pt = OperatingPoint::new(o.p + i as f64 * step, o.q + j as f64 * step);
            if contains(area, pt) {
                out.push(pt);
            }
        }
    }
    out
}
