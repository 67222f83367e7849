mod common;

use common::setpoint_search::{lattice_search, single_unit_p_reach, two_unit_min_cost};
use flexcoop::coalition::Coalition;
use flexcoop::net_model::{builtin_case, Case, OperatingPoint};
use flexcoop::opf::{
    initial_point, max_reach, solve_direction, solve_dispatch, DirectionWeights, SwapPolicy,
};
use flexcoop::powerflow::{check_feasibility, solve_powerflow};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ieee33() -> Case {
    builtin_case("ieee33").unwrap()
}

#[test]
fn grand_coalition_export_matches_setpoint_search() {
    let case = ieee33();
    let members: Vec<usize> = (0..4).collect();
    let w = DirectionWeights::new(1.0, 0.0).unwrap();
    let sol = solve_direction(&case, Coalition::grand(4), w, SwapPolicy::Allow);
    assert!(sol.is_optimal());
    let (oracle, _) = lattice_search(&case, &members, 0.025, |pf| pf.p_ref);
    let found = sol.achieved.p;
    assert!((found - oracle).abs() <= 0.01, "opf {found} vs search {oracle}");
}

#[test]
fn grand_coalition_consumption_beats_setpoint_search() {
    // Voltage limits bind here and the pattern search stalls on them, so the
    // search only bounds the optimum from one side.
    let case = ieee33();
    let members: Vec<usize> = (0..4).collect();
    let w = DirectionWeights::new(-1.0, 0.0).unwrap();
    let sol = solve_direction(&case, Coalition::grand(4), w, SwapPolicy::Allow);
    assert!(sol.is_optimal());
    let (oracle, _) = lattice_search(&case, &members, 0.025, |pf| -pf.p_ref);
    let found = -sol.achieved.p;
    assert!(found <= oracle + 1e-6, "opf {found} vs search {oracle}");
    let pf = solve_powerflow(&case, sol.setpoints());
    assert!(check_feasibility(&case, &pf, 1e-6).unwrap().feasible);
}

#[test]
fn single_unit_export_reach_matches_scan() {
    let case = ieee33();
    let a = case.unit_index("A").unwrap();
    let (t, sol) = max_reach(&case, Coalition::singleton(a), (-1.0, 0.0), SwapPolicy::Allow);
    assert!(sol.is_optimal());
    let oracle = single_unit_p_reach(&case, a, -1.0);
    assert!((t - oracle).abs() <= 2e-3, "reach {t} vs scan {oracle}");
}

fn bisect_reach(case: &Case, c: Coalition, dir: (f64, f64), policy: SwapPolicy) -> f64 {
    let p0 = initial_point(case);
    let member = |t: f64| {
        let target = OperatingPoint::new(p0.p + t * dir.0, p0.q + t * dir.1);
        solve_dispatch(case, c, target, policy).is_optimal()
    };
    let (mut lo, mut hi) = (0.0, 4.0);
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if member(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn reach_agrees_with_dispatch_bisection() {
    let case = ieee33();
    let cases = [
        (Coalition::from_members([0]), 0.3),
        (Coalition::from_members([3]), 0.9),
        (Coalition::from_members([1, 2]), 2.2),
        (Coalition::grand(4), 0.8),
        (Coalition::grand(4), 4.0),
    ];
    for (c, angle) in cases {
        for policy in [SwapPolicy::Allow, SwapPolicy::Forbid] {
            let dir = (f64::cos(angle), f64::sin(angle));
            let (t, _) = max_reach(&case, c, dir, policy);
            let oracle = bisect_reach(&case, c, dir, policy);
            assert!((t - oracle).abs() <= 2e-3, "{c} {angle} {policy}: {t} vs {oracle}");
        }
    }
}

#[test]
fn motivating_case_costs_match_exhaustive_search() {
    let case = builtin_case("motivating3").unwrap();
    let p0 = initial_point(&case);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    while checked < 12 {
        let dp = rng.random_range(-1.0..1.0);
        let dq = rng.random_range(-0.4..0.4);
        let target = (p0.p + dp, p0.q + dq);
        let Some(oracle) = two_unit_min_cost(&case, target) else {
            continue;
        };
        let sol = solve_dispatch(&case, Coalition::grand(2), OperatingPoint::new(target.0, target.1), SwapPolicy::Allow);
        assert!(sol.is_optimal(), "({dp}, {dq}) reachable by search but {:?}", sol.status);
        let rel = (sol.total_cost - oracle).abs() / oracle.max(1e-9);
        assert!(rel <= 0.01, "({dp}, {dq}): opf {} vs search {oracle}", sol.total_cost);
        checked += 1;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn optimal_dispatches_pass_the_power_flow_oracle(
        mask in 1u32..16,
        dp in -1.5f64..1.5,
        dq in -1.5f64..1.5,
        forbid in any::<bool>(),
    ) {
        let case = ieee33();
        let p0 = initial_point(&case);
        let policy = if forbid { SwapPolicy::Forbid } else { SwapPolicy::Allow };
        let target = OperatingPoint::new(p0.p + dp, p0.q + dq);
        let sol = solve_dispatch(&case, Coalition(mask), target, policy);
        if sol.is_optimal() {
            let pf = solve_powerflow(&case, sol.setpoints());
            let base = case.network.base_power;
            prop_assert!((pf.p_ref - target.p).abs() / base < 1e-6);
            prop_assert!((pf.q_ref - target.q).abs() / base < 1e-6);
            prop_assert!(check_feasibility(&case, &pf, 1e-6).unwrap().feasible);
            for (k, r) in sol.regulations.iter().enumerate() {
                prop_assert!(r.p_up * r.p_down <= 1e-9 && r.q_up * r.q_down <= 1e-9);
                if mask >> k & 1 == 0 {
                    prop_assert!(!r.is_active());
                }
            }
            if forbid {
                prop_assert!(!sol.swap_active_p && !sol.swap_active_q);
            }
        }
    }

    #[test]
    fn reach_is_monotone_in_the_coalition(mask in 1u32..15, angle in 0.0f64..std::f64::consts::TAU) {
        let case = ieee33();
        let dir = (angle.cos(), angle.sin());
        let (small, _) = max_reach(&case, Coalition(mask), dir, SwapPolicy::Allow);
        let (large, _) = max_reach(&case, Coalition::grand(4), dir, SwapPolicy::Allow);
        prop_assert!(large >= small - 1e-3, "{} vs {}", large, small);
    }
}
