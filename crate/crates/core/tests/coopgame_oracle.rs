use flexcoop::coopgame::{
    build_game, characteristic_value, marginal_contribution, shapley_exact, shapley_sampled,
    Coalition, CooperativeGame, Metric,
};
use flexcoop::net_model::{builtin_case, load_case, save_case, Case, OperatingPoint};
use flexcoop::opf::{initial_point, SwapPolicy};
use proptest::prelude::*;

fn ieee33() -> Case {
    builtin_case("ieee33").unwrap()
}

/// ieee33 plus extra units described as (id, bus, half-width MW/MVAr, cost_p).
fn with_units(extra: &[(&str, u32, f64, f64)]) -> Case {
    let mut doc = save_case(&ieee33());
    for (id, bus, w, c) in extra {
        doc += &format!(
            "\n[[units]]\nid = \"{id}\"\nbus = {bus}\np_min_mw = {lo}\np_max_mw = {w}\nq_min_mvar = {lo}\nq_max_mvar = {w}\np0_mw = 0.0\nq0_mvar = 0.0\ncost_p = {c}\ncost_q = {h}\n",
            lo = -w,
            h = c / 2.0
        );
    }
    load_case(&doc).unwrap()
}

/// Average of marginal contributions over every ordering, computed
/// independently of the subset formula.
fn permutation_average(n: usize, v: &[f64]) -> Vec<f64> {
    fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.clone();
            let head = rest.remove(i);
            for mut p in perms(rest) {
                p.insert(0, head);
                out.push(p);
            }
        }
        out
    }
    let orders = perms((0..n).collect());
    let mut phi = vec![0.0; n];
    for order in &orders {
        let mut mask = 0usize;
        for &i in order {
            phi[i] += v[mask | 1 << i] - v[mask];
            mask |= 1 << i;
        }
    }
    phi.iter().map(|x| x / orders.len() as f64).collect()
}

fn random_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 16).prop_map(|mut v| {
        v[0] = 0.0;
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn exact_matches_permutation_average(v in random_values()) {
        let g = CooperativeGame::from_values(4, v.clone());
        let exact = shapley_exact(&g);
        for (a, b) in exact.values.iter().zip(permutation_average(4, &v)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn efficiency(v in random_values()) {
        let g = CooperativeGame::from_values(4, v.clone());
        let total = shapley_exact(&g).total();
        prop_assert!((total - v[15]).abs() <= 1e-9 * v[15].abs().max(1.0));
    }

    #[test]
    fn duplicated_players_are_treated_alike(v in random_values()) {
        // Make players 0 and 1 interchangeable.
        let mut v = v;
        for m in 0..16usize {
            if m & 1 == 1 && m & 2 == 0 {
                v[m] = v[(m & !1) | 2];
            }
        }
        let sh = shapley_exact(&CooperativeGame::from_values(4, v)).values;
        prop_assert!((sh[0] - sh[1]).abs() <= 1e-12);
    }

    #[test]
    fn null_player_gets_nothing(v in random_values()) {
        let mut v = v;
        for m in 0..16usize {
            if m & 8 != 0 {
                v[m] = v[m & !8];
            }
        }
        let g = CooperativeGame::from_values(4, v);
        prop_assert_eq!(shapley_exact(&g).values[3], 0.0);
        for c in Coalition::all(3) {
            prop_assert_eq!(marginal_contribution(&g, c, 3).unwrap(), 0.0);
        }
    }
}

#[test]
fn sampled_estimator_is_unbiased() {
    let v = vec![0.0, 1.0, 2.0, 4.0, 0.5, 2.0, 3.0, 7.0, 1.0, 3.0, 2.5, 5.0, 1.5, 4.0, 4.5, 9.0];
    let g = CooperativeGame::from_values(4, v);
    let exact = shapley_exact(&g).values;
    let runs: Vec<_> = (0..50)
        .map(|seed| shapley_sampled(|c| Ok(g.value(c)), 4, 50, seed).unwrap())
        .collect();
    for i in 0..4 {
        let mean = runs.iter().map(|r| r.values[i]).sum::<f64>() / 50.0;
        let pooled = (runs.iter().map(|r| r.std_error.as_ref().unwrap()[i].powi(2)).sum::<f64>()).sqrt() / 50.0;
        assert!((mean - exact[i]).abs() <= 2.0 * pooled, "player {i}: {mean} vs {}", exact[i]);
    }
}

#[test]
fn symmetric_hand_game_estimates_agree() {
    let g = CooperativeGame::from_values(2, vec![0.0, 1.0, 1.0, 3.0]);
    let s = shapley_sampled(|c| Ok(g.value(c)), 2, 101, 5).unwrap();
    let se = s.std_error.unwrap();
    assert!((s.values[0] - s.values[1]).abs() <= 2.0 * (se[0].powi(2) + se[1].powi(2)).sqrt() + 1e-12);
}

#[test]
fn sampled_capacity_game_is_close_to_exact() {
    let case = ieee33();
    let p0 = initial_point(&case);
    let req = OperatingPoint::new(p0.p + 0.9, p0.q + 0.5);
    let game = build_game(Metric::Capacity, &case, req, SwapPolicy::Allow, None).unwrap();
    let exact = shapley_exact(&game);
    let s = shapley_sampled(|c| Ok(game.value(c)), 4, 500, 2024).unwrap();
    let se = s.std_error.as_ref().unwrap();
    for i in 0..4 {
        assert!((s.values[i] - exact.values[i]).abs() <= 3.0 * se[i], "unit {i}");
    }
}

#[test]
fn capacity_game_is_monotone_and_efficient() {
    let case = ieee33();
    let p0 = initial_point(&case);
    for (dp, dq) in [(1.1, 0.7), (-1.4, 0.2), (0.3, -1.6)] {
        let req = OperatingPoint::new(p0.p + dp, p0.q + dq);
        let g = build_game(Metric::Capacity, &case, req, SwapPolicy::Allow, None).unwrap();
        for s in Coalition::all(4) {
            assert!(g.value(s) >= 0.0);
            for t in Coalition::all(4).filter(|t| s.is_subset_of(*t)) {
                assert!(g.value(s) <= g.value(t) + 1e-3, "{s} {t}");
            }
        }
        let total = shapley_exact(&g).total();
        assert!((total - g.value(Coalition::grand(4))).abs() <= 1e-9 * total);
    }
}

#[test]
fn low_magnitude_requests_split_evenly() {
    let case = ieee33();
    let p0 = initial_point(&case);
    for k in 0..8 {
        let a = std::f64::consts::FRAC_PI_4 * k as f64;
        let req = OperatingPoint::new(p0.p + 0.1 * a.cos(), p0.q + 0.1 * a.sin());
        let g = build_game(Metric::Capacity, &case, req, SwapPolicy::Allow, None).unwrap();
        for share in shapley_exact(&g).shares_pct() {
            assert!((share - 25.0).abs() <= 1.0, "{share}");
        }
    }
}

#[test]
fn zero_capability_unit_is_a_null_player() {
    let case = with_units(&[("E", 10, 0.0, 200.0)]);
    let p0 = initial_point(&case);
    let req = OperatingPoint::new(p0.p - 0.7, p0.q + 0.4);
    for metric in [Metric::Capacity, Metric::Surplus] {
        let g = build_game(metric, &case, req, SwapPolicy::Allow, None).unwrap();
        assert_eq!(shapley_exact(&g).values[4], 0.0, "{metric}");
    }
}

#[test]
fn ten_unit_game_evaluates_every_coalition() {
    let extra: Vec<(String, u32, f64, f64)> = [6u32, 9, 13, 20, 27, 30]
        .iter()
        .enumerate()
        .map(|(k, &bus)| (format!("U{k}"), bus, 0.1, 250.0 + 10.0 * k as f64))
        .collect();
    let refs: Vec<(&str, u32, f64, f64)> = extra.iter().map(|(a, b, c, d)| (a.as_str(), *b, *c, *d)).collect();
    let case = with_units(&refs);
    assert_eq!(case.n_units(), 10);
    let p0 = initial_point(&case);
    let req = OperatingPoint::new(p0.p - 0.05, p0.q);
    let g = build_game(Metric::Capacity, &case, req, SwapPolicy::Allow, None).unwrap();
    assert_eq!(g.values.len(), 1024);
    assert_eq!(g.values.iter().skip(1).filter(|v| **v > 0.0).count(), 1023);
    let sh = shapley_exact(&g);
    assert!((sh.total() - 0.05).abs() < 1e-9);
}

#[test]
fn feeder_end_units_add_little_consumption_capacity() {
    let case = ieee33();
    let p0 = initial_point(&case);
    let req = OperatingPoint::new(p0.p + 0.5, p0.q + 0.5);
    let v = |u: &str| {
        let c = Coalition::singleton(case.unit_index(u).unwrap());
        characteristic_value(Metric::Capacity, &case, c, req, SwapPolicy::Allow).unwrap()
    };
    let a = v("A");
    assert!(v("C") < a && v("D") < a);
}
