use flexcoop::coalition::Coalition;
use flexcoop::coopgame::{build_game, Metric};
use flexcoop::flexarea::{trace_area, FlexibilityArea};
use flexcoop::net_model::{builtin_case, Case};
use flexcoop::opf::SwapPolicy;
use flexcoop::pricing::{payments_costmin, payments_shapley, sample_requests, FlexRequest, PricingError};

fn ieee33() -> Case {
    builtin_case("ieee33").unwrap()
}

fn grand_forbid(case: &Case) -> FlexibilityArea {
    trace_area(case, Coalition::grand(case.n_units()), 36, SwapPolicy::Forbid)
}

#[test]
fn rejection_sampling_narrows_the_spread() {
    let case = ieee33();
    let area = grand_forbid(&case);
    let sigma = 1.5;
    let reqs = sample_requests(&case, &area, 300, sigma, 17).unwrap();
    let sd = |xs: Vec<f64>| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    let sp = sd(reqs.iter().map(|r| r.delta_p).collect());
    let sq = sd(reqs.iter().map(|r| r.delta_q).collect());
    assert!(sp < sigma && sq < sigma, "{sp} {sq}");
    assert!(sp > 0.3 && sq > 0.3, "{sp} {sq}");
}

#[test]
fn sampling_is_reproducible_and_seed_dependent() {
    let case = ieee33();
    let area = grand_forbid(&case);
    let a = sample_requests(&case, &area, 20, 0.3, 5).unwrap();
    assert_eq!(a, sample_requests(&case, &area, 20, 0.3, 5).unwrap());
    assert_ne!(a, sample_requests(&case, &area, 20, 0.3, 6).unwrap());
    // Slots are independent streams: a shorter run is a prefix.
    assert_eq!(a[..7], sample_requests(&case, &area, 7, 0.3, 5).unwrap()[..]);
}

#[test]
fn bad_sigma_and_unreachable_requests_are_errors() {
    let case = ieee33();
    let area = grand_forbid(&case);
    assert!(matches!(sample_requests(&case, &area, 1, 0.0, 1), Err(PricingError::BadSigma(_))));
    assert!(matches!(sample_requests(&case, &area, 1, 1e3, 1), Err(PricingError::RedrawCap { slot: 0 })));
    let far = FlexRequest { delta_p: 30.0, delta_q: 0.0 };
    assert!(matches!(payments_costmin(&case, far), Err(PricingError::Infeasible { .. })));
}

#[test]
fn costmin_pays_exactly_the_dispatch_cost() {
    let case = ieee33();
    let area = grand_forbid(&case);
    for r in sample_requests(&case, &area, 40, 0.4, 99).unwrap() {
        let rec = payments_costmin(&case, r).unwrap();
        assert!((rec.total() - rec.cost).abs() <= 1e-9 * rec.cost.max(1.0));
        let grand = build_game(Metric::Cost, &case, r.target(&case), SwapPolicy::Forbid, None).unwrap();
        assert!((rec.cost - grand.value(grand.grand())).abs() <= 1e-6 * rec.cost.max(1.0));
        for (u, (pay, del)) in case.units.iter().zip(rec.payments.iter().zip(&rec.delivered)) {
            assert!(*pay >= 0.0);
            assert!(*pay <= u.cost_p.max(u.cost_q) * del * 2f64.sqrt() + 1e-9);
        }
        assert!(rec.dso_surplus >= -1e-9 * rec.revenue.max(1.0), "{r:?}: {}", rec.dso_surplus);
    }
}

#[test]
fn shapley_payments_exhaust_revenue_and_cover_costs() {
    let case = ieee33();
    let area = grand_forbid(&case);
    for r in sample_requests(&case, &area, 12, 0.4, 3).unwrap() {
        let cm = payments_costmin(&case, r).unwrap();
        let sh = payments_shapley(&case, r).unwrap();
        assert!((sh.total() - sh.revenue).abs() <= 1e-6 * sh.revenue.max(1.0));
        assert!(sh.dso_surplus.abs() <= 1e-6 * sh.revenue.max(1.0));
        for (k, (s, c)) in sh.payments.iter().zip(&cm.payments).enumerate() {
            if cm.delivered[k] <= 1e-6 {
                assert!(c.abs() <= 1e-9);
            }
            assert!(*s >= -1e-6, "unit {k}: {s}");
        }
    }
}

#[test]
fn zero_request_pays_nothing() {
    let case = ieee33();
    let r = FlexRequest { delta_p: 0.0, delta_q: 0.0 };
    for rec in [payments_costmin(&case, r).unwrap(), payments_shapley(&case, r).unwrap()] {
        assert!(rec.payments.iter().all(|p| p.abs() <= 1e-9), "{:?}", rec.payments);
        assert!(rec.revenue.abs() <= 1e-9);
    }
}
