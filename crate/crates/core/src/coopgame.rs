//! Transferable-utility games over flexible units and their Shapley values.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dashmap::DashMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::coalition::Coalition;
use crate::net_model::{Case, OperatingPoint};
use crate::opf::{
    initial_point, max_reach_with, solve_dispatch, DispatchSolution, OpfOptions, SwapPolicy,
};

/// Requests closer than this to the initial point (MVA) are treated as empty.
const ZERO_REQUEST: f64 = 1e-12;
/// Largest player count for exact games.
pub const MAX_EXACT_PLAYERS: usize = 20;
pub const CACHE_ENV: &str = "FLEXCOOP_CACHE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Apparent flexible power delivered towards the request, MVA.
    Capacity,
    /// Minimum regulation cost at the delivered point, $/h.
    Cost,
    /// Tariff revenue minus regulation cost, $/h. Always evaluated without swaps.
    Surplus,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Capacity => "capacity",
            Metric::Cost => "cost",
            Metric::Surplus => "surplus",
        })
    }
}

impl FromStr for Metric {
    type Err = GameError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "capacity" => Ok(Metric::Capacity),
            "cost" => Ok(Metric::Cost),
            "surplus" => Ok(Metric::Surplus),
            _ => Err(GameError::UnknownMetric(s.to_string())),
        }
    }
}

impl Metric {
    /// Policy actually used for a requested one.
    pub fn effective_policy(self, policy: SwapPolicy) -> SwapPolicy {
        match self {
            Metric::Surplus => SwapPolicy::Forbid,
            _ => policy,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::Capacity => "MVA",
            _ => "$/h",
        }
    }
}

#[derive(Debug, Error)]
pub enum GameError {
    #[error("unknown metric `{0}` (expected capacity, cost or surplus)")]
    UnknownMetric(String),
    #[error("player {player} is already in coalition {coalition}")]
    PlayerInCoalition { player: usize, coalition: Coalition },
    #[error("no dispatch at the reach of coalition {coalition} ({reach:.6} MVA): {diagnostics}")]
    InconsistentReach {
        coalition: Coalition,
        reach: f64,
        diagnostics: String,
    },
    #[error("{0} players is too many for an exact game (limit {MAX_EXACT_PLAYERS})")]
    TooManyPlayers(usize),
    #[error("cache: {0}")]
    Cache(String),
}

/// Value of one coalition plus the dispatch that realizes it.
#[derive(Debug, Clone)]
pub struct CoalitionOutcome {
    pub value: f64,
    /// Distance (MVA) from the initial point actually delivered.
    pub delivered: f64,
    pub dispatch: Option<DispatchSolution>,
}

/// Evaluates `coalition` for the request and returns its dispatch too.
pub fn evaluate_coalition(
    metric: Metric,
    case: &Case,
    coalition: Coalition,
    request: OperatingPoint,
    policy: SwapPolicy,
) -> Result<CoalitionOutcome, GameError> {
    let policy = metric.effective_policy(policy);
    let p0 = initial_point(case);
    let (dp, dq) = (request.p - p0.p, request.q - p0.q);
    let t_req = dp.hypot(dq);
    if coalition.is_empty() || t_req <= ZERO_REQUEST {
        return Ok(CoalitionOutcome {
            value: 0.0,
            delivered: 0.0,
            dispatch: None,
        });
    }
    let direct = solve_dispatch(case, coalition, request, policy);
    let (t_ach, sol) = if direct.is_optimal() {
        (t_req, direct)
    } else {
        let opts = OpfOptions::default();
        let (t, sol) = max_reach_with(case, coalition, (dp, dq), policy, Some(t_req), &opts);
        if !sol.is_optimal() {
            return Err(GameError::InconsistentReach {
                coalition,
                reach: t,
                diagnostics: sol.diagnostics,
            });
        }
        (t, sol)
    };
    let value = match metric {
        Metric::Capacity => t_ach,
        Metric::Cost => sol.total_cost,
        Metric::Surplus => {
            let a = sol.achieved;
            case.tariff.revenue(a.p - p0.p, a.q - p0.q) - sol.total_cost
        }
    };
    Ok(CoalitionOutcome {
        value,
        delivered: t_ach,
        dispatch: Some(sol),
    })
}

/// Characteristic value of `coalition` for `request`.
pub fn characteristic_value(
    metric: Metric,
    case: &Case,
    coalition: Coalition,
    request: OperatingPoint,
    policy: SwapPolicy,
) -> Result<f64, GameError> {
    evaluate_coalition(metric, case, coalition, request, policy).map(|o| o.value)
}

/// Coalition values shared across threads and, optionally, across runs.
///
/// Values are stored as raw bit patterns so a reload is bit-exact.
#[derive(Debug, Default)]
pub struct ValueCache {
    map: DashMap<String, u64>,
    path: Option<PathBuf>,
}

impl ValueCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or starts) the cache file inside `dir`.
    pub fn open(dir: &Path) -> Result<Self, GameError> {
        let path = dir.join("coalition_values.json");
        let mut map = DashMap::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| GameError::Cache(e.to_string()))?;
            let stored: BTreeMap<String, u64> =
                serde_json::from_str(&text).map_err(|e| GameError::Cache(e.to_string()))?;
            map.extend(stored);
        }
        Ok(ValueCache {
            map,
            path: Some(path),
        })
    }

    /// Cache directory from the environment, else a folder in the temp dir.
    pub fn default_dir() -> PathBuf {
        std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("flexcoop-cache"))
    }

    pub fn key(
        case: &Case,
        metric: Metric,
        coalition: Coalition,
        request: OperatingPoint,
        policy: SwapPolicy,
    ) -> String {
        format!(
            "{}|{}|{}|{:016x}|{:016x}|{}",
            &case.fingerprint()[..16],
            metric,
            coalition.0,
            request.p.to_bits(),
            request.q.to_bits(),
            metric.effective_policy(policy)
        )
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.map.get(key).map(|v| f64::from_bits(*v))
    }

    pub fn insert(&self, key: String, value: f64) {
        self.map.insert(key, value.to_bits());
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Writes the cache file, if this cache has one.
    pub fn save(&self) -> Result<(), GameError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| GameError::Cache(e.to_string()))?;
        }
        let stored: BTreeMap<String, u64> =
            self.map.iter().map(|e| (e.key().clone(), *e.value())).collect();
        let text = serde_json::to_string(&stored).map_err(|e| GameError::Cache(e.to_string()))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, text).map_err(|e| GameError::Cache(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| GameError::Cache(e.to_string()))
    }
}

/// A fully tabulated game.
#[derive(Debug, Clone, Serialize)]
pub struct CooperativeGame {
    pub n_players: usize,
    pub metric: Metric,
    pub request: OperatingPoint,
    pub policy: SwapPolicy,
    /// Indexed by coalition bitmask; entry 0 is the empty coalition.
    pub values: Vec<f64>,
}

impl CooperativeGame {
    /// A game from explicit values (indexed by bitmask, `values[0]` ignored).
    pub fn from_values(n_players: usize, mut values: Vec<f64>) -> Self {
        assert_eq!(values.len(), 1 << n_players, "need one value per coalition");
        values[0] = 0.0;
        CooperativeGame {
            n_players,
            metric: Metric::Capacity,
            request: OperatingPoint::default(),
            policy: SwapPolicy::Allow,
            values,
        }
    }

    pub fn value(&self, c: Coalition) -> f64 {
        self.values[c.0 as usize]
    }

    pub fn grand(&self) -> Coalition {
        Coalition::grand(self.n_players)
    }
}

/// Tabulates all `2^n` coalition values, in parallel and through `cache`.
pub fn build_game(
    metric: Metric,
    case: &Case,
    request: OperatingPoint,
    policy: SwapPolicy,
    cache: Option<&ValueCache>,
) -> Result<CooperativeGame, GameError> {
    let n = case.n_units();
    if n > MAX_EXACT_PLAYERS {
        return Err(GameError::TooManyPlayers(n));
    }
    let policy = metric.effective_policy(policy);
    let values = Coalition::all(n)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|c| cached_value(metric, case, c, request, policy, cache))
        .collect::<Result<Vec<f64>, GameError>>()?;
    Ok(CooperativeGame {
        n_players: n,
        metric,
        request,
        policy,
        values,
    })
}

/// `characteristic_value` behind an optional cache.
pub fn cached_value(
    metric: Metric,
    case: &Case,
    coalition: Coalition,
    request: OperatingPoint,
    policy: SwapPolicy,
    cache: Option<&ValueCache>,
) -> Result<f64, GameError> {
    if coalition.is_empty() {
        return Ok(0.0);
    }
    let Some(cache) = cache else {
        return characteristic_value(metric, case, coalition, request, policy);
    };
    let key = ValueCache::key(case, metric, coalition, request, policy);
    if let Some(v) = cache.get(&key) {
        return Ok(v);
    }
    let v = characteristic_value(metric, case, coalition, request, policy)?;
    cache.insert(key, v);
    Ok(v)
}

/// `v(S ∪ {i}) − v(S)`.
pub fn marginal_contribution(
    game: &CooperativeGame,
    coalition: Coalition,
    player: usize,
) -> Result<f64, GameError> {
    if coalition.contains(player) {
        return Err(GameError::PlayerInCoalition { player, coalition });
    }
    Ok(game.value(coalition.with(player)) - game.value(coalition))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapleyAllocation {
    pub values: Vec<f64>,
    pub method: ShapleyMethod,
    pub samples: Option<usize>,
    pub std_error: Option<Vec<f64>>,
}

impl ShapleyAllocation {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Shares in percent of the total; zeros when the total vanishes.
    pub fn shares_pct(&self) -> Vec<f64> {
        let total = self.total();
        self.values
            .iter()
            .map(|v| if total.abs() > 0.0 { 100.0 * v / total } else { 0.0 })
            .collect()
    }
}

/// Exact Shapley value by the subset formula.
pub fn shapley_exact(game: &CooperativeGame) -> ShapleyAllocation {
    let n = game.n_players;
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();
    let values = (0..n)
        .map(|i| {
            let mut sum = 0.0;
            for c in Coalition::all(n).filter(|c| !c.contains(i)) {
                sum += weight[c.len()] * (game.value(c.with(i)) - game.value(c));
            }
            sum
        })
        .collect();
    ShapleyAllocation {
        values,
        method: ShapleyMethod::Exact,
        samples: None,
        std_error: None,
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Permutation-sampling estimate of the Shapley value.
///
/// Orderings are drawn uniformly at random, except that a budget that is a
/// whole multiple of `n!` enumerates every ordering equally often (and then
/// reports zero standard error). Distinct coalitions are evaluated once each,
/// in parallel.
pub fn shapley_sampled<F>(
    value: F,
    n_players: usize,
    n_samples: usize,
    seed: u64,
) -> Result<ShapleyAllocation, GameError>
where
    F: Fn(Coalition) -> Result<f64, GameError> + Sync,
{
    assert!(n_samples >= 1, "at least one sample required");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(n_samples);
    let enumerated = n_players <= 8 && n_samples % (1..=n_players).product::<usize>() == 0;
    if enumerated {
        let all = permutations(n_players);
        for _ in 0..n_samples / all.len() {
            orders.extend(all.iter().cloned());
        }
    }
    let base: Vec<usize> = (0..n_players).collect();
    while orders.len() < n_samples {
        let mut p = base.clone();
        p.shuffle(&mut rng);
        orders.push(p);
    }

    let mut needed: Vec<Coalition> = orders
        .iter()
        .flat_map(|p| {
            p.iter()
                .scan(Coalition::EMPTY, |c, &i| {
                    *c = c.with(i);
                    Some(*c)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    needed.sort_unstable();
    needed.dedup();
    let memo: HashMap<Coalition, f64> = needed
        .into_par_iter()
        .map(|c| value(c).map(|v| (c, v)))
        .collect::<Result<_, _>>()?;
    let v = |c: Coalition| if c.is_empty() { 0.0 } else { memo[&c] };

    let mut sum = vec![0.0; n_players];
    let mut sum_sq = vec![0.0; n_players];
    for p in &orders {
        let mut c = Coalition::EMPTY;
        for &i in p {
            let next = c.with(i);
            let mc = v(next) - v(c);
            sum[i] += mc;
            sum_sq[i] += mc * mc;
            c = next;
        }
    }
    let m = orders.len() as f64;
    let values: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let std_error = (0..n_players)
        .map(|i| {
            if enumerated || orders.len() < 2 {
                return 0.0;
            }
            let var = ((sum_sq[i] - m * values[i] * values[i]) / (m - 1.0)).max(0.0);
            (var / m).sqrt()
        })
        .collect();
    Ok(ShapleyAllocation {
        values,
        method: ShapleyMethod::Sampled,
        samples: Some(orders.len()),
        std_error: Some(std_error),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_model::builtin_case;

    fn hand_game() -> CooperativeGame {
        CooperativeGame::from_values(2, vec![0.0, 1.0, 1.0, 3.0])
    }

    #[test]
    fn hand_game_marginals_and_shapley() {
        let g = hand_game();
        assert_eq!(marginal_contribution(&g, Coalition::EMPTY, 0).unwrap(), 1.0);
        assert_eq!(marginal_contribution(&g, Coalition::singleton(1), 0).unwrap(), 2.0);
        assert!(marginal_contribution(&g, Coalition::singleton(0), 0).is_err());
        assert_eq!(shapley_exact(&g).values, vec![1.5, 1.5]);
    }

    #[test]
    fn full_budget_reproduces_exact() {
        let vals = vec![0.0, 1.0, 2.0, 4.0, 0.5, 2.0, 3.0, 7.0];
        let g = CooperativeGame::from_values(3, vals);
        let exact = shapley_exact(&g);
        let s = shapley_sampled(|c| Ok(g.value(c)), 3, 6, 11).unwrap();
        for (a, b) in exact.values.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let twice = shapley_sampled(|c| Ok(g.value(c)), 3, 12, 11).unwrap();
        assert!((twice.values[2] - exact.values[2]).abs() < 1e-12);
        assert_eq!(twice.std_error, Some(vec![0.0; 3]));
        let random = shapley_sampled(|c| Ok(g.value(c)), 3, 7, 11).unwrap();
        assert!(random.std_error.unwrap().iter().any(|&e| e > 0.0));
    }

    #[test]
    fn sampling_is_seeded() {
        let g = CooperativeGame::from_values(3, vec![0.0, 1.0, 2.0, 4.0, 0.5, 2.0, 3.0, 7.0]);
        let a = shapley_sampled(|c| Ok(g.value(c)), 3, 5, 3).unwrap();
        let b = shapley_sampled(|c| Ok(g.value(c)), 3, 5, 3).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.samples, Some(5));
    }

    #[test]
    fn metric_round_trip() {
        for m in [Metric::Capacity, Metric::Cost, Metric::Surplus] {
            assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
        }
        assert!("value".parse::<Metric>().is_err());
        assert_eq!(Metric::Surplus.effective_policy(SwapPolicy::Allow), SwapPolicy::Forbid);
    }

    #[test]
    fn request_at_initial_point_is_worthless() {
        let case = builtin_case("ieee33").unwrap();
        let g = build_game(Metric::Capacity, &case, initial_point(&case), SwapPolicy::Allow, None).unwrap();
        assert_eq!(g.values.len(), 16);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grand_coalition_delivers_the_request() {
        let case = builtin_case("ieee33").unwrap();
        let p0 = initial_point(&case);
        let req = OperatingPoint::new(p0.p - 0.8, p0.q + 0.3);
        let t_req = (req.p - p0.p).hypot(req.q - p0.q);
        let v = characteristic_value(Metric::Capacity, &case, Coalition::grand(4), req, SwapPolicy::Allow).unwrap();
        assert_eq!(v, t_req);
        let single = characteristic_value(Metric::Capacity, &case, Coalition::singleton(0), req, SwapPolicy::Allow).unwrap();
        assert!(single < t_req && single > 0.3);
    }

    #[test]
    fn consumption_capacity_is_lower_at_feeder_ends() {
        let case = builtin_case("ieee33").unwrap();
        let p0 = initial_point(&case);
        let req = OperatingPoint::new(p0.p + 0.6, p0.q + 0.6);
        let v = |u: &str| {
            let c = Coalition::singleton(case.unit_index(u).unwrap());
            characteristic_value(Metric::Capacity, &case, c, req, SwapPolicy::Allow).unwrap()
        };
        let a = v("A");
        assert!(v("C") < a && v("D") < a);
    }

    #[test]
    fn surplus_and_cost_are_consistent() {
        let case = builtin_case("ieee33").unwrap();
        let p0 = initial_point(&case);
        let req = OperatingPoint::new(p0.p - 0.2, p0.q - 0.1);
        let c = Coalition::grand(4);
        let cost = characteristic_value(Metric::Cost, &case, c, req, SwapPolicy::Forbid).unwrap();
        let surplus = characteristic_value(Metric::Surplus, &case, c, req, SwapPolicy::Allow).unwrap();
        let revenue = case.tariff.revenue(0.2, 0.1);
        assert!((revenue - cost - surplus).abs() < 1e-6, "{revenue} {cost} {surplus}");
        assert!(surplus > 0.0);
    }

    #[test]
    fn cache_round_trips_bits() {
        let dir = tempfile::tempdir().unwrap();
        let case = builtin_case("motivating3").unwrap();
        let req = OperatingPoint::new(0.1, 0.2);
        let key = ValueCache::key(&case, Metric::Cost, Coalition::grand(2), req, SwapPolicy::Allow);
        let cache = ValueCache::open(dir.path()).unwrap();
        cache.insert(key.clone(), 0.1 + 0.2);
        cache.save().unwrap();
        let again = ValueCache::open(dir.path()).unwrap();
        assert_eq!(again.get(&key), Some(0.1 + 0.2));
        assert_eq!(again.len(), 1);
    }

    #[test]
    fn cached_game_matches_uncached() {
        let case = builtin_case("motivating3").unwrap();
        let p0 = initial_point(&case);
        let req = OperatingPoint::new(p0.p - 0.3, p0.q);
        let cache = ValueCache::in_memory();
        let a = build_game(Metric::Cost, &case, req, SwapPolicy::Allow, Some(&cache)).unwrap();
        assert_eq!(cache.len(), 3);
        let b = build_game(Metric::Cost, &case, req, SwapPolicy::Allow, Some(&cache)).unwrap();
        let c = build_game(Metric::Cost, &case, req, SwapPolicy::Allow, None).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values, c.values);
    }
}
