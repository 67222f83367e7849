//! `flexcoop` command-line tool.

mod output;

use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use flexcoop::coalition::Coalition;
use flexcoop::coopgame::{
    build_game, cached_value, evaluate_coalition, shapley_exact, shapley_sampled, Metric,
    ShapleyAllocation, ValueCache,
};
use flexcoop::flexarea::{coalition_areas, trace_area, FlexibilityArea, Vertex};
use flexcoop::net_model::{resolve_case, Case, OperatingPoint};
use flexcoop::opf::{initial_point, solve_dispatch, SwapPolicy};
use flexcoop::powerflow::{check_feasibility, solve_powerflow};
use flexcoop::pricing::run_payment_study;
use flexcoop::sweep::{sweep, PointStatus, SweepMode};

use output::{area_svg, num, OutPaths, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "flexcoop", version, about = "Trace, rank and price DER flexibility in radial distribution networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Built-in case name (ieee33, motivating3) or path to a case file.
    #[arg(long, global = true, default_value = "ieee33")]
    case: String,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output prefix; files are written as <prefix>_<name>. A trailing `/` makes it a directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Swap {
    Allow,
    Forbid,
}

impl From<Swap> for SwapPolicy {
    fn from(s: Swap) -> Self {
        match s {
            Swap::Allow => SwapPolicy::Allow,
            Swap::Forbid => SwapPolicy::Forbid,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    Capacity,
    Cost,
    Surplus,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Capacity => Metric::Capacity,
            MetricArg::Cost => Metric::Cost,
            MetricArg::Surplus => Metric::Surplus,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Method {
    Exact,
    Sampled,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    CostminShare,
    ShapleyCapacity,
    ShapleySurplus,
}

impl From<ModeArg> for SweepMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::CostminShare => SweepMode::CostminShare,
            ModeArg::ShapleyCapacity => SweepMode::ShapleyCapacity,
            ModeArg::ShapleySurplus => SweepMode::ShapleySurplus,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the power flow at given unit setpoints (default: initial states).
    Powerflow {
        /// Unit setpoint as UNIT=P,Q in MW,MVAr; repeatable.
        #[arg(long = "setpoint", value_name = "UNIT=P,Q")]
        setpoints: Vec<String>,
    },
    /// Trace the flexibility area of a coalition.
    Area {
        /// Comma-separated unit ids or `all`.
        #[arg(long, default_value = "all")]
        coalition: String,
        /// Trace every nonempty coalition instead.
        #[arg(long, conflicts_with = "coalition")]
        all_coalitions: bool,
        #[arg(long, default_value_t = 72)]
        dirs: usize,
        #[arg(long, value_enum, default_value_t = Swap::Allow)]
        swap: Swap,
    },
    /// Cheapest dispatch of a coalition for an interface target.
    Dispatch {
        #[arg(long, default_value = "all")]
        coalition: String,
        /// Target interface consumption, MW.
        #[arg(long, allow_hyphen_values = true)]
        target_p: f64,
        /// Target interface consumption, MVAr.
        #[arg(long, allow_hyphen_values = true)]
        target_q: f64,
        #[arg(long, value_enum, default_value_t = Swap::Allow)]
        swap: Swap,
    },
    /// Shapley allocation of a coalition game for one request.
    Shapley {
        #[arg(long, value_enum, default_value_t = MetricArg::Capacity)]
        metric: MetricArg,
        /// Requested change of interface consumption from the initial point, MW.
        #[arg(long, allow_hyphen_values = true)]
        target_p: f64,
        /// Requested change of interface consumption from the initial point, MVAr.
        #[arg(long, allow_hyphen_values = true)]
        target_q: f64,
        #[arg(long, value_enum, default_value_t = Method::Exact)]
        method: Method,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Swap::Allow)]
        swap: Swap,
        /// Do not read or write the coalition-value cache.
        #[arg(long)]
        no_cache: bool,
    },
    /// Price random requests under cost-min and Shapley-surplus schemes.
    SimulatePayments {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Standard deviation of each request axis, MW / MVAr.
        #[arg(long, default_value_t = 0.6)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Directions used to trace the no-swap area.
        #[arg(long, default_value_t = 72)]
        dirs: usize,
        #[arg(long)]
        no_cache: bool,
    },
    /// Per-unit shares over a grid covering the grand-coalition area.
    Sweep {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.03)]
        step: f64,
        #[arg(long, value_enum, default_value_t = Swap::Allow)]
        swap: Swap,
        #[arg(long)]
        no_cache: bool,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// The requested operating point or dispatch does not exist.
    Infeasible(String),
    /// Bad input, schema errors, I/O.
    Input(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Infeasible(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.to_string())
    }
}

struct Ctx {
    case: Case,
    global: Global,
    started: Instant,
    subcommand: &'static str,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.global.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn out(&self) -> Result<OutPaths, Failure> {
        let prefix = self.global.out.clone().unwrap_or_else(|| self.subcommand.to_string());
        Ok(OutPaths::new(&prefix)?)
    }

    fn manifest(&self, args: Vec<String>, parameters: serde_json::Value, seeds: Vec<u64>, warnings: Vec<String>) -> RunManifest {
        let mut full = vec![self.subcommand.to_string(), "--case".into(), self.global.case.clone()];
        full.extend(args);
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            case: self.case.name.clone(),
            case_fingerprint: self.case.fingerprint(),
            subcommand: self.subcommand.to_string(),
            args: full,
            parameters,
            seeds,
            duration_s: 0.0,
            warnings,
            outputs: Vec::new(),
        }
    }

    fn cache(&self, disabled: bool) -> Result<Option<ValueCache>, Failure> {
        if disabled {
            return Ok(None);
        }
        Ok(Some(ValueCache::open(&ValueCache::default_dir()).map_err(|e| Failure::Input(e.to_string()))?))
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Powerflow { .. } => "powerflow",
        Command::Area { .. } => "area",
        Command::Dispatch { .. } => "dispatch",
        Command::Shapley { .. } => "shapley",
        Command::SimulatePayments { .. } => "simulate-payments",
        Command::Sweep { .. } => "sweep",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.global.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Infeasible(msg) | Failure::Input(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(j) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Failure::Input(e.to_string()))?;
    }
    let case = resolve_case(&cli.global.case)?;
    let ctx = Ctx {
        case,
        global: cli.global,
        started: Instant::now(),
        subcommand: subcommand_name(&cli.command),
    };
    match cli.command {
        Command::Powerflow { setpoints } => cmd_powerflow(&ctx, &setpoints),
        Command::Area {
            coalition,
            all_coalitions,
            dirs,
            swap,
        } => cmd_area(&ctx, &coalition, all_coalitions, dirs, swap.into()),
        Command::Dispatch {
            coalition,
            target_p,
            target_q,
            swap,
        } => cmd_dispatch(&ctx, &coalition, OperatingPoint::new(target_p, target_q), swap.into()),
        Command::Shapley {
            metric,
            target_p,
            target_q,
            method,
            samples,
            seed,
            swap,
            no_cache,
        } => cmd_shapley(
            &ctx,
            metric.into(),
            (target_p, target_q),
            method,
            samples,
            seed,
            swap.into(),
            no_cache,
        ),
        Command::SimulatePayments {
            count,
            sigma,
            seed,
            dirs,
            no_cache,
        } => cmd_payments(&ctx, count, sigma, seed, dirs, no_cache),
        Command::Sweep {
            mode,
            step,
            swap,
            no_cache,
        } => cmd_sweep(&ctx, mode.into(), step, swap.into(), no_cache),
    }
}

fn parse_coalition(case: &Case, spec: &str) -> Result<Coalition, Failure> {
    Coalition::parse(case, spec).map_err(Failure::Input)
}

fn cmd_powerflow(ctx: &Ctx, specs: &[String]) -> Result<(), Failure> {
    let case = &ctx.case;
    let mut sp = case.initial_setpoints();
    for s in specs {
        let bad = || Failure::Input(format!("bad setpoint `{s}` (expected UNIT=P,Q)"));
        let (unit, values) = s.split_once('=').ok_or_else(bad)?;
        let (p, q) = values.split_once(',').ok_or_else(bad)?;
        let i = case
            .unit_index(unit.trim())
            .ok_or_else(|| Failure::Input(format!("unknown unit `{unit}`")))?;
        sp[i] = (p.trim().parse().map_err(|_| bad())?, q.trim().parse().map_err(|_| bad())?);
    }
    let pf = solve_powerflow(case, &sp);
    let report = check_feasibility(case, &pf, 1e-6).map_err(|e| Failure::Infeasible(e.to_string()))?;
    let mut out = ctx.out()?;
    let net = &case.network;
    out.csv(
        "buses.csv",
        &["bus", "v_pu"],
        net.buses
            .iter()
            .enumerate()
            .map(|(i, b)| vec![b.id.to_string(), num(pf.voltage(i))]),
    )?;
    out.csv(
        "branches.csv",
        &["branch", "from", "to", "p_mw", "q_mvar", "loading"],
        net.branches.iter().enumerate().map(|(k, br)| {
            let s = pf.branch_p[k].hypot(pf.branch_q[k]);
            vec![
                (k + 1).to_string(),
                br.from_bus.to_string(),
                br.to_bus.to_string(),
                num(pf.branch_p[k]),
                num(pf.branch_q[k]),
                br.thermal_limit.map(|l| num(s / l)).unwrap_or_default(),
            ]
        }),
    )?;
    let (imin, vmin) = pf.min_voltage();
    ctx.say(format!(
        "P_ref = {} MW, Q_ref = {} MVAr, min voltage {} p.u. at bus {}, feasible: {}",
        num(pf.p_ref),
        num(pf.q_ref),
        num(vmin),
        net.buses[imin].id,
        report.feasible
    ));
    let warnings = report
        .violations
        .iter()
        .map(|v| format!("{:?} at {}: {}", v.kind, v.element, num(v.magnitude)))
        .collect();
    let mut args = Vec::new();
    for s in specs {
        args.extend(["--setpoint".to_string(), s.clone()]);
    }
    ctx.manifest(args, json!({ "setpoints": sp }), vec![], warnings)
        .finish(&mut out, ctx.started.elapsed())?;
    Ok(())
}

fn vertex_rows(ring: &[Vertex]) -> impl Iterator<Item = Vec<String>> + '_ {
    ring.iter().map(|v| vec![num(v.theta_deg), num(v.p), num(v.q)])
}

fn cmd_area(ctx: &Ctx, coalition: &str, all: bool, dirs: usize, policy: SwapPolicy) -> Result<(), Failure> {
    let case = &ctx.case;
    if dirs < 8 {
        return Err(Failure::Input("--dirs must be at least 8".into()));
    }
    let mut out = ctx.out()?;
    let areas: Vec<FlexibilityArea> = if all {
        coalition_areas(case, dirs, policy).into_values().collect()
    } else {
        vec![trace_area(case, parse_coalition(case, coalition)?, dirs, policy)]
    };
    let mut warnings = Vec::new();
    if all {
        out.csv(
            "vertices.csv",
            &["coalition", "theta_deg", "p_mw", "q_mvar"],
            areas.iter().flat_map(|a| {
                let label = a.coalition.label(case);
                vertex_rows(&a.vertices).map(move |mut r| {
                    r.insert(0, label.clone());
                    r
                })
            }),
        )?;
    } else {
        out.csv("vertices.csv", &["theta_deg", "p_mw", "q_mvar"], vertex_rows(&areas[0].vertices))?;
    }
    if policy == SwapPolicy::Forbid {
        out.csv(
            "components.csv",
            &["coalition", "pattern", "theta_deg", "p_mw", "q_mvar"],
            areas.iter().flat_map(|a| {
                let label = a.coalition.label(case);
                a.components.iter().zip(&a.component_labels).flat_map(move |(ring, pat)| {
                    let label = label.clone();
                    vertex_rows(ring).map(move |mut r| {
                        r.splice(0..0, [label.clone(), pat.clone()]);
                        r
                    })
                })
            }),
        )?;
    }
    let rings: Vec<(String, Vec<Vertex>)> = if !all && policy == SwapPolicy::Forbid {
        areas[0]
            .component_labels
            .iter()
            .cloned()
            .zip(areas[0].components.iter().cloned())
            .collect()
    } else {
        areas.iter().map(|a| (a.coalition.label(case), a.vertices.clone())).collect()
    };
    out.text("area.svg", &area_svg(&rings, initial_point(case)))?;
    for a in &areas {
        warnings.extend(a.warnings.iter().cloned());
        let (p_lo, p_hi, q_lo, q_hi) = a.bounds();
        ctx.say(format!(
            "{}: {} vertices, P_ref [{}, {}] MW, Q_ref [{}, {}] MVAr",
            a.coalition.label(case),
            a.boundary().len(),
            num(p_lo),
            num(p_hi),
            num(q_lo),
            num(q_hi)
        ));
    }
    let mut args = vec!["--dirs".into(), dirs.to_string(), "--swap".into(), policy.to_string()];
    if all {
        args.push("--all-coalitions".into());
    } else {
        args.extend(["--coalition".into(), coalition.to_string()]);
    }
    ctx.manifest(
        args,
        json!({ "coalition": if all { "each".to_string() } else { coalition.to_string() }, "dirs": dirs, "swap": policy }),
        vec![],
        warnings,
    )
    .finish(&mut out, ctx.started.elapsed())?;
    Ok(())
}

fn cmd_dispatch(ctx: &Ctx, coalition: &str, target: OperatingPoint, policy: SwapPolicy) -> Result<(), Failure> {
    let case = &ctx.case;
    let c = parse_coalition(case, coalition)?;
    let sol = solve_dispatch(case, c, target, policy);
    let mut out = ctx.out()?;
    out.text("solution.json", &serde_json::to_string_pretty(&sol).map_err(|e| Failure::Input(e.to_string()))?)?;
    out.csv(
        "regulations.csv",
        &["unit", "p_up_mw", "p_down_mw", "q_up_mvar", "q_down_mvar", "delta_p_mw", "delta_q_mvar", "apparent_mva"],
        sol.regulations.iter().map(|r| {
            vec![
                r.unit.clone(),
                num(r.p_up),
                num(r.p_down),
                num(r.q_up),
                num(r.q_down),
                num(r.delta_p()),
                num(r.delta_q()),
                num(r.apparent()),
            ]
        }),
    )?;
    ctx.say(format!(
        "status: {:?}\nachieved: P_ref = {} MW, Q_ref = {} MVAr\ntotal_cost: {} $/h\nswap_active_p: {}\nswap_active_q: {}",
        sol.status,
        num(sol.achieved.p),
        num(sol.achieved.q),
        num(sol.total_cost),
        sol.swap_active_p,
        sol.swap_active_q
    ));
    for r in &sol.regulations {
        ctx.say(format!("  {}: dP = {} MW, dQ = {} MVAr", r.unit, num(r.delta_p()), num(r.delta_q())));
    }
    let warnings = if sol.is_optimal() { vec![] } else { vec![sol.diagnostics.clone()] };
    ctx.manifest(
        vec![
            "--coalition".into(),
            coalition.to_string(),
            "--target-p".into(),
            target.p.to_string(),
            "--target-q".into(),
            target.q.to_string(),
            "--swap".into(),
            policy.to_string(),
        ],
        json!({ "coalition": coalition, "target_p": target.p, "target_q": target.q, "swap": policy }),
        vec![],
        warnings,
    )
    .finish(&mut out, ctx.started.elapsed())?;
    if sol.is_optimal() {
        Ok(())
    } else {
        Err(Failure::Infeasible(format!(
            "target ({} MW, {} MVAr) is not reachable by {}: {:?} {}",
            num(target.p),
            num(target.q),
            c.label(case),
            sol.status,
            sol.diagnostics
        )))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_shapley(
    ctx: &Ctx,
    metric: Metric,
    delta: (f64, f64),
    method: Method,
    samples: usize,
    seed: u64,
    policy: SwapPolicy,
    no_cache: bool,
) -> Result<(), Failure> {
    let case = &ctx.case;
    let n = case.n_units();
    let p0 = initial_point(case);
    let request = OperatingPoint::new(p0.p + delta.0, p0.q + delta.1);
    if method == Method::Sampled && samples == 0 {
        return Err(Failure::Input("--samples must be at least 1".into()));
    }
    let grand = Coalition::grand(n);
    let policy = metric.effective_policy(policy);
    let probe = solve_dispatch(case, grand, request, policy);
    if !probe.is_optimal() {
        return Err(Failure::Infeasible(format!(
            "request ({} MW, {} MVAr) from the initial point is not reachable by the grand coalition under policy {policy}",
            num(delta.0),
            num(delta.1)
        )));
    }
    let cache = ctx.cache(no_cache)?;
    let (alloc, table): (ShapleyAllocation, Vec<(Coalition, f64)>) = match method {
        Method::Exact => {
            let game = build_game(metric, case, request, policy, cache.as_ref())
                .map_err(|e| Failure::Infeasible(e.to_string()))?;
            let table = Coalition::all(n).map(|c| (c, game.value(c))).collect();
            (shapley_exact(&game), table)
        }
        Method::Sampled => {
            let oracle = |c: Coalition| cached_value(metric, case, c, request, policy, cache.as_ref());
            let alloc = shapley_sampled(oracle, n, samples, seed).map_err(|e| Failure::Infeasible(e.to_string()))?;
            let mut table: Vec<(Coalition, f64)> = Vec::new();
            if let Some(cache) = &cache {
                for c in Coalition::all(n) {
                    let key = ValueCache::key(case, metric, c, request, policy);
                    if let Some(v) = cache.get(&key) {
                        table.push((c, v));
                    }
                }
            }
            if table.is_empty() || table[0].0 != Coalition::EMPTY {
                table.insert(0, (Coalition::EMPTY, 0.0));
            }
            (alloc, table)
        }
    };
    if let Some(cache) = &cache {
        cache.save().map_err(|e| Failure::Input(e.to_string()))?;
    }
    let mut out = ctx.out()?;
    let shares = alloc.shares_pct();
    out.csv(
        "allocation.csv",
        &["unit", "value", "share_pct", "std_error"],
        case.units.iter().enumerate().map(|(i, u)| {
            vec![
                u.id.clone(),
                num(alloc.values[i]),
                num(shares[i]),
                alloc.std_error.as_ref().map(|s| num(s[i])).unwrap_or_default(),
            ]
        }),
    )?;
    out.csv(
        "values.csv",
        &["coalition", "mask", "value"],
        table.iter().map(|(c, v)| vec![c.label(case), c.0.to_string(), num(*v)]),
    )?;
    let grand_value = evaluate_coalition(metric, case, grand, request, policy)
        .map(|o| o.value)
        .unwrap_or(f64::NAN);
    ctx.say(format!(
        "{} game, v(N) = {} {} ({:?})",
        metric,
        num(grand_value),
        metric.unit(),
        alloc.method
    ));
    for (i, u) in case.units.iter().enumerate() {
        ctx.say(format!("  {}: {} ({}%)", u.id, num(alloc.values[i]), num(shares[i])));
    }
    let mut args = vec![
        "--metric".into(),
        metric.to_string(),
        "--target-p".into(),
        delta.0.to_string(),
        "--target-q".into(),
        delta.1.to_string(),
        "--method".into(),
        format!("{method:?}").to_lowercase(),
        "--samples".into(),
        samples.to_string(),
        "--seed".into(),
        seed.to_string(),
        "--swap".into(),
        policy.to_string(),
    ];
    if no_cache {
        args.push("--no-cache".into());
    }
    let seeds = if method == Method::Sampled { vec![seed] } else { vec![] };
    ctx.manifest(
        args,
        json!({ "metric": metric, "delta_p": delta.0, "delta_q": delta.1, "p_ref": request.p, "q_ref": request.q, "method": format!("{method:?}").to_lowercase(),
                "samples": samples, "swap": policy, "cost_game_note": if metric == Metric::Cost { "lower is better; Shapley applied to raw costs" } else { "" } }),
        seeds,
        vec![],
    )
    .finish(&mut out, ctx.started.elapsed())?;
    Ok(())
}

fn cmd_payments(ctx: &Ctx, count: usize, sigma: f64, seed: u64, dirs: usize, no_cache: bool) -> Result<(), Failure> {
    let case = &ctx.case;
    if dirs < 8 {
        return Err(Failure::Input("--dirs must be at least 8".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Failure::Input(format!("--sigma must be positive, got {sigma}")));
    }
    let area = trace_area(case, Coalition::grand(case.n_units()), dirs, SwapPolicy::Forbid);
    let cache = ctx.cache(no_cache)?;
    let rep = run_payment_study(case, &area, count, sigma, seed, cache.as_ref()).map_err(|e| Failure::Infeasible(e.to_string()))?;
    if let Some(cache) = &cache {
        cache.save().map_err(|e| Failure::Input(e.to_string()))?;
    }
    let mut out = ctx.out()?;
    let mut header = vec!["request".to_string(), "delta_p".into(), "delta_q".into()];
    header.extend(rep.units.iter().map(|u| format!("pay_{u}")));
    header.extend(["revenue".into(), "cost".into(), "dso_surplus".into()]);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    for (name, recs) in [("costmin.csv", &rep.costmin), ("shapley.csv", &rep.shapley)] {
        out.csv(
            name,
            &header,
            recs.iter().enumerate().map(|(k, r)| {
                let mut row = vec![k.to_string(), num(r.request.delta_p), num(r.request.delta_q)];
                row.extend(r.payments.iter().map(|&p| num(p)));
                row.extend([num(r.revenue), num(r.cost), num(r.dso_surplus)]);
                row
            }),
        )?;
    }
    let mut summary = Vec::new();
    for (i, u) in rep.units.iter().enumerate() {
        summary.push(vec![
            u.clone(),
            "costmin".into(),
            num(rep.activation_frequency[i]),
            num(rep.costmin_paid_frequency[i]),
            num(rep.costmin_totals[i]),
        ]);
        summary.push(vec![
            u.clone(),
            "shapley".into(),
            num(rep.activation_frequency[i]),
            num(rep.shapley_paid_frequency[i]),
            num(rep.shapley_totals[i]),
        ]);
    }
    out.csv(
        "summary.csv",
        &["unit", "scheme", "activation_frequency", "paid_frequency", "total_payment"],
        summary.clone(),
    )?;
    out.csv(
        "sorted.csv",
        &["scheme", "unit", "rank", "payment"],
        [("costmin", &rep.costmin_sorted), ("shapley", &rep.shapley_sorted)]
            .into_iter()
            .flat_map(|(scheme, sorted)| {
                sorted.iter().zip(&rep.units).flat_map(move |(series, u)| {
                    series
                        .iter()
                        .enumerate()
                        .map(move |(k, p)| vec![scheme.to_string(), u.clone(), k.to_string(), num(*p)])
                })
            }),
    )?;
    ctx.say(format!("# {} requests, sigma {} , seed {}; {}", count, num(sigma), seed, rep.sampling));
    ctx.say(format!("{:<6}{:<9}{:>12}{:>12}{:>16}", "unit", "scheme", "activation", "paid", "total $/h"));
    for row in &summary {
        ctx.say(format!("{:<6}{:<9}{:>12}{:>12}{:>16}", row[0], row[1], row[2], row[3], row[4]));
    }
    let mut args = vec![
        "--count".into(),
        count.to_string(),
        "--sigma".into(),
        sigma.to_string(),
        "--seed".into(),
        seed.to_string(),
        "--dirs".into(),
        dirs.to_string(),
    ];
    if no_cache {
        args.push("--no-cache".into());
    }
    ctx.manifest(
        args,
        json!({ "count": count, "sigma": sigma, "dirs": dirs, "sampling": rep.sampling }),
        vec![seed],
        area.warnings.clone(),
    )
    .finish(&mut out, ctx.started.elapsed())?;
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, mode: SweepMode, step: f64, policy: SwapPolicy, no_cache: bool) -> Result<(), Failure> {
    let case = &ctx.case;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Failure::Input(format!("--step must be positive, got {step}")));
    }
    let cache = ctx.cache(no_cache)?;
    let ds = sweep(case, mode, step, policy, cache.as_ref());
    if let Some(cache) = &cache {
        cache.save().map_err(|e| Failure::Input(e.to_string()))?;
    }
    let mut out = ctx.out()?;
    out.csv(
        "shares.csv",
        &["p", "q", "unit", "share_pct", "status"],
        ds.points.iter().flat_map(|pt| {
            let status = match &pt.status {
                PointStatus::Ok => "ok",
                PointStatus::Idle => "idle",
                PointStatus::Failed(_) => "failed",
            };
            ds.units.iter().zip(&pt.shares).map(move |(u, s)| {
                vec![num(pt.point.p), num(pt.point.q), u.clone(), num(*s), status.to_string()]
            })
        }),
    )?;
    let failures = ds.failures();
    ctx.say(format!(
        "{} sweep ({} policy): {} grid points, {} failed",
        mode,
        ds.policy,
        ds.points.len(),
        failures
    ));
    let warnings = ds
        .points
        .iter()
        .filter_map(|p| match &p.status {
            PointStatus::Failed(why) => Some(format!("{}: {why}", p.point)),
            _ => None,
        })
        .collect();
    let mut args = vec![
        "--mode".into(),
        mode.to_string().replace('_', "-"),
        "--step".into(),
        step.to_string(),
        "--swap".into(),
        policy.to_string(),
    ];
    if no_cache {
        args.push("--no-cache".into());
    }
    ctx.manifest(
        args,
        json!({ "mode": mode, "step": step, "swap": ds.policy, "points": ds.points.len(), "failures": failures }),
        vec![],
        warnings,
    )
    .finish(&mut out, ctx.started.elapsed())?;
    Ok(())
}
