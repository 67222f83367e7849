//! Network and flexible-unit data model.
//!
//! A [`Case`] bundles a radial [`NetworkModel`], its flexible units and the
//! interface tariff, together with the compiled tree topology used by the
//! solvers. Cases are immutable once built and can be shared freely across
//! worker threads.
//!
//! Sign convention: a positive unit setpoint injects power into the grid,
//! which lowers the consumption seen at the reference bus.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type BusId = u32;

const IEEE33: &str = include_str!("../cases/ieee33.toml");
const MOTIVATING3: &str = include_str!("../cases/motivating3.toml");

/// Names accepted by [`builtin_case`].
pub const BUILTIN_CASES: [&str; 2] = ["ieee33", "motivating3"];

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    /// MW
    pub p_load: f64,
    /// MVAr
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: BusId,
    pub to_bus: BusId,
    /// Per-unit on the network base.
    pub r: f64,
    pub x: f64,
    /// MVA
    pub thermal_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    /// MVA
    pub base_power: f64,
    /// kV
    pub base_voltage: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub reference_bus: BusId,
    /// (v_min, v_max) in p.u. of voltage magnitude.
    pub voltage_limits: (f64, f64),
}

impl NetworkModel {
    pub fn base_impedance(&self) -> f64 {
        self.base_voltage * self.base_voltage / self.base_power
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.buses
            .iter()
            .fold((0.0, 0.0), |(p, q), b| (p + b.p_load, q + b.q_load))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlexUnit {
    pub id: String,
    pub bus: BusId,
    /// (p_min, p_max) MW injection.
    pub p_range: (f64, f64),
    /// (q_min, q_max) MVAr injection.
    pub q_range: (f64, f64),
    pub p0: f64,
    pub q0: f64,
    /// $/MWh of active regulation in either direction.
    pub cost_p: f64,
    /// $/MVArh of reactive regulation in either direction.
    pub cost_q: f64,
}

impl FlexUnit {
    /// True when the capability box is a single point.
    pub fn is_null(&self) -> bool {
        self.p_range.0 == self.p_range.1 && self.q_range.0 == self.q_range.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TariffModel {
    /// $/MWh paid for |ΔP_ref|.
    pub price_p: f64,
    /// $/MVArh paid for |ΔQ_ref|.
    pub price_q: f64,
}

impl TariffModel {
    /// Interface payment for a deviation (MW, MVAr) from the initial point.
    pub fn revenue(&self, delta_p: f64, delta_q: f64) -> f64 {
        self.price_p * delta_p.abs() + self.price_q * delta_q.abs()
    }
}

/// Interface consumption (P_ref, Q_ref) in MW / MVAr.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub p: f64,
    pub q: f64,
}

impl OperatingPoint {
    pub fn new(p: f64, q: f64) -> Self {
        Self { p, q }
    }

    pub fn distance(&self, other: &OperatingPoint) -> f64 {
        (self.p - other.p).hypot(self.q - other.q)
    }
}

impl fmt::Display for OperatingPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6} MW, {:.6} MVAr)", self.p, self.q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub element: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.message)
    }
}

/// Every violated invariant of a network/unit data set.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, element: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            element: element.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("case document is not valid TOML: {0}")]
    Parse(String),
    #[error("schema violation at {element}: {message}")]
    Schema { element: String, message: String },
    #[error("invalid case: {0}")]
    Invalid(ValidationReport),
    #[error("unknown case name `{0}` (expected one of: ieee33, motivating3)")]
    UnknownCase(String),
    #[error("cannot read case file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn schema_err(element: impl Into<String>, message: impl Into<String>) -> CaseError {
    CaseError::Schema {
        element: element.into(),
        message: message.into(),
    }
}

/// Checks every network and unit invariant. Never aborts.
pub fn validate(model: &NetworkModel, units: &[FlexUnit]) -> ValidationReport {
    let mut report = ValidationReport::default();

    if !(model.base_power > 0.0) {
        report.push("network", "base_mva must be positive");
    }
    if !(model.base_voltage > 0.0) {
        report.push("network", "base_kv must be positive");
    }
    let (v_min, v_max) = model.voltage_limits;
    if !(0.0 < v_min && v_min < 1.0 && 1.0 < v_max) {
        report.push(
            "network",
            format!("voltage limits must satisfy 0 < v_min < 1 < v_max, got ({v_min}, {v_max})"),
        );
    }

    let mut seen = HashSet::new();
    for bus in &model.buses {
        if !seen.insert(bus.id) {
            report.push(format!("bus {}", bus.id), "duplicate bus id");
        }
        if !bus.p_load.is_finite() || !bus.q_load.is_finite() {
            report.push(format!("bus {}", bus.id), "load must be finite");
        }
    }
    if !seen.contains(&model.reference_bus) {
        report.push(
            "network",
            format!("reference bus {} is not a bus", model.reference_bus),
        );
    }

    for (k, br) in model.branches.iter().enumerate() {
        let name = branch_name(k, br);
        if !seen.contains(&br.from_bus) || !seen.contains(&br.to_bus) {
            report.push(&name, "endpoint is not a bus");
        }
        if br.from_bus == br.to_bus {
            report.push(&name, "self loop");
        }
        if !(br.r >= 0.0) || !(br.x >= 0.0) {
            report.push(&name, "r and x must be nonnegative");
        } else if br.r + br.x <= 0.0 {
            report.push(&name, "r + x must be positive");
        }
        if let Some(limit) = br.thermal_limit {
            if !(limit > 0.0) {
                report.push(&name, "thermal limit must be positive");
            }
        }
    }

    if let Err(v) = check_radial(model) {
        report.violations.push(v);
    }

    let mut unit_ids = HashSet::new();
    for u in units {
        let name = format!("unit {}", u.id);
        if !unit_ids.insert(u.id.as_str()) {
            report.push(&name, "duplicate unit id");
        }
        if !seen.contains(&u.bus) {
            report.push(&name, format!("bus {} does not exist", u.bus));
        }
        if !(u.p_range.0 <= u.p0 && u.p0 <= u.p_range.1) {
            report.push(
                &name,
                format!("p0 = {} outside p range {:?}", u.p0, u.p_range),
            );
        }
        if !(u.q_range.0 <= u.q0 && u.q0 <= u.q_range.1) {
            report.push(
                &name,
                format!("q0 = {} outside q range {:?}", u.q0, u.q_range),
            );
        }
        if !(u.cost_p >= 0.0) || !(u.cost_q >= 0.0) {
            report.push(&name, "cost rates must be nonnegative");
        }
    }
    report
}

fn branch_name(k: usize, br: &Branch) -> String {
    format!("branch #{} ({}-{})", k + 1, br.from_bus, br.to_bus)
}

/// Branch count and connectivity check. Names the first branch that closes a
/// cycle when there is one.
fn check_radial(model: &NetworkModel) -> Result<(), Violation> {
    let index: HashMap<BusId, usize> = model
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let mut parent: Vec<usize> = (0..model.buses.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for (k, br) in model.branches.iter().enumerate() {
        let (Some(&a), Some(&b)) = (index.get(&br.from_bus), index.get(&br.to_bus)) else {
            continue;
        };
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return Err(Violation {
                element: branch_name(k, br),
                message: "closes a cycle; network is not radial".into(),
            });
        }
        parent[ra] = rb;
    }
    if !model.buses.is_empty() && model.branches.len() != model.buses.len() - 1 {
        return Err(Violation {
            element: "network".into(),
            message: format!(
                "{} branches for {} buses; a radial network needs exactly {}",
                model.branches.len(),
                model.buses.len(),
                model.buses.len() - 1
            ),
        });
    }
    Ok(())
}

/// Tree structure rooted at the reference bus.
#[derive(Debug, Clone)]
pub struct Radial {
    pub root: usize,
    pub bus_index: HashMap<BusId, usize>,
    /// Upstream (parent) bus of each branch.
    pub up: Vec<usize>,
    /// Downstream (child) bus of each branch.
    pub down: Vec<usize>,
    /// Branch feeding each bus, `None` for the root.
    pub parent_branch: Vec<Option<usize>>,
    /// Branches leaving each bus towards its children.
    pub child_branches: Vec<Vec<usize>>,
    /// Branches in breadth-first order from the root.
    pub order: Vec<usize>,
}

impl Radial {
    fn build(model: &NetworkModel) -> Radial {
        let n = model.buses.len();
        let bus_index: HashMap<BusId, usize> = model
            .buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect();
        let root = bus_index[&model.reference_bus];
        let mut adj = vec![Vec::new(); n];
        for (k, br) in model.branches.iter().enumerate() {
            let a = bus_index[&br.from_bus];
            let b = bus_index[&br.to_bus];
            adj[a].push((k, b));
            adj[b].push((k, a));
        }
        let m = model.branches.len();
        let mut up = vec![usize::MAX; m];
        let mut down = vec![usize::MAX; m];
        let mut parent_branch = vec![None; n];
        let mut child_branches = vec![Vec::new(); n];
        let mut order = Vec::with_capacity(m);
        let mut visited = vec![false; n];
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(i) = queue.pop_front() {
            for &(k, j) in &adj[i] {
                if visited[j] {
                    continue;
                }
                visited[j] = true;
                up[k] = i;
                down[k] = j;
                parent_branch[j] = Some(k);
                child_branches[i].push(k);
                order.push(k);
                queue.push_back(j);
            }
        }
        Radial {
            root,
            bus_index,
            up,
            down,
            parent_branch,
            child_branches,
            order,
        }
    }
}

/// A validated case: network, flexible units, tariff and compiled topology.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    pub network: NetworkModel,
    pub units: Vec<FlexUnit>,
    pub tariff: TariffModel,
    pub topology: Radial,
    /// Bus index of every unit.
    pub unit_bus: Vec<usize>,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        network: NetworkModel,
        units: Vec<FlexUnit>,
        tariff: TariffModel,
    ) -> Result<Case, CaseError> {
        let report = validate(&network, &units);
        if !report.is_empty() {
            return Err(CaseError::Invalid(report));
        }
        if !(tariff.price_p >= 0.0 && tariff.price_q >= 0.0) {
            return Err(schema_err("tariff", "prices must be nonnegative"));
        }
        let topology = Radial::build(&network);
        let unit_bus = units.iter().map(|u| topology.bus_index[&u.bus]).collect();
        Ok(Case {
            name: name.into(),
            network,
            units,
            tariff,
            topology,
            unit_bus,
        })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u.id == id)
    }

    /// Initial setpoints (p0, q0) of every unit, MW / MVAr.
    pub fn initial_setpoints(&self) -> Vec<(f64, f64)> {
        self.units.iter().map(|u| (u.p0, u.q0)).collect()
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(save_case(self).as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---- case document schema ------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseDoc {
    network: NetworkDoc,
    #[serde(default)]
    buses: Vec<BusDoc>,
    #[serde(default)]
    branches: Vec<BranchDoc>,
    #[serde(default)]
    units: Vec<UnitDoc>,
    tariff: TariffModel,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    base_mva: f64,
    base_kv: f64,
    #[serde(default = "default_v_min")]
    v_min: f64,
    #[serde(default = "default_v_max")]
    v_max: f64,
    reference_bus: BusId,
}

fn default_v_min() -> f64 {
    0.9
}

fn default_v_max() -> f64 {
    1.1
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: BusId,
    p_load_mw: f64,
    q_load_mvar: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BranchDoc {
    from: BusId,
    to: BusId,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_ohm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_pu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x_ohm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    x_pu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    limit_mva: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitDoc {
    id: String,
    bus: BusId,
    p_min_mw: f64,
    p_max_mw: f64,
    q_min_mvar: f64,
    q_max_mvar: f64,
    p0_mw: f64,
    q0_mvar: f64,
    cost_p: f64,
    cost_q: f64,
}

fn impedance(
    element: &str,
    what: &str,
    ohm: Option<f64>,
    pu: Option<f64>,
    z_base: f64,
) -> Result<f64, CaseError> {
    match (ohm, pu) {
        (Some(v), None) => Ok(v / z_base),
        (None, Some(v)) => Ok(v),
        (Some(_), Some(_)) => Err(schema_err(
            element,
            format!("give exactly one of {what}_ohm and {what}_pu"),
        )),
        (None, None) => Err(schema_err(
            element,
            format!("missing {what}_ohm or {what}_pu"),
        )),
    }
}

/// Parses a case document and validates it.
pub fn load_case(document: &str) -> Result<Case, CaseError> {
    load_named_case("case", document)
}

fn load_named_case(name: &str, document: &str) -> Result<Case, CaseError> {
    let doc: CaseDoc = toml::from_str(document).map_err(|e| CaseError::Parse(e.to_string()))?;
    let z_base = doc.network.base_kv * doc.network.base_kv / doc.network.base_mva;
    let mut branches = Vec::with_capacity(doc.branches.len());
    for (k, b) in doc.branches.iter().enumerate() {
        let element = format!("branch #{} ({}-{})", k + 1, b.from, b.to);
        branches.push(Branch {
            from_bus: b.from,
            to_bus: b.to,
            r: impedance(&element, "r", b.r_ohm, b.r_pu, z_base)?,
            x: impedance(&element, "x", b.x_ohm, b.x_pu, z_base)?,
            thermal_limit: b.limit_mva,
        });
    }
    let network = NetworkModel {
        base_power: doc.network.base_mva,
        base_voltage: doc.network.base_kv,
        buses: doc
            .buses
            .iter()
            .map(|b| Bus {
                id: b.id,
                p_load: b.p_load_mw,
                q_load: b.q_load_mvar,
            })
            .collect(),
        branches,
        reference_bus: doc.network.reference_bus,
        voltage_limits: (doc.network.v_min, doc.network.v_max),
    };
    let units = doc
        .units
        .iter()
        .map(|u| FlexUnit {
            id: u.id.clone(),
            bus: u.bus,
            p_range: (u.p_min_mw, u.p_max_mw),
            q_range: (u.q_min_mvar, u.q_max_mvar),
            p0: u.p0_mw,
            q0: u.q0_mvar,
            cost_p: u.cost_p,
            cost_q: u.cost_q,
        })
        .collect();
    Case::new(name, network, units, doc.tariff)
}

/// Serializes a case to the document schema. Impedances are written in
/// per-unit so that reloading reproduces the data model exactly.
pub fn save_case(case: &Case) -> String {
    let net = &case.network;
    let doc = CaseDoc {
        network: NetworkDoc {
            base_mva: net.base_power,
            base_kv: net.base_voltage,
            v_min: net.voltage_limits.0,
            v_max: net.voltage_limits.1,
            reference_bus: net.reference_bus,
        },
        buses: net
            .buses
            .iter()
            .map(|b| BusDoc {
                id: b.id,
                p_load_mw: b.p_load,
                q_load_mvar: b.q_load,
            })
            .collect(),
        branches: net
            .branches
            .iter()
            .map(|b| BranchDoc {
                from: b.from_bus,
                to: b.to_bus,
                r_ohm: None,
                r_pu: Some(b.r),
                x_ohm: None,
                x_pu: Some(b.x),
                limit_mva: b.thermal_limit,
            })
            .collect(),
        units: case
            .units
            .iter()
            .map(|u| UnitDoc {
                id: u.id.clone(),
                bus: u.bus,
                p_min_mw: u.p_range.0,
                p_max_mw: u.p_range.1,
                q_min_mvar: u.q_range.0,
                q_max_mvar: u.q_range.1,
                p0_mw: u.p0,
                q0_mvar: u.q0,
                cost_p: u.cost_p,
                cost_q: u.cost_q,
            })
            .collect(),
        tariff: case.tariff,
    };
    toml::to_string(&doc).expect("case document always serializes")
}

/// One of the bundled cases: `ieee33` or `motivating3`.
pub fn builtin_case(name: &str) -> Result<Case, CaseError> {
    let doc = match name {
        "ieee33" => IEEE33,
        "motivating3" => MOTIVATING3,
        other => return Err(CaseError::UnknownCase(other.to_string())),
    };
    load_named_case(name, doc)
}

/// Resolves a `--case` argument: a builtin name or a path to a case file.
pub fn resolve_case(spec: &str) -> Result<Case, CaseError> {
    if BUILTIN_CASES.contains(&spec) {
        return builtin_case(spec);
    }
    let text = std::fs::read_to_string(spec).map_err(|source| CaseError::Io {
        path: spec.to_string(),
        source,
    })?;
    let name = std::path::Path::new(spec)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("case");
    load_named_case(name, &text)
}
