//! Network data model and assembly of the continuous dispatch problem.
//!
//! Buses carry load/DG profiles and a per-kW load-loss price; lines carry
//! impedance, flow limits, and switch/damage annotations. With the integer
//! decisions fixed (the availability map `delta`), the remaining dispatch
//! problem is a convex QP: box bounds on loads and generation, flow limits
//! gated to zero on unavailable lines, nodal power balance, a linearized
//! voltage-drop relation deactivated by a big-M slack on open lines, and a
//! voltage band around the reference. Voltages are handled in per-unit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmpc::{InterconnectState, MultiplierSet};
use crate::mat::Mat;
use crate::partition::Partition;
use crate::qpsolve::QpInstance;
use crate::routing::ConnectivityMap;

#[derive(Debug, Error)]
pub enum NetModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("availability map does not cover {0}")]
    DeltaMismatch(String),
    #[error("penalty weights rejected: gamma_b {gamma_b} < gamma_c {gamma_c}")]
    BadPenalty { gamma_b: f64, gamma_c: f64 },
    #[error("unknown bus id '{0}'")]
    UnknownBus(String),
}

/// A per-step series; queries past the end hold the last value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile(pub Vec<f64>);

impl Profile {
    pub fn constant(v: f64) -> Self {
        Profile(vec![v])
    }

    pub fn at(&self, step: usize) -> f64 {
        match self.0.len() {
            0 => 0.0,
            n => self.0[step.min(n - 1)],
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    /// Load-loss price, money per kW per step.
    pub cost: Profile,
    /// Maximum active/reactive demand per step (kW / kvar).
    pub load_p: Profile,
    pub load_q: Profile,
    /// DG capacity per step (kW / kvar), zero when the bus has no DG.
    pub dg_p: Profile,
    pub dg_q: Profile,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Ohms.
    pub r: f64,
    pub x: f64,
    /// Flow limits, kW / kvar.
    pub p_lim: f64,
    pub q_lim: f64,
    pub has_switch: bool,
    pub damage_ref: Option<String>,
}

#[derive(Clone, Debug)]
pub struct NetworkTopology {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    bus_index: BTreeMap<String, usize>,
}

impl NetworkTopology {
    pub fn new(buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self, NetModelError> {
        let bus_index: BTreeMap<String, usize> = buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id.clone(), i))
            .collect();
        for l in &lines {
            if l.from >= buses.len() || l.to >= buses.len() {
                return Err(NetModelError::Dimension(format!(
                    "line endpoint {}-{} out of range",
                    l.from, l.to
                )));
            }
        }
        Ok(NetworkTopology {
            buses,
            lines,
            bus_index,
        })
    }

    pub fn bus_idx(&self, id: &str) -> Option<usize> {
        self.bus_index.get(id).copied()
    }

    pub fn switch_lines(&self) -> Vec<usize> {
        (0..self.lines.len())
            .filter(|&l| self.lines[l].has_switch)
            .collect()
    }

    /// Line connecting the two bus ids, in either orientation.
    pub fn line_between(&self, a: usize, b: usize) -> Option<usize> {
        self.lines
            .iter()
            .position(|l| (l.from == a && l.to == b) || (l.from == b && l.to == a))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridConfig {
    /// Reference voltage, volts.
    pub v_ref: f64,
    /// Voltage band halfwidth in per-unit.
    pub eps: f64,
    /// Big-M constant deactivating the voltage relation on open lines.
    pub big_m: f64,
    /// Minutes per step.
    pub dt_min: f64,
    /// Prediction window length in steps.
    pub horizon: usize,
}

impl GridConfig {
    /// Smallest big-M that makes the voltage relation vacuous on an open
    /// line: the band spans 2*eps and the drop term is bounded by the flow
    /// limits.
    pub fn with_default_big_m(
        v_ref: f64,
        eps: f64,
        dt_min: f64,
        horizon: usize,
        topo: &NetworkTopology,
    ) -> Self {
        let scale = 1000.0 / (v_ref * v_ref);
        let max_drop = topo
            .lines
            .iter()
            .map(|l| (l.r * l.p_lim + l.x * l.q_lim) * scale)
            .fold(0.0f64, f64::max);
        GridConfig {
            v_ref,
            eps,
            big_m: 2.0 * eps + max_drop,
            dt_min,
            horizon,
        }
    }

    /// Per-unit drop per (ohm * kW).
    pub fn drop_scale(&self) -> f64 {
        1000.0 / (self.v_ref * self.v_ref)
    }
}

/// A window of consecutive steps; `start` indexes the absolute step axis
/// that profiles and the simulation clock share.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepWindow {
    pub start: usize,
    pub len: usize,
}

impl StepWindow {
    pub fn abs(&self, t: usize) -> usize {
        self.start + t
    }

    pub fn end_min(&self, dt_min: f64) -> f64 {
        (self.start + self.len) as f64 * dt_min
    }
}

/// Dispatch trajectories over a window: per-bus served load, DG output and
/// per-unit voltage, and per-line signed flows (positive from -> to).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchVars {
    pub p_load: Mat<f64>,
    pub q_load: Mat<f64>,
    pub p_dg: Mat<f64>,
    pub q_dg: Mat<f64>,
    pub voltage: Mat<f64>,
    pub p_flow: Mat<f64>,
    pub q_flow: Mat<f64>,
}

impl DispatchVars {
    pub fn zeros(n_buses: usize, n_lines: usize, steps: usize) -> Self {
        DispatchVars {
            p_load: Mat::filled(n_buses, steps, 0.0),
            q_load: Mat::filled(n_buses, steps, 0.0),
            p_dg: Mat::filled(n_buses, steps, 0.0),
            q_dg: Mat::filled(n_buses, steps, 0.0),
            voltage: Mat::filled(n_buses, steps, 1.0),
            p_flow: Mat::filled(n_lines, steps, 0.0),
            q_flow: Mat::filled(n_lines, steps, 0.0),
        }
    }

    pub fn steps(&self) -> usize {
        self.p_load.cols()
    }

    pub fn all_finite(&self) -> bool {
        self.p_load
            .iter()
            .chain(self.q_load.iter())
            .chain(self.p_dg.iter())
            .chain(self.q_dg.iter())
            .chain(self.voltage.iter())
            .chain(self.p_flow.iter())
            .chain(self.q_flow.iter())
            .all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Finding {
    DisconnectedBus { bus: String },
    DuplicateLine { a: String, b: String },
    SelfLoop { bus: String },
    NonpositiveFlowLimit { from: String, to: String },
    NegativeImpedance { from: String, to: String },
    EmptyProfile { bus: String, profile: String },
    NegativeProfileValue { bus: String, profile: String },
    MismatchedProfileLengths { bus: String },
    BadConfig { message: String },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::DisconnectedBus { bus } => write!(f, "disconnected bus {bus}"),
            Finding::DuplicateLine { a, b } => write!(f, "duplicate line {a}-{b}"),
            Finding::SelfLoop { bus } => write!(f, "self loop at {bus}"),
            Finding::NonpositiveFlowLimit { from, to } => {
                write!(f, "nonpositive flow limit on {from}-{to}")
            }
            Finding::NegativeImpedance { from, to } => {
                write!(f, "negative impedance on {from}-{to}")
            }
            Finding::EmptyProfile { bus, profile } => write!(f, "empty {profile} profile at {bus}"),
            Finding::NegativeProfileValue { bus, profile } => {
                write!(f, "negative {profile} value at {bus}")
            }
            Finding::MismatchedProfileLengths { bus } => {
                write!(f, "profile lengths differ at {bus}")
            }
            Finding::BadConfig { message } => write!(f, "bad config: {message}"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

pub fn validate_network(topo: &NetworkTopology, config: &GridConfig) -> ValidationReport {
    let mut findings = Vec::new();
    if !(config.eps > 0.0 && config.eps < 1.0) {
        findings.push(Finding::BadConfig {
            message: format!("eps {} outside (0, 1)", config.eps),
        });
    }
    if config.dt_min <= 0.0 {
        findings.push(Finding::BadConfig {
            message: format!("dt_min {} not positive", config.dt_min),
        });
    }
    if config.horizon == 0 {
        findings.push(Finding::BadConfig {
            message: "horizon must be at least 1".into(),
        });
    }
    let mut seen = BTreeMap::new();
    for l in &topo.lines {
        let id = |b: usize| topo.buses[b].id.clone();
        if l.from == l.to {
            findings.push(Finding::SelfLoop { bus: id(l.from) });
        }
        let key = (l.from.min(l.to), l.from.max(l.to));
        if seen.insert(key, ()).is_some() {
            findings.push(Finding::DuplicateLine {
                a: id(key.0),
                b: id(key.1),
            });
        }
        if l.p_lim <= 0.0 || l.q_lim <= 0.0 {
            findings.push(Finding::NonpositiveFlowLimit {
                from: id(l.from),
                to: id(l.to),
            });
        }
        if l.r < 0.0 || l.x < 0.0 {
            findings.push(Finding::NegativeImpedance {
                from: id(l.from),
                to: id(l.to),
            });
        }
    }
    for b in &topo.buses {
        let profiles: [(&str, &Profile); 5] = [
            ("cost", &b.cost),
            ("p_max", &b.load_p),
            ("q_max", &b.load_q),
            ("dg_p_max", &b.dg_p),
            ("dg_q_max", &b.dg_q),
        ];
        for (name, p) in profiles {
            if p.is_empty() {
                findings.push(Finding::EmptyProfile {
                    bus: b.id.clone(),
                    profile: name.into(),
                });
            }
            if p.0.iter().any(|v| *v < 0.0) {
                findings.push(Finding::NegativeProfileValue {
                    bus: b.id.clone(),
                    profile: name.into(),
                });
            }
        }
        let len0 = b.cost.len();
        if [&b.load_p, &b.load_q, &b.dg_p, &b.dg_q]
            .iter()
            .any(|p| p.len() != len0)
        {
            findings.push(Finding::MismatchedProfileLengths { bus: b.id.clone() });
        }
    }
    // connectivity over all lines, ignoring switch and damage state
    if topo.buses.len() > 1 {
        let mut adj = vec![Vec::new(); topo.buses.len()];
        for l in &topo.lines {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
        let mut reach = vec![false; topo.buses.len()];
        let mut stack = vec![0usize];
        reach[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !reach[u] {
                    reach[u] = true;
                    stack.push(u);
                }
            }
        }
        for (i, r) in reach.iter().enumerate() {
            if !r {
                findings.push(Finding::DisconnectedBus {
                    bus: topo.buses[i].id.clone(),
                });
            }
        }
    }
    ValidationReport { findings }
}

// ---------------------------------------------------------------------------
// objective
// ---------------------------------------------------------------------------

/// Load-loss cost of a dispatch over a window: the price-weighted unserved
/// active power summed over buses and steps.
pub fn load_loss_cost(
    vars: &DispatchVars,
    topo: &NetworkTopology,
    window: StepWindow,
) -> Result<f64, NetModelError> {
    if vars.p_load.rows() != topo.buses.len() || vars.p_load.cols() != window.len {
        return Err(NetModelError::Dimension(format!(
            "dispatch is {}x{}, expected {}x{}",
            vars.p_load.rows(),
            vars.p_load.cols(),
            topo.buses.len(),
            window.len
        )));
    }
    let mut total = 0.0;
    for t in 0..window.len {
        let abs = window.abs(t);
        for (n, bus) in topo.buses.iter().enumerate() {
            total += bus.cost.at(abs) * (bus.load_p.at(abs) - vars.p_load[(n, t)]);
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// QP assembly
// ---------------------------------------------------------------------------

/// Variable layout of a dispatch QP over a scope of buses/lines plus the
/// scope's interconnect triples, grouped per step.
#[derive(Clone, Copy, Debug)]
pub struct VarMap {
    pub n_buses: usize,
    pub n_lines: usize,
    pub n_links: usize,
    pub steps: usize,
}

impl VarMap {
    fn stride(&self) -> usize {
        5 * self.n_buses + 2 * self.n_lines + 3 * self.n_links
    }

    pub fn total(&self) -> usize {
        self.stride() * self.steps
    }

    pub fn p_load(&self, n: usize, t: usize) -> usize {
        t * self.stride() + 5 * n
    }

    pub fn q_load(&self, n: usize, t: usize) -> usize {
        self.p_load(n, t) + 1
    }

    pub fn p_dg(&self, n: usize, t: usize) -> usize {
        self.p_load(n, t) + 2
    }

    pub fn q_dg(&self, n: usize, t: usize) -> usize {
        self.p_load(n, t) + 3
    }

    pub fn voltage(&self, n: usize, t: usize) -> usize {
        self.p_load(n, t) + 4
    }

    pub fn p_flow(&self, l: usize, t: usize) -> usize {
        t * self.stride() + 5 * self.n_buses + 2 * l
    }

    pub fn q_flow(&self, l: usize, t: usize) -> usize {
        self.p_flow(l, t) + 1
    }

    pub fn link_p(&self, k: usize, t: usize) -> usize {
        t * self.stride() + 5 * self.n_buses + 2 * self.n_lines + 3 * k
    }

    pub fn link_q(&self, k: usize, t: usize) -> usize {
        self.link_p(k, t) + 1
    }

    pub fn link_v(&self, k: usize, t: usize) -> usize {
        self.link_p(k, t) + 2
    }
}

/// Role of one interconnect link inside a subsystem scope.
#[derive(Clone, Copy, Debug)]
pub struct ScopeLink {
    /// Index into the partition-wide link list (multiplier indexing).
    pub link_idx: usize,
    /// The cut line (topology index); supplies impedance and limits.
    pub line: usize,
    /// True when this scope is the exporting side and owns the line physics.
    pub exporting: bool,
    /// The scope-side endpoint of the cut line (global bus index).
    pub frontier: usize,
}

/// The link roles of one subsystem, in partition link order. Shared by the
/// QP builder and the coordinator so variable layouts always agree.
pub fn subsystem_scope_links(part: &Partition, sub: usize) -> Vec<ScopeLink> {
    part.links
        .iter()
        .enumerate()
        .filter_map(|(k, link)| {
            if link.out_part == sub {
                Some(ScopeLink {
                    link_idx: k,
                    line: link.line,
                    exporting: true,
                    frontier: link.out_bus,
                })
            } else if link.in_part == sub {
                Some(ScopeLink {
                    link_idx: k,
                    line: link.line,
                    exporting: false,
                    frontier: link.in_bus,
                })
            } else {
                None
            }
        })
        .collect()
}

struct Scope<'a> {
    buses: &'a [usize],
    lines: &'a [usize],
    links: Vec<ScopeLink>,
}

struct Coupling<'a> {
    mult: &'a MultiplierSet,
    anchors: &'a InterconnectState,
    gamma_b: f64,
    gamma_c: f64,
}

/// Assembles the dispatch QP for the whole network over one window. The
/// availability map must cover every line and window step.
pub fn build_system_qp(
    topo: &NetworkTopology,
    config: &GridConfig,
    delta: &ConnectivityMap,
    window: StepWindow,
) -> Result<(QpInstance, VarMap), NetModelError> {
    let buses: Vec<usize> = (0..topo.buses.len()).collect();
    let lines: Vec<usize> = (0..topo.lines.len()).collect();
    let scope = Scope {
        buses: &buses,
        lines: &lines,
        links: Vec::new(),
    };
    build_dispatch_qp(topo, config, delta, window, &scope, None)
}

/// Assembles one subsystem's QP: its local dispatch problem plus, per
/// interconnect link and step, the (P, Q, V) triple on its side of the
/// link, priced by the multipliers and pulled toward the previous iterates.
#[allow(clippy::too_many_arguments)]
pub fn build_subsystem_qp(
    topo: &NetworkTopology,
    config: &GridConfig,
    part: &Partition,
    sub: usize,
    delta: &ConnectivityMap,
    mult: &MultiplierSet,
    state: &InterconnectState,
    gamma_b: f64,
    gamma_c: f64,
    window: StepWindow,
) -> Result<(QpInstance, VarMap), NetModelError> {
    if gamma_b < gamma_c {
        return Err(NetModelError::BadPenalty { gamma_b, gamma_c });
    }
    if mult.n_links != part.links.len() || mult.steps < window.len {
        return Err(NetModelError::Dimension(
            "multiplier set does not cover the partition links and window".into(),
        ));
    }
    let scope = Scope {
        buses: &part.subsystem_buses[sub],
        lines: &part.subsystem_lines[sub],
        links: subsystem_scope_links(part, sub),
    };
    let coupling = Coupling {
        mult,
        anchors: state,
        gamma_b,
        gamma_c,
    };
    build_dispatch_qp(topo, config, delta, window, &scope, Some(&coupling))
}

fn build_dispatch_qp(
    topo: &NetworkTopology,
    config: &GridConfig,
    delta: &ConnectivityMap,
    window: StepWindow,
    scope: &Scope,
    coupling: Option<&Coupling>,
) -> Result<(QpInstance, VarMap), NetModelError> {
    if delta.delta.rows() != topo.lines.len() || delta.delta.cols() < window.len {
        return Err(NetModelError::DeltaMismatch(format!(
            "{} lines x {} steps required",
            topo.lines.len(),
            window.len
        )));
    }
    let vm = VarMap {
        n_buses: scope.buses.len(),
        n_lines: scope.lines.len(),
        n_links: scope.links.len(),
        steps: window.len,
    };
    let mut local_bus = vec![usize::MAX; topo.buses.len()];
    for (i, &b) in scope.buses.iter().enumerate() {
        local_bus[b] = i;
    }
    let mut inst = QpInstance::new(vm.total());
    let scale = config.drop_scale();
    let (v_lo, v_hi) = (1.0 - config.eps, 1.0 + config.eps);

    for t in 0..window.len {
        let abs = window.abs(t);
        // per-bus bounds, shedding coupling, and objective
        for (n, &gb) in scope.buses.iter().enumerate() {
            let bus = &topo.buses[gb];
            let (pmax, qmax) = (bus.load_p.at(abs), bus.load_q.at(abs));
            inst.set_bounds(vm.p_load(n, t), 0.0, pmax);
            if pmax <= 0.0 {
                // no active demand: reactive load cannot be served alone
                inst.set_bounds(vm.q_load(n, t), 0.0, 0.0);
            } else {
                inst.set_bounds(vm.q_load(n, t), 0.0, qmax);
                if qmax > 0.0 {
                    // constant power factor: q_l * pmax = p_l * qmax
                    inst.add_eq(
                        &[vm.q_load(n, t), vm.p_load(n, t)],
                        &[pmax, -qmax],
                        0.0,
                    );
                }
            }
            inst.set_bounds(vm.p_dg(n, t), 0.0, bus.dg_p.at(abs));
            inst.set_bounds(vm.q_dg(n, t), 0.0, bus.dg_q.at(abs));
            inst.set_bounds(vm.voltage(n, t), v_lo, v_hi);
            let c = bus.cost.at(abs);
            inst.linear[vm.p_load(n, t)] -= c;
            inst.constant += c * pmax;
        }
        // per-line bounds and voltage relation
        for (l, &gl) in scope.lines.iter().enumerate() {
            let line = &topo.lines[gl];
            let open = !delta.available(gl, t);
            let (pl, ql) = if open {
                (0.0, 0.0)
            } else {
                (line.p_lim, line.q_lim)
            };
            inst.set_bounds(vm.p_flow(l, t), -pl, pl);
            inst.set_bounds(vm.q_flow(l, t), -ql, ql);
            let vf = vm.voltage(local_bus[line.from], t);
            let vt = vm.voltage(local_bus[line.to], t);
            let cols = [vf, vt, vm.p_flow(l, t), vm.q_flow(l, t)];
            let vals = [1.0, -1.0, line.r * scale, line.x * scale];
            if open {
                let neg: Vec<f64> = vals.iter().map(|v| -v).collect();
                inst.add_ineq(&cols, &vals, config.big_m);
                inst.add_ineq(&cols, &neg, config.big_m);
            } else {
                inst.add_eq(&cols, &vals, 0.0);
            }
        }
        // interconnect link variables
        for (k, sl) in scope.links.iter().enumerate() {
            let line = &topo.lines[sl.line];
            let open = !delta.available(sl.line, t);
            let (pl, ql) = if open {
                (0.0, 0.0)
            } else {
                (line.p_lim, line.q_lim)
            };
            inst.set_bounds(vm.link_p(k, t), -pl, pl);
            inst.set_bounds(vm.link_q(k, t), -ql, ql);
            inst.set_bounds(vm.link_v(k, t), v_lo, v_hi);
            if sl.exporting {
                // this side owns the cut line; the link voltage stands in
                // for the remote endpoint. Link flow is positive toward the
                // importing side.
                let v_local = vm.voltage(local_bus[sl.frontier], t);
                let flow_sign = if line.from == sl.frontier { 1.0 } else { -1.0 };
                let cols = [
                    if flow_sign > 0.0 { v_local } else { vm.link_v(k, t) },
                    if flow_sign > 0.0 { vm.link_v(k, t) } else { v_local },
                    vm.link_p(k, t),
                    vm.link_q(k, t),
                ];
                let vals = [
                    1.0,
                    -1.0,
                    flow_sign * line.r * scale,
                    flow_sign * line.x * scale,
                ];
                if open {
                    let neg: Vec<f64> = vals.iter().map(|v| -v).collect();
                    inst.add_ineq(&cols, &vals, config.big_m);
                    inst.add_ineq(&cols, &neg, config.big_m);
                } else {
                    inst.add_eq(&cols, &vals, 0.0);
                }
            } else {
                // importing side: the link voltage copies the frontier bus
                let v_local = vm.voltage(local_bus[sl.frontier], t);
                inst.add_eq(&[vm.link_v(k, t), v_local], &[1.0, -1.0], 0.0);
            }
            if let Some(cp) = coupling {
                let idx = sl.link_idx * cp.mult.steps + t;
                let gb = cp.gamma_b;
                let gc = cp.gamma_c;
                let an = &cp.anchors.latest;
                let (sign, other_p, own_p, other_q, own_q, other_v, own_v) = if sl.exporting {
                    (
                        -1.0,
                        an.p_in[idx],
                        an.p_out[idx],
                        an.q_in[idx],
                        an.q_out[idx],
                        an.v_in[idx],
                        an.v_out[idx],
                    )
                } else {
                    (
                        1.0,
                        an.p_out[idx],
                        an.p_in[idx],
                        an.q_out[idx],
                        an.q_in[idx],
                        an.v_out[idx],
                        an.v_in[idx],
                    )
                };
                for (var, lam, other, own) in [
                    (vm.link_p(k, t), cp.mult.p[idx], other_p, own_p),
                    (vm.link_q(k, t), cp.mult.q[idx], other_q, own_q),
                    (vm.link_v(k, t), cp.mult.v[idx], other_v, own_v),
                ] {
                    inst.add_quad_diag(var, gb);
                    inst.linear[var] += sign * lam - gc * other - (gb - gc) * own;
                    inst.constant += 0.5 * gc * other * other + 0.5 * (gb - gc) * own * own;
                }
            }
        }
        // nodal balance, including link injections at frontier buses
        for (n, &gbn) in scope.buses.iter().enumerate() {
            let mut p_cols = vec![vm.p_dg(n, t), vm.p_load(n, t)];
            let mut p_vals = vec![1.0, -1.0];
            let mut q_cols = vec![vm.q_dg(n, t), vm.q_load(n, t)];
            let mut q_vals = vec![1.0, -1.0];
            for (l, &gl) in scope.lines.iter().enumerate() {
                let line = &topo.lines[gl];
                let sign = if line.to == gbn {
                    1.0
                } else if line.from == gbn {
                    -1.0
                } else {
                    continue;
                };
                p_cols.push(vm.p_flow(l, t));
                p_vals.push(sign);
                q_cols.push(vm.q_flow(l, t));
                q_vals.push(sign);
            }
            for (k, sl) in scope.links.iter().enumerate() {
                if sl.frontier != gbn {
                    continue;
                }
                let sign = if sl.exporting { -1.0 } else { 1.0 };
                p_cols.push(vm.link_p(k, t));
                p_vals.push(sign);
                q_cols.push(vm.link_q(k, t));
                q_vals.push(sign);
            }
            inst.add_eq(&p_cols, &p_vals, 0.0);
            inst.add_eq(&q_cols, &q_vals, 0.0);
        }
    }
    Ok((inst, vm))
}

/// Copies a scope solution into a network-wide dispatch table.
pub fn scatter_dispatch(
    x: &[f64],
    vm: &VarMap,
    buses: &[usize],
    lines: &[usize],
    out: &mut DispatchVars,
) {
    for t in 0..vm.steps {
        for (n, &gb) in buses.iter().enumerate() {
            out.p_load[(gb, t)] = x[vm.p_load(n, t)];
            out.q_load[(gb, t)] = x[vm.q_load(n, t)];
            out.p_dg[(gb, t)] = x[vm.p_dg(n, t)];
            out.q_dg[(gb, t)] = x[vm.q_dg(n, t)];
            out.voltage[(gb, t)] = x[vm.voltage(n, t)];
        }
        for (l, &gl) in lines.iter().enumerate() {
            out.p_flow[(gl, t)] = x[vm.p_flow(l, t)];
            out.q_flow[(gl, t)] = x[vm.q_flow(l, t)];
        }
    }
}

// ---------------------------------------------------------------------------
// solution checkers (recomputed from first principles; used by tests and
// the acceptance suite)
// ---------------------------------------------------------------------------

/// Max absolute nodal balance residual (active, reactive) in kW / kvar.
pub fn balance_residuals(vars: &DispatchVars, topo: &NetworkTopology) -> (f64, f64) {
    let steps = vars.steps();
    let (mut rp, mut rq) = (0.0f64, 0.0f64);
    for t in 0..steps {
        for n in 0..topo.buses.len() {
            let mut p = vars.p_dg[(n, t)] - vars.p_load[(n, t)];
            let mut q = vars.q_dg[(n, t)] - vars.q_load[(n, t)];
            for (l, line) in topo.lines.iter().enumerate() {
                if line.to == n {
                    p += vars.p_flow[(l, t)];
                    q += vars.q_flow[(l, t)];
                } else if line.from == n {
                    p -= vars.p_flow[(l, t)];
                    q -= vars.q_flow[(l, t)];
                }
            }
            rp = rp.max(p.abs());
            rq = rq.max(q.abs());
        }
    }
    (rp, rq)
}

/// Max flow magnitude on unavailable lines (must be ~0).
pub fn gated_flow_violation(
    vars: &DispatchVars,
    delta: &ConnectivityMap,
) -> f64 {
    let mut worst = 0.0f64;
    for l in 0..vars.p_flow.rows() {
        for t in 0..vars.steps() {
            if !delta.available(l, t) {
                worst = worst.max(vars.p_flow[(l, t)].abs());
                worst = worst.max(vars.q_flow[(l, t)].abs());
            }
        }
    }
    worst
}

/// Max violation of the voltage band in per-unit.
pub fn voltage_band_violation(vars: &DispatchVars, config: &GridConfig) -> f64 {
    let mut worst = 0.0f64;
    for v in vars.voltage.iter() {
        worst = worst.max((1.0 - config.eps) - v);
        worst = worst.max(v - (1.0 + config.eps));
    }
    worst.max(0.0)
}

/// Max residual of the voltage-drop relation on available lines.
pub fn voltage_relation_residual(
    vars: &DispatchVars,
    topo: &NetworkTopology,
    config: &GridConfig,
    delta: &ConnectivityMap,
) -> f64 {
    let scale = config.drop_scale();
    let mut worst = 0.0f64;
    for (l, line) in topo.lines.iter().enumerate() {
        for t in 0..vars.steps() {
            if delta.available(l, t) {
                let r = vars.voltage[(line.from, t)] - vars.voltage[(line.to, t)]
                    + (line.r * vars.p_flow[(l, t)] + line.x * vars.q_flow[(l, t)]) * scale;
                worst = worst.max(r.abs());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// test fixtures shared across module unit tests
// ---------------------------------------------------------------------------


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::qpsolve::{solve_qp, SolveStatus, DEFAULT_MAX_ITER, DEFAULT_TOL};

    fn solve_system(
        topo: &NetworkTopology,
        config: &GridConfig,
        delta: &ConnectivityMap,
        window: StepWindow,
    ) -> (DispatchVars, f64) {
        let (inst, vm) = build_system_qp(topo, config, delta, window).unwrap();
        let sol = solve_qp(&inst, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        let mut vars = DispatchVars::zeros(topo.buses.len(), topo.lines.len(), window.len);
        let buses: Vec<usize> = (0..topo.buses.len()).collect();
        let lines: Vec<usize> = (0..topo.lines.len()).collect();
        scatter_dispatch(&sol.x, &vm, &buses, &lines, &mut vars);
        (vars, sol.objective)
    }

    #[test]
    fn debug_mask21() {
        use crate::netmodel::test_support::*;
        let topo = topology(
            vec![
                dg_bus("1", 90.0, 40.0),
                load_bus("2", 1.0, 50.0, 25.0),
                load_bus("3", 2.0, 60.0, 30.0),
            ],
            vec![line(0, 1, true), line(1, 2, true), line(2, 0, true)],
        );
        let config = config_for(&topo, 2);
        let window = StepWindow { start: 0, len: 2 };
        let mask = 21u32;
        let mut delta = crate::routing::ConnectivityMap::fully_connected(3, 2);
        for l in 0..3 {
            for t in 0..2 {
                delta.delta[(l, t)] = mask & (1 << (l * 2 + t)) != 0;
            }
        }
        let (inst, _) = build_system_qp(&topo, &config, &delta, window).unwrap();
        let sol = crate::qpsolve::solve_qp(&inst, 1e-6, 200).unwrap();
        println!("status {:?} iters {} obj {}", sol.status, sol.iterations, sol.objective);
        let res = crate::qpsolve::kkt_residuals(&inst, &sol).unwrap();
        println!("stat {:e} primal {:e} compl {:e}", res.stationarity, res.primal, res.complementarity);
    }

    #[test]
    fn single_bus_network_is_valid() {
        let topo = topology(vec![simple_bus("1")], vec![]);
        let config = config_for(&topo, 2);
        let report = validate_network(&topo, &config);
        assert!(report.is_valid(), "{:?}", report.findings);
    }

    #[test]
    fn zero_flow_limit_is_flagged() {
        let mut l = line(0, 1, false);
        l.p_lim = 0.0;
        let topo = topology(vec![simple_bus("1"), simple_bus("2")], vec![l]);
        let config = config_for(&topo, 2);
        let report = validate_network(&topo, &config);
        assert!(report
            .findings
            .iter()
            .any(|f| matches!(f, Finding::NonpositiveFlowLimit { .. })));
    }

    #[test]
    fn full_service_costs_nothing() {
        let topo = topology(vec![load_bus("1", 1.0, 100.0, 0.0)], vec![]);
        let window = StepWindow { start: 0, len: 2 };
        let mut vars = DispatchVars::zeros(1, 0, 2);
        vars.p_load[(0, 0)] = 100.0;
        vars.p_load[(0, 1)] = 100.0;
        assert_eq!(load_loss_cost(&vars, &topo, window).unwrap(), 0.0);
    }

    #[test]
    fn partial_service_direct_substitution() {
        // one bus, two steps, price 1, demand 100, served 60 -> cost 80
        let topo = topology(vec![load_bus("1", 1.0, 100.0, 0.0)], vec![]);
        let window = StepWindow { start: 0, len: 2 };
        let mut vars = DispatchVars::zeros(1, 0, 2);
        vars.p_load[(0, 0)] = 60.0;
        vars.p_load[(0, 1)] = 60.0;
        assert_eq!(load_loss_cost(&vars, &topo, window).unwrap(), 80.0);
    }

    #[test]
    fn load_loss_cost_monotone_in_served_power() {
        let topo = topology(vec![load_bus("1", 2.0, 100.0, 0.0)], vec![]);
        let window = StepWindow { start: 0, len: 1 };
        let mut vars = DispatchVars::zeros(1, 0, 1);
        let mut prev = f64::INFINITY;
        for served in [0.0, 25.0, 50.0, 100.0] {
            vars.p_load[(0, 0)] = served;
            let c = load_loss_cost(&vars, &topo, window).unwrap();
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let topo = topology(vec![load_bus("1", 1.0, 10.0, 0.0)], vec![]);
        let window = StepWindow { start: 0, len: 3 };
        let vars = DispatchVars::zeros(1, 0, 2);
        assert!(load_loss_cost(&vars, &topo, window).is_err());
    }

    #[test]
    fn zero_demand_network_dispatches_to_zero() {
        let topo = topology(
            vec![dg_bus("1", 50.0, 20.0), simple_bus("2")],
            vec![line(0, 1, false)],
        );
        let config = config_for(&topo, 2);
        let delta = ConnectivityMap::fully_connected(1, 2);
        let window = StepWindow { start: 0, len: 2 };
        let (vars, obj) = solve_system(&topo, &config, &delta, window);
        assert!(obj.abs() < 1e-6);
        for t in 0..2 {
            assert!(vars.p_load[(0, t)].abs() < 1e-6);
            assert!(vars.p_dg[(0, t)].abs() < 1e-6);
            assert!(vars.p_flow[(0, t)].abs() < 1e-6);
        }
    }

    #[test]
    fn islanded_load_cannot_be_served() {
        // DG at bus 1, load at bus 2, only line open
        let topo = topology(
            vec![dg_bus("1", 100.0, 50.0), load_bus("2", 1.0, 80.0, 20.0)],
            vec![line(0, 1, false)],
        );
        let config = config_for(&topo, 1);
        let mut delta = ConnectivityMap::fully_connected(1, 1);
        delta.delta[(0, 0)] = false;
        let window = StepWindow { start: 0, len: 1 };
        let (vars, obj) = solve_system(&topo, &config, &delta, window);
        assert!(vars.p_load[(1, 0)].abs() < 1e-9);
        assert!(vars.p_flow[(0, 0)].abs() < 1e-12);
        assert!((obj - 80.0).abs() < 1e-6);
    }

    /// Exhaustive 1 kW grid search over served load levels on a three-bus
    /// chain; the QP optimum must match it.
    #[test]
    fn three_bus_chain_matches_grid_search() {
        let topo = topology(
            vec![
                dg_bus("1", 70.0, 0.0),
                load_bus("2", 1.0, 40.0, 0.0),
                load_bus("3", 2.0, 60.0, 0.0),
            ],
            vec![line_limited(0, 1, 65.0), line_limited(1, 2, 35.0)],
        );
        let config = config_for(&topo, 1);
        let delta = ConnectivityMap::fully_connected(2, 1);
        let window = StepWindow { start: 0, len: 1 };
        let (_, obj) = solve_system(&topo, &config, &delta, window);

        let mut best = f64::INFINITY;
        for pl2 in 0..=40 {
            for pl3 in 0..=60 {
                let (pl2, pl3) = (pl2 as f64, pl3 as f64);
                let feasible = pl2 + pl3 <= 70.0 && pl2 + pl3 <= 65.0 && pl3 <= 35.0;
                if feasible {
                    let cost = 1.0 * (40.0 - pl2) + 2.0 * (60.0 - pl3);
                    best = best.min(cost);
                }
            }
        }
        assert!(
            (obj - best).abs() < 1e-4,
            "qp {obj} vs grid search {best}"
        );
    }

    #[test]
    fn solution_invariants_hold() {
        let topo = topology(
            vec![
                dg_bus("1", 120.0, 60.0),
                load_bus("2", 1.0, 50.0, 20.0),
                load_bus("3", 3.0, 70.0, 30.0),
                load_bus("4", 2.0, 40.0, 10.0),
            ],
            vec![
                line(0, 1, false),
                line(1, 2, true),
                line(2, 3, false),
                line(3, 0, true),
            ],
        );
        let config = config_for(&topo, 3);
        // one switched line open at some steps
        let mut delta = ConnectivityMap::fully_connected(4, 3);
        delta.delta[(1, 0)] = false;
        delta.delta[(3, 2)] = false;
        let window = StepWindow { start: 0, len: 3 };
        let (vars, obj) = solve_system(&topo, &config, &delta, window);
        assert!(vars.all_finite());
        let (rp, rq) = balance_residuals(&vars, &topo);
        assert!(rp <= 1e-6, "P balance {rp}");
        assert!(rq <= 1e-6, "Q balance {rq}");
        assert!(gated_flow_violation(&vars, &delta) <= 1e-9);
        assert!(voltage_band_violation(&vars, &config) <= 1e-9);
        assert!(voltage_relation_residual(&vars, &topo, &config, &delta) <= 1e-6);
        let recomputed = load_loss_cost(&vars, &topo, window).unwrap();
        assert!((recomputed - obj).abs() < 1e-6);
    }

    #[test]
    fn proportional_shedding_couples_q_to_p() {
        let topo = topology(
            vec![dg_bus("1", 100.0, 100.0), load_bus("2", 1.0, 80.0, 40.0)],
            vec![line_limited(0, 1, 60.0)],
        );
        let config = config_for(&topo, 1);
        let delta = ConnectivityMap::fully_connected(1, 1);
        let window = StepWindow { start: 0, len: 1 };
        let (vars, _) = solve_system(&topo, &config, &delta, window);
        // served p is limited to 60 by the line; q must follow at the same
        // ratio q/p = 40/80
        assert!((vars.p_load[(1, 0)] - 60.0).abs() < 1e-5);
        assert!((vars.q_load[(1, 0)] - 30.0).abs() < 1e-5);
    }

    #[test]
    fn every_availability_pattern_stays_feasible() {
        // the all-zeros dispatch satisfies any availability pattern, so the
        // QP can never be infeasible whatever the integer decisions are
        let topo = topology(
            vec![
                dg_bus("1", 90.0, 40.0),
                load_bus("2", 1.0, 50.0, 25.0),
                load_bus("3", 2.0, 60.0, 30.0),
            ],
            vec![line(0, 1, true), line(1, 2, true), line(2, 0, true)],
        );
        let config = config_for(&topo, 2);
        let window = StepWindow { start: 0, len: 2 };
        for mask in 0..64u32 {
            let mut delta = ConnectivityMap::fully_connected(3, 2);
            for l in 0..3 {
                for t in 0..2 {
                    delta.delta[(l, t)] = mask & (1 << (l * 2 + t)) != 0;
                }
            }
            let (inst, _) = build_system_qp(&topo, &config, &delta, window).unwrap();
            let sol = solve_qp(&inst, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal, "mask {mask}");
        }
    }
}
