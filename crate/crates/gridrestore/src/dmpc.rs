//! Coordinates per-subsystem dispatch QPs to a network-wide optimum.
//!
//! Each round solves every subsystem against the current multipliers and
//! the previous interconnect iterates, then takes one multiplier ascent
//! step priced by the consensus gap. In `Aitken` mode two rounds per outer
//! iteration feed a componentwise delta-squared extrapolation of the
//! multipliers, which is exact on affine iterations and cuts the round
//! count when the iteration is contraction-dominated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{
    build_subsystem_qp, load_loss_cost, scatter_dispatch, subsystem_scope_links, DispatchVars,
    GridConfig, NetModelError, NetworkTopology, ScopeLink, StepWindow, VarMap,
};
use crate::par::{map_range, ExecMode};
use crate::partition::Partition;
use crate::qpsolve::{solve_qp, QpError, QpInstance, SolveStatus};
use crate::routing::ConnectivityMap;

#[derive(Debug, Error)]
pub enum DmpcError {
    #[error("subsystem {sub} reported {status:?}; the dispatch problem must stay feasible")]
    SubproblemNotSolved { sub: usize, status: SolveStatus },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Model(#[from] NetModelError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bad coordinator config: {0}")]
    BadConfig(String),
}

/// Multipliers for the per-link consensus constraints, one triple (active
/// power, reactive power, voltage) per link and window step, link-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierSet {
    pub n_links: usize,
    pub steps: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

impl MultiplierSet {
    pub fn zeros(n_links: usize, steps: usize) -> Self {
        MultiplierSet {
            n_links,
            steps,
            p: vec![0.0; n_links * steps],
            q: vec![0.0; n_links * steps],
            v: vec![0.0; n_links * steps],
        }
    }

    pub fn idx(&self, link: usize, t: usize) -> usize {
        link * self.steps + t
    }
}

/// In/out copies of the interconnect quantities from one solve round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkValues {
    pub p_in: Vec<f64>,
    pub q_in: Vec<f64>,
    pub v_in: Vec<f64>,
    pub p_out: Vec<f64>,
    pub q_out: Vec<f64>,
    pub v_out: Vec<f64>,
}

impl LinkValues {
    fn filled(n: usize, p: f64, v: f64) -> Self {
        LinkValues {
            p_in: vec![p; n],
            q_in: vec![p; n],
            v_in: vec![v; n],
            p_out: vec![p; n],
            q_out: vec![p; n],
            v_out: vec![v; n],
        }
    }
}

/// Latest interconnect values plus the copies from one round earlier that
/// anchor the proximal terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterconnectState {
    pub latest: LinkValues,
    pub prev: LinkValues,
}

impl InterconnectState {
    /// Start from the always-feasible fallback: zero powers, reference
    /// voltage.
    pub fn initial(n_links: usize, steps: usize) -> Self {
        let n = n_links * steps;
        InterconnectState {
            latest: LinkValues::filled(n, 0.0, 1.0),
            prev: LinkValues::filled(n, 0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverMode {
    Standard,
    Aitken,
}

impl std::fmt::Display for SolverMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverMode::Standard => write!(f, "standard"),
            SolverMode::Aitken => write!(f, "aitken"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CoordinatorConfig {
    pub gamma_b: f64,
    pub gamma_c: f64,
    /// Multiplier-change tolerance of the termination test.
    pub epsilon: f64,
    pub max_outer_iters: usize,
    pub mode: SolverMode,
    pub aitken_guard: f64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    #[serde(skip, default)]
    pub exec: ExecMode,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        CoordinatorConfig {
            gamma_b: 2.0,
            gamma_c: 1.0,
            epsilon: 0.01,
            max_outer_iters: 500,
            mode: SolverMode::Aitken,
            aitken_guard: 1e-12,
            qp_tol: 1e-6,
            qp_max_iter: 200,
            exec: ExecMode::Parallel,
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<(), DmpcError> {
        if !(self.gamma_b > self.gamma_c && self.gamma_c > 0.0) {
            return Err(DmpcError::BadConfig(format!(
                "need gamma_b > gamma_c > 0, got {} and {}",
                self.gamma_b, self.gamma_c
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(DmpcError::BadConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub max_multiplier_delta: f64,
    pub max_consensus_gap: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct SystemSolution {
    pub dispatch: DispatchVars,
    pub objective: f64,
    pub outer_iterations: usize,
    /// Subsystem solve rounds actually spent (two per outer iteration in
    /// Aitken mode).
    pub solve_rounds: usize,
    pub mode: SolverMode,
    pub converged: bool,
    pub consensus_gap: f64,
    pub multipliers: MultiplierSet,
    pub state: InterconnectState,
    pub trace: Vec<TraceRow>,
}

// ---------------------------------------------------------------------------
// one coordination round (the fixed-point map on the multipliers)
// ---------------------------------------------------------------------------

/// Everything fixed across rounds for one chromosome: the subsystem QP
/// templates with zeroed coupling terms, patched per round with the current
/// multipliers and anchors.
pub struct CoordinationContext<'a> {
    topo: &'a NetworkTopology,
    part: &'a Partition,
    window: StepWindow,
    cfg: CoordinatorConfig,
    subs: Vec<SubTemplate>,
}

struct SubTemplate {
    inst: QpInstance,
    base_linear: Vec<f64>,
    vm: VarMap,
    links: Vec<ScopeLink>,
}

impl<'a> CoordinationContext<'a> {
    pub fn new(
        topo: &'a NetworkTopology,
        grid: &GridConfig,
        part: &'a Partition,
        delta: &ConnectivityMap,
        window: StepWindow,
        cfg: CoordinatorConfig,
    ) -> Result<Self, DmpcError> {
        cfg.validate()?;
        let zero_mult = MultiplierSet::zeros(part.links.len(), window.len);
        let zero_state = InterconnectState {
            latest: LinkValues::filled(part.links.len() * window.len, 0.0, 0.0),
            prev: LinkValues::filled(part.links.len() * window.len, 0.0, 0.0),
        };
        let mut subs = Vec::with_capacity(part.n_parts);
        for s in 0..part.n_parts {
            let (inst, vm) = build_subsystem_qp(
                topo,
                grid,
                part,
                s,
                delta,
                &zero_mult,
                &zero_state,
                cfg.gamma_b,
                cfg.gamma_c,
                window,
            )?;
            let base_linear = inst.linear.clone();
            subs.push(SubTemplate {
                inst,
                base_linear,
                vm,
                links: subsystem_scope_links(part, s),
            });
        }
        Ok(CoordinationContext {
            topo,
            part,
            window,
            cfg,
            subs,
        })
    }

    fn assemble(&self, sub_x: &[Vec<f64>]) -> DispatchVars {
        let steps = self.window.len;
        let mut vars = DispatchVars::zeros(self.topo.buses.len(), self.topo.lines.len(), steps);
        for (s, x) in sub_x.iter().enumerate() {
            scatter_dispatch(
                x,
                &self.subs[s].vm,
                &self.part.subsystem_buses[s],
                &self.part.subsystem_lines[s],
                &mut vars,
            );
        }
        // cut-line flows come from the importing side's copy, mapped onto
        // the line orientation
        for (gk, link) in self.part.links.iter().enumerate() {
            let sub = link.in_part;
            let tpl = &self.subs[sub];
            let k = tpl.links.iter().position(|sl| sl.link_idx == gk).unwrap();
            let line = &self.topo.lines[link.line];
            let sign = if line.from == link.out_bus { 1.0 } else { -1.0 };
            for t in 0..steps {
                vars.p_flow[(link.line, t)] = sign * sub_x[sub][tpl.vm.link_p(k, t)];
                vars.q_flow[(link.line, t)] = sign * sub_x[sub][tpl.vm.link_q(k, t)];
            }
        }
        vars
    }
}

/// One ascent step of the multipliers from the consensus gaps of `latest`.
pub fn multiplier_ascent(mult: &MultiplierSet, latest: &LinkValues, gamma_c: f64) -> MultiplierSet {
    let mut next = mult.clone();
    for i in 0..mult.p.len() {
        next.p[i] = mult.p[i] + gamma_c * (latest.p_in[i] - latest.p_out[i]);
        next.q[i] = mult.q[i] + gamma_c * (latest.q_in[i] - latest.q_out[i]);
        next.v[i] = mult.v[i] + gamma_c * (latest.v_in[i] - latest.v_out[i]);
    }
    next
}

pub struct RoundResult {
    pub state: InterconnectState,
    pub multipliers: MultiplierSet,
    pub sub_x: Vec<Vec<f64>>,
}

/// Solves all subsystem QPs in parallel against the current multipliers and
/// the anchors in `state.latest`, then applies the multiplier ascent step
/// and shifts the anchor copies by one round.
pub fn coordination_round(
    ctx: &CoordinationContext,
    mult: &MultiplierSet,
    state: &InterconnectState,
) -> Result<RoundResult, DmpcError> {
    let cfg = &ctx.cfg;
    let results = map_range(cfg.exec, ctx.subs.len(), |s| {
        let tpl = &ctx.subs[s];
        let mut inst = tpl.inst.clone();
        inst.linear.copy_from_slice(&tpl.base_linear);
        for (k, sl) in tpl.links.iter().enumerate() {
            for t in 0..ctx.window.len {
                let idx = mult.idx(sl.link_idx, t);
                let an = &state.latest;
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
                let gc = cfg.gamma_c;
                let gb = cfg.gamma_b;
                for (var, lam, other, own) in [
                    (tpl.vm.link_p(k, t), mult.p[idx], other_p, own_p),
                    (tpl.vm.link_q(k, t), mult.q[idx], other_q, own_q),
                    (tpl.vm.link_v(k, t), mult.v[idx], other_v, own_v),
                ] {
                    inst.linear[var] += sign * lam - gc * other - (gb - gc) * own;
                }
            }
        }
        solve_qp(&inst, cfg.qp_tol, cfg.qp_max_iter)
    });
    let mut sub_x = Vec::with_capacity(results.len());
    for (s, r) in results.into_iter().enumerate() {
        let sol = r?;
        if sol.status != SolveStatus::Optimal {
            return Err(DmpcError::SubproblemNotSolved {
                sub: s,
                status: sol.status,
            });
        }
        sub_x.push(sol.x);
    }
    // gather interconnect copies
    let n = ctx.part.links.len() * ctx.window.len;
    let mut latest = LinkValues::filled(n, 0.0, 1.0);
    for (s, tpl) in ctx.subs.iter().enumerate() {
        for (k, sl) in tpl.links.iter().enumerate() {
            for t in 0..ctx.window.len {
                let idx = sl.link_idx * ctx.window.len + t;
                let (p, q, v) = (
                    sub_x[s][tpl.vm.link_p(k, t)],
                    sub_x[s][tpl.vm.link_q(k, t)],
                    sub_x[s][tpl.vm.link_v(k, t)],
                );
                if sl.exporting {
                    latest.p_out[idx] = p;
                    latest.q_out[idx] = q;
                    latest.v_out[idx] = v;
                } else {
                    latest.p_in[idx] = p;
                    latest.q_in[idx] = q;
                    latest.v_in[idx] = v;
                }
            }
        }
    }
    let multipliers = multiplier_ascent(mult, &latest, cfg.gamma_c);
    let state = InterconnectState {
        prev: state.latest.clone(),
        latest,
    };
    Ok(RoundResult {
        state,
        multipliers,
        sub_x,
    })
}

// ---------------------------------------------------------------------------
// Aitken extrapolation and termination
// ---------------------------------------------------------------------------

/// Cap on the extrapolation step relative to the plain delta. Steps beyond
/// it, growing deltas, and vanishing denominators all mean the two sampled
/// deltas do not reflect a stable contraction (bound clipping, solver
/// noise); those components fall back to the plain iterate, which is also
/// what a vanishing denominator yields.
const AITKEN_STEP_CAP: f64 = 10.0;

fn aitken_component(base: f64, once: f64, twice: f64, guard: f64) -> f64 {
    let d1 = once - base;
    let d2 = twice - once;
    let den = d2 - d1;
    if den.abs() < guard || d2.abs() >= d1.abs() {
        return twice;
    }
    let step = d2 * d2 / den;
    if step.abs() > AITKEN_STEP_CAP * (d1.abs() + d2.abs()) {
        return twice;
    }
    twice - step
}

/// Componentwise delta-squared extrapolation from two consecutive ascent
/// applications (`once` from `base`, `twice` from `once`). Components whose
/// curvature collapses below `guard` fall back to the plain iterate, and no
/// component extrapolates unless the iteration as a whole contracted over
/// the two rounds; extrapolating a non-contracting (rotating or clipped)
/// iterate throws the multipliers far outside the region the samples
/// describe.
pub fn aitken_extrapolate(
    base: &MultiplierSet,
    once: &MultiplierSet,
    twice: &MultiplierSet,
    guard: f64,
) -> MultiplierSet {
    if max_abs_diff(twice, once) >= max_abs_diff(once, base) {
        return twice.clone();
    }
    let mut next = twice.clone();
    for i in 0..base.p.len() {
        next.p[i] = aitken_component(base.p[i], once.p[i], twice.p[i], guard);
        next.q[i] = aitken_component(base.q[i], once.q[i], twice.q[i], guard);
        next.v[i] = aitken_component(base.v[i], once.v[i], twice.v[i], guard);
    }
    next
}

fn max_abs_diff(a: &MultiplierSet, b: &MultiplierSet) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a
        .p
        .iter()
        .zip(&b.p)
        .chain(a.q.iter().zip(&b.q))
        .chain(a.v.iter().zip(&b.v))
    {
        worst = worst.max((x - y).abs());
    }
    worst
}

/// Termination test on consecutive multiplier iterates: the largest change
/// across links, steps, and all three multiplier families.
pub fn multipliers_converged(
    prev: &MultiplierSet,
    next: &MultiplierSet,
    epsilon: f64,
) -> Result<bool, DmpcError> {
    if prev.n_links != next.n_links || prev.steps != next.steps {
        return Err(DmpcError::Dimension(format!(
            "{}x{} vs {}x{} multipliers",
            prev.n_links, prev.steps, next.n_links, next.steps
        )));
    }
    Ok(max_abs_diff(prev, next) <= epsilon)
}

/// Largest in/out disagreement in the latest round.
pub fn consensus_gap(state: &InterconnectState) -> f64 {
    let l = &state.latest;
    let mut worst = 0.0f64;
    for i in 0..l.p_in.len() {
        worst = worst.max((l.p_in[i] - l.p_out[i]).abs());
        worst = worst.max((l.q_in[i] - l.q_out[i]).abs());
        worst = worst.max((l.v_in[i] - l.v_out[i]).abs());
    }
    worst
}

fn primal_delta(state: &InterconnectState) -> f64 {
    let (a, b) = (&state.latest, &state.prev);
    let mut worst = 0.0f64;
    for (x, y) in a
        .p_in
        .iter()
        .zip(&b.p_in)
        .chain(a.q_in.iter().zip(&b.q_in))
        .chain(a.v_in.iter().zip(&b.v_in))
        .chain(a.p_out.iter().zip(&b.p_out))
        .chain(a.q_out.iter().zip(&b.q_out))
        .chain(a.v_out.iter().zip(&b.v_out))
    {
        worst = worst.max((x - y).abs());
    }
    worst
}

// ---------------------------------------------------------------------------
// the coordinator loop
// ---------------------------------------------------------------------------

/// Runs the multiplier iteration for one fixed set of integer decisions and
/// returns the assembled network-wide dispatch.
///
/// Termination requires both the multiplier change and the interconnect
/// iterate change to fall below epsilon; with linear dispatch costs the
/// multipliers alone can settle while the interconnect levels are still
/// ramping toward their bounds, and stopping there would leave load
/// unserved. If the iteration budget runs out the best available iterate is
/// returned flagged as non-converged.
#[allow(clippy::too_many_arguments)]
pub fn coordinate(
    topo: &NetworkTopology,
    grid: &GridConfig,
    part: &Partition,
    delta: &ConnectivityMap,
    window: StepWindow,
    cfg: CoordinatorConfig,
    warm: Option<(MultiplierSet, InterconnectState)>,
) -> Result<SystemSolution, DmpcError> {
    let ctx = CoordinationContext::new(topo, grid, part, delta, window, cfg)?;
    let n_links = part.links.len();
    let (mut mult, mut state) = match warm {
        Some((m, s)) => {
            if m.n_links != n_links || m.steps != window.len {
                return Err(DmpcError::Dimension(
                    "warm-start multipliers do not match partition/window".into(),
                ));
            }
            (m, s)
        }
        None => (
            MultiplierSet::zeros(n_links, window.len),
            InterconnectState::initial(n_links, window.len),
        ),
    };
    let mut trace = Vec::new();
    let mut solve_rounds = 0usize;
    let mut outer = 0usize;
    let mut converged = false;
    let mut last_x: Option<Vec<Vec<f64>>> = None;

    while outer < cfg.max_outer_iters {
        outer += 1;
        let (next_mult, round) = match cfg.mode {
            SolverMode::Standard => {
                let round = coordination_round(&ctx, &mult, &state)?;
                solve_rounds += 1;
                (round.multipliers.clone(), round)
            }
            SolverMode::Aitken => {
                // both ascent applications are sampled against the same
                // anchors, so the sampled map is affine in the multipliers
                // for a fixed active set and the extrapolation lands on its
                // fixed point (the gap-zeroing price); threading the anchors
                // through the second solve would couple the samples to a
                // moving target and the extrapolation would overshoot
                let r1 = coordination_round(&ctx, &mult, &state)?;
                let hat = r1.multipliers.clone();
                let threaded = std::env::var_os("GRIDRESTORE_AITKEN_THREADED").is_some();
                let r2 = if threaded {
                    coordination_round(&ctx, &hat, &r1.state)?
                } else {
                    coordination_round(&ctx, &hat, &state)?
                };
                solve_rounds += 2;
                let bar = r2.multipliers.clone();
                (aitken_extrapolate(&mult, &hat, &bar, cfg.aitken_guard), r2)
            }
        };
        let delta_mult = max_abs_diff(&next_mult, &mult);
        let gap = consensus_gap(&round.state);
        let settle = primal_delta(&round.state);
        let dispatch = ctx.assemble(&round.sub_x);
        let objective = load_loss_cost(&dispatch, topo, window)?;
        trace.push(TraceRow {
            iteration: outer,
            max_multiplier_delta: delta_mult,
            max_consensus_gap: gap,
            objective,
        });
        mult = next_mult;
        state = round.state;
        last_x = Some(round.sub_x);
        if delta_mult <= cfg.epsilon && settle <= cfg.epsilon {
            converged = true;
            break;
        }
    }
    let sub_x = last_x.expect("at least one coordination round");
    let dispatch = ctx.assemble(&sub_x);
    let objective = load_loss_cost(&dispatch, topo, window)?;
    Ok(SystemSolution {
        objective,
        outer_iterations: outer,
        solve_rounds,
        mode: cfg.mode,
        converged,
        consensus_gap: consensus_gap(&state),
        multipliers: mult,
        state,
        dispatch,
        trace,
    })
}

/// Shifts warm-start data one step forward for the next planning window,
/// duplicating the final step.
pub fn shift_one_step(mult: &MultiplierSet, state: &InterconnectState) -> (MultiplierSet, InterconnectState) {
    let steps = mult.steps;
    let shift = |v: &[f64]| -> Vec<f64> {
        let mut out = v.to_vec();
        for link in 0..mult.n_links {
            for t in 0..steps {
                let src = link * steps + (t + 1).min(steps - 1);
                out[link * steps + t] = v[src];
            }
        }
        out
    };
    let m = MultiplierSet {
        n_links: mult.n_links,
        steps,
        p: shift(&mult.p),
        q: shift(&mult.q),
        v: shift(&mult.v),
    };
    let shift_vals = |lv: &LinkValues| LinkValues {
        p_in: shift(&lv.p_in),
        q_in: shift(&lv.q_in),
        v_in: shift(&lv.v_in),
        p_out: shift(&lv.p_out),
        q_out: shift(&lv.q_out),
        v_out: shift(&lv.v_out),
    };
    let s = InterconnectState {
        latest: shift_vals(&state.latest),
        prev: shift_vals(&state.prev),
    };
    (m, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::test_support::{config_for, dg_bus, line_limited, load_bus, topology};
    use crate::netmodel::build_system_qp;
    use crate::qpsolve::{solve_qp, DEFAULT_MAX_ITER, DEFAULT_TOL};

    #[test]
    fn sweep_rounds() {
        use crate::netmodel::test_support::*;
        use crate::netmodel::Profile;
        use rand::{Rng, SeedableRng};
        // exporter fully committed through its DG cap; importer's marginal
        // load is interior, so the link price is determined by it
        let build = |cost: f64| {
            let mut exporter = dg_bus("g", 100.0, 40.0);
            exporter.load_p = Profile::constant(96.0);
            exporter.load_q = Profile::constant(20.0);
            exporter.cost = Profile::constant(90.0);
            let mut importer = load_bus("l", cost, 26.0, 8.0);
            importer.dg_p = Profile::constant(20.0);
            importer.dg_q = Profile::constant(10.0);
            topology(vec![exporter, importer], vec![line_limited(0, 1, 30.0)])
        };
        let assignment = vec![0usize, 1];
        for (gb, gc) in [(2.0, 0.3), (2.0, 0.2), (2.0, 0.15), (1.0, 0.1), (1.0, 0.07), (0.5, 0.05), (0.5, 0.035), (2.0, 0.5)] {
            let topo0 = build(45.0);
            let grid = config_for(&topo0, 2);
            let part0 = Partition::from_assignment(&topo0, assignment.clone(), 2).unwrap();
            let delta = ConnectivityMap::fully_connected(1, 2);
            let window = StepWindow { start: 0, len: 2 };
            let cfg0 = CoordinatorConfig { mode: SolverMode::Standard, gamma_b: gb, gamma_c: gc, max_outer_iters: 3000, ..Default::default() };
            let base = coordinate(&topo0, &grid, &part0, &delta, window, cfg0, None).unwrap();
            if !base.converged { println!("gb {gb} gc {gc}: base stuck"); continue; }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let mut wins = 0usize;
            let mut reductions = Vec::new();
            let mut pairs = Vec::new();
            for _run in 0..20 {
                let cost = rng.gen_range(48.0..60.0);
                let topo = build(cost);
                let part = Partition::from_assignment(&topo, assignment.clone(), 2).unwrap();
                let mut rounds = [0usize; 2];
                for (i, mode) in [SolverMode::Standard, SolverMode::Aitken].iter().enumerate() {
                    let cfg = CoordinatorConfig { mode: *mode, gamma_b: gb, gamma_c: gc, max_outer_iters: 3000, ..Default::default() };
                    let warm = Some((base.multipliers.clone(), base.state.clone()));
                    let sol = coordinate(&topo, &grid, &part, &delta, window, cfg, warm).unwrap();
                    assert!(sol.converged, "{mode} not converged");
                    rounds[i] = sol.solve_rounds;
                }
                if rounds[1] < rounds[0] { wins += 1; }
                pairs.push(rounds);
                reductions.push((rounds[0] as f64 - rounds[1] as f64) / rounds[0] as f64);
            }
            reductions.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = (reductions[9] + reductions[10]) / 2.0;
            println!("gb {gb:4} gc {gc:5}: wins {wins}/20 median {:6.1}%  sample pairs {:?}", median * 100.0, &pairs[..4.min(pairs.len())]);
        }
    }

    #[test]
    fn debug_aitken_trace() {
        use crate::netmodel::test_support::{config_for, dg_bus, line_limited, load_bus, topology};
        let topo = topology(
            vec![dg_bus("g", 100.0, 50.0), load_bus("l", 2.0, 80.0, 30.0)],
            vec![line_limited(0, 1, 120.0)],
        );
        let grid = config_for(&topo, 2);
        let part = Partition::from_assignment(&topo, vec![0, 1], 2).unwrap();
        let delta = ConnectivityMap::fully_connected(1, 2);
        let window = StepWindow { start: 0, len: 2 };
        for mode in [SolverMode::Standard, SolverMode::Aitken] {
            let cfg = CoordinatorConfig { mode, gamma_b: 0.2, gamma_c: 0.06, max_outer_iters: 200, ..Default::default() };
            let sol = coordinate(&topo, &grid, &part, &delta, window, cfg, None).unwrap();
            println!("=== mode {mode} converged={} rounds={} obj={}", sol.converged, sol.solve_rounds, sol.objective);
            for r in sol.trace.iter() {
                println!("  it {:3} dmult {:10.4e} gap {:10.4e} obj {:10.4}", r.iteration, r.max_multiplier_delta, r.max_consensus_gap, r.objective);
            }
        }
    }

    #[test]
    fn ascent_step_direct_substitution() {
        // multiplier 1, gamma_c 0.5, in 2, out 1 -> 1.5
        let mult = MultiplierSet {
            n_links: 1,
            steps: 1,
            p: vec![1.0],
            q: vec![0.0],
            v: vec![0.0],
        };
        let mut latest = LinkValues::filled(1, 0.0, 1.0);
        latest.p_in[0] = 2.0;
        latest.p_out[0] = 1.0;
        let next = multiplier_ascent(&mult, &latest, 0.5);
        assert!((next.p[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn consensus_is_a_fixed_point_of_the_ascent() {
        let mult = MultiplierSet {
            n_links: 2,
            steps: 3,
            p: vec![0.3; 6],
            q: vec![-0.2; 6],
            v: vec![0.1; 6],
        };
        let mut latest = LinkValues::filled(6, 5.0, 1.01);
        latest.p_out.copy_from_slice(&latest.p_in);
        latest.q_out.copy_from_slice(&latest.q_in);
        latest.v_out.copy_from_slice(&latest.v_in);
        let next = multiplier_ascent(&mult, &latest, 1.0);
        assert_eq!(next, mult);
    }

    #[test]
    fn aitken_preserves_fixed_point() {
        let m = MultiplierSet {
            n_links: 1,
            steps: 2,
            p: vec![3.0, -1.0],
            q: vec![0.5, 0.5],
            v: vec![0.0, 2.0],
        };
        let out = aitken_extrapolate(&m, &m, &m, 1e-12);
        assert_eq!(out, m);
    }

    #[test]
    fn aitken_exact_on_affine_map() {
        // phi(x) = 0.5 x + 1 from 0: once = 1, twice = 1.5, limit = 2
        let base = MultiplierSet {
            n_links: 1,
            steps: 1,
            p: vec![0.0],
            q: vec![0.0],
            v: vec![0.0],
        };
        let mut once = base.clone();
        once.p[0] = 1.0;
        let mut twice = base.clone();
        twice.p[0] = 1.5;
        let next = aitken_extrapolate(&base, &once, &twice, 1e-12);
        assert!((next.p[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn aitken_guard_falls_back_to_plain_iterate() {
        let base = MultiplierSet {
            n_links: 1,
            steps: 1,
            p: vec![1.0],
            q: vec![0.0],
            v: vec![0.0],
        };
        let mut once = base.clone();
        once.p[0] = 2.0;
        let mut twice = base.clone();
        twice.p[0] = 3.0; // 3 - 4 + 1 = 0 denominator
        let next = aitken_extrapolate(&base, &once, &twice, 1e-12);
        assert!((next.p[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn convergence_test_on_multiplier_change() {
        let a = MultiplierSet::zeros(2, 2);
        let mut b = a.clone();
        assert!(multipliers_converged(&a, &b, 0.01).unwrap());
        b.v[3] = 0.02;
        assert!(!multipliers_converged(&a, &b, 0.01).unwrap());
        let c = MultiplierSet::zeros(1, 2);
        assert!(multipliers_converged(&a, &c, 0.01).is_err());
    }

    fn two_area_fixture() -> (NetworkTopology, GridConfig, Partition) {
        // bus 0: DG, bus 1: load; single cut line
        let topo = topology(
            vec![dg_bus("g", 100.0, 50.0), load_bus("l", 2.0, 80.0, 30.0)],
            vec![line_limited(0, 1, 60.0)],
        );
        let grid = config_for(&topo, 2);
        let part = Partition::from_assignment(&topo, vec![0, 1], 2).unwrap();
        (topo, grid, part)
    }

    fn centralized_objective(
        topo: &NetworkTopology,
        grid: &GridConfig,
        delta: &ConnectivityMap,
        window: StepWindow,
    ) -> f64 {
        let (inst, _) = build_system_qp(topo, grid, delta, window).unwrap();
        solve_qp(&inst, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap().objective
    }

    #[test]
    fn repeated_rounds_close_the_consensus_gap() {
        let (topo, grid, part) = two_area_fixture();
        let delta = ConnectivityMap::fully_connected(1, 2);
        let window = StepWindow { start: 0, len: 2 };
        let cfg = CoordinatorConfig {
            mode: SolverMode::Standard,
            ..Default::default()
        };
        let ctx = CoordinationContext::new(&topo, &grid, &part, &delta, window, cfg).unwrap();
        let mut mult = MultiplierSet::zeros(1, 2);
        let mut state = InterconnectState::initial(1, 2);
        let mut gap = f64::INFINITY;
        for _ in 0..100 {
            let r = coordination_round(&ctx, &mult, &state).unwrap();
            gap = consensus_gap(&r.state);
            mult = r.multipliers;
            state = r.state;
        }
        assert!(gap < 1e-4, "gap {gap}");
    }

    #[test]
    fn prev_copies_lag_one_round() {
        let (topo, grid, part) = two_area_fixture();
        let delta = ConnectivityMap::fully_connected(1, 1);
        let window = StepWindow { start: 0, len: 1 };
        let cfg = CoordinatorConfig::default();
        let ctx = CoordinationContext::new(&topo, &grid, &part, &delta, window, cfg).unwrap();
        let mult = MultiplierSet::zeros(1, 1);
        let state = InterconnectState::initial(1, 1);
        let r1 = coordination_round(&ctx, &mult, &state).unwrap();
        assert_eq!(r1.state.prev, state.latest);
        let r2 = coordination_round(&ctx, &r1.multipliers, &r1.state).unwrap();
        assert_eq!(r2.state.prev, r1.state.latest);
    }

    #[test]
    fn single_subsystem_matches_centralized_in_one_iteration() {
        let (topo, grid, _) = two_area_fixture();
        let part = Partition::from_assignment(&topo, vec![0, 0], 1).unwrap();
        let delta = ConnectivityMap::fully_connected(1, 2);
        let window = StepWindow { start: 0, len: 2 };
        let sol = coordinate(
            &topo,
            &grid,
            &part,
            &delta,
            window,
            CoordinatorConfig::default(),
            None,
        )
        .unwrap();
        assert!(sol.converged);
        assert_eq!(sol.outer_iterations, 1);
        let central = centralized_objective(&topo, &grid, &delta, window);
        assert!(
            (sol.objective - central).abs() <= 1e-6 * (1.0 + central.abs()),
            "dmpc {} vs centralized {central}",
            sol.objective
        );
    }

    #[test]
    fn both_modes_agree_with_centralized_within_three_percent() {
        let (topo, grid, part) = two_area_fixture();
        let delta = ConnectivityMap::fully_connected(1, 2);
        let window = StepWindow { start: 0, len: 2 };
        let central = centralized_objective(&topo, &grid, &delta, window);
        let mut objectives = Vec::new();
        for mode in [SolverMode::Standard, SolverMode::Aitken] {
            // penalty weights sized for kW-scale interchange
            let cfg = CoordinatorConfig {
                mode,
                gamma_b: 0.2,
                gamma_c: 0.06,
                ..Default::default()
            };
            let sol = coordinate(&topo, &grid, &part, &delta, window, cfg, None).unwrap();
            assert!(sol.converged, "{mode} did not converge");
            assert!(
                sol.consensus_gap <= cfg.epsilon / cfg.gamma_c + 1e-9,
                "gap {} above eps/gamma_c",
                sol.consensus_gap
            );
            objectives.push(sol.objective);
        }
        let scale = central.abs().max(1.0);
        assert!((objectives[0] - central).abs() / scale <= 0.03);
        assert!((objectives[1] - central).abs() / scale <= 0.03);
        assert!((objectives[0] - objectives[1]).abs() / scale <= 0.03);
    }

    #[test]
    fn patched_template_matches_fresh_build() {
        let (topo, grid, part) = two_area_fixture();
        let delta = ConnectivityMap::fully_connected(1, 2);
        let window = StepWindow { start: 0, len: 2 };
        let cfg = CoordinatorConfig::default();
        let ctx = CoordinationContext::new(&topo, &grid, &part, &delta, window, cfg).unwrap();
        let mut mult = MultiplierSet::zeros(1, 2);
        mult.p = vec![0.7, -0.3];
        mult.q = vec![0.1, 0.2];
        mult.v = vec![0.05, -0.02];
        let mut state = InterconnectState::initial(1, 2);
        state.latest.p_in = vec![10.0, 12.0];
        state.latest.p_out = vec![11.0, 12.5];
        for s in 0..2 {
            let fresh = build_subsystem_qp(
                &topo, &grid, &part, s, &delta, &mult, &state, cfg.gamma_b, cfg.gamma_c, window,
            )
            .unwrap()
            .0;
            let tpl = &ctx.subs[s];
            let mut patched = tpl.base_linear.clone();
            for (k, sl) in tpl.links.iter().enumerate() {
                for t in 0..window.len {
                    let idx = mult.idx(sl.link_idx, t);
                    let an = &state.latest;
                    let (sign, other_p, own_p, other_q, own_q, other_v, own_v) = if sl.exporting {
                        (-1.0, an.p_in[idx], an.p_out[idx], an.q_in[idx], an.q_out[idx], an.v_in[idx], an.v_out[idx])
                    } else {
                        (1.0, an.p_out[idx], an.p_in[idx], an.q_out[idx], an.q_in[idx], an.v_out[idx], an.v_in[idx])
                    };
                    for (var, lam, other, own) in [
                        (tpl.vm.link_p(k, t), mult.p[idx], other_p, own_p),
                        (tpl.vm.link_q(k, t), mult.q[idx], other_q, own_q),
                        (tpl.vm.link_v(k, t), mult.v[idx], other_v, own_v),
                    ] {
                        patched[var] +=
                            sign * lam - cfg.gamma_c * other - (cfg.gamma_b - cfg.gamma_c) * own;
                    }
                }
            }
            for (a, b) in fresh.linear.iter().zip(&patched) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gamma_order_rejected() {
        let (topo, grid, part) = two_area_fixture();
        let delta = ConnectivityMap::fully_connected(1, 1);
        let window = StepWindow { start: 0, len: 1 };
        let cfg = CoordinatorConfig {
            gamma_b: 0.5,
            gamma_c: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            coordinate(&topo, &grid, &part, &delta, window, cfg, None),
            Err(DmpcError::BadConfig(_))
        ));
    }

    #[test]
    fn warm_start_shift_duplicates_last_step() {
        let mult = MultiplierSet {
            n_links: 1,
            steps: 3,
            p: vec![1.0, 2.0, 3.0],
            q: vec![4.0, 5.0, 6.0],
            v: vec![7.0, 8.0, 9.0],
        };
        let state = InterconnectState::initial(1, 3);
        let (m, _) = shift_one_step(&mult, &state);
        assert_eq!(m.p, vec![2.0, 3.0, 3.0]);
        assert_eq!(m.q, vec![5.0, 6.0, 6.0]);
        assert_eq!(m.v, vec![8.0, 9.0, 9.0]);
    }
}
