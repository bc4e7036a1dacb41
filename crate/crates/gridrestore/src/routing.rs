//! Crews, damages, travel times, route timing, and the per-step line
//! availability map that couples repairs and switch decisions to the grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::Mat;
use crate::netmodel::{NetworkTopology, StepWindow};

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("unknown damage index {0}")]
    UnknownDamage(usize),
    #[error("negative travel time {minutes} between {from} and {to}")]
    NegativeTravel {
        from: String,
        to: String,
        minutes: f64,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// A damaged line segment awaiting repair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Damage {
    pub id: String,
    /// Line the damage sits on (topology index).
    pub line: usize,
    /// Nominal repair duration in minutes.
    pub repair_min: f64,
    /// When the damage appears; 0 for initial damages.
    pub emerge_min: f64,
    pub x: f64,
    pub y: f64,
    /// Optional per-crew repair durations overriding `repair_min`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub crew_repair: BTreeMap<String, f64>,
}

impl Damage {
    pub fn duration_for(&self, crew_id: &str, current: f64) -> f64 {
        self.crew_repair.get(crew_id).copied().unwrap_or(current)
    }
}

/// Either a named location (depot or damage site) or a point mid-travel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Position {
    Depot(usize),
    Damage(usize),
    Point { x: f64, y: f64 },
}

/// Live crew status carried between planning steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrewState {
    pub id: String,
    pub depot: usize,
    pub position: Position,
    /// Completion time of the ongoing repair; 0 when idle.
    pub busy_until: f64,
    pub ongoing: Option<usize>,
    pub ongoing_started: f64,
}

impl CrewState {
    pub fn at_depot(id: String, depot: usize) -> Self {
        CrewState {
            id,
            depot,
            position: Position::Depot(depot),
            busy_until: 0.0,
            ongoing: None,
            ongoing_started: 0.0,
        }
    }

    pub fn release_time(&self, t0: f64) -> f64 {
        t0.max(self.busy_until)
    }
}

/// A time-limited travel-time override, e.g. a blocked road represented by
/// a large finite duration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TravelOverride {
    /// Restrict to trips departing from this damage site; `None` = any origin.
    pub from_damage: Option<usize>,
    /// Destination damage the override applies to.
    pub to_damage: usize,
    pub minutes: f64,
    pub active_from: f64,
    pub active_until: Option<f64>,
}

/// Travel durations between depots, damage sites, and en-route crew
/// positions. Durations derive from straight-line distance at a fixed
/// speed; explicit matrix entries and timed overrides take precedence.
#[derive(Clone, Debug, Default)]
pub struct TravelTimeProvider {
    pub speed_kmh: f64,
    pub depot_xy: Vec<(f64, f64)>,
    pub damage_xy: Vec<(f64, f64)>,
    /// keys are location names: depot and damage ids as in the scenario file
    pub matrix: BTreeMap<(String, String), f64>,
    pub depot_names: Vec<String>,
    pub damage_names: Vec<String>,
    pub overrides: Vec<TravelOverride>,
}

impl TravelTimeProvider {
    pub fn euclidean(speed_kmh: f64) -> Self {
        TravelTimeProvider {
            speed_kmh,
            ..Default::default()
        }
    }

    pub fn position_xy(&self, p: &Position) -> (f64, f64) {
        match *p {
            Position::Depot(d) => self.depot_xy[d],
            Position::Damage(d) => self.damage_xy[d],
            Position::Point { x, y } => (x, y),
        }
    }

    fn location_name(&self, p: &Position) -> Option<&str> {
        match *p {
            Position::Depot(d) => Some(self.depot_names[d].as_str()),
            Position::Damage(d) => Some(self.damage_names[d].as_str()),
            Position::Point { .. } => None,
        }
    }

    /// Travel duration in minutes for a trip departing at `depart_min`.
    pub fn minutes(&self, from: &Position, to_damage: usize, depart_min: f64) -> f64 {
        // timed overrides win; the latest activation wins among overlaps
        let mut chosen: Option<&TravelOverride> = None;
        for ov in &self.overrides {
            if ov.to_damage != to_damage {
                continue;
            }
            if let Some(fd) = ov.from_damage {
                if !matches!(*from, Position::Damage(d) if d == fd) {
                    continue;
                }
            }
            let active = depart_min >= ov.active_from
                && ov.active_until.map_or(true, |u| depart_min < u);
            if active && chosen.map_or(true, |c| ov.active_from >= c.active_from) {
                chosen = Some(ov);
            }
        }
        if let Some(ov) = chosen {
            return ov.minutes;
        }
        if let Some(name) = self.location_name(from) {
            let key = (name.to_string(), self.damage_names[to_damage].clone());
            if let Some(&m) = self.matrix.get(&key) {
                return m;
            }
        }
        let (x0, y0) = self.position_xy(from);
        let (x1, y1) = self.damage_xy[to_damage];
        let dist_km = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        dist_km / self.speed_kmh * 60.0
    }

    /// Minutes from a position to a depot (only straight-line travel; used
    /// for the cost-free return leg).
    pub fn minutes_to_depot(&self, from: &Position, depot: usize) -> f64 {
        let (x0, y0) = self.position_xy(from);
        let (x1, y1) = self.depot_xy[depot];
        let dist_km = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        dist_km / self.speed_kmh * 60.0
    }
}

/// One crew's timed itinerary: damage, repair start, repair completion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouteSchedule {
    pub crew: usize,
    pub stops: Vec<RouteStop>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteStop {
    pub damage: usize,
    pub start_min: f64,
    pub completion_min: f64,
}

/// Walks a damage sequence: each start is the previous completion plus the
/// travel leg, evaluated at the departure instant.
pub fn schedule_route(
    crew_idx: usize,
    crew: &CrewState,
    sequence: &[usize],
    durations: &[f64],
    damages: &[Damage],
    travel: &TravelTimeProvider,
    t0: f64,
) -> Result<RouteSchedule, RoutingError> {
    let mut stops = Vec::new();
    let mut clock = crew.release_time(t0);
    let mut pos = if let Some(d) = crew.ongoing {
        // an ongoing repair pins the crew to the damage site until done
        stops.push(RouteStop {
            damage: d,
            start_min: crew.ongoing_started,
            completion_min: crew.busy_until,
        });
        Position::Damage(d)
    } else {
        crew.position
    };
    for &dmg in sequence {
        if dmg >= damages.len() {
            return Err(RoutingError::UnknownDamage(dmg));
        }
        let leg = travel.minutes(&pos, dmg, clock);
        if leg < 0.0 {
            return Err(RoutingError::NegativeTravel {
                from: format!("{pos:?}"),
                to: damages[dmg].id.clone(),
                minutes: leg,
            });
        }
        let start = clock + leg;
        let base = durations
            .get(dmg)
            .copied()
            .ok_or(RoutingError::UnknownDamage(dmg))?;
        let dur = damages[dmg].duration_for(&crew.id, base);
        stops.push(RouteStop {
            damage: dmg,
            start_min: start,
            completion_min: start + dur,
        });
        clock = start + dur;
        pos = Position::Damage(dmg);
    }
    Ok(RouteSchedule {
        crew: crew_idx,
        stops,
    })
}

/// Drops stops that begin at or after the window end; a repair straddling
/// the boundary stays.
pub fn truncate_to_window(schedule: &RouteSchedule, window_end_min: f64) -> RouteSchedule {
    RouteSchedule {
        crew: schedule.crew,
        stops: schedule
            .stops
            .iter()
            .copied()
            .filter(|s| s.start_min < window_end_min)
            .collect(),
    }
}

/// Per-line damage status at planning time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineDamageState {
    Healthy,
    Repaired,
    /// Unrepaired; `completion` is the scheduled repair completion if any
    /// crew reaches it inside the plan.
    Pending,
}

/// Switch intents per switched line and window step, in the fixed order of
/// `switch_lines`.
#[derive(Clone, Debug)]
pub struct SwitchPlan {
    pub switch_lines: Vec<usize>,
    /// line-major bits: `bits[s * steps + t]`
    pub bits: Vec<bool>,
    pub steps: usize,
}

impl SwitchPlan {
    pub fn all_closed(switch_lines: Vec<usize>, steps: usize) -> Self {
        let n = switch_lines.len();
        SwitchPlan {
            switch_lines,
            bits: vec![true; n * steps],
            steps,
        }
    }

    fn closed(&self, slot: usize, t: usize) -> bool {
        self.bits[slot * self.steps + t]
    }
}

/// Line availability (`delta`) and switch intent per line and window step.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMap {
    pub delta: Mat<bool>,
    pub intent: Mat<bool>,
}

impl ConnectivityMap {
    pub fn available(&self, line: usize, t: usize) -> bool {
        self.delta[(line, t)]
    }

    pub fn fully_connected(n_lines: usize, steps: usize) -> Self {
        ConnectivityMap {
            delta: Mat::filled(n_lines, steps, true),
            intent: Mat::filled(n_lines, steps, true),
        }
    }
}

/// Builds the availability map for one prediction window.
///
/// A damaged line becomes available at the first step whose start is at or
/// after the repair completion, and only while its switch (if any) is
/// closed; an undamaged switched line follows its switch intent; every
/// other line is always available.
#[allow(clippy::too_many_arguments)]
pub fn connectivity(
    topo: &NetworkTopology,
    line_damage: &[Option<usize>],
    damage_state: &[LineDamageState],
    completions: &BTreeMap<usize, f64>,
    switch_plan: &SwitchPlan,
    window: StepWindow,
    dt_min: f64,
) -> ConnectivityMap {
    let n_lines = topo.lines.len();
    let steps = window.len;
    let mut delta = Mat::filled(n_lines, steps, true);
    let mut intent = Mat::filled(n_lines, steps, true);
    let mut switch_slot = vec![None; n_lines];
    for (s, &l) in switch_plan.switch_lines.iter().enumerate() {
        switch_slot[l] = Some(s);
    }
    for line in 0..n_lines {
        for t in 0..steps {
            let closed = match switch_slot[line] {
                Some(s) => switch_plan.closed(s, t),
                None => true,
            };
            intent[(line, t)] = closed;
            let step_start_min = (window.start + t) as f64 * dt_min;
            let repaired_by_step = match line_damage[line] {
                None => true,
                Some(d) => match damage_state[d] {
                    LineDamageState::Healthy | LineDamageState::Repaired => true,
                    LineDamageState::Pending => completions
                        .get(&d)
                        .map_or(false, |&c| c <= step_start_min),
                },
            };
            delta[(line, t)] = closed && repaired_by_step;
        }
    }
    ConnectivityMap { delta, intent }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::test_support::{line, simple_bus, topology};

    fn damage(id: &str, line: usize, repair: f64, x: f64, y: f64) -> Damage {
        Damage {
            id: id.into(),
            line,
            repair_min: repair,
            emerge_min: 0.0,
            x,
            y,
            crew_repair: BTreeMap::new(),
        }
    }

    fn provider_for(damages: &[Damage]) -> TravelTimeProvider {
        TravelTimeProvider {
            speed_kmh: 30.0,
            depot_xy: vec![(0.0, 0.0)],
            damage_xy: damages.iter().map(|d| (d.x, d.y)).collect(),
            depot_names: vec!["dep".into()],
            damage_names: damages.iter().map(|d| d.id.clone()).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn empty_sequence_is_idle() {
        let damages = vec![damage("a", 0, 10.0, 1.0, 0.0)];
        let travel = provider_for(&damages);
        let crew = CrewState::at_depot("c1".into(), 0);
        let s = schedule_route(0, &crew, &[], &[10.0], &damages, &travel, 0.0).unwrap();
        assert!(s.stops.is_empty());
    }

    #[test]
    fn route_timing_recursion() {
        // travel to A = 5 min, repair A = 10, travel A->B = 3, repair B = 6
        // speed 30 km/h -> 0.5 km/min
        let damages = vec![
            damage("a", 0, 10.0, 2.5, 0.0), // 2.5 km from depot -> 5 min
            damage("b", 1, 6.0, 4.0, 0.0),  // 1.5 km from a -> 3 min
        ];
        let travel = provider_for(&damages);
        let crew = CrewState::at_depot("c1".into(), 0);
        let s = schedule_route(0, &crew, &[0, 1], &[10.0, 6.0], &damages, &travel, 0.0).unwrap();
        assert!((s.stops[0].start_min - 5.0).abs() < 1e-9);
        assert!((s.stops[1].start_min - 18.0).abs() < 1e-9);
        assert!((s.stops[1].completion_min - 24.0).abs() < 1e-9);
    }

    #[test]
    fn depot_start_completion_matches_travel_plus_repair() {
        // travel 11.28 min, repair 6 min -> completion 17.28 min
        let dist_km = 11.28 * 30.0 / 60.0;
        let damages = vec![damage("d18", 0, 6.0, dist_km, 0.0)];
        let travel = provider_for(&damages);
        let crew = CrewState::at_depot("c1".into(), 0);
        let s = schedule_route(0, &crew, &[0], &[6.0], &damages, &travel, 0.0).unwrap();
        assert!((s.stops[0].completion_min - 17.28).abs() < 1e-9);
    }

    #[test]
    fn translation_equivariance() {
        let damages = vec![
            damage("a", 0, 7.0, 1.0, 2.0),
            damage("b", 1, 9.0, 3.0, 1.0),
        ];
        let travel = provider_for(&damages);
        let crew = CrewState::at_depot("c1".into(), 0);
        let base = schedule_route(0, &crew, &[1, 0], &[7.0, 9.0], &damages, &travel, 0.0).unwrap();
        let shifted =
            schedule_route(0, &crew, &[1, 0], &[7.0, 9.0], &damages, &travel, 12.5).unwrap();
        for (a, b) in base.stops.iter().zip(&shifted.stops) {
            assert!((b.start_min - a.start_min - 12.5).abs() < 1e-9);
            assert!((b.completion_min - a.completion_min - 12.5).abs() < 1e-9);
            assert!(b.completion_min > b.start_min);
        }
    }

    #[test]
    fn ongoing_task_pins_crew() {
        let damages = vec![
            damage("a", 0, 10.0, 1.0, 0.0),
            damage("b", 1, 5.0, 2.0, 0.0),
        ];
        let travel = provider_for(&damages);
        let mut crew = CrewState::at_depot("c1".into(), 0);
        crew.ongoing = Some(0);
        crew.ongoing_started = 3.0;
        crew.busy_until = 13.0;
        crew.position = Position::Damage(0);
        let s = schedule_route(0, &crew, &[1], &[10.0, 5.0], &damages, &travel, 10.0).unwrap();
        assert_eq!(s.stops[0].damage, 0);
        assert!((s.stops[0].completion_min - 13.0).abs() < 1e-9);
        // next leg departs only after the ongoing repair completes
        assert!(s.stops[1].start_min >= 13.0);
    }

    #[test]
    fn truncation_boundary_rule() {
        let sched = RouteSchedule {
            crew: 0,
            stops: vec![
                RouteStop {
                    damage: 0,
                    start_min: 10.0,
                    completion_min: 70.0,
                },
                RouteStop {
                    damage: 1,
                    start_min: 65.0,
                    completion_min: 80.0,
                },
            ],
        };
        let cut = truncate_to_window(&sched, 60.0);
        assert_eq!(cut.stops.len(), 1);
        assert_eq!(cut.stops[0].damage, 0);
        let unchanged = truncate_to_window(&sched, 100.0);
        assert_eq!(unchanged.stops.len(), 2);
    }

    fn two_line_topo() -> NetworkTopology {
        topology(
            vec![simple_bus("1"), simple_bus("2"), simple_bus("3")],
            vec![line(0, 1, false), line(1, 2, true)],
        )
    }

    #[test]
    fn plain_line_always_available() {
        let topo = two_line_topo();
        let plan = SwitchPlan::all_closed(vec![1], 3);
        let window = StepWindow { start: 0, len: 3 };
        let map = connectivity(
            &topo,
            &[None, None],
            &[],
            &BTreeMap::new(),
            &plan,
            window,
            10.0,
        );
        for t in 0..3 {
            assert!(map.available(0, t));
        }
    }

    #[test]
    fn repaired_line_comes_back_at_step_boundary() {
        // completion at 17.28 with 10-minute steps: unavailable at steps 0
        // and 1 (starts 0 and 10), available from step 2 (start 20) on
        let topo = two_line_topo();
        let plan = SwitchPlan::all_closed(vec![1], 4);
        let window = StepWindow { start: 0, len: 4 };
        let mut completions = BTreeMap::new();
        completions.insert(0usize, 17.28);
        let map = connectivity(
            &topo,
            &[Some(0), None],
            &[LineDamageState::Pending],
            &completions,
            &plan,
            window,
            10.0,
        );
        assert!(!map.available(0, 0));
        assert!(!map.available(0, 1));
        assert!(map.available(0, 2));
        assert!(map.available(0, 3));
    }

    #[test]
    fn unrepaired_line_stays_out_regardless_of_switch() {
        let topo = two_line_topo();
        let plan = SwitchPlan::all_closed(vec![1], 3);
        let window = StepWindow { start: 0, len: 3 };
        // damage on the switched line, never scheduled
        let map = connectivity(
            &topo,
            &[None, Some(0)],
            &[LineDamageState::Pending],
            &BTreeMap::new(),
            &plan,
            window,
            10.0,
        );
        for t in 0..3 {
            assert!(!map.available(1, t));
            assert!(map.intent[(1, t)]);
        }
    }

    #[test]
    fn switch_intent_gates_undamaged_switched_line() {
        let topo = two_line_topo();
        let mut plan = SwitchPlan::all_closed(vec![1], 2);
        plan.bits[0] = false; // open at step 0
        let window = StepWindow { start: 0, len: 2 };
        let map = connectivity(
            &topo,
            &[None, None],
            &[],
            &BTreeMap::new(),
            &plan,
            window,
            10.0,
        );
        assert!(!map.available(1, 0));
        assert!(map.available(1, 1));
        // delta never exceeds intent
        for l in 0..2 {
            for t in 0..2 {
                assert!(map.delta[(l, t)] <= map.intent[(l, t)]);
            }
        }
    }

    #[test]
    fn earlier_repair_never_hurts() {
        let topo = two_line_topo();
        let plan = SwitchPlan::all_closed(vec![1], 6);
        let window = StepWindow { start: 0, len: 6 };
        let mut late = BTreeMap::new();
        late.insert(0usize, 42.0);
        let mut early = BTreeMap::new();
        early.insert(0usize, 17.0);
        let m_late = connectivity(
            &topo,
            &[Some(0), None],
            &[LineDamageState::Pending],
            &late,
            &plan,
            window,
            10.0,
        );
        let m_early = connectivity(
            &topo,
            &[Some(0), None],
            &[LineDamageState::Pending],
            &early,
            &plan,
            window,
            10.0,
        );
        for t in 0..6 {
            assert!(m_early.available(0, t) >= m_late.available(0, t));
        }
    }

    #[test]
    fn travel_override_applies_by_departure_time() {
        let damages = vec![damage("d10", 0, 10.0, 5.0, 0.0)];
        let mut travel = provider_for(&damages);
        travel.overrides.push(TravelOverride {
            from_damage: None,
            to_damage: 0,
            minutes: 1000.0,
            active_from: 35.0,
            active_until: Some(45.0),
        });
        let depot = Position::Depot(0);
        assert!((travel.minutes(&depot, 0, 30.0) - 10.0).abs() < 1e-9);
        assert!((travel.minutes(&depot, 0, 35.0) - 1000.0).abs() < 1e-9);
        assert!((travel.minutes(&depot, 0, 44.9) - 1000.0).abs() < 1e-9);
        assert!((travel.minutes(&depot, 0, 45.0) - 10.0).abs() < 1e-9);
    }
}
