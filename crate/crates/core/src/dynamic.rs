//! Executing a planned tour while new targets appear, with replanning from
//! the current waypoint and the executed prefix frozen.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::env::{DiscretizedInstance, EnvState};
use crate::error::DynamicError;
use crate::geometry::{tour_length, Disk, Point};
use crate::heuristics::{geometric_coverage, insert_dynamic, InsertionMode, Route, Stop};
use crate::instance::{self, generate, stream_rng, GenConfig, Instance, RadiusKind};
use crate::par::{self, ExecMode};
use crate::policy::Policy;

/// Reveal fractions are drawn from this range of the initial plan's steps.
pub const REVEAL_RANGE: (f64, f64) = (0.1, 0.8);

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicTarget {
    pub disk: Disk,
    /// Fraction of the initial plan's step count after which the target appears.
    pub reveal_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicScenario {
    pub base: Instance,
    pub dynamic: Vec<DynamicTarget>,
}

impl DynamicScenario {
    pub fn new(base: Instance, dynamic: Vec<DynamicTarget>) -> Result<Self, DynamicError> {
        let sc = Self { base, dynamic };
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), DynamicError> {
        for (k, t) in self.dynamic.iter().enumerate() {
            let c = t.disk.center;
            if !(c.is_finite() && (0.0..=1.0).contains(&c.x) && (0.0..=1.0).contains(&c.y)) {
                return Err(DynamicError::Schedule(format!("dynamic target {k} lies outside the unit square")));
            }
            if !(t.disk.radius.is_finite() && t.disk.radius >= 0.0) {
                return Err(DynamicError::Schedule(format!("dynamic target {k} has an invalid radius")));
            }
            if !(t.reveal_fraction > 0.0 && t.reveal_fraction < 1.0) {
                return Err(DynamicError::Schedule(format!(
                    "reveal fraction {} of dynamic target {k} is outside (0, 1)",
                    t.reveal_fraction
                )));
            }
        }
        Ok(())
    }

    /// `CETSP<n>-<m>`.
    pub fn name(&self) -> String {
        format!("CETSP{}-{}", self.base.n(), self.dynamic.len())
    }

    /// Static targets followed by dynamic ones; dynamic target `k` is node `n + 1 + k`.
    pub fn full_instance(&self) -> Instance {
        let mut inst = self.base.clone();
        inst.targets.extend(self.dynamic.iter().map(|t| t.disk));
        inst
    }

    pub fn dynamic_node(&self, k: usize) -> usize {
        self.base.n() + 1 + k
    }
}

/// Scenario `index` of the `CETSP<n>-<m>` family: uniform centers, random
/// radii for both static and dynamic targets.
pub fn generate_scenario(n: usize, m: usize, seed: u64, index: u64) -> DynamicScenario {
    let mut rng = stream_rng(seed, index);
    let base = generate(&GenConfig::new(vec![n], RadiusKind::Random, seed), n, &mut rng);
    let extra = if m > 0 {
        generate(&GenConfig::new(vec![m], RadiusKind::Random, seed), m, &mut rng).targets
    } else {
        Vec::new()
    };
    let dynamic = extra
        .into_iter()
        .map(|disk| DynamicTarget { disk, reveal_fraction: rng.random_range(REVEAL_RANGE.0..=REVEAL_RANGE.1) })
        .collect();
    DynamicScenario { base: base.with_id(format!("CETSP{n}-{m}-{index}")), dynamic }
}

/// Instance text followed by `DYNAMIC <m>` and one `<cx> <cy> <r> <reveal_fraction>` line per target.
pub fn to_text(sc: &DynamicScenario) -> String {
    let mut s = instance::to_text(&sc.base);
    let _ = writeln!(s, "DYNAMIC {}", sc.dynamic.len());
    for t in &sc.dynamic {
        let _ = writeln!(s, "{:.11e} {:.11e} {:.11e} {:.11e}", t.disk.center.x, t.disk.center.y, t.disk.radius, t.reveal_fraction);
    }
    s
}

pub fn from_text(text: &str) -> Result<DynamicScenario, DynamicError> {
    let lines: Vec<&str> = text.lines().collect();
    let split = lines.iter().position(|l| l.split_whitespace().next() == Some("DYNAMIC"));
    let Some(split) = split else {
        return DynamicScenario::new(instance::from_text(text)?, Vec::new());
    };
    let base = instance::from_text(&lines[..split].join("\n"))?;
    let bad = |m: String| DynamicError::Schedule(m);
    let header: Vec<&str> = lines[split].split_whitespace().collect();
    if header.len() != 2 {
        return Err(bad(format!("line {}: expected `DYNAMIC <m>`", split + 1)));
    }
    let m: usize = header[1].parse().map_err(|_| bad(format!("line {}: bad dynamic count", split + 1)))?;
    let mut dynamic = Vec::with_capacity(m);
    for (i, line) in lines.iter().enumerate().skip(split + 1) {
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("line {}: non-numeric field {f:?}", i + 1))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 4 {
            return Err(bad(format!("line {}: expected 4 columns, found {}", i + 1, vals.len())));
        }
        dynamic.push(DynamicTarget { disk: Disk::new(Point::new(vals[0], vals[1]), vals[2]), reveal_fraction: vals[3] });
    }
    if dynamic.len() != m {
        return Err(bad(format!("header declares {m} dynamic targets but {} follow", dynamic.len())));
    }
    DynamicScenario::new(base, dynamic)
}

pub fn save(path: impl AsRef<Path>, sc: &DynamicScenario) -> Result<(), DynamicError> {
    std::fs::write(path, to_text(sc)).map_err(|e| DynamicError::Instance(e.into()))
}

pub fn load(path: impl AsRef<Path>) -> Result<DynamicScenario, DynamicError> {
    let text = std::fs::read_to_string(path).map_err(|e| DynamicError::Instance(e.into()))?;
    from_text(&text)
}

/// Step (edge count) after which each dynamic target is revealed, given the
/// initial plan's step count: `ceil(fraction * steps)` clamped to `1..steps`.
pub fn reveal_steps(sc: &DynamicScenario, plan_steps: usize) -> Vec<usize> {
    let last = plan_steps.saturating_sub(1).max(1);
    sc.dynamic.iter().map(|t| ((t.reveal_fraction * plan_steps as f64).ceil() as usize).clamp(1, last)).collect()
}

#[derive(Clone, Copy, Debug)]
pub enum Planner<'a> {
    Policy { policy: &'a Policy, aug: bool },
    Insertion(InsertionMode),
}

impl Planner<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Planner::Policy { aug: false, .. } => "policy",
            Planner::Policy { aug: true, .. } => "policy+aug",
            Planner::Insertion(InsertionMode::Cheapest) => "CI",
            Planner::Insertion(InsertionMode::Regret2) => "MRI",
            Planner::Insertion(InsertionMode::Greedy) => "MGI",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplanEvent {
    /// Edges executed when the reveal was processed.
    pub step: usize,
    pub position: Point,
    pub revealed: Vec<usize>,
    /// Revealed nodes the executed prefix had not covered.
    pub uncovered: Vec<usize>,
    /// New remaining waypoints, ending at the depot.
    pub suffix: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionTrace {
    /// Executed waypoints from the depot back to the depot.
    pub waypoints: Vec<Point>,
    /// Node of each executed waypoint (0 for the depot).
    pub nodes: Vec<usize>,
    pub initial_plan: Vec<Point>,
    /// Every reveal as `(step, nodes)`.
    pub reveals: Vec<(usize, Vec<usize>)>,
    pub events: Vec<ReplanEvent>,
    pub length: f64,
}

impl ExecutionTrace {
    /// Coverage of every static and dynamic target by the executed path.
    pub fn coverage(&self, sc: &DynamicScenario) -> Vec<bool> {
        geometric_coverage(&sc.full_instance(), &self.waypoints)
    }

    pub fn covers_all(&self, sc: &DynamicScenario) -> bool {
        self.coverage(sc).iter().all(|&c| c)
    }
}

fn planned_stops(sol_waypoints: &[Point], nodes: impl Iterator<Item = usize>) -> Vec<Stop> {
    nodes.zip(&sol_waypoints[1..]).map(|(node, &point)| Stop { node, point, waypoint_index: None }).collect()
}

fn insertion_stops(route: &Route, from: usize) -> Vec<Stop> {
    let mut out = route.stops[from..].to_vec();
    out.push(Stop { node: 0, point: route.terminal, waypoint_index: None });
    out
}

/// Walks the initial plan, reveals dynamic targets on schedule, and replans
/// whenever a revealed target is not covered by the executed prefix. Reveals
/// still pending when the tour reaches the depot are processed there.
pub fn simulate(sc: &DynamicScenario, planner: Planner<'_>, gamma: usize) -> Result<ExecutionTrace, DynamicError> {
    sc.validate()?;
    let gamma = match planner {
        Planner::Policy { policy, .. } => policy.config().gamma,
        Planner::Insertion(_) => gamma,
    };
    let full = sc.full_instance();
    let dfull = DiscretizedInstance::new(full.clone(), gamma)?;
    let dstatic = DiscretizedInstance::new(sc.base.clone(), gamma)?;
    let depot = sc.base.depot;
    let n = sc.base.n();

    let mut remaining: Vec<Stop> = match planner {
        Planner::Policy { policy, aug } => {
            let sol = policy.solve(&dstatic, aug)?;
            planned_stops(&sol.waypoints, sol.actions.iter().map(|a| a.node))
        }
        Planner::Insertion(mode) => {
            let empty = Route::new(depot, Vec::new(), depot);
            let targets: Vec<usize> = (1..=n).collect();
            insertion_stops(&insert_dynamic(&dstatic, &empty, 0, &targets, mode)?, 0)
        }
    };
    let initial_plan: Vec<Point> = std::iter::once(depot).chain(remaining.iter().map(|s| s.point)).collect();
    let reveal_at = reveal_steps(sc, remaining.len());

    let mut covered = vec![false; dfull.num_nodes()];
    dfull.covered_by_segment(depot, depot, &mut covered);
    let mut waypoints = vec![depot];
    let mut nodes = vec![0];
    let mut executed: Vec<Stop> = Vec::new();
    let mut revealed = vec![false; sc.dynamic.len()];
    let mut reveals = Vec::new();
    let mut events = Vec::new();
    let mut cursor = 0;

    while cursor < remaining.len() {
        let stop = remaining[cursor];
        cursor += 1;
        let from = *waypoints.last().expect("trace starts at the depot");
        dfull.covered_by_segment(from, stop.point, &mut covered);
        if stop.node != 0 {
            covered[stop.node] = true;
        }
        waypoints.push(stop.point);
        nodes.push(stop.node);
        if cursor < remaining.len() {
            executed.push(stop);
        }
        let step = waypoints.len() - 1;
        let finished = cursor == remaining.len();
        let due: Vec<usize> = (0..sc.dynamic.len()).filter(|&k| !revealed[k] && (finished || step >= reveal_at[k])).collect();
        if due.is_empty() {
            continue;
        }
        let due_nodes: Vec<usize> = due.iter().map(|&k| sc.dynamic_node(k)).collect();
        for &k in &due {
            revealed[k] = true;
        }
        reveals.push((step, due_nodes.clone()));
        let uncovered: Vec<usize> = due_nodes.iter().copied().filter(|&t| !covered[t]).collect();
        if uncovered.is_empty() {
            continue;
        }
        let position = stop.point;
        let suffix = match planner {
            Planner::Policy { policy, aug } => {
                let open: Vec<usize> = (1..=full.n())
                    .filter(|&t| !covered[t] && (t <= n || revealed[t - n - 1]))
                    .collect();
                // Re-encode the depot, the node just reached and the open
                // targets, then continue from the current waypoint.
                let mut keep = Vec::with_capacity(open.len() + 1);
                if stop.node != 0 {
                    keep.push(stop.node);
                }
                keep.extend_from_slice(&open);
                let sub = Instance::new(depot, keep.iter().map(|&t| full.node_disk(t)).collect());
                let dsub = DiscretizedInstance::new(sub, gamma)?;
                let start = if stop.node != 0 { EnvState::resume(&dsub, 1, position)? } else { EnvState::initial(&dsub) };
                let sol = policy.solve_from(&dsub, &start, aug)?;
                planned_stops(&sol.waypoints, sol.actions.iter().map(|a| if a.node == 0 { 0 } else { keep[a.node - 1] }))
            }
            Planner::Insertion(mode) => {
                let mut stops = executed.clone();
                stops.extend(remaining[cursor..].iter().filter(|s| s.node != 0).cloned());
                let route = Route::new(depot, stops, depot);
                let frozen = executed.len();
                insertion_stops(&insert_dynamic(&dfull, &route, frozen, &uncovered, mode)?, frozen)
            }
        };
        events.push(ReplanEvent {
            step,
            position,
            revealed: due_nodes,
            uncovered,
            suffix: suffix.iter().map(|s| s.point).collect(),
        });
        remaining = suffix;
        cursor = 0;
    }
    let length = tour_length(&waypoints, false);
    Ok(ExecutionTrace { waypoints, nodes, initial_plan, reveals, events, length })
}

/// Simulates every scenario, in input order.
pub fn simulate_all(
    scenarios: &[DynamicScenario],
    planner: Planner<'_>,
    gamma: usize,
    exec: ExecMode,
) -> Result<Vec<ExecutionTrace>, DynamicError> {
    par::map(exec, scenarios, |_, sc| simulate(sc, planner, gamma)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tests::micro_config;

    fn planners(policy: &Policy) -> Vec<Planner<'_>> {
        vec![
            Planner::Policy { policy, aug: false },
            Planner::Policy { policy, aug: true },
            Planner::Insertion(InsertionMode::Cheapest),
            Planner::Insertion(InsertionMode::Regret2),
            Planner::Insertion(InsertionMode::Greedy),
        ]
    }

    fn check_trace(sc: &DynamicScenario, t: &ExecutionTrace) {
        assert!(t.covers_all(sc), "{} {:?} {:?}", sc.name(), t.coverage(sc), t);
        assert_eq!(t.waypoints.first(), Some(&sc.base.depot));
        assert_eq!(t.waypoints.last(), Some(&sc.base.depot));
        assert!((t.length - tour_length(&t.waypoints, false)).abs() < 1e-12);
        for (i, e) in t.events.iter().enumerate() {
            assert_eq!(t.waypoints[e.step], e.position);
            let until = t.events.get(i + 1).map_or(t.waypoints.len() - 1, |next| next.step);
            assert_eq!(&t.waypoints[e.step + 1..=until], &e.suffix[..until - e.step]);
        }
        let first = t.events.first().map_or(t.waypoints.len() - 1, |e| e.step);
        assert_eq!(&t.waypoints[..=first], &t.initial_plan[..=first]);
        let n_revealed: usize = t.reveals.iter().map(|(_, ids)| ids.len()).sum();
        assert_eq!(n_revealed, sc.dynamic.len());
    }

    #[test]
    fn traces_cover_everything_and_keep_the_prefix() {
        let policy = Policy::new(micro_config(), 0).unwrap();
        for i in 0..12 {
            let sc = generate_scenario(12, 3, 4, i);
            for p in planners(&policy) {
                let t = simulate(&sc, p, 8).unwrap();
                eprintln!("{i} {}", p.name());
                check_trace(&sc, &t);
            }
        }
    }

    #[test]
    fn no_dynamic_targets_reproduces_the_static_plan() {
        let policy = Policy::new(micro_config(), 1).unwrap();
        let sc = generate_scenario(10, 0, 2, 0);
        let d = DiscretizedInstance::new(sc.base.clone(), 4).unwrap();
        let sol = policy.solve(&d, false).unwrap();
        let t = simulate(&sc, Planner::Policy { policy: &policy, aug: false }, 4).unwrap();
        assert_eq!(t.waypoints, sol.waypoints);
        assert_eq!(t.length, sol.length);
        assert!(t.events.is_empty() && t.reveals.is_empty());
        let ci = simulate(&sc, Planner::Insertion(InsertionMode::Cheapest), 4).unwrap();
        assert_eq!(ci.waypoints, ci.initial_plan);
    }

    #[test]
    fn target_covered_by_prefix_triggers_no_replan() {
        let mut sc = generate_scenario(10, 0, 3, 0);
        let depot = sc.base.depot;
        sc.dynamic.push(DynamicTarget { disk: Disk::new(depot, 0.05), reveal_fraction: 0.5 });
        let t = simulate(&sc, Planner::Insertion(InsertionMode::Cheapest), 8).unwrap();
        assert_eq!(t.reveals.len(), 1);
        assert!(t.events.is_empty());
        check_trace(&sc, &t);
    }

    #[test]
    fn far_target_forces_a_replan() {
        let mut sc = generate_scenario(8, 0, 5, 1);
        sc.base.targets.iter_mut().for_each(|d| d.center = d.center * 0.3);
        sc.base.depot = Point::new(0.0, 0.0);
        sc.dynamic.push(DynamicTarget { disk: Disk::new(Point::new(0.95, 0.95), 0.02), reveal_fraction: 0.3 });
        let policy = Policy::new(micro_config(), 2).unwrap();
        for p in planners(&policy) {
            let t = simulate(&sc, p, 4).unwrap();
            assert_eq!(t.events.len(), 1, "{}", p.name());
            assert_eq!(t.events[0].uncovered, vec![9]);
            check_trace(&sc, &t);
        }
    }

    #[test]
    fn reveal_steps_are_clamped() {
        let mut sc = generate_scenario(5, 2, 0, 0);
        sc.dynamic[0].reveal_fraction = 0.01;
        sc.dynamic[1].reveal_fraction = 0.99;
        assert_eq!(reveal_steps(&sc, 10), vec![1, 9]);
        assert_eq!(reveal_steps(&sc, 1), vec![1, 1]);
    }

    #[test]
    fn scenario_text_round_trip_and_errors() {
        let sc = generate_scenario(6, 2, 9, 3);
        assert_eq!(sc.name(), "CETSP6-2");
        let back = from_text(&to_text(&sc)).unwrap();
        assert_eq!(back.dynamic.len(), 2);
        for (a, b) in back.dynamic.iter().zip(&sc.dynamic) {
            assert!((a.disk.center - b.disk.center).norm() < 1e-10);
            assert!((a.reveal_fraction - b.reveal_fraction).abs() < 1e-10);
        }
        let plain = instance::to_text(&sc.base);
        assert!(from_text(&plain).unwrap().dynamic.is_empty());
        assert!(from_text(&format!("{plain}DYNAMIC 2\n0.5 0.5 0.1 0.3\n")).is_err());
        assert!(from_text(&format!("{plain}DYNAMIC 1\n0.5 0.5 0.1 1.5\n")).is_err());
        assert!(from_text(&format!("{plain}DYNAMIC 1\n1.5 0.5 0.1 0.5\n")).is_err());
        assert!(from_text(&format!("{plain}DYNAMIC 1\n0.5 0.5 x 0.5\n")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        save(&path, &sc).unwrap();
        assert_eq!(to_text(&load(&path).unwrap()), to_text(&back));
    }

    #[test]
    fn simulation_is_deterministic_across_exec_modes() {
        let scs: Vec<DynamicScenario> = (0..6).map(|i| generate_scenario(10, 2, 1, i)).collect();
        let p = Planner::Insertion(InsertionMode::Regret2);
        assert_eq!(simulate_all(&scs, p, 8, ExecMode::Sequential).unwrap(), simulate_all(&scs, p, 8, ExecMode::Parallel).unwrap());
    }
}
