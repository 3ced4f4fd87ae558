//! Construction and insertion baselines, a continuous waypoint refiner, and
//! exhaustive search for tiny instances.
//!
//! Routes produced by the constructive methods are replayable in the
//! environment: every stop targets a disk that was still uncovered when the
//! vehicle set off towards it.

use crate::env::{feasible_mask, step_in_place, Action, DiscretizedInstance, EnvState};
use crate::error::HeuristicError;
use crate::geometry::{closest_point_on_segment, segment_disk_intersects, tour_length, Disk, Point};
use crate::instance::Instance;

pub const BRUTE_FORCE_MAX_N: usize = 6;
pub const BRUTE_FORCE_MAX_GAMMA: usize = 5;

/// An intermediate stop of a route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stop {
    pub node: usize,
    pub point: Point,
    /// PDS index of `point`, or `None` once the point has been moved off the
    /// discretization.
    pub waypoint_index: Option<usize>,
}

impl Stop {
    fn pds(dinst: &DiscretizedInstance, node: usize, idx: usize) -> Self {
        Self { node, point: dinst.waypoints[node][idx], waypoint_index: Some(idx) }
    }
}

/// Start point, ordered stops, and (for closed routes) the terminal.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub start: Point,
    pub stops: Vec<Stop>,
    pub terminal: Point,
    pub closed: bool,
    pub length: f64,
}

impl Route {
    pub fn new(start: Point, stops: Vec<Stop>, terminal: Point) -> Self {
        let mut r = Self { start, stops, terminal, closed: true, length: 0.0 };
        r.length = tour_length(&r.waypoints(), false);
        r
    }

    fn recompute(&mut self) {
        self.length = tour_length(&self.waypoints(), false);
    }

    /// Full polyline: start, every stop, and the terminal if closed.
    pub fn waypoints(&self) -> Vec<Point> {
        let mut w = Vec::with_capacity(self.stops.len() + 2);
        w.push(self.start);
        w.extend(self.stops.iter().map(|s| s.point));
        if self.closed {
            w.push(self.terminal);
        }
        w
    }

    pub fn nodes(&self) -> Vec<usize> {
        self.stops.iter().map(|s| s.node).collect()
    }

    /// Environment actions reproducing this route, or `None` if a stop is no
    /// longer on the discretization.
    pub fn actions(&self) -> Option<Vec<Action>> {
        let mut a: Vec<Action> =
            self.stops.iter().map(|s| s.waypoint_index.map(|i| Action::new(s.node, i))).collect::<Option<_>>()?;
        if self.closed {
            a.push(Action::DEPOT);
        }
        Some(a)
    }

    fn from_env(dinst: &DiscretizedInstance, state: &EnvState, actions: &[Action]) -> Self {
        let stops = actions.iter().filter(|a| a.node != 0).map(|a| Stop::pds(dinst, a.node, a.waypoint_index)).collect();
        let mut r = Route::new(dinst.start(), stops, dinst.terminal);
        r.closed = state.done;
        r.recompute();
        r
    }

    /// Targets whose disk meets some edge of the closed polyline.
    pub fn covers(&self, inst: &Instance) -> Vec<bool> {
        geometric_coverage(inst, &self.waypoints())
    }

    pub fn covers_all(&self, inst: &Instance) -> bool {
        self.covers(inst).iter().all(|&c| c)
    }
}

/// Per target, whether any segment of the polyline meets its disk.
pub fn geometric_coverage(inst: &Instance, points: &[Point]) -> Vec<bool> {
    let mut out = vec![false; inst.n()];
    let edge_count = points.len().saturating_sub(1).max(1);
    for (t, d) in inst.targets.iter().enumerate() {
        out[t] = (0..edge_count).any(|e| {
            let a = points[e];
            let b = *points.get(e + 1).unwrap_or(&a);
            segment_disk_intersects(a, b, d)
        });
    }
    out
}

/// Greedy construction: head for the nearest uncovered center, stopping at
/// its PDS point closest to the current position.
pub fn nearest_neighbor(dinst: &DiscretizedInstance) -> Route {
    let mut state = EnvState::initial(dinst);
    let mut actions = Vec::new();
    while !state.done {
        let pos = state.position();
        let next = state
            .uncovered()
            .map(|i| (dinst.base.node_disk(i).center.dist(pos), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let action = match next {
            Some((_, node)) => Action::new(node, closest_index(&dinst.waypoints[node], pos)),
            None => Action::DEPOT,
        };
        step_in_place(&mut state, action, dinst).expect("nearest neighbour only picks feasible actions");
        actions.push(action);
    }
    Route::from_env(dinst, &state, &actions)
}

fn closest_index(points: &[Point], p: Point) -> usize {
    let mut best = 0;
    for (i, q) in points.iter().enumerate() {
        if q.dist(p) < points[best].dist(p) {
            best = i;
        }
    }
    best
}

/// Coverage produced by the stops of a plan in environment order: the start
/// point and every edge except the closing one.
fn env_coverage(dinst: &DiscretizedInstance, stops: &[Stop]) -> Vec<bool> {
    let mut cov = vec![false; dinst.num_nodes()];
    let mut prev = dinst.start();
    dinst.covered_by_segment(prev, prev, &mut cov);
    for s in stops {
        dinst.covered_by_segment(prev, s.point, &mut cov);
        cov[s.node] = true;
        prev = s.point;
    }
    cov
}

/// True if each stop's target is still uncovered when the vehicle leaves for it.
fn env_valid(dinst: &DiscretizedInstance, stops: &[Stop]) -> bool {
    let mut cov = vec![false; dinst.num_nodes()];
    let mut prev = dinst.start();
    dinst.covered_by_segment(prev, prev, &mut cov);
    for s in stops {
        if cov[s.node] {
            return false;
        }
        dinst.covered_by_segment(prev, s.point, &mut cov);
        cov[s.node] = true;
        prev = s.point;
    }
    true
}

fn point_at(stops: &[Stop], start: Point, terminal: Point, k: usize) -> Point {
    if k == 0 {
        start
    } else if k <= stops.len() {
        stops[k - 1].point
    } else {
        terminal
    }
}

/// A candidate insertion: `node` at PDS index `waypoint` placed before the
/// current stop `position` (`position == stops.len()` appends).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Insertion {
    pub node: usize,
    pub position: usize,
    pub waypoint: usize,
    pub cost: f64,
}

fn insertion_cost(dinst: &DiscretizedInstance, stops: &[Stop], node: usize, position: usize, waypoint: usize) -> f64 {
    let a = point_at(stops, dinst.start(), dinst.terminal, position);
    let b = point_at(stops, dinst.start(), dinst.terminal, position + 1);
    let w = dinst.waypoints[node][waypoint];
    a.dist(w) + w.dist(b) - a.dist(b)
}

fn insert(stops: &mut Vec<Stop>, dinst: &DiscretizedInstance, ins: &Insertion) {
    stops.insert(ins.position, Stop::pds(dinst, ins.node, ins.waypoint));
}

/// Cheapest valid insertion over every uncovered target, position and PDS
/// point. Ties go to the lower node, then position, then waypoint index.
pub fn best_insertion(dinst: &DiscretizedInstance, stops: &[Stop]) -> Option<Insertion> {
    let cov = env_coverage(dinst, stops);
    let mut cands = Vec::new();
    for node in (1..dinst.num_nodes()).filter(|&i| !cov[i]) {
        for position in 0..=stops.len() {
            for waypoint in 0..dinst.gamma {
                let cost = insertion_cost(dinst, stops, node, position, waypoint);
                cands.push(Insertion { node, position, waypoint, cost });
            }
        }
    }
    cands.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.node.cmp(&b.node))
            .then(a.position.cmp(&b.position))
            .then(a.waypoint.cmp(&b.waypoint))
    });
    let mut trial = stops.to_vec();
    for c in cands {
        insert(&mut trial, dinst, &c);
        if env_valid(dinst, &trial) {
            return Some(c);
        }
        trial.remove(c.position);
    }
    None
}

/// Cheapest insertion, optionally extending `partial`. Targets that become
/// covered by an inserted edge are skipped at no cost.
pub fn cheapest_insertion(dinst: &DiscretizedInstance, partial: Option<&Route>) -> Route {
    let mut stops = partial.map(|r| r.stops.clone()).unwrap_or_default();
    while let Some(ins) = best_insertion(dinst, &stops) {
        insert(&mut stops, dinst, &ins);
    }
    Route::new(dinst.start(), stops, dinst.terminal)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertionMode {
    Cheapest,
    Regret2,
    Greedy,
}

impl std::str::FromStr for InsertionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cheapest" | "ci" => Ok(Self::Cheapest),
            "regret2" | "mri" => Ok(Self::Regret2),
            "greedy" | "mgi" => Ok(Self::Greedy),
            _ => Err(format!("unknown insertion mode {s:?}")),
        }
    }
}

/// Best cost per insertion position (minimum over PDS points) for `node`,
/// positions `frozen..=stops.len()`.
fn position_costs(dinst: &DiscretizedInstance, stops: &[Stop], frozen: usize, node: usize) -> Vec<(f64, usize, usize)> {
    (frozen..=stops.len())
        .map(|pos| {
            let (cost, w) = (0..dinst.gamma)
                .map(|w| (insertion_cost(dinst, stops, node, pos, w), w))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("gamma >= 1");
            (cost, pos, w)
        })
        .collect()
}

fn best_of(costs: &[(f64, usize, usize)]) -> (f64, usize, usize) {
    *costs.iter().min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).expect("at least one position")
}

/// Regret of a target: second-best minus best position cost; infinite when
/// only one position is available.
pub fn regret(costs: &[(f64, usize, usize)]) -> f64 {
    if costs.len() < 2 {
        return f64::INFINITY;
    }
    let mut c: Vec<f64> = costs.iter().map(|x| x.0).collect();
    c.sort_by(f64::total_cmp);
    c[1] - c[0]
}

/// Inserts `new_targets` (node indices of `dinst`) into `route` after the
/// first `frozen` stops. Coverage counts every edge of the closed tour,
/// since the vehicle physically drives all of them.
pub fn insert_dynamic(
    dinst: &DiscretizedInstance,
    route: &Route,
    frozen: usize,
    new_targets: &[usize],
    mode: InsertionMode,
) -> Result<Route, HeuristicError> {
    if frozen > route.stops.len() {
        return Err(HeuristicError::FrozenPrefix { frozen, len: route.stops.len() });
    }
    for (k, &t) in new_targets.iter().enumerate() {
        if t == 0 || t > dinst.n() {
            return Err(HeuristicError::UnknownTarget(t));
        }
        if route.stops.iter().any(|s| s.node == t) || new_targets[..k].contains(&t) {
            return Err(HeuristicError::DuplicateTarget(t));
        }
    }
    let mut stops = route.stops.clone();
    let covered = |stops: &[Stop], t: usize| {
        let mut pts = vec![dinst.start()];
        pts.extend(stops.iter().map(|s| s.point));
        pts.push(dinst.terminal);
        let d = dinst.base.node_disk(t);
        pts.windows(2).any(|w| segment_disk_intersects(w[0], w[1], &d))
    };
    // targets the route already meets must stay covered when an insertion
    // replaces the edge that passed through them
    let mut required: Vec<usize> = new_targets.to_vec();
    required.extend((1..=dinst.n()).filter(|&t| !new_targets.contains(&t) && covered(&stops, t)));
    loop {
        let pending: Vec<usize> = required.iter().copied().filter(|&t| !covered(&stops, t)).collect();
        let Some(&first) = pending.first() else { break };
        let (node, pos, w) = match mode {
            InsertionMode::Greedy => {
                let (_, pos, w) = best_of(&position_costs(dinst, &stops, frozen, first));
                (first, pos, w)
            }
            InsertionMode::Cheapest => {
                let mut best: Option<(f64, usize, usize, usize)> = None;
                for &t in &pending {
                    let (c, pos, w) = best_of(&position_costs(dinst, &stops, frozen, t));
                    let better = match best {
                        None => true,
                        Some((bc, bt, _, _)) => c < bc || (c == bc && t < bt),
                    };
                    if better {
                        best = Some((c, t, pos, w));
                    }
                }
                let (_, t, pos, w) = best.expect("pending is not empty");
                (t, pos, w)
            }
            InsertionMode::Regret2 => {
                let mut best: Option<(f64, usize, usize, usize)> = None;
                for &t in &pending {
                    let costs = position_costs(dinst, &stops, frozen, t);
                    let r = regret(&costs);
                    let (_, pos, w) = best_of(&costs);
                    let better = match best {
                        None => true,
                        Some((br, bt, _, _)) => r > br || (r == br && t < bt),
                    };
                    if better {
                        best = Some((r, t, pos, w));
                    }
                }
                let (_, t, pos, w) = best.expect("pending is not empty");
                (t, pos, w)
            }
        };
        stops.insert(pos, Stop::pds(dinst, node, w));
    }
    Ok(Route::new(dinst.start(), stops, dinst.terminal))
}

/// Point of the circle of `disk` minimizing `|a − p| + |p − b|`, found by
/// golden-section search on the angle from eight seeds.
fn best_boundary_point(disk: &Disk, a: Point, b: Point) -> Point {
    const TOL: f64 = 1e-10;
    let f = |t: f64| {
        let p = disk.boundary_point(t);
        a.dist(p) + p.dist(b)
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..8 {
        let center = std::f64::consts::TAU * k as f64 / 8.0;
        let (mut lo, mut hi) = (center - std::f64::consts::PI / 8.0, center + std::f64::consts::PI / 8.0);
        let mut x1 = hi - inv_phi * (hi - lo);
        let mut x2 = lo + inv_phi * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        while hi - lo > TOL {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - inv_phi * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + inv_phi * (hi - lo);
                f2 = f(x2);
            }
        }
        let t = 0.5 * (lo + hi);
        let v = f(t);
        if v < best.0 {
            best = (v, t);
        }
    }
    disk.boundary_point(best.1)
}

/// Coordinate descent on the stop positions with the visiting order fixed.
/// A move is kept only if it shortens the tour and every target stays
/// covered by the closed polyline, so the length never increases.
pub fn refine_waypoints(route: &Route, inst: &Instance) -> Route {
    let mut r = route.clone();
    if r.stops.is_empty() {
        return r;
    }
    let must_cover = r.covers(inst);
    loop {
        let before = r.length;
        for i in 0..r.stops.len() {
            let a = if i == 0 { r.start } else { r.stops[i - 1].point };
            let b = if i + 1 < r.stops.len() {
                r.stops[i + 1].point
            } else if r.closed {
                r.terminal
            } else {
                a
            };
            let disk = inst.node_disk(r.stops[i].node);
            let candidate = if segment_disk_intersects(a, b, &disk) {
                closest_point_on_segment(a, b, disk.center)
            } else {
                best_boundary_point(&disk, a, b)
            };
            let old = r.stops[i].point;
            let gain = (a.dist(old) + old.dist(b)) - (a.dist(candidate) + candidate.dist(b));
            if gain <= 0.0 {
                continue;
            }
            r.stops[i].point = candidate;
            let cov = r.covers(inst);
            let keeps = must_cover.iter().zip(&cov).all(|(&need, &has)| !need || has);
            let new_len = tour_length(&r.waypoints(), false);
            if keeps && new_len < r.length {
                r.stops[i].waypoint_index = None;
                r.length = new_len;
            } else {
                r.stops[i].point = old;
            }
        }
        if before - r.length < 1e-9 {
            break;
        }
    }
    r
}

/// Exhaustive search over environment action sequences; returns the
/// shortest closed route over the discretization.
pub fn brute_force(dinst: &DiscretizedInstance) -> Result<Route, HeuristicError> {
    if dinst.n() > BRUTE_FORCE_MAX_N || dinst.gamma > BRUTE_FORCE_MAX_GAMMA {
        return Err(HeuristicError::TooLarge {
            n: dinst.n(),
            gamma: dinst.gamma,
            max_n: BRUTE_FORCE_MAX_N,
            max_gamma: BRUTE_FORCE_MAX_GAMMA,
        });
    }
    struct Search<'a> {
        dinst: &'a DiscretizedInstance,
        best: f64,
        best_actions: Vec<Action>,
        best_state: Option<EnvState>,
        path: Vec<Action>,
    }
    fn dfs(s: &mut Search<'_>, state: &EnvState) {
        if state.done {
            if state.length_so_far < s.best {
                s.best = state.length_so_far;
                s.best_actions = s.path.clone();
                s.best_state = Some(state.clone());
            }
            return;
        }
        // any completion is at least the straight line to the terminal
        if state.length_so_far + state.position().dist(s.dinst.terminal) >= s.best {
            return;
        }
        let mask = feasible_mask(state).expect("state is not done");
        for node in (0..mask.len()).filter(|&i| mask[i]) {
            let choices = if node == 0 { 1 } else { s.dinst.gamma };
            for w in 0..choices {
                let a = Action::new(node, w);
                let mut next = state.clone();
                step_in_place(&mut next, a, s.dinst).expect("mask only holds feasible nodes");
                s.path.push(a);
                dfs(s, &next);
                s.path.pop();
            }
        }
    }
    let mut s = Search { dinst, best: f64::INFINITY, best_actions: Vec::new(), best_state: None, path: Vec::new() };
    dfs(&mut s, &EnvState::initial(dinst));
    let state = s.best_state.expect("the search always reaches a closed tour");
    Ok(Route::from_env(dinst, &state, &s.best_actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::replay;
    use crate::instance::{generate_indexed, GenConfig, RadiusKind};
    use proptest::prelude::*;

    fn inst(pts: &[(f64, f64, f64)]) -> Instance {
        Instance::new(Point::new(0.0, 0.0), pts.iter().map(|&(x, y, r)| Disk::new(Point::new(x, y), r)).collect())
    }

    fn random(n: usize, idx: u64, gamma: usize) -> DiscretizedInstance {
        let i = generate_indexed(&GenConfig::new(vec![n], RadiusKind::Random, 21), n, idx);
        DiscretizedInstance::new(i, gamma).unwrap()
    }

    fn assert_replays(dinst: &DiscretizedInstance, r: &Route) {
        let state = replay(dinst, &r.actions().unwrap()).unwrap();
        assert!(state.done && state.all_covered());
        assert!((state.length_so_far - r.length).abs() < 1e-9);
    }

    #[test]
    fn nearest_neighbor_single_target_bound() {
        let d = DiscretizedInstance::new(inst(&[(0.6, 0.3, 0.1)]), 16).unwrap();
        let r = nearest_neighbor(&d);
        let dist = Point::new(0.6, 0.3).norm();
        let lo = 2.0 * (dist - 0.1);
        let hi = 2.0 * (dist - 0.1 + 0.1 * std::f64::consts::PI / 16.0);
        assert!(r.length >= lo - 1e-12 && r.length <= hi, "{} not in [{lo}, {hi}]", r.length);
        assert_replays(&d, &r);
    }

    #[test]
    fn nearest_neighbor_collinear_order() {
        let d = DiscretizedInstance::new(inst(&[(3.0, 0.0, 0.1), (1.0, 0.0, 0.1), (2.0, 0.5, 0.1)]), 8).unwrap();
        assert_eq!(nearest_neighbor(&d).nodes(), vec![2, 3, 1]);
    }

    #[test]
    fn constructions_replay_in_env() {
        for idx in 0..20 {
            let d = random(12, idx, 8);
            assert_replays(&d, &nearest_neighbor(&d));
            assert_replays(&d, &cheapest_insertion(&d, None));
        }
    }

    #[test]
    fn insertion_skips_targets_already_crossed() {
        // the middle disk straddles the line to the far target
        let d = DiscretizedInstance::new(inst(&[(2.0, 0.0, 0.1), (1.0, 0.05, 0.2)]), 4).unwrap();
        let partial = plan(&d, &[(1, 2)]);
        let r = cheapest_insertion(&d, Some(&partial));
        assert_eq!(r.nodes(), vec![1]);
        assert_eq!(r.length, partial.length);
        assert!(r.covers_all(&d.base));
    }

    #[test]
    fn cheapest_insertion_beats_nearest_neighbor_on_toy() {
        let d = DiscretizedInstance::new(
            inst(&[(0.3, 0.0, 0.05), (0.0, 0.5, 0.05), (0.6, 0.0, 0.05), (0.0, 1.0, 0.05)]),
            16,
        )
        .unwrap();
        let (ci, nn) = (cheapest_insertion(&d, None).length, nearest_neighbor(&d).length);
        assert!(ci <= nn + 1e-12, "{ci} vs {nn}");
    }

    #[test]
    fn best_insertion_matches_exhaustive_scan() {
        for idx in 0..10 {
            let d = random(8, idx, 6);
            let mut stops: Vec<Stop> = Vec::new();
            while let Some(ins) = best_insertion(&d, &stops) {
                // oracle: try every uncovered (node, position, waypoint), keep
                // env-valid routes, compare full lengths
                let base = Route::new(d.start(), stops.clone(), d.terminal).length;
                let cov = env_coverage(&d, &stops);
                let mut best = f64::INFINITY;
                for node in (1..=d.n()).filter(|&i| !cov[i]) {
                    for pos in 0..=stops.len() {
                        for w in 0..d.gamma {
                            let mut t = stops.clone();
                            t.insert(pos, Stop::pds(&d, node, w));
                            if env_valid(&d, &t) {
                                best = best.min(Route::new(d.start(), t, d.terminal).length - base);
                            }
                        }
                    }
                }
                assert!((ins.cost - best).abs() < 1e-12, "{} vs {best}", ins.cost);
                insert(&mut stops, &d, &ins);
            }
        }
    }

    fn plan(d: &DiscretizedInstance, nodes: &[(usize, usize)]) -> Route {
        Route::new(d.start(), nodes.iter().map(|&(n, w)| Stop::pds(d, n, w)).collect(), d.terminal)
    }

    #[test]
    fn dynamic_target_on_existing_edge_is_free() {
        let d = DiscretizedInstance::new(inst(&[(0.0, 1.0, 0.1), (1.0, 1.0, 0.1), (0.5, 1.0, 0.1)]), 4).unwrap();
        let r = plan(&d, &[(1, 0), (2, 2)]);
        for mode in [InsertionMode::Cheapest, InsertionMode::Regret2, InsertionMode::Greedy] {
            let out = insert_dynamic(&d, &r, 1, &[3], mode).unwrap();
            assert_eq!(out.length, r.length);
        }
    }

    #[test]
    fn single_new_target_modes_agree() {
        for idx in 0..10 {
            let d = random(9, idx, 8);
            let r = cheapest_insertion(&DiscretizedInstance::new(sub(&d.base, 8), 8).unwrap(), None);
            let outs: Vec<Route> = [InsertionMode::Cheapest, InsertionMode::Regret2, InsertionMode::Greedy]
                .iter()
                .map(|&m| insert_dynamic(&d, &r, 2.min(r.stops.len()), &[9], m).unwrap())
                .collect();
            assert_eq!(outs[0], outs[1]);
            assert_eq!(outs[1], outs[2]);
        }
    }

    fn sub(i: &Instance, n: usize) -> Instance {
        Instance::new(i.depot, i.targets[..n].to_vec())
    }

    #[test]
    fn regret_ordering_matches_brute_force_table() {
        for idx in 0..10 {
            let d = random(9, 100 + idx, 6);
            let r = cheapest_insertion(&DiscretizedInstance::new(sub(&d.base, 6), 6).unwrap(), None);
            let new = [7, 8, 9];
            let covered: Vec<usize> = new.iter().copied().filter(|&t| r.waypoints().windows(2).any(|w| segment_disk_intersects(w[0], w[1], &d.base.node_disk(t)))).collect();
            if !covered.is_empty() {
                continue;
            }
            // full table of insertion costs for the first pick
            let pts = r.waypoints();
            let mut expected = None;
            let mut best_regret = f64::NEG_INFINITY;
            for &t in &new {
                let mut per_pos: Vec<f64> = (0..pts.len() - 1)
                    .map(|p| {
                        (0..6)
                            .map(|w| {
                                let q = d.waypoints[t][w];
                                pts[p].dist(q) + q.dist(pts[p + 1]) - pts[p].dist(pts[p + 1])
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                per_pos.sort_by(f64::total_cmp);
                let reg = if per_pos.len() < 2 { f64::INFINITY } else { per_pos[1] - per_pos[0] };
                if reg > best_regret {
                    best_regret = reg;
                    expected = Some(t);
                }
            }
            let out = insert_dynamic(&d, &r, 0, &new, InsertionMode::Regret2).unwrap();
            let first_new = out.stops.iter().map(|s| s.node).collect::<Vec<_>>();
            let expected = expected.unwrap();
            assert!(first_new.contains(&expected));
            // the regret winner is inserted at its best position in the original plan
            let one = insert_dynamic(&d, &r, 0, &[expected], InsertionMode::Greedy).unwrap();
            let pos = one.stops.iter().position(|s| s.node == expected).unwrap();
            let stop = one.stops[pos];
            let before: Vec<usize> = one.stops[..pos].iter().map(|s| s.node).collect();
            let out_pos = out.stops.iter().position(|s| s.node == expected).unwrap();
            assert_eq!(out.stops[out_pos].point, stop.point);
            let out_before: Vec<usize> =
                out.stops[..out_pos].iter().map(|s| s.node).filter(|n| !new.contains(n)).collect();
            assert_eq!(out_before, before);
        }
    }

    #[test]
    fn dynamic_insertion_respects_frozen_prefix_and_errors() {
        let d = random(10, 3, 8);
        let r = cheapest_insertion(&DiscretizedInstance::new(sub(&d.base, 7), 8).unwrap(), None);
        let k = r.stops.len().min(3);
        let out = insert_dynamic(&d, &r, k, &[8, 9, 10], InsertionMode::Regret2).unwrap();
        assert_eq!(&out.stops[..k], &r.stops[..k]);
        assert!(out.covers_all(&d.base));
        assert_eq!(
            insert_dynamic(&d, &r, r.stops.len() + 1, &[8], InsertionMode::Greedy),
            Err(HeuristicError::FrozenPrefix { frozen: r.stops.len() + 1, len: r.stops.len() })
        );
        let dup = r.stops[0].node;
        assert_eq!(insert_dynamic(&d, &r, 0, &[dup], InsertionMode::Greedy), Err(HeuristicError::DuplicateTarget(dup)));
        assert_eq!(insert_dynamic(&d, &r, 0, &[11], InsertionMode::Greedy), Err(HeuristicError::UnknownTarget(11)));
    }

    #[test]
    fn refine_collinear_optimum() {
        let i = inst(&[(1.0, 0.0, 0.2), (2.0, 0.0, 0.2), (3.0, 0.0, 0.2)]);
        let d = DiscretizedInstance::new(i.clone(), 4).unwrap();
        // stop at the top of each circle
        let r = plan(&d, &[(1, 1), (2, 1), (3, 1)]);
        let refined = refine_waypoints(&r, &i);
        assert!((refined.length - 5.6).abs() < 1e-6, "{}", refined.length);
        let again = refine_waypoints(&refined, &i);
        assert!(refined.length - again.length < 1e-9);
    }

    #[test]
    fn refine_never_increases_and_keeps_coverage() {
        for idx in 0..30 {
            let d = random(10, 200 + idx, 8);
            for r in [nearest_neighbor(&d), cheapest_insertion(&d, None)] {
                let out = refine_waypoints(&r, &d.base);
                assert!(out.length <= r.length);
                assert!(out.covers_all(&d.base));
                assert!((tour_length(&out.waypoints(), false) - out.length).abs() < 1e-12);
                let again = refine_waypoints(&out, &d.base);
                assert!(out.length - again.length < 1e-9);
            }
        }
    }

    #[test]
    fn brute_force_is_optimal_over_discretization() {
        for idx in 0..15 {
            let d = random(5, 300 + idx, 4);
            let bf = brute_force(&d).unwrap();
            assert_replays(&d, &bf);
            assert!(bf.length <= nearest_neighbor(&d).length + 1e-12);
            assert!(bf.length <= cheapest_insertion(&d, None).length + 1e-12);
        }
        let big = random(7, 0, 4);
        assert!(matches!(brute_force(&big), Err(HeuristicError::TooLarge { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn refine_is_descent(idx in 0u64..10_000) {
            let d = random(8, idx, 6);
            let r = cheapest_insertion(&d, None);
            prop_assert!(refine_waypoints(&r, &d.base).length <= r.length);
        }
    }
}
