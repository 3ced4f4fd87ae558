//! The routing MDP over a perimeter-discretized instance.
//!
//! A state holds the node sequence, the waypoint sequence, the set of covered
//! targets and the length walked so far. Each action picks an uncovered node
//! and one of its `gamma` perimeter waypoints; every target whose disk meets
//! the new edge becomes covered. The depot is only selectable once every
//! target is covered, and selecting it closes the tour.

use crate::error::EnvError;
use crate::geometry::{pds_points, segment_disk_intersects, Point};
use crate::instance::Instance;

/// An instance together with its perimeter waypoints.
///
/// `terminal` is where the closing action leads. It equals the depot unless
/// overridden with [`DiscretizedInstance::with_terminal`].
#[derive(Clone, Debug)]
pub struct DiscretizedInstance {
    pub base: Instance,
    pub gamma: usize,
    pub phase: f64,
    /// `waypoints[i]` for node `i`; the depot holds the single point `o_0`.
    pub waypoints: Vec<Vec<Point>>,
    pub terminal: Point,
}

impl DiscretizedInstance {
    pub fn new(base: Instance, gamma: usize) -> Result<Self, EnvError> {
        Self::with_phase(base, gamma, 0.0)
    }

    pub fn with_phase(base: Instance, gamma: usize, phase: f64) -> Result<Self, EnvError> {
        let mut waypoints = Vec::with_capacity(base.n() + 1);
        waypoints.push(vec![base.depot]);
        for d in &base.targets {
            waypoints.push(pds_points(d, gamma, phase)?);
        }
        let terminal = base.depot;
        Ok(Self { base, gamma, phase, waypoints, terminal })
    }

    pub fn with_terminal(mut self, terminal: Point) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn n(&self) -> usize {
        self.base.n()
    }

    /// Number of nodes including the depot.
    pub fn num_nodes(&self) -> usize {
        self.base.n() + 1
    }

    pub fn start(&self) -> Point {
        self.base.depot
    }

    /// Targets (node indices) whose disks meet segment `a → b`.
    pub fn covered_by_segment(&self, a: Point, b: Point, out: &mut [bool]) {
        for (i, d) in self.base.targets.iter().enumerate() {
            if !out[i + 1] && segment_disk_intersects(a, b, d) {
                out[i + 1] = true;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Action {
    pub node: usize,
    pub waypoint_index: usize,
}

impl Action {
    pub const DEPOT: Action = Action { node: 0, waypoint_index: 0 };

    pub fn new(node: usize, waypoint_index: usize) -> Self {
        Self { node, waypoint_index }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub nodes: Vec<usize>,
    pub waypoints: Vec<Point>,
    /// Indexed by node; entry 0 (the depot) is always false.
    pub covered: Vec<bool>,
    pub length_so_far: f64,
    pub done: bool,
    /// Second node imposed by the multistart scheme, consumed by the first step.
    pub forced: Option<usize>,
}

impl EnvState {
    /// Fresh state at the start point. Targets whose disk holds the start are
    /// covered immediately (a zero-length edge meets them).
    pub fn initial(dinst: &DiscretizedInstance) -> Self {
        let start = dinst.start();
        let mut covered = vec![false; dinst.num_nodes()];
        dinst.covered_by_segment(start, start, &mut covered);
        Self {
            nodes: vec![0],
            waypoints: vec![start],
            covered,
            length_so_far: 0.0,
            done: false,
            forced: None,
        }
    }

    /// State that has just reached `point` on the boundary of `node`, with
    /// the depot still to return to. Used to continue a partly executed tour.
    pub fn resume(dinst: &DiscretizedInstance, node: usize, point: Point) -> Result<Self, EnvError> {
        if node == 0 || node >= dinst.num_nodes() {
            return Err(EnvError::NodeOutOfRange(node));
        }
        let mut covered = vec![false; dinst.num_nodes()];
        covered[node] = true;
        dinst.covered_by_segment(point, point, &mut covered);
        Ok(Self {
            nodes: vec![node],
            waypoints: vec![point],
            covered,
            length_so_far: 0.0,
            done: false,
            forced: None,
        })
    }

    pub fn last_node(&self) -> usize {
        *self.nodes.last().expect("state always holds the start node")
    }

    pub fn position(&self) -> Point {
        *self.waypoints.last().expect("state always holds the start point")
    }

    pub fn all_covered(&self) -> bool {
        self.covered[1..].iter().all(|&c| c)
    }

    pub fn uncovered(&self) -> impl Iterator<Item = usize> + '_ {
        self.covered.iter().enumerate().skip(1).filter(|(_, &c)| !c).map(|(i, _)| i)
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }
}

/// Multistart reset: `n_starts` identical start states, the k-th forced to
/// visit the k-th uncovered target second.
pub fn reset(dinst: &DiscretizedInstance, n_starts: usize) -> Result<Vec<EnvState>, EnvError> {
    if n_starts > dinst.n() {
        return Err(EnvError::TooManyStarts { requested: n_starts, available: dinst.n() });
    }
    reset_from(&EnvState::initial(dinst), n_starts)
}

/// Multistart copies of an arbitrary non-terminal state, forced the same way
/// as [`reset`] over the targets it has not covered.
pub fn reset_from(start: &EnvState, n_starts: usize) -> Result<Vec<EnvState>, EnvError> {
    if n_starts == 0 {
        return Err(EnvError::NoStarts);
    }
    if start.done {
        return Err(EnvError::Done);
    }
    let base = start.clone();
    let open: Vec<usize> = base.uncovered().collect();
    if open.is_empty() {
        // nothing to force: every trajectory simply closes the tour
        return Ok(vec![base; n_starts]);
    }
    if n_starts > open.len() {
        return Err(EnvError::TooManyStarts { requested: n_starts, available: open.len() });
    }
    Ok(open[..n_starts]
        .iter()
        .map(|&f| EnvState { forced: Some(f), ..base.clone() })
        .collect())
}

/// Feasible nodes: every uncovered target, or the depot alone once all
/// targets are covered.
pub fn feasible_mask(state: &EnvState) -> Result<Vec<bool>, EnvError> {
    if state.done {
        return Err(EnvError::Done);
    }
    let mut mask: Vec<bool> = state.covered.iter().map(|&c| !c).collect();
    let complete = state.all_covered();
    mask[0] = complete;
    Ok(mask)
}

/// Apply one action, returning the successor state.
pub fn step(state: &EnvState, action: Action, dinst: &DiscretizedInstance) -> Result<EnvState, EnvError> {
    let mut next = state.clone();
    step_in_place(&mut next, action, dinst)?;
    Ok(next)
}

pub fn step_in_place(state: &mut EnvState, action: Action, dinst: &DiscretizedInstance) -> Result<(), EnvError> {
    if state.done {
        return Err(EnvError::Done);
    }
    let node = action.node;
    if node >= dinst.num_nodes() {
        return Err(EnvError::NodeOutOfRange(node));
    }
    let from = state.position();
    if node == 0 {
        if !state.all_covered() {
            return Err(EnvError::Infeasible(0));
        }
        let to = dinst.terminal;
        state.length_so_far += from.dist(to);
        state.nodes.push(0);
        state.waypoints.push(to);
        state.done = true;
        state.forced = None;
        return Ok(());
    }
    if state.covered[node] {
        return Err(EnvError::Infeasible(node));
    }
    if action.waypoint_index >= dinst.gamma {
        return Err(EnvError::WaypointOutOfRange { index: action.waypoint_index, gamma: dinst.gamma });
    }
    let to = dinst.waypoints[node][action.waypoint_index];
    dinst.covered_by_segment(from, to, &mut state.covered);
    // the waypoint lies on the node's own circle; count it even if rounding
    // put it a hair outside the tolerance
    state.covered[node] = true;
    state.length_so_far += from.dist(to);
    state.nodes.push(node);
    state.waypoints.push(to);
    state.forced = None;
    Ok(())
}

/// Terminal reward: the negative tour length.
pub fn reward(state: &EnvState) -> Result<f64, EnvError> {
    if !state.done {
        return Err(EnvError::NotDone);
    }
    Ok(-state.length_so_far)
}

/// Run a full action list from a fresh state.
pub fn replay(dinst: &DiscretizedInstance, actions: &[Action]) -> Result<EnvState, EnvError> {
    let mut state = EnvState::initial(dinst);
    for &a in actions {
        step_in_place(&mut state, a, dinst)?;
    }
    Ok(state)
}

/// Uniformly random feasible actions until the tour closes.
pub fn random_rollout(dinst: &DiscretizedInstance, rng: &mut impl rand::Rng) -> EnvState {
    let mut s = EnvState::initial(dinst);
    while !s.done {
        let mask = feasible_mask(&s).expect("state is not terminal");
        let options: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let node = options[rng.random_range(0..options.len())];
        let wp = if node == 0 { 0 } else { rng.random_range(0..dinst.gamma) };
        step_in_place(&mut s, Action::new(node, wp), dinst).expect("feasible action");
    }
    s
}
