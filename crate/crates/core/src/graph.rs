//! Online grid-graph learning for the top level.
//!
//! Candidate nodes sit on a regular lattice over the dimensions of interest.
//! Nodes become visited when the agent is closest to them; an edge becomes
//! feasible when the agent is seen moving across it and blocked when an
//! attempt to traverse it times out. Planning runs breadth-first over feasible
//! edges only, and exploration heads for the nearest node outside the
//! agent's connected component, where "nearest" counts traversal hops.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::MazeSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("nodes {0} and {1} are not lattice neighbors")]
    NotAdjacent(NodeId, NodeId),
    #[error("node {0} is outside the lattice")]
    UnknownNode(NodeId),
    #[error("point ({0}, {1}) lies outside the lattice bounds")]
    OutOfBounds(f64, f64),
}

/// Lattice index: `i` counts along x, `j` along y. Ordering is lexicographic
/// in `(i, j)` and is the tie-break everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub i: usize,
    pub j: usize,
}

impl NodeId {
    pub const fn new(i: usize, j: usize) -> Self {
        NodeId { i, j }
    }

    pub fn is_adjacent(self, other: NodeId) -> bool {
        self.i.abs_diff(other.i) + self.j.abs_diff(other.j) == 1
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.i, self.j)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeStatus {
    #[default]
    Unknown,
    Feasible,
    Blocked,
}

/// Node sequence from the start node to the goal node, both included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanPath {
    pub nodes: Vec<NodeId>,
}

impl PlanPath {
    /// Number of edges.
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }

    pub fn start(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn goal(&self) -> NodeId {
        *self.nodes.last().unwrap()
    }
}

/// Where exploration should go next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frontier {
    /// Node outside the current connected component.
    pub node: NodeId,
    /// Its neighbor inside the component, through which it is approached.
    pub via: NodeId,
    /// Hops from the current node, including the final unexplored edge.
    pub cost: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GoalMode {
    Explore,
    Reach([f64; 2]),
}

/// Lattice and edge-learning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Grid interval along x.
    pub spacing_x: f64,
    /// Grid interval along y.
    pub spacing_y: f64,
    /// How many times a run that has run out of frontier may go back and
    /// retry blocked edges that cut it off from visited nodes. Any `Some`
    /// also lets a goal episode retry each blocked edge once before giving
    /// up. `None` keeps blocked edges blocked for good.
    pub blocked_retry_sweeps: Option<u32>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            spacing_x: 1.0,
            spacing_y: 1.0,
            blocked_retry_sweeps: None,
        }
    }
}

impl GraphConfig {
    pub fn spacing(&self) -> [f64; 2] {
        [self.spacing_x, self.spacing_y]
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.spacing_x > 0.0 && self.spacing_y > 0.0) {
            return Err(format!("grid spacing must be positive, got ({}, {})", self.spacing_x, self.spacing_y));
        }
        if self.blocked_retry_sweeps == Some(0) {
            return Err("blocked_retry_sweeps must be at least 1 when set".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NavGraph {
    origin: [f64; 2],
    spacing: [f64; 2],
    nx: usize,
    ny: usize,
    visited: Vec<bool>,
    /// `(i, j)–(i+1, j)` at `j·(nx−1) + i`.
    horizontal: Vec<EdgeStatus>,
    /// `(i, j)–(i, j+1)` at `j·nx + i`.
    vertical: Vec<EdgeStatus>,
}

impl NavGraph {
    pub fn new(origin: [f64; 2], spacing: [f64; 2], nx: usize, ny: usize) -> Self {
        assert!(nx > 0 && ny > 0, "lattice needs at least one node");
        assert!(spacing[0] > 0.0 && spacing[1] > 0.0, "lattice spacing must be positive");
        NavGraph {
            origin,
            spacing,
            nx,
            ny,
            visited: vec![false; nx * ny],
            horizontal: vec![EdgeStatus::Unknown; (nx - 1) * ny],
            vertical: vec![EdgeStatus::Unknown; nx * (ny - 1)],
        }
    }

    /// Lattice over the maze bounding box, anchored at the first cell center.
    pub fn for_maze(maze: &MazeSpec, spacing: [f64; 2]) -> Self {
        let origin = [maze.cell_size() / 2.0, maze.cell_size() / 2.0];
        let count = |extent: f64, o: f64, d: f64| ((extent - o) / d).ceil().max(1.0) as usize;
        NavGraph::new(
            origin,
            spacing,
            count(maze.width(), origin[0], spacing[0]),
            count(maze.height(), origin[1], spacing[1]),
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn spacing(&self) -> [f64; 2] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.i < self.nx && n.j < self.ny
    }

    fn check(&self, n: NodeId) -> Result<(), GraphError> {
        if self.contains(n) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(n))
        }
    }

    fn index(&self, n: NodeId) -> usize {
        n.j * self.nx + n.i
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nx).flat_map(move |i| (0..self.ny).map(move |j| NodeId::new(i, j)))
    }

    pub fn node_xy(&self, n: NodeId) -> [f64; 2] {
        [
            self.origin[0] + n.i as f64 * self.spacing[0],
            self.origin[1] + n.j as f64 * self.spacing[1],
        ]
    }

    /// Whether `p` lies within half a spacing of the lattice rectangle.
    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        let lo = [self.origin[0] - self.spacing[0] / 2.0, self.origin[1] - self.spacing[1] / 2.0];
        let far = self.node_xy(NodeId::new(self.nx - 1, self.ny - 1));
        let hi = [far[0] + self.spacing[0] / 2.0, far[1] + self.spacing[1] / 2.0];
        p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]
    }

    /// Nearest lattice node in L2, clamped to the lattice. A point exactly
    /// halfway between two nodes goes to the larger index, the same way a
    /// point on a cell boundary belongs to the cell above it.
    pub fn nearest(&self, p: [f64; 2]) -> NodeId {
        let axis = |v: f64, o: f64, d: f64, n: usize| -> usize {
            let k = ((v - o) / d + 0.5).floor();
            if k.is_nan() || k <= 0.0 {
                0
            } else {
                (k as usize).min(n - 1)
            }
        };
        NodeId::new(
            axis(p[0], self.origin[0], self.spacing[0], self.nx),
            axis(p[1], self.origin[1], self.spacing[1], self.ny),
        )
    }

    /// [`NavGraph::nearest`], marking the node visited.
    pub fn associate(&mut self, p: [f64; 2]) -> NodeId {
        let n = self.nearest(p);
        self.mark_visited(n);
        n
    }

    pub fn mark_visited(&mut self, n: NodeId) {
        let k = self.index(n);
        self.visited[k] = true;
    }

    pub fn is_visited(&self, n: NodeId) -> bool {
        self.contains(n) && self.visited[self.index(n)]
    }

    pub fn visited_count(&self) -> usize {
        self.visited.iter().filter(|v| **v).count()
    }

    /// Lattice neighbors in ascending order.
    pub fn neighbors(&self, n: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let NodeId { i, j } = n;
        [
            (i > 0).then(|| NodeId::new(i - 1, j)),
            (j > 0).then(|| NodeId::new(i, j - 1)),
            (j + 1 < self.ny).then(|| NodeId::new(i, j + 1)),
            (i + 1 < self.nx).then(|| NodeId::new(i + 1, j)),
        ]
        .into_iter()
        .flatten()
    }

    fn edge_slot(&self, a: NodeId, b: NodeId) -> Result<(bool, usize), GraphError> {
        self.check(a)?;
        self.check(b)?;
        if !a.is_adjacent(b) {
            return Err(GraphError::NotAdjacent(a, b));
        }
        let lo = a.min(b);
        Ok(if a.j == b.j {
            (true, lo.j * (self.nx - 1) + lo.i)
        } else {
            (false, lo.j * self.nx + lo.i)
        })
    }

    pub fn edge_status(&self, a: NodeId, b: NodeId) -> Result<EdgeStatus, GraphError> {
        let (h, k) = self.edge_slot(a, b)?;
        Ok(if h { self.horizontal[k] } else { self.vertical[k] })
    }

    fn set_edge(&mut self, a: NodeId, b: NodeId, status: EdgeStatus) -> Result<(), GraphError> {
        let (h, k) = self.edge_slot(a, b)?;
        if h {
            self.horizontal[k] = status;
        } else {
            self.vertical[k] = status;
        }
        Ok(())
    }

    /// Success marks the edge feasible and both ends visited; failure marks it blocked.
    pub fn record_transition(&mut self, from: NodeId, to: NodeId, success: bool) -> Result<(), GraphError> {
        if success {
            self.set_edge(from, to, EdgeStatus::Feasible)?;
            self.mark_visited(from);
            self.mark_visited(to);
        } else {
            self.set_edge(from, to, EdgeStatus::Blocked)?;
        }
        Ok(())
    }

    /// Every edge with its status, each listed once with the smaller node first.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, EdgeStatus)> {
        let mut out = Vec::with_capacity(self.horizontal.len() + self.vertical.len());
        for n in self.nodes() {
            for m in [NodeId::new(n.i + 1, n.j), NodeId::new(n.i, n.j + 1)] {
                if self.contains(m) {
                    out.push((n, m, self.edge_status(n, m).expect("adjacent")));
                }
            }
        }
        out
    }

    pub fn count_edges(&self, status: EdgeStatus) -> usize {
        self.horizontal.iter().chain(&self.vertical).filter(|s| **s == status).count()
    }

    fn feasible(&self, a: NodeId, b: NodeId) -> bool {
        self.edge_status(a, b) == Ok(EdgeStatus::Feasible)
    }

    /// Hop distances and BFS parents from `start` over feasible edges.
    fn bfs(&self, start: NodeId) -> (Vec<Option<usize>>, Vec<Option<NodeId>>) {
        let mut dist = vec![None; self.nx * self.ny];
        let mut parent = vec![None; self.nx * self.ny];
        let mut queue = VecDeque::from([start]);
        dist[self.index(start)] = Some(0);
        while let Some(n) = queue.pop_front() {
            let d = dist[self.index(n)].unwrap();
            for m in self.neighbors(n) {
                let k = self.index(m);
                if dist[k].is_none() && self.feasible(n, m) {
                    dist[k] = Some(d + 1);
                    parent[k] = Some(n);
                    queue.push_back(m);
                }
            }
        }
        (dist, parent)
    }

    /// Shortest path over feasible edges (unit edge cost). `Ok(None)` means
    /// the goal is not reachable with what is currently known.
    pub fn plan_path(&self, start: NodeId, goal: NodeId) -> Result<Option<PlanPath>, GraphError> {
        self.check(start)?;
        self.check(goal)?;
        let (dist, parent) = self.bfs(start);
        if dist[self.index(goal)].is_none() {
            return Ok(None);
        }
        let mut nodes = vec![goal];
        let mut n = goal;
        while let Some(p) = parent[self.index(n)] {
            nodes.push(p);
            n = p;
        }
        nodes.reverse();
        Ok(Some(PlanPath { nodes }))
    }

    /// Nodes reachable from `start` over feasible edges.
    pub fn component(&self, start: NodeId) -> Vec<NodeId> {
        let (dist, _) = self.bfs(start);
        self.nodes().filter(|n| dist[self.index(*n)].is_some()).collect()
    }

    /// The closest node outside `current`'s feasible component that borders
    /// it through an edge not known to be blocked. Cost is hops to the
    /// bordering component node plus one; ties go to the smallest node, then
    /// the smallest bordering node. `None` once nothing is left to explore.
    pub fn select_exploration_target(&self, current: NodeId) -> Option<Frontier> {
        self.frontier(current, |g, w, u| g.edge_status(w, u) != Ok(EdgeStatus::Blocked))
    }

    /// A blocked edge leading from `current`'s component to a node outside
    /// it, restricted to visited nodes when `visited_only` is set. Closest
    /// first, with the same tie rule as exploration; `skip` lists
    /// `(via, node)` pairs already tried.
    pub fn select_retry_target(
        &self,
        current: NodeId,
        skip: &[(NodeId, NodeId)],
        visited_only: bool,
    ) -> Option<Frontier> {
        self.frontier(current, |g, w, u| {
            g.edge_status(w, u) == Ok(EdgeStatus::Blocked)
                && (!visited_only || g.is_visited(u))
                && !skip.contains(&(w, u))
        })
    }

    fn frontier(&self, current: NodeId, admit: impl Fn(&Self, NodeId, NodeId) -> bool) -> Option<Frontier> {
        let (dist, _) = self.bfs(current);
        let mut best: Option<Frontier> = None;
        for w in self.nodes() {
            let Some(d) = dist[self.index(w)] else { continue };
            for u in self.neighbors(w) {
                if dist[self.index(u)].is_some() || !admit(self, w, u) {
                    continue;
                }
                let cand = Frontier { node: u, via: w, cost: d + 1 };
                if best.is_none_or(|b| (cand.cost, cand.node, cand.via) < (b.cost, b.node, b.via)) {
                    best = Some(cand);
                }
            }
        }
        best
    }

    /// Explore → next frontier node (`None` when exploration is complete);
    /// reach → the node nearest the target, clamped onto the lattice.
    pub fn select_goal(&self, current: NodeId, mode: GoalMode) -> Option<NodeId> {
        match mode {
            GoalMode::Explore => self.select_exploration_target(current).map(|f| f.node),
            GoalMode::Reach(p) => {
                if !self.in_bounds(p) {
                    log::warn!("goal ({}, {}) outside the lattice; clamping", p[0], p[1]);
                }
                Some(self.nearest(p))
            }
        }
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            delta: self.spacing[0],
            nodes: self
                .nodes()
                .map(|n| NodeRecord {
                    rc: [n.i, n.j],
                    xy: self.node_xy(n),
                    visited: self.is_visited(n),
                })
                .collect(),
            edges: self
                .edges()
                .into_iter()
                .map(|(a, b, status)| EdgeRecord {
                    a: [a.i, a.j],
                    b: [b.i, b.j],
                    status,
                })
                .collect(),
        }
    }
}

/// JSON snapshot of a graph, as consumed by the plotting tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSnapshot {
    pub delta: f64,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub rc: [usize; 2],
    pub xy: [f64; 2],
    pub visited: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub a: [usize; 2],
    pub b: [usize; 2],
    pub status: EdgeStatus,
}

impl GraphSnapshot {
    pub fn node_xy(&self, rc: [usize; 2]) -> Option<[f64; 2]> {
        self.nodes.iter().find(|n| n.rc == rc).map(|n| n.xy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(nx: usize, ny: usize) -> NavGraph {
        NavGraph::new([0.0, 0.0], [1.0, 1.0], nx, ny)
    }

    fn n(i: usize, j: usize) -> NodeId {
        NodeId::new(i, j)
    }

    #[test]
    fn nearest_examples() {
        let g = unit(5, 5);
        assert_eq!(g.nearest([0.4, 0.4]), n(0, 0));
        assert_eq!(g.nearest([0.4999999, 0.0]), n(0, 0));
        assert_eq!(g.nearest([0.5, 0.0]), n(1, 0));
        assert_eq!(g.nearest([2.4, 0.1]), n(2, 0));
        assert_eq!(g.nearest([-3.0, 99.0]), n(0, 4));
    }

    #[test]
    fn associate_marks_visited() {
        let mut g = unit(3, 3);
        assert!(!g.is_visited(n(1, 1)));
        assert_eq!(g.associate([1.1, 0.9]), n(1, 1));
        assert!(g.is_visited(n(1, 1)));
        assert_eq!(g.visited_count(), 1);
    }

    #[test]
    fn transitions_follow_table() {
        let mut g = unit(3, 3);
        g.record_transition(n(0, 0), n(1, 0), true).unwrap();
        assert_eq!(g.edge_status(n(1, 0), n(0, 0)).unwrap(), EdgeStatus::Feasible);
        assert!(g.is_visited(n(1, 0)));
        g.record_transition(n(0, 0), n(1, 0), false).unwrap();
        assert_eq!(g.edge_status(n(0, 0), n(1, 0)).unwrap(), EdgeStatus::Blocked);
        g.record_transition(n(1, 0), n(0, 0), true).unwrap();
        assert_eq!(g.edge_status(n(0, 0), n(1, 0)).unwrap(), EdgeStatus::Feasible);
        assert_eq!(
            g.record_transition(n(0, 0), n(1, 1), true).unwrap_err(),
            GraphError::NotAdjacent(n(0, 0), n(1, 1))
        );
        assert!(g.record_transition(n(2, 2), n(3, 2), true).is_err());
    }

    #[test]
    fn corridor_path() {
        let mut g = unit(6, 1);
        for i in 0..5 {
            g.record_transition(n(i, 0), n(i + 1, 0), true).unwrap();
        }
        let p = g.plan_path(n(0, 0), n(5, 0)).unwrap().unwrap();
        assert_eq!(p.hops(), 5);
        assert_eq!(p.nodes.first(), Some(&n(0, 0)));
        let same = g.plan_path(n(3, 0), n(3, 0)).unwrap().unwrap();
        assert_eq!(same.hops(), 0);
    }

    #[test]
    fn blocked_cut_is_unreachable() {
        let mut g = unit(3, 1);
        g.record_transition(n(0, 0), n(1, 0), true).unwrap();
        g.record_transition(n(1, 0), n(2, 0), false).unwrap();
        assert_eq!(g.plan_path(n(0, 0), n(2, 0)).unwrap(), None);
        assert!(g.plan_path(n(0, 0), n(9, 0)).is_err());
    }

    #[test]
    fn first_frontier_is_smallest_neighbor() {
        let mut g = unit(5, 5);
        g.associate([2.0, 2.0]);
        let f = g.select_exploration_target(n(2, 2)).unwrap();
        assert_eq!(f, Frontier { node: n(1, 2), via: n(2, 2), cost: 1 });
        assert_eq!(g.select_goal(n(2, 2), GoalMode::Explore), Some(n(1, 2)));
        assert_eq!(g.select_goal(n(2, 2), GoalMode::Reach([2.4, 0.1])), Some(n(2, 0)));
    }

    #[test]
    fn done_when_component_is_closed() {
        let mut g = unit(2, 1);
        g.associate([0.0, 0.0]);
        g.record_transition(n(0, 0), n(1, 0), true).unwrap();
        assert_eq!(g.select_exploration_target(n(0, 0)), None);

        let mut g = unit(2, 1);
        g.associate([0.0, 0.0]);
        g.record_transition(n(0, 0), n(1, 0), false).unwrap();
        assert_eq!(g.select_exploration_target(n(0, 0)), None);
        // never reached, so not worth retrying
        assert_eq!(g.select_retry_target(n(0, 0), &[], true), None);
        assert_eq!(g.select_retry_target(n(0, 0), &[], false).map(|f| f.node), Some(n(1, 0)));

        g.record_transition(n(0, 0), n(1, 0), true).unwrap();
        g.record_transition(n(0, 0), n(1, 0), false).unwrap();
        assert_eq!(
            g.select_retry_target(n(0, 0), &[], true),
            Some(Frontier { node: n(1, 0), via: n(0, 0), cost: 1 })
        );
        assert_eq!(g.select_retry_target(n(0, 0), &[(n(0, 0), n(1, 0))], true), None);
    }

    #[test]
    fn l_shaped_corridor_frontier() {
        // 4×4 lattice. Explored: (0,0)-(1,0)-(2,0)-(2,1)-(2,2); the rest of
        // row j=0 and column i=0 is walled off (blocked).
        //
        //   j=3  .  .  .  .
        //   j=2  .  .  X  .
        //   j=1  .  .  X  .
        //   j=0  X  X  X  .
        //        i=0 1  2  3
        let mut g = unit(4, 4);
        g.associate([0.0, 0.0]);
        for (a, b) in [((0, 0), (1, 0)), ((1, 0), (2, 0)), ((2, 0), (2, 1)), ((2, 1), (2, 2))] {
            g.record_transition(n(a.0, a.1), n(b.0, b.1), true).unwrap();
        }
        for (a, b) in [((0, 0), (0, 1)), ((1, 0), (1, 1)), ((2, 0), (3, 0)), ((2, 1), (1, 1)), ((2, 1), (3, 1))] {
            g.record_transition(n(a.0, a.1), n(b.0, b.1), false).unwrap();
        }
        // Hand-enumerated frontier from (0,0):
        //   via (2,2) [4 hops]: (1,2), (2,3), (3,2), each cost 5
        // smallest node among them is (1,2)
        assert_eq!(
            g.select_exploration_target(n(0, 0)),
            Some(Frontier { node: n(1, 2), via: n(2, 2), cost: 5 })
        );
        // From (2,2) the same nodes cost 1.
        assert_eq!(
            g.select_exploration_target(n(2, 2)),
            Some(Frontier { node: n(1, 2), via: n(2, 2), cost: 1 })
        );
    }

    #[test]
    fn snapshot_shape() {
        let mut g = unit(2, 2);
        g.associate([0.0, 0.0]);
        g.record_transition(n(0, 0), n(0, 1), true).unwrap();
        let snap = g.snapshot();
        assert_eq!(snap.nodes.len(), 4);
        assert_eq!(snap.edges.len(), 4);
        let json = serde_json::to_value(&snap).unwrap();
        assert_eq!(json["edges"][0]["status"], "unknown");
        assert!(json["nodes"][0]["rc"].is_array());
        let back: GraphSnapshot = serde_json::from_value(json).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn maze_lattice_matches_cells() {
        let maze = crate::env::load_maze("cellsize=1.0\n#####\n#S..#\n#####\n").unwrap();
        let g = NavGraph::for_maze(&maze, [1.0, 1.0]);
        assert_eq!(g.dims(), (5, 3));
        assert_eq!(g.node_xy(n(1, 1)), maze.cell_center(1, 1));
    }

    proptest! {
        #[test]
        fn nearest_inverts_node_xy(i in 0usize..12, j in 0usize..9, ox in -3.0f64..3.0, dx in 0.1f64..2.0) {
            let g = NavGraph::new([ox, -ox], [dx, dx * 1.5], 12, 9);
            prop_assert_eq!(g.nearest(g.node_xy(n(i, j))), n(i, j));
        }

        #[test]
        fn visited_only_grows(ops in proptest::collection::vec((0usize..5, 0usize..5, 0usize..4, any::<bool>()), 0..60)) {
            let mut g = unit(5, 5);
            let mut count = 0;
            for (i, j, dir, ok) in ops {
                let a = n(i, j);
                let b = match dir { 0 => n(i + 1, j), 1 => n(i, j + 1), 2 => n(i.wrapping_sub(1), j), _ => n(i, j.wrapping_sub(1)) };
                g.associate(g.node_xy(a));
                let _ = g.record_transition(a, b, ok);
                let now = g.visited_count();
                prop_assert!(now >= count);
                count = now;
            }
        }
    }
}
