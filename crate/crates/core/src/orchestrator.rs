//! Top-down execution: goal selection, graph planning, per-subgoal MPC
//! stepping, failure handling and replanning, plus run metrics.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{Behavior, BehaviorError};
use crate::dynmodel::DeltaPredictor;
use crate::env::{EnvError, Environment, PoseRecord};
use crate::graph::{GraphConfig, GraphError, GraphSnapshot, NavGraph, NodeId, PlanPath};
use crate::mpc::{select_behavior_sticky, MpcConfig, MpcError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("goal ({0}, {1}) lies outside the graph lattice")]
    GoalOutOfBounds(f64, f64),
    #[error("normalized distance needs a nonzero goal and a nonempty trace")]
    DegenerateMetric,
    #[error("benchmark needs an environment with a maze")]
    NoMaze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Steps allowed per subgoal (`M`).
    pub max_subgoal_steps: usize,
    /// Distance under which a subgoal counts as reached (`T`).
    pub success_threshold: f64,
    /// Step budget for one exploration run.
    pub explore_step_cap: usize,
    /// Step budget for one goal-reaching episode.
    pub goal_step_cap: usize,
    /// Replan when the agent ends up on a node off the planned edge.
    pub replan_on_deviation: bool,
    /// Random goals per benchmark run, after exploration.
    pub goals_per_run: usize,
    /// Exploration targets between graph snapshots; 0 keeps only the first and last.
    pub snapshot_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_subgoal_steps: 100,
            success_threshold: 0.5,
            explore_step_cap: 200_000,
            goal_step_cap: 5_000,
            replan_on_deviation: true,
            goals_per_run: 20,
            snapshot_every: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, spacing: [f64; 2]) -> Result<(), RunError> {
        if self.max_subgoal_steps == 0 {
            return Err(RunError::Config("max_subgoal_steps must be at least 1".into()));
        }
        let min_spacing = spacing[0].min(spacing[1]);
        if !(self.success_threshold > 0.0 && self.success_threshold < min_spacing) {
            return Err(RunError::Config(format!(
                "success_threshold must lie in (0, {min_spacing}), got {}",
                self.success_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global step counter of the run, starting at 1.
    pub step: usize,
    pub pose: PoseRecord,
    pub behavior: usize,
    pub subgoal: NodeId,
    pub subgoal_xy: [f64; 2],
    pub mpc_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    GoalReached,
    SubgoalTimeout { from: NodeId, to: NodeId },
    EpisodeCap,
    /// No feasible route is known to the goal node.
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub records: Vec<StepRecord>,
    pub outcome: Outcome,
}

impl EpisodeTrace {
    pub fn steps(&self) -> usize {
        self.records.len()
    }
}

/// How one pass of the subgoal loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopResult {
    /// Every node of the path was reached in order.
    Completed,
    /// `M` was exceeded on the edge `from → to`.
    Timeout { from: NodeId, to: NodeId },
    /// The agent settled on a node that is on neither end of the active edge.
    Deviated { at: NodeId },
    /// The step budget ran out.
    Cap,
}

impl LoopResult {
    pub fn is_success(self) -> bool {
        self == LoopResult::Completed
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub steps: usize,
    pub targets: usize,
    pub replans: usize,
    pub subgoal_timeouts: usize,
    pub sweeps: usize,
    pub visited: usize,
    /// False when the step cap stopped exploration early.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachReport {
    pub success: bool,
    pub steps: usize,
    pub replans: usize,
    pub subgoal_timeouts: usize,
    pub trace: EpisodeTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFrame {
    pub step: usize,
    pub graph: GraphSnapshot,
}

/// One run: owns its environment, graph and RNG.
pub struct Agent<'a, E, M> {
    env: E,
    behaviors: &'a [Behavior],
    models: &'a [M],
    graph: NavGraph,
    retry_sweeps: Option<u32>,
    mpc: MpcConfig,
    cfg: RunConfig,
    interest: Vec<usize>,
    rng: ChaCha8Rng,
    current: NodeId,
    steps: usize,
    records: Vec<StepRecord>,
    frames: Vec<GraphFrame>,
}

impl<'a, E: Environment, M: DeltaPredictor> Agent<'a, E, M> {
    /// Starts a run from the environment's current pose; the node under the
    /// agent is marked visited right away.
    pub fn new(
        env: E,
        behaviors: &'a [Behavior],
        models: &'a [M],
        mut graph: NavGraph,
        graph_cfg: &GraphConfig,
        mpc: MpcConfig,
        cfg: RunConfig,
        seed: u64,
    ) -> Result<Self, RunError> {
        if behaviors.is_empty() || behaviors.len() != models.len() {
            return Err(RunError::Config(format!(
                "{} behaviors but {} dynamics models",
                behaviors.len(),
                models.len()
            )));
        }
        graph_cfg.validate().map_err(RunError::Config)?;
        cfg.validate(graph.spacing())?;
        let interest = env.partition().interest_in_model();
        let current = graph.associate(env.position());
        Ok(Agent {
            env,
            behaviors,
            models,
            graph,
            retry_sweeps: graph_cfg.blocked_retry_sweeps,
            mpc,
            cfg,
            interest,
            rng: ChaCha8Rng::seed_from_u64(seed),
            current,
            steps: 0,
            records: Vec::new(),
            frames: Vec::new(),
        })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn env_mut(&mut self) -> &mut E {
        &mut self.env
    }

    pub fn graph(&self) -> &NavGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut NavGraph {
        &mut self.graph
    }

    pub fn current_node(&self) -> NodeId {
        self.current
    }

    /// Environment steps taken so far in this run.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn frames(&self) -> &[GraphFrame] {
        &self.frames
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn snapshot(&mut self) {
        self.frames.push(GraphFrame {
            step: self.steps,
            graph: self.graph.snapshot(),
        });
    }

    /// One MPC decision and one environment step toward `subgoal`.
    fn step_toward(&mut self, subgoal: NodeId) -> Result<(), RunError> {
        let target = self.graph.node_xy(subgoal);
        let obs = self.env.observe();
        let partition = self.env.partition();
        let s_m = partition.model_state(&obs);
        let s_l = partition.proprio(&obs);
        let previous = self.records.last().map(|r| r.behavior);
        let sel = select_behavior_sticky(&s_m, &target, self.models, &self.interest, &self.mpc, previous, &mut self.rng)?;
        let action = self.behaviors[sel.behavior].act(&s_l)?;
        self.env.step(&action)?;
        self.steps += 1;
        self.track_position()?;
        self.records.push(StepRecord {
            step: self.steps,
            pose: self.env.pose(),
            behavior: sel.behavior,
            subgoal,
            subgoal_xy: target,
            mpc_cost: sel.cost,
        });
        Ok(())
    }

    /// Associates the agent with its nearest node; a move between adjacent
    /// nodes is recorded as a feasible edge.
    fn track_position(&mut self) -> Result<(), RunError> {
        let node = self.graph.associate(self.env.position());
        if node != self.current {
            if node.is_adjacent(self.current) {
                self.graph.record_transition(self.current, node, true)?;
            }
            self.current = node;
        }
        Ok(())
    }

    fn distance_to(&self, node: NodeId) -> f64 {
        let [x, y] = self.env.position();
        let [gx, gy] = self.graph.node_xy(node);
        (x - gx).hypot(y - gy)
    }

    /// Follows `path` node by node. The step counter for a subgoal resets on
    /// advancing and the subgoal fails once it exceeds `M`, i.e. after `M + 1`
    /// steps spent on it. Stops early at `step_cap` total run steps.
    pub fn run_subgoal_loop(&mut self, path: &PlanPath, step_cap: usize) -> Result<LoopResult, RunError> {
        let nodes = &path.nodes;
        let d = path.hops();
        let mut i = 1;
        let mut c = 0usize;
        while i <= d {
            if c > self.cfg.max_subgoal_steps {
                return Ok(LoopResult::Timeout {
                    from: nodes[i - 1],
                    to: nodes[i],
                });
            }
            if self.steps >= step_cap {
                return Ok(LoopResult::Cap);
            }
            self.step_toward(nodes[i])?;
            if self.distance_to(nodes[i]) < self.cfg.success_threshold {
                i += 1;
                c = 0;
            }
            c += 1;
            if self.cfg.replan_on_deviation && i <= d && self.current != nodes[i - 1] && self.current != nodes[i] {
                return Ok(LoopResult::Deviated { at: self.current });
            }
        }
        Ok(LoopResult::Completed)
    }

    /// Explores until no frontier is left or the step cap is hit.
    pub fn run_explore(&mut self) -> Result<ExploreReport, RunError> {
        let start_steps = self.steps;
        let cap = self.steps.saturating_add(self.cfg.explore_step_cap);
        let mut report = ExploreReport::default();
        let mut tried = Vec::new();
        self.snapshot();
        loop {
            if self.steps >= cap {
                break;
            }
            let Some(frontier) = self.graph.select_exploration_target(self.current) else {
                report.sweeps += 1;
                let may_retry = self.retry_sweeps.is_some_and(|r| report.sweeps <= r as usize);
                if may_retry && self.retry_blocked(cap, &mut tried, true, &mut report)? {
                    continue;
                }
                report.complete = true;
                break;
            };
            let mut path = self
                .graph
                .plan_path(self.current, frontier.via)?
                .expect("frontier borders the current component");
            path.nodes.push(frontier.node);
            report.targets += 1;
            self.follow_for_exploration(&path, cap, &mut report)?;
            if self.cfg.snapshot_every > 0 && report.targets % self.cfg.snapshot_every == 0 {
                self.snapshot();
            }
        }
        self.snapshot();
        report.steps = self.steps - start_steps;
        report.visited = self.graph.visited_count();
        Ok(report)
    }

    fn follow_for_exploration(&mut self, path: &PlanPath, cap: usize, report: &mut ExploreReport) -> Result<bool, RunError> {
        Ok(match self.run_subgoal_loop(path, cap)? {
            LoopResult::Completed => true,
            LoopResult::Timeout { from, to } => {
                self.graph.record_transition(from, to, false)?;
                report.subgoal_timeouts += 1;
                false
            }
            LoopResult::Deviated { .. } => {
                report.replans += 1;
                false
            }
            LoopResult::Cap => false,
        })
    }

    /// Attempts blocked edges leading out of the agent's component, each at
    /// most once per `tried` list, until one of them reconnects.
    fn retry_blocked(
        &mut self,
        cap: usize,
        tried: &mut Vec<(NodeId, NodeId)>,
        visited_only: bool,
        report: &mut ExploreReport,
    ) -> Result<bool, RunError> {
        while self.steps < cap {
            let Some(f) = self.graph.select_retry_target(self.current, tried, visited_only) else {
                return Ok(false);
            };
            tried.push((f.via, f.node));
            let before = self.graph.component(self.current).len();
            let mut path = self
                .graph
                .plan_path(self.current, f.via)?
                .expect("retry target borders the current component");
            path.nodes.push(f.node);
            report.targets += 1;
            self.follow_for_exploration(&path, cap, report)?;
            if self.graph.component(self.current).len() > before {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Plans to the node nearest `goal` and follows the plan, blocking
    /// timed-out edges and replanning from wherever the agent is. When blocked
    /// edges are retryable, an unreachable goal first triggers one attempt at
    /// each blocked edge around the agent's component.
    pub fn run_reach_goal(&mut self, goal: [f64; 2]) -> Result<ReachReport, RunError> {
        if !self.graph.in_bounds(goal) {
            return Err(RunError::GoalOutOfBounds(goal[0], goal[1]));
        }
        let goal_node = self.graph.nearest(goal);
        let first = self.records.len();
        let start_steps = self.steps;
        let cap = self.steps.saturating_add(self.cfg.goal_step_cap);
        let mut replans = 0;
        let mut timeouts = 0;
        let mut attempts = 0usize;
        let mut tried = Vec::new();
        let outcome = loop {
            if self.current == goal_node {
                break Outcome::GoalReached;
            }
            if self.steps >= cap {
                break Outcome::EpisodeCap;
            }
            let Some(path) = self.graph.plan_path(self.current, goal_node)? else {
                if self.retry_sweeps.is_some() && self.steps < cap {
                    let mut retry = ExploreReport::default();
                    let reopened = self.retry_blocked(cap, &mut tried, false, &mut retry)?;
                    replans += retry.replans;
                    timeouts += retry.subgoal_timeouts;
                    if reopened {
                        continue;
                    }
                }
                break Outcome::Unreachable;
            };
            if attempts > 0 {
                replans += 1;
            }
            attempts += 1;
            match self.run_subgoal_loop(&path, cap)? {
                LoopResult::Completed | LoopResult::Deviated { .. } => {}
                LoopResult::Timeout { from, to } => {
                    self.graph.record_transition(from, to, false)?;
                    timeouts += 1;
                }
                LoopResult::Cap => break Outcome::EpisodeCap,
            }
        };
        Ok(ReachReport {
            success: outcome == Outcome::GoalReached,
            steps: self.steps - start_steps,
            replans,
            subgoal_timeouts: timeouts,
            trace: EpisodeTrace {
                records: self.records[first..].to_vec(),
                outcome,
            },
        })
    }

    /// Visits `points` in order, one goal episode each. Stops at the first failure.
    pub fn run_waypoints(&mut self, points: &[[f64; 2]]) -> Result<Vec<ReachReport>, RunError> {
        let mut out = Vec::with_capacity(points.len());
        for p in points {
            let r = self.run_reach_goal(*p)?;
            let ok = r.success;
            out.push(r);
            if !ok {
                break;
            }
        }
        Ok(out)
    }
}

/// Episode mean of `‖s_t − g‖ / ‖g‖` over the interest coordinates.
pub fn normalized_distance(trace: &EpisodeTrace, g: [f64; 2]) -> Result<f64, RunError> {
    let norm = g[0].hypot(g[1]);
    if norm == 0.0 || trace.records.is_empty() {
        return Err(RunError::DegenerateMetric);
    }
    let sum: f64 = trace
        .records
        .iter()
        .map(|r| (r.pose.x - g[0]).hypot(r.pose.y - g[1]) / norm)
        .sum();
    Ok(sum / trace.records.len() as f64)
}

/// One CSV row of run metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: usize,
    pub seed: u64,
    pub maze: String,
    pub mode: String,
    pub total_steps: usize,
    pub success: bool,
    pub replans: usize,
    pub subgoal_timeouts: usize,
}

impl RunMetrics {
    pub const CSV_HEADER: &'static str = "run_id,seed,maze,mode,total_steps,success,replans,subgoal_timeouts";

    pub fn from_explore(run_id: usize, seed: u64, maze: &str, r: &ExploreReport) -> Self {
        RunMetrics {
            run_id,
            seed,
            maze: maze.to_string(),
            mode: "explore".into(),
            total_steps: r.steps,
            success: r.complete,
            replans: r.replans,
            subgoal_timeouts: r.subgoal_timeouts,
        }
    }

    pub fn from_reach(run_id: usize, seed: u64, maze: &str, r: &ReachReport) -> Self {
        RunMetrics {
            run_id,
            seed,
            maze: maze.to_string(),
            mode: "goal".into(),
            total_steps: r.steps,
            success: r.success,
            replans: r.replans,
            subgoal_timeouts: r.subgoal_timeouts,
        }
    }
}

/// Everything one benchmark repetition produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRun {
    pub run_id: usize,
    pub seed: u64,
    pub explore: ExploreReport,
    pub goals: Vec<ReachReport>,
    pub metrics: Vec<RunMetrics>,
}

impl BenchmarkRun {
    pub fn goals_reached(&self) -> usize {
        self.goals.iter().filter(|g| g.success).count()
    }
}

pub fn run_seed(seed: u64, run_id: usize) -> u64 {
    seed.wrapping_add((run_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// `n` independent explore-then-navigate runs in parallel, returned in
/// `run_id` order. Each run starts a fresh environment at the maze start and
/// a blank graph, explores, then visits random goal cells one after another.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark<E, M, F>(
    make_env: F,
    behaviors: &[Behavior],
    models: &[M],
    graph_cfg: &GraphConfig,
    mpc: &MpcConfig,
    cfg: &RunConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<BenchmarkRun>, RunError>
where
    E: Environment,
    M: DeltaPredictor + Sync,
    F: Fn() -> E + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|run_id| {
            let mut env = make_env();
            env.reset_to_start();
            let maze = env.maze().ok_or(RunError::NoMaze)?.clone();
            let rseed = run_seed(seed, run_id);
            let graph = NavGraph::for_maze(&maze, graph_cfg.spacing());
            let mut agent = Agent::new(env, behaviors, models, graph, graph_cfg, mpc.clone(), cfg.clone(), rseed)?;
            let explore = agent.run_explore()?;
            let mut metrics = vec![RunMetrics::from_explore(run_id, rseed, maze.name(), &explore)];
            let mut candidates = maze.goal_positions();
            if candidates.is_empty() {
                candidates = maze.open_cells().into_iter().map(|(r, c)| maze.cell_center(r, c)).collect();
            }
            let mut goals = Vec::with_capacity(cfg.goals_per_run);
            for _ in 0..cfg.goals_per_run {
                let g = *candidates.choose(agent.rng()).expect("maze has open cells");
                let r = agent.run_reach_goal(g)?;
                metrics.push(RunMetrics::from_reach(run_id, rseed, maze.name(), &r));
                goals.push(r);
            }
            Ok(BenchmarkRun {
                run_id,
                seed: rseed,
                explore,
                goals,
                metrics,
            })
        })
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `"mean (std)"` with one decimal, e.g. `20704.8 (6043.8)`.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{m:.1} ({s:.1})")
}

/// Table row: name, exploration steps, goal-reaching steps.
pub fn table_row(name: &str, explore_steps: &[f64], goal_steps: &[f64]) -> String {
    format!("{name}  {}  {}", format_mean_std(explore_steps), format_mean_std(goal_steps))
}

/// Benchmark row for a maze: exploration steps per run, and steps of every
/// successful goal episode pooled across runs.
pub fn benchmark_row(name: &str, runs: &[BenchmarkRun]) -> String {
    let explore: Vec<f64> = runs.iter().map(|r| r.explore.steps as f64).collect();
    let goals: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.goals.iter().filter(|g| g.success).map(|g| g.steps as f64))
        .collect();
    table_row(name, &explore, &goals)
}
