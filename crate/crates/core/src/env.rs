//! Desk-scale 2D simulators and maze geometry.
//!
//! Two bodies are provided. [`CrawlerEnv`] is a two-wheeled differential-drive
//! body with wheel inertia: it has to turn before it can travel in a new
//! direction. [`PointEnv`] moves by a clipped velocity command and is used as
//! an oracle environment in tests.
//!
//! Both split their observation through an [`ObservationPartition`] into the
//! proprioceptive part (consumed by low-level policies), the external part
//! (pose, predicted by the dynamics models) and the dimensions of interest
//! (x-y, where goals and the planning graph live).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynmodel::FeatureMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action has {got} components, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("non-finite action component")]
    NonFiniteAction,
    #[error("invalid observation partition: {0}")]
    Partition(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("maze parse error at line {line}, column {column}: {message}")]
pub struct MazeError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Index map splitting a flat observation into proprioceptive, external and
/// interest components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationPartition {
    obs_dim: usize,
    proprio: Vec<usize>,
    external: Vec<usize>,
    interest: Vec<usize>,
    /// State the dynamics models predict and the planner rolls forward.
    /// Defaults to the external state.
    model: Vec<usize>,
}

impl ObservationPartition {
    pub fn new(
        obs_dim: usize,
        proprio: Vec<usize>,
        external: Vec<usize>,
        interest: Vec<usize>,
    ) -> Result<Self, EnvError> {
        let mut seen = vec![false; obs_dim];
        for &i in proprio.iter().chain(&external) {
            if i >= obs_dim {
                return Err(EnvError::Partition(format!("index {i} out of range")));
            }
            if seen[i] {
                return Err(EnvError::Partition(format!("index {i} listed twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(EnvError::Partition("proprio and external do not cover the observation".into()));
        }
        if let Some(i) = interest.iter().find(|i| !external.contains(i)) {
            return Err(EnvError::Partition(format!("interest index {i} is not external")));
        }
        Ok(ObservationPartition {
            obs_dim,
            proprio,
            model: external.clone(),
            external,
            interest,
        })
    }

    /// Replaces the model state. It must contain every interest index and
    /// no index twice.
    pub fn with_model_state(mut self, model: Vec<usize>) -> Result<Self, EnvError> {
        let mut seen = vec![false; self.obs_dim];
        for &i in &model {
            if i >= self.obs_dim || std::mem::replace(&mut seen[i], true) {
                return Err(EnvError::Partition(format!("bad model-state index {i}")));
            }
        }
        if let Some(i) = self.interest.iter().find(|i| !model.contains(i)) {
            return Err(EnvError::Partition(format!("interest index {i} missing from the model state")));
        }
        self.model = model;
        Ok(self)
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn proprio_idx(&self) -> &[usize] {
        &self.proprio
    }

    pub fn external_idx(&self) -> &[usize] {
        &self.external
    }

    pub fn interest_idx(&self) -> &[usize] {
        &self.interest
    }

    pub fn model_idx(&self) -> &[usize] {
        &self.model
    }

    /// Positions of the interest dimensions inside the external sub-vector.
    pub fn interest_in_external(&self) -> Vec<usize> {
        self.interest
            .iter()
            .map(|i| self.external.iter().position(|e| e == i).expect("interest ⊆ external"))
            .collect()
    }

    /// Positions of the interest dimensions inside the model state.
    pub fn interest_in_model(&self) -> Vec<usize> {
        self.interest
            .iter()
            .map(|i| self.model.iter().position(|e| e == i).expect("interest ⊆ model state"))
            .collect()
    }

    pub fn proprio(&self, obs: &[f64]) -> Vec<f64> {
        project(obs, &self.proprio)
    }

    pub fn external(&self, obs: &[f64]) -> Vec<f64> {
        project(obs, &self.external)
    }

    pub fn interest(&self, obs: &[f64]) -> Vec<f64> {
        project(obs, &self.interest)
    }

    pub fn model_state(&self, obs: &[f64]) -> Vec<f64> {
        project(obs, &self.model)
    }

    /// Inverse of splitting: scatters `s_l` and `s_m` back into a full observation.
    pub fn reassemble(&self, proprio: &[f64], external: &[f64]) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim];
        for (&i, &v) in self.proprio.iter().zip(proprio) {
            obs[i] = v;
        }
        for (&i, &v) in self.external.iter().zip(external) {
            obs[i] = v;
        }
        obs
    }
}

pub fn project(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Wall,
    Free,
    Start,
    GoalCandidate,
}

impl Cell {
    pub fn is_wall(self) -> bool {
        self == Cell::Wall
    }

    fn symbol(self) -> char {
        match self {
            Cell::Wall => '#',
            Cell::Free => '.',
            Cell::Start => 'S',
            Cell::GoalCandidate => 'G',
        }
    }
}

/// Rectangular cell grid. Row `r`, column `c` covers
/// `x ∈ [c·size, (c+1)·size)`, `y ∈ [r·size, (r+1)·size)`; anything outside
/// the grid counts as wall.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    name: String,
    cell_size: f64,
    rows: usize,
    cols: usize,
    cells: Vec<Cell>,
}

/// Parses a maze document: a `cellsize=<float>` header line followed by a
/// grid of `#` (wall), `.` (free), `S` (start) and `G` (goal candidate).
pub fn load_maze(text: &str) -> Result<MazeSpec, MazeError> {
    MazeSpec::parse(text, "maze")
}

impl MazeSpec {
    pub fn parse(text: &str, name: &str) -> Result<Self, MazeError> {
        let err = |line: usize, column: usize, message: String| MazeError { line, column, message };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or_else(|| err(1, 1, "empty maze document".into()))?;
        let cell_size = header
            .trim()
            .strip_prefix("cellsize=")
            .ok_or_else(|| err(hline + 1, 1, "expected header `cellsize=<float>`".into()))?
            .trim()
            .parse::<f64>()
            .map_err(|e| err(hline + 1, 10, format!("bad cell size: {e}")))?;
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(err(hline + 1, 10, "cell size must be positive".into()));
        }

        let mut cells = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        let mut start = None;
        let mut line_numbers = Vec::new();
        for (idx, line) in lines {
            let line = line.trim_end();
            let row: Vec<Cell> = line
                .chars()
                .enumerate()
                .map(|(c, ch)| match ch {
                    '#' => Ok(Cell::Wall),
                    '.' => Ok(Cell::Free),
                    'S' => Ok(Cell::Start),
                    'G' => Ok(Cell::GoalCandidate),
                    other => Err(err(idx + 1, c + 1, format!("unknown cell character {other:?}"))),
                })
                .collect::<Result<_, _>>()?;
            match cols {
                None => cols = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(err(idx + 1, row.len().min(n) + 1, format!("ragged row: {} cells, expected {n}", row.len())))
                }
                _ => {}
            }
            for (c, cell) in row.iter().enumerate() {
                if *cell == Cell::Start {
                    if start.is_some() {
                        return Err(err(idx + 1, c + 1, "multiple start cells".into()));
                    }
                    start = Some((rows, c));
                }
            }
            cells.extend(row);
            line_numbers.push(idx + 1);
            rows += 1;
        }
        let cols = cols.ok_or_else(|| err(hline + 2, 1, "maze has no grid rows".into()))?;
        if start.is_none() {
            return Err(err(hline + 2, 1, "no start cell".into()));
        }
        for r in 0..rows {
            for c in 0..cols {
                let border = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
                if border && cells[r * cols + c] != Cell::Wall {
                    return Err(err(line_numbers[r], c + 1, "border cells must be walls".into()));
                }
            }
        }
        Ok(MazeSpec {
            name: name.to_string(),
            cell_size,
            rows,
            cols,
            cells,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn width(&self) -> f64 {
        self.cols as f64 * self.cell_size
    }

    pub fn height(&self) -> f64 {
        self.rows as f64 * self.cell_size
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }

    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let (c, r) = ((x / self.cell_size) as usize, (y / self.cell_size) as usize);
        (r < self.rows && c < self.cols).then_some((r, c))
    }

    /// True when the point lies in a wall cell or outside the grid.
    pub fn is_blocked(&self, x: f64, y: f64) -> bool {
        self.cell_at(x, y).is_none_or(|(r, c)| self.cell(r, c).is_wall())
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [(col as f64 + 0.5) * self.cell_size, (row as f64 + 0.5) * self.cell_size]
    }

    pub fn start_cell(&self) -> (usize, usize) {
        let i = self.cells.iter().position(|c| *c == Cell::Start).expect("validated on parse");
        (i / self.cols, i % self.cols)
    }

    pub fn start_position(&self) -> [f64; 2] {
        let (r, c) = self.start_cell();
        self.cell_center(r, c)
    }

    pub fn cells_of(&self, kind: Cell) -> Vec<(usize, usize)> {
        (0..self.cells.len())
            .filter(|&i| self.cells[i] == kind)
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }

    pub fn goal_positions(&self) -> Vec<[f64; 2]> {
        self.cells_of(Cell::GoalCandidate)
            .into_iter()
            .map(|(r, c)| self.cell_center(r, c))
            .collect()
    }

    /// All non-wall cells, row-major.
    pub fn open_cells(&self) -> Vec<(usize, usize)> {
        (0..self.cells.len())
            .filter(|&i| !self.cells[i].is_wall())
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }

    /// Whether the straight segment `a → b` touches a wall cell, checked on a
    /// dense set of sample points.
    pub fn segment_hits_wall(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let n = ((len / (self.cell_size * 0.05)).ceil() as usize).max(1);
        (0..=n).any(|k| {
            let t = k as f64 / n as f64;
            self.is_blocked(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        })
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MazeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cellsize={}", self.cell_size)?;
        for r in 0..self.rows {
            let line: String = (0..self.cols).map(|c| self.cell(r, c).symbol()).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Plot-ready snapshot of a body's pose, shared by both simulators.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseRecord {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub w_left: f64,
    pub w_right: f64,
}

/// Where random training resets may place the body.
#[derive(Debug, Clone)]
pub enum Arena {
    /// Unbounded plane; resets draw positions uniformly from `[-extent, extent]²`.
    Open { extent: f64 },
    Maze(Arc<MazeSpec>),
}

impl Arena {
    fn maze(&self) -> Option<&MazeSpec> {
        match self {
            Arena::Maze(m) => Some(m),
            Arena::Open { .. } => None,
        }
    }

    fn random_position<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        match self {
            Arena::Open { extent } => [rng.random_range(-extent..=*extent), rng.random_range(-extent..=*extent)],
            Arena::Maze(m) => {
                let cells = m.open_cells();
                let (r, c) = cells[rng.random_range(0..cells.len())];
                let [cx, cy] = m.cell_center(r, c);
                let j = 0.4 * m.cell_size();
                [cx + rng.random_range(-j..=j), cy + rng.random_range(-j..=j)]
            }
        }
    }

    fn start_position(&self) -> [f64; 2] {
        self.maze().map_or([0.0, 0.0], MazeSpec::start_position)
    }
}

/// Common simulator surface used by behavior training and by the orchestrator.
pub trait Environment {
    fn partition(&self) -> &ObservationPartition;
    fn action_dim(&self) -> usize;
    fn observe(&self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<(), EnvError>;
    fn position(&self) -> [f64; 2];
    fn pose(&self) -> PoseRecord;
    /// Random free pose, used between training episodes.
    fn reset_random(&mut self, rng: &mut dyn rand::RngCore);
    /// Back to the maze start (or the origin), at rest.
    fn reset_to_start(&mut self);
    /// In-place recovery: pose kept, body brought to rest.
    fn reset_orientation(&mut self);
    /// Upper bound on the distance travelled in one step.
    fn max_step_distance(&self) -> f64;
    /// How dynamics models should featurize this body's external state.
    fn dynamics_features(&self) -> FeatureMap;
    fn maze(&self) -> Option<&MazeSpec>;
}

fn check_action(action: &[f64], dim: usize) -> Result<(), EnvError> {
    if action.len() != dim {
        return Err(EnvError::ActionDim {
            expected: dim,
            got: action.len(),
        });
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrawlerParams {
    pub dt: f64,
    pub wheel_radius: f64,
    pub axle_width: f64,
    pub drag: f64,
    pub max_accel: f64,
}

impl Default for CrawlerParams {
    fn default() -> Self {
        CrawlerParams {
            dt: 0.1,
            wheel_radius: 0.5,
            axle_width: 1.0,
            drag: 0.5,
            max_accel: 2.0,
        }
    }
}

impl CrawlerParams {
    /// Steady-state wheel speed under full throttle.
    pub fn max_wheel_speed(&self) -> f64 {
        self.max_accel / self.drag
    }

    pub fn max_speed(&self) -> f64 {
        self.wheel_radius * self.max_wheel_speed()
    }

    /// One integration step. Wheel speeds relax toward the commanded
    /// throttle; the body then moves along its current heading. A step whose
    /// end point falls in a wall keeps its heading and wheel updates but not
    /// its displacement.
    pub fn step(&self, s: &CrawlerState, action: [f64; 2], maze: Option<&MazeSpec>) -> Result<CrawlerState, EnvError> {
        check_action(&action, 2)?;
        let a_l = action[0].clamp(-1.0, 1.0);
        let a_r = action[1].clamp(-1.0, 1.0);
        let w_left = s.w_left + self.dt * (a_l * self.max_accel - self.drag * s.w_left);
        let w_right = s.w_right + self.dt * (a_r * self.max_accel - self.drag * s.w_right);
        let speed = self.wheel_radius * (w_left + w_right) / 2.0;
        let turn = self.wheel_radius * (w_right - w_left) / self.axle_width;
        let mut x = s.x + self.dt * speed * s.heading.cos();
        let mut y = s.y + self.dt * speed * s.heading.sin();
        if maze.is_some_and(|m| m.is_blocked(x, y)) {
            x = s.x;
            y = s.y;
        }
        Ok(CrawlerState {
            x,
            y,
            heading: s.heading + self.dt * turn,
            w_left,
            w_right,
        })
    }
}

/// Pose and wheel speeds of the crawler. Heading is not wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CrawlerState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub w_left: f64,
    pub w_right: f64,
}

impl CrawlerState {
    pub fn at(x: f64, y: f64, heading: f64) -> Self {
        CrawlerState {
            x,
            y,
            heading,
            ..Default::default()
        }
    }

    /// Observation layout: `(w_L, w_R, cos φ, sin φ, x, y, φ)`. The first
    /// four entries are sensed on board (wheel encoders and a compass); the
    /// last three are the external pose.
    pub fn observe(&self) -> Vec<f64> {
        vec![
            self.w_left,
            self.w_right,
            self.heading.cos(),
            self.heading.sin(),
            self.x,
            self.y,
            self.heading,
        ]
    }

    /// Brings the body to rest where it stands.
    pub fn reset_orientation(&self) -> Self {
        CrawlerState {
            w_left: 0.0,
            w_right: 0.0,
            ..*self
        }
    }
}

/// Proprio: wheel speeds and compass. External: `(x, y, φ)`. The model state
/// is `(w_L, w_R, x, y, φ)`: with a wheel time constant of many steps, where
/// the body will be a few steps from now depends on how fast the wheels turn.
pub fn crawler_partition() -> ObservationPartition {
    ObservationPartition::new(7, vec![0, 1, 2, 3], vec![4, 5, 6], vec![4, 5])
        .and_then(|p| p.with_model_state(vec![0, 1, 4, 5, 6]))
        .expect("static layout")
}

#[derive(Debug, Clone)]
pub struct CrawlerEnv {
    params: CrawlerParams,
    state: CrawlerState,
    arena: Arena,
    partition: ObservationPartition,
}

impl CrawlerEnv {
    pub fn new(params: CrawlerParams, arena: Arena) -> Self {
        let [x, y] = arena.start_position();
        CrawlerEnv {
            params,
            state: CrawlerState::at(x, y, 0.0),
            arena,
            partition: crawler_partition(),
        }
    }

    pub fn in_maze(params: CrawlerParams, maze: Arc<MazeSpec>) -> Self {
        Self::new(params, Arena::Maze(maze))
    }

    pub fn state(&self) -> &CrawlerState {
        &self.state
    }

    pub fn set_state(&mut self, state: CrawlerState) {
        self.state = state;
    }

    pub fn params(&self) -> &CrawlerParams {
        &self.params
    }
}

impl Environment for CrawlerEnv {
    fn partition(&self) -> &ObservationPartition {
        &self.partition
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn observe(&self) -> Vec<f64> {
        self.state.observe()
    }

    fn step(&mut self, action: &[f64]) -> Result<(), EnvError> {
        check_action(action, 2)?;
        self.state = self.params.step(&self.state, [action[0], action[1]], self.arena.maze())?;
        Ok(())
    }

    fn position(&self) -> [f64; 2] {
        [self.state.x, self.state.y]
    }

    fn pose(&self) -> PoseRecord {
        PoseRecord {
            x: self.state.x,
            y: self.state.y,
            phi: self.state.heading,
            w_left: self.state.w_left,
            w_right: self.state.w_right,
        }
    }

    fn reset_random(&mut self, rng: &mut dyn rand::RngCore) {
        let [x, y] = self.arena.random_position(rng);
        let w = self.params.max_wheel_speed();
        self.state = CrawlerState {
            x,
            y,
            heading: rng.random_range(-PI..PI),
            w_left: rng.random_range(-w..=w),
            w_right: rng.random_range(-w..=w),
        };
    }

    fn reset_to_start(&mut self) {
        let [x, y] = self.arena.start_position();
        self.state = CrawlerState::at(x, y, 0.0);
    }

    fn reset_orientation(&mut self) {
        self.state = self.state.reset_orientation();
    }

    fn max_step_distance(&self) -> f64 {
        let w = self.params.max_wheel_speed().max(self.state.w_left.abs()).max(self.state.w_right.abs());
        self.params.dt * self.params.wheel_radius * w
    }

    fn dynamics_features(&self) -> FeatureMap {
        FeatureMap::Planar {
            position: [2, 3],
            angle: 4,
        }
    }

    fn maze(&self) -> Option<&MazeSpec> {
        self.arena.maze()
    }
}

/// Point body commanded by a clipped velocity: `p ← p + max_step·clip(a)`.
/// It has no proprioceptive inputs at all.
#[derive(Debug, Clone)]
pub struct PointEnv {
    max_step: f64,
    pos: [f64; 2],
    arena: Arena,
    partition: ObservationPartition,
}

impl PointEnv {
    pub fn new(max_step: f64, arena: Arena) -> Self {
        PointEnv {
            max_step,
            pos: arena.start_position(),
            arena,
            partition: ObservationPartition::new(2, vec![], vec![0, 1], vec![0, 1]).expect("static layout"),
        }
    }

    pub fn max_step(&self) -> f64 {
        self.max_step
    }

    pub fn set_position(&mut self, pos: [f64; 2]) {
        self.pos = pos;
    }
}

impl Environment for PointEnv {
    fn partition(&self) -> &ObservationPartition {
        &self.partition
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn observe(&self) -> Vec<f64> {
        self.pos.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<(), EnvError> {
        check_action(action, 2)?;
        let x = self.pos[0] + self.max_step * action[0].clamp(-1.0, 1.0);
        let y = self.pos[1] + self.max_step * action[1].clamp(-1.0, 1.0);
        if !self.arena.maze().is_some_and(|m| m.is_blocked(x, y)) {
            self.pos = [x, y];
        }
        Ok(())
    }

    fn position(&self) -> [f64; 2] {
        self.pos
    }

    fn pose(&self) -> PoseRecord {
        PoseRecord {
            x: self.pos[0],
            y: self.pos[1],
            ..Default::default()
        }
    }

    fn reset_random(&mut self, rng: &mut dyn rand::RngCore) {
        self.pos = self.arena.random_position(rng);
    }

    fn reset_to_start(&mut self) {
        self.pos = self.arena.start_position();
    }

    fn reset_orientation(&mut self) {}

    fn max_step_distance(&self) -> f64 {
        self.max_step * std::f64::consts::SQRT_2
    }

    fn dynamics_features(&self) -> FeatureMap {
        FeatureMap::Identity
    }

    fn maze(&self) -> Option<&MazeSpec> {
        self.arena.maze()
    }
}
