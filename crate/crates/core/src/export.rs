//! Run directories and plot-ready artifacts.
//!
//! A run directory holds `maze.txt`, numbered graph snapshots
//! (`graph_000.json`, ...) indexed by `snapshots.csv`, the step trace
//! `trace.csv` and per-episode `metrics.csv`. [`export_plots`] turns one into
//! an SVG per snapshot plus an exploration-progress time series.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{MazeError, MazeSpec};
use crate::graph::{EdgeRecord, EdgeStatus, GraphSnapshot};
use crate::orchestrator::{GraphFrame, RunMetrics, StepRecord};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("run directory {0} has no graph snapshots")]
    Empty(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Maze(#[from] MazeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, e: impl std::fmt::Display) -> ExportError {
    ExportError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// One line of `trace.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    #[serde(rename = "wL")]
    pub w_left: f64,
    #[serde(rename = "wR")]
    pub w_right: f64,
    pub behavior_idx: usize,
    pub subgoal_x: f64,
    pub subgoal_y: f64,
}

impl From<&StepRecord> for TraceRow {
    fn from(r: &StepRecord) -> Self {
        TraceRow {
            step: r.step,
            x: r.pose.x,
            y: r.pose.y,
            phi: r.pose.phi,
            w_left: r.pose.w_left,
            w_right: r.pose.w_right,
            behavior_idx: r.behavior,
            subgoal_x: r.subgoal_xy[0],
            subgoal_y: r.subgoal_xy[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SnapshotIndexRow {
    seq: usize,
    step: usize,
    file: String,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), ExportError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| fmt_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| fmt_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExportError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt_err(path, e))?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| fmt_err(path, e))
}

pub fn write_trace_csv(path: &Path, records: &[StepRecord]) -> Result<(), ExportError> {
    write_csv(path, records.iter().map(TraceRow::from))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>, ExportError> {
    read_csv(path)
}

pub fn write_metrics_csv(path: &Path, rows: &[RunMetrics]) -> Result<(), ExportError> {
    write_csv(path, rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<RunMetrics>, ExportError> {
    read_csv(path)
}

pub fn write_snapshot(path: &Path, snap: &GraphSnapshot) -> Result<(), ExportError> {
    let text = serde_json::to_string_pretty(snap).map_err(|e| fmt_err(path, e))?;
    fs::write(path, text).map_err(io_err(path))
}

/// Writes everything a run produced into `dir`, creating it if needed.
pub fn save_run(
    dir: &Path,
    maze: &MazeSpec,
    frames: &[GraphFrame],
    records: &[StepRecord],
    metrics: &[RunMetrics],
) -> Result<(), ExportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let maze_path = dir.join("maze.txt");
    fs::write(&maze_path, maze.to_text()).map_err(io_err(&maze_path))?;
    let mut index = Vec::with_capacity(frames.len());
    for (seq, frame) in frames.iter().enumerate() {
        let file = format!("graph_{seq:03}.json");
        write_snapshot(&dir.join(&file), &frame.graph)?;
        index.push(SnapshotIndexRow { seq, step: frame.step, file });
    }
    write_csv(&dir.join("snapshots.csv"), index)?;
    write_trace_csv(&dir.join("trace.csv"), records)?;
    write_metrics_csv(&dir.join("metrics.csv"), metrics)
}

/// A run directory read back from disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub maze: MazeSpec,
    /// Snapshots in sequence order, with the step at which each was taken.
    pub frames: Vec<(usize, GraphSnapshot)>,
    pub trace: Vec<TraceRow>,
}

pub fn load_run(dir: &Path) -> Result<RunArtifacts, ExportError> {
    let index_path = dir.join("snapshots.csv");
    if !index_path.is_file() {
        return Err(ExportError::Empty(dir.to_path_buf()));
    }
    let mut index: Vec<SnapshotIndexRow> = read_csv(&index_path)?;
    if index.is_empty() {
        return Err(ExportError::Empty(dir.to_path_buf()));
    }
    index.sort_by_key(|r| r.seq);
    let maze_path = dir.join("maze.txt");
    let maze_text = fs::read_to_string(&maze_path).map_err(io_err(&maze_path))?;
    let maze = MazeSpec::parse(&maze_text, "maze")?;
    let mut frames = Vec::with_capacity(index.len());
    for row in index {
        let p = dir.join(&row.file);
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        let snap: GraphSnapshot = serde_json::from_str(&text).map_err(|e| fmt_err(&p, e))?;
        frames.push((row.step, snap));
    }
    let trace_path = dir.join("trace.csv");
    let trace = if trace_path.is_file() { read_trace_csv(&trace_path)? } else { Vec::new() };
    Ok(RunArtifacts { maze, frames, trace })
}

/// Feasible edges whose straight segment touches a wall cell.
pub fn feasible_edges_crossing_walls(maze: &MazeSpec, snap: &GraphSnapshot) -> Vec<EdgeRecord> {
    snap.edges
        .iter()
        .filter(|e| e.status == EdgeStatus::Feasible)
        .filter(|e| match (snap.node_xy(e.a), snap.node_xy(e.b)) {
            (Some(a), Some(b)) => maze.segment_hits_wall(a, b),
            _ => true,
        })
        .cloned()
        .collect()
}

const PX: f64 = 40.0;

/// SVG map: walls, graph nodes and edges colored by status, and the
/// trajectory so far.
pub fn render_svg(maze: &MazeSpec, snap: &GraphSnapshot, trajectory: &[[f64; 2]]) -> String {
    let (w, h) = (maze.width() * PX, maze.height() * PX);
    let tx = |x: f64| x * PX;
    let ty = |y: f64| h - y * PX;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let cs = maze.cell_size();
    for r in 0..maze.rows() {
        for c in 0..maze.cols() {
            if maze.cell(r, c).is_wall() {
                let [cx, cy] = maze.cell_center(r, c);
                let _ = writeln!(
                    s,
                    r##"<rect class="wall" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#444444"/>"##,
                    tx(cx - cs / 2.0),
                    ty(cy + cs / 2.0),
                    cs * PX,
                    cs * PX
                );
            }
        }
    }
    for e in &snap.edges {
        let (Some(a), Some(b)) = (snap.node_xy(e.a), snap.node_xy(e.b)) else { continue };
        let style = match e.status {
            EdgeStatus::Unknown => continue,
            EdgeStatus::Feasible => r##"stroke="#2a9d3a" stroke-width="3""##,
            EdgeStatus::Blocked => r##"stroke="#d62828" stroke-width="2" stroke-dasharray="4 3""##,
        };
        let status = serde_json::to_value(e.status).expect("status serializes");
        let _ = writeln!(
            s,
            r#"<line class="edge {}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" {style}/>"#,
            status.as_str().unwrap_or_default(),
            tx(a[0]),
            ty(a[1]),
            tx(b[0]),
            ty(b[1])
        );
    }
    for n in &snap.nodes {
        let fill = if n.visited { "#1d3557" } else { "#cccccc" };
        let _ = writeln!(
            s,
            r#"<circle class="node" cx="{:.2}" cy="{:.2}" r="4" fill="{fill}"/>"#,
            tx(n.xy[0]),
            ty(n.xy[1])
        );
    }
    if trajectory.len() > 1 {
        let pts: Vec<String> = trajectory.iter().map(|p| format!("{:.2},{:.2}", tx(p[0]), ty(p[1]))).collect();
        let _ = writeln!(
            s,
            r##"<polyline class="trajectory" points="{}" fill="none" stroke="#f4a261" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub seq: usize,
    pub step: usize,
    pub visited: usize,
    pub feasible: usize,
    pub blocked: usize,
}

/// Writes `snapshot_NNN.svg` for every snapshot and `exploration_progress.csv`
/// into `out`. Returns the SVG paths in snapshot order.
pub fn export_plots(run_dir: &Path, out: &Path) -> Result<Vec<PathBuf>, ExportError> {
    let run = load_run(run_dir)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::with_capacity(run.frames.len());
    let mut progress = Vec::with_capacity(run.frames.len());
    for (seq, (step, snap)) in run.frames.iter().enumerate() {
        let path: Vec<[f64; 2]> = run.trace.iter().take_while(|r| r.step <= *step).map(|r| [r.x, r.y]).collect();
        let file = out.join(format!("snapshot_{seq:03}.svg"));
        fs::write(&file, render_svg(&run.maze, snap, &path)).map_err(io_err(&file))?;
        written.push(file);
        let count = |st: EdgeStatus| snap.edges.iter().filter(|e| e.status == st).count();
        progress.push(ProgressRow {
            seq,
            step: *step,
            visited: snap.nodes.iter().filter(|n| n.visited).count(),
            feasible: count(EdgeStatus::Feasible),
            blocked: count(EdgeStatus::Blocked),
        });
    }
    write_csv(&out.join("exploration_progress.csv"), progress)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{load_maze, PoseRecord};
    use crate::graph::{NavGraph, NodeId};

    fn small() -> MazeSpec {
        load_maze("cellsize=1.0\n#####\n#S#.#\n#...#\n#####\n").unwrap()
    }

    #[test]
    fn wall_crossing_detected() {
        let maze = small();
        let mut g = NavGraph::for_maze(&maze, [1.0, 1.0]);
        g.record_transition(NodeId::new(1, 1), NodeId::new(1, 2), true).unwrap();
        assert!(feasible_edges_crossing_walls(&maze, &g.snapshot()).is_empty());
        g.record_transition(NodeId::new(1, 1), NodeId::new(2, 1), true).unwrap();
        let bad = feasible_edges_crossing_walls(&maze, &g.snapshot());
        assert_eq!(bad.len(), 1);
        assert_eq!((bad[0].a, bad[0].b), ([1, 1], [2, 1]));
    }

    #[test]
    fn run_dir_round_trip_and_plots() {
        let dir = tempfile::tempdir().unwrap();
        let maze = small();
        let mut g = NavGraph::for_maze(&maze, [1.0, 1.0]);
        let mut frames = vec![GraphFrame { step: 0, graph: g.snapshot() }];
        g.record_transition(NodeId::new(1, 1), NodeId::new(1, 2), true).unwrap();
        frames.push(GraphFrame { step: 2, graph: g.snapshot() });
        let records: Vec<StepRecord> = (1..=2)
            .map(|step| StepRecord {
                step,
                pose: PoseRecord { x: 1.5, y: 1.0 + 0.5 * step as f64, ..Default::default() },
                behavior: 2,
                subgoal: NodeId::new(1, 2),
                subgoal_xy: [1.5, 2.5],
                mpc_cost: 0.1,
            })
            .collect();
        let run_dir = dir.path().join("run");
        save_run(&run_dir, &maze, &frames, &records, &[]).unwrap();
        let header = fs::read_to_string(run_dir.join("trace.csv")).unwrap();
        assert!(header.starts_with("step,x,y,phi,wL,wR,behavior_idx,subgoal_x,subgoal_y\n"));
        let back = load_run(&run_dir).unwrap();
        assert_eq!(back.frames.len(), 2);
        assert_eq!(back.trace.len(), 2);
        assert_eq!(back.maze.to_text(), maze.to_text());

        let out = dir.path().join("plots");
        let svgs = export_plots(&run_dir, &out).unwrap();
        assert_eq!(svgs.len(), 2);
        let last = fs::read_to_string(&svgs[1]).unwrap();
        assert!(last.contains("edge feasible"));
        assert!(last.contains("polyline"));
        let progress = fs::read_to_string(out.join("exploration_progress.csv")).unwrap();
        assert_eq!(progress.lines().count(), 3);
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export_plots(dir.path(), &dir.path().join("o")), Err(ExportError::Empty(_))));
    }

    #[test]
    fn metrics_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let row = RunMetrics {
            run_id: 0,
            seed: 7,
            maze: "cross".into(),
            mode: "explore".into(),
            total_steps: 10,
            success: true,
            replans: 1,
            subgoal_timeouts: 2,
        };
        write_metrics_csv(&p, &[row.clone()]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), RunMetrics::CSV_HEADER);
        assert_eq!(read_metrics_csv(&p).unwrap(), vec![row]);
    }
}
