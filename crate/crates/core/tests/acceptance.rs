//! Acceptance suite. Runs every criterion in order and prints one line per
//! criterion. Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p hiernav --test acceptance -- 4 5`.

use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::cmp::Reverse;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hiernav::behavior::{behavior_reward, cardinal_specs, collect_rollouts, scripted_point_library, Behavior};
use hiernav::config::{Body, PipelineConfig, Profile};
use hiernav::dynmodel::{extract_pairs, fit, ConstantDelta, DeltaPredictor, DynamicsConfig, DynamicsDataset, FeatureMap};
use hiernav::env::{Arena, Environment, MazeSpec, PointEnv};
use hiernav::export::feasible_edges_crossing_walls;
use hiernav::graph::{GraphConfig, NavGraph, NodeId};
use hiernav::mazes;
use hiernav::mpc::{select_behavior, MpcConfig};
use hiernav::nn::{Activation, Mlp};
use hiernav::orchestrator::{
    format_mean_std, normalized_distance, run_benchmark, Agent, EpisodeTrace, LoopResult, Outcome, RunConfig,
    StepRecord,
};
use hiernav::env::PoseRecord;
use hiernav::pipeline::{fit_models, maze_env, resolve_maze, scripted_library, train_library};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, format!("took {:.1} s, limit {:.0} s", t.as_secs_f64(), limit.as_secs_f64()))
}

// ---------------------------------------------------------------- 1

/// Straight-line forward pass; also returns every pre-activation.
fn scalar_forward(net: &Mlp, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = x.to_vec();
    let mut pre = Vec::new();
    let n = net.weights().len();
    for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
        let (fan_in, fan_out) = w.dim();
        let act = if l + 1 == n { net.output_activation() } else { net.hidden_activation() };
        let mut out = vec![0.0; fan_out];
        for (j, o) in out.iter_mut().enumerate() {
            let mut z = b[j];
            for i in 0..fan_in {
                z += a[i] * w[[i, j]];
            }
            pre.push(z);
            *o = match act {
                Activation::Identity => z,
                Activation::Relu => z.max(0.0),
                Activation::Tanh => z.tanh(),
            };
        }
        a = out;
    }
    (a, pre)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=5)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..=8));
        }
        sizes.push(rng.random_range(1..=3));
        let hidden = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
        let output = if rng.random_bool(0.5) { Activation::Identity } else { Activation::Tanh };
        let mut net = Mlp::new(&sizes, hidden, output, &mut rng).map_err(|e| e.to_string())?;
        // keep ReLU pre-activations away from the kink so the difference quotient is smooth
        let x = loop {
            let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
            if scalar_forward(&net, &x).1.iter().all(|z| z.abs() > 1e-3) {
                break x;
            }
        };
        let upstream: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |net: &Mlp| -> f64 { scalar_forward(net, &x).0.iter().zip(&upstream).map(|(y, u)| y * u).sum() };
        let analytic = net.backward_single(&x, &upstream).map_err(|e| e.to_string())?.to_flat();
        let theta = net.to_flat();
        for k in 0..theta.len() {
            let mut p = theta.clone();
            p[k] = theta[k] + h;
            net.set_flat(&p).map_err(|e| e.to_string())?;
            let up = loss(&net);
            p[k] = theta[k] - h;
            net.set_flat(&p).map_err(|e| e.to_string())?;
            let down = loss(&net);
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        net.set_flat(&theta).map_err(|e| e.to_string())?;
    }
    ensure(worst < 1e-4, format!("max relative error {worst:.2e}"))?;
    within(start, Duration::from_secs(10))?;
    Ok(format!("100 nets, max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Check {
    let cases = [([1.0, 0.0], 1.0), ([0.0, 0.0], 0.0), ([-1.0, 1.0], -2.0)];
    for (next, want) in cases {
        let got = behavior_reward(&[0.0, 0.0], &next, &[1.0, 0.0]).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-12, format!("reward to {next:?} is {got}, expected {want}"))?;
    }
    Ok("3 reward examples exact".into())
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let cfg = DynamicsConfig {
        gradient_steps: 2000,
        ..DynamicsConfig::desk()
    };

    let c = [0.3, -0.2, 0.1];
    let pairs = (0..2000)
        .map(|_| {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = s.iter().zip(&c).map(|(s, c)| s + c).collect();
            (s, t)
        })
        .collect();
    let data = DynamicsDataset { horizon: 3, pairs };
    let (_, report) = fit(&data, 0, FeatureMap::Identity, &cfg, &mut rng).map_err(|e| e.to_string())?;
    ensure(report.holdout_mse < 1e-3, format!("constant-delta holdout MSE {:.2e}", report.holdout_mse))?;

    let specs = cardinal_specs(0.2);
    let behaviors = scripted_point_library(&specs, 0.25).map_err(|e| e.to_string())?;
    let mut env = PointEnv::new(0.25, Arena::Open { extent: 10.0 });
    let replay = collect_rollouts(&mut env, &behaviors[0], 2000, 100, &mut rng).map_err(|e| e.to_string())?;
    let point = extract_pairs(&replay, env.partition(), 3, 1.0).map_err(|e| e.to_string())?;
    let (model, _) = fit(&point, 0, env.dynamics_features(), &cfg, &mut rng).map_err(|e| e.to_string())?;
    let p = model.predict(&[1.0, -2.0]);
    let d = [p[0] - 1.0, p[1] + 2.0];
    ensure(
        (d[0] - 0.6).abs() <= 0.2 * 0.6 && d[1].abs() <= 0.2 * 0.6,
        format!("point L=3 delta {d:?}, expected (0.6, 0)"),
    )?;
    within(start, Duration::from_secs(30))?;
    Ok(format!(
        "constant-delta holdout MSE {:.2e}, point delta ({:.3}, {:.3})",
        report.holdout_mse, d[0], d[1]
    ))
}

// ---------------------------------------------------------------- 4

/// Scans `{0..n}^h` in lexicographic order; the first strict minimum wins.
fn brute_force(models: &[ConstantDelta], h: usize, s: &[f64], g: &[f64]) -> (Vec<usize>, f64) {
    let n = models.len();
    let mut best = (Vec::new(), f64::INFINITY);
    for code in 0..n.pow(h as u32) {
        let mut seq = vec![0; h];
        let mut rest = code;
        for k in (0..h).rev() {
            seq[k] = rest % n;
            rest /= n;
        }
        let mut end = s.to_vec();
        for &b in &seq {
            for (e, d) in end.iter_mut().zip(&models[b].0) {
                *e += d;
            }
        }
        let cost: f64 = end.iter().zip(g).map(|(e, g)| (e - g).powi(2)).sum();
        if cost < best.1 {
            best = (seq, cost);
        }
    }
    best
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut agree = 0;
    for case in 0..50 {
        let n = rng.random_range(1..=4);
        let h = rng.random_range(1..=3);
        // integer deltas on every other case make exact ties common
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if case % 2 == 0 {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-1.0..1.0)
            }
        };
        let models: Vec<ConstantDelta> = (0..n).map(|_| ConstantDelta(vec![draw(&mut rng), draw(&mut rng)])).collect();
        let s = [draw(&mut rng), draw(&mut rng)];
        let g = [draw(&mut rng) * 2.0, draw(&mut rng) * 2.0];
        let cfg = MpcConfig {
            horizon: h,
            ..MpcConfig::default()
        };
        let sel = select_behavior(&s, &g, &models, &[0, 1], &cfg, &mut rng).map_err(|e| e.to_string())?;
        let (seq, cost) = brute_force(&models, h, &s, &g);
        if sel.sequence == seq && sel.behavior == seq[0] && (sel.cost - cost).abs() < 1e-12 {
            agree += 1;
        }
    }
    ensure(agree == 50, format!("{agree}/50 instances agree"))?;
    within(start, Duration::from_secs(5))?;
    Ok("50/50 instances agree with brute force".into())
}

// ---------------------------------------------------------------- 5

fn dijkstra(nx: usize, ny: usize, feasible: &BTreeSet<(NodeId, NodeId)>, a: NodeId, b: NodeId) -> Option<usize> {
    let idx = |n: NodeId| n.i * ny + n.j;
    let mut dist = vec![usize::MAX; nx * ny];
    let mut heap = BinaryHeap::from([Reverse((0usize, a.i, a.j))]);
    dist[idx(a)] = 0;
    while let Some(Reverse((d, i, j))) = heap.pop() {
        if d > dist[i * ny + j] {
            continue;
        }
        let here = NodeId::new(i, j);
        for (ni, nj) in [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)] {
            if ni >= nx || nj >= ny {
                continue;
            }
            let there = NodeId::new(ni, nj);
            let key = if here < there { (here, there) } else { (there, here) };
            if feasible.contains(&key) && d + 1 < dist[idx(there)] {
                dist[idx(there)] = d + 1;
                heap.push(Reverse((d + 1, ni, nj)));
            }
        }
    }
    (dist[idx(b)] != usize::MAX).then_some(dist[idx(b)])
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut agree = 0;
    for _ in 0..100 {
        let (nx, ny) = (rng.random_range(1..=15), rng.random_range(1..=15));
        let p = rng.random_range(0.3..0.9);
        let mut g = NavGraph::new([0.5, 0.5], [1.0, 1.0], nx, ny);
        let mut feasible = BTreeSet::new();
        for n in g.nodes().collect::<Vec<_>>() {
            for m in [NodeId::new(n.i + 1, n.j), NodeId::new(n.i, n.j + 1)] {
                if !g.contains(m) {
                    continue;
                }
                let u: f64 = rng.random();
                if u < p {
                    g.record_transition(n, m, true).map_err(|e| e.to_string())?;
                    feasible.insert((n, m));
                } else if u < p + 0.05 {
                    g.record_transition(n, m, false).map_err(|e| e.to_string())?;
                }
            }
        }
        let a = NodeId::new(rng.random_range(0..nx), rng.random_range(0..ny));
        let b = NodeId::new(rng.random_range(0..nx), rng.random_range(0..ny));
        let planned = g.plan_path(a, b).map_err(|e| e.to_string())?;
        let valid = planned.as_ref().is_none_or(|path| {
            path.start() == a
                && path.goal() == b
                && path.nodes.windows(2).all(|w| {
                    let key = if w[0] < w[1] { (w[0], w[1]) } else { (w[1], w[0]) };
                    feasible.contains(&key)
                })
        });
        if valid && planned.map(|p| p.hops()) == dijkstra(nx, ny, &feasible, a, b) {
            agree += 1;
        }
    }
    ensure(agree == 100, format!("{agree}/100 graphs agree"))?;
    Ok("100/100 graphs agree with Dijkstra".into())
}

// ---------------------------------------------------------------- 6

fn point_kit() -> (Vec<Behavior>, Vec<ConstantDelta>) {
    let specs = cardinal_specs(0.1);
    let behaviors = scripted_point_library(&specs, 0.25).expect("valid specs");
    let models = specs.iter().map(|s| ConstantDelta(s.v.iter().map(|v| 3.0 * v).collect())).collect();
    (behaviors, models)
}

fn reachable_cells(maze: &MazeSpec) -> BTreeSet<(usize, usize)> {
    let mut seen = BTreeSet::from([maze.start_cell()]);
    let mut queue = VecDeque::from([maze.start_cell()]);
    while let Some((r, c)) = queue.pop_front() {
        for (nr, nc) in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
            if nr < maze.rows() && nc < maze.cols() && !maze.cell(nr, nc).is_wall() && seen.insert((nr, nc)) {
                queue.push_back((nr, nc));
            }
        }
    }
    seen
}

fn criterion_6() -> Check {
    let (behaviors, models) = point_kit();
    let mut notes = Vec::new();
    for name in ["test5x5", "cross", "skull"] {
        let maze = Arc::new(mazes::bundled(name).expect("bundled").map_err(|e| e.to_string())?);
        let mut env = PointEnv::new(0.25, Arena::Maze(maze.clone()));
        env.reset_to_start();
        let graph = NavGraph::for_maze(&maze, [1.0, 1.0]);
        let run = RunConfig {
            snapshot_every: 1,
            ..RunConfig::default()
        };
        let mut agent = Agent::new(env, &behaviors, &models, graph, &GraphConfig::default(), MpcConfig::default(), run, 6)
            .map_err(|e| e.to_string())?;
        let report = agent.run_explore().map_err(|e| e.to_string())?;
        let visited: BTreeSet<_> = agent
            .graph()
            .nodes()
            .filter(|&n| agent.graph().is_visited(n))
            .filter_map(|n| {
                let [x, y] = agent.graph().node_xy(n);
                maze.cell_at(x, y)
            })
            .collect();
        ensure(report.complete, format!("{name}: exploration did not finish"))?;
        ensure(visited == reachable_cells(&maze), format!("{name}: visited cells differ from reachable cells"))?;
        for frame in agent.frames() {
            let bad = feasible_edges_crossing_walls(&maze, &frame.graph);
            ensure(bad.is_empty(), format!("{name}: feasible edge through a wall at step {}", frame.step))?;
        }
        notes.push(format!("{name} {}/{} in {} steps", visited.len(), maze.open_cells().len(), report.steps));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let specs = cardinal_specs(0.25);
    let models: Vec<_> = specs.iter().map(|s| ConstantDelta(s.v.clone())).collect();
    let behaviors: Vec<Behavior> = scripted_point_library(&specs, 0.25).map_err(|e| e.to_string())?;
    let run = RunConfig::default();
    ensure(run.max_subgoal_steps == 100 && run.success_threshold == 0.5, "defaults are not M=100, T=0.5")?;

    // the same policies on a body that can or cannot move
    let agent_with = |max_step: f64| {
        let mut env = PointEnv::new(max_step, Arena::Open { extent: 10.0 });
        env.set_position([0.5, 0.5]);
        let graph = NavGraph::new([0.5, 0.5], [1.0, 1.0], 5, 5);
        Agent::new(env, &behaviors, &models, graph, &GraphConfig::default(), MpcConfig::default(), run.clone(), 7)
    };
    let path = hiernav::graph::PlanPath {
        nodes: vec![NodeId::new(0, 0), NodeId::new(1, 0)],
    };

    let mut stuck = agent_with(0.0).map_err(|e| e.to_string())?;
    let r = stuck.run_subgoal_loop(&path, usize::MAX).map_err(|e| e.to_string())?;
    ensure(
        r == LoopResult::Timeout { from: NodeId::new(0, 0), to: NodeId::new(1, 0) },
        format!("frozen body gave {r:?}"),
    )?;
    ensure(stuck.steps() == 101, format!("timeout after {} steps, expected 101", stuck.steps()))?;

    // +x at 0.25 per step from x = 0.5: distances 0.75, 0.5 (not yet), 0.25 (success)
    let mut mover = agent_with(0.25).map_err(|e| e.to_string())?;
    let r = mover.run_subgoal_loop(&path, usize::MAX).map_err(|e| e.to_string())?;
    ensure(r == LoopResult::Completed, format!("moving body gave {r:?}"))?;
    ensure(mover.steps() == 3, format!("subgoal reached after {} steps, expected 3", mover.steps()))?;
    Ok("timeout at step 101, success strictly inside 0.5".into())
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    let start = Instant::now();
    let cfg = PipelineConfig::profile(Profile::Desk);
    let lib = scripted_library(&cfg, 8).map_err(|e| e.to_string())?;
    let models: Vec<_> = fit_models(&lib, &cfg, 8).map_err(|e| e.to_string())?.into_iter().map(|(m, _)| m).collect();
    let maze = Arc::new(resolve_maze("cross").map_err(|e| e.to_string())?);
    let run = RunConfig {
        goals_per_run: 20,
        ..cfg.run.clone()
    };
    let runs = run_benchmark(|| maze_env(&cfg.env, maze.clone()), &lib.behaviors, &models, &cfg.graph, &cfg.mpc, &run, 1, 8)
        .map_err(|e| e.to_string())?;
    let r = &runs[0];
    ensure(r.explore.complete, format!("exploration stopped after {} steps", r.explore.steps))?;
    ensure(r.explore.steps < 50_000, format!("exploration took {} steps", r.explore.steps))?;
    ensure(r.goals_reached() >= 18, format!("{}/20 goals reached", r.goals_reached()))?;
    within(start, Duration::from_secs(120))?;
    Ok(format!(
        "explored in {} steps, {}/20 goals, {:.0} s",
        r.explore.steps,
        r.goals_reached(),
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let start = Instant::now();
    let cfg = PipelineConfig::profile(Profile::Desk);
    ensure(cfg.env.body == Body::Crawler && cfg.behavior.steps == 40_000, "desk profile is not 40k crawler steps")?;
    let (lib, evals) = train_library(&cfg, 9).map_err(|e| e.to_string())?;
    let cosines: Vec<f64> = evals.iter().map(|e| e.cosine).collect();
    ensure(
        evals.iter().all(|e| e.cosine > 0.8 && e.rollouts == 10),
        format!("behavior cosines {cosines:.3?}"),
    )?;
    let models: Vec<_> = fit_models(&lib, &cfg, 9).map_err(|e| e.to_string())?.into_iter().map(|(m, _)| m).collect();
    let maze = Arc::new(resolve_maze("cross").map_err(|e| e.to_string())?);
    let run = RunConfig {
        goals_per_run: 20,
        ..cfg.run.clone()
    };
    let runs = run_benchmark(|| maze_env(&cfg.env, maze.clone()), &lib.behaviors, &models, &cfg.graph, &cfg.mpc, &run, 1, 9)
        .map_err(|e| e.to_string())?;
    let r = &runs[0];
    let rate = r.goals_reached() as f64 / 20.0;
    ensure(
        rate >= 0.75,
        format!(
            "cosines {cosines:.3?}; explored {} steps ({} nodes); goal success {rate:.2}",
            r.explore.steps, r.explore.visited
        ),
    )?;
    within(start, Duration::from_secs(30 * 60))?;
    Ok(format!(
        "cosines {cosines:.3?}, goal success {rate:.2}, {:.0} s",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Check {
    let pinned = |pos: [f64; 2]| EpisodeTrace {
        records: (1..=200)
            .map(|step| StepRecord {
                step,
                pose: PoseRecord {
                    x: pos[0],
                    y: pos[1],
                    ..Default::default()
                },
                behavior: 0,
                subgoal: NodeId::new(0, 0),
                subgoal_xy: [0.0, 0.0],
                mpc_cost: 0.0,
            })
            .collect(),
        outcome: Outcome::EpisodeCap,
    };
    let goal = [6.0, -8.0];
    let origin = normalized_distance(&pinned([0.0, 0.0]), goal).map_err(|e| e.to_string())?;
    let at_goal = normalized_distance(&pinned(goal), goal).map_err(|e| e.to_string())?;
    ensure((origin - 1.0).abs() <= 1e-12, format!("pinned at origin gives {origin}"))?;
    ensure(at_goal.abs() <= 1e-12, format!("pinned at goal gives {at_goal}"))?;
    let cell = format_mean_std(&[14661.0, 26748.6]);
    ensure(cell == "20704.8 (6043.8)", format!("table cell {cell:?}"))?;
    ensure(format_mean_std(&[3.0]) == "3.0 (0.0)", "single-run cell")?;
    Ok(format!("normalized distance 1 and 0 exact, table cell {cell}"))
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "gradient oracle", criterion_1),
        (2, "behavior reward examples", criterion_2),
        (3, "dynamics fitting", criterion_3),
        (4, "MPC brute-force oracle", criterion_4),
        (5, "graph planning oracle", criterion_5),
        (6, "exploration completeness", criterion_6),
        (7, "subgoal loop semantics", criterion_7),
        (8, "scripted desk benchmark", criterion_8),
        (9, "learned desk benchmark", criterion_9),
        (10, "metric formula and table format", criterion_10),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id:>2} PASS  {name} [{secs:.1} s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name} [{secs:.1} s]: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
