use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hiernav::behavior::{behavior_seed, evaluate_behavior, BehaviorLibrary, EvalReport};
use hiernav::config::{PipelineConfig, Profile};
use hiernav::dynmodel::{BehaviorDynamicsModel, FitReport};
use hiernav::export::{export_plots, save_run, write_metrics_csv, write_snapshot};
use hiernav::graph::NavGraph;
use hiernav::orchestrator::{benchmark_row, run_benchmark, Agent, ReachReport, RunMetrics};
use hiernav::pipeline::{
    fit_models, load_models, maze_env, resolve_maze, save_models, scripted_library, train_library, training_env,
};
use hiernav::Error;

#[derive(Parser, Debug)]
#[command(name = "hiernav", version, about = "Hierarchical maze navigation from learned locomotion behaviors")]
struct Cli {
    /// JSON file overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `paper` or `desk`.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train (or script) the four cardinal behaviors and save the library.
    TrainBehaviors {
        #[arg(long)]
        out: PathBuf,
        /// Write hand-written controllers instead of training.
        #[arg(long)]
        scripted: bool,
    },
    /// Fit one dynamics model per behavior of a library.
    FitDynamics {
        #[arg(long)]
        library: PathBuf,
    },
    /// Explore a maze, reach goals or benchmark.
    Run(RunArgs),
    /// Render the snapshots of a run directory as SVG maps plus CSV series.
    ExportPlots {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Directory holding the behavior library and its dynamics models.
    #[arg(long)]
    library: PathBuf,
    /// Bundled maze name or maze file; defaults to the configured maze.
    #[arg(long)]
    maze: Option<String>,
    /// Where run artifacts are written.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Subcommand, Debug)]
enum Mode {
    /// Explore until no frontier is left.
    Explore,
    /// Explore, then navigate to one point.
    Goal {
        #[arg(allow_negative_numbers = true)]
        x: f64,
        #[arg(allow_negative_numbers = true)]
        y: f64,
    },
    /// Explore, then navigate to each point of a JSON list `[[x, y], ...]` in order.
    Waypoints { file: PathBuf },
    /// `n` seeded explore-then-navigate repetitions.
    Benchmark { n: usize },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {0}: {1}")]
    Write(PathBuf, std::io::Error),
    #[error("goal not reached; graph snapshot written to {0}")]
    Unreachable(PathBuf),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lib(Error::Config(_)) => 2,
            CliError::Lib(Error::MissingArtifact(_) | Error::Behavior(_) | Error::Dynamics(_) | Error::Maze(_)) => 3,
            CliError::Unreachable(_) | CliError::Lib(Error::Run(_) | Error::Graph(_) | Error::Mpc(_)) => 4,
            CliError::Write(..) | CliError::Lib(Error::Export(_)) => 5,
            CliError::Lib(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("HIERNAV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("HIERNAV_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let profile: Profile = cli.profile.parse().map_err(Error::from)?;
    let cfg = PipelineConfig::load(profile, cli.config.as_deref()).map_err(Error::from)?;
    match cli.command {
        Command::TrainBehaviors { out, scripted } => train_behaviors(&cfg, cli.seed, &out, scripted),
        Command::FitDynamics { library } => fit_dynamics(&cfg, cli.seed, &library),
        Command::Run(args) => run(&cfg, cli.seed, args),
        Command::ExportPlots { run, out } => {
            let files = export_plots(&run, &out).map_err(Error::from)?;
            println!("wrote {} maps to {}", files.len(), out.display());
            Ok(())
        }
    }
}

fn train_behaviors(cfg: &PipelineConfig, seed: u64, out: &Path, scripted: bool) -> Result<(), CliError> {
    let (library, evals) = if scripted {
        let library = scripted_library(cfg, seed)?;
        let evals = library
            .behaviors
            .iter()
            .map(|b| {
                let mut env = training_env(&cfg.env);
                let mut rng = ChaCha8Rng::seed_from_u64(behavior_seed(seed, b.spec.id));
                evaluate_behavior(&mut env, b, cfg.behavior.eval_rollouts, cfg.behavior.eval_steps, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(Error::from)?;
        (library, evals)
    } else {
        train_library(cfg, seed)?
    };
    library.save(out).map_err(Error::from)?;
    for (b, e) in library.behaviors.iter().zip(&evals) {
        print_eval(b.spec.id, &b.spec.v, e);
    }
    println!("library written to {}", out.display());
    Ok(())
}

fn print_eval(id: usize, v: &[f64], e: &EvalReport) {
    let step: Vec<String> = e.mean_step.iter().map(|x| format!("{x:+.4}")).collect();
    let target: Vec<String> = v.iter().map(|x| format!("{x:+.4}")).collect();
    println!(
        "behavior {id}: target ({}) mean step ({}) cosine {:.3}",
        target.join(", "),
        step.join(", "),
        e.cosine
    );
}

fn fit_dynamics(cfg: &PipelineConfig, seed: u64, dir: &Path) -> Result<(), CliError> {
    let library = load_library(dir)?;
    let fitted = fit_models(&library, cfg, seed)?;
    for (_, r) in &fitted {
        println!("behavior {}: holdout error {:.4}", r.behavior_id, r.holdout_error);
    }
    let reports: Vec<&FitReport> = fitted.iter().map(|(_, r)| r).collect();
    let report = serde_json::to_string_pretty(&reports).expect("fit reports serialize");
    let models: Vec<BehaviorDynamicsModel> = fitted.into_iter().map(|(m, _)| m).collect();
    save_models(dir, &models)?;
    let path = dir.join("fit_report.json");
    std::fs::write(&path, report).map_err(|e| CliError::Write(path.clone(), e))?;
    println!("models written to {}", dir.display());
    Ok(())
}

fn load_library(dir: &Path) -> Result<BehaviorLibrary, CliError> {
    if !dir.join("library.json").is_file() {
        return Err(Error::MissingArtifact(format!("no library.json in {}", dir.display())).into());
    }
    Ok(BehaviorLibrary::load(dir).map_err(Error::from)?)
}

fn run(cfg: &PipelineConfig, seed: u64, args: RunArgs) -> Result<(), CliError> {
    let library = load_library(&args.library)?;
    let models = load_models(&args.library, &library.behaviors)?;
    let maze = Arc::new(resolve_maze(args.maze.as_deref().unwrap_or(&cfg.env.maze))?);

    if let Mode::Benchmark { n } = args.mode {
        if n == 0 {
            return Err(CliError::Usage("benchmark needs at least one run".into()));
        }
        let runs = run_benchmark(
            || maze_env(&cfg.env, maze.clone()),
            &library.behaviors,
            &models,
            &cfg.graph,
            &cfg.mpc,
            &cfg.run,
            n,
            seed,
        )
        .map_err(Error::from)?;
        let metrics: Vec<RunMetrics> = runs.iter().flat_map(|r| r.metrics.iter().cloned()).collect();
        std::fs::create_dir_all(&args.out).map_err(|e| CliError::Write(args.out.clone(), e))?;
        write_metrics_csv(&args.out.join("metrics.csv"), &metrics).map_err(Error::from)?;
        println!("{}", benchmark_row(&title_case(maze.name()), &runs));
        return Ok(());
    }

    let graph = NavGraph::for_maze(&maze, cfg.graph.spacing());
    let env = maze_env(&cfg.env, maze.clone());
    let mut agent = Agent::new(
        env,
        &library.behaviors,
        &models,
        graph,
        &cfg.graph,
        cfg.mpc.clone(),
        cfg.run.clone(),
        seed,
    )
    .map_err(Error::from)?;

    let name = maze.name().to_string();
    let mut metrics = Vec::new();
    let mut failed = false;
    // goals are planned over explored edges, so every mode maps the maze first
    let r = agent.run_explore().map_err(Error::from)?;
    println!(
        "explored {} of {} cells in {} steps ({} timeouts, complete: {})",
        r.visited,
        maze.open_cells().len(),
        r.steps,
        r.subgoal_timeouts,
        r.complete
    );
    metrics.push(RunMetrics::from_explore(0, seed, &name, &r));
    match args.mode {
        Mode::Explore => {}
        Mode::Goal { x, y } => {
            let r = agent.run_reach_goal([x, y]).map_err(Error::from)?;
            report_goal([x, y], &r);
            failed = !r.success;
            metrics.push(RunMetrics::from_reach(0, seed, &name, &r));
        }
        Mode::Waypoints { file } => {
            let points = read_waypoints(&file)?;
            let reports = agent.run_waypoints(&points).map_err(Error::from)?;
            for (p, r) in points.iter().zip(&reports) {
                report_goal(*p, r);
                metrics.push(RunMetrics::from_reach(0, seed, &name, r));
            }
            failed = reports.len() < points.len() || reports.iter().any(|r| !r.success);
        }
        Mode::Benchmark { .. } => unreachable!("handled above"),
    }
    agent.snapshot();
    save_run(&args.out, &maze, agent.frames(), agent.records(), &metrics).map_err(Error::from)?;
    if failed {
        let path = args.out.join("unreachable_graph.json");
        write_snapshot(&path, &agent.graph().snapshot()).map_err(Error::from)?;
        return Err(CliError::Unreachable(path));
    }
    println!("run written to {}", args.out.display());
    Ok(())
}

fn report_goal(goal: [f64; 2], r: &ReachReport) {
    let status = if r.success { "reached" } else { "failed" };
    println!(
        "goal ({:.2}, {:.2}): {status} in {} steps ({} replans)",
        goal[0], goal[1], r.steps, r.replans
    );
}

fn read_waypoints(path: &Path) -> Result<Vec<[f64; 2]>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("cannot read {}: {e}", path.display())))?;
    let points: Vec<[f64; 2]> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: expected [[x, y], ...]: {e}", path.display())))?;
    if points.is_empty() {
        return Err(CliError::Usage(format!("{} lists no waypoints", path.display())));
    }
    Ok(points)
}

fn title_case(name: &str) -> String {
    let mut c = name.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}
