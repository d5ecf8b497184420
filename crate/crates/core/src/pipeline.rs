//! The end-to-end steps shared by the command line and the tests: building
//! environments from configuration, producing a behavior library, fitting
//! its dynamics models and loading everything back from disk.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::behavior::{
    behavior_seed, build_library, cardinal_specs, collect_rollouts, scripted_crawler_library, scripted_point_library,
    Behavior, BehaviorLibrary, BehaviorSpec, EvalReport,
};
use crate::config::{Body, EnvConfig, PipelineConfig};
use crate::dynmodel::{extract_pairs, fit, BehaviorDynamicsModel, FeatureMap, FitReport};
use crate::env::{
    Arena, CrawlerEnv, EnvError, Environment, MazeSpec, ObservationPartition, PointEnv, PoseRecord,
};
use crate::{mazes, Error};

/// Either simulator, chosen at run time.
#[derive(Debug, Clone)]
pub enum AnyEnv {
    Crawler(CrawlerEnv),
    Point(PointEnv),
}

macro_rules! delegate {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Crawler($e) => $body,
            AnyEnv::Point($e) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn partition(&self) -> &ObservationPartition {
        delegate!(self, e => e.partition())
    }
    fn action_dim(&self) -> usize {
        delegate!(self, e => e.action_dim())
    }
    fn observe(&self) -> Vec<f64> {
        delegate!(self, e => e.observe())
    }
    fn step(&mut self, action: &[f64]) -> Result<(), EnvError> {
        delegate!(self, e => e.step(action))
    }
    fn position(&self) -> [f64; 2] {
        delegate!(self, e => e.position())
    }
    fn pose(&self) -> PoseRecord {
        delegate!(self, e => e.pose())
    }
    fn reset_random(&mut self, rng: &mut dyn rand::RngCore) {
        delegate!(self, e => e.reset_random(rng))
    }
    fn reset_to_start(&mut self) {
        delegate!(self, e => e.reset_to_start())
    }
    fn reset_orientation(&mut self) {
        delegate!(self, e => e.reset_orientation())
    }
    fn max_step_distance(&self) -> f64 {
        delegate!(self, e => e.max_step_distance())
    }
    fn dynamics_features(&self) -> FeatureMap {
        delegate!(self, e => e.dynamics_features())
    }
    fn maze(&self) -> Option<&MazeSpec> {
        delegate!(self, e => e.maze())
    }
}

pub fn make_env(cfg: &EnvConfig, arena: Arena) -> AnyEnv {
    match cfg.body {
        Body::Crawler => AnyEnv::Crawler(CrawlerEnv::new(cfg.crawler, arena)),
        Body::Point => AnyEnv::Point(PointEnv::new(cfg.point_max_step, arena)),
    }
}

/// Open square used to train behaviors.
pub fn training_env(cfg: &EnvConfig) -> AnyEnv {
    make_env(cfg, Arena::Open { extent: cfg.training_extent })
}

/// Environment placed at the maze start.
pub fn maze_env(cfg: &EnvConfig, maze: Arc<MazeSpec>) -> AnyEnv {
    let mut env = make_env(cfg, Arena::Maze(maze));
    env.reset_to_start();
    env
}

/// A bundled maze by name, otherwise a maze file path.
pub fn resolve_maze(name_or_path: &str) -> Result<MazeSpec, Error> {
    if let Some(m) = mazes::bundled(name_or_path) {
        return Ok(m?);
    }
    let path = Path::new(name_or_path);
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("maze `{name_or_path}` is neither bundled nor readable: {e}")))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("maze");
    Ok(MazeSpec::parse(&text, name)?)
}

pub fn behavior_specs(cfg: &PipelineConfig) -> Vec<BehaviorSpec> {
    cardinal_specs(cfg.behavior.step_magnitude)
}

pub fn scripted_behaviors(cfg: &PipelineConfig) -> Result<Vec<Behavior>, Error> {
    let specs = behavior_specs(cfg);
    Ok(match cfg.env.body {
        Body::Crawler => scripted_crawler_library(&specs, cfg.env.crawler)?,
        Body::Point => scripted_point_library(&specs, cfg.env.point_max_step)?,
    })
}

/// Scripted behaviors with rollout data matching what training would have
/// retained, so dynamics can be fitted the same way.
pub fn scripted_library(cfg: &PipelineConfig, seed: u64) -> Result<BehaviorLibrary, Error> {
    let behaviors = scripted_behaviors(cfg)?;
    let steps = ((cfg.behavior.steps as f64) * cfg.dynamics.tail_fraction).ceil() as usize;
    let replay = behaviors
        .par_iter()
        .map(|b| {
            let mut env = training_env(&cfg.env);
            let mut rng = ChaCha8Rng::seed_from_u64(behavior_seed(seed, b.spec.id));
            collect_rollouts(&mut env, b, steps.max(1), cfg.behavior.max_episode_len, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BehaviorLibrary { behaviors, replay })
}

/// Trains the cardinal behaviors in the open training arena.
pub fn train_library(cfg: &PipelineConfig, seed: u64) -> Result<(BehaviorLibrary, Vec<EvalReport>), Error> {
    Ok(build_library(
        || training_env(&cfg.env),
        &behavior_specs(cfg),
        &cfg.behavior,
        seed,
        cfg.dynamics.tail_fraction,
    )?)
}

/// One dynamics model per behavior, fitted on the library's retained data.
pub fn fit_models(
    library: &BehaviorLibrary,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<(BehaviorDynamicsModel, FitReport)>, Error> {
    if library.replay.len() != library.behaviors.len() || library.replay.iter().any(|r| r.is_empty()) {
        return Err(Error::MissingArtifact("behavior library carries no rollout data".into()));
    }
    let env = training_env(&cfg.env);
    let partition = env.partition().clone();
    let features = env.dynamics_features();
    library
        .behaviors
        .par_iter()
        .zip(&library.replay)
        .map(|(b, replay)| {
            let data = extract_pairs(replay, &partition, cfg.dynamics.horizon, 1.0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(behavior_seed(seed ^ 0xD1_4A_11C5, b.spec.id));
            Ok(fit(&data, b.spec.id, features.clone(), &cfg.dynamics, &mut rng)?)
        })
        .collect()
}

pub fn save_models(dir: &Path, models: &[BehaviorDynamicsModel]) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(crate::dynmodel::DynError::from)?;
    for m in models {
        m.save(&dir.join(BehaviorDynamicsModel::file_name(m.behavior_id)))?;
    }
    Ok(())
}

/// Models for every behavior of the library, in library order.
pub fn load_models(dir: &Path, behaviors: &[Behavior]) -> Result<Vec<BehaviorDynamicsModel>, Error> {
    behaviors
        .iter()
        .map(|b| {
            let path = dir.join(BehaviorDynamicsModel::file_name(b.spec.id));
            if !path.is_file() {
                return Err(Error::MissingArtifact(format!("missing {}", path.display())));
            }
            Ok(BehaviorDynamicsModel::load(&path)?)
        })
        .collect()
}
