//! Hierarchical navigation from a library of locomotion behaviors.
//!
//! Three levels cooperate. Low-level [`behavior`] policies each push the body
//! in one fixed direction. A mid-level controller ([`mpc`]) chains learned
//! per-behavior displacement models ([`dynmodel`]) to pick the behavior that
//! best approaches a nearby subgoal. The top level ([`graph`]) learns a grid
//! graph of the world while exploring and plans node-to-node paths over it.
//! [`orchestrator`] ties the levels into exploration and goal-reaching runs.
//!
//! ```
//! use hiernav::behavior::{cardinal_specs, scripted_point_library};
//! use hiernav::dynmodel::ConstantDelta;
//! use hiernav::env::{Arena, Environment, PointEnv};
//! use hiernav::graph::{GraphConfig, NavGraph};
//! use hiernav::mazes;
//! use hiernav::mpc::MpcConfig;
//! use hiernav::orchestrator::{Agent, RunConfig};
//! use std::sync::Arc;
//!
//! let maze = Arc::new(mazes::bundled("cross").unwrap().unwrap());
//! let specs = cardinal_specs(0.1);
//! let behaviors = scripted_point_library(&specs, 0.25).unwrap();
//! let models: Vec<_> = specs.iter().map(|s| ConstantDelta(vec![3.0 * s.v[0], 3.0 * s.v[1]])).collect();
//!
//! let mut env = PointEnv::new(0.25, Arena::Maze(maze.clone()));
//! env.reset_to_start();
//! let graph = NavGraph::for_maze(&maze, [1.0, 1.0]);
//! let mut agent = Agent::new(
//!     env, &behaviors, &models, graph,
//!     &GraphConfig::default(), MpcConfig::default(), RunConfig::default(), 7,
//! ).unwrap();
//!
//! let report = agent.run_explore().unwrap();
//! assert!(report.complete);
//! assert_eq!(report.visited, maze.open_cells().len());
//! ```

pub mod behavior;
pub mod config;
pub mod dynmodel;
pub mod env;
pub mod export;
pub mod graph;
pub mod mazes;
pub mod mpc;
pub mod nn;
pub mod orchestrator;
pub mod pipeline;

// Book chapters compile and run as doctests so the guide cannot drift.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/behaviors.md")]
    mod behaviors {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/mpc.md")]
    mod mpc {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/running.md")]
    mod running {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}

use thiserror::Error;

/// Any error the library can produce.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Maze(#[from] env::MazeError),
    #[error(transparent)]
    Behavior(#[from] behavior::BehaviorError),
    #[error(transparent)]
    Dynamics(#[from] dynmodel::DynError),
    #[error(transparent)]
    Mpc(#[from] mpc::MpcError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Run(#[from] orchestrator::RunError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Export(#[from] export::ExportError),
    #[error("{0}")]
    MissingArtifact(String),
}
