//! Model-predictive behavior selection.
//!
//! A candidate plan is a sequence of `H` behavior indices. Its cost is the
//! squared distance between the goal and the interest-dimension projection
//! of the state reached by chaining the behaviors' dynamics models. Only the
//! first behavior of the best plan is executed, for a single step, before
//! planning again.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynmodel::DeltaPredictor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("no behavior models to plan with")]
    EmptyModels,
    #[error("behavior index {index} out of range for {count} models")]
    UnknownBehavior { index: usize, count: usize },
    #[error("invalid MPC configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    /// Behaviors per plan (`H`).
    pub horizon: usize,
    /// Plans sampled per query (`K`) when not enumerating.
    pub samples: usize,
    /// Enumerate every plan whenever `N^H` is at most `max(samples, exhaustive_threshold)`.
    pub exhaustive_threshold: usize,
    /// Relative cost slack within which the previously executed behavior is
    /// kept. Zero switches freely.
    pub switch_margin: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 2,
            samples: 16,
            exhaustive_threshold: 4096,
            switch_margin: 0.0,
        }
    }
}

impl MpcConfig {
    pub fn desk() -> Self {
        MpcConfig {
            switch_margin: 0.1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.horizon == 0 || self.samples == 0 {
            return Err(MpcError::Config("horizon and samples must be at least 1".into()));
        }
        if !(self.switch_margin >= 0.0 && self.switch_margin.is_finite()) {
            return Err(MpcError::Config("switch_margin must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Whether a library of `n` behaviors is small enough to enumerate.
    pub fn is_exhaustive(&self, n: usize) -> bool {
        u32::try_from(self.horizon)
            .ok()
            .and_then(|h| n.checked_pow(h))
            .is_some_and(|total| total <= self.samples.max(self.exhaustive_threshold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// First behavior of the winning plan; the one to execute now.
    pub behavior: usize,
    pub sequence: Vec<usize>,
    pub cost: f64,
}

fn sq_dist_projected(state: &[f64], goal: &[f64], interest: &[usize]) -> f64 {
    interest.iter().zip(goal).map(|(&i, g)| (state[i] - g).powi(2)).sum()
}

/// Squared distance between `goal_h` and the interest projection of
/// `f_{b_H}(… f_{b_1}(s_m))`. `interest` gives the positions of the interest
/// dimensions inside `s_m`.
pub fn rollout_cost<M: DeltaPredictor>(
    sequence: &[usize],
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
) -> Result<f64, MpcError> {
    let mut state = s_m.to_vec();
    for &b in sequence {
        let model = models.get(b).ok_or(MpcError::UnknownBehavior {
            index: b,
            count: models.len(),
        })?;
        state = model.predict(&state);
    }
    Ok(sq_dist_projected(&state, goal_h, interest))
}

struct Best {
    cost: f64,
    sequence: Vec<usize>,
}

impl Best {
    fn offer(&mut self, cost: f64, sequence: &[usize]) {
        if cost < self.cost || (cost == self.cost && sequence < self.sequence.as_slice()) {
            self.cost = cost;
            self.sequence = sequence.to_vec();
        }
    }
}

/// Depth-first enumeration in lexicographic order, sharing prefix predictions.
fn enumerate<M: DeltaPredictor>(
    state: &[f64],
    prefix: &mut Vec<usize>,
    horizon: usize,
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
    best: &mut Best,
) {
    if prefix.len() == horizon {
        best.offer(sq_dist_projected(state, goal_h, interest), prefix);
        return;
    }
    for (b, model) in models.iter().enumerate() {
        let next = model.predict(state);
        prefix.push(b);
        enumerate(&next, prefix, horizon, goal_h, models, interest, best);
        prefix.pop();
    }
}

/// Picks the plan with the lowest [`rollout_cost`]. Plans are enumerated when
/// the space is small enough (see [`MpcConfig::is_exhaustive`]), otherwise `K`
/// plans are drawn uniformly with replacement. Equal costs resolve to the
/// lexicographically smallest plan.
pub fn select_behavior<M: DeltaPredictor, R: Rng + ?Sized>(
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
    cfg: &MpcConfig,
    rng: &mut R,
) -> Result<Selection, MpcError> {
    cfg.validate()?;
    if cfg.is_exhaustive(models.len()) {
        select_exhaustive(s_m, goal_h, models, interest, cfg.horizon)
    } else {
        select_sampled(s_m, goal_h, models, interest, cfg.horizon, cfg.samples, rng)
    }
}

/// [`select_behavior`], except that `previous` stays selected while its best
/// plan costs at most `1 + switch_margin` times the overall best.
pub fn select_behavior_sticky<M: DeltaPredictor, R: Rng + ?Sized>(
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
    cfg: &MpcConfig,
    previous: Option<usize>,
    rng: &mut R,
) -> Result<Selection, MpcError> {
    let sel = select_behavior(s_m, goal_h, models, interest, cfg, rng)?;
    match previous {
        Some(p) if cfg.switch_margin > 0.0 && p != sel.behavior => {
            let kept = best_starting_with(p, s_m, goal_h, models, interest, cfg.horizon)?;
            Ok(if kept.cost <= sel.cost * (1.0 + cfg.switch_margin) { kept } else { sel })
        }
        _ => Ok(sel),
    }
}

/// Best plan whose first behavior is `first`, enumerating the rest.
pub fn best_starting_with<M: DeltaPredictor>(
    first: usize,
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
    horizon: usize,
) -> Result<Selection, MpcError> {
    let model = models.get(first).ok_or(MpcError::UnknownBehavior {
        index: first,
        count: models.len(),
    })?;
    let horizon = horizon.max(1);
    let mut best = Best {
        cost: f64::INFINITY,
        sequence: Vec::new(),
    };
    let mut prefix = vec![first];
    enumerate(&model.predict(s_m), &mut prefix, horizon, goal_h, models, interest, &mut best);
    if best.sequence.is_empty() {
        best.sequence = vec![first; horizon];
        best.cost = rollout_cost(&best.sequence, s_m, goal_h, models, interest)?;
    }
    Ok(Selection {
        behavior: first,
        sequence: best.sequence,
        cost: best.cost,
    })
}

/// Scores every plan in `{0..N}^H`.
pub fn select_exhaustive<M: DeltaPredictor>(
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
    horizon: usize,
) -> Result<Selection, MpcError> {
    if models.is_empty() {
        return Err(MpcError::EmptyModels);
    }
    let mut best = Best {
        cost: f64::INFINITY,
        sequence: Vec::new(),
    };
    let mut prefix = Vec::with_capacity(horizon);
    enumerate(s_m, &mut prefix, horizon, goal_h, models, interest, &mut best);
    finish(best, s_m, goal_h, models, interest, horizon)
}

/// Scores `samples` plans drawn uniformly with replacement.
pub fn select_sampled<M: DeltaPredictor, R: Rng + ?Sized>(
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
    horizon: usize,
    samples: usize,
    rng: &mut R,
) -> Result<Selection, MpcError> {
    if models.is_empty() {
        return Err(MpcError::EmptyModels);
    }
    let mut best = Best {
        cost: f64::INFINITY,
        sequence: Vec::new(),
    };
    for _ in 0..samples {
        let seq: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..models.len())).collect();
        let cost = rollout_cost(&seq, s_m, goal_h, models, interest)?;
        best.offer(cost, &seq);
    }
    finish(best, s_m, goal_h, models, interest, horizon)
}

fn finish<M: DeltaPredictor>(
    mut best: Best,
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
    horizon: usize,
) -> Result<Selection, MpcError> {
    if best.sequence.is_empty() {
        // every cost was NaN; fall back to the first plan deterministically
        best.sequence = vec![0; horizon];
        best.cost = rollout_cost(&best.sequence, s_m, goal_h, models, interest)?;
    }
    Ok(Selection {
        behavior: best.sequence[0],
        sequence: best.sequence,
        cost: best.cost,
    })
}

/// One-behavior lookahead: the behavior whose single prediction lands closest to the goal.
pub fn greedy_distance_baseline<M: DeltaPredictor>(
    s_m: &[f64],
    goal_h: &[f64],
    models: &[M],
    interest: &[usize],
) -> Result<usize, MpcError> {
    if models.is_empty() {
        return Err(MpcError::EmptyModels);
    }
    let mut best = Best {
        cost: f64::INFINITY,
        sequence: vec![0],
    };
    for (b, model) in models.iter().enumerate() {
        best.offer(sq_dist_projected(&model.predict(s_m), goal_h, interest), &[b]);
    }
    Ok(best.sequence[0])
}
