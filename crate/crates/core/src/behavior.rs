//! The behavior library: low-level policies that each push the external state
//! in one consistent direction.
//!
//! A behavior is trained with the directional reward
//! `R_v(s_t, s_{t+1}) = 1 − ‖(s_{t+1} − s_t) − v‖₁` (see [`behavior_reward`])
//! by a twin-critic, delayed-actor, target-smoothed actor-critic learner
//! ([`Td3`]). The policy only ever sees proprioceptive inputs; the reward only
//! ever looks at the dimensions of interest.
//!
//! Scripted controllers with the same interface are provided so the upper
//! levels can be exercised without any training.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{CrawlerParams, EnvError, Environment};
use crate::nn::{polyak_update, Activation, Mlp, NnError, Optimizer};

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite critic loss at environment step {step}")]
    NonFiniteLoss { step: usize },
    #[error("behavior library needs at least one spec")]
    EmptySpecs,
    #[error("behavior specs {0} and {1} share the same target vector")]
    DuplicateSpec(usize, usize),
    #[error("non-finite target vector in spec {0}")]
    NonFiniteSpec(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("library I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("library format: {0}")]
    Format(String),
}

/// `1 − ‖(s_{t+1} − s_t) − v‖₁`. Callers pass the interest-dimension
/// projections of consecutive states.
pub fn behavior_reward(s_t: &[f64], s_t1: &[f64], v: &[f64]) -> Result<f64, BehaviorError> {
    if s_t.len() != s_t1.len() || s_t.len() != v.len() {
        return Err(BehaviorError::Dimension {
            expected: v.len(),
            got: if s_t.len() != v.len() { s_t.len() } else { s_t1.len() },
        });
    }
    let l1: f64 = s_t.iter().zip(s_t1).zip(v).map(|((a, b), v)| ((b - a) - v).abs()).sum();
    Ok(1.0 - l1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSpec {
    pub id: usize,
    /// Desired per-step change of the interest dimensions.
    pub v: Vec<f64>,
}

/// The four cardinal directions `+x, −x, +y, −y`, scaled to `magnitude` per step.
pub fn cardinal_specs(magnitude: f64) -> Vec<BehaviorSpec> {
    [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
        .iter()
        .enumerate()
        .map(|(id, d)| BehaviorSpec {
            id,
            v: vec![d[0] * magnitude, d[1] * magnitude],
        })
        .collect()
}

pub fn validate_specs(specs: &[BehaviorSpec]) -> Result<(), BehaviorError> {
    if specs.is_empty() {
        return Err(BehaviorError::EmptySpecs);
    }
    for (i, a) in specs.iter().enumerate() {
        if a.v.iter().any(|x| !x.is_finite()) {
            return Err(BehaviorError::NonFiniteSpec(a.id));
        }
        if let Some(b) = specs[..i].iter().find(|b| b.v == a.v) {
            return Err(BehaviorError::DuplicateSpec(b.id, a.id));
        }
    }
    Ok(())
}

/// Steer-then-drive controller for the crawler: turns in place while the
/// heading error is large, then drives with proportional steering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrawlerSteering {
    /// Direction of travel, radians.
    pub direction: f64,
    /// Desired distance per step.
    pub step_length: f64,
    pub params: CrawlerParams,
    pub heading_gain: f64,
    pub wheel_gain: f64,
}

impl CrawlerSteering {
    pub fn new(v: &[f64], params: CrawlerParams) -> Self {
        CrawlerSteering {
            direction: v[1].atan2(v[0]),
            step_length: v[0].hypot(v[1]),
            params,
            heading_gain: 2.0,
            wheel_gain: 5.0,
        }
    }

    /// `s_l = (w_L, w_R, cos φ, sin φ)`.
    pub fn act(&self, s_l: &[f64]) -> [f64; 2] {
        let p = &self.params;
        let heading = s_l[3].atan2(s_l[2]);
        let err = wrap_angle(self.direction - heading);
        let cruise = self.step_length / p.dt / p.wheel_radius;
        let w_mean = cruise * err.cos().max(0.0).powi(3);
        let w_diff = p.axle_width / p.wheel_radius * self.heading_gain * err;
        let target = [w_mean - w_diff / 2.0, w_mean + w_diff / 2.0];
        let mut a = [0.0; 2];
        for k in 0..2 {
            let w = s_l[k];
            a[k] = ((p.drag * target[k] + self.wheel_gain * (target[k] - w)) / p.max_accel).clamp(-1.0, 1.0);
        }
        a
    }
}

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    Learned { net: Mlp },
    ScriptedCrawler { controller: CrawlerSteering },
    /// Constant command, for the point body.
    ScriptedConstant { action: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Behavior {
    pub spec: BehaviorSpec,
    pub policy: Policy,
}

impl Behavior {
    /// Deterministic action for the proprioceptive state `s_l`; no
    /// exploration noise and no side effects.
    pub fn act(&self, s_l: &[f64]) -> Result<Vec<f64>, BehaviorError> {
        match &self.policy {
            Policy::Learned { net } => {
                if s_l.len() != net.input_dim() {
                    return Err(BehaviorError::Dimension {
                        expected: net.input_dim(),
                        got: s_l.len(),
                    });
                }
                Ok(net.forward(s_l)?)
            }
            Policy::ScriptedCrawler { controller } => {
                if s_l.len() != 4 {
                    return Err(BehaviorError::Dimension { expected: 4, got: s_l.len() });
                }
                Ok(controller.act(s_l).to_vec())
            }
            Policy::ScriptedConstant { action } => Ok(action.clone()),
        }
    }
}

/// Scripted steer-then-drive behaviors for the crawler, one per spec.
pub fn scripted_crawler_library(specs: &[BehaviorSpec], params: CrawlerParams) -> Result<Vec<Behavior>, BehaviorError> {
    validate_specs(specs)?;
    Ok(specs
        .iter()
        .map(|spec| Behavior {
            spec: spec.clone(),
            policy: Policy::ScriptedCrawler {
                controller: CrawlerSteering::new(&spec.v, params),
            },
        })
        .collect())
}

/// Scripted constant-velocity behaviors for the point body.
pub fn scripted_point_library(specs: &[BehaviorSpec], max_step: f64) -> Result<Vec<Behavior>, BehaviorError> {
    validate_specs(specs)?;
    Ok(specs
        .iter()
        .map(|spec| Behavior {
            spec: spec.clone(),
            policy: Policy::ScriptedConstant {
                action: spec.v.iter().map(|v| (v / max_step).clamp(-1.0, 1.0)).collect(),
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub episode: u64,
    /// Index of this step inside its episode.
    pub step_index: usize,
}

/// Fixed-capacity ring buffer; once full, the oldest transition is overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Slot the next push writes to once the buffer is full.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Oldest-first iteration.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items[self.head..].iter().chain(&self.items[..self.head])
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }

    /// The most recent `fraction` of the stored transitions, as a new buffer.
    pub fn tail(&self, fraction: f64) -> ReplayBuffer {
        let n = ((self.len() as f64) * fraction).ceil() as usize;
        let skip = self.len() - n.min(self.len());
        let mut out = ReplayBuffer::new(n.max(1));
        self.iter().skip(skip).cloned().for_each(|t| out.push(t));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    /// Environment steps per behavior.
    pub steps: usize,
    pub random_action_steps: usize,
    pub update_after: usize,
    /// Environment steps between update phases; each phase runs this many gradient steps.
    pub update_every: usize,
    pub max_episode_len: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub policy_delay: usize,
    pub gamma: f64,
    pub polyak: f64,
    pub policy_lr: f64,
    pub q_lr: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub action_noise: f64,
    pub hidden_sizes: Vec<usize>,
    /// Per-step magnitude of the default cardinal behaviors.
    pub step_magnitude: f64,
    pub eval_rollouts: usize,
    pub eval_steps: usize,
    /// Steps between evaluations of the actor once random actions stop; the
    /// best evaluated actor is kept. 0 keeps the final actor.
    pub checkpoint_every: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            steps: 400_000,
            random_action_steps: 100_000,
            update_after: 1000,
            update_every: 50,
            max_episode_len: 1000,
            replay_capacity: 1_000_000,
            batch_size: 100,
            policy_delay: 2,
            gamma: 0.99,
            polyak: 0.995,
            policy_lr: 1e-3,
            q_lr: 1e-3,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            action_noise: 0.1,
            hidden_sizes: vec![256, 256],
            step_magnitude: 0.15,
            eval_rollouts: 10,
            eval_steps: 200,
            checkpoint_every: 0,
        }
    }
}

impl BehaviorConfig {
    pub fn desk() -> Self {
        BehaviorConfig {
            steps: 40_000,
            random_action_steps: 10_000,
            max_episode_len: 100,
            hidden_sizes: vec![64, 64],
            checkpoint_every: 2000,
            ..Default::default()
        }
    }
}

/// A sampled mini-batch in matrix form. `states` and `next_states` hold
/// proprioceptive inputs only.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
}

impl Batch {
    fn from_transitions(ts: &[&Transition], proprio: &[usize]) -> Self {
        let n = ts.len();
        let ds = proprio.len();
        let da = ts[0].action.len();
        let mut states = Array2::zeros((n, ds));
        let mut next_states = Array2::zeros((n, ds));
        let mut actions = Array2::zeros((n, da));
        let mut rewards = Array1::zeros(n);
        for (i, t) in ts.iter().enumerate() {
            for (k, &j) in proprio.iter().enumerate() {
                states[[i, k]] = t.obs[j];
                next_states[[i, k]] = t.next_obs[j];
            }
            for (k, &a) in t.action.iter().enumerate() {
                actions[[i, k]] = a;
            }
            rewards[i] = t.reward;
        }
        Batch {
            states,
            actions,
            rewards,
            next_states,
        }
    }
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("same row count")
}

/// Twin critics, a delayed deterministic actor, and Polyak-averaged targets.
#[derive(Debug, Clone)]
pub struct Td3 {
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub actor_target: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    actor_opt: Optimizer,
    critic1_opt: Optimizer,
    critic2_opt: Optimizer,
    updates: usize,
    cfg: BehaviorConfig,
}

impl Td3 {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        cfg: &BehaviorConfig,
        rng: &mut R,
    ) -> Result<Self, BehaviorError> {
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden_sizes);
        actor_sizes.push(action_dim);
        let mut critic_sizes = vec![state_dim + action_dim];
        critic_sizes.extend(&cfg.hidden_sizes);
        critic_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, Activation::Relu, Activation::Tanh, rng)?;
        let critic1 = Mlp::new(&critic_sizes, Activation::Relu, Activation::Identity, rng)?;
        let critic2 = Mlp::new(&critic_sizes, Activation::Relu, Activation::Identity, rng)?;
        Ok(Td3 {
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            actor_opt: Optimizer::adam(cfg.policy_lr),
            critic1_opt: Optimizer::adam(cfg.q_lr),
            critic2_opt: Optimizer::adam(cfg.q_lr),
            updates: 0,
            cfg: cfg.clone(),
        })
    }

    /// Smoothed target actions `clip(π'(s') + clip(ε, −c, c), −1, 1)` for a
    /// given noise matrix `ε`.
    pub fn target_actions(&self, next_states: &Array2<f64>, noise: &Array2<f64>) -> Result<Array2<f64>, BehaviorError> {
        let mut a = self.actor_target.forward_batch(next_states.view())?;
        let c = self.cfg.target_noise_clip;
        a.zip_mut_with(noise, |a, &e| *a = (*a + e.clamp(-c, c)).clamp(-1.0, 1.0));
        Ok(a)
    }

    /// Bellman targets `r + γ·min(Q1'(s', ã), Q2'(s', ã))`. Episodes only end
    /// on time limits, so there is no terminal mask.
    pub fn critic_targets(&self, batch: &Batch, noise: &Array2<f64>) -> Result<Array1<f64>, BehaviorError> {
        let a2 = self.target_actions(&batch.next_states, noise)?;
        let x = concat_cols(&batch.next_states, &a2);
        let q1 = self.critic1_target.forward_batch(x.view())?;
        let q2 = self.critic2_target.forward_batch(x.view())?;
        let gamma = self.cfg.gamma;
        Ok(Array1::from_shape_fn(batch.rewards.len(), |i| {
            batch.rewards[i] + gamma * q1[[i, 0]].min(q2[[i, 0]])
        }))
    }

    /// One gradient step on both critics, plus (every `policy_delay` calls)
    /// one actor step and a target refresh. Returns the summed critic loss.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64, BehaviorError> {
        let n = batch.rewards.len();
        let normal = Normal::new(0.0, self.cfg.target_noise).expect("finite std");
        let noise = Array2::from_shape_simple_fn(batch.actions.raw_dim(), || normal.sample(rng));
        let y = self.critic_targets(batch, &noise)?;
        let x = concat_cols(&batch.states, &batch.actions);

        let mut loss = 0.0;
        for (critic, opt) in [
            (&mut self.critic1, &mut self.critic1_opt),
            (&mut self.critic2, &mut self.critic2_opt),
        ] {
            let tape = critic.forward_cached(x.view())?;
            let q = tape.output();
            let mut upstream = Array2::zeros((n, 1));
            for i in 0..n {
                let e = q[[i, 0]] - y[i];
                loss += e * e / n as f64;
                upstream[[i, 0]] = 2.0 * e / n as f64;
            }
            let (grads, _) = critic.backward(&tape, upstream.view())?;
            opt.apply(critic, &grads)?;
        }
        if !loss.is_finite() {
            return Err(BehaviorError::Nn(NnError::NonFinite("critic loss")));
        }

        self.updates += 1;
        if self.updates % self.cfg.policy_delay == 0 {
            let actor_tape = self.actor.forward_cached(batch.states.view())?;
            let xa = concat_cols(&batch.states, actor_tape.output());
            let critic_tape = self.critic1.forward_cached(xa.view())?;
            // maximize Q1(s, π(s)) ⇔ minimize −mean Q1
            let upstream = Array2::from_elem((n, 1), -1.0 / n as f64);
            let (_, dq_dx) = self.critic1.backward(&critic_tape, upstream.view())?;
            let ds = batch.states.ncols();
            let dq_da = dq_dx.slice(s![.., ds..]).to_owned();
            let (actor_grads, _) = self.actor.backward(&actor_tape, dq_da.view())?;
            self.actor_opt.apply(&mut self.actor, &actor_grads)?;

            let rho = self.cfg.polyak;
            polyak_update(&mut self.actor_target, &self.actor, rho)?;
            polyak_update(&mut self.critic1_target, &self.critic1, rho)?;
            polyak_update(&mut self.critic2_target, &self.critic2, rho)?;
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-step displacement of the interest dimensions over all rollouts.
    pub mean_step: Vec<f64>,
    pub cosine: f64,
    pub rollouts: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub behavior: Behavior,
    pub replay: ReplayBuffer,
    pub eval: EvalReport,
    pub final_critic_loss: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Runs the behavior from `rollouts` random poses for `steps` steps each and
/// averages the per-step displacement of the interest dimensions.
pub fn evaluate_behavior<E: Environment>(
    env: &mut E,
    behavior: &Behavior,
    rollouts: usize,
    steps: usize,
    rng: &mut dyn RngCore,
) -> Result<EvalReport, BehaviorError> {
    let part = env.partition().clone();
    let dim = part.interest_idx().len();
    let mut total = vec![0.0; dim];
    for _ in 0..rollouts {
        env.reset_random(rng);
        let start = part.interest(&env.observe());
        for _ in 0..steps {
            let a = behavior.act(&part.proprio(&env.observe()))?;
            env.step(&a)?;
        }
        let end = part.interest(&env.observe());
        for k in 0..dim {
            total[k] += (end[k] - start[k]) / (steps * rollouts) as f64;
        }
    }
    Ok(EvalReport {
        cosine: cosine(&total, &behavior.spec.v),
        mean_step: total,
        rollouts,
    })
}

/// Executes a fixed behavior (no exploration noise) and records what it did,
/// in the same format training produces. Used to give scripted behaviors
/// dynamics data.
pub fn collect_rollouts<E: Environment>(
    env: &mut E,
    behavior: &Behavior,
    steps: usize,
    episode_len: usize,
    rng: &mut dyn RngCore,
) -> Result<ReplayBuffer, BehaviorError> {
    let part = env.partition().clone();
    let mut buf = ReplayBuffer::new(steps.max(1));
    let mut episode = 0;
    let mut ep_step = 0;
    env.reset_random(rng);
    for _ in 0..steps {
        let obs = env.observe();
        let action = behavior.act(&part.proprio(&obs))?;
        env.step(&action)?;
        let next_obs = env.observe();
        let reward = behavior_reward(&part.interest(&obs), &part.interest(&next_obs), &behavior.spec.v)?;
        buf.push(Transition {
            obs,
            action,
            reward,
            next_obs,
            episode,
            step_index: ep_step,
        });
        ep_step += 1;
        if ep_step == episode_len {
            env.reset_random(rng);
            episode += 1;
            ep_step = 0;
        }
    }
    Ok(buf)
}

/// Per-step training reward of an evaluated mean step; higher is better.
fn eval_score(e: &EvalReport, v: &[f64]) -> f64 {
    -e.mean_step.iter().zip(v).map(|(m, v)| (m - v).abs()).sum::<f64>()
}

/// Trains one behavior toward `spec.v`. Returns the policy together with the
/// full replay history, from which dynamics data is later drawn.
pub fn train_behavior<E: Environment + Clone>(
    env: &mut E,
    spec: &BehaviorSpec,
    cfg: &BehaviorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, BehaviorError> {
    let part = env.partition().clone();
    if spec.v.len() != part.interest_idx().len() {
        return Err(BehaviorError::Dimension {
            expected: part.interest_idx().len(),
            got: spec.v.len(),
        });
    }
    let ds = part.proprio_idx().len();
    let da = env.action_dim();
    let mut agent = Td3::new(ds, da, cfg, rng)?;
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let noise = Normal::new(0.0, cfg.action_noise).expect("finite std");

    let mut episode = 0;
    let mut ep_step = 0;
    let mut last_loss = f64::NAN;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
    let mut best: Option<(f64, Mlp)> = None;
    env.reset_random(rng);
    for t in 0..cfg.steps {
        let obs = env.observe();
        let action: Vec<f64> = if t < cfg.random_action_steps {
            (0..da).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            agent
                .actor
                .forward(&part.proprio(&obs))?
                .into_iter()
                .map(|a| (a + noise.sample(rng)).clamp(-1.0, 1.0))
                .collect()
        };
        env.step(&action)?;
        let next_obs = env.observe();
        let reward = behavior_reward(&part.interest(&obs), &part.interest(&next_obs), &spec.v)?;
        replay.push(Transition {
            obs,
            action,
            reward,
            next_obs,
            episode,
            step_index: ep_step,
        });
        ep_step += 1;
        if ep_step == cfg.max_episode_len {
            env.reset_random(rng);
            episode += 1;
            ep_step = 0;
        }

        if t + 1 >= cfg.update_after && (t + 1) % cfg.update_every == 0 {
            for _ in 0..cfg.update_every {
                let sample = replay.sample(cfg.batch_size, rng);
                let batch = Batch::from_transitions(&sample, part.proprio_idx());
                last_loss = agent
                    .update(&batch, rng)
                    .map_err(|_| BehaviorError::NonFiniteLoss { step: t })?;
            }
        }

        let policy_steps = (t + 1).saturating_sub(cfg.random_action_steps);
        if cfg.checkpoint_every > 0 && policy_steps > 0 && policy_steps % cfg.checkpoint_every == 0 && t + 1 < cfg.steps {
            let candidate = Behavior {
                spec: spec.clone(),
                policy: Policy::Learned { net: agent.actor.clone() },
            };
            let e = evaluate_behavior(&mut env.clone(), &candidate, cfg.eval_rollouts, cfg.eval_steps, &mut eval_rng)?;
            let score = eval_score(&e, &spec.v);
            log::debug!("behavior {} at step {}: cosine {:.3}, score {:.4}", spec.id, t + 1, e.cosine, score);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, agent.actor.clone()));
            }
        }
    }

    let mut behavior = Behavior {
        spec: spec.clone(),
        policy: Policy::Learned { net: agent.actor },
    };
    if let Some((score, saved)) = best {
        let e = evaluate_behavior(&mut env.clone(), &behavior, cfg.eval_rollouts, cfg.eval_steps, &mut eval_rng)?;
        if eval_score(&e, &spec.v) < score {
            // the replay history no longer reflects the kept policy
            behavior.policy = Policy::Learned { net: saved };
            replay = collect_rollouts(env, &behavior, cfg.steps, cfg.max_episode_len, rng)?;
        }
    }
    let eval = evaluate_behavior(env, &behavior, cfg.eval_rollouts, cfg.eval_steps, rng)?;
    Ok(TrainOutcome {
        behavior,
        replay,
        eval,
        final_critic_loss: last_loss,
    })
}

/// Independent RNG stream for behavior `id` under a run seed.
pub fn behavior_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id as u64 + 1)
}

/// The mid-level's discrete action set, plus the data each behavior left
/// behind for dynamics fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorLibrary {
    pub behaviors: Vec<Behavior>,
    /// Per-behavior rollout data, in library order (may be empty).
    pub replay: Vec<ReplayBuffer>,
}

impl BehaviorLibrary {
    pub fn len(&self) -> usize {
        self.behaviors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behaviors.is_empty()
    }
}

/// Trains one behavior per spec, each with its own environment (from
/// `make_env`) and RNG stream. Runs in parallel; the result does not depend
/// on completion order.
pub fn build_library<E, F>(
    make_env: F,
    specs: &[BehaviorSpec],
    cfg: &BehaviorConfig,
    seed: u64,
    tail_fraction: f64,
) -> Result<(BehaviorLibrary, Vec<EvalReport>), BehaviorError>
where
    E: Environment + Clone,
    F: Fn() -> E + Sync,
{
    validate_specs(specs)?;
    let outcomes: Vec<TrainOutcome> = specs
        .par_iter()
        .map(|spec| {
            let mut env = make_env();
            let mut rng = ChaCha8Rng::seed_from_u64(behavior_seed(seed, spec.id));
            train_behavior(&mut env, spec, cfg, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let evals = outcomes.iter().map(|o| o.eval.clone()).collect();
    let library = BehaviorLibrary {
        behaviors: outcomes.iter().map(|o| o.behavior.clone()).collect(),
        replay: outcomes.iter().map(|o| o.replay.tail(tail_fraction)).collect(),
    };
    Ok((library, evals))
}

pub const LIBRARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryIndex {
    version: u32,
    behaviors: Vec<LibraryEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryEntry {
    id: usize,
    v: Vec<f64>,
    file: String,
    replay: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BehaviorError> {
    let text = serde_json::to_string(value).map_err(|e| BehaviorError::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, BehaviorError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| BehaviorError::Format(format!("{}: {e}", path.display())))
}

impl BehaviorLibrary {
    /// Writes `library.json`, one `behavior_<id>.json` per behavior and, when
    /// present, `replay_<id>.json` with the retained rollout data.
    pub fn save(&self, dir: &Path) -> Result<(), BehaviorError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (k, b) in self.behaviors.iter().enumerate() {
            let file = format!("behavior_{}.json", b.spec.id);
            write_json(&dir.join(&file), b)?;
            let replay = match self.replay.get(k) {
                Some(buf) => {
                    let name = format!("replay_{}.json", b.spec.id);
                    write_json(&dir.join(&name), buf)?;
                    Some(name)
                }
                None => None,
            };
            entries.push(LibraryEntry {
                id: b.spec.id,
                v: b.spec.v.clone(),
                file,
                replay,
            });
        }
        write_json(
            &dir.join("library.json"),
            &LibraryIndex {
                version: LIBRARY_FORMAT_VERSION,
                behaviors: entries,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self, BehaviorError> {
        let index: LibraryIndex = read_json(&dir.join("library.json"))?;
        if index.version != LIBRARY_FORMAT_VERSION {
            return Err(BehaviorError::Format(format!("unsupported library version {}", index.version)));
        }
        let mut behaviors = Vec::new();
        let mut replay = Vec::new();
        for entry in &index.behaviors {
            let b: Behavior = read_json(&dir.join(&entry.file))?;
            if b.spec.id != entry.id || b.spec.v != entry.v {
                return Err(BehaviorError::Format(format!("{} disagrees with library.json", entry.file)));
            }
            behaviors.push(b);
            if let Some(name) = &entry.replay {
                replay.push(read_json(&dir.join(name))?);
            }
        }
        if !replay.is_empty() && replay.len() != behaviors.len() {
            return Err(BehaviorError::Format("replay data present for only some behaviors".into()));
        }
        let specs: Vec<_> = behaviors.iter().map(|b| b.spec.clone()).collect();
        validate_specs(&specs)?;
        Ok(BehaviorLibrary { behaviors, replay })
    }
}
