//! Multi-step behavior dynamics.
//!
//! For each behavior a model predicts where the external state will be after
//! `L` consecutive steps of that behavior. The model always predicts a change
//! that is added to its input: `predict(s) = s + f(s)`. It is fitted by
//! minimizing `‖s_{t+L} − (s_t + f(s_t))‖²` over pairs drawn from the
//! behavior's own late training data.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::ReplayBuffer;
use crate::env::ObservationPartition;
use crate::nn::{Activation, Mlp, NnError, Optimizer};

#[derive(Debug, Error)]
pub enum DynError {
    #[error("no episode in the data is long enough for {horizon}-step pairs")]
    EmptyDataset { horizon: usize },
    #[error("tail fraction must lie in (0, 1], got {0}")]
    TailFraction(f64),
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite training loss at gradient step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("model I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("model format: {0}")]
    Format(String),
}

/// How a model turns its state into network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureMap {
    /// The state as is.
    Identity,
    /// Drops the two `position` components and replaces the angle at `angle`
    /// by `(cos θ, sin θ)`; other components pass through in order. In open
    /// space the displacement of a body does not depend on where it stands.
    Planar { position: [usize; 2], angle: usize },
}

impl FeatureMap {
    pub fn input_dim(&self, state_dim: usize) -> usize {
        match self {
            FeatureMap::Identity => state_dim,
            FeatureMap::Planar { .. } => state_dim - 1,
        }
    }

    pub fn apply(&self, s_m: &[f64]) -> Vec<f64> {
        match *self {
            FeatureMap::Identity => s_m.to_vec(),
            FeatureMap::Planar { position, angle } => {
                let mut out = Vec::with_capacity(s_m.len() - 1);
                for (k, &v) in s_m.iter().enumerate() {
                    if k == angle {
                        out.push(v.cos());
                        out.push(v.sin());
                    } else if !position.contains(&k) {
                        out.push(v);
                    }
                }
                out
            }
        }
    }
}

/// Anything that maps an external state to a predicted external state `L`
/// steps later.
pub trait DeltaPredictor {
    fn predict(&self, s_m: &[f64]) -> Vec<f64>;
}

/// Fixed displacement regardless of state; the exact model of a constant-velocity body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantDelta(pub Vec<f64>);

impl DeltaPredictor for ConstantDelta {
    fn predict(&self, s_m: &[f64]) -> Vec<f64> {
        s_m.iter().zip(&self.0).map(|(s, d)| s + d).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorDynamicsModel {
    pub behavior_id: usize,
    /// Prediction time scale `L`, in environment steps.
    pub horizon: usize,
    pub state_dim: usize,
    pub features: FeatureMap,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub net: Mlp,
}

impl BehaviorDynamicsModel {
    fn inputs(&self, s_m: &[f64]) -> Vec<f64> {
        self.features
            .apply(s_m)
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Predicted change `f(s)`.
    pub fn delta(&self, s_m: &[f64]) -> Result<Vec<f64>, DynError> {
        if s_m.len() != self.state_dim {
            return Err(DynError::Dimension {
                expected: self.state_dim,
                got: s_m.len(),
            });
        }
        Ok(self.net.forward(&self.inputs(s_m))?)
    }

    /// `s + f(s)`.
    pub fn try_predict(&self, s_m: &[f64]) -> Result<Vec<f64>, DynError> {
        let d = self.delta(s_m)?;
        Ok(s_m.iter().zip(d).map(|(s, d)| s + d).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), DynError> {
        let text = serde_json::to_string(self).map_err(|e| DynError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DynError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DynError::Format(format!("{}: {e}", path.display())))
    }

    pub fn file_name(behavior_id: usize) -> String {
        format!("dynamics_{behavior_id}.json")
    }
}

impl DeltaPredictor for BehaviorDynamicsModel {
    /// Panics on a dimension mismatch; use [`BehaviorDynamicsModel::try_predict`] to handle it.
    fn predict(&self, s_m: &[f64]) -> Vec<f64> {
        self.try_predict(s_m).expect("state dimension matches the model")
    }
}

/// `(s_t, s_{t+L})` pairs over external states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DynamicsDataset {
    pub horizon: usize,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl DynamicsDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Shuffles and splits off the last `holdout` fraction. With fewer than
    /// two pairs both halves are the full set.
    pub fn split<R: Rng + ?Sized>(&self, holdout: f64, rng: &mut R) -> (DynamicsDataset, DynamicsDataset) {
        if self.pairs.len() < 2 {
            return (self.clone(), self.clone());
        }
        let mut pairs = self.pairs.clone();
        pairs.shuffle(rng);
        let n_hold = ((pairs.len() as f64 * holdout).round() as usize).clamp(1, pairs.len() - 1);
        let hold = pairs.split_off(pairs.len() - n_hold);
        (
            DynamicsDataset {
                horizon: self.horizon,
                pairs,
            },
            DynamicsDataset {
                horizon: self.horizon,
                pairs: hold,
            },
        )
    }
}

/// Cuts the last `tail_fraction` of the buffer into uninterrupted runs (same
/// episode, consecutive step indices) and emits every `L`-step pair inside a
/// run. Pairs never span an episode reset.
pub fn extract_pairs(
    buffer: &ReplayBuffer,
    partition: &ObservationPartition,
    horizon: usize,
    tail_fraction: f64,
) -> Result<DynamicsDataset, DynError> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(DynError::TailFraction(tail_fraction));
    }
    let take = ((buffer.len() as f64) * tail_fraction).ceil() as usize;
    let skip = buffer.len() - take.min(buffer.len());

    let mut pairs = Vec::new();
    let mut run: Vec<Vec<f64>> = Vec::new();
    let mut last: Option<(u64, usize)> = None;
    let flush = |run: &mut Vec<Vec<f64>>, pairs: &mut Vec<(Vec<f64>, Vec<f64>)>| {
        for t in 0..run.len().saturating_sub(horizon) {
            pairs.push((run[t].clone(), run[t + horizon].clone()));
        }
        run.clear();
    };
    for tr in buffer.iter().skip(skip) {
        let continues = matches!(last, Some((ep, idx)) if ep == tr.episode && idx + 1 == tr.step_index);
        if !continues {
            flush(&mut run, &mut pairs);
            run.push(partition.model_state(&tr.obs));
        }
        run.push(partition.model_state(&tr.next_obs));
        last = Some((tr.episode, tr.step_index));
    }
    flush(&mut run, &mut pairs);

    if pairs.is_empty() || horizon == 0 {
        return Err(DynError::EmptyDataset { horizon });
    }
    Ok(DynamicsDataset { horizon, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Prediction time scale `L`.
    pub horizon: usize,
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    /// When set, the step size follows a cosine schedule down to this value.
    pub final_learning_rate: Option<f64>,
    pub gradient_steps: usize,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    /// Share of each behavior's training history used for fitting.
    pub tail_fraction: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            horizon: 3,
            hidden_sizes: vec![256, 256],
            learning_rate: 1e-3,
            final_learning_rate: None,
            gradient_steps: 2000,
            batch_size: 100,
            holdout_fraction: 0.1,
            tail_fraction: 0.25,
        }
    }
}

impl DynamicsConfig {
    pub fn desk() -> Self {
        DynamicsConfig {
            horizon: 6,
            hidden_sizes: vec![64, 64],
            final_learning_rate: Some(1e-5),
            gradient_steps: 12_000,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub behavior_id: usize,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    /// Mean squared error over the last training mini-batch.
    pub final_train_mse: f64,
    /// Mean squared L2 error on the holdout split.
    pub holdout_mse: f64,
    /// Mean L2 error on the holdout split.
    pub holdout_error: f64,
}

fn mean_and_scale(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for k in 0..dim {
            mean[k] += r[k] / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for k in 0..dim {
            var[k] += (r[k] - mean[k]).powi(2) / n;
        }
    }
    let scale = var.iter().map(|v| if v.sqrt() > 1e-6 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Fits a model on the training split of `dataset` and scores it on the holdout split.
pub fn fit<R: Rng + ?Sized>(
    dataset: &DynamicsDataset,
    behavior_id: usize,
    features: FeatureMap,
    cfg: &DynamicsConfig,
    rng: &mut R,
) -> Result<(BehaviorDynamicsModel, FitReport), DynError> {
    if dataset.is_empty() {
        return Err(DynError::EmptyDataset {
            horizon: dataset.horizon,
        });
    }
    let state_dim = dataset.pairs[0].0.len();
    let (train, holdout) = dataset.split(cfg.holdout_fraction, rng);

    let inputs: Vec<Vec<f64>> = train.pairs.iter().map(|(s, _)| features.apply(s)).collect();
    let in_dim = features.input_dim(state_dim);
    let (input_mean, input_scale) = mean_and_scale(&inputs, in_dim);
    let mut sizes = vec![in_dim];
    sizes.extend(&cfg.hidden_sizes);
    sizes.push(state_dim);
    let net = Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)?;
    let mut model = BehaviorDynamicsModel {
        behavior_id,
        horizon: dataset.horizon,
        state_dim,
        features,
        input_mean,
        input_scale,
        net,
    };
    let n = train.len();
    let mut x_all = Array2::zeros((n, in_dim));
    let mut d_all = Array2::zeros((n, state_dim));
    for (k, (s, t)) in train.pairs.iter().enumerate() {
        x_all.row_mut(k).assign(&Array1::from(model.inputs(s)));
        for (d, (t, s)) in d_all.row_mut(k).iter_mut().zip(t.iter().zip(s)) {
            *d = t - s;
        }
    }

    let mut opt = Optimizer::adam(cfg.learning_rate);
    let b = cfg.batch_size.min(train.len()).max(1);
    let mut last_mse = f64::NAN;
    let mut idx = vec![0usize; b];
    for step in 0..cfg.gradient_steps {
        if let Some(lr_end) = cfg.final_learning_rate {
            let t = step as f64 / cfg.gradient_steps as f64;
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            opt.set_learning_rate(lr_end + (cfg.learning_rate - lr_end) * cos);
        }
        for j in idx.iter_mut() {
            *j = rng.random_range(0..n);
        }
        let x = x_all.select(Axis(0), &idx);
        let target = d_all.select(Axis(0), &idx);
        let tape = model.net.forward_cached(x.view())?;
        let err = tape.output() - &target;
        let mse = err.mapv(|e| e * e).sum() / b as f64;
        if !mse.is_finite() {
            return Err(DynError::NonFiniteLoss(step));
        }
        last_mse = mse;
        let upstream = err * (2.0 / b as f64);
        let (grads, _) = model.net.backward(&tape, upstream.view())?;
        opt.apply(&mut model.net, &grads)?;
    }

    let report = FitReport {
        behavior_id,
        train_pairs: train.len(),
        holdout_pairs: holdout.len(),
        final_train_mse: last_mse,
        holdout_mse: holdout_mse(&model, &holdout)?,
        holdout_error: holdout_error(&model, &holdout)?,
    };
    Ok((model, report))
}

fn holdout_distances<M: DeltaPredictor>(model: &M, data: &DynamicsDataset) -> Result<Vec<f64>, DynError> {
    if data.is_empty() {
        return Err(DynError::EmptyDataset { horizon: data.horizon });
    }
    Ok(data
        .pairs
        .iter()
        .map(|(s, t)| {
            let p = model.predict(s);
            p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .collect())
}

/// Mean L2 distance between predicted and actual `s_{t+L}`.
pub fn holdout_error<M: DeltaPredictor>(model: &M, data: &DynamicsDataset) -> Result<f64, DynError> {
    let d = holdout_distances(model, data)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean squared L2 distance between predicted and actual `s_{t+L}`.
pub fn holdout_mse<M: DeltaPredictor>(model: &M, data: &DynamicsDataset) -> Result<f64, DynError> {
    let d = holdout_distances(model, data)?;
    Ok(d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::Transition;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_partition() -> ObservationPartition {
        ObservationPartition::new(2, vec![], vec![0, 1], vec![0, 1]).unwrap()
    }

    /// Episode `ep` visiting positions (x0+k, 0) for k = 0..states.
    fn push_episode(buf: &mut ReplayBuffer, ep: u64, states: usize, x0: f64) {
        for k in 0..states.saturating_sub(1) {
            buf.push(Transition {
                obs: vec![x0 + k as f64, 0.0],
                action: vec![0.0, 0.0],
                reward: 0.0,
                next_obs: vec![x0 + k as f64 + 1.0, 0.0],
                episode: ep,
                step_index: k,
            });
        }
    }

    #[test]
    fn five_states_give_two_pairs() {
        let mut buf = ReplayBuffer::new(100);
        push_episode(&mut buf, 0, 5, 0.0);
        let d = extract_pairs(&buf, &point_partition(), 3, 1.0).unwrap();
        assert_eq!(
            d.pairs,
            vec![(vec![0.0, 0.0], vec![3.0, 0.0]), (vec![1.0, 0.0], vec![4.0, 0.0])]
        );
    }

    #[test]
    fn short_episodes_give_empty_dataset() {
        let mut buf = ReplayBuffer::new(100);
        push_episode(&mut buf, 0, 3, 0.0);
        push_episode(&mut buf, 1, 3, 10.0);
        assert!(matches!(
            extract_pairs(&buf, &point_partition(), 3, 1.0),
            Err(DynError::EmptyDataset { horizon: 3 })
        ));
    }

    #[test]
    fn tail_fraction_limits_source() {
        let mut buf = ReplayBuffer::new(100);
        push_episode(&mut buf, 0, 21, 0.0);
        let d = extract_pairs(&buf, &point_partition(), 3, 0.25).unwrap();
        // last 5 transitions cover states 15..=20
        assert_eq!(d.len(), 3);
        assert!(d.pairs.iter().all(|(s, _)| s[0] >= 15.0));
        assert!(extract_pairs(&buf, &point_partition(), 3, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn pairs_never_cross_episodes(lens in proptest::collection::vec(1usize..12, 1..8), horizon in 1usize..5) {
            let mut buf = ReplayBuffer::new(1000);
            for (ep, &n) in lens.iter().enumerate() {
                push_episode(&mut buf, ep as u64, n, 1000.0 * ep as f64);
            }
            let expected: usize = lens.iter().map(|&n| n.saturating_sub(horizon)).sum();
            match extract_pairs(&buf, &point_partition(), horizon, 1.0) {
                Ok(d) => {
                    prop_assert_eq!(d.len(), expected);
                    for (a, b) in &d.pairs {
                        prop_assert_eq!((a[0] / 1000.0).floor(), (b[0] / 1000.0).floor());
                        prop_assert_eq!(b[0] - a[0], horizon as f64);
                    }
                }
                Err(_) => prop_assert_eq!(expected, 0),
            }
        }

        #[test]
        fn predict_is_input_plus_delta(seed in 0u64..50, s in proptest::collection::vec(-5.0f64..5.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = BehaviorDynamicsModel {
                behavior_id: 0,
                horizon: 3,
                state_dim: 3,
                features: FeatureMap::Planar { position: [0, 1], angle: 2 },
                input_mean: vec![0.1, -0.2],
                input_scale: vec![1.0, 2.0],
                net: Mlp::new(&[2, 8, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap(),
            };
            let p = model.predict(&s);
            let d = model.delta(&s).unwrap();
            for k in 0..3 {
                prop_assert_eq!(p[k], s[k] + d[k]);
            }
        }
    }

    fn zero_model(dim: usize) -> BehaviorDynamicsModel {
        BehaviorDynamicsModel {
            behavior_id: 0,
            horizon: 3,
            state_dim: dim,
            features: FeatureMap::Identity,
            input_mean: vec![0.0; dim],
            input_scale: vec![1.0; dim],
            net: Mlp::zeros(&[dim, 4, dim], Activation::Relu, Activation::Identity).unwrap(),
        }
    }

    #[test]
    fn zero_net_predicts_identity() {
        assert_eq!(zero_model(3).predict(&[2.0, 2.0, 0.0]), vec![2.0, 2.0, 0.0]);
        assert!(zero_model(3).try_predict(&[1.0]).is_err());
    }

    #[test]
    fn constant_delta_chain() {
        let c = ConstantDelta(vec![1.0, 0.0, 0.0]);
        assert_eq!(c.predict(&[2.0, 2.0, 0.0]), vec![3.0, 2.0, 0.0]);
        assert_eq!(c.predict(&c.predict(&[0.0, 0.0, 0.0])), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn holdout_error_cases() {
        let data = DynamicsDataset {
            horizon: 3,
            pairs: vec![(vec![0.0, 0.0], vec![3.0, 4.0]), (vec![1.0, 1.0], vec![4.0, 5.0])],
        };
        assert_eq!(holdout_error(&ConstantDelta(vec![3.0, 4.0]), &data).unwrap(), 0.0);
        assert_eq!(holdout_error(&zero_model(2), &data).unwrap(), 5.0);
        assert!(holdout_error(&zero_model(2), &DynamicsDataset::default()).is_err());
    }

    #[test]
    fn fit_rejects_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            fit(&DynamicsDataset::default(), 0, FeatureMap::Identity, &DynamicsConfig::desk(), &mut rng),
            Err(DynError::EmptyDataset { .. })
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = zero_model(3);
        let path = dir.path().join(BehaviorDynamicsModel::file_name(0));
        m.save(&path).unwrap();
        assert_eq!(BehaviorDynamicsModel::load(&path).unwrap(), m);
    }
}
