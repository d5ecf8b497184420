//! Small dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! Everything the behavior learner and the dynamics learner need lives here:
//! batched forward passes, a cached forward pass ("tape") that backward
//! consumes, first-order optimizers, and Polyak averaging for target networks.
//!
//! Weight matrices are stored `fan_in × fan_out`, so a batch `X` of row
//! vectors maps to `X·W + b`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Serialization format version written into every network document.
pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input shape mismatch: expected {expected} columns, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("upstream gradient shape mismatch: expected {expected:?}, got {got:?}")]
    UpstreamShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("network architectures differ: {0}")]
    Architecture(String),
    #[error("layer sizes must contain at least two entries and no zero output width")]
    LayerSizes,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid network document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `delta` in place by the activation derivative, given the
    /// pre-activation `z` and post-activation `a` of the same layer.
    /// The ReLU subgradient at exactly zero is taken as 0.
    fn backprop(self, delta: &mut Array2<f64>, z: &Array2<f64>, a: &Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => Zip::from(delta).and(z).for_each(|d, &zv| {
                if zv <= 0.0 {
                    *d = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(delta).and(a).for_each(|d, &av| *d *= 1.0 - av * av),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    hidden: Activation,
    output: Activation,
}

/// Intermediate values of a batched forward pass, kept for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// `activations[0]` is the input batch; `activations[l]` is the output of layer `l`.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }
}

/// Parameter gradients with the same shapes as the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.biases.iter_mut().for_each(|b| *b *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Flattened view in parameter order (layer by layer, weights then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

impl Mlp {
    /// Randomly initialized network. Every parameter of a layer with fan-in
    /// `n` is drawn uniformly from `[-1/sqrt(n), 1/sqrt(n)]` (bound 1 when the
    /// layer has no inputs).
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Self::check_sizes(layer_sizes)?;
        let mut weights = Vec::with_capacity(layer_sizes.len() - 1);
        let mut biases = Vec::with_capacity(layer_sizes.len() - 1);
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = if fan_in == 0 { 1.0 } else { 1.0 / (fan_in as f64).sqrt() };
            weights.push(uniform_matrix(fan_in, fan_out, bound, rng));
            biases.push(Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound)));
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden,
            output,
        })
    }

    /// Network with every weight and bias set to zero.
    pub fn zeros(layer_sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self, NnError> {
        Self::check_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect();
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden,
            output,
        })
    }

    /// Builds a network from explicit parameters (`weights[l]` is `fan_in × fan_out`).
    pub fn from_parts(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        hidden: Activation,
        output: Activation,
    ) -> Result<Self, NnError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NnError::LayerSizes);
        }
        let mut layer_sizes = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != layer_sizes[l] || b.len() != w.ncols() {
                return Err(NnError::Architecture(format!("layer {l} has inconsistent shapes")));
            }
            layer_sizes.push(w.ncols());
        }
        Self::check_sizes(&layer_sizes)?;
        Ok(Mlp {
            layer_sizes,
            weights,
            biases,
            hidden,
            output,
        })
    }

    fn check_sizes(layer_sizes: &[usize]) -> Result<(), NnError> {
        if layer_sizes.len() < 2 || layer_sizes[1..].contains(&0) {
            return Err(NnError::LayerSizes);
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters flattened in the same order as [`Gradients::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    /// Overwrites parameters from a flat vector laid out like [`Mlp::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.num_parameters() {
            return Err(NnError::Architecture(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|v| *v = it.next().unwrap());
            b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 1 == self.weights.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn same_architecture(&self, other: &Mlp) -> Result<(), NnError> {
        if self.layer_sizes != other.layer_sizes || self.hidden != other.hidden || self.output != other.output {
            return Err(NnError::Architecture(format!(
                "{:?} vs {:?}",
                self.layer_sizes, other.layer_sizes
            )));
        }
        Ok(())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass over a batch of row vectors.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::InputShape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(w);
            z += b;
            self.activation_for(l).apply(&mut z);
            a = z;
        }
        Ok(a)
    }

    /// Forward pass that records everything [`Mlp::backward`] needs.
    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<Tape, NnError> {
        if x.ncols() != self.input_dim() {
            return Err(NnError::InputShape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let mut activations = vec![x.to_owned()];
        let mut pre_activations = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = activations[l].dot(w);
            z += b;
            let mut a = z.clone();
            self.activation_for(l).apply(&mut a);
            pre_activations.push(z);
            activations.push(a);
        }
        Ok(Tape {
            activations,
            pre_activations,
        })
    }

    /// Reverse pass. `upstream` is dLoss/dOutput for every row of the batch.
    /// Returns parameter gradients summed over the batch, and dLoss/dInput per row.
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>), NnError> {
        let out = tape.output();
        if upstream.dim() != out.dim() {
            return Err(NnError::UpstreamShape {
                expected: out.dim(),
                got: upstream.dim(),
            });
        }
        let n_layers = self.weights.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = upstream.to_owned();
        for l in (0..n_layers).rev() {
            self.activation_for(l)
                .backprop(&mut delta, &tape.pre_activations[l], &tape.activations[l + 1]);
            grads.weights[l] = tape.activations[l].t().dot(&delta);
            grads.biases[l] = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.weights[l].t());
        }
        Ok((grads, delta))
    }

    /// Single-sample convenience wrapper around [`Mlp::forward_cached`] and [`Mlp::backward`].
    pub fn backward_single(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients, NnError> {
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let tape = self.forward_cached(batch)?;
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row view");
        Ok(self.backward(&tape, up)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct AdamState {
    step: i32,
    m: Gradients,
    v: Gradients,
}

/// First-order optimizer. Adam keeps per-parameter moments, so one optimizer
/// instance belongs to one network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    learning_rate: f64,
    kind: OptimizerKind,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(learning_rate: f64, kind: OptimizerKind) -> Self {
        Optimizer {
            learning_rate,
            kind,
            adam: None,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(learning_rate, OptimizerKind::Sgd)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(learning_rate, OptimizerKind::adam_default())
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
    }

    /// Applies one descent step (gradients point uphill; parameters move against them).
    pub fn apply(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<(), NnError> {
        if grads.weights.len() != net.weights.len()
            || grads
                .weights
                .iter()
                .zip(&net.weights)
                .any(|(g, w)| g.dim() != w.dim())
            || grads.biases.iter().zip(&net.biases).any(|(g, b)| g.dim() != b.dim())
        {
            return Err(NnError::Architecture("gradient shapes do not match network".into()));
        }
        if !grads.is_finite() {
            return Err(NnError::NonFinite("gradients"));
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in net.weights.iter_mut().zip(&grads.weights) {
                    w.scaled_add(-lr, g);
                }
                for (b, g) in net.biases.iter_mut().zip(&grads.biases) {
                    b.scaled_add(-lr, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    step: 0,
                    m: Gradients::zeros_like(net),
                    v: Gradients::zeros_like(net),
                });
                if state.m.weights.iter().zip(&net.weights).any(|(m, w)| m.dim() != w.dim()) {
                    return Err(NnError::Architecture("optimizer state belongs to another network".into()));
                }
                state.step += 1;
                let c1 = 1.0 - beta1.powi(state.step);
                let c2 = 1.0 - beta2.powi(state.step);
                let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                };
                for l in 0..net.weights.len() {
                    Zip::from(&mut net.weights[l])
                        .and(&grads.weights[l])
                        .and(&mut state.m.weights[l])
                        .and(&mut state.v.weights[l])
                        .for_each(update);
                    Zip::from(&mut net.biases[l])
                        .and(&grads.biases[l])
                        .and(&mut state.m.biases[l])
                        .and(&mut state.v.biases[l])
                        .for_each(update);
                }
            }
        }
        Ok(())
    }
}

/// `target ← rho·target + (1 − rho)·source`, parameter by parameter.
pub fn polyak_update(target: &mut Mlp, source: &Mlp, rho: f64) -> Result<(), NnError> {
    target.same_architecture(source)?;
    for (t, s) in target.weights.iter_mut().zip(&source.weights) {
        Zip::from(t).and(s).for_each(|t, &s| *t = rho * *t + (1.0 - rho) * s);
    }
    for (t, s) in target.biases.iter_mut().zip(&source.biases) {
        Zip::from(t).and(s).for_each(|t, &s| *t = rho * *t + (1.0 - rho) * s);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationDoc {
    pub hidden: Activation,
    pub output: Activation,
}

/// On-disk JSON layout of a network. Each entry of `weights` is one layer's
/// `fan_in × fan_out` matrix flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDocument {
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activations: ActivationDoc,
}

impl From<&Mlp> for MlpDocument {
    fn from(net: &Mlp) -> Self {
        MlpDocument {
            version: MLP_FORMAT_VERSION,
            layer_sizes: net.layer_sizes.clone(),
            weights: net.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: net.biases.iter().map(|b| b.to_vec()).collect(),
            activations: ActivationDoc {
                hidden: net.hidden,
                output: net.output,
            },
        }
    }
}

impl TryFrom<MlpDocument> for Mlp {
    type Error = NnError;

    fn try_from(doc: MlpDocument) -> Result<Self, NnError> {
        if doc.version != MLP_FORMAT_VERSION {
            return Err(NnError::Document(format!("unsupported version {}", doc.version)));
        }
        Mlp::check_sizes(&doc.layer_sizes)?;
        let n = doc.layer_sizes.len() - 1;
        if doc.weights.len() != n || doc.biases.len() != n {
            return Err(NnError::Document("layer count does not match layer_sizes".into()));
        }
        let mut weights = Vec::with_capacity(n);
        for (l, flat) in doc.weights.into_iter().enumerate() {
            let shape = (doc.layer_sizes[l], doc.layer_sizes[l + 1]);
            weights.push(
                Array2::from_shape_vec(shape, flat)
                    .map_err(|e| NnError::Document(format!("layer {l} weights: {e}")))?,
            );
        }
        let biases: Vec<Array1<f64>> = doc.biases.into_iter().map(Array1::from_vec).collect();
        let net = Mlp::from_parts(weights, biases, doc.activations.hidden, doc.activations.output)?;
        if net.layer_sizes != doc.layer_sizes {
            return Err(NnError::Document("bias lengths do not match layer_sizes".into()));
        }
        Ok(net)
    }
}

impl Serialize for Mlp {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        MlpDocument::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Mlp {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = MlpDocument::deserialize(deserializer)?;
        Mlp::try_from(doc).map_err(serde::de::Error::custom)
    }
}
