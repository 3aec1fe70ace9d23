//! Feedforward classifiers with an attached softmax temperature.
//!
//! A [`Network`] is `F = σ_T ∘ G`: a stack of layers `G` producing logits,
//! followed by a temperature softmax. Backpropagation is exact and serves
//! two callers: training (parameter gradients) and attacks (input gradients
//! of an arbitrary [`LogitObjective`]).

mod layer;
mod persist;
mod train;

use rand::Rng;

pub use layer::{Layer, LayerSpec};
pub use persist::{NetworkDocument, FORMAT_TAG, FORMAT_VERSION};
pub use train::{mean_loss, train, TrainConfig};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;
use layer::Aux;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    temperature: f64,
    label_count: usize,
}

/// Raw parameters for one layer, as accepted by [`Network::from_parts`].
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn new(spec: LayerSpec, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        LayerParams {
            spec,
            weights,
            bias,
        }
    }

    /// A parameter-free layer (relu, flatten, pooling, dropout).
    pub fn bare(spec: LayerSpec) -> Self {
        LayerParams::new(spec, Vec::new(), Vec::new())
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(())
}

fn resolve_shapes(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Parameter(format!(
            "input shape must have positive dimensions, got {input_shape:?}"
        )));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for spec in specs {
        let next = spec.output_shape(shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}

impl Network {
    /// A freshly initialized network (Glorot-uniform weights, zero biases).
    /// The final layer's output length is the label count.
    pub fn new(
        input_shape: &[usize],
        specs: &[LayerSpec],
        temperature: f64,
        seed: u64,
    ) -> Result<Network> {
        check_temperature(temperature)?;
        let shapes = resolve_shapes(input_shape, specs)?;
        let label_count = Self::label_count_of(&shapes)?;
        let mut rng = rng::stream(seed, "net-init", 0);
        let layers = specs
            .iter()
            .zip(shapes.windows(2))
            .map(|(spec, io)| Layer::glorot(*spec, io[0].clone(), io[1].clone(), &mut rng))
            .collect();
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            temperature,
            label_count,
        })
    }

    /// Assemble a network from explicit parameters.
    pub fn from_parts(
        input_shape: &[usize],
        layers: Vec<LayerParams>,
        temperature: f64,
    ) -> Result<Network> {
        check_temperature(temperature)?;
        let specs: Vec<LayerSpec> = layers.iter().map(|l| l.spec).collect();
        let shapes = resolve_shapes(input_shape, &specs)?;
        let label_count = Self::label_count_of(&shapes)?;
        let layers = layers
            .into_iter()
            .zip(shapes.windows(2))
            .map(|(p, io)| {
                let (wlen, blen) = p.spec.param_lens();
                if p.weights.len() != wlen || p.bias.len() != blen {
                    return Err(Error::Parameter(format!(
                        "{} layer needs {wlen} weights and {blen} biases, got {} and {}",
                        p.spec.kind(),
                        p.weights.len(),
                        p.bias.len()
                    )));
                }
                if p.weights.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite network parameter".into()));
                }
                Ok(Layer {
                    spec: p.spec,
                    weights: p.weights,
                    bias: p.bias,
                    in_shape: io[0].clone(),
                    out_shape: io[1].clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            temperature,
            label_count,
        })
    }

    fn label_count_of(shapes: &[Vec<usize>]) -> Result<usize> {
        match shapes.last().map(Vec::as_slice) {
            Some(&[n]) if shapes.len() > 1 && n >= 1 => Ok(n),
            _ => Err(Error::Parameter(
                "the final layer must produce a flat logit vector".into(),
            )),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    /// A copy of this network with a different softmax temperature.
    /// Logits are unaffected.
    pub fn with_temperature(&self, temperature: f64) -> Result<Network> {
        check_temperature(temperature)?;
        Ok(Network {
            temperature,
            ..self.clone()
        })
    }

    /// Number of addressable stages: every layer plus the final softmax.
    pub fn stage_count(&self) -> usize {
        self.layers.len() + 1
    }

    /// Index of the stage whose output is the logit vector.
    pub fn logit_stage(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(&self.input_shape, x.shape()));
        }
        Ok(())
    }

    /// Logits `z = G(x)` for a flat input. Dropout is inactive.
    pub(crate) fn logits_raw(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.forward::<StreamRng>(&a, None).0;
        }
        a
    }

    pub(crate) fn predict_raw(&self, x: &[f64]) -> usize {
        crate::tensor::argmax(&self.logits_raw(x))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Tensor::vector(self.logits_raw(x.data()))
    }

    /// Class probabilities `σ_T(G(x))`.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        softmax_t(&self.logits(x)?, self.temperature)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        self.check_input(x)?;
        Ok(self.predict_raw(x.data()))
    }

    /// Output of stage `stage` (0-based; `stage_count() - 1` is the softmax).
    pub fn stage_output(&self, x: &Tensor, stage: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if stage >= self.stage_count() {
            return Err(Error::IndexOutOfRange {
                index: stage,
                len: self.stage_count(),
            });
        }
        let mut a = x.data().to_vec();
        let mut shape = self.input_shape.clone();
        for layer in self.layers.iter().take(stage + 1) {
            a = layer.forward::<StreamRng>(&a, None).0;
            shape = layer.out_shape.clone();
        }
        if stage == self.layers.len() {
            a = softmax_slice(&a, self.temperature);
        }
        Tensor::new(shape, a)
    }

    /// Forward pass recording everything backprop needs. Dropout is active
    /// only when `train_rng` is given.
    pub(crate) fn trace<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        mut train_rng: Option<&mut R>,
    ) -> (Vec<Vec<f64>>, Vec<Aux>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut auxes = Vec::with_capacity(self.layers.len());
        acts.push(x.to_vec());
        for layer in &self.layers {
            let (y, aux) = layer.forward(acts.last().unwrap(), train_rng.as_deref_mut());
            acts.push(y);
            auxes.push(aux);
        }
        (acts, auxes)
    }

    /// Backward pass from a logit gradient. Returns the input gradient and,
    /// when `param_grads` is given, accumulates per-layer `(weights, bias)`
    /// gradients into it.
    pub(crate) fn backprop(
        &self,
        acts: &[Vec<f64>],
        auxes: &[Aux],
        dlogits: Vec<f64>,
        mut param_grads: Option<&mut [(Vec<f64>, Vec<f64>)]>,
    ) -> Vec<f64> {
        let mut g = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let pg = param_grads
                .as_deref_mut()
                .map(|grads| {
                    let (w, b) = &mut grads[i];
                    (w.as_mut_slice(), b.as_mut_slice())
                })
                .filter(|(w, b)| !w.is_empty() || !b.is_empty());
            g = layer.backward(&acts[i], &auxes[i], &g, pg);
        }
        g
    }

    /// Logits, objective value and `∂objective/∂x` in one forward/backward pass.
    pub(crate) fn objective_and_gradient(
        &self,
        x: &[f64],
        objective: &dyn LogitObjective,
    ) -> (Vec<f64>, f64, Vec<f64>) {
        let (acts, auxes) = self.trace::<StreamRng>(x, None);
        let z = acts.last().unwrap().clone();
        let value = objective.value(&z);
        let dz = objective.gradient(&z);
        let gx = self.backprop(&acts, &auxes, dz, None);
        (z, value, gx)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// A differentiable scalar function of a logit vector.
pub trait LogitObjective: Sync {
    fn value(&self, logits: &[f64]) -> f64;
    fn gradient(&self, logits: &[f64]) -> Vec<f64>;
}

/// The `j`-th logit.
#[derive(Debug, Clone, Copy)]
pub struct LogitComponent(pub usize);

impl LogitObjective for LogitComponent {
    fn value(&self, z: &[f64]) -> f64 {
        z[self.0]
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; z.len()];
        g[self.0] = 1.0;
        g
    }
}

/// `σ_T(z)_class`.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxComponent {
    pub class: usize,
    pub temperature: f64,
}

impl LogitObjective for SoftmaxComponent {
    fn value(&self, z: &[f64]) -> f64 {
        softmax_slice(z, self.temperature)[self.class]
    }

    // ∂σ_j/∂z_i = σ_j (δ_ij − σ_i) / T
    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let s = softmax_slice(z, self.temperature);
        let sj = s[self.class];
        s.iter()
            .enumerate()
            .map(|(i, &si)| {
                let delta = if i == self.class { 1.0 } else { 0.0 };
                sj * (delta - si) / self.temperature
            })
            .collect()
    }
}

/// Cross-entropy of `σ_T(z)` against a label, via log-sum-exp on `z / T`.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy {
    pub label: usize,
    pub temperature: f64,
}

impl LogitObjective for CrossEntropy {
    fn value(&self, z: &[f64]) -> f64 {
        cross_entropy(z, self.label, self.temperature)
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = softmax_slice(z, self.temperature);
        g[self.label] -= 1.0;
        g.iter_mut().for_each(|v| *v /= self.temperature);
        g
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn cross_entropy(z: &[f64], label: usize, temperature: f64) -> f64 {
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    log_sum_exp(&scaled) - scaled[label]
}

pub(crate) fn softmax_slice(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Temperature softmax `σ_T(z)_j = exp(z_j/T) / Σ_i exp(z_i/T)`, computed
/// with max-subtraction so large logits cannot overflow.
pub fn softmax_t(z: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    Tensor::new(z.shape().to_vec(), softmax_slice(z.data(), temperature))
}

/// `∂objective/∂x` at `x`, by reverse-mode backpropagation.
pub fn input_gradient(net: &Network, x: &Tensor, objective: &dyn LogitObjective) -> Result<Tensor> {
    net.check_input(x)?;
    let (_, value, g) = net.objective_and_gradient(x.data(), objective);
    if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    Tensor::new(x.shape().to_vec(), g)
}
