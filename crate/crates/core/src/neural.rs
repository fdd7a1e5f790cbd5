//! Small fully-connected networks with hand-written backpropagation.
//!
//! The generator and the teacher discriminators are MLPs. A conditioning
//! label (one-hot, possibly empty) is concatenated to the input of every
//! layer. Discriminators end in a sigmoid; probabilities are clamped to
//! `[1e-7, 1 - 1e-7]` before any logarithm, and the clamp has zero slope
//! outside that range.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const PROB_MIN: f64 = 1e-7;
pub const PROB_MAX: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x` with output `y = apply(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer. `weights` is `outputs × inputs`, row-major, where
/// `inputs` includes the label width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// `[input, hidden…, output]`, excluding the label width.
    sizes: Vec<usize>,
    label_dim: usize,
    layers: Vec<Layer>,
}

/// Flat parameter gradient in the canonical order: for each layer, weights
/// then biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads(pub Vec<f64>);

struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    outs: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Random fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`, zero
    /// biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        label_dim: usize,
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return param("an MLP needs at least input and output sizes");
        }
        if sizes.contains(&0) {
            return param("layer sizes must be positive");
        }
        if activations.len() != sizes.len() - 1 {
            return param(format!(
                "{} layers need {} activations, got {}",
                sizes.len() - 1,
                sizes.len() - 1,
                activations.len()
            ));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let inputs = w[0] + label_dim;
                let bound = 1.0 / (inputs as f64).sqrt();
                Layer {
                    inputs,
                    outputs: w[1],
                    activation,
                    weights: (0..inputs * w[1])
                        .map(|_| rng.random_range(-bound..bound))
                        .collect(),
                    biases: vec![0.0; w[1]],
                }
            })
            .collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            label_dim,
            layers,
        })
    }

    /// Generator: leaky-ReLU hidden layers, tanh output.
    pub fn generator<R: Rng + ?Sized>(
        noise_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        label_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![noise_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim);
        let mut acts = vec![Activation::LeakyRelu; hidden.len()];
        acts.push(Activation::Tanh);
        Self::new(&sizes, label_dim, &acts, rng)
    }

    /// Discriminator: leaky-ReLU hidden layers, single sigmoid output.
    pub fn discriminator<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        label_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut acts = vec![Activation::LeakyRelu; hidden.len()];
        acts.push(Activation::Sigmoid);
        Self::new(&sizes, label_dim, &acts, rng)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated non-empty")
    }

    pub fn label_dim(&self) -> usize {
        self.label_dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            flat.extend_from_slice(&l.weights);
            flat.extend_from_slice(&l.biases);
        }
        flat
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return param(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Structural and finiteness checks, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.layers.len() != self.sizes.len() - 1 {
            return param("layer list does not match layer sizes");
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs != self.sizes[i] + self.label_dim
                || l.outputs != self.sizes[i + 1]
                || l.weights.len() != l.inputs * l.outputs
                || l.biases.len() != l.outputs
            {
                return param(format!("layer {i} has inconsistent dimensions"));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64], label: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return param(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            ));
        }
        if label.len() != self.label_dim {
            return param(format!(
                "label has width {}, network expects {}",
                label.len(),
                self.label_dim
            ));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("input feature {i} is not finite")));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64], label: &[f64]) -> Result<Trace> {
        self.check_input(x, label)?;
        let n = self.layers.len();
        let mut trace = Trace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outs: Vec::with_capacity(n),
        };
        let mut current = x.to_vec();
        for (li, l) in self.layers.iter().enumerate() {
            let mut input = current;
            input.extend_from_slice(label);
            let pre: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let row = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                    row.iter().zip(&input).fold(l.biases[o], |acc, (w, v)| acc + w * v)
                })
                .collect();
            let out: Vec<f64> = pre.iter().map(|&p| l.activation.apply(p)).collect();
            if let Some(i) = (0..out.len()).find(|&i| !out[i].is_finite() || !pre[i].is_finite()) {
                return Err(Error::Numeric(format!(
                    "layer {li} unit {i} produced {} (pre-activation {})",
                    out[i], pre[i]
                )));
            }
            current = out.clone();
            trace.inputs.push(input);
            trace.pre.push(pre);
            trace.outs.push(out);
        }
        Ok(trace)
    }

    pub fn forward(&self, x: &[f64], label: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .trace(x, label)?
            .outs
            .pop()
            .expect("network has at least one layer"))
    }

    /// Vector-Jacobian product: given `∂L/∂output`, return `∂L/∂params`
    /// and `∂L/∂x` (the label part of the input is excluded).
    pub fn vjp(&self, x: &[f64], label: &[f64], grad_output: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if grad_output.len() != self.output_dim() {
            return param(format!(
                "output gradient has {} entries, network outputs {}",
                grad_output.len(),
                self.output_dim()
            ));
        }
        let trace = self.trace(x, label)?;
        let mut grads = MlpGrads(vec![0.0; self.num_params()]);
        let input_grad = self.backward(&trace, grad_output, &mut grads.0);
        Ok((grads, input_grad))
    }

    /// Accumulates parameter gradients into `acc` and returns `∂L/∂x`.
    fn backward(&self, trace: &Trace, grad_output: &[f64], acc: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.biases.len();
        }
        let mut upstream = grad_output.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let delta: Vec<f64> = (0..l.outputs)
                .map(|o| upstream[o] * l.activation.derivative(trace.pre[li][o], trace.outs[li][o]))
                .collect();
            let base = offsets[li];
            let input = &trace.inputs[li];
            for o in 0..l.outputs {
                let row = &mut acc[base + o * l.inputs..base + (o + 1) * l.inputs];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += delta[o] * v;
                }
            }
            let bias_base = base + l.weights.len();
            for o in 0..l.outputs {
                acc[bias_base + o] += delta[o];
            }
            // Only the non-label part of the input propagates further.
            let keep = l.inputs - self.label_dim;
            upstream = (0..keep)
                .map(|i| (0..l.outputs).map(|o| l.weights[o * l.inputs + i] * delta[o]).sum())
                .collect();
        }
        upstream
    }
}

/// Noise vector plus one-hot condition (empty when unconditional).
#[derive(Debug, Clone, PartialEq)]
pub struct CondInput {
    pub z: Vec<f64>,
    pub label: Vec<f64>,
}

impl CondInput {
    pub fn new(z: Vec<f64>, label: Vec<f64>) -> Result<Self> {
        if !label.is_empty() {
            let ones = label.iter().filter(|&&v| v == 1.0).count();
            let zeros = label.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != label.len() {
                return param("condition label must be one-hot or empty");
            }
        }
        Ok(Self { z, label })
    }
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    if class < classes {
        v[class] = 1.0;
    }
    v
}

/// A record with its condition label, as seen by a discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: Vec<f64>,
}

/// Which loss the discriminator output is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTarget {
    /// `-ln D(x)`: the non-saturating loss of a fake record the generator
    /// wants to make look real.
    GeneratorFacing,
    /// Binary cross-entropy with label 1.
    Real,
    /// Binary cross-entropy with label 0.
    Fake,
}

fn loss_and_slope(p: f64, target: LossTarget) -> (f64, f64) {
    let q = p.clamp(PROB_MIN, PROB_MAX);
    let inside = (PROB_MIN..=PROB_MAX).contains(&p);
    match target {
        LossTarget::GeneratorFacing | LossTarget::Real => {
            (-q.ln(), if inside { -1.0 / q } else { 0.0 })
        }
        LossTarget::Fake => (-(1.0 - q).ln(), if inside { 1.0 / (1.0 - q) } else { 0.0 }),
    }
}

fn check_discriminator(d: &MlpParams) -> Result<()> {
    if d.output_dim() != 1 {
        return param(format!(
            "discriminator must have one output, got {}",
            d.output_dim()
        ));
    }
    Ok(())
}

pub fn disc_loss(d: &MlpParams, x: &[f64], label: &[f64], target: LossTarget) -> Result<f64> {
    check_discriminator(d)?;
    let p = d.forward(x, label)?[0];
    Ok(loss_and_slope(p, target).0)
}

/// Loss, parameter gradient and input gradient of one discriminator score.
pub fn disc_loss_grads(
    d: &MlpParams,
    x: &[f64],
    label: &[f64],
    target: LossTarget,
) -> Result<(f64, MlpGrads, Vec<f64>)> {
    check_discriminator(d)?;
    let trace = d.trace(x, label)?;
    let p = trace.outs.last().expect("non-empty")[0];
    let (loss, slope) = loss_and_slope(p, target);
    let mut grads = MlpGrads(vec![0.0; d.num_params()]);
    let input_grad = d.backward(&trace, &[slope], &mut grads.0);
    Ok((loss, grads, input_grad))
}

/// `∂(-ln D(x))/∂x`, unclamped.
pub fn generator_loss_input_gradient(d: &MlpParams, x: &[f64], label: &[f64]) -> Result<Vec<f64>> {
    Ok(disc_loss_grads(d, x, label, LossTarget::GeneratorFacing)?.2)
}

/// Perturbation that moves a fake record toward what `d` scores as real:
/// the negated gradient of `-ln D(x)`, clamped component-wise to `±clip`.
pub fn adversarial_perturbation(d: &MlpParams, x: &[f64], label: &[f64], clip: f64) -> Result<Vec<f64>> {
    if !(clip > 0.0) {
        return param(format!("clip bound must be positive, got {clip}"));
    }
    let grad = generator_loss_input_gradient(d, x, label)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("input gradient component {i} is not finite")));
    }
    Ok(grad.iter().map(|g| (-g).clamp(-clip, clip)).collect())
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return param(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

fn apply_adam(net: &mut MlpParams, adam: &mut Adam, grads: &MlpGrads) -> Result<()> {
    if let Some(i) = grads.0.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("parameter gradient {i} is not finite")));
    }
    let mut flat = net.to_flat();
    adam.step(&mut flat, &grads.0)?;
    net.load_flat(&flat)
}

/// Mean binary cross-entropy over `real` (label 1) and `fake` (label 0) and
/// its parameter gradient.
pub fn teacher_loss_grads(d: &MlpParams, real: &[Sample], fake: &[Sample]) -> Result<(f64, MlpGrads)> {
    check_discriminator(d)?;
    let total = real.len() + fake.len();
    if real.is_empty() || fake.is_empty() {
        return param("teacher step needs non-empty real and fake batches");
    }
    let scale = 1.0 / total as f64;
    let mut acc = vec![0.0; d.num_params()];
    let mut loss = 0.0;
    let batches = [(real, LossTarget::Real), (fake, LossTarget::Fake)];
    for (batch, target) in batches {
        for s in batch {
            let trace = d.trace(&s.x, &s.label)?;
            let p = trace.outs.last().expect("non-empty")[0];
            let (l, slope) = loss_and_slope(p, target);
            loss += l * scale;
            d.backward(&trace, &[slope * scale], &mut acc);
        }
    }
    Ok((loss, MlpGrads(acc)))
}

/// One Adam step on the teacher's BCE. Returns the loss before the step.
pub fn teacher_step(d: &mut MlpParams, adam: &mut Adam, real: &[Sample], fake: &[Sample]) -> Result<f64> {
    let (loss, grads) = teacher_loss_grads(d, real, fake)?;
    apply_adam(d, adam, &grads)?;
    Ok(loss)
}

/// Batch-mean of `1/k Σ (G(z)_i - x̂_i)²` and its parameter gradient.
pub fn generator_loss_grads(g: &MlpParams, z_batch: &[CondInput], x_hat: &[Vec<f64>]) -> Result<(f64, MlpGrads)> {
    if z_batch.len() != x_hat.len() {
        return param(format!(
            "{} latent inputs but {} targets",
            z_batch.len(),
            x_hat.len()
        ));
    }
    if z_batch.is_empty() {
        return param("generator step needs a non-empty batch");
    }
    let k = g.output_dim() as f64;
    let scale = 1.0 / z_batch.len() as f64;
    let mut acc = vec![0.0; g.num_params()];
    let mut loss = 0.0;
    for (z, target) in z_batch.iter().zip(x_hat) {
        if target.len() != g.output_dim() {
            return param(format!(
                "target has {} features, generator outputs {}",
                target.len(),
                g.output_dim()
            ));
        }
        let trace = g.trace(&z.z, &z.label)?;
        let out = trace.outs.last().expect("non-empty");
        let mut grad_out = Vec::with_capacity(out.len());
        for (o, t) in out.iter().zip(target) {
            let diff = o - t;
            loss += diff * diff / k * scale;
            grad_out.push(2.0 * diff / k * scale);
        }
        g.backward(&trace, &grad_out, &mut acc);
    }
    Ok((loss, MlpGrads(acc)))
}

/// One Adam step pulling `G(z)` toward `x̂`. Returns the loss before the
/// step.
pub fn generator_step(
    g: &mut MlpParams,
    adam: &mut Adam,
    z_batch: &[CondInput],
    x_hat: &[Vec<f64>],
) -> Result<f64> {
    let (loss, grads) = generator_loss_grads(g, z_batch, x_hat)?;
    apply_adam(g, adam, &grads)?;
    Ok(loss)
}

const CHECKPOINT_FORMAT: &str = "pategen-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: MlpParams,
}

/// JSON checkpoint: `{"format": "pategen-mlp", "version": 1, "params": …}`.
pub fn checkpoint_to_string(params: &MlpParams) -> Result<String> {
    Ok(serde_json::to_string(&Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    })?)
}

pub fn checkpoint_from_str(text: &str) -> Result<MlpParams> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Input(format!(
            "unsupported checkpoint {} v{}",
            ckpt.format, ckpt.version
        )));
    }
    ckpt.params.validate()?;
    Ok(ckpt.params)
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn single_layer(w: &[f64]) -> MlpParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = MlpParams::new(&[w.len(), 1], 0, &[Activation::Sigmoid], &mut rng).unwrap();
        let mut flat = w.to_vec();
        flat.push(0.0);
        d.load_flat(&flat).unwrap();
        d
    }

    #[test]
    fn leaky_relu_derivative_is_exact() {
        let a = Activation::LeakyRelu;
        assert_eq!(a.derivative(-3.0, a.apply(-3.0)), 0.2);
        assert_eq!(a.derivative(2.5, a.apply(2.5)), 1.0);
        assert_eq!(a.apply(-2.0), -0.4);
    }

    #[test]
    fn generator_facing_loss_at_half() {
        let d = single_layer(&[0.0, 0.0]);
        let l = disc_loss(&d, &[1.0, -2.0], &[], LossTarget::GeneratorFacing).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_real_has_near_zero_loss() {
        let d = single_layer(&[100.0]);
        let l = disc_loss(&d, &[1.0], &[], LossTarget::Real).unwrap();
        assert!(l >= 0.0 && l < 1.1e-7);
        let l = disc_loss(&d, &[1.0], &[], LossTarget::Fake).unwrap();
        assert!((l - (-(1e-7f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn input_gradient_matches_closed_form() {
        let w = [0.7, -1.3, 0.2];
        let x = [0.5, 0.1, -0.9];
        let d = single_layer(&w);
        let s = sigmoid(w.iter().zip(&x).map(|(a, b)| a * b).sum());
        let grad = generator_loss_input_gradient(&d, &x, &[]).unwrap();
        for i in 0..3 {
            let expected = -(1.0 - s) * w[i];
            assert!((grad[i] - expected).abs() < 1e-10);
        }
        // The perturbation points the other way and is clamped.
        let dx = adversarial_perturbation(&d, &x, &[], 1e-4).unwrap();
        for i in 0..3 {
            assert_eq!(dx[i], ((1.0 - s) * w[i]).clamp(-1e-4, 1e-4));
        }
        let dx = adversarial_perturbation(&d, &x, &[], 10.0).unwrap();
        for i in 0..3 {
            assert!((dx[i] - (1.0 - s) * w[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbation_raises_discriminator_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = MlpParams::discriminator(3, &[8, 8], 0, &mut rng).unwrap();
        let x = [0.2, -0.4, 0.1];
        let dx = adversarial_perturbation(&d, &x, &[], 1e-3).unwrap();
        let moved: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        assert!(d.forward(&moved, &[]).unwrap()[0] > d.forward(&x, &[]).unwrap()[0]);
    }

    #[test]
    fn scalar_adam_oracle() {
        // f(p) = (p - 3)², gradient 2(p - 3).
        let mut adam = Adam::new(1, 0.1);
        let mut p = [0.0];
        let (mut q, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (p[0] - 3.0);
            adam.step(&mut p, &[g]).unwrap();
            let gq = 2.0 * (q - 3.0);
            m = 0.9 * m + 0.1 * gq;
            v = 0.999 * v + 0.001 * gq * gq;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p[0] - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = MlpParams::discriminator(2, &[4], 0, &mut rng).unwrap();
        let before = d.clone();
        let mut adam = Adam::new(d.num_params(), 0.0);
        let real = vec![Sample { x: vec![1.0, 1.0], label: vec![] }];
        let fake = vec![Sample { x: vec![-1.0, -1.0], label: vec![] }];
        teacher_step(&mut d, &mut adam, &real, &fake).unwrap();
        assert_eq!(d, before);
    }

    #[test]
    fn teacher_learns_separable_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = MlpParams::discriminator(2, &[16, 16], 0, &mut rng).unwrap();
        let mut adam = Adam::new(d.num_params(), 1e-3);
        let draw = |rng: &mut ChaCha8Rng, c: f64| Sample {
            x: vec![c + rng.random_range(-0.3..0.3), c + rng.random_range(-0.3..0.3)],
            label: vec![],
        };
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..100 {
            let real: Vec<_> = (0..16).map(|_| draw(&mut rng, 1.0)).collect();
            let fake: Vec<_> = (0..16).map(|_| draw(&mut rng, -1.0)).collect();
            last = teacher_step(&mut d, &mut adam, &real, &fake).unwrap();
            first.get_or_insert(last);
        }
        assert!(last < first.unwrap(), "{last} vs {first:?}");
    }

    #[test]
    fn generator_step_identity_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = MlpParams::generator(3, &[5], 2, 2, &mut rng).unwrap();
        let z = vec![
            CondInput::new(vec![0.1, 0.2, 0.3], one_hot(0, 2)).unwrap(),
            CondInput::new(vec![-0.1, 0.5, 0.0], one_hot(1, 2)).unwrap(),
        ];
        let target: Vec<Vec<f64>> = z.iter().map(|c| g.forward(&c.z, &c.label).unwrap()).collect();
        let before = g.clone();
        let mut adam = Adam::new(g.num_params(), 1e-3);
        let (loss, grads) = generator_loss_grads(&g, &z, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.0.iter().all(|&x| x == 0.0));
        generator_step(&mut g, &mut adam, &z, &target).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn generator_loss_with_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = MlpParams::new(&[1, 1], 0, &[Activation::Identity], &mut rng).unwrap();
        let z = vec![CondInput::new(vec![0.4], vec![]).unwrap()];
        let target = vec![vec![g.forward(&[0.4], &[]).unwrap()[0] + 0.1]];
        let (loss, _) = generator_loss_grads(&g, &z, &target).unwrap();
        assert!((loss - 0.01).abs() < 1e-15);
        assert!(generator_loss_grads(&g, &z, &[]).is_err());
        assert!(generator_loss_grads(&g, &z, &[vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn mse_output_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = MlpParams::new(&[2, 3], 0, &[Activation::Identity], &mut rng).unwrap();
        let z = vec![CondInput::new(vec![0.3, -0.6], vec![]).unwrap()];
        let target = vec![vec![0.2, -0.1, 0.5]];
        let out = g.forward(&z[0].z, &[]).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let analytic = 2.0 * (out[i] - target[0][i]) / 3.0;
            let f = |delta: f64| {
                (0..3)
                    .map(|j| {
                        let o = out[j] + if j == i { delta } else { 0.0 };
                        (o - target[0][j]).powi(2) / 3.0
                    })
                    .sum::<f64>()
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            assert!((analytic - numeric).abs() < 1e-5);
        }
    }

    #[test]
    fn condition_labels_are_validated() {
        assert!(CondInput::new(vec![0.0], vec![]).is_ok());
        assert!(CondInput::new(vec![0.0], vec![0.0, 1.0]).is_ok());
        assert!(CondInput::new(vec![0.0], vec![1.0, 1.0]).is_err());
        assert!(CondInput::new(vec![0.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn non_finite_activations_are_reported() {
        let mut d = single_layer(&[1.0]);
        d.load_flat(&[f64::INFINITY, 0.0]).unwrap();
        match d.forward(&[-1.0], &[]) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 0")),
            other => panic!("expected numeric error, got {other:?}"),
        }
        assert!(single_layer(&[1.0]).forward(&[f64::NAN], &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = MlpParams::generator(4, &[6, 6], 3, 2, &mut rng).unwrap();
        let text = checkpoint_to_string(&g).unwrap();
        assert_eq!(checkpoint_from_str(&text).unwrap(), g);
        let bad = text.replace("\"version\":1", "\"version\":9");
        assert!(checkpoint_from_str(&bad).is_err());
    }
}
