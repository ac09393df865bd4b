//! The noise predictor `ε_θ(x_t, t)`: a fully-connected network fed with the
//! noisy point and a sinusoidal embedding of `t`, with exact reverse-mode
//! gradients written out by hand.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! row-major (`fan_out × fan_in`) followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisyPoint;
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::weighting::WeightTable;

/// Examples per gradient work unit. Partial gradients are summed in chunk
/// order, so results do not depend on how many threads run the chunks.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub input_dim: usize,
    #[serde(default = "default_time_embed_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "default_hidden_dims")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_time_embed_dim() -> usize {
    32
}
fn default_hidden_dims() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_activation() -> Activation {
    Activation::Silu
}

impl DenoiserSpec {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            time_embed_dim: default_time_embed_dim(),
            hidden_dims: default_hidden_dims(),
            activation: default_activation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "time_embed_dim must be even and at least 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "need at least one hidden layer, all of positive width".into(),
            ));
        }
        Ok(())
    }
}

/// `[sin(tω_0), cos(tω_0), sin(tω_1), cos(tω_1), …]` with
/// `ω_i = exp(−ln(10⁴)·i/(dim/2 − 1))`.
pub fn time_embedding(t: usize, dim: usize, num_timesteps: usize) -> Result<Vec<f64>> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be even and >= 2, got {dim}"
        )));
    }
    if t == 0 || t > num_timesteps {
        return Err(Error::StepOutOfRange {
            t,
            max: num_timesteps,
        });
    }
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let omega = (-(10_000f64).ln() * i as f64 / denom).exp();
        let phase = t as f64 * omega;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

/// Flat parameter vector `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams(Vec<f64>);

impl DenoiserParams {
    pub fn from_flat(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

/// Network shape plus a cached embedding table for every step.
#[derive(Debug, Clone)]
pub struct Architecture {
    spec: DenoiserSpec,
    num_timesteps: usize,
    layers: Vec<Layer>,
    num_params: usize,
    embeddings: Vec<f64>,
}

/// Forward intermediates for one example: the layer inputs and the hidden
/// pre-activations.
#[derive(Debug, Clone)]
pub struct GradientTape {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl GradientTape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Architecture {
    pub fn new(spec: DenoiserSpec, num_timesteps: usize) -> Result<Self> {
        spec.validate()?;
        if num_timesteps == 0 {
            return Err(Error::InvalidConfig(
                "num_timesteps must be positive".into(),
            ));
        }
        let mut widths = vec![spec.input_dim + spec.time_embed_dim];
        widths.extend(&spec.hidden_dims);
        widths.push(spec.input_dim);

        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            layers.push(Layer {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }

        let mut embeddings = Vec::with_capacity(num_timesteps * spec.time_embed_dim);
        for t in 1..=num_timesteps {
            embeddings.extend(time_embedding(t, spec.time_embed_dim, num_timesteps)?);
        }

        Ok(Self {
            spec,
            num_timesteps,
            layers,
            num_params: offset,
            embeddings,
        })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub fn num_timesteps(&self) -> usize {
        self.num_timesteps
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn zero_params(&self) -> DenoiserParams {
        DenoiserParams(vec![0.0; self.num_params])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, rng: &mut DetRng) -> DenoiserParams {
        let mut theta = vec![0.0; self.num_params];
        for layer in &self.layers {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let weights =
                &mut theta[layer.weight_offset..layer.weight_offset + layer.fan_in * layer.fan_out];
            for w in weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        DenoiserParams(theta)
    }

    pub fn check_params(&self, params: &DenoiserParams) -> Result<()> {
        if params.len() != self.num_params {
            return Err(Error::ShapeMismatch {
                expected: self.num_params,
                got: params.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64], t: usize) -> Result<()> {
        if x.len() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        if t == 0 || t > self.num_timesteps {
            return Err(Error::StepOutOfRange {
                t,
                max: self.num_timesteps,
            });
        }
        Ok(())
    }

    fn network_input(&self, x: &[f64], t: usize) -> Vec<f64> {
        let e = self.spec.time_embed_dim;
        let mut input = Vec::with_capacity(x.len() + e);
        input.extend_from_slice(x);
        input.extend_from_slice(&self.embeddings[(t - 1) * e..t * e]);
        input
    }

    pub fn predict_eps(&self, params: &DenoiserParams, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(x, t)?;
        Ok(self.forward(params.as_slice(), x, t))
    }

    fn forward(&self, theta: &[f64], x: &[f64], t: usize) -> Vec<f64> {
        let mut h = self.network_input(x, t);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = affine(theta, layer, &h);
            if l != last {
                for v in &mut z {
                    *v = self.spec.activation.apply(*v);
                }
            }
            h = z;
        }
        h
    }

    pub fn forward_tape(
        &self,
        params: &DenoiserParams,
        x: &[f64],
        t: usize,
    ) -> Result<GradientTape> {
        self.check_params(params)?;
        self.check_input(x, t)?;
        Ok(self.record(params.as_slice(), x, t))
    }

    fn record(&self, theta: &[f64], x: &[f64], t: usize) -> GradientTape {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre_activations = Vec::with_capacity(n - 1);
        let mut h = self.network_input(x, t);
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(theta, layer, &h);
            inputs.push(h);
            if l + 1 == n {
                return GradientTape {
                    inputs,
                    pre_activations,
                    output: z,
                };
            }
            h = z.iter().map(|&v| self.spec.activation.apply(v)).collect();
            pre_activations.push(z);
        }
        unreachable!("architecture has at least one layer")
    }

    /// Adds `∂(d_output · output)/∂θ` into `grad`.
    pub fn backward(
        &self,
        params: &DenoiserParams,
        tape: &GradientTape,
        d_output: &[f64],
        grad: &mut [f64],
    ) {
        self.backprop(params.as_slice(), tape, d_output, grad);
    }

    fn backprop(&self, theta: &[f64], tape: &GradientTape, d_output: &[f64], grad: &mut [f64]) {
        let mut dz = d_output.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let input = &tape.inputs[l];
            let (gw, rest) = grad[layer.weight_offset..].split_at_mut(layer.fan_in * layer.fan_out);
            let gb = &mut rest[..layer.fan_out];
            for (o, &g) in dz.iter().enumerate() {
                gb[o] += g;
                axpy(g, input, &mut gw[o * layer.fan_in..(o + 1) * layer.fan_in]);
            }
            if l == 0 {
                break;
            }
            let w = &theta[layer.weight_offset..layer.weight_offset + layer.fan_in * layer.fan_out];
            let mut dh = vec![0.0; layer.fan_in];
            for (o, &g) in dz.iter().enumerate() {
                axpy(g, &w[o * layer.fan_in..(o + 1) * layer.fan_in], &mut dh);
            }
            let pre = &tape.pre_activations[l - 1];
            for (d, &z) in dh.iter_mut().zip(pre) {
                *d *= self.spec.activation.derivative(z);
            }
            dz = dh;
        }
    }

    /// Weighted ε-MSE over the batch and its exact gradient.
    pub fn loss_and_grad(
        &self,
        params: &DenoiserParams,
        batch: &[NoisyPoint],
        table: &WeightTable,
    ) -> Result<(f64, Vec<f64>)> {
        let out = self.loss_and_grad_detailed(params, batch, table)?;
        Ok((out.loss, out.grad))
    }

    pub fn loss_and_grad_detailed(
        &self,
        params: &DenoiserParams,
        batch: &[NoisyPoint],
        table: &WeightTable,
    ) -> Result<LossOutput> {
        self.check_params(params)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if table.num_timesteps() < self.num_timesteps {
            return Err(Error::ShapeMismatch {
                expected: self.num_timesteps,
                got: table.num_timesteps(),
            });
        }
        for ex in batch {
            self.check_input(&ex.values, ex.t)?;
            if ex.eps.len() != self.spec.input_dim {
                return Err(Error::ShapeMismatch {
                    expected: self.spec.input_dim,
                    got: ex.eps.len(),
                });
            }
        }

        let theta = params.as_slice();
        let scale = 1.0 / batch.len() as f64;
        let d = self.spec.input_dim as f64;
        let chunk_result = |chunk: &[NoisyPoint]| {
            let mut grad = vec![0.0; self.num_params];
            let mut per_example = Vec::with_capacity(chunk.len());
            for ex in chunk {
                let tape = self.record(theta, &ex.values, ex.t);
                let w = table.mse_weight[ex.t - 1];
                let mut sq = 0.0;
                let mut d_out = Vec::with_capacity(tape.output.len());
                for (p, e) in tape.output.iter().zip(&ex.eps) {
                    let r = p - e;
                    sq += r * r;
                    d_out.push(2.0 * w * scale / d * r);
                }
                per_example.push(w * sq / d);
                self.backprop(theta, &tape, &d_out, &mut grad);
            }
            (per_example, grad)
        };

        #[cfg(feature = "parallel")]
        let partials: Vec<(Vec<f64>, Vec<f64>)> = {
            use rayon::prelude::*;
            batch.par_chunks(GRAD_CHUNK).map(chunk_result).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let partials: Vec<(Vec<f64>, Vec<f64>)> =
            batch.chunks(GRAD_CHUNK).map(chunk_result).collect();

        let mut grad = vec![0.0; self.num_params];
        let mut per_example = Vec::with_capacity(batch.len());
        for (losses, g) in partials {
            per_example.extend(losses);
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        let loss = per_example.iter().sum::<f64>() * scale;
        Ok(LossOutput {
            loss,
            grad,
            per_example,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// `mse_weight[t]·mean((ε_θ − ε)²)` for each example.
    pub per_example: Vec<f64>,
}

fn affine(theta: &[f64], layer: &Layer, input: &[f64]) -> Vec<f64> {
    let w = &theta[layer.weight_offset..layer.weight_offset + layer.fan_in * layer.fan_out];
    let b = &theta[layer.bias_offset..layer.bias_offset + layer.fan_out];
    w.chunks_exact(layer.fan_in)
        .zip(b)
        .map(|(row, bias)| dot(row, input) + bias)
        .collect()
}

/// Dot product with four independent accumulators (vectorizes, fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A network bound to concrete parameters.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub arch: Architecture,
    pub params: DenoiserParams,
}

impl Denoiser {
    pub fn new(arch: Architecture, params: DenoiserParams) -> Result<Self> {
        arch.check_params(&params)?;
        Ok(Self { arch, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small_spec(hidden: Vec<usize>, activation: Activation) -> DenoiserSpec {
        DenoiserSpec {
            input_dim: 3,
            time_embed_dim: 8,
            hidden_dims: hidden,
            activation,
        }
    }

    #[test]
    fn embedding_basics() {
        let e = time_embedding(7, 8, 1000).unwrap();
        assert_eq!(e.len(), 8);
        assert_eq!(e[0], 7f64.sin());
        assert_eq!(e[1], 7f64.cos());
        for pair in e.chunks(2) {
            assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-12);
        }
        assert_eq!(e, time_embedding(7, 8, 1000).unwrap());
        assert!(time_embedding(7, 7, 1000).is_err());
        assert!(time_embedding(0, 8, 1000).is_err());
        assert!(time_embedding(1001, 8, 1000).is_err());
    }

    #[test]
    fn embeddings_distinct_across_steps() {
        let all: Vec<Vec<f64>> = (1..=1000)
            .map(|t| time_embedding(t, 32, 1000).unwrap())
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d: f64 = all[i]
                    .iter()
                    .zip(&all[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 0.0);
    }

    #[test]
    fn parameter_count() {
        let arch = Architecture::new(small_spec(vec![5, 4], Activation::Silu), 10).unwrap();
        assert_eq!(arch.num_params(), (11 * 5 + 5) + (5 * 4 + 4) + (4 * 3 + 3));
    }

    #[test]
    fn zero_params_give_zero_output() {
        let arch = Architecture::new(small_spec(vec![6], Activation::Silu), 10).unwrap();
        let out = arch
            .predict_eps(&arch.zero_params(), &[0.3, -1.0, 2.0], 4)
            .unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Architecture::new(small_spec(vec![], Activation::Silu), 10).is_err());
        let mut odd = small_spec(vec![4], Activation::Silu);
        odd.time_embed_dim = 5;
        assert!(Architecture::new(odd, 10).is_err());

        let arch = Architecture::new(small_spec(vec![4], Activation::Relu), 10).unwrap();
        let p = arch.zero_params();
        assert!(arch.predict_eps(&p, &[1.0, 2.0], 1).is_err());
        assert!(arch.predict_eps(&p, &[1.0, 2.0, 3.0], 11).is_err());
        assert!(arch
            .predict_eps(
                &DenoiserParams::from_flat(vec![0.0; 3]),
                &[1.0, 2.0, 3.0],
                1
            )
            .is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let arch = Architecture::new(small_spec(vec![6, 6], Activation::Silu), 10).unwrap();
        let params = arch.init_params(&mut rng::seeded(1));
        let batch: Vec<NoisyPoint> = (1..=4)
            .map(|t| {
                let x = vec![0.1 * t as f64, -0.2, 0.5];
                let eps = arch.predict_eps(&params, &x, t).unwrap();
                NoisyPoint { values: x, t, eps }
            })
            .collect();
        let table = WeightTable {
            lambda_on_vlb: vec![1.0; 10],
            mse_weight: vec![1.0; 10],
        };
        let (loss, grad) = arch.loss_and_grad(&params, &batch, &table).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(matches!(
            arch.loss_and_grad(&params, &[], &table),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let arch = Architecture::new(DenoiserSpec::new(2), 1000).unwrap();
        let params = arch.init_params(&mut rng::seeded(3));
        for &x in &[-10.0, -1.0, 0.0, 1.0, 10.0] {
            for t in [1, 500, 1000] {
                let out = arch.predict_eps(&params, &[x, -x], t).unwrap();
                assert!(out.iter().all(|v| v.is_finite() && v.abs() < 1e3));
            }
        }
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
