//! Dense perceptrons with tanh hidden activations, exact backprop and Adam.
//!
//! Batches are row-major `n x dim` slices. Every network here is small enough
//! that plain loops over `Vec<f64>` beat pulling in a tensor library.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use rayon::prelude::*;

use crate::error::{check_dim, Result};

const ROW_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn xavier(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, input: &[f64], n: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(n * self.outputs, 0.0);
        out.par_chunks_mut(ROW_CHUNK * self.outputs)
            .zip(input[..n * self.inputs].par_chunks(ROW_CHUNK * self.inputs))
            .for_each(|(out, input)| {
                for (row, dst) in input.chunks_exact(self.inputs).zip(out.chunks_exact_mut(self.outputs)) {
                    for (o, d) in dst.iter_mut().enumerate() {
                        let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                        let z: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                        *d = z + self.bias[o];
                    }
                }
            });
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Multi-layer perceptron: tanh after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations retained by [`Mlp::forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    n: usize,
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }
}

impl Mlp {
    /// `sizes = [input, hidden..., output]`; Xavier-uniform weights, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| Dense::xavier(w[0], w[1], &mut rng))
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(crate::Error::InvalidInput("MLP without layers".into()));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].outputs, pair[1].inputs)?;
        }
        for l in &layers {
            check_dim(l.inputs * l.outputs, l.weights.len())?;
            check_dim(l.outputs, l.bias.len())?;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Widest hidden layer; zero for a single-layer network.
    pub fn hidden_width(&self) -> usize {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.outputs)
            .max()
            .unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_batch(x, 1)
    }

    pub fn forward_batch(&self, inputs: &[f64], n: usize) -> Vec<f64> {
        let mut cur = inputs[..n * self.input_dim()].to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, n, &mut next);
            if l != last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_trace(&self, inputs: &[f64], n: usize) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs[..n * self.input_dim()].to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(&activations[l], n, &mut out);
            if l != last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(out);
        }
        Trace { n, activations }
    }

    /// Parameter gradient (flattened, same order as [`Mlp::params`]) given
    /// `grad_out = dL/d output` for every row of the traced batch.
    ///
    /// Rows are processed in fixed-size chunks whose partial sums are added
    /// in chunk order, so the result does not depend on the thread count.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64]) -> Vec<f64> {
        let starts: Vec<usize> = (0..trace.n).step_by(ROW_CHUNK).collect();
        let partials: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&a| self.backward_rows(trace, grad_out, a, (a + ROW_CHUNK).min(trace.n)))
            .collect();
        let mut total = vec![0.0; self.param_count()];
        for p in partials {
            total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
        }
        total
    }

    fn backward_rows(&self, trace: &Trace, grad_out: &[f64], start: usize, end: usize) -> Vec<f64> {
        let n = end - start;
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let out_dim = self.output_dim();
        let mut delta = grad_out[start * out_dim..end * out_dim].to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[l][start * layer.inputs..end * layer.inputs];
            let mut gw = vec![0.0; layer.weights.len()];
            let mut gb = vec![0.0; layer.outputs];
            for i in 0..n {
                let d = &delta[i * layer.outputs..(i + 1) * layer.outputs];
                let a = &input[i * layer.inputs..(i + 1) * layer.inputs];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, av) in row.iter_mut().zip(a) {
                        *g += dv * av;
                    }
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; n * layer.inputs];
                for i in 0..n {
                    let d = &delta[i * layer.outputs..(i + 1) * layer.outputs];
                    let p = &mut prev[i * layer.inputs..(i + 1) * layer.inputs];
                    for (o, &dv) in d.iter().enumerate() {
                        let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (pv, wv) in p.iter_mut().zip(w) {
                            *pv += dv * wv;
                        }
                    }
                    // tanh' = 1 - a^2 on the previous layer's activation
                    for (pv, av) in p.iter_mut().zip(&input[i * layer.inputs..]) {
                        *pv *= 1.0 - av * av;
                    }
                }
                delta = prev;
            }
            gw.extend_from_slice(&gb);
            grads.push(gw);
        }
        grads.reverse();
        grads.concat()
    }

    /// Flattened parameters: per layer, weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
    }

    /// Half-open ranges of each layer's weight and bias blocks in the flat vector.
    pub fn param_blocks(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (i, l) in self.layers.iter().enumerate() {
            blocks.push((format!("layer{i}.weight"), offset..offset + l.weights.len()));
            offset += l.weights.len();
            blocks.push((format!("layer{i}.bias"), offset..offset + l.bias.len()));
            offset += l.bias.len();
        }
        blocks
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, size: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let step = self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
            params[i] -= step;
        }
    }
}
