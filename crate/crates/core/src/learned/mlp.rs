//! Fully connected network with tanh hidden layers and a logistic output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label::MovingLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }
}

/// The last layer has a single output, read as the logit of "moving".
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub moving: f64,
    pub static_: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self {
            moving: 1.0,
            static_: 1.0,
        }
    }
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_len: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![input_len];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (i, o) = (pair[0], pair[1]);
                let limit = (6.0 / (i + o) as f64).sqrt();
                let mut layer = Layer::zeros(i, o);
                for w in &mut layer.weights {
                    *w = rng.gen_range(-limit..limit);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order, weights before biases.
    pub fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().all(|p| p.is_finite())
    }

    /// Pre-activations and activations for every layer. `acts[0]` is the input.
    fn forward_trace(&self, x: &[f64], acts: &mut Vec<Vec<f64>>) -> Result<f64> {
        acts.resize_with(self.layers.len() + 1, Vec::new);
        acts[0].clear();
        acts[0].extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (head, tail) = acts.split_at_mut(i + 1);
            let out = &mut tail[0];
            out.resize(layer.outputs, 0.0);
            layer.apply(&head[i], out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: format!("layer {i}"),
                    message: "non-finite activation".into(),
                });
            }
        }
        Ok(acts[last + 1][0])
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        let mut acts = Vec::new();
        self.forward_trace(x, &mut acts)
    }

    /// Logit without error checks, reusing two scratch buffers.
    pub(crate) fn logit_fast(&self, x: &[f64], a: &mut Vec<f64>, b: &mut Vec<f64>) -> f64 {
        let last = self.layers.len() - 1;
        a.clear();
        a.extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            b.resize(layer.outputs, 0.0);
            layer.apply(a, b);
            if i < last {
                b.iter_mut().for_each(|v| *v = v.tanh());
            }
            std::mem::swap(a, b);
        }
        a[0]
    }

    /// Mean class-weighted binary cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[(&[f64], MovingLabel)],
        weights: ClassWeights,
    ) -> Result<(f64, Mlp)> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let mut grad = self.zeros_like();
        let mut acts = Vec::new();
        let mut delta: Vec<f64> = Vec::new();
        let mut next: Vec<f64> = Vec::new();
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;

        for &(x, target) in batch {
            if x.len() != self.input_len() {
                return Err(Error::Precondition(format!(
                    "feature vector of length {}, model expects {}",
                    x.len(),
                    self.input_len()
                )));
            }
            let (y, w) = match target {
                MovingLabel::Moving => (1.0, weights.moving),
                MovingLabel::Static => (0.0, weights.static_),
                MovingLabel::Ignore => {
                    return Err(Error::Precondition("ignore targets must be filtered out".into()))
                }
            };
            let z = self.forward_trace(x, &mut acts)?;
            total += w * (softplus(z) - y * z);

            delta.clear();
            delta.push(w * (logistic(z) - y) * scale);
            for (i, layer) in self.layers.iter().enumerate().rev() {
                let input = &acts[i];
                let g = &mut grad.layers[i];
                for (o, &d) in delta.iter().enumerate() {
                    g.bias[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, xi) in row.iter_mut().zip(input) {
                        *gw += d * xi;
                    }
                }
                if i == 0 {
                    break;
                }
                next.clear();
                next.resize(layer.inputs, 0.0);
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                // tanh'(z) = 1 - tanh(z)^2, with tanh(z) stored in acts[i]
                for (n, a) in next.iter_mut().zip(input) {
                    *n *= 1.0 - a * a;
                }
                std::mem::swap(&mut delta, &mut next);
            }
        }
        Ok((total * scale, grad))
    }
}
