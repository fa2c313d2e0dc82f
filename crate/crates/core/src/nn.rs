//! Small trainable building blocks: linear layers, the fixed-depth MLP used
//! for context fusion, layer-norm parameters, and a decoupled-weight-decay
//! Adam optimizer. Modules store plain tensors; for a training step they are
//! bound onto a [`GradientTape`] in a canonical order so gradients can be read
//! back per parameter.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// Fully-connected layer, weight laid out `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn xavier(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.uniform_in(-limit, limit))
            .collect();
        Linear {
            weight: Tensor::new(&[d_in, d_out], data).expect("xavier shape"),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    /// Square identity layer (used for attention projections at init).
    pub fn identity(dim: usize) -> Self {
        Linear {
            weight: Tensor::eye(dim),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Pure forward for inference paths.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.weight)?;
        let n = self.bias.len();
        for i in 0..out.rows() {
            for j in 0..n {
                let v = out.at2(i, j) + self.bias.data()[j];
                out.set2(i, j, v);
            }
        }
        Ok(out)
    }

    pub fn bind(&self, tape: &mut GradientTape) -> (Var, Var) {
        (tape.param(self.weight.clone()), tape.param(self.bias.clone()))
    }

    pub fn forward_on(tape: &mut GradientTape, x: Var, vars: (Var, Var)) -> Result<Var> {
        let mm = tape.matmul(x, vars.0)?;
        tape.add_row(mm, vars.1)
    }
}

/// Multi-layer perceptron: linear layers each followed by ReLU. The trailing
/// ReLU can be dropped via `final_relu` (kept on by default).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    /// Builds an MLP along the dimension chain, e.g. `[2C, C, C, C]`.
    pub fn xavier(dims: &[usize], final_relu: bool, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Linear::xavier(w[0], w[1], rng))
            .collect();
        Mlp { layers, final_relu }
    }

    pub fn zeros(dims: &[usize], final_relu: bool) -> Self {
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Mlp { layers, final_relu }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last || self.final_relu {
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut GradientTape) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            final_relu: self.final_relu,
        }
    }

    /// Binds every layer as constants, for frozen use inside a larger graph.
    pub fn bind_frozen(&self, tape: &mut GradientTape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                    )
                })
                .collect(),
            final_relu: self.final_relu,
        }
    }

    pub fn forward_on(tape: &mut GradientTape, x: Var, vars: &MlpVars) -> Result<Var> {
        let mut h = x;
        let last = vars.layers.len() - 1;
        for (i, &lv) in vars.layers.iter().enumerate() {
            h = Linear::forward_on(tape, h, lv)?;
            if i < last || vars.final_relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Smallest |pre-activation| ahead of any ReLU for the given input.
    /// Finite-difference gradient checks must stay clear of ReLU kinks, so
    /// instances are resampled until this margin exceeds the probe step.
    pub fn min_relu_margin(&self, x: &Tensor) -> Result<f64> {
        let mut h = x.clone();
        let mut margin = f64::INFINITY;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last || self.final_relu {
                for &v in h.data() {
                    margin = margin.min(v.abs());
                }
                h = h.map(|v| v.max(0.0));
            }
        }
        Ok(margin)
    }

    /// Parameter tensors in canonical (layer, weight-then-bias) order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Tape handles for one bound MLP.
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub final_relu: bool,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Gain/bias pair for row layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn unit(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::filled(&[dim], 1.0),
            bias: Tensor::zeros(&[dim]),
        }
    }

    /// Pure row layer norm matching the tape op.
    pub fn forward(&self, x: &Tensor, eps: f64) -> Tensor {
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * self.gain.data()[j] + self.bias.data()[j];
            }
        }
        Tensor::new(&[m, n], out).expect("layer norm shape")
    }
}

/// Adam with decoupled weight decay. The caller passes the (possibly
/// scheduled) learning rate each step; moments are kept per parameter slot and
/// the slot order must stay stable across steps.
#[derive(Debug)]
pub struct AdamW {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads[i]` of `None` leaves the moment state
    /// untouched for that slot (parameter unreachable this step).
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (slot, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * data[i]);
            }
        }
    }
}

/// Single step-down schedule: drops to `base * 0.1` at 70% of total steps.
pub fn scheduled_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps > 0 && step >= (total_steps * 7) / 10 {
        base * 0.1
    } else {
        base
    }
}
