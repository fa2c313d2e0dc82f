//! Tape-based reverse-mode automatic differentiation over whole tensors.
//!
//! A [`GradientTape`] records every differentiable operation of one training
//! step in insertion order (which is already a topological order, since an op
//! can only consume earlier nodes). [`GradientTape::backward`] walks the tape
//! once in reverse, accumulating adjoints additively across fan-out, and
//! returns per-node gradients; callers keep the [`Var`] handles of their
//! parameter leaves and read gradients for exactly those.
//!
//! The op set is deliberately small: matrix product, broadcast bias add,
//! ReLU, row softmax, row layer norm, concatenation/selection/ reshape,
//! same-shape convolution, boundary-band pooling, and fused scalar losses
//! (pairwise contrastive log-sum-exp, BCE, Dice, cross-entropy). Each fused
//! loss carries an analytic backward rule that is validated against central
//! finite differences in the acceptance suite.
//!
//! A tape is single-writer: one training step owns one tape. Forward-only
//! helpers elsewhere in the crate do not touch tapes at all.

use crate::error::{Error, Result};
use crate::tensor::{conv2d_same, softmax_rows, Kernel2D, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp used inside the BCE log terms.
const BCE_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// `[m x n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
    /// Vertical stack of 2-D parts sharing a column count.
    StackRows(Vec<Var>),
    /// L2-normalize each row; zero rows stay zero.
    RowNormalize(Var),
    Reshape(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        h: usize,
        w: usize,
        c: usize,
        k: usize,
    },
    /// Mean of the input over each listed pixel set; empty sets give zero rows.
    BandMean {
        input: Var,
        bands: Vec<Vec<(usize, usize)>>,
    },
    /// `log(1 + sum_{a,b} exp(neg_b - pos_a))`, stabilized.
    PairLse {
        pos: Var,
        neg: Var,
    },
    BceMean {
        pred: Var,
        target: Tensor,
    },
    DiceLoss {
        pred: Var,
        target: Tensor,
        smooth: f64,
    },
    CeRow {
        logits: Var,
        label: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires: bool,
}

/// Recording tape. See the module docs.
#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`GradientTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl GradientTape {
    pub fn new() -> Self {
        GradientTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Records a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf; [`Gradients::wrt`] will report its adjoint.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Mul(a, b), req))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let req = self.requires(a);
        self.push(value, Op::Scale(a, k), req)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let req = self.requires(a);
        self.push(value, Op::Relu(a), req)
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MatMul(a, b), req))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(Error::Shape("transpose expects a 2-D tensor".into()));
        }
        let value = self.value(a).transpose();
        let req = self.requires(a);
        Ok(self.push(value, Op::Transpose(a), req))
    }

    /// Adds a length-`n` bias row to every row of an `m x n` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape().len() != 2 || bv.len() != av.cols() {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bv.data()[j];
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        let req = self.requires(a) || self.requires(bias);
        Ok(self.push(value, Op::AddRow(a, bias), req))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(Error::Shape("softmax_rows expects a 2-D tensor".into()));
        }
        let value = softmax_rows(self.value(a));
        let req = self.requires(a);
        Ok(self.push(value, Op::SoftmaxRows(a), req))
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::Shape("layer_norm expects a 2-D tensor".into()));
        }
        let (m, n) = (xv.rows(), xv.cols());
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape("layer_norm gain/bias width mismatch".into()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        {
            let g = self.value(gain).data().to_vec();
            let b = self.value(bias).data().to_vec();
            let xd = self.value(x).data();
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..n {
                    let xh = (row[j] - mean) * is;
                    xhat[i * n + j] = xh;
                    out[i * n + j] = xh * g[j] + b[j];
                }
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            req,
        ))
    }

    // -- shape plumbing ------------------------------------------------------

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.rows() != bv.rows() {
            return Err(Error::Shape(format!(
                "concat_cols {:?} | {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, p, q) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Tensor::new(&[m, p + q], data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::ConcatCols(a, b), req))
    }

    /// Gathers rows by index (repeats allowed); backward scatter-adds.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::Shape("select_rows expects a 2-D tensor".into()));
        }
        let (m, n) = (av.rows(), av.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Shape(format!("row index {bad} out of {m}")));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::new(&[idx.len(), n], data)?;
        let req = self.requires(a);
        Ok(self.push(value, Op::SelectRows(a, idx.to_vec()), req))
    }

    /// Stacks 2-D tensors vertically. All parts must share a column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("stack_rows of nothing".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape().len() != 2 || pv.cols() != n {
                return Err(Error::Shape(format!(
                    "stack_rows part shape {:?}, want [_, {n}]",
                    pv.shape()
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(&[rows, n], data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, Op::StackRows(parts.to_vec()), req))
    }

    /// L2-normalizes each row of a 2-D tensor; zero rows pass through as zero.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::Shape("row_normalize expects a 2-D tensor".into()));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for i in 0..m {
            let norm: f64 = av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in &mut data[i * n..(i + 1) * n] {
                    *v /= norm;
                }
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        let req = self.requires(a);
        Ok(self.push(value, Op::RowNormalize(a), req))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.value(a).data().to_vec())?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Reshape(a), req))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let req = self.requires(a);
        self.push(value, Op::Sum(a), req)
    }

    // -- spatial ops ---------------------------------------------------------

    /// Same-shape convolution where the `k x k` kernel is a tape node; used by
    /// the learnable context filter. Gradients flow into both operands.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let iv = self.value(input);
        let (h, w, c) = match iv.shape() {
            [h, w] => (*h, *w, 1usize),
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::Shape(format!("conv2d_same on {s:?}"))),
        };
        let kv = self.value(kernel);
        let k = match kv.shape() {
            [a, b] if a == b && a % 2 == 1 => *a,
            s => {
                return Err(Error::Config(format!(
                    "conv kernel must be odd square, got {s:?}"
                )))
            }
        };
        let kern = Kernel2D::learnable(k, kv.data().to_vec())?;
        let value = conv2d_same(iv, &kern)?;
        let req = self.requires(input) || self.requires(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                h,
                w,
                c,
                k,
            },
            req,
        ))
    }

    /// Mean of an `H x W x C` map over each pixel set, one output row per set.
    /// Empty sets produce zero rows and receive no gradient.
    pub fn band_mean(&mut self, input: Var, bands: &[Vec<(usize, usize)>]) -> Result<Var> {
        let iv = self.value(input);
        let (h, w, c) = match iv.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::Shape(format!("band_mean on {s:?}"))),
        };
        let mut out = vec![0.0; bands.len() * c];
        for (n, band) in bands.iter().enumerate() {
            if band.is_empty() {
                continue;
            }
            for &(y, x) in band {
                if y >= h || x >= w {
                    return Err(Error::Shape(format!("band pixel ({y},{x}) off-grid")));
                }
                for ch in 0..c {
                    out[n * c + ch] += iv.at3(y, x, ch);
                }
            }
            let inv = 1.0 / band.len() as f64;
            for v in &mut out[n * c..(n + 1) * c] {
                *v *= inv;
            }
        }
        let value = Tensor::new(&[bands.len(), c], out)?;
        let req = self.requires(input);
        Ok(self.push(
            value,
            Op::BandMean {
                input,
                bands: bands.to_vec(),
            },
            req,
        ))
    }

    // -- fused scalar losses --------------------------------------------------

    /// `log(1 + sum_{a,b} exp(neg_b - pos_a))` over flattened similarity
    /// vectors, computed in log space. An empty negative set yields exactly 0;
    /// an empty positive set is a contract violation (callers skip those).
    pub fn pair_lse(&mut self, pos: Var, neg: Var) -> Result<Var> {
        let p = self.value(pos).data();
        let n = self.value(neg).data();
        if p.is_empty() {
            return Err(Error::Autodiff(
                "pair_lse requires at least one positive similarity".into(),
            ));
        }
        let value = Tensor::scalar(pair_lse_forward(p, n));
        let req = self.requires(pos) || self.requires(neg);
        Ok(self.push(value, Op::PairLse { pos, neg }, req))
    }

    /// Mean binary cross-entropy of predicted probabilities against a fixed
    /// target of the same shape. Logs are clamped at 1e-12.
    pub fn bce_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "bce {:?} vs {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let value = Tensor::scalar(bce_mean_forward(pv.data(), target.data()));
        let req = self.requires(pred);
        Ok(self.push(
            value,
            Op::BceMean {
                pred,
                target: target.clone(),
            },
            req,
        ))
    }

    /// Soft Dice loss `1 - (2|P.G| + s) / (|P| + |G| + s)` with smoothing `s`.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::Shape("dice operand length mismatch".into()));
        }
        let value = Tensor::scalar(dice_forward(pv.data(), target.data(), smooth));
        let req = self.requires(pred);
        Ok(self.push(
            value,
            Op::DiceLoss {
                pred,
                target: target.clone(),
                smooth,
            },
            req,
        ))
    }

    /// Softmax cross-entropy of one logit vector against a class index.
    pub fn ce_row(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if label >= lv.len() {
            return Err(Error::Shape(format!(
                "class label {label} out of {} logits",
                lv.len()
            )));
        }
        let value = Tensor::scalar(ce_forward(lv.data(), label));
        let req = self.requires(logits);
        Ok(self.push(value, Op::CeRow { logits, label }, req))
    }

    /// Folds a list of scalar nodes into their sum (empty list gives 0).
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        match terms.split_first() {
            None => Ok(self.constant(Tensor::scalar(0.0))),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = self.add(acc, t)?;
                }
                Ok(acc)
            }
        }
    }

    // -- backward -------------------------------------------------------------

    /// Reverse pass from a scalar loss. Visits each recorded op exactly once in
    /// reverse topological (= reverse insertion) order; adjoints accumulate
    /// additively across fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
        if !self.requires(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => {
                *existing = existing.add(&delta)?;
            }
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(self.value(*b))?;
                let db = g.hadamard(self.value(*a))?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, g.scale(*k))?;
            }
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.requires(*b) {
                    let db = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose())?;
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.requires(*bias) {
                    let (m, n) = (g.rows(), g.cols());
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.at2(i, j);
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[n], db)?)?;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let mut d = g.data().to_vec();
                for (dv, &x) in d.iter_mut().zip(av.data()) {
                    if x <= 0.0 {
                        *dv = 0.0;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), d)?)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let (m, n) = (y.rows(), y.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape(), d)?)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = (self.value(*x).rows(), self.value(*x).cols());
                let gv = self.value(*gain).data();
                if self.requires(*gain) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g.at2(i, j) * xhat[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(&[n], dg)?)?;
                }
                if self.requires(*bias) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.at2(i, j);
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[n], db)?)?;
                }
                if self.requires(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = g.at2(i, j) * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[i * n + j];
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for j in 0..n {
                            let dxh = g.at2(i, j) * gv[j];
                            dx[i * n + j] =
                                inv_std[i] * (dxh - mean_dxh - xhat[i * n + j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(&[m, n], dx)?)?;
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.value(*a).cols(), self.value(*b).cols());
                let m = g.rows();
                let mut da = vec![0.0; m * p];
                let mut db = vec![0.0; m * q];
                for i in 0..m {
                    da[i * p..(i + 1) * p].copy_from_slice(&g.row(i)[..p]);
                    db[i * q..(i + 1) * q].copy_from_slice(&g.row(i)[p..]);
                }
                self.accumulate(grads, *a, Tensor::new(&[m, p], da)?)?;
                self.accumulate(grads, *b, Tensor::new(&[m, q], db)?)?;
            }
            Op::SelectRows(a, idx) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut da = vec![0.0; av.rows() * n];
                for (out_row, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[src * n + j] += g.at2(out_row, j);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), da)?)?;
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let rows = pv.rows();
                    let n = pv.cols();
                    let slice = &g.data()[offset * n..(offset + rows) * n];
                    self.accumulate(grads, p, Tensor::new(pv.shape(), slice.to_vec())?)?;
                    offset += rows;
                }
            }
            Op::RowNormalize(a) => {
                // y = x / |x|; dx = (g - y (g . y)) / |x|
                let av = self.value(*a);
                let y = &self.nodes[id].value;
                let (m, n) = (av.rows(), av.cols());
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let norm: f64 = av.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let gy: f64 = g.row(i).iter().zip(y.row(i)).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = (g.at2(i, j) - y.at2(i, j) * gy) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape(), dx)?)?;
            }
            Op::Reshape(a) => {
                let da = Tensor::new(self.value(*a).shape(), g.data().to_vec())?;
                self.accumulate(grads, *a, da)?;
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, self.value(*a).map(|_| gv))?;
            }
            Op::Conv2d {
                input,
                kernel,
                h,
                w,
                c,
                k,
            } => {
                let (h, w, c, k) = (*h, *w, *c, *k);
                let r = (k / 2) as isize;
                let iv = self.value(*input);
                let kv = self.value(*kernel);
                if self.requires(*kernel) {
                    let mut dk = vec![0.0; k * k];
                    for (ki, dkv) in dk.iter_mut().enumerate() {
                        let dy = (ki / k) as isize - r;
                        let dx = (ki % k) as isize - r;
                        let mut acc = 0.0;
                        for y in 0..h as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for x in 0..w as isize {
                                let sx = x + dx;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let gi = ((y as usize * w) + x as usize) * c;
                                let ii = ((sy as usize * w) + sx as usize) * c;
                                for ch in 0..c {
                                    acc += g.data()[gi + ch] * iv.data()[ii + ch];
                                }
                            }
                        }
                        *dkv = acc;
                    }
                    self.accumulate(grads, *kernel, Tensor::new(&[k, k], dk)?)?;
                }
                if self.requires(*input) {
                    // transposed correlation: scatter each output adjoint back
                    // through the kernel window
                    let mut di = vec![0.0; h * w * c];
                    for y in 0..h as isize {
                        for x in 0..w as isize {
                            for (ki, &wgt) in kv.data().iter().enumerate() {
                                if wgt == 0.0 {
                                    continue;
                                }
                                let dy = (ki / k) as isize - r;
                                let dx = (ki % k) as isize - r;
                                let (sy, sx) = (y + dy, x + dx);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let gi = ((y as usize * w) + x as usize) * c;
                                let ii = ((sy as usize * w) + sx as usize) * c;
                                for ch in 0..c {
                                    di[ii + ch] += wgt * g.data()[gi + ch];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(iv.shape(), di)?)?;
                }
            }
            Op::BandMean { input, bands } => {
                let iv = self.value(*input);
                let c = iv.shape()[2];
                let w = iv.shape()[1];
                let mut di = vec![0.0; iv.len()];
                for (n, band) in bands.iter().enumerate() {
                    if band.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / band.len() as f64;
                    for &(y, x) in band {
                        let base = (y * w + x) * c;
                        for ch in 0..c {
                            di[base + ch] += g.at2(n, ch) * inv;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(iv.shape(), di)?)?;
            }
            Op::PairLse { pos, neg } => {
                let p = self.value(*pos).data();
                let n = self.value(*neg).data();
                let gv = g.item();
                let (dp, dn) = pair_lse_backward(p, n);
                self.accumulate(
                    grads,
                    *pos,
                    Tensor::new(self.value(*pos).shape(), dp.iter().map(|d| d * gv).collect())?,
                )?;
                if !n.is_empty() {
                    self.accumulate(
                        grads,
                        *neg,
                        Tensor::new(self.value(*neg).shape(), dn.iter().map(|d| d * gv).collect())?,
                    )?;
                }
            }
            Op::BceMean { pred, target } => {
                let pv = self.value(*pred);
                let gv = g.item();
                let inv_n = 1.0 / pv.len() as f64;
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        gv * inv_n * (pc - t) / (pc * (1.0 - pc))
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape(), d)?)?;
            }
            Op::DiceLoss {
                pred,
                target,
                smooth,
            } => {
                let pv = self.value(*pred);
                let inter: f64 = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| p * t)
                    .sum();
                let psum: f64 = pv.data().iter().sum();
                let tsum: f64 = target.data().iter().sum();
                let num = 2.0 * inter + smooth;
                let den = psum + tsum + smooth;
                let gv = g.item();
                let d: Vec<f64> = target
                    .data()
                    .iter()
                    .map(|&t| gv * (num - 2.0 * t * den) / (den * den))
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape(), d)?)?;
            }
            Op::CeRow { logits, label } => {
                let lv = self.value(*logits);
                let gv = g.item();
                let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = lv.data().iter().map(|&z| (z - max).exp()).sum();
                let d: Vec<f64> = lv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &z)| {
                        let soft = (z - max).exp() / denom;
                        gv * (soft - if j == *label { 1.0 } else { 0.0 })
                    })
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), d)?)?;
            }
        }
        Ok(())
    }
}

// -- fused-loss math shared by forward and backward -----------------------------

/// `log(1 + sum_{a,b} exp(neg_b - pos_a))` in log space. The double sum
/// factors as `(sum_b e^{neg_b}) * (sum_a e^{-pos_a})`.
pub(crate) fn pair_lse_forward(pos: &[f64], neg: &[f64]) -> f64 {
    if neg.is_empty() {
        return 0.0;
    }
    let mn = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mp = pos.iter().map(|p| -p).fold(f64::NEG_INFINITY, f64::max);
    let en: f64 = neg.iter().map(|&x| (x - mn).exp()).sum();
    let ep: f64 = pos.iter().map(|&p| (-p - mp).exp()).sum();
    let ln_s = mn + mp + en.ln() + ep.ln();
    log1p_exp(ln_s)
}

/// `d/dpos` and `d/dneg` of [`pair_lse_forward`].
fn pair_lse_backward(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    if neg.is_empty() {
        return (vec![0.0; pos.len()], Vec::new());
    }
    let mn = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mp = pos.iter().map(|p| -p).fold(f64::NEG_INFINITY, f64::max);
    let en: f64 = neg.iter().map(|&x| (x - mn).exp()).sum();
    let ep: f64 = pos.iter().map(|&p| (-p - mp).exp()).sum();
    let ln_s = mn + mp + en.ln() + ep.ln();
    // sigma = S / (1 + S)
    let sigma = if ln_s > 36.0 {
        1.0
    } else {
        let s = ln_s.exp();
        s / (1.0 + s)
    };
    let dn: Vec<f64> = neg.iter().map(|&x| sigma * (x - mn).exp() / en).collect();
    let dp: Vec<f64> = pos.iter().map(|&p| -sigma * (-p - mp).exp() / ep).collect();
    (dp, dn)
}

/// `ln(1 + e^x)` without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 36.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn bce_mean_forward(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
    }
    acc / n
}

pub(crate) fn dice_forward(pred: &[f64], target: &[f64], smooth: f64) -> f64 {
    let inter: f64 = pred.iter().zip(target).map(|(&p, &t)| p * t).sum();
    let psum: f64 = pred.iter().sum();
    let tsum: f64 = target.iter().sum();
    1.0 - (2.0 * inter + smooth) / (psum + tsum + smooth)
}

pub(crate) fn ce_forward(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}
