//! Dense row-major `f64` tensors plus the small set of array primitives the
//! rest of the crate builds on: 2-D same-shape convolution, row softmax and
//! basic linear algebra.
//!
//! Everything is 64-bit; gradient checks against finite differences need the
//! headroom and the arrays here are small enough that it costs nothing.

use crate::error::{Error, Result};

/// Shaped dense array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Scalar wrapped as a one-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds an `n x n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 2-D tensor from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(&[r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    // -- 2-D accessors -------------------------------------------------------

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    /// Row `r` of a 2-D tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    // -- 3-D accessors (H x W x C or N x H x W) ------------------------------

    #[inline]
    pub fn at3(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.shape[1] + b) * self.shape[2] + c]
    }

    #[inline]
    pub fn set3(&mut self, a: usize, b: usize, c: usize, v: f64) {
        self.data[(a * self.shape[1] + b) * self.shape[2] + c] = v;
    }

    /// Innermost slice `[a, b, ..]` of a 3-D tensor.
    pub fn slice3(&self, a: usize, b: usize) -> &[f64] {
        let c = self.shape[2];
        let start = (a * self.shape[1] + b) * c;
        &self.data[start..start + c]
    }

    /// Plane `[a, .., ..]` of a 3-D tensor (e.g. one instance mask of N x H x W).
    pub fn plane(&self, a: usize) -> &[f64] {
        let p = self.shape[1] * self.shape[2];
        &self.data[a * p..(a + 1) * p]
    }

    // -- arithmetic -----------------------------------------------------------

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|x| x * k)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `self @ other` for 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Tensor {
        debug_assert_eq!(self.shape.len(), 2);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }
}

/// Fixed or learnable square convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelMode {
    Average,
    Laplacian,
    Learnable,
}

#[derive(Debug, Clone)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
    mode: KernelMode,
}

impl Kernel2D {
    /// Box filter with all weights `1/k^2`. Size must be odd.
    pub fn average(size: usize) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::Config(format!(
                "average kernel size must be odd and positive, got {size}"
            )));
        }
        let w = 1.0 / (size * size) as f64;
        Ok(Kernel2D {
            size,
            weights: vec![w; size * size],
            mode: KernelMode::Average,
        })
    }

    /// Fixed 4-neighbor Laplacian stencil: center -4, edge neighbors +1.
    pub fn laplacian() -> Self {
        Kernel2D {
            size: 3,
            weights: vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0],
            mode: KernelMode::Laplacian,
        }
    }

    /// Kernel with trainable weights, initialized by the caller.
    pub fn learnable(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::Config(format!(
                "learnable kernel size must be odd and positive, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(Error::Config(format!(
                "kernel of size {size} wants {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        Ok(Kernel2D {
            size,
            weights,
            mode: KernelMode::Learnable,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode(&self) -> &KernelMode {
        &self.mode
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::Config("kernel weight count changed".into()));
        }
        self.weights = weights;
        Ok(())
    }
}

/// Per-channel 2-D correlation with zero padding; output spatial shape equals
/// the input's. Accepts `H x W` or `H x W x C`.
pub fn conv2d_same(input: &Tensor, kernel: &Kernel2D) -> Result<Tensor> {
    let (h, w, c) = match input.shape() {
        [h, w] => (*h, *w, 1usize),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Shape(format!("conv2d_same on shape {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::Shape("conv2d_same on empty grid".into()));
    }
    let k = kernel.size();
    let r = (k / 2) as isize;
    let kw = kernel.weights();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h as isize {
        for x in 0..w as isize {
            for (ki, &wgt) in kw.iter().enumerate() {
                if wgt == 0.0 {
                    continue;
                }
                let dy = (ki / k) as isize - r;
                let dx = (ki % k) as isize - r;
                let (sy, sx) = (y + dy, x + dx);
                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    continue; // zero padding
                }
                let src = ((sy as usize * w) + sx as usize) * c;
                let dst = ((y as usize * w) + x as usize) * c;
                for ch in 0..c {
                    out[dst + ch] += wgt * input.data()[src + ch];
                }
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Row-wise softmax with max subtraction. Each output row is nonnegative and
/// sums to one for any finite input.
pub fn softmax_rows(input: &Tensor) -> Tensor {
    debug_assert_eq!(input.shape().len(), 2);
    let (n, m) = (input.shape()[0], input.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = input.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let e = (x - max).exp();
            out[i * m + j] = e;
            denom += e;
        }
        for v in &mut out[i * m..(i + 1) * m] {
            *v /= denom;
        }
    }
    Tensor {
        shape: vec![n, m],
        data: out,
    }
}

/// Cosine similarity of two vectors; zero-norm inputs get similarity 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= 0.0 || nb <= 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn even_kernel_size_is_a_configuration_error() {
        assert!(Kernel2D::average(4).is_err());
        assert!(Kernel2D::average(9).is_ok());
    }

    #[test]
    fn averaging_a_constant_map_returns_the_constant_in_the_interior() {
        let c = 2.5;
        let input = Tensor::filled(&[15, 15], c);
        let out = conv2d_same(&input, &Kernel2D::average(9).unwrap()).unwrap();
        // interior pixel: window fully inside the grid
        assert!(approx(out.at2(7, 7), c, 1e-12));
        // corner pixel sees zero padding, so the mean drops
        assert!(out.at2(0, 0) < c);
    }

    #[test]
    fn laplacian_of_constant_is_zero_in_the_interior() {
        let input = Tensor::filled(&[7, 7], 3.0);
        let out = conv2d_same(&input, &Kernel2D::laplacian()).unwrap();
        assert!(approx(out.at2(3, 3), 0.0, 1e-12));
    }

    #[test]
    fn laplacian_impulse_response_equals_the_stencil() {
        let mut input = Tensor::zeros(&[5, 5]);
        input.set2(2, 2, 1.0);
        let out = conv2d_same(&input, &Kernel2D::laplacian()).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expect = match (y, x) {
                    (2, 2) => -4.0,
                    (1, 2) | (3, 2) | (2, 1) | (2, 3) => 1.0,
                    _ => 0.0,
                };
                assert!(approx(out.at2(y, x), expect, 1e-12), "at ({y},{x})");
            }
        }
    }

    #[test]
    fn conv_applies_per_channel() {
        let mut input = Tensor::zeros(&[3, 3, 2]);
        input.set3(1, 1, 0, 1.0);
        input.set3(1, 1, 1, 2.0);
        let out = conv2d_same(&input, &Kernel2D::laplacian()).unwrap();
        assert!(approx(out.at3(1, 1, 0), -4.0, 1e-12));
        assert!(approx(out.at3(1, 1, 1), -8.0, 1e-12));
        assert!(approx(out.at3(0, 1, 1), 2.0, 1e-12));
    }

    #[test]
    fn softmax_symmetric_row_splits_evenly() {
        let t = Tensor::from_rows(&[&[0.0, 0.0]]).unwrap();
        let s = softmax_rows(&t);
        assert!(approx(s.at2(0, 0), 0.5, 1e-15));
        assert!(approx(s.at2(0, 1), 0.5, 1e-15));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let t = Tensor::from_rows(&[&[1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&t);
        assert!(s.is_finite());
        assert!(approx(s.at2(0, 0), 1.0, 1e-12));
        assert!(approx(s.at2(0, 1), 0.0, 1e-12));
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        // Oracle: direct formula without max subtraction, safe at this scale.
        let row = [1.0f64, 2.0, 3.0];
        let denom: f64 = row.iter().map(|x| x.exp()).sum();
        let expect: Vec<f64> = row.iter().map(|x| x.exp() / denom).collect();
        let s = softmax_rows(&Tensor::from_rows(&[&row]).unwrap());
        for j in 0..3 {
            assert!(approx(s.at2(0, j), expect[j], 1e-14));
        }
    }

    #[test]
    fn softmax_rows_are_stochastic_for_random_inputs() {
        let mut rng = crate::rng::Rng::new(99);
        for _ in 0..1000 {
            let m = 1 + rng.below(8);
            let row: Vec<f64> = (0..m).map(|_| rng.normal() * 100.0).collect();
            let s = softmax_rows(&Tensor::new(&[1, m], row).unwrap());
            let sum: f64 = s.data().iter().sum();
            assert!(approx(sum, 1.0, 1e-12));
            assert!(s.data().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn cosine_handles_zero_norm() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!(approx(cosine(&[1.0, 0.0], &[2.0, 0.0]), 1.0, 1e-15));
    }
}
