//! Boundary-context feature extraction.
//!
//! An instance's surrounding feature is the mean of the average-filtered
//! feature map over the one-pixel exterior ring of its mask (the strictly
//! positive response of a 4-neighbor Laplacian on the binarized mask). The
//! surrounding feature is then fused with the core instance feature by a
//! three-layer ReLU MLP into a context-aware embedding.

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpVars};
use crate::tape::{GradientTape, Var};
use crate::tensor::{conv2d_same, Kernel2D, KernelMode, Tensor};

/// One frame worth of segmenter-style outputs: feature map `F` (H x W x C),
/// core instance embeddings (N x C), soft masks (N x H x W, entries in [0,1])
/// and class scores (N x K). Rows are in detection order.
#[derive(Debug, Clone)]
pub struct InstanceObservation {
    pub features: Tensor,
    pub core: Tensor,
    pub masks: Tensor,
    pub class_scores: Tensor,
}

impl InstanceObservation {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = match self.features.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(Error::Shape(format!("features shape {s:?}"))),
        };
        let n = match self.core.shape() {
            [n, cc] if *cc == c => *n,
            s => return Err(Error::Shape(format!("core shape {s:?} vs C={c}"))),
        };
        match self.masks.shape() {
            [nn, hh, ww] if *nn == n && *hh == h && *ww == w => {}
            s => return Err(Error::Shape(format!("masks shape {s:?}"))),
        }
        match self.class_scores.shape() {
            [nn, _k] if *nn == n => {}
            s => return Err(Error::Shape(format!("class scores shape {s:?}"))),
        }
        if self.masks.data().iter().any(|&m| !(0.0..=1.0).contains(&m)) {
            return Err(Error::Shape("mask entries outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn num_instances(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.features.shape()[0], self.features.shape()[1])
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }

    /// Mask plane of instance `n` as an H x W tensor.
    pub fn mask_of(&self, n: usize) -> Tensor {
        let (h, w) = (self.masks.shape()[1], self.masks.shape()[2]);
        Tensor::new(&[h, w], self.masks.plane(n).to_vec()).expect("mask plane")
    }
}

/// Per-frame context outputs: surrounding embeddings, fused embeddings and the
/// boundary-band pixel count per instance (zero means the surrounding row is
/// exactly zero).
#[derive(Debug, Clone)]
pub struct ContextEmbeddings {
    pub surrounding: Tensor,
    pub fused: Tensor,
    pub band_sizes: Vec<usize>,
}

/// Exterior boundary ring of a soft mask: binarize at `threshold`, apply the
/// 4-neighbor Laplacian, keep strictly positive responses. Returns a 0/1 map.
pub fn boundary_band(mask: &Tensor, threshold: f64) -> Result<Tensor> {
    if mask.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "boundary_band wants H x W, got {:?}",
            mask.shape()
        )));
    }
    let binary = mask.map(|m| if m > threshold { 1.0 } else { 0.0 });
    let lap = conv2d_same(&binary, &Kernel2D::laplacian())?;
    Ok(lap.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

/// Boundary-band pixel coordinates for every instance mask of an N x H x W
/// stack.
pub fn boundary_bands(masks: &Tensor, threshold: f64) -> Result<Vec<Vec<(usize, usize)>>> {
    let (n, h, w) = match masks.shape() {
        [n, h, w] => (*n, *h, *w),
        s => return Err(Error::Shape(format!("mask stack shape {s:?}"))),
    };
    let mut bands = Vec::with_capacity(n);
    for i in 0..n {
        let mask = Tensor::new(&[h, w], masks.plane(i).to_vec())?;
        let band = boundary_band(&mask, threshold)?;
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if band.at2(y, x) > 0.0 {
                    pixels.push((y, x));
                }
            }
        }
        bands.push(pixels);
    }
    Ok(bands)
}

/// Mean of `smoothed` (H x W x C) over each band; empty bands give zero rows.
pub fn band_means(smoothed: &Tensor, bands: &[Vec<(usize, usize)>]) -> Result<Tensor> {
    let c = match smoothed.shape() {
        [_, _, c] => *c,
        s => return Err(Error::Shape(format!("smoothed map shape {s:?}"))),
    };
    let mut out = Tensor::zeros(&[bands.len(), c]);
    for (n, band) in bands.iter().enumerate() {
        if band.is_empty() {
            continue;
        }
        let inv = 1.0 / band.len() as f64;
        for &(y, x) in band {
            for ch in 0..c {
                let v = out.at2(n, ch) + smoothed.at3(y, x, ch) * inv;
                out.set2(n, ch, v);
            }
        }
    }
    Ok(out)
}

/// Instance surrounding features: average-filter the frame's feature map, then
/// mean-pool it over each instance's boundary band.
pub fn surrounding_embedding(
    obs: &InstanceObservation,
    kernel: &Kernel2D,
    threshold: f64,
) -> Result<(Tensor, Vec<usize>)> {
    let smoothed = conv2d_same(&obs.features, kernel)?;
    let bands = boundary_bands(&obs.masks, threshold)?;
    let q_sur = band_means(&smoothed, &bands)?;
    Ok((q_sur, bands.iter().map(Vec::len).collect()))
}

/// Convenience wrapper building the default average filter (size must be odd).
pub fn surrounding_embedding_avg(
    obs: &InstanceObservation,
    avg_kernel_size: usize,
    threshold: f64,
) -> Result<(Tensor, Vec<usize>)> {
    surrounding_embedding(obs, &Kernel2D::average(avg_kernel_size)?, threshold)
}

/// Row-wise fusion `Q = MLP(concat(core, surrounding))`. The MLP must map
/// width `2C` to width `C`.
pub fn fuse_context(core: &Tensor, surrounding: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    if core.shape() != surrounding.shape() || core.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "fuse_context {:?} vs {:?}",
            core.shape(),
            surrounding.shape()
        )));
    }
    let c = core.cols();
    if mlp.d_in() != 2 * c || mlp.d_out() != c {
        return Err(Error::Config(format!(
            "fusion MLP maps {} -> {}, expected {} -> {}",
            mlp.d_in(),
            mlp.d_out(),
            2 * c,
            c
        )));
    }
    let n = core.rows();
    let mut cat = Vec::with_capacity(n * 2 * c);
    for i in 0..n {
        cat.extend_from_slice(core.row(i));
        cat.extend_from_slice(surrounding.row(i));
    }
    mlp.forward(&Tensor::new(&[n, 2 * c], cat)?)
}

/// The trainable context head: average (or learnable) context filter plus the
/// fusion MLP. The Laplacian used for bands is always the fixed stencil.
#[derive(Debug, Clone)]
pub struct ContextHead {
    pub kernel: Kernel2D,
    pub mlp: Mlp,
    pub threshold: f64,
}

impl ContextHead {
    pub fn new(kernel: Kernel2D, mlp: Mlp, threshold: f64) -> Self {
        ContextHead {
            kernel,
            mlp,
            threshold,
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp.d_out()
    }

    /// Pure context extraction for one frame.
    pub fn extract(&self, obs: &InstanceObservation) -> Result<ContextEmbeddings> {
        let (surrounding, band_sizes) = surrounding_embedding(obs, &self.kernel, self.threshold)?;
        let fused = fuse_context(&obs.core, &surrounding, &self.mlp)?;
        Ok(ContextEmbeddings {
            surrounding,
            fused,
            band_sizes,
        })
    }

    /// Fuses an explicit (core, surrounding) pair, e.g. after alignment.
    pub fn fuse(&self, core: &Tensor, surrounding: &Tensor) -> Result<Tensor> {
        fuse_context(core, surrounding, &self.mlp)
    }

    /// Binds the head for a training step. With a learnable kernel the kernel
    /// weights become a parameter; otherwise only the MLP trains.
    pub fn bind(&self, tape: &mut GradientTape) -> ContextVars {
        let kernel = match self.kernel.mode() {
            KernelMode::Learnable => {
                let k = self.kernel.size();
                Some(tape.param(
                    Tensor::new(&[k, k], self.kernel.weights().to_vec()).expect("kernel tensor"),
                ))
            }
            _ => None,
        };
        ContextVars {
            mlp: self.mlp.bind(tape),
            kernel,
        }
    }

    /// Fused embeddings for one frame on the tape. Band extraction is not
    /// differentiable (an indicator), so bands are computed from the masks
    /// outside the tape; gradients flow through the smoothing kernel (if
    /// learnable) and the fusion MLP.
    pub fn fused_on_tape(
        &self,
        tape: &mut GradientTape,
        obs: &InstanceObservation,
        vars: &ContextVars,
    ) -> Result<Var> {
        let bands = boundary_bands(&obs.masks, self.threshold)?;
        let surrounding = match vars.kernel {
            Some(kvar) => {
                let f = tape.constant(obs.features.clone());
                let smoothed = tape.conv2d_same(f, kvar)?;
                tape.band_mean(smoothed, &bands)?
            }
            None => {
                let smoothed = conv2d_same(&obs.features, &self.kernel)?;
                tape.constant(band_means(&smoothed, &bands)?)
            }
        };
        let core = tape.constant(obs.core.clone());
        let cat = tape.concat_cols(core, surrounding)?;
        Mlp::forward_on(tape, cat, &vars.mlp)
    }

    /// All trainable tensors in binding order (kernel first when learnable).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        // kernel weights live inside Kernel2D; the optimizer updates a shadow
        // tensor which is written back by the trainer
        self.mlp.params_mut()
    }

    /// Flat named-tensor view (including a small scalar meta block) for
    /// checkpointing.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (
                "meta.kernel_size".to_string(),
                Tensor::scalar(self.kernel.size() as f64),
            ),
            (
                "meta.kernel_mode".to_string(),
                Tensor::scalar(match self.kernel.mode() {
                    KernelMode::Average => 0.0,
                    KernelMode::Laplacian => 1.0,
                    KernelMode::Learnable => 2.0,
                }),
            ),
            ("meta.threshold".to_string(), Tensor::scalar(self.threshold)),
            (
                "meta.final_relu".to_string(),
                Tensor::scalar(f64::from(self.mlp.final_relu)),
            ),
            (
                "kernel.weights".to_string(),
                Tensor::new(
                    &[self.kernel.size(), self.kernel.size()],
                    self.kernel.weights().to_vec(),
                )
                .expect("kernel tensor"),
            ),
        ];
        for (i, layer) in self.mlp.layers.iter().enumerate() {
            out.push((format!("fusion.l{i}.w"), layer.weight.clone()));
            out.push((format!("fusion.l{i}.b"), layer.bias.clone()));
        }
        out
    }

    pub fn from_named(named: &std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            named
                .get(name)
                .map(Tensor::item)
                .ok_or_else(|| Error::Format(format!("checkpoint missing {name}")))
        };
        let size = scalar("meta.kernel_size")? as usize;
        let weights = named
            .get("kernel.weights")
            .ok_or_else(|| Error::Format("checkpoint missing kernel.weights".into()))?
            .data()
            .to_vec();
        let kernel = match scalar("meta.kernel_mode")? as i64 {
            0 => Kernel2D::average(size)?,
            1 => Kernel2D::laplacian(),
            2 => Kernel2D::learnable(size, weights)?,
            m => return Err(Error::Format(format!("unknown kernel mode {m}"))),
        };
        let final_relu = scalar("meta.final_relu")? != 0.0;
        let mut layers = Vec::new();
        for i in 0.. {
            let (Some(w), Some(b)) = (
                named.get(&format!("fusion.l{i}.w")),
                named.get(&format!("fusion.l{i}.b")),
            ) else {
                break;
            };
            layers.push(crate::nn::Linear {
                weight: w.clone(),
                bias: b.clone(),
            });
        }
        if layers.is_empty() {
            return Err(Error::Format("checkpoint has no fusion layers".into()));
        }
        Ok(ContextHead {
            kernel,
            mlp: Mlp { layers, final_relu },
            threshold: scalar("meta.threshold")?,
        })
    }
}

/// Tape handles for one bound context head.
pub struct ContextVars {
    pub mlp: MlpVars,
    pub kernel: Option<Var>,
}

impl ContextVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        if let Some(k) = self.kernel {
            v.push(k);
        }
        v.extend(self.mlp.vars());
        v
    }
}
