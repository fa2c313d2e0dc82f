//! The context-aware instance tracker.
//!
//! Slots carry identities across frames. Each frame a stack of transformer
//! blocks refines a slot query stream that starts from the previous frame's
//! fused state; cross-attention keys are the current frame's fused detections
//! and values are the core detections, so the first block at identity
//! initialization computes exactly `softmax(Q*_{t-1} . Q_t^T / sqrt(C)) .
//! Qhat_t`. The final block's cross-attention matrix is the slot-to-detection
//! assignment: its row-softmax drives the differentiable tracker objective,
//! its Hungarian matching routes masks, classes and surrounding features to
//! slots, and its readout over the core detections yields the refined slot
//! cores that are fused with the aligned surroundings into the next state.
//!
//! Identical twins have (by construction) indistinguishable core embeddings,
//! so any routing keyed on cores alone is blind to them; routing on the
//! context-aware attention similarity is what resolves them.
//!
//! Every sublayer output is slot-indexed, so refined embeddings and emitted
//! outputs are invariant (up to float reassociation) under permuting the
//! current frame's detections.

use crate::context::{ContextEmbeddings, ContextHead, InstanceObservation};
use crate::error::{Error, Result};
use crate::losses::hungarian;
use crate::nn::{LayerNormParams, Linear, Mlp, MlpVars};
use crate::rng::Rng;
use crate::tape::{GradientTape, Var};
use crate::tensor::{cosine, softmax_rows, Tensor};

const LN_EPS: f64 = 1e-5;

/// Which embeddings drive the cross-attention (query state and keys).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySource {
    /// Conventional attention over core embeddings.
    Core,
    /// Context-aware attention over fused embeddings.
    Fused,
}

#[derive(Debug, Clone, Copy)]
pub struct TrackerOptions {
    pub key_source: KeySource,
    /// Hungarian-align surrounding features to slots before fusing. When off,
    /// surrounding features are consumed in raw detection order.
    pub alignment: bool,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        TrackerOptions {
            key_source: KeySource::Fused,
            alignment: true,
        }
    }
}

/// Query/key/value projections of one attention sublayer.
#[derive(Debug, Clone)]
pub struct AttentionProjections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl AttentionProjections {
    pub fn identity(dim: usize) -> Self {
        AttentionProjections {
            query: Linear::identity(dim),
            key: Linear::identity(dim),
            value: Linear::identity(dim),
        }
    }
}

/// Scaled-dot attention `softmax(q k^T / sqrt(C)) v` with learned projections
/// applied first. With identity projections this reproduces the raw
/// context-aware cross-attention readout exactly.
pub fn context_cross_attention(
    prev_fused: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    proj: &AttentionProjections,
) -> Result<Tensor> {
    Ok(attention_with_weights(prev_fused, keys, values, proj)?.0)
}

/// Like [`context_cross_attention`], additionally returning the attention
/// matrix (rows are slots, columns are detections).
pub fn attention_with_weights(
    query: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    proj: &AttentionProjections,
) -> Result<(Tensor, Tensor)> {
    let q = proj.query.forward(query)?;
    let k = proj.key.forward(keys)?;
    let v = proj.value.forward(values)?;
    let c = q.cols() as f64;
    let logits = q.matmul(&k.transpose())?.scale(1.0 / c.sqrt());
    let attn = softmax_rows(&logits);
    Ok((attn.matmul(&v)?, attn))
}

/// One transformer block: cross-attention, self-attention and feed-forward,
/// each wrapped in a residual connection and post layer norm.
#[derive(Debug, Clone)]
pub struct TrackerBlock {
    pub cross: AttentionProjections,
    pub selfattn: AttentionProjections,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_cross: LayerNormParams,
    pub ln_self: LayerNormParams,
    pub ln_ff: LayerNormParams,
}

impl TrackerBlock {
    /// Identity-initialized block: cross-attention projections are identities
    /// (reproducing the raw context-aware readout), while the self-attention
    /// value projection and the feed-forward output layer start at zero so
    /// those sublayers begin as no-ops. A nonzero self-attention value at init
    /// would average together slots with similar hidden rows, which is exactly
    /// the twin-slot confusion the tracker is supposed to resolve.
    fn identity_init(dim: usize, rng: &mut Rng) -> Self {
        let selfattn = AttentionProjections {
            query: Linear::identity(dim),
            key: Linear::identity(dim),
            value: Linear::zeros(dim, dim),
        };
        TrackerBlock {
            cross: AttentionProjections::identity(dim),
            selfattn,
            ff1: Linear::xavier(dim, 4 * dim, rng),
            ff2: Linear::zeros(4 * dim, dim),
            ln_cross: LayerNormParams::unit(dim),
            ln_self: LayerNormParams::unit(dim),
            ln_ff: LayerNormParams::unit(dim),
        }
    }

    /// One block over the slot query stream `x`. Returns the new stream and
    /// the cross-attention matrix.
    fn forward(&self, x: &Tensor, keys: &Tensor, values: &Tensor) -> Result<(Tensor, Tensor)> {
        let (crossed, attn) = attention_with_weights(x, keys, values, &self.cross)?;
        let x = self.ln_cross.forward(&x.add(&crossed)?, LN_EPS);
        let selfed = context_cross_attention(&x, &x, &x, &self.selfattn)?;
        let x = self.ln_self.forward(&x.add(&selfed)?, LN_EPS);
        let hidden = self.ff1.forward(&x)?.map(|v| v.max(0.0));
        let ff = self.ff2.forward(&hidden)?;
        Ok((self.ln_ff.forward(&x.add(&ff)?, LN_EPS), attn))
    }
}

/// All trainable tracker parameters.
#[derive(Debug, Clone)]
pub struct TrackerParams {
    pub blocks: Vec<TrackerBlock>,
    pub channels: usize,
}

impl TrackerParams {
    /// Identity initialization (the default six-block tracker). Only the
    /// feed-forward input layers carry seeded random weights.
    pub fn identity_init(channels: usize, blocks: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).split(7);
        TrackerParams {
            blocks: (0..blocks)
                .map(|_| TrackerBlock::identity_init(channels, &mut rng))
                .collect(),
            channels,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Canonical parameter order (mirrored by `bind`).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for lin in [
                &mut b.cross.query,
                &mut b.cross.key,
                &mut b.cross.value,
                &mut b.selfattn.query,
                &mut b.selfattn.key,
                &mut b.selfattn.value,
                &mut b.ff1,
                &mut b.ff2,
            ] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            for ln in [&mut b.ln_cross, &mut b.ln_self, &mut b.ln_ff] {
                out.push(&mut ln.gain);
                out.push(&mut ln.bias);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for lin in [
                &b.cross.query,
                &b.cross.key,
                &b.cross.value,
                &b.selfattn.query,
                &b.selfattn.key,
                &b.selfattn.value,
                &b.ff1,
                &b.ff2,
            ] {
                out.push(&lin.weight);
                out.push(&lin.bias);
            }
            for ln in [&b.ln_cross, &b.ln_self, &b.ln_ff] {
                out.push(&ln.gain);
                out.push(&ln.bias);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut GradientTape) -> TrackerVars {
        TrackerVars {
            vars: self.params().iter().map(|t| tape.param((*t).clone())).collect(),
            blocks: self.blocks.len(),
        }
    }
}

/// Tape handles for bound tracker parameters, in `params()` order.
pub struct TrackerVars {
    pub vars: Vec<Var>,
    blocks: usize,
}

const TENSORS_PER_BLOCK: usize = 22;

impl TrackerVars {
    fn block(&self, b: usize) -> &[Var] {
        &self.vars[b * TENSORS_PER_BLOCK..(b + 1) * TENSORS_PER_BLOCK]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks
    }
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// Result of Hungarian context alignment for one frame.
#[derive(Debug, Clone)]
pub struct AlignResult {
    /// `slot_detection[i]` is the detection routed to slot `i`.
    pub slot_detection: Vec<usize>,
    /// Surrounding features reordered to slot order.
    pub aligned_surrounding: Tensor,
}

/// Hungarian alignment of detections to slots on cosine similarity between
/// refined slot cores and detection cores. Zero-norm rows get similarity 0.
pub fn align_context(
    refined_core: &Tensor,
    detection_core: &Tensor,
    detection_surrounding: &Tensor,
) -> Result<AlignResult> {
    let n = refined_core.rows();
    if detection_core.rows() != n || detection_surrounding.rows() != n {
        return Err(Error::Shape("align_context row mismatch".into()));
    }
    let mut cost = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for d in 0..n {
            cost.set2(i, d, -cosine(refined_core.row(i), detection_core.row(d)));
        }
    }
    let assignment = hungarian(&cost)?;
    let mut slot_detection = vec![0usize; n];
    for &(slot, det) in assignment.pairs() {
        slot_detection[slot] = det;
    }
    let c = detection_surrounding.cols();
    let mut aligned = Tensor::zeros(&[n, c]);
    for (slot, &det) in slot_detection.iter().enumerate() {
        for ch in 0..c {
            aligned.set2(slot, ch, detection_surrounding.at2(det, ch));
        }
    }
    Ok(AlignResult {
        slot_detection,
        aligned_surrounding: aligned,
    })
}

// ---------------------------------------------------------------------------
// Frame stepping and video tracking
// ---------------------------------------------------------------------------

/// Ordered per-slot state carried across frames.
#[derive(Debug, Clone)]
pub struct TrackState {
    /// Refined core embeddings, slot-ordered.
    pub core: Tensor,
    /// Fused context-aware embeddings, slot-ordered.
    pub fused: Tensor,
}

fn query_and_keys<'a>(
    state: &'a TrackState,
    ctx: &'a ContextEmbeddings,
    core: &'a Tensor,
    opts: &TrackerOptions,
) -> (&'a Tensor, &'a Tensor) {
    match opts.key_source {
        KeySource::Fused => (&state.fused, &ctx.fused),
        KeySource::Core => (&state.core, core),
    }
}

/// Hard slot routing from an attention matrix: Hungarian matching that
/// maximizes the total attention mass assigned to slots.
pub fn route_from_attention(attn: &Tensor) -> Result<Vec<usize>> {
    let n = attn.rows();
    let assignment = hungarian(&attn.scale(-1.0))?;
    let mut slot_detection = vec![0usize; n];
    for &(slot, det) in assignment.pairs() {
        slot_detection[slot] = det;
    }
    Ok(slot_detection)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut out = Tensor::zeros(&[idx.len(), c]);
    for (row, &src) in idx.iter().enumerate() {
        out.data_mut()[row * c..(row + 1) * c].copy_from_slice(t.row(src));
    }
    out
}

/// Advances the tracker by one frame. Returns the new state and the detection
/// index routed to each slot.
pub fn tracker_step(
    state: &TrackState,
    obs: &InstanceObservation,
    ctx: &ContextEmbeddings,
    params: &TrackerParams,
    head: &ContextHead,
    opts: &TrackerOptions,
) -> Result<(TrackState, Vec<usize>)> {
    let (query, keys) = query_and_keys(state, ctx, &obs.core, opts);
    let mut x = query.clone();
    let mut attn = Tensor::zeros(&[0, 0]);
    for block in &params.blocks {
        let (next, a) = block.forward(&x, keys, &obs.core)?;
        x = next;
        attn = a;
    }
    // the final cross-attention matrix is the slot-to-detection assignment:
    // its readout over the raw core detections is the refined slot core, and
    // its Hungarian matching is the hard routing
    let refined = attn.matmul(&obs.core)?;
    let slot_detection = route_from_attention(&attn)?;
    let surrounding = if opts.alignment {
        gather_rows(&ctx.surrounding, &slot_detection)
    } else {
        ctx.surrounding.clone()
    };
    let fused = head.fuse(&refined, &surrounding)?;
    Ok((
        TrackState {
            core: refined,
            fused,
        },
        slot_detection,
    ))
}

/// Ordered tracker outputs for a whole video.
#[derive(Debug, Clone)]
pub struct TrackedVideo {
    /// Per frame: `N x H x W` masks in slot order.
    pub slot_masks: Vec<Tensor>,
    /// Per frame: `N x K` class scores in slot order.
    pub slot_classes: Vec<Tensor>,
    /// Per frame: detection index behind each slot.
    pub slot_detections: Vec<Vec<usize>>,
    /// Per frame: refined core embeddings in slot order.
    pub refined: Vec<Tensor>,
}

/// Copies each routed detection's mask and class row into slot order.
pub fn emit_frame(obs: &InstanceObservation, slot_detection: &[usize]) -> (Tensor, Tensor) {
    let (h, w) = (obs.masks.shape()[1], obs.masks.shape()[2]);
    let k = obs.class_scores.shape()[1];
    let n = slot_detection.len();
    let mut masks = Tensor::zeros(&[n, h, w]);
    let mut classes = Tensor::zeros(&[n, k]);
    for (slot, &det) in slot_detection.iter().enumerate() {
        masks.data_mut()[slot * h * w..(slot + 1) * h * w].copy_from_slice(obs.masks.plane(det));
        classes.data_mut()[slot * k..(slot + 1) * k].copy_from_slice(obs.class_scores.row(det));
    }
    (masks, classes)
}

/// Tracks a full video. Frame one initializes the slots in raw detection
/// order; later frames run the block stack and route detections to slots via
/// Hungarian alignment. Deterministic given parameters and inputs.
pub fn track_video(
    observations: &[&InstanceObservation],
    params: &TrackerParams,
    head: &ContextHead,
    opts: &TrackerOptions,
) -> Result<TrackedVideo> {
    let mut out = TrackedVideo {
        slot_masks: Vec::new(),
        slot_classes: Vec::new(),
        slot_detections: Vec::new(),
        refined: Vec::new(),
    };
    let Some(first) = observations.first() else {
        return Ok(out);
    };
    let ctx0 = head.extract(first)?;
    let n = first.num_instances();
    let identity: Vec<usize> = (0..n).collect();
    let (m0, c0) = emit_frame(first, &identity);
    out.slot_masks.push(m0);
    out.slot_classes.push(c0);
    out.slot_detections.push(identity);
    out.refined.push(first.core.clone());
    let mut state = TrackState {
        core: first.core.clone(),
        fused: ctx0.fused.clone(),
    };
    for obs in &observations[1..] {
        let ctx = head.extract(obs)?;
        let (next, slot_detection) = tracker_step(&state, obs, &ctx, params, head, opts)?;
        let (masks, classes) = emit_frame(obs, &slot_detection);
        out.slot_masks.push(masks);
        out.slot_classes.push(classes);
        out.slot_detections.push(slot_detection);
        out.refined.push(next.core.clone());
        state = next;
    }
    Ok(out)
}

/// Similarity-only baseline tracker: slots follow detections by Hungarian
/// matching on cosine similarity between the slots' last embeddings and the
/// current frame's embeddings (no attention, no refinement).
pub fn embedding_track(
    per_frame_embeddings: &[&Tensor],
    observations: &[&InstanceObservation],
) -> Result<TrackedVideo> {
    let mut out = TrackedVideo {
        slot_masks: Vec::new(),
        slot_classes: Vec::new(),
        slot_detections: Vec::new(),
        refined: Vec::new(),
    };
    let Some(first) = per_frame_embeddings.first() else {
        return Ok(out);
    };
    let n = first.rows();
    let mut state = (*first).clone();
    let identity: Vec<usize> = (0..n).collect();
    let (m0, c0) = emit_frame(observations[0], &identity);
    out.slot_masks.push(m0);
    out.slot_classes.push(c0);
    out.slot_detections.push(identity);
    out.refined.push(state.clone());
    for (emb, obs) in per_frame_embeddings[1..].iter().zip(&observations[1..]) {
        let mut cost = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for d in 0..n {
                cost.set2(i, d, -cosine(state.row(i), emb.row(d)));
            }
        }
        let assignment = hungarian(&cost)?;
        let mut slot_detection = vec![0usize; n];
        for &(slot, det) in assignment.pairs() {
            slot_detection[slot] = det;
        }
        let mut next = Tensor::zeros(&[n, emb.cols()]);
        for (slot, &det) in slot_detection.iter().enumerate() {
            for ch in 0..emb.cols() {
                next.set2(slot, ch, emb.at2(det, ch));
            }
        }
        let (masks, classes) = emit_frame(obs, &slot_detection);
        out.slot_masks.push(masks);
        out.slot_classes.push(classes);
        out.slot_detections.push(slot_detection);
        out.refined.push(next.clone());
        state = next;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tape rollout (tracker training)
// ---------------------------------------------------------------------------

fn linear_on(tape: &mut GradientTape, x: Var, w: Var, b: Var) -> Result<Var> {
    let mm = tape.matmul(x, w)?;
    tape.add_row(mm, b)
}

fn attention_on(
    tape: &mut GradientTape,
    query: Var,
    keys: Var,
    values: Var,
    proj: &[Var],
    scale: f64,
) -> Result<(Var, Var)> {
    let q = linear_on(tape, query, proj[0], proj[1])?;
    let k = linear_on(tape, keys, proj[2], proj[3])?;
    let v = linear_on(tape, values, proj[4], proj[5])?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, scale);
    let attn = tape.softmax_rows(logits)?;
    Ok((tape.matmul(attn, v)?, attn))
}

fn block_on(
    tape: &mut GradientTape,
    x: Var,
    keys: Var,
    values: Var,
    bv: &[Var],
    channels: usize,
) -> Result<(Var, Var)> {
    let scale = 1.0 / (channels as f64).sqrt();
    let (crossed, attn) = attention_on(tape, x, keys, values, &bv[0..6], scale)?;
    let sum = tape.add(x, crossed)?;
    let x = tape.layer_norm(sum, bv[16], bv[17], LN_EPS)?;
    let (selfed, _) = attention_on(tape, x, x, x, &bv[6..12], scale)?;
    let sum = tape.add(x, selfed)?;
    let x = tape.layer_norm(sum, bv[18], bv[19], LN_EPS)?;
    let h = linear_on(tape, x, bv[12], bv[13])?;
    let h = tape.relu(h);
    let ff = linear_on(tape, h, bv[14], bv[15])?;
    let sum = tape.add(x, ff)?;
    Ok((tape.layer_norm(sum, bv[20], bv[21], LN_EPS)?, attn))
}

/// One frame of the tracker on a tape. `state_core`/`state_fused` are the
/// slot-stream nodes from the previous frame. Returns the refined slot cores,
/// the next fused state, the soft slot-to-detection assignment
/// `softmax(refined . core^T / sqrt(C))`, and the hard slot routing.
#[allow(clippy::too_many_arguments)]
pub fn tracker_step_on_tape(
    tape: &mut GradientTape,
    state_core: Var,
    state_fused: Var,
    obs: &InstanceObservation,
    ctx: &ContextEmbeddings,
    tracker_vars: &TrackerVars,
    head_vars: &MlpVars,
    opts: &TrackerOptions,
) -> Result<TapeStep> {
    let channels = obs.channels();
    let core_const = tape.constant(obs.core.clone());
    let fused_const = tape.constant(ctx.fused.clone());
    let (mut x, keys) = match opts.key_source {
        KeySource::Fused => (state_fused, fused_const),
        KeySource::Core => (state_core, core_const),
    };
    let mut attn = x; // replaced in the first block
    for b in 0..tracker_vars.num_blocks() {
        let (next, a) = block_on(tape, x, keys, core_const, tracker_vars.block(b), channels)?;
        x = next;
        attn = a;
    }
    // final attention matrix = soft slot assignment; readout = refined cores
    let refined = tape.matmul(attn, core_const)?;

    // hard routing (non-differentiable) for the surrounding stream
    let slot_detection = route_from_attention(tape.value(attn))?;
    let surrounding = if opts.alignment {
        gather_rows(&ctx.surrounding, &slot_detection)
    } else {
        ctx.surrounding.clone()
    };
    let sur_const = tape.constant(surrounding);
    let cat = tape.concat_cols(refined, sur_const)?;
    let fused = Mlp::forward_on(tape, cat, head_vars)?;
    Ok(TapeStep {
        refined,
        fused,
        soft_assignment: attn,
        slot_detection,
    })
}

/// Nodes produced by one tape-side tracker step.
pub struct TapeStep {
    pub refined: Var,
    pub fused: Var,
    pub soft_assignment: Var,
    pub slot_detection: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Checkpoint naming
// ---------------------------------------------------------------------------

impl TrackerParams {
    /// Flat named-tensor view for checkpointing.
    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        let names = Self::tensor_names(self.blocks.len());
        names.into_iter().zip(self.params().into_iter().cloned()).collect()
    }

    pub fn tensor_names(blocks: usize) -> Vec<String> {
        let mut names = Vec::new();
        for b in 0..blocks {
            for part in [
                "cross.q", "cross.k", "cross.v", "self.q", "self.k", "self.v", "ff1", "ff2",
            ] {
                names.push(format!("tracker.b{b}.{part}.w"));
                names.push(format!("tracker.b{b}.{part}.b"));
            }
            for ln in ["ln_cross", "ln_self", "ln_ff"] {
                names.push(format!("tracker.b{b}.{ln}.gain"));
                names.push(format!("tracker.b{b}.{ln}.bias"));
            }
        }
        names
    }

    /// Rebuilds parameters from named tensors (shape-checked against an
    /// identity-initialized template).
    pub fn from_named(
        channels: usize,
        blocks: usize,
        named: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut params = TrackerParams::identity_init(channels, blocks, 0);
        let names = Self::tensor_names(blocks);
        for (name, slot) in names.iter().zip(params.params_mut()) {
            let tensor = named
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
            if tensor.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, want {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, Scenario, ScenarioConfig, Shape, ObjectSpec};
    use crate::tensor::Kernel2D;

    fn passthrough_head(c: usize) -> ContextHead {
        // first layer sums core and surrounding halves, later layers identity
        let mut mlp = Mlp::zeros(&[2 * c, c, c, c], true);
        for i in 0..c {
            mlp.layers[0].weight.set2(i, i, 1.0);
            mlp.layers[0].weight.set2(c + i, i, 1.0);
        }
        mlp.layers[1] = Linear::identity(c);
        mlp.layers[2] = Linear::identity(c);
        ContextHead::new(Kernel2D::average(3).unwrap(), mlp, 0.5)
    }

    fn distinct_obs(n: usize, c: usize, seed: u64) -> InstanceObservation {
        // positive, well-separated embeddings; trivial masks/classes
        let mut rng = Rng::new(seed);
        let mut core = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for ch in 0..c {
                core.set2(i, ch, 0.2 + rng.uniform());
            }
            core.set2(i, i % c, 3.0 + i as f64);
        }
        let (h, w) = (n * 3 + 2, 5);
        let mut masks = Tensor::zeros(&[n, h, w]);
        for i in 0..n {
            masks.set3(i, i * 3 + 1, 2, 1.0);
        }
        InstanceObservation {
            features: Tensor::filled(&[h, w, c], 0.1),
            core,
            masks,
            class_scores: Tensor::zeros(&[n, 2]),
        }
    }

    #[test]
    fn attention_with_dominant_query_reads_the_matching_value_row() {
        let c = 4;
        let proj = AttentionProjections::identity(c);
        // query row 0 equals key row 1 scaled large; other keys orthogonal
        let mut keys = Tensor::zeros(&[3, c]);
        keys.set2(0, 0, 1.0);
        keys.set2(1, 1, 1.0);
        keys.set2(2, 2, 1.0);
        let mut query = Tensor::zeros(&[1, c]);
        query.set2(0, 1, 60.0);
        let mut values = Tensor::zeros(&[3, c]);
        for ch in 0..c {
            values.set2(0, ch, 1.0);
            values.set2(1, ch, 5.0 + ch as f64);
            values.set2(2, ch, -2.0);
        }
        let out = context_cross_attention(&query, &keys, &values, &proj).unwrap();
        for ch in 0..c {
            assert!((out.at2(0, ch) - values.at2(1, ch)).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_with_identical_keys_averages_the_values() {
        let c = 3;
        let proj = AttentionProjections::identity(c);
        let keys = Tensor::filled(&[4, c], 0.7);
        let query = Tensor::filled(&[2, c], 1.0);
        let mut values = Tensor::zeros(&[4, c]);
        for i in 0..4 {
            for ch in 0..c {
                values.set2(i, ch, (i * c + ch) as f64);
            }
        }
        let out = context_cross_attention(&query, &keys, &values, &proj).unwrap();
        for ch in 0..c {
            let mean = (0..4).map(|i| values.at2(i, ch)).sum::<f64>() / 4.0;
            assert!((out.at2(0, ch) - mean).abs() < 1e-12);
            assert!((out.at2(1, ch) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_with_single_instance_returns_that_row() {
        let c = 5;
        let proj = AttentionProjections::identity(c);
        let keys = Tensor::filled(&[1, c], -3.0);
        let query = Tensor::filled(&[1, c], 9.0);
        let values = Tensor::new(&[1, c], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let out = context_cross_attention(&query, &keys, &values, &proj).unwrap();
        assert_eq!(out.data(), values.data());
    }

    #[test]
    fn attention_outputs_stay_in_the_convex_hull_of_values() {
        let mut rng = Rng::new(40);
        let c = 4;
        let proj = AttentionProjections::identity(c);
        for _ in 0..50 {
            let query = Tensor::new(&[3, c], (0..3 * c).map(|_| rng.normal()).collect()).unwrap();
            let keys = Tensor::new(&[5, c], (0..5 * c).map(|_| rng.normal()).collect()).unwrap();
            let values = Tensor::new(&[5, c], (0..5 * c).map(|_| rng.normal()).collect()).unwrap();
            let out = context_cross_attention(&query, &keys, &values, &proj).unwrap();
            for ch in 0..c {
                let lo = (0..5).map(|i| values.at2(i, ch)).fold(f64::INFINITY, f64::min);
                let hi = (0..5)
                    .map(|i| values.at2(i, ch))
                    .fold(f64::NEG_INFINITY, f64::max);
                for r in 0..3 {
                    let v = out.at2(r, ch);
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn align_identity_when_orders_agree() {
        let obs = distinct_obs(4, 6, 1);
        let sur = Tensor::filled(&[4, 6], 0.5);
        let align = align_context(&obs.core, &obs.core, &sur).unwrap();
        assert_eq!(align.slot_detection, vec![0, 1, 2, 3]);
        assert_eq!(align.aligned_surrounding.data(), sur.data());
    }

    #[test]
    fn align_recovers_planted_permutations_for_small_n() {
        let mut rng = Rng::new(2);
        for n in 2..=6usize {
            let c = 8;
            // orthonormal-ish rows: random rotation of the identity basis
            let mut rows = Vec::new();
            for i in 0..n {
                let mut v = vec![0.0; c];
                v[i] = 1.0;
                for x in v.iter_mut() {
                    *x += 0.01 * rng.normal();
                }
                rows.push(v);
            }
            let refined =
                Tensor::new(&[n, c], rows.iter().flatten().copied().collect()).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            // detection d = refined row perm[d]
            let det_rows: Vec<&[f64]> = perm.iter().map(|&i| &rows[i][..]).collect();
            let detections = Tensor::from_rows(&det_rows).unwrap();
            let sur = Tensor::new(&[n, 2], (0..2 * n).map(|v| v as f64).collect()).unwrap();
            let align = align_context(&refined, &detections, &sur).unwrap();
            // slot i must pick the detection whose row is refined row i
            for (slot, &det) in align.slot_detection.iter().enumerate() {
                assert_eq!(perm[det], slot);
            }
            // round trip: reading aligned surroundings back through the map
            for (slot, &det) in align.slot_detection.iter().enumerate() {
                assert_eq!(
                    align.aligned_surrounding.row(slot),
                    sur.row(det)
                );
            }
        }
    }

    #[test]
    fn identical_frames_keep_slot_order() {
        let c = 6;
        let n = 4;
        let obs = distinct_obs(n, c, 3);
        let head = passthrough_head(c);
        let params = TrackerParams::identity_init(c, 6, 0);
        let opts = TrackerOptions::default();
        let tracked = track_video(&[&obs, &obs, &obs], &params, &head, &opts).unwrap();
        for dets in &tracked.slot_detections {
            assert_eq!(dets, &vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn single_instance_video_is_trivially_consistent() {
        let c = 4;
        let obs = distinct_obs(1, c, 4);
        let head = passthrough_head(c);
        let params = TrackerParams::identity_init(c, 6, 0);
        let tracked =
            track_video(&[&obs, &obs], &params, &head, &TrackerOptions::default()).unwrap();
        assert_eq!(tracked.slot_detections, vec![vec![0], vec![0]]);
    }

    #[test]
    fn empty_video_gives_empty_result() {
        let c = 4;
        let head = passthrough_head(c);
        let params = TrackerParams::identity_init(c, 2, 0);
        let tracked = track_video(&[], &params, &head, &TrackerOptions::default()).unwrap();
        assert!(tracked.slot_masks.is_empty());
    }

    fn crossing_scenario(seed: u64) -> Scenario {
        let config = ScenarioConfig {
            height: 24,
            width: 32,
            channels: 8,
            classes: 2,
            frames: 6,
            objects: vec![
                ObjectSpec {
                    shape: Shape::Disc { radius: 2.0 },
                    start: (6.0, 4.0),
                    velocity: (0.0, 4.0),
                    class: 0,
                    appearance: None,
                },
                ObjectSpec {
                    shape: Shape::Disc { radius: 2.0 },
                    start: (16.0, 26.0),
                    velocity: (0.0, -4.0),
                    class: 1,
                    appearance: None,
                },
            ],
            twin_groups: vec![],
            occlusions: vec![],
            noise_sigma: 0.03,
            pos_scale: 0.02,
            appearance_scale: 2.0,
            seed,
        };
        generate_scenario(&config).unwrap()
    }

    #[test]
    fn slots_follow_identities_when_objects_swap_positions() {
        // distinct embeddings, crossing trajectories; oracle = generator ids
        let s = crossing_scenario(11);
        let head = passthrough_head(8);
        let params = TrackerParams::identity_init(8, 6, 0);
        let obs: Vec<&InstanceObservation> = s.frames.iter().map(|f| &f.observation).collect();
        let tracked =
            track_video(&obs, &params, &head, &TrackerOptions::default()).unwrap();
        // slot i starts holding object s.frames[0].detection_object[i]
        let owner: Vec<usize> = s.frames[0].detection_object.clone();
        for (t, dets) in tracked.slot_detections.iter().enumerate() {
            for (slot, &det) in dets.iter().enumerate() {
                assert_eq!(
                    s.frames[t].detection_object[det], owner[slot],
                    "frame {t} slot {slot}"
                );
            }
        }
    }

    #[test]
    fn tracking_is_deterministic() {
        let s = crossing_scenario(13);
        let head = passthrough_head(8);
        let params = TrackerParams::identity_init(8, 6, 9);
        let obs: Vec<&InstanceObservation> = s.frames.iter().map(|f| &f.observation).collect();
        let a = track_video(&obs, &params, &head, &TrackerOptions::default()).unwrap();
        let b = track_video(&obs, &params, &head, &TrackerOptions::default()).unwrap();
        for (ma, mb) in a.slot_masks.iter().zip(&b.slot_masks) {
            assert_eq!(ma.data(), mb.data());
        }
        assert_eq!(a.slot_detections, b.slot_detections);
    }

    #[test]
    fn refined_outputs_are_equivariant_to_detection_shuffling() {
        let s = crossing_scenario(17);
        let head = passthrough_head(8);
        let params = TrackerParams::identity_init(8, 6, 0);
        let obs: Vec<&InstanceObservation> = s.frames.iter().map(|f| &f.observation).collect();
        let base = track_video(&obs, &params, &head, &TrackerOptions::default()).unwrap();

        // permute frame 1+ detections
        let mut rng = Rng::new(5);
        let shuffled: Vec<InstanceObservation> = s
            .frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let o = &f.observation;
                if t == 0 {
                    return o.clone();
                }
                let n = o.num_instances();
                let mut perm: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut perm);
                let (h, w) = o.grid();
                let c = o.channels();
                let k = o.class_scores.shape()[1];
                let mut core = Tensor::zeros(&[n, c]);
                let mut masks = Tensor::zeros(&[n, h, w]);
                let mut classes = Tensor::zeros(&[n, k]);
                for (new, &old) in perm.iter().enumerate() {
                    core.data_mut()[new * c..(new + 1) * c].copy_from_slice(o.core.row(old));
                    masks.data_mut()[new * h * w..(new + 1) * h * w]
                        .copy_from_slice(o.masks.plane(old));
                    classes.data_mut()[new * k..(new + 1) * k]
                        .copy_from_slice(o.class_scores.row(old));
                }
                InstanceObservation {
                    features: o.features.clone(),
                    core,
                    masks,
                    class_scores: classes,
                }
            })
            .collect();
        let refs: Vec<&InstanceObservation> = shuffled.iter().collect();
        let permuted = track_video(&refs, &params, &head, &TrackerOptions::default()).unwrap();
        for (a, b) in base.refined.iter().zip(&permuted.refined) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
        // emitted masks are identical too: slots route to the same pixels
        for (a, b) in base.slot_masks.iter().zip(&permuted.slot_masks) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tape_rollout_matches_pure_rollout() {
        let s = crossing_scenario(19);
        let head = passthrough_head(8);
        let params = TrackerParams::identity_init(8, 3, 21);
        let opts = TrackerOptions::default();
        let obs: Vec<&InstanceObservation> = s.frames.iter().map(|f| &f.observation).collect();
        let pure = track_video(&obs, &params, &head, &opts).unwrap();

        let mut tape = GradientTape::new();
        let tracker_vars = params.bind(&mut tape);
        let head_vars = head.mlp.bind_frozen(&mut tape);
        let ctx0 = head.extract(obs[0]).unwrap();
        let mut state_core = tape.constant(obs[0].core.clone());
        let mut state_fused = tape.constant(ctx0.fused.clone());
        for (t, o) in obs.iter().enumerate().skip(1) {
            let ctx = head.extract(o).unwrap();
            let step = tracker_step_on_tape(
                &mut tape,
                state_core,
                state_fused,
                o,
                &ctx,
                &tracker_vars,
                &head_vars,
                &opts,
            )
            .unwrap();
            assert_eq!(step.slot_detection, pure.slot_detections[t]);
            for (a, b) in tape.value(step.refined).data().iter().zip(pure.refined[t].data()) {
                assert!((a - b).abs() < 1e-10);
            }
            state_core = step.refined;
            state_fused = step.fused;
        }
    }
}
