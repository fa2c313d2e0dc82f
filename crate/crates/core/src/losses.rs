//! Supervision terms: bipartite set matching, instance segmentation losses,
//! the cross-frame contrastive losses over fused embeddings and prototypes,
//! and the composed segmenter/tracker objectives.
//!
//! The Hungarian solver is exact (shortest augmenting paths with potentials)
//! and deterministic: among cost-equal optima it returns the assignment that
//! is lexicographically smallest in (source, target) order, which is what the
//! brute-force oracle in the tests enumerates.

use crate::context::InstanceObservation;
use crate::error::{Error, Result};
use crate::scenario::GroundTruthTrack;
use crate::tape::{pair_lse_forward, GradientTape, Var};
use crate::tensor::{cosine, softmax_rows, Tensor};

// ---------------------------------------------------------------------------
// Assignments and the Hungarian solver
// ---------------------------------------------------------------------------

/// Injective partial map from source indices to target indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn from_pairs(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut targets: Vec<usize> = pairs.iter().map(|&(_, t)| t).collect();
        targets.sort_unstable();
        if targets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("assignment is not injective".into()));
        }
        Ok(Assignment { pairs })
    }

    pub fn empty() -> Self {
        Assignment { pairs: Vec::new() }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn target_of(&self, source: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(s, _)| s == source)
            .map(|&(_, t)| t)
    }

    pub fn source_of(&self, target: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(_, t)| t == target)
            .map(|&(s, _)| s)
    }

    /// Total cost of this assignment under a cost matrix.
    pub fn cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(s, t)| cost.at2(s, t)).sum()
    }
}

/// Minimum cost of matching all rows when `rows <= cols` (shortest augmenting
/// paths with potentials).
fn jv_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    if n == 0 {
        return 0.0;
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m + 1];
    let mut assigned = vec![usize::MAX; m + 1]; // column -> row, column m is virtual
    for row in 0..n {
        assigned[m] = row;
        let mut j0 = m;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut way = vec![m; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = m;
            for j in 0..m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0][j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned[j0] == usize::MAX {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned[j0] = assigned[j1];
            j0 = j1;
            if j0 == m {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 0..m {
        if assigned[j] != usize::MAX {
            total += cost[assigned[j]][j];
        }
    }
    total
}

/// Optimal cost of matching min(|sources|, |targets|) pairs on a submatrix.
fn sub_opt_cost(cost: &Tensor, sources: &[usize], targets: &[usize]) -> f64 {
    if sources.is_empty() || targets.is_empty() {
        return 0.0;
    }
    let build = |rows: &[usize], cols: &[usize], transposed: bool| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|&r| {
                cols.iter()
                    .map(|&c| {
                        if transposed {
                            cost.at2(c, r)
                        } else {
                            cost.at2(r, c)
                        }
                    })
                    .collect()
            })
            .collect()
    };
    if sources.len() <= targets.len() {
        jv_min_cost(&build(sources, targets, false))
    } else {
        jv_min_cost(&build(targets, sources, true))
    }
}

/// Globally optimal injective assignment of min(A, B) pairs for an `A x B`
/// cost matrix. Ties are broken by lowest source index first, then lowest
/// target index. An empty matrix yields an empty assignment.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (a, b) = match cost.shape() {
        [a, b] => (*a, *b),
        s => return Err(Error::Shape(format!("hungarian on shape {s:?}"))),
    };
    if a == 0 || b == 0 {
        return Ok(Assignment::empty());
    }
    if !cost.is_finite() {
        return Err(Error::Config("hungarian requires finite costs".into()));
    }
    let max_abs = cost.data().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    let eps = 1e-9 * (1.0 + max_abs * a.min(b) as f64);

    let mut targets: Vec<usize> = (0..b).collect();
    let mut pairs = Vec::with_capacity(a.min(b));
    for s in 0..a {
        let rest: Vec<usize> = (s + 1..a).collect();
        let residual = {
            let mut all = vec![s];
            all.extend_from_slice(&rest);
            sub_opt_cost(cost, &all, &targets)
        };
        // a source may stay unmatched only when sources still outnumber targets
        let may_drop = rest.len() + 1 > targets.len();
        let mut chosen = None;
        for (pos, &t) in targets.iter().enumerate() {
            let remaining: Vec<usize> = targets
                .iter()
                .copied()
                .filter(|&x| x != t)
                .collect();
            let cand = cost.at2(s, t) + sub_opt_cost(cost, &rest, &remaining);
            if cand <= residual + eps {
                chosen = Some((pos, t));
                break;
            }
        }
        match chosen {
            Some((pos, t)) => {
                pairs.push((s, t));
                targets.remove(pos);
                if targets.is_empty() {
                    break;
                }
            }
            None => {
                if !may_drop {
                    // numerically cornered: fall back to the cheapest candidate
                    let (&t, _) = targets
                        .iter()
                        .zip(targets.iter())
                        .min_by(|x, y| {
                            cost.at2(s, *x.0)
                                .partial_cmp(&cost.at2(s, *y.0))
                                .unwrap()
                        })
                        .unwrap();
                    let pos = targets.iter().position(|&x| x == t).unwrap();
                    pairs.push((s, t));
                    targets.remove(pos);
                }
                // otherwise source s is dropped
            }
        }
    }
    Assignment::from_pairs(pairs)
}

// ---------------------------------------------------------------------------
// Loss weights and scalar loss primitives
// ---------------------------------------------------------------------------

/// Weights balancing the supervision terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub ctx: f64,
    pub pcc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            bce: 5.0,
            dice: 5.0,
            ctx: 2.0,
            pcc: 2.0,
        }
    }
}

/// Per-pixel mean binary cross-entropy between a soft mask and a 0/1 target.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> f64 {
    crate::tape::bce_mean_forward(pred, target)
}

/// Soft Dice loss with smoothing 1 in numerator and denominator.
pub fn dice_loss(pred: &[f64], target: &[f64]) -> f64 {
    crate::tape::dice_forward(pred, target, 1.0)
}

/// Softmax cross-entropy of a logit row against a class index.
pub fn ce_loss(logits: &[f64], label: usize) -> f64 {
    crate::tape::ce_forward(logits, label)
}

fn class_probability(logits: &[f64], label: usize) -> f64 {
    let t = Tensor::new(&[1, logits.len()], logits.to_vec()).expect("logit row");
    softmax_rows(&t).data()[label]
}

/// Pairwise matching cost: negative class probability plus full-mask BCE and
/// Dice, each weighted.
pub fn matching_cost(
    pred_class: &[f64],
    pred_mask: &[f64],
    gt_class: usize,
    gt_mask: &[f64],
    w: &LossWeights,
) -> f64 {
    w.cls * (-class_probability(pred_class, gt_class))
        + w.bce * bce_loss(pred_mask, gt_mask)
        + w.dice * dice_loss(pred_mask, gt_mask)
}

/// Instance supervision: cross-entropy plus weighted BCE and Dice.
pub fn instance_loss(
    pred_class: &[f64],
    pred_mask: &[f64],
    gt_class: usize,
    gt_mask: &[f64],
    w: &LossWeights,
) -> f64 {
    w.cls * ce_loss(pred_class, gt_class)
        + w.bce * bce_loss(pred_mask, gt_mask)
        + w.dice * dice_loss(pred_mask, gt_mask)
}

// ---------------------------------------------------------------------------
// Frame-level prediction views and set losses
// ---------------------------------------------------------------------------

/// Borrowed view of one frame's predictions: class scores `N x K` and soft
/// masks `N x H x W`. Works for both raw detections and ordered slot outputs.
#[derive(Copy, Clone)]
pub struct FrameRef<'a> {
    pub class_scores: &'a Tensor,
    pub masks: &'a Tensor,
}

impl<'a> FrameRef<'a> {
    pub fn num_rows(&self) -> usize {
        self.class_scores.shape()[0]
    }
}

impl<'a> From<&'a InstanceObservation> for FrameRef<'a> {
    fn from(obs: &'a InstanceObservation) -> Self {
        FrameRef {
            class_scores: &obs.class_scores,
            masks: &obs.masks,
        }
    }
}

/// Frame-wise optimal matching of visible ground-truth tracks to prediction
/// rows. Returns, per track, the matched row index (`None` when the track is
/// invisible at `t` or there were not enough rows).
pub fn frame_assignment(
    frame: FrameRef,
    tracks: &[GroundTruthTrack],
    t: usize,
    w: &LossWeights,
) -> Result<Vec<Option<usize>>> {
    let visible: Vec<usize> = (0..tracks.len())
        .filter(|&k| tracks[k].visible_at(t).is_some())
        .collect();
    let n = frame.num_rows();
    let mut out = vec![None; tracks.len()];
    if visible.is_empty() || n == 0 {
        return Ok(out);
    }
    let mut cost = Tensor::zeros(&[visible.len(), n]);
    for (r, &k) in visible.iter().enumerate() {
        let gt_mask = tracks[k].visible_at(t).unwrap();
        for d in 0..n {
            cost.set2(
                r,
                d,
                matching_cost(
                    frame.class_scores.row(d),
                    frame.masks.plane(d),
                    tracks[k].class,
                    gt_mask.data(),
                    w,
                ),
            );
        }
    }
    let assignment = hungarian(&cost)?;
    for &(r, d) in assignment.pairs() {
        out[visible[r]] = Some(d);
    }
    Ok(out)
}

/// Video instance segmentation loss: per-frame independent matching, then the
/// instance loss summed over matched pairs and frames.
pub fn vis_loss(frames: &[FrameRef], tracks: &[GroundTruthTrack], w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (t, frame) in frames.iter().enumerate() {
        let matched = frame_assignment(*frame, tracks, t, w)?;
        for (k, slot) in matched.iter().enumerate() {
            if let (Some(d), Some(gt_mask)) = (slot, tracks[k].visible_at(t)) {
                total += instance_loss(
                    frame.class_scores.row(*d),
                    frame.masks.plane(*d),
                    tracks[k].class,
                    gt_mask.data(),
                    w,
                );
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Contrastive losses
// ---------------------------------------------------------------------------

/// Options shared by the embedding-level contrastive losses.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOptions {
    /// Cosine-normalize embeddings before taking dot products (off by
    /// default: similarities are raw dot products).
    pub normalize: bool,
    /// Also draw negatives from the anchor's own frame (off by default:
    /// positives and negatives come from other frames only).
    pub same_frame_negatives: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        ContrastiveOptions {
            normalize: false,
            same_frame_negatives: false,
        }
    }
}

/// Diagnostics of one contrastive-loss evaluation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContrastiveStats {
    pub total: f64,
    pub anchors: usize,
    pub skipped_no_positives: usize,
}

/// Single-anchor contrastive loss `log(1 + sum exp(v.k- - v.k+))`.
/// Returns `None` when the positive set is empty (the caller skips and counts
/// the instance); an empty negative set gives `Some(0.0)`.
pub fn contrastive_emb_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    normalize: bool,
) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let sim = |k: &[f64]| -> f64 {
        if normalize {
            cosine(anchor, k)
        } else {
            anchor.iter().zip(k).map(|(&a, &b)| a * b).sum()
        }
    };
    let dpos: Vec<f64> = positives.iter().map(|k| sim(k)).collect();
    let dneg: Vec<f64> = negatives.iter().map(|k| sim(k)).collect();
    Some(pair_lse_forward(&dpos, &dneg))
}

/// Cross-frame contrastive loss over per-frame embedding matrices.
///
/// `assignments[t][k]` is the row of track `k` in frame `t`'s embedding matrix
/// (`None` when invisible). For each visible (frame, track) anchor, positives
/// are the same track's rows in other frames and negatives the other tracks'
/// rows in those frames. Tracks visible in a single frame contribute 0.
pub fn cross_frame_contrastive(
    embeddings: &[&Tensor],
    assignments: &[Vec<Option<usize>>],
    opts: ContrastiveOptions,
) -> ContrastiveStats {
    let frames = embeddings.len();
    debug_assert_eq!(frames, assignments.len());
    let tracks = assignments.first().map_or(0, Vec::len);
    let mut stats = ContrastiveStats::default();
    for t in 0..frames {
        for k in 0..tracks {
            let Some(anchor_row) = assignments[t][k] else {
                continue;
            };
            let anchor = embeddings[t].row(anchor_row);
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (t2, frame_assign) in assignments.iter().enumerate() {
                if t2 == t {
                    if opts.same_frame_negatives {
                        for (k2, row) in frame_assign.iter().enumerate() {
                            if k2 != k {
                                if let Some(r) = row {
                                    negatives.push(embeddings[t2].row(*r));
                                }
                            }
                        }
                    }
                    continue;
                }
                for (k2, row) in frame_assign.iter().enumerate() {
                    let Some(r) = row else { continue };
                    if k2 == k {
                        positives.push(embeddings[t2].row(*r));
                    } else {
                        negatives.push(embeddings[t2].row(*r));
                    }
                }
            }
            stats.anchors += 1;
            match contrastive_emb_loss(anchor, &positives, &negatives, opts.normalize) {
                Some(v) => stats.total += v,
                None => stats.skipped_no_positives += 1,
            }
        }
    }
    stats
}

/// Instance-wise prototypes: mean of the feature map over each binarized mask.
/// Empty masks give zero rows.
pub fn pcc_prototypes(features: &Tensor, masks: &Tensor, threshold: f64) -> Result<Tensor> {
    let (h, w, c) = match features.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Shape(format!("prototype features shape {s:?}"))),
    };
    let n = match masks.shape() {
        [n, hh, ww] if *hh == h && *ww == w => *n,
        s => return Err(Error::Shape(format!("prototype masks shape {s:?}"))),
    };
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let plane = masks.plane(i);
        let mut count = 0usize;
        let mut acc = vec![0.0; c];
        for y in 0..h {
            for x in 0..w {
                if plane[y * w + x] > threshold {
                    count += 1;
                    for ch in 0..c {
                        acc[ch] += features.at3(y, x, ch);
                    }
                }
            }
        }
        if count > 0 {
            for ch in 0..c {
                out.set2(i, ch, acc[ch] / count as f64);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Composed objectives
// ---------------------------------------------------------------------------

/// Itemized segmenter objective.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterLoss {
    pub vis: f64,
    pub ctx: ContrastiveStats,
    pub pcc: ContrastiveStats,
    pub total: f64,
}

/// `L = L_vis + w.ctx * L_ctx + w.pcc * L_pcc` over one clip. The fused
/// embeddings come from the context head; prototypes are built from the
/// frame's own features and binarized masks.
pub fn segmenter_objective(
    observations: &[&InstanceObservation],
    fused: &[&Tensor],
    tracks: &[GroundTruthTrack],
    frame_indices: &[usize],
    w: &LossWeights,
    opts: ContrastiveOptions,
    mask_threshold: f64,
) -> Result<SegmenterLoss> {
    debug_assert_eq!(observations.len(), fused.len());
    debug_assert_eq!(observations.len(), frame_indices.len());
    let mut assignments = Vec::with_capacity(observations.len());
    for (obs, &t) in observations.iter().zip(frame_indices) {
        assignments.push(frame_assignment(FrameRef::from(*obs), tracks, t, w)?);
    }
    let frames: Vec<FrameRef> = observations.iter().map(|o| FrameRef::from(*o)).collect();
    let mut vis = 0.0;
    for ((frame, assign), &t) in frames.iter().zip(&assignments).zip(frame_indices) {
        for (k, slot) in assign.iter().enumerate() {
            if let (Some(d), Some(gt_mask)) = (slot, tracks[k].visible_at(t)) {
                vis += instance_loss(
                    frame.class_scores.row(*d),
                    frame.masks.plane(*d),
                    tracks[k].class,
                    gt_mask.data(),
                    w,
                );
            }
        }
    }
    let ctx = cross_frame_contrastive(fused, &assignments, opts);
    let protos: Vec<Tensor> = observations
        .iter()
        .map(|o| pcc_prototypes(&o.features, &o.masks, mask_threshold))
        .collect::<Result<_>>()?;
    let proto_refs: Vec<&Tensor> = protos.iter().collect();
    let pcc = cross_frame_contrastive(&proto_refs, &assignments, opts);
    let total = vis + w.ctx * ctx.total + w.pcc * pcc.total;
    Ok(SegmenterLoss {
        vis,
        ctx,
        pcc,
        total,
    })
}

/// Video-level first-appearance matching: each ground-truth track is assigned
/// a prediction slot by Hungarian matching on the matching cost evaluated at
/// the track's first visible frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstAppearanceMatch {
    /// Slot index per track (`None` for unmatched tracks).
    pub slot_of_track: Vec<Option<usize>>,
    /// Tracks left without a slot (more tracks than slots).
    pub unmatched: Vec<usize>,
}

pub fn first_appearance_match(
    frames: &[FrameRef],
    tracks: &[GroundTruthTrack],
    w: &LossWeights,
) -> Result<FirstAppearanceMatch> {
    let slots = frames.first().map_or(0, |f| f.num_rows());
    let mut cost = Tensor::zeros(&[tracks.len(), slots]);
    for (k, track) in tracks.iter().enumerate() {
        let f = track.first_appearance;
        if f >= frames.len() {
            return Err(Error::Config(format!(
                "track {k} first appears at frame {f}, clip has {}",
                frames.len()
            )));
        }
        let gt_mask = track.visible_at(f).ok_or_else(|| {
            Error::Config(format!("track {k} invisible at its first appearance"))
        })?;
        for s in 0..slots {
            cost.set2(
                k,
                s,
                matching_cost(
                    frames[f].class_scores.row(s),
                    frames[f].masks.plane(s),
                    track.class,
                    gt_mask.data(),
                    w,
                ),
            );
        }
    }
    let assignment = hungarian(&cost)?;
    let mut slot_of_track = vec![None; tracks.len()];
    for &(k, s) in assignment.pairs() {
        slot_of_track[k] = Some(s);
    }
    let unmatched = (0..tracks.len())
        .filter(|&k| slot_of_track[k].is_none())
        .collect();
    Ok(FirstAppearanceMatch {
        slot_of_track,
        unmatched,
    })
}

/// Tracker objective: instance loss summed over frames and tracks, with every
/// track pinned to the single video-level slot chosen at its first appearance.
/// Only frames where the track is visible contribute.
pub fn tracker_objective_with(
    frames: &[FrameRef],
    tracks: &[GroundTruthTrack],
    w: &LossWeights,
    sigma: &FirstAppearanceMatch,
) -> f64 {
    let mut total = 0.0;
    for (t, frame) in frames.iter().enumerate() {
        for (k, track) in tracks.iter().enumerate() {
            let (Some(slot), Some(gt_mask)) = (sigma.slot_of_track[k], track.visible_at(t)) else {
                continue;
            };
            total += instance_loss(
                frame.class_scores.row(slot),
                frame.masks.plane(slot),
                track.class,
                gt_mask.data(),
                w,
            );
        }
    }
    total
}

/// Convenience wrapper computing the first-appearance matching internally.
pub fn tracker_objective(
    frames: &[FrameRef],
    tracks: &[GroundTruthTrack],
    w: &LossWeights,
) -> Result<f64> {
    let sigma = first_appearance_match(frames, tracks, w)?;
    Ok(tracker_objective_with(frames, tracks, w, &sigma))
}

// ---------------------------------------------------------------------------
// Tape-side contrastive loss (for training the context head)
// ---------------------------------------------------------------------------

/// Builds the cross-frame contrastive loss on a tape from per-frame embedding
/// nodes. Mirrors [`cross_frame_contrastive`]; returns the scalar node plus
/// skip diagnostics.
pub fn cross_frame_contrastive_on_tape(
    tape: &mut GradientTape,
    embeddings: &[Var],
    assignments: &[Vec<Option<usize>>],
    opts: ContrastiveOptions,
) -> Result<(Var, ContrastiveStats)> {
    let frames = embeddings.len();
    let tracks = assignments.first().map_or(0, Vec::len);
    let normed: Vec<Var> = if opts.normalize {
        embeddings
            .iter()
            .map(|&e| tape.row_normalize(e))
            .collect::<Result<_>>()?
    } else {
        embeddings.to_vec()
    };
    let mut terms = Vec::new();
    let mut stats = ContrastiveStats::default();
    for t in 0..frames {
        for k in 0..tracks {
            let Some(anchor_row) = assignments[t][k] else {
                continue;
            };
            stats.anchors += 1;
            let anchor = tape.select_rows(normed[t], &[anchor_row])?;
            let anchor_t = tape.transpose(anchor)?;
            let mut pos_parts = Vec::new();
            let mut neg_parts = Vec::new();
            for t2 in 0..frames {
                let same = t2 == t;
                if same && !opts.same_frame_negatives {
                    continue;
                }
                let mut pos_idx = Vec::new();
                let mut neg_idx = Vec::new();
                for (k2, row) in assignments[t2].iter().enumerate() {
                    let Some(r) = row else { continue };
                    if same {
                        if k2 != k {
                            neg_idx.push(*r);
                        }
                    } else if k2 == k {
                        pos_idx.push(*r);
                    } else {
                        neg_idx.push(*r);
                    }
                }
                let sims = tape.matmul(normed[t2], anchor_t)?; // N x 1
                if !pos_idx.is_empty() {
                    pos_parts.push(tape.select_rows(sims, &pos_idx)?);
                }
                if !neg_idx.is_empty() {
                    neg_parts.push(tape.select_rows(sims, &neg_idx)?);
                }
            }
            if pos_parts.is_empty() {
                stats.skipped_no_positives += 1;
                continue;
            }
            let pos = tape.stack_rows(&pos_parts)?;
            let term = if neg_parts.is_empty() {
                tape.constant(Tensor::scalar(0.0))
            } else {
                let neg = tape.stack_rows(&neg_parts)?;
                tape.pair_lse(pos, neg)?
            };
            terms.push(term);
        }
    }
    let total = tape.sum_scalars(&terms)?;
    stats.total = tape.value(total).item();
    Ok((total, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::scenario::Mask;

    // ---- hungarian ----------------------------------------------------------

    /// Brute-force oracle: enumerates injective assignments in source-major
    /// lexicographic order (unmatched ranks after every real target) and keeps
    /// the first strictly best one.
    fn brute_force(cost: &Tensor) -> (f64, Vec<(usize, usize)>) {
        let (a, b) = (cost.shape()[0], cost.shape()[1]);
        let want = a.min(b);
        let mut best_cost = f64::INFINITY;
        let mut best: Vec<(usize, usize)> = Vec::new();
        let mut current: Vec<(usize, usize)> = Vec::new();
        fn recurse(
            cost: &Tensor,
            s: usize,
            a: usize,
            b: usize,
            want: usize,
            used: &mut Vec<bool>,
            current: &mut Vec<(usize, usize)>,
            best_cost: &mut f64,
            best: &mut Vec<(usize, usize)>,
        ) {
            if s == a {
                if current.len() == want {
                    let total: f64 = current.iter().map(|&(r, c)| cost.at2(r, c)).sum();
                    if total < *best_cost - 1e-12 {
                        *best_cost = total;
                        *best = current.clone();
                    }
                }
                return;
            }
            for t in 0..b {
                if !used[t] {
                    used[t] = true;
                    current.push((s, t));
                    recurse(cost, s + 1, a, b, want, used, current, best_cost, best);
                    current.pop();
                    used[t] = false;
                }
            }
            // the skip branch ranks last
            if a - s - 1 + current.len() >= want {
                recurse(cost, s + 1, a, b, want, used, current, best_cost, best);
            }
        }
        let mut used = vec![false; b];
        recurse(
            cost,
            0,
            a,
            b,
            want,
            &mut used,
            &mut current,
            &mut best_cost,
            &mut best,
        );
        (best_cost, best)
    }

    #[test]
    fn hungarian_identity_dominant_case() {
        let cost = Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]).unwrap();
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs(), &[(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_breaks_ties_toward_low_indices() {
        let cost = Tensor::filled(&[3, 3], 7.0);
        let a = hungarian(&cost).unwrap();
        assert_eq!(a.pairs(), &[(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn hungarian_empty_matrix_gives_empty_assignment() {
        let cost = Tensor::zeros(&[0, 4]);
        assert!(hungarian(&cost).unwrap().is_empty());
    }

    #[test]
    fn hungarian_matches_exhaustive_search_on_random_5x5() {
        let mut rng = Rng::new(1234);
        for _ in 0..50 {
            let cost = Tensor::new(&[5, 5], (0..25).map(|_| rng.normal()).collect()).unwrap();
            let got = hungarian(&cost).unwrap();
            let (best_cost, best) = brute_force(&cost);
            assert!((got.cost(&cost) - best_cost).abs() < 1e-9);
            assert_eq!(got.pairs(), &best[..]);
        }
    }

    #[test]
    fn hungarian_handles_rectangular_matrices() {
        let mut rng = Rng::new(77);
        for &(a, b) in &[(2usize, 5usize), (5, 2), (3, 4), (4, 3), (1, 6)] {
            for _ in 0..20 {
                let cost =
                    Tensor::new(&[a, b], (0..a * b).map(|_| rng.normal()).collect()).unwrap();
                let got = hungarian(&cost).unwrap();
                let (best_cost, best) = brute_force(&cost);
                assert_eq!(got.len(), a.min(b));
                assert!((got.cost(&cost) - best_cost).abs() < 1e-9, "{a}x{b}");
                assert_eq!(got.pairs(), &best[..], "{a}x{b}");
            }
        }
    }

    #[test]
    fn hungarian_never_beaten_by_any_permutation() {
        let mut rng = Rng::new(5150);
        for n in 2..=6usize {
            for _ in 0..20 {
                let cost =
                    Tensor::new(&[n, n], (0..n * n).map(|_| rng.uniform()).collect()).unwrap();
                let got = hungarian(&cost).unwrap().cost(&cost);
                // enumerate all permutations
                let mut perm: Vec<usize> = (0..n).collect();
                loop {
                    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost.at2(i, j)).sum();
                    assert!(got <= total + 1e-9);
                    if !next_permutation(&mut perm) {
                        break;
                    }
                }
            }
        }
    }

    fn next_permutation(p: &mut [usize]) -> bool {
        let n = p.len();
        if n < 2 {
            return false;
        }
        let mut i = n - 1;
        while i > 0 && p[i - 1] >= p[i] {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        let mut j = n - 1;
        while p[j] <= p[i - 1] {
            j -= 1;
        }
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }

    // ---- scalar losses ------------------------------------------------------

    fn one_hot_big(k: usize, label: usize) -> Vec<f64> {
        let mut v = vec![0.0; k];
        v[label] = 40.0;
        v
    }

    #[test]
    fn perfect_prediction_costs_minus_lambda_cls() {
        let w = LossWeights::default();
        let gt_mask = vec![1.0, 0.0, 1.0, 0.0];
        let cost = matching_cost(&one_hot_big(3, 1), &gt_mask, 1, &gt_mask, &w);
        // -2.0 from the class term; BCE and Dice vanish on an identical binary mask
        assert!((cost + w.cls).abs() < 1e-9, "cost {cost}");
    }

    #[test]
    fn uniform_half_mask_pays_ln2_per_pixel() {
        let w = LossWeights {
            cls: 0.0,
            bce: 1.0,
            dice: 0.0,
            ..LossWeights::default()
        };
        let pred = vec![0.5; 16];
        let gt: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        let cost = matching_cost(&[0.0], &pred, 0, &gt, &w);
        assert!((cost - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matching_cost_matches_per_pixel_loop_oracle() {
        let mut rng = Rng::new(404);
        let w = LossWeights::default();
        for _ in 0..20 {
            let pred_mask: Vec<f64> = (0..16).map(|_| rng.uniform_in(0.05, 0.95)).collect();
            let gt_mask: Vec<f64> = (0..16).map(|_| f64::from(rng.uniform() > 0.5)).collect();
            let logits: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let label = rng.below(3);

            // oracle: independent per-pixel summation
            let mut bce = 0.0;
            for (p, g) in pred_mask.iter().zip(&gt_mask) {
                bce -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
            }
            bce /= 16.0;
            let inter: f64 = pred_mask.iter().zip(&gt_mask).map(|(p, g)| p * g).sum();
            let dice =
                1.0 - (2.0 * inter + 1.0)
                    / (pred_mask.iter().sum::<f64>() + gt_mask.iter().sum::<f64>() + 1.0);
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            let prob = logits[label].exp() / denom;
            let expect = w.cls * (-prob) + w.bce * bce + w.dice * dice;

            let got = matching_cost(&logits, &pred_mask, label, &gt_mask, &w);
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn perfect_instance_loss_is_nearly_zero() {
        let w = LossWeights::default();
        let gt_mask = vec![0.0, 1.0, 1.0, 0.0];
        let loss = instance_loss(&one_hot_big(4, 2), &gt_mask, 2, &gt_mask, &w);
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn empty_masks_have_zero_dice_by_smoothing() {
        assert_eq!(dice_loss(&[0.0; 8], &[0.0; 8]), 0.0);
    }

    #[test]
    fn instance_loss_matches_loop_oracle() {
        let mut rng = Rng::new(777);
        let w = LossWeights::default();
        let pred_mask: Vec<f64> = (0..9).map(|_| rng.uniform_in(0.1, 0.9)).collect();
        let gt_mask: Vec<f64> = (0..9).map(|_| f64::from(rng.uniform() > 0.4)).collect();
        let logits: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let label = 2;
        let mut bce = 0.0;
        for (p, g) in pred_mask.iter().zip(&gt_mask) {
            bce -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
        }
        bce /= 9.0;
        let inter: f64 = pred_mask.iter().zip(&gt_mask).map(|(p, g)| p * g).sum();
        let dice = 1.0
            - (2.0 * inter + 1.0)
                / (pred_mask.iter().sum::<f64>() + gt_mask.iter().sum::<f64>() + 1.0);
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        let ce = -(logits[label].exp() / denom).ln();
        let expect = w.cls * ce + w.bce * bce + w.dice * dice;
        let got = instance_loss(&logits, &pred_mask, label, &gt_mask, &w);
        assert!((got - expect).abs() < 1e-10);
    }

    // ---- contrastive --------------------------------------------------------

    #[test]
    fn contrastive_with_no_negatives_is_zero() {
        let v = [1.0, 2.0];
        let p = [0.5, 0.5];
        assert_eq!(
            contrastive_emb_loss(&v, &[&p], &[], false),
            Some(0.0)
        );
    }

    #[test]
    fn contrastive_symmetric_case_is_ln2() {
        let v = [1.0, 0.0];
        let k = [2.0, 0.0];
        let got = contrastive_emb_loss(&v, &[&k], &[&k], false).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gap_ten_matches_high_precision_value() {
        let v = [1.0];
        let p = [10.0];
        let n = [0.0];
        let got = contrastive_emb_loss(&v, &[&p], &[&n], false).unwrap();
        let expect = (-10.0f64).exp().ln_1p();
        assert!((got - expect).abs() < 1e-18);
    }

    #[test]
    fn contrastive_skips_on_empty_positive_set() {
        let v = [1.0];
        let n = [0.5];
        assert_eq!(contrastive_emb_loss(&v, &[], &[&n], false), None);
    }

    #[test]
    fn contrastive_is_monotone_in_similarities() {
        // strictly decreasing in any positive similarity, increasing in any negative
        let mut rng = Rng::new(31);
        for _ in 0..100 {
            let dpos: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let dneg: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let base = pair_lse_forward(&dpos, &dneg);
            for i in 0..dpos.len() {
                let mut up = dpos.clone();
                up[i] += 0.1;
                assert!(pair_lse_forward(&up, &dneg) < base);
            }
            for i in 0..dneg.len() {
                let mut up = dneg.clone();
                up[i] += 0.1;
                assert!(pair_lse_forward(&dpos, &up) > base);
            }
        }
    }

    #[test]
    fn contrastive_is_invariant_under_set_permutation() {
        let v = [0.3, -0.8, 1.2];
        let p1 = [1.0, 0.0, 0.0];
        let p2 = [0.0, 1.0, 0.5];
        let n1 = [0.2, 0.2, 0.2];
        let n2 = [-1.0, 0.4, 0.0];
        let a = contrastive_emb_loss(&v, &[&p1, &p2], &[&n1, &n2], false).unwrap();
        let b = contrastive_emb_loss(&v, &[&p2, &p1], &[&n2, &n1], false).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    // ---- cross-frame construction -------------------------------------------

    fn emb(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_frame_contrastive_is_zero() {
        let e = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let stats = cross_frame_contrastive(
            &[&e],
            &[vec![Some(0), Some(1)]],
            ContrastiveOptions::default(),
        );
        assert_eq!(stats.total, 0.0);
        assert_eq!(stats.skipped_no_positives, 2);
    }

    #[test]
    fn orthogonal_identities_match_brute_force() {
        // two frames, two identities, identical embeddings per identity,
        // orthogonal across identities
        let e1 = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let e2 = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let assigns = vec![vec![Some(0), Some(1)], vec![Some(0), Some(1)]];
        let stats =
            cross_frame_contrastive(&[&e1, &e2], &assigns, ContrastiveOptions::default());
        // every anchor: one positive with sim 1, one negative with sim 0
        let per_anchor = (1.0f64 + (0.0f64 - 1.0).exp()).ln();
        assert!((stats.total - 4.0 * per_anchor).abs() < 1e-12);
    }

    #[test]
    fn permuting_rows_and_assignment_together_preserves_the_loss() {
        let mut rng = Rng::new(8);
        let e1 = Tensor::new(&[3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let e2 = Tensor::new(&[3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let assigns = vec![
            vec![Some(0), Some(1), Some(2)],
            vec![Some(2), Some(0), Some(1)],
        ];
        let base =
            cross_frame_contrastive(&[&e1, &e2], &assigns, ContrastiveOptions::default());

        // shuffle frame 2's rows by a permutation and remap its assignment
        let perm = [1usize, 2, 0]; // new_row[i] = old_row[perm[i]]
        let rows: Vec<&[f64]> = perm.iter().map(|&i| e2.row(i)).collect();
        let e2p = Tensor::from_rows(&rows).unwrap();
        let mut inv = [0usize; 3];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let assigns_p = vec![
            assigns[0].clone(),
            assigns[1].iter().map(|o| o.map(|r| inv[r])).collect(),
        ];
        let permuted =
            cross_frame_contrastive(&[&e1, &e2p], &assigns_p, ContrastiveOptions::default());
        assert!((base.total - permuted.total).abs() < 1e-12);
    }

    // ---- prototypes ----------------------------------------------------------

    #[test]
    fn prototype_of_two_pixels_is_their_mean() {
        let mut features = Tensor::zeros(&[2, 2, 3]);
        for ch in 0..3 {
            features.set3(0, 0, ch, 1.0 + ch as f64);
            features.set3(1, 1, ch, 3.0 + ch as f64);
        }
        let mut masks = Tensor::zeros(&[1, 2, 2]);
        masks.set3(0, 0, 0, 1.0);
        masks.set3(0, 1, 1, 1.0);
        let protos = pcc_prototypes(&features, &masks, 0.5).unwrap();
        for ch in 0..3 {
            let expect = ((1.0 + ch as f64) + (3.0 + ch as f64)) / 2.0;
            assert!((protos.at2(0, ch) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn prototype_of_constant_map_is_the_constant() {
        let features = Tensor::filled(&[4, 4, 2], 0.75);
        let mut masks = Tensor::zeros(&[2, 4, 4]);
        masks.set3(0, 1, 1, 1.0);
        masks.set3(0, 1, 2, 1.0);
        masks.set3(0, 2, 1, 1.0);
        // instance 1 stays empty
        let protos = pcc_prototypes(&features, &masks, 0.5).unwrap();
        assert!((protos.at2(0, 0) - 0.75).abs() < 1e-12);
        assert_eq!(protos.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn prototypes_match_per_pixel_loop_oracle() {
        let mut rng = Rng::new(909);
        let (h, w, c) = (6, 5, 3);
        let features =
            Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.normal()).collect()).unwrap();
        let mut masks = Tensor::zeros(&[3, h, w]);
        for i in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    if rng.uniform() < 0.3 {
                        masks.set3(i, y, x, 1.0);
                    }
                }
            }
        }
        let protos = pcc_prototypes(&features, &masks, 0.5).unwrap();
        for i in 0..3 {
            let mut count = 0.0;
            let mut acc = vec![0.0; c];
            for y in 0..h {
                for x in 0..w {
                    if masks.at3(i, y, x) > 0.5 {
                        count += 1.0;
                        for ch in 0..c {
                            acc[ch] += features.at3(y, x, ch);
                        }
                    }
                }
            }
            for ch in 0..c {
                let expect = if count > 0.0 { acc[ch] / count } else { 0.0 };
                assert!((protos.at2(i, ch) - expect).abs() < 1e-12);
            }
        }
    }

    // ---- set losses over frames ----------------------------------------------

    fn square_mask(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Mask {
        let mut data = vec![0.0; h * w];
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                data[y * w + x] = 1.0;
            }
        }
        Mask::new(h, w, data)
    }

    /// Two tracks on a 6x6 grid with slightly noisy observations.
    fn toy_setup(
        frames: usize,
        rng: &mut Rng,
    ) -> (Vec<GroundTruthTrack>, Vec<(Tensor, Tensor)>) {
        let (h, w, k) = (6usize, 6usize, 3usize);
        let tracks = vec![
            GroundTruthTrack::new(0, 1, (0..frames).map(|t| Some(square_mask(h, w, 0, t, 2))).collect()),
            GroundTruthTrack::new(1, 2, (0..frames).map(|t| Some(square_mask(h, w, 3, t, 2))).collect()),
        ];
        let mut obs = Vec::new();
        for t in 0..frames {
            let mut masks = Tensor::zeros(&[2, h, w]);
            let mut classes = Tensor::zeros(&[2, k]);
            // detection order swapped relative to track order
            for (d, track) in [(0usize, 1usize), (1usize, 0usize)] {
                let gt = tracks[track].visible_at(t).unwrap();
                for (i, &m) in gt.data().iter().enumerate() {
                    let noisy = (m * 0.9 + 0.05 + 0.01 * rng.uniform()).clamp(0.0, 1.0);
                    masks.data_mut()[d * h * w + i] = noisy;
                }
                classes.set2(d, tracks[track].class, 5.0);
            }
            obs.push((classes, masks));
        }
        (tracks, obs)
    }

    #[test]
    fn single_frame_vis_loss_reduces_to_matched_instance_losses() {
        let mut rng = Rng::new(51);
        let w = LossWeights::default();
        let (tracks, obs) = toy_setup(1, &mut rng);
        let frame = FrameRef {
            class_scores: &obs[0].0,
            masks: &obs[0].1,
        };
        let total = vis_loss(&[frame], &tracks, &w).unwrap();
        let matched = frame_assignment(frame, &tracks, 0, &w).unwrap();
        let mut expect = 0.0;
        for (k, d) in matched.iter().enumerate() {
            let d = d.unwrap();
            expect += instance_loss(
                frame.class_scores.row(d),
                frame.masks.plane(d),
                tracks[k].class,
                tracks[k].visible_at(0).unwrap().data(),
                &w,
            );
        }
        assert!((total - expect).abs() < 1e-12);
        // the swapped detection order must be recovered
        assert_eq!(matched, vec![Some(1), Some(0)]);
    }

    #[test]
    fn duplicating_a_frame_doubles_the_vis_loss() {
        let mut rng = Rng::new(52);
        let w = LossWeights::default();
        let (mut tracks, obs) = toy_setup(1, &mut rng);
        for track in &mut tracks {
            let m = track.masks[0].clone();
            track.masks.push(m);
        }
        let frame = FrameRef {
            class_scores: &obs[0].0,
            masks: &obs[0].1,
        };
        let single = vis_loss(&[frame], &tracks, &w).unwrap();
        let double = vis_loss(&[frame, frame], &tracks, &w).unwrap();
        assert!((double - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn two_frame_vis_loss_equals_manual_two_step_computation() {
        let mut rng = Rng::new(53);
        let w = LossWeights::default();
        let (tracks, obs) = toy_setup(2, &mut rng);
        let frames: Vec<FrameRef> = obs
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let total = vis_loss(&frames, &tracks, &w).unwrap();
        let mut manual = 0.0;
        for (t, frame) in frames.iter().enumerate() {
            let matched = frame_assignment(*frame, &tracks, t, &w).unwrap();
            for (k, d) in matched.iter().enumerate() {
                let d = d.unwrap();
                manual += instance_loss(
                    frame.class_scores.row(d),
                    frame.masks.plane(d),
                    tracks[k].class,
                    tracks[k].visible_at(t).unwrap().data(),
                    &w,
                );
            }
        }
        assert!((total - manual).abs() < 1e-12);
    }

    #[test]
    fn vis_loss_is_invariant_under_joint_track_permutation() {
        let mut rng = Rng::new(54);
        let w = LossWeights::default();
        let (tracks, obs) = toy_setup(2, &mut rng);
        let frames: Vec<FrameRef> = obs
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let base = vis_loss(&frames, &tracks, &w).unwrap();
        let swapped = vec![tracks[1].clone(), tracks[0].clone()];
        let permuted = vis_loss(&frames, &swapped, &w).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    // ---- first appearance / tracker objective ---------------------------------

    #[test]
    fn all_tracks_in_frame_one_reduce_to_frame_one_matching() {
        let mut rng = Rng::new(55);
        let w = LossWeights::default();
        let (tracks, obs) = toy_setup(2, &mut rng);
        let frames: Vec<FrameRef> = obs
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let sigma = first_appearance_match(&frames, &tracks, &w).unwrap();
        let matched = frame_assignment(frames[0], &tracks, 0, &w).unwrap();
        assert_eq!(sigma.slot_of_track, matched);
        assert!(sigma.unmatched.is_empty());
    }

    #[test]
    fn staggered_appearances_match_exhaustive_search() {
        let (h, w_, k) = (6usize, 6usize, 2usize);
        let w = LossWeights::default();
        // track 0 visible from frame 0; track 1 appears at frame 2
        let tracks = vec![
            GroundTruthTrack::new(
                0,
                0,
                (0..3).map(|t| Some(square_mask(h, w_, 0, t, 2))).collect(),
            ),
            GroundTruthTrack::new(1, 1, vec![None, None, Some(square_mask(h, w_, 3, 2, 2))]),
        ];
        let mut rng = Rng::new(56);
        let mut obs = Vec::new();
        for t in 0..3usize {
            let mut masks = Tensor::zeros(&[2, h, w_]);
            let mut classes = Tensor::zeros(&[2, k]);
            for d in 0..2usize {
                let track = 1 - d; // swapped slot order
                if let Some(gt) = tracks[track].visible_at(t) {
                    for (i, &m) in gt.data().iter().enumerate() {
                        masks.data_mut()[d * h * w_ + i] =
                            (m * 0.9 + 0.02 + 0.01 * rng.uniform()).clamp(0.0, 1.0);
                    }
                    classes.set2(d, tracks[track].class, 4.0);
                }
            }
            obs.push((classes, masks));
        }
        let frames: Vec<FrameRef> = obs
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let sigma = first_appearance_match(&frames, &tracks, &w).unwrap();

        // oracle: enumerate both injective track->slot assignments
        let cost_of = |assign: &[usize]| -> f64 {
            tracks
                .iter()
                .enumerate()
                .map(|(kk, track)| {
                    let f = track.first_appearance;
                    matching_cost(
                        frames[f].class_scores.row(assign[kk]),
                        frames[f].masks.plane(assign[kk]),
                        track.class,
                        track.visible_at(f).unwrap().data(),
                        &w,
                    )
                })
                .sum()
        };
        let best = if cost_of(&[0, 1]) <= cost_of(&[1, 0]) {
            [0usize, 1]
        } else {
            [1, 0]
        };
        assert_eq!(
            sigma.slot_of_track,
            best.iter().map(|&s| Some(s)).collect::<Vec<_>>()
        );
        assert_eq!(sigma.slot_of_track, vec![Some(1), Some(0)]);
    }

    #[test]
    fn permuting_slots_permutes_sigma_con() {
        let mut rng = Rng::new(57);
        let w = LossWeights::default();
        let (tracks, obs) = toy_setup(2, &mut rng);
        let frames: Vec<FrameRef> = obs
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let sigma = first_appearance_match(&frames, &tracks, &w).unwrap();

        // swap slots 0 and 1 in every frame
        let swapped: Vec<(Tensor, Tensor)> = obs
            .iter()
            .map(|(c, m)| {
                let rows: Vec<&[f64]> = vec![c.row(1), c.row(0)];
                let cls = Tensor::from_rows(&rows).unwrap();
                let hw = m.shape()[1] * m.shape()[2];
                let mut md = Vec::with_capacity(2 * hw);
                md.extend_from_slice(m.plane(1));
                md.extend_from_slice(m.plane(0));
                (cls, Tensor::new(m.shape(), md).unwrap())
            })
            .collect();
        let frames_sw: Vec<FrameRef> = swapped
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let sigma_sw = first_appearance_match(&frames_sw, &tracks, &w).unwrap();
        for (a, b) in sigma.slot_of_track.iter().zip(&sigma_sw.slot_of_track) {
            assert_eq!(a.map(|s| 1 - s), *b);
        }
    }

    #[test]
    fn more_tracks_than_slots_reports_unmatched() {
        let (h, w_) = (4usize, 4usize);
        let w = LossWeights::default();
        let tracks: Vec<GroundTruthTrack> = (0..3)
            .map(|k| GroundTruthTrack::new(k, 0, vec![Some(square_mask(h, w_, k, k, 1))]))
            .collect();
        let classes = Tensor::zeros(&[2, 2]);
        let masks = Tensor::filled(&[2, h, w_], 0.1);
        let frames = [FrameRef {
            class_scores: &classes,
            masks: &masks,
        }];
        let sigma = first_appearance_match(&frames, &tracks, &w).unwrap();
        assert_eq!(sigma.unmatched.len(), 1);
        assert_eq!(
            sigma.slot_of_track.iter().filter(|s| s.is_some()).count(),
            2
        );
    }

    #[test]
    fn single_frame_tracker_objective_equals_vis_loss() {
        let mut rng = Rng::new(58);
        let w = LossWeights::default();
        let (tracks, obs) = toy_setup(1, &mut rng);
        let frames = [FrameRef {
            class_scores: &obs[0].0,
            masks: &obs[0].1,
        }];
        let lt = tracker_objective(&frames, &tracks, &w).unwrap();
        let lv = vis_loss(&frames, &tracks, &w).unwrap();
        assert!((lt - lv).abs() < 1e-12);
    }

    #[test]
    fn identity_predictions_minimize_the_tracker_objective() {
        let (h, w_, k) = (6usize, 6usize, 3usize);
        let w = LossWeights::default();
        let tracks = vec![
            GroundTruthTrack::new(0, 0, (0..2).map(|t| Some(square_mask(h, w_, 0, t, 2))).collect()),
            GroundTruthTrack::new(1, 1, (0..2).map(|t| Some(square_mask(h, w_, 3, t, 2))).collect()),
        ];
        // slot predictions exactly equal to the ground truth, slot k = track k
        let mut pred = Vec::new();
        for t in 0..2usize {
            let mut masks = Tensor::zeros(&[2, h, w_]);
            let mut classes = Tensor::zeros(&[2, k]);
            for (slot, track) in tracks.iter().enumerate() {
                let gt = track.visible_at(t).unwrap();
                masks.data_mut()[slot * h * w_..(slot + 1) * h * w_].copy_from_slice(gt.data());
                classes.set2(slot, track.class, 30.0);
            }
            pred.push((classes, masks));
        }
        let frames: Vec<FrameRef> = pred
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let ideal = tracker_objective(&frames, &tracks, &w).unwrap();
        assert!(ideal.abs() < 1e-6);

        // shuffled slot predictions can only do worse under the same gts
        let shuffled: Vec<(Tensor, Tensor)> = pred
            .iter()
            .enumerate()
            .map(|(t, (c, m))| {
                if t == 1 {
                    let rows: Vec<&[f64]> = vec![c.row(1), c.row(0)];
                    let cls = Tensor::from_rows(&rows).unwrap();
                    let hw = h * w_;
                    let mut md = Vec::with_capacity(2 * hw);
                    md.extend_from_slice(m.plane(1));
                    md.extend_from_slice(m.plane(0));
                    (cls, Tensor::new(m.shape(), md).unwrap())
                } else {
                    (c.clone(), m.clone())
                }
            })
            .collect();
        let frames_sh: Vec<FrameRef> = shuffled
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let worse = tracker_objective(&frames_sh, &tracks, &w).unwrap();
        assert!(worse > ideal + 1.0);
    }

    #[test]
    fn two_frame_tracker_objective_matches_manual_computation() {
        let mut rng = Rng::new(59);
        let w = LossWeights::default();
        let (tracks, obs) = toy_setup(2, &mut rng);
        let frames: Vec<FrameRef> = obs
            .iter()
            .map(|(c, m)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let sigma = first_appearance_match(&frames, &tracks, &w).unwrap();
        let got = tracker_objective_with(&frames, &tracks, &w, &sigma);
        let mut manual = 0.0;
        for t in 0..2 {
            for (k, track) in tracks.iter().enumerate() {
                let slot = sigma.slot_of_track[k].unwrap();
                manual += instance_loss(
                    frames[t].class_scores.row(slot),
                    frames[t].masks.plane(slot),
                    track.class,
                    track.visible_at(t).unwrap().data(),
                    &w,
                );
            }
        }
        assert!((got - manual).abs() < 1e-12);
    }
}
