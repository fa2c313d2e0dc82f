//! Training loops, the twin benchmark, the ablation runner and metrics
//! persistence.
//!
//! Training is staged: the context head (fusion MLP, plus the filter weights
//! when the kernel is learnable) is trained first on the cross-frame
//! contrastive objective; the tracker is trained afterwards against the
//! first-appearance-matched tracker objective with the head frozen. At this
//! scale mask and class outputs come from the scenario generator, so the
//! segmentation losses have no trainable producer and are logged as
//! diagnostics only.
//!
//! Every run is a pure function of (config, seed): scenario seeds, parameter
//! initialization and frame sampling all derive from the run seed, and metric
//! files are written atomically with fully deterministic content.

use crate::config::{ExperimentConfig, KernelModeConfig, KeySourceConfig};
use crate::container::atomic_write;
use crate::context::{ContextEmbeddings, ContextHead, InstanceObservation};
use crate::error::{Error, Result};
use crate::losses::{
    cross_frame_contrastive, cross_frame_contrastive_on_tape, first_appearance_match,
    frame_assignment, instance_loss, pcc_prototypes, vis_loss, FrameRef, LossWeights,
};
use crate::nn::{scheduled_lr, AdamW};
use crate::rng::Rng;
use crate::scenario::{
    evaluate_association, generate_accepted, AssociationMetrics, GroundTruthTrack, Scenario,
};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;
use crate::tracker::{
    embedding_track, emit_frame, track_video, tracker_step_on_tape, KeySource, TrackedVideo,
    TrackerOptions, TrackerParams,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Scenario instances used for training (evaluation uses a held-out seed).
const TRAIN_SCENARIOS: usize = 3;
/// Abort threshold for diverging training runs.
const DIVERGENCE_LIMIT: f64 = 1e6;
/// Window length of the loss-trend diagnostic.
const TREND_WINDOW: usize = 50;

// ---------------------------------------------------------------------------
// Training records
// ---------------------------------------------------------------------------

/// Per-step named scalars recorded during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainCurve {
    pub names: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl TrainCurve {
    pub fn csv(&self) -> String {
        let mut out = String::from("step");
        for name in &self.names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (step, values) in &self.rows {
            out.push_str(&step.to_string());
            for v in values {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    fn column(&self, name: &str) -> Vec<f64> {
        let idx = self.names.iter().position(|n| n == name).expect("column");
        self.rows.iter().map(|(_, v)| v[idx]).collect()
    }
}

/// Count of window-mean increases over `TREND_WINDOW`-step windows; a healthy
/// training curve trends downward window over window.
pub fn trend_violations(losses: &[f64], window: usize) -> usize {
    let means: Vec<f64> = losses
        .chunks(window)
        .filter(|c| c.len() == window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    means.windows(2).filter(|w| w[1] > w[0]).count()
}

pub struct TrainOutcome<T> {
    pub model: T,
    pub curve: TrainCurve,
    pub final_metrics: BTreeMap<String, f64>,
}

fn train_scenario_seeds(seed: u64) -> Vec<u64> {
    let rng = Rng::new(seed);
    (0..TRAIN_SCENARIOS)
        .map(|i| rng.split(400 + i as u64).next_u64())
        .collect()
}

fn eval_scenario_seed(seed: u64) -> u64 {
    Rng::new(seed).split(500).next_u64()
}

/// Training scenarios for a run seed.
pub fn training_scenarios(config: &ExperimentConfig, seed: u64) -> Result<Vec<Scenario>> {
    train_scenario_seeds(seed)
        .into_iter()
        .map(|s| generate_accepted(&config.scenario.build(s)?, 8))
        .collect()
}

/// Held-out evaluation scenario for a run seed.
pub fn evaluation_scenario(config: &ExperimentConfig, seed: u64) -> Result<Scenario> {
    generate_accepted(&config.scenario.build(eval_scenario_seed(seed))?, 8)
}

// ---------------------------------------------------------------------------
// Context-head training
// ---------------------------------------------------------------------------

struct FrameData {
    /// Matched detection per track (the frame-wise assignment).
    assignment: Vec<Option<usize>>,
    /// Surrounding embeddings under the current fixed kernel (unused when the
    /// kernel is learnable).
    surrounding: Tensor,
    /// Boundary bands (used when the kernel is learnable).
    bands: Vec<Vec<(usize, usize)>>,
    /// Prototype contrastive contribution inputs.
    prototypes: Tensor,
}

fn precompute_frames(
    scenario: &Scenario,
    head: &ContextHead,
    weights: &LossWeights,
    learnable: bool,
) -> Result<Vec<FrameData>> {
    let mut out = Vec::with_capacity(scenario.frames.len());
    for (t, frame) in scenario.frames.iter().enumerate() {
        let obs = &frame.observation;
        let assignment = frame_assignment(FrameRef::from(obs), &scenario.tracks, t, weights)?;
        let bands = if learnable {
            crate::context::boundary_bands(&obs.masks, head.threshold)?
        } else {
            Vec::new()
        };
        let surrounding = if learnable {
            Tensor::zeros(&[obs.num_instances(), obs.channels()])
        } else {
            let (sur, _) = crate::context::surrounding_embedding(obs, &head.kernel, head.threshold)?;
            sur
        };
        let prototypes = pcc_prototypes(&obs.features, &obs.masks, head.threshold)?;
        out.push(FrameData {
            assignment,
            surrounding,
            bands,
            prototypes,
        });
    }
    Ok(out)
}

/// Trains the fusion MLP (and the filter, when learnable) on the cross-frame
/// contrastive objective over sampled frames. The prototype term has no
/// trainable producer here (features and masks come from the generator), so
/// it is evaluated as a diagnostic and added to the reported loss only.
pub fn train_context_head(config: &ExperimentConfig, seed: u64) -> Result<TrainOutcome<ContextHead>> {
    let scenarios = training_scenarios(config, seed)?;
    train_context_head_on(config, seed, &scenarios)
}

pub fn train_context_head_on(
    config: &ExperimentConfig,
    seed: u64,
    scenarios: &[Scenario],
) -> Result<TrainOutcome<ContextHead>> {
    let weights = config.loss_weights();
    let opts = config.contrastive_options();
    let learnable = config.model.kernel_mode == KernelModeConfig::Learnable;
    let mut head = config.init_context_head(seed)?;
    let frame_data: Vec<Vec<FrameData>> = scenarios
        .iter()
        .map(|s| precompute_frames(s, &head, &weights, learnable))
        .collect::<Result<_>>()?;

    let steps = config.optimizer.context_steps;
    let sample_count = config.model.context_frames;
    let mut optimizer = AdamW::new(config.optimizer.weight_decay);
    let sampler = Rng::new(seed).split(600);
    let mut curve = TrainCurve {
        names: vec!["total".into(), "ctx".into(), "pcc".into()],
        rows: Vec::new(),
    };

    for step in 0..steps {
        let mut rng = sampler.split(step as u64);
        let si = rng.below(scenarios.len());
        let scenario = &scenarios[si];
        let data = &frame_data[si];
        let t_count = scenario.frames.len();
        let picked = rng.sample_distinct(t_count, sample_count.min(t_count));

        let mut tape = GradientTape::new();
        let vars = head.bind(&mut tape);
        let mut fused_vars: Vec<Var> = Vec::with_capacity(picked.len());
        let mut assignments = Vec::with_capacity(picked.len());
        for &t in &picked {
            let obs = &scenario.frames[t].observation;
            let fused = match vars.kernel {
                Some(kvar) => {
                    let f = tape.constant(obs.features.clone());
                    let smoothed = tape.conv2d_same(f, kvar)?;
                    let sur = tape.band_mean(smoothed, &data[t].bands)?;
                    let core = tape.constant(obs.core.clone());
                    let cat = tape.concat_cols(core, sur)?;
                    crate::nn::Mlp::forward_on(&mut tape, cat, &vars.mlp)?
                }
                None => {
                    let core = tape.constant(obs.core.clone());
                    let sur = tape.constant(data[t].surrounding.clone());
                    let cat = tape.concat_cols(core, sur)?;
                    crate::nn::Mlp::forward_on(&mut tape, cat, &vars.mlp)?
                }
            };
            fused_vars.push(fused);
            assignments.push(data[t].assignment.clone());
        }
        let (ctx_var, ctx_stats) =
            cross_frame_contrastive_on_tape(&mut tape, &fused_vars, &assignments, opts)?;
        let loss_var = tape.scale(ctx_var, weights.ctx);

        // prototype contrastive diagnostic (constant w.r.t. the head)
        let protos: Vec<&Tensor> = picked.iter().map(|&t| &data[t].prototypes).collect();
        let pcc_stats = cross_frame_contrastive(&protos, &assignments, opts);

        let total = tape.value(loss_var).item() + weights.pcc * pcc_stats.total;
        if !total.is_finite() || total.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss: total });
        }
        curve
            .rows
            .push((step, vec![total, ctx_stats.total, pcc_stats.total]));

        let grads = tape.backward(loss_var)?;
        let lr = scheduled_lr(config.optimizer.learning_rate, step, steps);
        let var_list = vars.vars();
        let grad_list: Vec<Option<&Tensor>> = var_list.iter().map(|&v| grads.wrt(v)).collect();
        if learnable {
            // kernel weights are the first bound parameter
            let mut kernel_tensor = Tensor::new(
                &[head.kernel.size(), head.kernel.size()],
                head.kernel.weights().to_vec(),
            )?;
            {
                let mut params: Vec<&mut Tensor> = vec![&mut kernel_tensor];
                params.extend(head.mlp.params_mut());
                optimizer.step(lr, &mut params, &grad_list);
            }
            head.kernel.set_weights(kernel_tensor.data().to_vec())?;
        } else {
            let mut params = head.mlp.params_mut();
            optimizer.step(lr, &mut params, &grad_list);
        }
    }

    let mut final_metrics = BTreeMap::new();
    if !curve.rows.is_empty() {
        let totals = curve.column("total");
        let ctxs = curve.column("ctx");
        final_metrics.insert("loss_first".into(), totals[0]);
        final_metrics.insert("loss_last".into(), *totals.last().unwrap());
        final_metrics.insert("ctx_first".into(), ctxs[0]);
        final_metrics.insert("ctx_last".into(), *ctxs.last().unwrap());
        final_metrics.insert(
            "trend_violations".into(),
            trend_violations(&totals, TREND_WINDOW) as f64,
        );
    }
    Ok(TrainOutcome {
        model: head,
        curve,
        final_metrics,
    })
}

// ---------------------------------------------------------------------------
// Tracker training
// ---------------------------------------------------------------------------

fn clip_tracks(scenario: &Scenario, start: usize, len: usize) -> Vec<GroundTruthTrack> {
    scenario
        .tracks
        .iter()
        .filter_map(|track| {
            let masks: Vec<_> = track.masks[start..start + len].to_vec();
            if masks
                .iter()
                .any(|m| m.as_ref().is_some_and(|m| !m.is_empty()))
            {
                Some(GroundTruthTrack::new(track.id, track.class, masks))
            } else {
                None
            }
        })
        .collect()
}

/// Trains the tracker on sampled clips against the tracker objective with the
/// context head frozen. The hard Hungarian slot routing is piecewise constant
/// in the parameters, so the optimized objective evaluates the per-slot
/// instance losses on the soft slot-to-detection assignment
/// `softmax(refined . core^T / sqrt(C))`; evaluation always uses the hard
/// routed outputs.
pub fn train_tracker(
    config: &ExperimentConfig,
    seed: u64,
    head: &ContextHead,
) -> Result<TrainOutcome<TrackerParams>> {
    let scenarios = training_scenarios(config, seed)?;
    train_tracker_on(config, seed, head, &scenarios)
}

pub fn train_tracker_on(
    config: &ExperimentConfig,
    seed: u64,
    head: &ContextHead,
    scenarios: &[Scenario],
) -> Result<TrainOutcome<TrackerParams>> {
    let weights = config.loss_weights();
    let opts = config.tracker_options();
    let mut params = config.init_tracker(seed);
    let steps = config.optimizer.tracker_steps;
    let clip_len = config.model.tracker_frames;

    // contexts are frozen; precompute per scenario and frame
    let contexts: Vec<Vec<ContextEmbeddings>> = scenarios
        .iter()
        .map(|s| {
            s.frames
                .iter()
                .map(|f| head.extract(&f.observation))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut optimizer = AdamW::new(config.optimizer.weight_decay);
    let sampler = Rng::new(seed).split(700);
    let mut curve = TrainCurve {
        names: vec!["total".into()],
        rows: Vec::new(),
    };

    for step in 0..steps {
        let mut rng = sampler.split(step as u64);
        let si = rng.below(scenarios.len());
        let scenario = &scenarios[si];
        let frames_total = scenario.frames.len();
        let len = clip_len.min(frames_total);
        let start = if frames_total > len {
            rng.below(frames_total - len + 1)
        } else {
            0
        };
        let tracks = clip_tracks(scenario, start, len);
        if tracks.is_empty() {
            continue;
        }

        let mut tape = GradientTape::new();
        let tracker_vars = params.bind(&mut tape);
        let head_vars = head.mlp.bind_frozen(&mut tape);

        let first_obs = &scenario.frames[start].observation;
        let n = first_obs.num_instances();
        let mut state_core = tape.constant(first_obs.core.clone());
        let mut state_fused = tape.constant(contexts[si][start].fused.clone());
        let identity: Vec<usize> = (0..n).collect();
        let mut hard_frames: Vec<(Tensor, Tensor)> = vec![emit_frame(first_obs, &identity)];
        let mut soft_assignments: Vec<Option<Var>> = vec![None];

        for ct in 1..len {
            let obs = &scenario.frames[start + ct].observation;
            let ctx = &contexts[si][start + ct];
            let step_out = tracker_step_on_tape(
                &mut tape,
                state_core,
                state_fused,
                obs,
                ctx,
                &tracker_vars,
                &head_vars,
                &opts,
            )?;
            hard_frames.push(emit_frame(obs, &step_out.slot_detection));
            soft_assignments.push(Some(step_out.soft_assignment));
            state_core = step_out.refined;
            state_fused = step_out.fused;
        }

        // video-level matching from the hard outputs of this rollout
        let frame_refs: Vec<FrameRef> = hard_frames
            .iter()
            .map(|(m, c)| FrameRef {
                class_scores: c,
                masks: m,
            })
            .collect();
        let sigma = first_appearance_match(&frame_refs, &tracks, &weights)?;

        let mut terms: Vec<Var> = Vec::new();
        let mut constant_part = 0.0;
        for ct in 0..len {
            let obs = &scenario.frames[start + ct].observation;
            let (h, w) = obs.grid();
            let hw = h * w;
            let k = obs.class_scores.shape()[1];
            let soft = soft_assignments[ct];
            let (mask_flat, soft_masks, soft_classes) = match soft {
                Some(p) => {
                    let mflat = tape.constant(Tensor::new(
                        &[n, hw],
                        obs.masks.data().to_vec(),
                    )?);
                    let cls = tape.constant(obs.class_scores.clone());
                    let sm = tape.matmul(p, mflat)?;
                    let sc = tape.matmul(p, cls)?;
                    (Some(p), Some(sm), Some(sc))
                }
                None => (None, None, None),
            };
            let _ = mask_flat;
            for (kk, track) in tracks.iter().enumerate() {
                let (Some(slot), Some(gt_mask)) =
                    (sigma.slot_of_track[kk], track.visible_at(ct))
                else {
                    continue;
                };
                match (soft_masks, soft_classes) {
                    (Some(sm), Some(sc)) => {
                        let gt = Tensor::new(&[1, hw], gt_mask.data().to_vec())?;
                        let mrow = tape.select_rows(sm, &[slot])?;
                        let bce = tape.bce_mean(mrow, &gt)?;
                        let dice = tape.dice_loss(mrow, &gt, 1.0)?;
                        let crow = tape.select_rows(sc, &[slot])?;
                        let crow = tape.reshape(crow, &[k])?;
                        let ce = tape.ce_row(crow, track.class)?;
                        let b = tape.scale(bce, weights.bce);
                        let d = tape.scale(dice, weights.dice);
                        let c = tape.scale(ce, weights.cls);
                        let bd = tape.add(b, d)?;
                        let term = tape.add(bd, c)?;
                        terms.push(term);
                    }
                    _ => {
                        let (masks, classes) = &hard_frames[ct];
                        constant_part += instance_loss(
                            classes.row(slot),
                            masks.plane(slot),
                            track.class,
                            gt_mask.data(),
                            &weights,
                        );
                    }
                }
            }
        }
        let loss_var = tape.sum_scalars(&terms)?;
        let total = tape.value(loss_var).item() + constant_part;
        if !total.is_finite() || total.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Diverged { step, loss: total });
        }
        curve.rows.push((step, vec![total]));

        let grads = tape.backward(loss_var)?;
        let lr = scheduled_lr(config.optimizer.learning_rate, step, steps);
        let grad_list: Vec<Option<&Tensor>> =
            tracker_vars.all().iter().map(|&v| grads.wrt(v)).collect();
        let mut plist = params.params_mut();
        optimizer.step(lr, &mut plist, &grad_list);
    }

    let mut final_metrics = BTreeMap::new();
    if !curve.rows.is_empty() {
        let totals = curve.column("total");
        final_metrics.insert("loss_first".into(), totals[0]);
        final_metrics.insert("loss_last".into(), *totals.last().unwrap());
        final_metrics.insert(
            "trend_violations".into(),
            trend_violations(&totals, TREND_WINDOW) as f64,
        );
    }
    Ok(TrainOutcome {
        model: params,
        curve,
        final_metrics,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Tracks a scenario and scores the association (shared context extraction).
pub fn eval_tracker(
    scenario: &Scenario,
    head: &ContextHead,
    params: &TrackerParams,
    opts: &TrackerOptions,
) -> Result<(TrackedVideo, AssociationMetrics)> {
    let obs: Vec<&InstanceObservation> = scenario.frames.iter().map(|f| &f.observation).collect();
    let tracked = track_video(&obs, params, head, opts)?;
    let mask_refs: Vec<&Tensor> = tracked.slot_masks.iter().collect();
    let metrics = evaluate_association(&mask_refs, &scenario.tracks)?;
    Ok((tracked, metrics))
}

/// Embedding source for the similarity-only baseline tracker.
#[derive(Clone, Copy)]
pub enum BaselineEmbeddings<'a> {
    Core,
    Fused(&'a ContextHead),
}

/// Runs the minimal similarity-matching baseline (no attention) over raw core
/// or fused embeddings and scores the association.
pub fn eval_embedding_baseline(
    scenario: &Scenario,
    source: BaselineEmbeddings,
) -> Result<AssociationMetrics> {
    let obs: Vec<&InstanceObservation> = scenario.frames.iter().map(|f| &f.observation).collect();
    let embeddings: Vec<Tensor> = match source {
        BaselineEmbeddings::Core => obs.iter().map(|o| o.core.clone()).collect(),
        BaselineEmbeddings::Fused(head) => obs
            .iter()
            .map(|o| head.extract(o).map(|c| c.fused))
            .collect::<Result<_>>()?,
    };
    let emb_refs: Vec<&Tensor> = embeddings.iter().collect();
    let tracked = embedding_track(&emb_refs, &obs)?;
    let mask_refs: Vec<&Tensor> = tracked.slot_masks.iter().collect();
    evaluate_association(&mask_refs, &scenario.tracks)
}

/// Ground-truth oracle "tracker": slot `i` always reports object `i`.
pub fn oracle_track(scenario: &Scenario) -> TrackedVideo {
    let mut out = TrackedVideo {
        slot_masks: Vec::new(),
        slot_classes: Vec::new(),
        slot_detections: Vec::new(),
        refined: Vec::new(),
    };
    for frame in &scenario.frames {
        let n = frame.detection_object.len();
        let mut slot_detection = vec![0usize; n];
        for (det, &obj) in frame.detection_object.iter().enumerate() {
            slot_detection[obj] = det;
        }
        let (masks, classes) = emit_frame(&frame.observation, &slot_detection);
        out.slot_masks.push(masks);
        out.slot_classes.push(classes);
        out.slot_detections.push(slot_detection);
        out.refined.push(frame.observation.core.clone());
    }
    out
}

/// Diagnostic segmentation losses of a tracked video against the ground truth.
pub fn diagnostic_losses(
    scenario: &Scenario,
    tracked: &TrackedVideo,
    weights: &LossWeights,
) -> Result<BTreeMap<String, f64>> {
    let frames: Vec<FrameRef> = tracked
        .slot_classes
        .iter()
        .zip(&tracked.slot_masks)
        .map(|(c, m)| FrameRef {
            class_scores: c,
            masks: m,
        })
        .collect();
    let mut out = BTreeMap::new();
    out.insert("vis_loss".into(), vis_loss(&frames, &scenario.tracks, weights)?);
    out.insert(
        "tracker_loss".into(),
        crate::losses::tracker_objective(&frames, &scenario.tracks, weights)?,
    );
    Ok(out)
}

// ---------------------------------------------------------------------------
// Twin benchmark
// ---------------------------------------------------------------------------

/// Paired-arm results on one twin-occlusion seed (shared trained head and
/// shared evaluation scenario).
#[derive(Debug, Clone)]
pub struct TwinBenchmarkRun {
    pub tracker_fused: AssociationMetrics,
    pub tracker_core: AssociationMetrics,
    pub tracker_misaligned: AssociationMetrics,
    pub baseline_core: AssociationMetrics,
    pub baseline_fused: AssociationMetrics,
}

/// Trains a context head for the seed and evaluates every arm on a held-out
/// scenario of the same family.
pub fn run_twin_benchmark(config: &ExperimentConfig, seed: u64) -> Result<TwinBenchmarkRun> {
    let outcome = train_context_head(config, seed)?;
    let head = outcome.model;
    let eval = evaluation_scenario(config, seed)?;
    let params = config.init_tracker(seed);

    let arm = |key_source, alignment| TrackerOptions {
        key_source,
        alignment,
    };
    let (_, tracker_fused) = eval_tracker(&eval, &head, &params, &arm(KeySource::Fused, true))?;
    let (_, tracker_core) = eval_tracker(&eval, &head, &params, &arm(KeySource::Core, true))?;
    let (_, tracker_misaligned) =
        eval_tracker(&eval, &head, &params, &arm(KeySource::Fused, false))?;
    let baseline_core = eval_embedding_baseline(&eval, BaselineEmbeddings::Core)?;
    let baseline_fused = eval_embedding_baseline(&eval, BaselineEmbeddings::Fused(&head))?;
    Ok(TwinBenchmarkRun {
        tracker_fused,
        tracker_core,
        tracker_misaligned,
        baseline_core,
        baseline_fused,
    })
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    KernelSize,
    KernelType,
    FrameCount,
    KeySource,
    Alignment,
}

impl AblationSuite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "kernel_size" => Ok(AblationSuite::KernelSize),
            "kernel_type" => Ok(AblationSuite::KernelType),
            "frame_count" => Ok(AblationSuite::FrameCount),
            "key_source" => Ok(AblationSuite::KeySource),
            "alignment" => Ok(AblationSuite::Alignment),
            other => Err(Error::Config(format!("unknown ablation suite '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationSuite::KernelSize => "kernel_size",
            AblationSuite::KernelType => "kernel_type",
            AblationSuite::FrameCount => "frame_count",
            AblationSuite::KeySource => "key_source",
            AblationSuite::Alignment => "alignment",
        }
    }

    /// Setting labels in table order.
    pub fn settings(&self) -> Vec<String> {
        match self {
            AblationSuite::KernelSize => vec!["3", "5", "7", "9", "11"],
            AblationSuite::KernelType => vec!["average", "learnable"],
            AblationSuite::FrameCount => vec!["2", "3", "4"],
            AblationSuite::KeySource => vec!["core", "fused"],
            AblationSuite::Alignment => vec!["off", "on"],
        }
        .into_iter()
        .map(String::from)
        .collect()
    }

    fn apply(&self, base: &ExperimentConfig, setting: &str) -> Result<ExperimentConfig> {
        let mut config = base.clone();
        match self {
            AblationSuite::KernelSize => {
                config.model.kernel_size = setting
                    .parse()
                    .map_err(|_| Error::Config(format!("bad kernel size '{setting}'")))?;
            }
            AblationSuite::KernelType => {
                config.model.kernel_mode = match setting {
                    "average" => KernelModeConfig::Average,
                    "learnable" => KernelModeConfig::Learnable,
                    _ => return Err(Error::Config(format!("bad kernel type '{setting}'"))),
                };
            }
            AblationSuite::FrameCount => {
                config.model.context_frames = setting
                    .parse()
                    .map_err(|_| Error::Config(format!("bad frame count '{setting}'")))?;
            }
            AblationSuite::KeySource => {
                config.model.key_source = match setting {
                    "core" => KeySourceConfig::Core,
                    "fused" => KeySourceConfig::Fused,
                    _ => return Err(Error::Config(format!("bad key source '{setting}'"))),
                };
            }
            AblationSuite::Alignment => {
                config.model.alignment = match setting {
                    "on" => true,
                    "off" => false,
                    _ => return Err(Error::Config(format!("bad alignment '{setting}'"))),
                };
            }
        }
        Ok(config)
    }

    /// Segmentation-style suites score the trained fused embeddings under the
    /// similarity baseline; tracker suites score the tracker arms.
    fn is_tracker_suite(&self) -> bool {
        matches!(self, AblationSuite::KeySource | AblationSuite::Alignment)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationRow {
    pub suite: String,
    pub setting: String,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub switches_mean: f64,
    pub switches_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn run_setting(
    suite: AblationSuite,
    config: &ExperimentConfig,
    setting: &str,
    seeds: usize,
) -> Result<AblationRow> {
    let cfg = suite.apply(config, setting)?;
    let mut accs = Vec::with_capacity(seeds);
    let mut switches = Vec::with_capacity(seeds);
    let mut ious = Vec::with_capacity(seeds);
    for seed in 0..seeds as u64 {
        let metrics = if suite.is_tracker_suite() {
            let outcome = train_context_head(&cfg, seed)?;
            let eval = evaluation_scenario(&cfg, seed)?;
            let params = cfg.init_tracker(seed);
            let (_, m) = eval_tracker(&eval, &outcome.model, &params, &cfg.tracker_options())?;
            m
        } else {
            let outcome = train_context_head(&cfg, seed)?;
            let eval = evaluation_scenario(&cfg, seed)?;
            eval_embedding_baseline(&eval, BaselineEmbeddings::Fused(&outcome.model))?
        };
        accs.push(metrics.association_accuracy);
        switches.push(metrics.id_switches as f64);
        ious.push(metrics.mean_matched_iou);
    }
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let (switches_mean, switches_std) = mean_std(&switches);
    let (iou_mean, iou_std) = mean_std(&ious);
    Ok(AblationRow {
        suite: suite.name().into(),
        setting: setting.into(),
        seeds,
        accuracy_mean,
        accuracy_std,
        switches_mean,
        switches_std,
        iou_mean,
        iou_std,
    })
}

/// Number of parallel setting workers: `CONTEXT_TRACK_THREADS` when set,
/// otherwise the available parallelism.
fn suite_parallelism(settings: usize) -> usize {
    let cap = std::env::var("CONTEXT_TRACK_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(std::num::NonZeroUsize::get)
                .unwrap_or(1)
        });
    cap.min(settings).max(1)
}

/// Runs one ablation suite: every setting over `seeds` seeds, settings
/// possibly in parallel, rows in fixed setting order.
pub fn run_ablation(
    suite: AblationSuite,
    config: &ExperimentConfig,
    seeds: usize,
) -> Result<Vec<AblationRow>> {
    let settings = suite.settings();
    let workers = suite_parallelism(settings.len());
    let mut results: Vec<Option<Result<AblationRow>>> = Vec::new();
    results.resize_with(settings.len(), || None);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results_mutex = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= settings.len() {
                    break;
                }
                let row = run_setting(suite, config, &settings[idx], seeds);
                results_mutex.lock().unwrap()[idx] = Some(row);
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("setting computed"))
        .collect()
}

/// Fixed-schema CSV for one suite (documented in the README).
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "suite,setting,seeds,accuracy_mean,accuracy_std,switches_mean,switches_std,iou_mean,iou_std\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.suite,
            r.setting,
            r.seeds,
            r.accuracy_mean,
            r.accuracy_std,
            r.switches_mean,
            r.switches_std,
            r.iou_mean,
            r.iou_std
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Metrics records
// ---------------------------------------------------------------------------

/// Deterministic run record. Wall-clock timing is intentionally kept out of
/// this file (it goes to the run log) so records are bit-identical across
/// repeated runs of the same config and seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub format_version: u32,
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub final_metrics: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(
        command: &str,
        config: &ExperimentConfig,
        seed: u64,
        final_metrics: BTreeMap<String, f64>,
    ) -> Self {
        let config_hash = config.hash();
        MetricsRecord {
            format_version: 1,
            run_id: format!("{}-s{}", &config_hash[..12], seed),
            command: command.to_string(),
            config_hash,
            seed,
            final_metrics,
        }
    }
}

/// Writes `record.toml` (and `steps.csv` when a curve is given) atomically.
pub fn write_metrics(dir: &Path, record: &MetricsRecord, curve: Option<&TrainCurve>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string(record).map_err(|e| Error::Format(format!("record: {e}")))?;
    atomic_write(&dir.join("record.toml"), text.as_bytes())?;
    if let Some(curve) = curve {
        atomic_write(&dir.join("steps.csv"), curve.csv().as_bytes())?;
    }
    Ok(())
}
