//! Supervised training (linear probe / fine-tune / random init) and
//! evaluation: interaction mAP over matched pairs, individual-action
//! accuracy, convergence comparisons, and gradient-weighted class
//! activation heatmaps.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox, IouGate};
use crate::imaging::{heat_overlay, resize_bilinear_2d, RgbFrame};
use crate::losses::{
    individual_ce_graph, interaction_bce_graph, interaction_softmax_graph, InteractionLossKind,
};
use crate::network::{
    argmax, forward_batch_graph, BatchInputs, ConstParams, EncoderCheckpoint, ForwardOptions,
    FusionMode, NetworkConfig, NetworkWeights, SemanticSource, StreamSet, ENC_INDIVIDUAL,
    ENC_INTERACTION,
};
use crate::nn::{Adam, Graph};
use crate::proposal::{extract_slices, InteractionProposal, SliceTriple};
use crate::semantic_prior::SemanticPriorTable;
use crate::synth_data::AnnotatedFrame;

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Frozen pretrained encoders; only heads and the geometric stream
    /// train.
    Linear,
    /// All weights train from the pretrained initialization.
    Finetune,
    /// All weights train from random initialization.
    Random,
}

impl TrainMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(TrainMode::Linear),
            "finetune" => Ok(TrainMode::Finetune),
            "random" => Ok(TrainMode::Random),
            other => Err(Error::InvalidArgument(format!(
                "unknown train mode {other:?} (expected linear, finetune or random)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Linear => "linear",
            TrainMode::Finetune => "finetune",
            TrainMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub teacher_forcing: bool,
    pub fusion: FusionMode,
    pub streams: StreamSet,
    pub interaction_loss: InteractionLossKind,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference step and batch counts with desk-scale optimizer settings.
    pub fn desk(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            steps: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-6,
            teacher_forcing: true,
            fusion: FusionMode::Paper,
            streams: StreamSet::ALL,
            interaction_loss: InteractionLossKind::Bce,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "steps and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and weight decay nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// One labeled proposal ready for the network.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub slices: SliceTriple,
    pub action_a: usize,
    pub action_b: usize,
    pub interaction: usize,
}

/// Extracts network-ready samples from every labeled pair of the frames.
pub fn dataset_from_frames(
    frames: &[AnnotatedFrame],
    gate: &IouGate,
    input_size: usize,
    map_resolution: usize,
) -> Result<Vec<TrainSample>> {
    let mut samples = Vec::new();
    for frame in frames {
        let by_id: std::collections::BTreeMap<u32, usize> = frame
            .detections
            .iter()
            .enumerate()
            .map(|(i, d)| (d.detection_id(), i))
            .collect();
        let action_of: std::collections::BTreeMap<u32, usize> =
            frame.actions.iter().copied().collect();
        for pair in &frame.interactions {
            let a = frame.detections[by_id[&pair.a]];
            let b = frame.detections[by_id[&pair.b]];
            let proposal = InteractionProposal::new(a, b, gate)?;
            let slices = extract_slices(&frame.image, &proposal, input_size, map_resolution)?;
            samples.push(TrainSample {
                slices,
                action_a: action_of[&pair.a],
                action_b: action_of[&pair.b],
                interaction: pair.class,
            });
        }
    }
    Ok(samples)
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub l_ind: f64,
    pub l_int: f64,
    pub l_entire: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub steps: usize,
    pub curve: Vec<StepLoss>,
    pub final_train_accuracy: f64,
}

/// Encoder initialization for supervised training.
pub enum InitSource<'a> {
    Random,
    Pretrained(&'a EncoderCheckpoint),
}

/// Trains the recognizer. Linear mode freezes both encoders (bit-checked
/// after the run); fine-tune and random update everything.
pub fn train_supervised(
    dataset: &[TrainSample],
    prior: &SemanticPriorTable,
    init: InitSource,
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<(NetworkWeights, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut weights = NetworkWeights::init(net_cfg.clone(), cfg.seed)?;
    match (&init, cfg.mode) {
        (InitSource::Random, TrainMode::Random) => {}
        (InitSource::Random, mode) => {
            return Err(Error::InvalidArgument(format!(
                "{} mode requires a pretrained checkpoint",
                mode.name()
            )));
        }
        (InitSource::Pretrained(ck), _) => {
            let mut shape = ck.config.clone();
            shape.ca_identity_gates = net_cfg.encoder.ca_identity_gates;
            if shape != net_cfg.encoder {
                return Err(Error::CatalogMismatch(
                    "checkpoint encoder shape differs from the network config".into(),
                ));
            }
            let copied_ind = weights
                .store
                .copy_prefix(&ck.params, "encoder.", ENC_INDIVIDUAL);
            let copied_int = weights
                .store
                .copy_prefix(&ck.params, "encoder.", ENC_INTERACTION);
            if copied_ind == 0 || copied_int == 0 {
                return Err(Error::CatalogMismatch(
                    "checkpoint carries no encoder parameters".into(),
                ));
            }
        }
    }

    let frozen_snapshot = match cfg.mode {
        TrainMode::Linear => Some(weights.store.clone()),
        _ => None,
    };
    let trainable = |name: &str| {
        cfg.mode != TrainMode::Linear
            || !(name.starts_with(ENC_INDIVIDUAL) || name.starts_with(ENC_INTERACTION))
    };

    let mut next_batch = crate::pretrain::index_stream_for(dataset.len(), cfg.seed, 11);
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.steps);
    let max_score = cfg.streams.max_fused_score(cfg.fusion);

    for step in 0..cfg.steps {
        let indices = next_batch(cfg.batch_size);
        let slices: Vec<&SliceTriple> = indices.iter().map(|&i| &dataset[i].slices).collect();
        let inputs = BatchInputs::from_slices(&slices)?;
        let action_pairs: Vec<(usize, usize)> = indices
            .iter()
            .map(|&i| (dataset[i].action_a, dataset[i].action_b))
            .collect();
        let mut targets = Array2::zeros((indices.len(), net_cfg.num_interactions));
        for (row, &i) in indices.iter().enumerate() {
            targets[[row, dataset[i].interaction]] = 1.0;
        }

        let mut g = Graph::new();
        let binding = weights.store.bind(&mut g);
        let mut resolver = &binding;
        let semantic = if cfg.teacher_forcing {
            SemanticSource::Forced(&action_pairs)
        } else {
            SemanticSource::Predicted
        };
        let opts = ForwardOptions {
            fusion: cfg.fusion,
            streams: cfg.streams,
            semantic,
        };
        let vars = forward_batch_graph(&mut g, &mut resolver, net_cfg, prior, &inputs, &opts, false)?;
        let l_int = match cfg.interaction_loss {
            InteractionLossKind::Bce => {
                interaction_bce_graph(&mut g, vars.s_fused, &targets, max_score)
            }
            InteractionLossKind::SoftmaxCe => {
                interaction_softmax_graph(&mut g, vars.s_fused, &targets)
            }
        };
        let l_ind = individual_ce_graph(&mut g, vars.logits_a, vars.logits_b, &action_pairs);
        let l_entire = g.add(l_ind, l_int);
        let record = StepLoss {
            step,
            l_ind: g.scalar(l_ind),
            l_int: g.scalar(l_int),
            l_entire: g.scalar(l_entire),
        };
        if !record.l_entire.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite loss at step {step}"
            )));
        }
        let mut grads = g.backward(l_entire);
        let named = binding.collect_grads(&mut grads);
        adam.step(&mut weights.store, &named, trainable);
        curve.push(record);
    }

    if let Some(snapshot) = frozen_snapshot {
        assert!(
            weights.store.bitwise_eq_prefix(&snapshot, ENC_INDIVIDUAL)
                && weights.store.bitwise_eq_prefix(&snapshot, ENC_INTERACTION),
            "frozen-mode gradient leakage: encoder weights changed in linear mode"
        );
    }

    let final_train_accuracy =
        evaluate_interaction_accuracy(&weights, prior, dataset, cfg.fusion, cfg.streams)?;
    let report = TrainReport {
        mode: cfg.mode,
        steps: cfg.steps,
        curve,
        final_train_accuracy,
    };
    Ok((weights, report))
}

/// Batched eval-mode forward over a dataset; returns fused scores and
/// action predictions per sample.
pub fn predict_dataset(
    weights: &NetworkWeights,
    prior: &SemanticPriorTable,
    samples: &[TrainSample],
    fusion: FusionMode,
    streams: StreamSet,
) -> Result<Vec<(Array1<f64>, usize, (usize, usize))>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let slices: Vec<&SliceTriple> = chunk.iter().map(|s| &s.slices).collect();
        let inputs = BatchInputs::from_slices(&slices)?;
        let opts = ForwardOptions {
            fusion,
            streams,
            semantic: SemanticSource::Predicted,
        };
        let mut g = Graph::new();
        let mut p = ConstParams::new(&weights.store);
        let vars = forward_batch_graph(&mut g, &mut p, &weights.config, prior, &inputs, &opts, false)?;
        let fused = g.data(vars.s_fused).clone();
        let da = g.data(vars.dist_a).clone();
        let db = g.data(vars.dist_b).clone();
        for row in 0..chunk.len() {
            let scores: Array1<f64> = fused
                .index_axis(Axis(0), row)
                .to_owned()
                .into_dimensionality()
                .expect("1-D scores");
            let class = argmax(scores.iter().copied());
            let a1 = argmax(da.index_axis(Axis(0), row).iter().copied());
            let a2 = argmax(db.index_axis(Axis(0), row).iter().copied());
            out.push((scores, class, (a1, a2)));
        }
    }
    Ok(out)
}

/// Fraction of samples whose fused argmax matches the interaction label.
pub fn evaluate_interaction_accuracy(
    weights: &NetworkWeights,
    prior: &SemanticPriorTable,
    samples: &[TrainSample],
    fusion: FusionMode,
    streams: StreamSet,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let preds = predict_dataset(weights, prior, samples, fusion, streams)?;
    let correct = preds
        .iter()
        .zip(samples)
        .filter(|((_, class, _), s)| *class == s.interaction)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// mAP
// ---------------------------------------------------------------------------

/// One scored prediction with its match flag, the unit consumed by
/// [`evaluate_map`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPrediction {
    pub class: usize,
    pub score: f64,
    pub correct: bool,
}

/// A predicted interaction pair awaiting ground-truth matching.
#[derive(Debug, Clone, Copy)]
pub struct PredictedPair {
    pub frame_id: u64,
    pub a_box: BoundingBox,
    pub b_box: BoundingBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GroundTruthPair {
    pub frame_id: u64,
    pub a_box: BoundingBox,
    pub b_box: BoundingBox,
    pub class: usize,
}

/// Matches predictions to ground-truth pairs: descending-score greedy,
/// class must agree, both member boxes must overlap their counterparts at
/// IoU >= `iou_thresh` (member order free),每 ground-truth pair matches
/// at most once, frames never cross.
pub fn match_pairs(
    predictions: &[PredictedPair],
    ground_truth: &[GroundTruthPair],
    iou_thresh: f64,
) -> Vec<ScoredPrediction> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .partial_cmp(&predictions[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut used = vec![false; ground_truth.len()];
    let mut out = Vec::with_capacity(predictions.len());
    for &pi in &order {
        let p = &predictions[pi];
        let mut correct = false;
        for (gi, gt) in ground_truth.iter().enumerate() {
            if used[gi] || gt.frame_id != p.frame_id || gt.class != p.class {
                continue;
            }
            let direct = iou(&p.a_box, &gt.a_box) >= iou_thresh
                && iou(&p.b_box, &gt.b_box) >= iou_thresh;
            let swapped = iou(&p.a_box, &gt.b_box) >= iou_thresh
                && iou(&p.b_box, &gt.a_box) >= iou_thresh;
            if direct || swapped {
                used[gi] = true;
                correct = true;
                break;
            }
        }
        out.push(ScoredPrediction {
            class: p.class,
            score: p.score,
            correct,
        });
    }
    out
}

/// Counts ground-truth pairs per class.
pub fn gt_counts(ground_truth: &[GroundTruthPair], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for gt in ground_truth {
        counts[gt.class] += 1;
    }
    counts
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// All-point interpolated AP per class; `None` for classes without
    /// ground truth (excluded from the mean).
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub skipped_classes: Vec<usize>,
    pub gt_counts: Vec<usize>,
}

/// Mean average precision over classes with ground truth. AP is the area
/// under the monotone precision envelope of the descending-score PR
/// curve.
pub fn evaluate_map(preds: &[ScoredPrediction], counts: &[usize]) -> Result<EvalReport> {
    for p in preds {
        if p.class >= counts.len() {
            return Err(Error::InvalidArgument(format!(
                "prediction class {} out of range {}",
                p.class,
                counts.len()
            )));
        }
    }
    let mut per_class_ap: Vec<Option<f64>> = Vec::with_capacity(counts.len());
    let mut skipped = Vec::new();
    for (class, &gt) in counts.iter().enumerate() {
        if gt == 0 {
            per_class_ap.push(None);
            skipped.push(class);
            continue;
        }
        let mut class_preds: Vec<&ScoredPrediction> =
            preds.iter().filter(|p| p.class == class).collect();
        class_preds.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        per_class_ap.push(Some(average_precision(&class_preds, gt)));
    }
    let kept: Vec<f64> = per_class_ap.iter().filter_map(|ap| *ap).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "no class has ground truth; mAP undefined".into(),
        ));
    }
    Ok(EvalReport {
        map: kept.iter().sum::<f64>() / kept.len() as f64,
        per_class_ap,
        skipped_classes: skipped,
        gt_counts: counts.to_vec(),
    })
}

/// All-point interpolated AP for one class; `sorted` must be in
/// descending score order.
fn average_precision(sorted: &[&ScoredPrediction], gt_count: usize) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precision = Vec::with_capacity(sorted.len());
    let mut recall = Vec::with_capacity(sorted.len());
    for p in sorted {
        if p.correct {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // monotone precision envelope from the right
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        ap += (recall[i] - prev_recall) * envelope[i];
        prev_recall = recall[i];
    }
    ap
}

/// Argmax-agreement fraction between aligned prediction and label lists.
pub fn evaluate_accuracy(predictions: &[usize], ground_truth: &[usize]) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", ground_truth.len()),
            got: format!("{}", predictions.len()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("empty prediction list".into()));
    }
    let correct = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(p, g)| p == g)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

// ---------------------------------------------------------------------------
// convergence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub names: Vec<String>,
    pub threshold: f64,
    /// First step at which each curve drops below the threshold; `None`
    /// when it never does.
    pub first_step_below: Vec<Option<usize>>,
    /// Aligned step-loss table, padded with `None` past a curve's end.
    pub table: Vec<(usize, Vec<Option<f64>>)>,
}

pub fn convergence_report(curves: &[(String, Vec<f64>)], threshold: f64) -> Result<ConvergenceReport> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("no curves to compare".into()));
    }
    let names = curves.iter().map(|(n, _)| n.clone()).collect();
    let first_step_below = curves
        .iter()
        .map(|(_, c)| c.iter().position(|&l| l < threshold))
        .collect();
    let longest = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    let table = (0..longest)
        .map(|step| {
            (
                step,
                curves.iter().map(|(_, c)| c.get(step).copied()).collect(),
            )
        })
        .collect();
    Ok(ConvergenceReport {
        names,
        threshold,
        first_step_below,
        table,
    })
}

impl ConvergenceReport {
    /// Tab-delimited rendering: a header, one crossing line per curve,
    /// then the aligned step table.
    pub fn to_delimited_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("threshold\t{}\n", self.threshold));
        for (name, first) in self.names.iter().zip(&self.first_step_below) {
            match first {
                Some(step) => out.push_str(&format!("first_below\t{name}\t{step}\n")),
                None => out.push_str(&format!("first_below\t{name}\tnot reached\n")),
            }
        }
        out.push_str(&format!("step\t{}\n", self.names.join("\t")));
        for (step, row) in &self.table {
            let cells: Vec<String> = row
                .iter()
                .map(|v| v.map_or(String::new(), |l| format!("{l}")))
                .collect();
            out.push_str(&format!("{step}\t{}\n", cells.join("\t")));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// loss-curve files
// ---------------------------------------------------------------------------

/// Writes `step,loss` lines with a header.
pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[(usize, f64)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "step,loss")?;
    for (step, loss) in curve {
        writeln!(out, "{step},{loss}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_loss_curve(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let display = path.as_ref().display().to_string();
    let file = std::fs::File::open(path.as_ref())?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if idx == 0 {
            if line.trim() != "step,loss" {
                return Err(Error::parse(&display, 1, "expected `step,loss` header"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (s, l) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(&display, idx + 1, "expected step,loss"))?;
        let step: usize = s
            .trim()
            .parse()
            .map_err(|e| Error::parse(&display, idx + 1, format!("bad step: {e}")))?;
        let loss: f64 = l
            .trim()
            .parse()
            .map_err(|e| Error::parse(&display, idx + 1, format!("bad loss: {e}")))?;
        out.push((step, loss));
    }
    Ok(out)
}

/// Writes the supervised curve with its loss parts.
pub fn write_train_curve(path: impl AsRef<Path>, curve: &[StepLoss]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "step,l_ind,l_int,l_entire")?;
    for r in curve {
        writeln!(out, "{},{},{},{}", r.step, r.l_ind, r.l_int, r.l_entire)?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// class activation heatmaps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCamResult {
    /// Heat in `[0, 1]` at the encoder input resolution.
    pub heat: Array2<f64>,
    /// Set when the class score has zero gradient everywhere (flat map).
    pub flat_warning: bool,
}

/// Gradient-weighted class activation map of the fused class score with
/// respect to the interaction encoder's final feature map, rectified,
/// normalized and upsampled to the input size.
pub fn gradcam_heatmap(
    weights: &NetworkWeights,
    prior: &SemanticPriorTable,
    slices: &SliceTriple,
    class: usize,
    fusion: FusionMode,
) -> Result<GradCamResult> {
    let n = weights.config.num_interactions;
    if class >= n {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range {n}"
        )));
    }
    let inputs = BatchInputs::from_slices(&[slices])?;
    let opts = ForwardOptions {
        fusion,
        streams: StreamSet::ALL,
        semantic: SemanticSource::Predicted,
    };
    let mut g = Graph::new();
    let mut p = ConstParams::new(&weights.store);
    let vars = forward_batch_graph(&mut g, &mut p, &weights.config, prior, &inputs, &opts, true)?;
    let mut mask = Array2::zeros((1, n));
    mask[[0, class]] = 1.0;
    let mask = g.constant(mask.into_dyn());
    let picked = g.mul(vars.s_fused, mask);
    let target = g.sum_all(picked);
    let grads = g.backward(target);

    let feature = g
        .data(vars.f_i)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .expect("NCHW feature");
    let (c, h, w) = (feature.shape()[1], feature.shape()[2], feature.shape()[3]);
    let grad = match grads.get(vars.f_i) {
        Some(grad) => grad
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("NCHW grad"),
        None => Array4::zeros((1, c, h, w)),
    };

    // channel weights: spatially averaged gradients
    let mut heat: Array2<f64> = Array2::zeros((h, w));
    for ci in 0..c {
        let alpha = grad.slice(ndarray::s![0, ci, .., ..]).mean().unwrap_or(0.0);
        for y in 0..h {
            for x in 0..w {
                heat[[y, x]] += alpha * feature[[0, ci, y, x]];
            }
        }
    }
    heat.mapv_inplace(|v| v.max(0.0));
    let max = heat.iter().copied().fold(0.0f64, f64::max);
    let flat_warning = max <= 0.0;
    if !flat_warning {
        heat.mapv_inplace(|v| v / max);
    }
    let size = weights.config.encoder.input_size;
    Ok(GradCamResult {
        heat: resize_bilinear_2d(&heat, size, size),
        flat_warning,
    })
}

/// Renders the heatmap over the interaction slice.
pub fn render_gradcam_overlay(slices: &SliceTriple, result: &GradCamResult) -> Result<RgbFrame> {
    heat_overlay(&slices.i, &result.heat)
}

// ---------------------------------------------------------------------------

/// Deterministic derived seed for multi-run experiments.
pub fn run_seed(base: u64, run: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(run)
}

pub(crate) fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_pair_map;
    use crate::network::{AttentionKind, EncoderConfig, ScoreActivation, StageSpec};
    use crate::semantic_prior::{fit_prior, ClassCatalog};
    use crate::synth_data::{generate_dataset, SceneConfig};
    use rand::Rng;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sp(class: usize, score: f64, correct: bool) -> ScoredPrediction {
        ScoredPrediction {
            class,
            score,
            correct,
        }
    }

    /// Literal PR-curve enumerator: for every distinct recall level, take
    /// the best precision at or beyond it, then sum rectangle areas.
    fn ap_oracle(preds: &[ScoredPrediction], gt: usize) -> f64 {
        let mut sorted: Vec<&ScoredPrediction> = preds.iter().collect();
        sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut points = Vec::new();
        let mut tp = 0;
        for (i, p) in sorted.iter().enumerate() {
            if p.correct {
                tp += 1;
            }
            points.push((tp as f64 / gt as f64, tp as f64 / (i + 1) as f64));
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..points.len() {
            let (r, _) = points[i];
            let best_beyond = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_r) * best_beyond;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn ap_hand_case() {
        // 2 GT, predictions: .9 correct, .8 wrong, .7 correct -> 0.8333...
        let preds = vec![sp(0, 0.9, true), sp(0, 0.8, false), sp(0, 0.7, true)];
        let report = evaluate_map(&preds, &[2]).unwrap();
        let expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((report.map - expected).abs() < 1e-12);
        assert!((report.map - 0.8333).abs() < 1e-4);
        assert!((ap_oracle(&preds, 2) - expected).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_and_empty() {
        let preds = vec![sp(0, 0.9, true), sp(0, 0.8, true)];
        let report = evaluate_map(&preds, &[2]).unwrap();
        assert_eq!(report.map, 1.0);

        let none: Vec<ScoredPrediction> = vec![];
        let report = evaluate_map(&none, &[2]).unwrap();
        assert_eq!(report.map, 0.0);
    }

    #[test]
    fn zero_gt_classes_are_skipped_with_warning() {
        let preds = vec![sp(0, 0.9, true), sp(1, 0.8, false)];
        let report = evaluate_map(&preds, &[1, 0]).unwrap();
        assert_eq!(report.per_class_ap[1], None);
        assert_eq!(report.skipped_classes, vec![1]);
        assert_eq!(report.map, 1.0);
        assert!(evaluate_map(&preds, &[0, 0]).is_err());
    }

    #[test]
    fn map_matches_bruteforce_on_random_instances() {
        let mut rng = crate::train_eval::seeded_rng(99, 0);
        for _ in 0..200 {
            let classes = rng.gen_range(1..=3usize);
            let count = rng.gen_range(0..=20usize);
            let preds: Vec<ScoredPrediction> = (0..count)
                .map(|_| {
                    sp(
                        rng.gen_range(0..classes),
                        (rng.gen_range(0.0..1.0f64) * 16.0).round() / 16.0, // force ties
                        rng.gen_bool(0.5),
                    )
                })
                .collect();
            let gts: Vec<usize> = (0..classes).map(|_| rng.gen_range(1..=6usize)).collect();
            let report = evaluate_map(&preds, &gts).unwrap();
            let mut expected = 0.0;
            for class in 0..classes {
                let class_preds: Vec<ScoredPrediction> = preds
                    .iter()
                    .filter(|p| p.class == class)
                    .copied()
                    .collect();
                expected += ap_oracle(&class_preds, gts[class]);
            }
            expected /= classes as f64;
            assert!(
                (report.map - expected).abs() < 1e-9,
                "map {} vs oracle {expected}",
                report.map
            );
        }
    }

    #[test]
    fn pair_matching_uses_each_gt_once_and_respects_frames() {
        let gt = vec![GroundTruthPair {
            frame_id: 0,
            a_box: bb(0.0, 0.0, 10.0, 10.0),
            b_box: bb(5.0, 0.0, 15.0, 10.0),
            class: 0,
        }];
        let mk = |frame_id, score| PredictedPair {
            frame_id,
            a_box: bb(0.2, 0.0, 10.0, 10.0),
            b_box: bb(5.0, 0.2, 15.0, 10.0),
            class: 0,
            score,
        };
        // two near-identical predictions: only the higher-scored one matches
        let flags = match_pairs(&[mk(0, 0.6), mk(0, 0.9)], &gt, 0.5);
        assert_eq!(flags.len(), 2);
        assert!(flags[0].correct && flags[0].score == 0.9);
        assert!(!flags[1].correct);

        // swapped member order still matches
        let swapped = PredictedPair {
            frame_id: 0,
            a_box: bb(5.0, 0.0, 15.0, 10.0),
            b_box: bb(0.0, 0.0, 10.0, 10.0),
            class: 0,
            score: 0.8,
        };
        let flags = match_pairs(&[swapped], &gt, 0.5);
        assert!(flags[0].correct);

        // wrong frame never matches
        let flags = match_pairs(&[mk(3, 0.9)], &gt, 0.5);
        assert!(!flags[0].correct);

        // wrong class never matches
        let wrong = PredictedPair {
            class: 1,
            ..mk(0, 0.9)
        };
        let flags = match_pairs(&[wrong], &gt, 0.5);
        assert!(!flags[0].correct);
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(evaluate_accuracy(&[1, 2, 0], &[1, 2, 0]).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(evaluate_accuracy(&[1, 2, 0, 0], &[1, 2, 1, 1]).unwrap(), 0.5);
        assert!(evaluate_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn convergence_report_cases() {
        let falling: Vec<f64> = (0..100).map(|i| 1.0 - 0.0125 * i as f64).collect();
        assert!(falling[40] < 0.5 && falling[39] >= 0.5);
        let report = convergence_report(
            &[
                ("a".into(), falling.clone()),
                ("b".into(), falling.clone()),
                ("never".into(), vec![0.9; 100]),
            ],
            0.5,
        )
        .unwrap();
        assert_eq!(report.first_step_below[0], Some(40));
        assert_eq!(report.first_step_below[1], Some(40));
        assert_eq!(report.first_step_below[2], None);
        let text = report.to_delimited_text();
        assert!(text.contains("first_below\tnever\tnot reached"));
        assert!(text.contains("first_below\ta\t40"));
    }

    #[test]
    fn loss_curve_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = vec![(0usize, 2.5f64), (1, 1.25), (2, 0.8125)];
        write_loss_curve(&path, &curve).unwrap();
        assert_eq!(read_loss_curve(&path).unwrap(), curve);
    }

    fn tiny_training_setup(
        frames: usize,
        seed: u64,
    ) -> (
        Vec<TrainSample>,
        SemanticPriorTable,
        NetworkConfig,
        ClassCatalog,
    ) {
        let scene = SceneConfig::default();
        let dataset = generate_dataset(&scene, frames, seed).unwrap();
        let net_cfg = NetworkConfig::tiny(
            scene.catalog.num_actions(),
            scene.catalog.num_interactions(),
        );
        let samples = dataset_from_frames(
            &dataset,
            &scene.gate,
            net_cfg.encoder.input_size,
            net_cfg.map_resolution,
        )
        .unwrap();
        let prior_samples: Vec<(String, String, String)> = dataset
            .iter()
            .flat_map(|f| {
                let act: std::collections::BTreeMap<u32, usize> =
                    f.actions.iter().copied().collect();
                f.interactions.iter().map(move |p| {
                    (
                        scene.catalog.individual_actions()[act[&p.a]].clone(),
                        scene.catalog.individual_actions()[act[&p.b]].clone(),
                        scene.catalog.interactions()[p.class].clone(),
                    )
                })
            })
            .collect();
        let prior = fit_prior(&scene.catalog, &prior_samples, 1.0).unwrap();
        (samples, prior, net_cfg, scene.catalog)
    }

    #[test]
    fn dataset_from_frames_builds_one_sample_per_pair() {
        let (samples, _, net_cfg, _) = tiny_training_setup(4, 3);
        assert_eq!(samples.len(), 4); // one pair per frame by default
        for s in &samples {
            assert_eq!(s.slices.input_size(), net_cfg.encoder.input_size);
            assert_eq!(s.slices.geometric.resolution(), net_cfg.map_resolution);
        }
    }

    #[test]
    fn random_training_is_deterministic_and_loss_decreases() {
        let (samples, prior, net_cfg, _) = tiny_training_setup(8, 5);
        let mut cfg = TrainConfig::desk(TrainMode::Random);
        cfg.steps = 25;
        cfg.batch_size = 8;
        cfg.learning_rate = 3e-3;
        cfg.seed = 7;
        let (w1, r1) =
            train_supervised(&samples, &prior, InitSource::Random, &net_cfg, &cfg).unwrap();
        let (w2, r2) =
            train_supervised(&samples, &prior, InitSource::Random, &net_cfg, &cfg).unwrap();
        assert!(w1.store.bitwise_eq_prefix(&w2.store, ""));
        assert_eq!(r1.curve, r2.curve);
        let first = r1.curve.first().unwrap().l_entire;
        let last = r1.curve.last().unwrap().l_entire;
        assert!(last < first, "loss should fall: {first} -> {last}");
    }

    #[test]
    fn linear_mode_freezes_encoders_and_requires_a_checkpoint() {
        let (samples, prior, net_cfg, _) = tiny_training_setup(6, 11);
        // missing checkpoint is an error
        let mut cfg = TrainConfig::desk(TrainMode::Linear);
        cfg.steps = 6;
        cfg.batch_size = 6;
        assert!(matches!(
            train_supervised(&samples, &prior, InitSource::Random, &net_cfg, &cfg),
            Err(Error::InvalidArgument(_))
        ));

        // build a checkpoint by seeding encoder params
        let mut rng = crate::train_eval::seeded_rng(3, 0);
        let mut params = crate::nn::ParamStore::new();
        crate::network::build_encoder_params(&mut params, "encoder.", &net_cfg.encoder, &mut rng);
        let ck = EncoderCheckpoint {
            config: net_cfg.encoder.clone(),
            params,
        };
        let (weights, _) =
            train_supervised(&samples, &prior, InitSource::Pretrained(&ck), &net_cfg, &cfg)
                .unwrap();
        // the frozen encoders bit-match the checkpoint contents
        let mut expected = NetworkWeights::init(net_cfg.clone(), cfg.seed).unwrap();
        expected.store.copy_prefix(&ck.params, "encoder.", ENC_INDIVIDUAL);
        expected.store.copy_prefix(&ck.params, "encoder.", ENC_INTERACTION);
        assert!(weights.store.bitwise_eq_prefix(&expected.store, ENC_INDIVIDUAL));
        assert!(weights.store.bitwise_eq_prefix(&expected.store, ENC_INTERACTION));
        // heads did train
        assert!(!weights
            .store
            .bitwise_eq_prefix(&expected.store, "head_v."));
    }

    #[test]
    fn gradcam_contract_shape_range_and_flat_warning() {
        let (samples, prior, net_cfg, _) = tiny_training_setup(2, 17);
        let weights = NetworkWeights::init(net_cfg.clone(), 3).unwrap();
        let result =
            gradcam_heatmap(&weights, &prior, &samples[0].slices, 1, FusionMode::Paper).unwrap();
        let s = net_cfg.encoder.input_size;
        assert_eq!(result.heat.shape(), &[s, s]);
        assert!(result.heat.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(!result.flat_warning);
        let overlay = render_gradcam_overlay(&samples[0].slices, &result).unwrap();
        assert_eq!(overlay.width(), s);

        // zeroed heads kill every gradient path -> flat map with warning
        let mut dead = weights.clone();
        for name in ["head_v.w", "head_v.b", "head_g.w", "head_g.b", "head_s.w", "head_s.b"] {
            dead.store.get_mut(name).fill(0.0);
        }
        let flat =
            gradcam_heatmap(&dead, &prior, &samples[0].slices, 1, FusionMode::Paper).unwrap();
        assert!(flat.flat_warning);
        assert!(flat.heat.iter().all(|&v| v == 0.0));

        assert!(gradcam_heatmap(&weights, &prior, &samples[0].slices, 9, FusionMode::Paper).is_err());
    }

    #[test]
    fn gradcam_concentrates_on_the_active_feature_region() {
        // Constructed weights: the encoder passes the red channel through
        // center taps (stride 4 overall) on feature channel 0, and the
        // visual head reads exactly that channel of f_i. The class score
        // then depends only on where the I slice is bright, so heat must
        // concentrate in the bright quadrant.
        let catalog = ClassCatalog::default();
        let encoder = EncoderConfig {
            input_size: 32,
            stem_width: 4,
            stages: vec![StageSpec {
                width: 4,
                depth: 1,
                stride: 2,
                expand: 1,
            }],
            attention: AttentionKind::None,
            reduction: 32,
            ca_identity_gates: false,
        };
        let net_cfg = NetworkConfig {
            encoder,
            map_resolution: 8,
            geo_widths: (4, 8),
            geo_feature_dim: 16,
            num_actions: catalog.num_actions(),
            num_interactions: catalog.num_interactions(),
            score_activation: ScoreActivation::Sigmoid,
        };
        let mut weights = NetworkWeights::init(net_cfg.clone(), 0).unwrap();
        for name in weights.store.names().map(str::to_string).collect::<Vec<_>>() {
            weights.store.get_mut(&name).fill(0.0);
        }
        // interaction encoder: stem channel 0 center-taps input channel 0
        weights.store.get_mut("enc_int.stem.w")[[0, 0, 1, 1]] = 1.0;
        weights.store.get_mut("enc_int.s0.b0.dw.w")[[0, 1, 1]] = 1.0;
        weights.store.get_mut("enc_int.s0.b0.project.w")[[0, 0, 0, 0]] = 1.0;
        // visual head reads channel 0 of the f_i part of the concatenation
        let c = net_cfg.encoder.feature_shape().0;
        let class = 1;
        weights.store.get_mut("head_v.w")[[class, 2 * c]] = 1.0;

        // I slice bright in the top-left quadrant of the red channel
        let mut i_img = ndarray::Array3::zeros((3, 32, 32));
        for y in 0..16 {
            for x in 0..16 {
                i_img[[0, y, x]] = 1.0;
            }
        }
        let b1 = bb(0.0, 0.0, 10.0, 10.0);
        let b2 = bb(4.0, 0.0, 14.0, 10.0);
        let slices = SliceTriple {
            c1: ndarray::Array3::zeros((3, 32, 32)),
            c2: ndarray::Array3::zeros((3, 32, 32)),
            i: i_img,
            geometric: rasterize_pair_map(&b1, &b2, 8).unwrap(),
        };
        let prior = fit_prior::<&str, &str, &str>(&catalog, &[], 1.0).unwrap();
        let result =
            gradcam_heatmap(&weights, &prior, &slices, class, FusionMode::Sum).unwrap();
        assert!(!result.flat_warning);
        let total: f64 = result.heat.sum();
        let top_left: f64 = result.heat.slice(ndarray::s![0..16, 0..16]).sum();
        assert!(
            top_left / total >= 0.7,
            "top-left mass {} of {total}",
            top_left
        );
    }

    #[test]
    fn full_gradient_flow_reaches_every_weight_group() {
        let (samples, prior, net_cfg, _) = tiny_training_setup(4, 23);
        let weights = NetworkWeights::init(net_cfg.clone(), 5).unwrap();
        let slices: Vec<&SliceTriple> = samples.iter().take(2).map(|s| &s.slices).collect();
        let inputs = BatchInputs::from_slices(&slices).unwrap();
        let pairs: Vec<(usize, usize)> = samples
            .iter()
            .take(2)
            .map(|s| (s.action_a, s.action_b))
            .collect();
        let mut targets = Array2::zeros((2, net_cfg.num_interactions));
        for (row, s) in samples.iter().take(2).enumerate() {
            targets[[row, s.interaction]] = 1.0;
        }
        let mut g = Graph::new();
        let binding = weights.store.bind(&mut g);
        let mut resolver = &binding;
        let opts = ForwardOptions {
            fusion: FusionMode::Paper,
            streams: StreamSet::ALL,
            semantic: SemanticSource::Forced(&pairs),
        };
        let vars =
            forward_batch_graph(&mut g, &mut resolver, &net_cfg, &prior, &inputs, &opts, false)
                .unwrap();
        let l_int = interaction_bce_graph(&mut g, vars.s_fused, &targets, 2.0);
        let l_ind = individual_ce_graph(&mut g, vars.logits_a, vars.logits_b, &pairs);
        let total = g.add(l_ind, l_int);
        let mut grads = g.backward(total);
        let named = binding.collect_grads(&mut grads);
        // every parameter group receives a nonzero gradient somewhere
        let groups = [
            ENC_INDIVIDUAL,
            ENC_INTERACTION,
            "geo.",
            "head_action.",
            "head_s.",
            "head_g.",
            "head_v.",
        ];
        for group in groups {
            let live = named.iter().any(|(name, grad)| {
                name.starts_with(group)
                    && grad
                        .as_ref()
                        .is_some_and(|g| g.iter().any(|&v| v != 0.0))
            });
            assert!(live, "no gradient reached group {group}");
        }
        // attention blocks specifically
        let ca_live = named.iter().any(|(name, grad)| {
            name.contains(".ca.")
                && grad
                    .as_ref()
                    .is_some_and(|g| g.iter().any(|&v| v != 0.0))
        });
        assert!(ca_live, "no gradient reached the attention blocks");
    }
}
