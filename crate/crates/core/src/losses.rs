//! Training objectives: cosine similarity, the contrastive batch loss over
//! interleaved view pairs, per-class interaction BCE, individual-action
//! cross-entropy, and their sum.
//!
//! Each loss has a plain evaluation form and a graph form used in
//! training; tests pin the two against each other and against literal
//! loop oracles.

use ndarray::{Array2, ArrayView1, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::nn::{Arr, Graph, Var};

/// Clamp inside logarithms.
pub const LOSS_EPS: f64 = 1e-7;

/// How the temperature enters the contrastive loss. The printed form of
/// the loss divides by the temperature in the numerator only; the
/// symmetric form (the default) scales numerator and denominator alike,
/// which restores the single-pair zero-loss identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperatureMode {
    Symmetric,
    AsymmetricPrinted,
}

/// Interaction-loss flavor: per-class binary cross-entropy by default
/// (classes are independent and not mutually exclusive), with a softmax
/// cross-entropy option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionLossKind {
    Bce,
    SoftmaxCe,
}

/// Loss parts for one step. `l_entire = l_ind + l_int` with equal unit
/// weighting; the detector's localization term is external and absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_ind: f64,
    pub l_int: f64,
    pub l_entire: f64,
}

pub fn total_loss(l_ind: f64, l_int: f64) -> LossReport {
    LossReport {
        l_ind,
        l_int,
        l_entire: l_ind + l_int,
    }
}

pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", u.len()),
            got: format!("{}", v.len()),
        });
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(u.dot(&v) / (nu * nv))
}

/// Contrastive batch loss over `2M` embeddings ordered as interleaved
/// positive pairs `(0, 1), (2, 3), ...`. Every row contributes one
/// orientation; the result is the mean over all `2M` orientations.
pub fn nt_xent_batch(
    embeddings: &Array2<f64>,
    temperature: f64,
    mode: TemperatureMode,
) -> Result<f64> {
    let rows = embeddings.shape()[0];
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding count {rows} is not an even, positive number"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let sims = similarity_matrix(embeddings)?;
    let mut acc = 0.0;
    for i in 0..rows {
        let pos = i ^ 1;
        let row = sims.index_axis(Axis(0), i);
        let (pos_term, lse) = match mode {
            TemperatureMode::Symmetric => {
                let logits: Vec<f64> = (0..rows)
                    .filter(|&k| k != i)
                    .map(|k| row[k] / temperature)
                    .collect();
                (row[pos] / temperature, log_sum_exp(&logits))
            }
            TemperatureMode::AsymmetricPrinted => {
                let logits: Vec<f64> = (0..rows).filter(|&k| k != i).map(|k| row[k]).collect();
                (row[pos] / temperature, log_sum_exp(&logits))
            }
        };
        acc += lse - pos_term;
    }
    Ok(acc / rows as f64)
}

fn similarity_matrix(embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    let rows = embeddings.shape()[0];
    let mut normed = embeddings.clone();
    for mut row in normed.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        row /= norm;
    }
    let mut sims = normed.dot(&normed.t());
    debug_assert_eq!(sims.shape(), &[rows, rows]);
    // guard against rounding drift outside [-1, 1]
    sims.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(sims)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean per-class binary cross-entropy. Fused scores are rescaled into
/// `[0, 1]` by `max_score` (2 for paper-mode fusion over full streams)
/// and clamped away from the log singularities.
pub fn interaction_loss(
    s_fused: ArrayView1<f64>,
    targets: ArrayView1<f64>,
    max_score: f64,
) -> Result<f64> {
    if s_fused.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", s_fused.len()),
            got: format!("{}", targets.len()),
        });
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument(
            "interaction targets must be multi-hot (0/1)".into(),
        ));
    }
    let n = s_fused.len() as f64;
    let mut acc = 0.0;
    for (&s, &t) in s_fused.iter().zip(targets.iter()) {
        let p = (s / max_score).clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / n)
}

/// Softmax cross-entropy alternative over fused scores treated as logits.
pub fn interaction_loss_softmax(
    s_fused: ArrayView1<f64>,
    target_class: usize,
) -> Result<f64> {
    if target_class >= s_fused.len() {
        return Err(Error::InvalidArgument(format!(
            "target class {target_class} out of range {}",
            s_fused.len()
        )));
    }
    let logits: Vec<f64> = s_fused.iter().copied().collect();
    Ok(log_sum_exp(&logits) - logits[target_class])
}

/// Mean of the two categorical cross-entropies `-log dist[target]`.
pub fn individual_loss(
    dist_a: ArrayView1<f64>,
    dist_b: ArrayView1<f64>,
    target_a: usize,
    target_b: usize,
) -> Result<f64> {
    if target_a >= dist_a.len() || target_b >= dist_b.len() {
        return Err(Error::InvalidArgument(format!(
            "action targets ({target_a}, {target_b}) out of range ({}, {})",
            dist_a.len(),
            dist_b.len()
        )));
    }
    let la = -dist_a[target_a].max(LOSS_EPS).ln();
    let lb = -dist_b[target_b].max(LOSS_EPS).ln();
    Ok((la + lb) / 2.0)
}

// ---------------------------------------------------------------------------
// graph forms
// ---------------------------------------------------------------------------

/// Graph form of [`nt_xent_batch`] over a `(2M, D)` embedding var.
pub fn nt_xent_graph(
    g: &mut Graph,
    embeddings: Var,
    temperature: f64,
    mode: TemperatureMode,
) -> Result<Var> {
    let shape = g.data(embeddings).shape().to_vec();
    let rows = shape[0];
    if rows == 0 || rows % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding count {rows} is not an even, positive number"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {temperature} must be positive"
        )));
    }

    // row-normalize
    let sq = g.mul(embeddings, embeddings);
    let norms_sq = g.sum_axis(sq, 1, true);
    let norms = g.sqrt(norms_sq);
    let zn = g.div(embeddings, norms);
    let sims = g.matmul_nt(zn, zn); // (2M, 2M)

    // exclude self-similarity from every denominator
    let mut diag_mask = Array2::zeros((rows, rows));
    let mut pos_mask = Array2::zeros((rows, rows));
    for i in 0..rows {
        diag_mask[[i, i]] = -1e30;
        pos_mask[[i, i ^ 1]] = 1.0;
    }
    let diag_mask = g.constant(diag_mask.into_dyn());
    let pos_mask = g.constant(pos_mask.into_dyn());

    let loss = match mode {
        TemperatureMode::Symmetric => {
            let scaled = g.scale(sims, 1.0 / temperature);
            let masked = g.add(scaled, diag_mask);
            let ls = g.log_softmax(masked, 1);
            let picked = g.mul(ls, pos_mask);
            let per_row = g.sum_axis(picked, 1, false);
            let mean = g.mean_all(per_row);
            g.neg(mean)
        }
        TemperatureMode::AsymmetricPrinted => {
            // loss_i = lse_{k != i}(sims) - sims[i, pos]/T, where the
            // stable lse is recovered from log_softmax at the positive:
            // lse = sims[i, pos] - log_softmax(sims)[i, pos].
            let masked = g.add(sims, diag_mask);
            let ls = g.log_softmax(masked, 1);
            let pos_ls = g.mul(ls, pos_mask);
            let pos_ls = g.sum_axis(pos_ls, 1, false);
            let pos_sim = g.mul(sims, pos_mask);
            let pos_sim = g.sum_axis(pos_sim, 1, false);
            // lse - pos/T = (pos - pos_ls) - pos/T
            let lse = g.sub(pos_sim, pos_ls);
            let pos_scaled = g.scale(pos_sim, 1.0 / temperature);
            let per_row = g.sub(lse, pos_scaled);
            g.mean_all(per_row)
        }
    };
    Ok(loss)
}

/// Graph form of the multi-hot BCE over a batch of fused scores
/// `(N, K)`; `targets` must be a 0/1 constant of the same shape.
pub fn interaction_bce_graph(
    g: &mut Graph,
    s_fused: Var,
    targets: &Array2<f64>,
    max_score: f64,
) -> Var {
    let shape = g.data(s_fused).shape().to_vec();
    debug_assert_eq!(&shape, &targets.shape().to_vec());
    let p = g.scale(s_fused, 1.0 / max_score);
    let p = g.clamp(p, LOSS_EPS, 1.0 - LOSS_EPS);
    let t = g.constant(targets.clone().into_dyn());
    let one_minus_t = g.constant(targets.mapv(|v| 1.0 - v).into_dyn());
    let ones = g.constant(Arr::ones(IxDyn(&shape)));
    let log_p = g.log(p);
    let q = g.sub(ones, p);
    let log_q = g.log(q);
    let pos = g.mul(t, log_p);
    let neg = g.mul(one_minus_t, log_q);
    let sum = g.add(pos, neg);
    let mean = g.mean_all(sum);
    g.neg(mean)
}

/// Graph form of the softmax-CE interaction loss over fused scores.
pub fn interaction_softmax_graph(g: &mut Graph, s_fused: Var, targets: &Array2<f64>) -> Var {
    let ls = g.log_softmax(s_fused, 1);
    let t = g.constant(targets.clone().into_dyn());
    let picked = g.mul(ls, t);
    let per_row = g.sum_axis(picked, 1, false);
    let mean = g.mean_all(per_row);
    g.neg(mean)
}

/// Graph form of [`individual_loss`] from the two action-logit batches
/// `(N, A)` and per-sample target index pairs.
pub fn individual_ce_graph(
    g: &mut Graph,
    logits_a: Var,
    logits_b: Var,
    targets: &[(usize, usize)],
) -> Var {
    let n = targets.len();
    let a_classes = g.data(logits_a).shape()[1];
    let mut onehot_a = Array2::zeros((n, a_classes));
    let mut onehot_b = Array2::zeros((n, a_classes));
    for (row, &(ta, tb)) in targets.iter().enumerate() {
        onehot_a[[row, ta]] = 1.0;
        onehot_b[[row, tb]] = 1.0;
    }
    let ls_a = g.log_softmax(logits_a, 1);
    let ls_b = g.log_softmax(logits_b, 1);
    let ma = g.constant(onehot_a.into_dyn());
    let mb = g.constant(onehot_b.into_dyn());
    let pa = g.mul(ls_a, ma);
    let pb = g.mul(ls_b, mb);
    let sa = g.sum_axis(pa, 1, false);
    let sb = g.sum_axis(pb, 1, false);
    let both = g.add(sa, sb);
    let mean = g.mean_all(both);
    g.scale(mean, -0.5)
}
