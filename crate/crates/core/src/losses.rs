//! Training objectives: classification cross-entropy plus two contrastive
//! regularizers.
//!
//! * **Utterance-level contrastive term** — for each auxiliary modality, a
//!   learned projection of the fused features is pulled toward that
//!   utterance's own modality stream and pushed away from every other
//!   utterance's, using an InfoNCE objective over cosine similarities.
//! * **Supervised contrastive term** — graph-enhanced text rows and a
//!   projection of the fused rows form two views of each utterance; rows
//!   sharing an emotion label attract, all others repel, with temperature
//!   `tau` and mean weighting over each anchor's positive set.
//!
//! The total objective is `CE + lambda_scl * SCL + lambda_ucl * UCL`.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, ParamSet, Tape, TensorId};

/// Default supervised-contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.07;
/// Default weight of the supervised contrastive term.
pub const DEFAULT_LAMBDA_SCL: f64 = 0.1;
/// Default weight of the utterance-level contrastive term.
pub const DEFAULT_LAMBDA_UCL: f64 = 0.05;
/// Additive mask that removes an entry from a softmax (`exp` underflows to
/// exactly zero after max subtraction).
const MASK_NEG: f64 = -1e9;

/// An affine projection `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionIds {
    pub w: TensorId,
    pub b: TensorId,
}

fn xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Array::rand_uniform(shape, -limit, limit, rng)
}

/// Register an affine projection `{prefix}.w` (`(d_in, d_out)`) and
/// `{prefix}.b` (`[d_out]`).
pub fn init_projection(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::InvalidArgument(
            "projection widths must be positive".into(),
        ));
    }
    params.insert(format!("{prefix}.w"), xavier(&[d_in, d_out], rng))?;
    params.insert(format!("{prefix}.b"), Array::zeros(&[d_out]))?;
    Ok(())
}

/// Names registered by [`init_projection`] for `prefix`.
pub fn projection_param_names(prefix: &str) -> Vec<String> {
    vec![format!("{prefix}.w"), format!("{prefix}.b")]
}

pub fn apply_projection(tape: &mut Tape, x: TensorId, ids: &ProjectionIds) -> Result<TensorId> {
    let xw = tape.matmul(x, ids.w)?;
    tape.add(xw, ids.b)
}

// ===== Utterance-level contrastive term =====

/// InfoNCE alignment of projected fused features against one modality
/// stream. `fused` is `(B, d_f)`, `modality` is `(B, d)`, and the projection
/// maps `d_f -> d`. Row `i` of the projection must identify row `i` of the
/// modality stream among all `B` candidates.
///
/// Batches with fewer than two utterances carry no contrast and contribute
/// an exact zero.
pub fn ucl_term(
    tape: &mut Tape,
    fused: TensorId,
    modality: TensorId,
    proj: &ProjectionIds,
) -> Result<TensorId> {
    let fs = tape.shape(fused).to_vec();
    let ms = tape.shape(modality).to_vec();
    if fs.len() != 2 || ms.len() != 2 || fs[0] != ms[0] {
        return Err(Error::InvalidArgument(format!(
            "ucl_term expects matching row counts, got {fs:?} and {ms:?}"
        )));
    }
    let b = fs[0];
    if b < 2 {
        log::warn!("utterance-level contrast needs at least 2 utterances, got {b}; term is 0");
        return tape.constant(Array::scalar(0.0));
    }
    let pred = apply_projection(tape, fused, proj)?;
    let pred_n = tape.l2_normalize(pred)?;
    let mod_n = tape.l2_normalize(modality)?;
    let mod_t = tape.transpose(mod_n)?;
    let logits = tape.matmul(pred_n, mod_t)?; // (B, B) cosine similarities
    let lp = tape.log_softmax(logits, 1)?;
    let eye = tape.constant(Array::eye(b))?;
    let diag = tape.mul(lp, eye)?;
    let total = tape.sum(diag, None)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Sum of [`ucl_term`] over several modality streams sharing one fused
/// representation.
pub fn ucl_loss(
    tape: &mut Tape,
    fused: TensorId,
    terms: &[(TensorId, ProjectionIds)],
) -> Result<TensorId> {
    if terms.is_empty() {
        return tape.constant(Array::scalar(0.0));
    }
    let mut total: Option<TensorId> = None;
    for (modality, proj) in terms {
        let t = ucl_term(tape, fused, *modality, proj)?;
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(acc, t)?,
        });
    }
    Ok(total.expect("terms is non-empty"))
}

// ===== Supervised contrastive term =====

/// Supervised contrastive loss over feature rows with integer labels.
/// Rows are L2-normalized, pairwise cosine similarities are divided by
/// `tau`, each anchor excludes itself from its candidate set, and each
/// anchor's log-probabilities of its same-label rows are averaged and
/// summed (negated) over anchors.
///
/// Anchors without positives are skipped; if no anchor has a positive the
/// loss is an exact zero.
pub fn supcon_loss(
    tape: &mut Tape,
    features: TensorId,
    labels: &[usize],
    tau: f64,
) -> Result<TensorId> {
    let fs = tape.shape(features).to_vec();
    if fs.len() != 2 || fs[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "supcon_loss expects one label per feature row, got shape {fs:?} for {} labels",
            labels.len()
        )));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let n = fs[0];
    if n < 2 {
        log::warn!("supervised contrast needs at least 2 rows, got {n}; term is 0");
        return tape.constant(Array::scalar(0.0));
    }
    // Positive weights: 1/|P(i)| for same-label pairs, zero elsewhere.
    let mut wpos = Array::zeros(&[n, n]);
    let mut any_positive = false;
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        any_positive = true;
        for p in pos.iter() {
            wpos.data_mut()[i * n + p] = 1.0 / pos.len() as f64;
        }
    }
    if !any_positive {
        log::warn!("no anchor has a same-label partner; supervised contrast term is 0");
        return tape.constant(Array::scalar(0.0));
    }
    let normed = tape.l2_normalize(features)?;
    let normed_t = tape.transpose(normed)?;
    let sims = tape.matmul(normed, normed_t)?;
    let scaled = tape.scale(sims, 1.0 / tau)?;
    let mut mask = Array::zeros(&[n, n]);
    for i in 0..n {
        mask.data_mut()[i * n + i] = MASK_NEG;
    }
    let mask_id = tape.constant(mask)?;
    let masked = tape.add(scaled, mask_id)?;
    let lp = tape.log_softmax(masked, 1)?;
    let w_id = tape.constant(wpos)?;
    let picked = tape.mul(lp, w_id)?;
    let total = tape.sum(picked, None)?;
    tape.scale(total, -1.0)
}

/// Supervised contrastive term over two views of a batch: the text rows
/// `s_text` (`(B, d)`) and a projection of the fused rows `fused`
/// (`(B, d_f)` mapped to `(B, d)`), stacked into `2B` samples whose labels
/// repeat the batch labels.
pub fn scl_loss(
    tape: &mut Tape,
    s_text: TensorId,
    fused: TensorId,
    labels: &[usize],
    proj: &ProjectionIds,
    tau: f64,
) -> Result<TensorId> {
    let ts = tape.shape(s_text).to_vec();
    let fs = tape.shape(fused).to_vec();
    if ts.len() != 2 || fs.len() != 2 || ts[0] != fs[0] || ts[0] != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "scl_loss expects matching text rows {ts:?}, fused rows {fs:?} and {} labels",
            labels.len()
        )));
    }
    let projected = apply_projection(tape, fused, proj)?;
    let stacked = tape.concat(&[s_text, projected], 0)?;
    let mut doubled = labels.to_vec();
    doubled.extend_from_slice(labels);
    supcon_loss(tape, stacked, &doubled, tau)
}

// ===== Classification =====

/// Register a linear classifier head `{prefix}.w` / `{prefix}.b`.
pub fn init_classifier(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier needs at least 2 classes, got {classes}"
        )));
    }
    init_projection(params, prefix, d_in, classes, rng)
}

/// Mean cross-entropy of `logits` (`(B, J)`) against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    let ls = tape.shape(logits).to_vec();
    if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "cross_entropy expects one label per logit row, got {ls:?} for {} labels",
            labels.len()
        )));
    }
    let (b, j) = (ls[0], ls[1]);
    let mut onehot = Array::zeros(&[b, j]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= j {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {j} classes"
            )));
        }
        onehot.data_mut()[i * j + y] = 1.0;
    }
    let lp = tape.log_softmax(logits, 1)?;
    let mask = tape.constant(onehot)?;
    let picked = tape.mul(lp, mask)?;
    let total = tape.sum(picked, None)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Row-wise argmax with first-wins tie breaking.
pub fn predict(logits: &Array) -> Vec<usize> {
    let (b, j) = (logits.shape()[0], logits.shape()[1]);
    (0..b)
        .map(|i| {
            let mut best = 0;
            for c in 1..j {
                if logits.at(i, c) > logits.at(i, best) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Weighted sum of the three loss terms.
pub fn total_loss(
    tape: &mut Tape,
    ce: TensorId,
    scl: TensorId,
    ucl: TensorId,
    lambda_scl: f64,
    lambda_ucl: f64,
) -> Result<TensorId> {
    let scl_w = tape.scale(scl, lambda_scl)?;
    let ucl_w = tape.scale(ucl, lambda_ucl)?;
    let partial = tape.add(ce, scl_w)?;
    tape.add(partial, ucl_w)
}

// ===== Tests =====
