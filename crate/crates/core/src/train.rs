//! Batched training loop, evaluation, and history recording.
//!
//! Gradients are accumulated per batch of whole conversations: the batch's
//! conversations run forward on one tape, their per-utterance outputs are
//! concatenated, and the joint objective (cross-entropy plus weighted
//! contrastive terms over the whole batch) drives one optimizer step.
//! The best parameters by validation weighted F1 are restored at the end.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::Path;

use crate::data::{batch_indices, Conversation};
use crate::error::{Error, Result};
use crate::losses;
use crate::metrics::{self, Metrics};
use crate::model::{ConvOutputs, Model};
use crate::rng::{rng_for_indexed, Stream};
use crate::tensor::{Adam, AdamConfig, Array, Tape, TensorId};

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_scl: f64,
    pub loss_ucl: f64,
    pub val_acc: f64,
    pub val_wf1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters the model now holds.
    pub best_epoch: usize,
    pub best_val_wf1: f64,
}

struct BatchStats {
    ce: f64,
    scl: f64,
    ucl: f64,
    utterances: usize,
}

/// Train `model` on `train_set`, scoring each epoch on `val_set` (or the
/// training set itself when absent). On return the model holds the
/// parameters of the best epoch by validation weighted F1 (ties resolved
/// toward the earlier epoch).
pub fn train(
    model: &mut Model,
    train_set: &[Conversation],
    val_set: Option<&[Conversation]>,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let cfg = model.config().clone();
    let eval_set = val_set.unwrap_or(train_set);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, crate::tensor::ParamSet)> = None;

    for epoch in 0..cfg.epochs {
        // Fresh deterministic streams per epoch, independent of batch count.
        let shuffle_seed = cfg
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        let batches = batch_indices(train_set.len(), cfg.batch_size, Some(shuffle_seed))?;
        let mut dropout_rng = rng_for_indexed(cfg.seed, Stream::Dropout, epoch as u64);

        let (mut ce_sum, mut scl_sum, mut ucl_sum, mut utt_total) = (0.0, 0.0, 0.0, 0usize);
        for (batch_no, batch) in batches.iter().enumerate() {
            let convs: Vec<&Conversation> = batch.iter().map(|&i| &train_set[i]).collect();
            let stats = run_batch(model, &mut adam, &convs, &mut dropout_rng).map_err(|e| {
                if e.is_numerical() {
                    Error::Numerical(format!(
                        "epoch {}, batch {batch_no} (conversations {:?}): {e}",
                        epoch + 1,
                        convs.iter().map(|c| c.id.as_str()).collect::<Vec<_>>()
                    ))
                } else {
                    e
                }
            })?;
            // Utterance-weighted epoch averages, matching the per-utterance
            // training granularity.
            ce_sum += stats.ce * stats.utterances as f64;
            scl_sum += stats.scl * stats.utterances as f64;
            ucl_sum += stats.ucl * stats.utterances as f64;
            utt_total += stats.utterances;
        }

        let m = evaluate_model(model, eval_set)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            loss_ce: ce_sum / utt_total as f64,
            loss_scl: scl_sum / utt_total as f64,
            loss_ucl: ucl_sum / utt_total as f64,
            val_acc: m.accuracy,
            val_wf1: m.weighted_f1,
        };
        log::info!(
            "epoch {}/{}: ce {:.4} scl {:.4} ucl {:.4} val_acc {:.4} val_wf1 {:.4}",
            record.epoch,
            cfg.epochs,
            record.loss_ce,
            record.loss_scl,
            record.loss_ucl,
            record.val_acc,
            record.val_wf1
        );
        let better = match &best {
            None => true,
            Some((best_wf1, _, _)) => record.val_wf1 > *best_wf1,
        };
        if better {
            best = Some((record.val_wf1, epoch + 1, model.params.clone()));
        }
        history.push(record);
    }

    let (best_val_wf1, best_epoch, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_wf1,
    })
}

/// Forward the whole batch on one tape, apply the joint objective, and take
/// one optimizer step.
fn run_batch(
    model: &mut Model,
    adam: &mut Adam,
    convs: &[&Conversation],
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<BatchStats> {
    let cfg = model.config().clone();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;

    let mut outputs: Vec<ConvOutputs> = Vec::with_capacity(convs.len());
    let mut labels: Vec<usize> = Vec::new();
    for conv in convs {
        outputs.push(model.forward(&mut tape, &bound, conv, Some(dropout_rng))?);
        labels.extend_from_slice(&conv.labels);
    }

    let logits_parts: Vec<TensorId> = outputs.iter().map(|o| o.logits).collect();
    let logits = concat_rows(&mut tape, &logits_parts)?;
    let ce = losses::cross_entropy(&mut tape, logits, &labels)?;

    let fused = if outputs[0].fused.is_some() {
        let parts: Vec<TensorId> = outputs.iter().map(|o| o.fused.unwrap()).collect();
        Some(concat_rows(&mut tape, &parts)?)
    } else {
        None
    };

    let scl = match (cfg.scl_active(), fused) {
        (true, Some(fused_cat)) => {
            let backbone_parts: Vec<TensorId> = outputs.iter().map(|o| o.backbone).collect();
            let backbone = concat_rows(&mut tape, &backbone_parts)?;
            let proj = model.scl_projection(&bound)?;
            losses::scl_loss(&mut tape, backbone, fused_cat, &labels, &proj, cfg.tau)?
        }
        _ => tape.constant(Array::scalar(0.0))?,
    };

    let ucl = match (cfg.ucl_active(), fused) {
        (true, Some(fused_cat)) => {
            let mut terms = Vec::new();
            for (slot, m) in cfg.modalities.aux().into_iter().enumerate() {
                let parts: Vec<TensorId> = outputs.iter().map(|o| o.aux[slot].1).collect();
                let stream = concat_rows(&mut tape, &parts)?;
                terms.push((stream, model.ucl_projection(&bound, m)?));
            }
            losses::ucl_loss(&mut tape, fused_cat, &terms)?
        }
        _ => tape.constant(Array::scalar(0.0))?,
    };

    let total = losses::total_loss(&mut tape, ce, scl, ucl, cfg.lambda_scl, cfg.lambda_ucl)?;
    let stats = BatchStats {
        ce: tape.scalar_value(ce)?,
        scl: tape.scalar_value(scl)?,
        ucl: tape.scalar_value(ucl)?,
        utterances: labels.len(),
    };

    let grads = tape.backward(total)?;
    let mut grad_map: BTreeMap<String, Array> = BTreeMap::new();
    for (name, id) in &bound {
        if let Some(g) = grads.get(*id) {
            grad_map.insert(name.clone(), Array::new(tape.shape(*id).to_vec(), g.to_vec())?);
        }
    }
    adam.step(&mut model.params, &grad_map)?;
    Ok(stats)
}

fn concat_rows(tape: &mut Tape, parts: &[TensorId]) -> Result<TensorId> {
    match parts.len() {
        0 => Err(Error::InvalidArgument("empty batch".into())),
        1 => Ok(parts[0]),
        _ => tape.concat(parts, 0),
    }
}

/// Score the model on a labeled dataset (deterministic evaluation mode).
pub fn evaluate_model(model: &Model, data: &[Conversation]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for conv in data {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let out = model.forward(&mut tape, &bound, conv, None)?;
        preds.extend(losses::predict(tape.value(out.logits)));
        labels.extend_from_slice(&conv.labels);
    }
    metrics::evaluate(&preds, &labels, model.config().spec.classes)
}

/// One utterance's evaluation-time products, for embedding dumps.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub conversation: String,
    pub index: usize,
    pub label: usize,
    pub pred: usize,
    pub fusion: Vec<f64>,
}

/// Evaluate every utterance and capture its classifier-input feature row.
pub fn extract_embeddings(model: &Model, data: &[Conversation]) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::new();
    for conv in data {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let out = model.forward(&mut tape, &bound, conv, None)?;
        let preds = losses::predict(tape.value(out.logits));
        let fusion = tape.value(out.fusion).clone();
        for i in 0..conv.len() {
            rows.push(EmbeddingRow {
                conversation: conv.id.clone(),
                index: i,
                label: conv.labels[i],
                pred: preds[i],
                fusion: fusion.row(i).to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Write the training history as CSV.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,loss_ce,loss_scl,loss_ucl,val_acc,val_wf1")?;
    for r in history {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch, r.loss_ce, r.loss_scl, r.loss_ucl, r.val_acc, r.val_wf1
        )?;
    }
    Ok(())
}

/// Write embedding rows as CSV: identifying columns then the feature
/// components `f0..f{k-1}`.
pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let width = rows.first().map(|r| r.fusion.len()).unwrap_or(0);
    let mut header = String::from("conversation,index,label,pred");
    for i in 0..width {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(f, "{header}")?;
    for r in rows {
        let mut line = format!("{},{},{},{}", r.conversation, r.index, r.label, r.pred);
        for v in &r.fusion {
            line.push_str(&format!(",{v}"));
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

// ===== Tests =====
