//! Finite-difference gradient verification suites.
//!
//! Each differentiable subsystem gets a named suite of randomized small
//! instances whose analytic gradients are checked coordinate-by-coordinate
//! against central finite differences. The CLI `grad-check` command and the
//! acceptance tests both run these.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{
    encode_context, init_bilstm, init_filter, modal_feature_filter, BiLstmIds, FilterIds,
    LstmDirectionIds,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, enhance_text, RelationFamily, CONTEXT_RELATIONS};
use crate::losses::{cross_entropy, scl_loss, total_loss, ucl_loss, ProjectionIds, DEFAULT_TAU};
use crate::mpt::{init_mpt, mpt_forward, MptBlockIds, MptStackIds};
use crate::rng::{rng_for_indexed, Stream};
use crate::tensor::{grad_check_multi, Array, ParamSet, Tape, TensorId};

/// Central-difference step used by every suite.
pub const FD_EPS: f64 = 1e-5;
/// Relative-error tolerance used by every suite.
pub const FD_TOL: f64 = 1e-4;

/// Suites, in the order `run_all` executes them.
pub const MODULES: &[&str] = &["tensor", "encoders", "graph", "mpt", "losses"];

/// Result of one randomized instance.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub module: &'static str,
    /// Human-readable instance description (shapes, seeds).
    pub case: String,
    pub passed: bool,
    pub max_rel_err: f64,
    /// Coordinates skipped because the function is locally non-smooth there.
    pub excluded: usize,
}

/// Run one named suite with `instances` randomized instances.
pub fn run_module(module: &str, instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let check = match module {
        "tensor" => check_tensor as fn(usize, u64) -> Result<CheckOutcome>,
        "encoders" => check_encoders,
        "graph" => check_graph,
        "mpt" => check_mpt,
        "losses" => check_losses,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradient suite {other:?}; expected one of {MODULES:?}"
            )))
        }
    };
    (0..instances).map(|i| check(i, seed)).collect()
}

/// Run every suite with `instances` randomized instances each.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for module in MODULES {
        out.extend(run_module(module, instances, seed)?);
    }
    Ok(out)
}

fn instance_rng(module_slot: u64, instance: usize, seed: u64) -> ChaCha8Rng {
    rng_for_indexed(seed, Stream::GradCheck, module_slot * 1000 + instance as u64)
}

fn outcome(
    module: &'static str,
    case: String,
    report: crate::tensor::GradCheckReport,
) -> CheckOutcome {
    CheckOutcome {
        module,
        case,
        passed: report.passed,
        max_rel_err: report.max_rel_err,
        excluded: report.excluded,
    }
}

/// Mean of an elementwise product with a fixed random coefficient tensor:
/// a smooth reduction that leaves no gradient coordinate trivially zero.
fn weighted_mean(tape: &mut Tape, x: TensorId, coeffs: &Array) -> Result<TensorId> {
    let c = tape.constant(coeffs.clone())?;
    let prod = tape.mul(x, c)?;
    tape.mean(prod, None)
}

fn lookup(map: &BTreeMap<String, TensorId>, name: &str) -> TensorId {
    *map.get(name).unwrap_or_else(|| panic!("missing tensor {name}"))
}

/// Composite chain touching every tensor primitive.
fn check_tensor(instance: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = instance_rng(0, instance, seed);
    let r = rng.gen_range(2..=4usize);
    let c = rng.gen_range(2..=5usize);
    let k = rng.gen_range(2..=4usize);

    let inputs = vec![
        Array::rand_uniform(&[r, c], -1.0, 1.0, &mut rng),
        Array::rand_uniform(&[c, k], -1.0, 1.0, &mut rng),
        Array::rand_uniform(&[k], -0.5, 0.5, &mut rng),
        Array::rand_uniform(&[k], 0.5, 1.5, &mut rng),
        Array::rand_uniform(&[k], -0.5, 0.5, &mut rng),
    ];
    let report = grad_check_multi(
        |tape, ids| {
            let (x, w, b, gain, bias) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
            let h = tape.matmul(x, w)?;
            let h = tape.add(h, b)?;
            let t = tape.tanh(h)?;
            let s = tape.sigmoid(t)?;
            let lg = tape.log(s)?;
            let ln = tape.layer_norm(t, gain, bias, 1e-5)?;
            let sm = tape.softmax(ln, 1)?;
            let lsm = tape.log_softmax(h, 1)?;
            let n = tape.l2_normalize(t)?;
            let cat = tape.concat(&[sm, n], 1)?;
            let sl = tape.slice(cat, 1, 1, k)?;
            let col = tape.sum(t, Some(1))?;
            let colb = tape.mul(sl, col)?;
            let tr = tape.transpose(sl)?;
            let sq = tape.matmul(sl, tr)?;
            let lk = tape.leaky_relu(h, 0.3)?;
            let rl = tape.relu(t)?;
            let ex = tape.exp(ln)?;
            let sc = tape.scale(ex, 0.25)?;

            let mut total = tape.mean(sq, None)?;
            for piece in [lsm, lg, colb, lk, rl, sc] {
                let m = tape.mean(piece, None)?;
                total = tape.add(total, m)?;
            }
            Ok(total)
        },
        &inputs,
        FD_EPS,
        FD_TOL,
    )?;
    Ok(outcome(
        "tensor",
        format!("instance {instance}: chain with shapes ({r},{c})x({c},{k})"),
        report,
    ))
}

/// Sequence encoder feeding the modal feature filter.
fn check_encoders(instance: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = instance_rng(1, instance, seed);
    let d_in = rng.gen_range(2..=3usize);
    let d_out = if rng.gen_bool(0.5) { 4 } else { 6 };
    let l = rng.gen_range(2..=4usize);

    let mut params = ParamSet::new();
    init_bilstm(&mut params, "enc", d_in, d_out, &mut rng)?;
    init_filter(&mut params, "flt", d_out, &mut rng)?;

    let mut names: Vec<String> = vec!["__x".into()];
    let mut inputs = vec![Array::rand_uniform(&[l, d_in], -1.0, 1.0, &mut rng)];
    for (name, array) in params.iter() {
        names.push(name.clone());
        inputs.push(array.clone());
    }
    let coeffs = Array::rand_uniform(&[l, d_out], -1.0, 1.0, &mut rng);

    let report = grad_check_multi(
        |tape, ids| {
            let map: BTreeMap<String, TensorId> =
                names.iter().cloned().zip(ids.iter().copied()).collect();
            let bilstm = BiLstmIds {
                forward: LstmDirectionIds {
                    w_in: lookup(&map, "enc.fwd.w_in"),
                    w_rec: lookup(&map, "enc.fwd.w_rec"),
                    bias: lookup(&map, "enc.fwd.bias"),
                },
                backward: LstmDirectionIds {
                    w_in: lookup(&map, "enc.bwd.w_in"),
                    w_rec: lookup(&map, "enc.bwd.w_rec"),
                    bias: lookup(&map, "enc.bwd.bias"),
                },
            };
            let filter = FilterIds {
                gate_w: lookup(&map, "flt.gate.w"),
                gate_b: lookup(&map, "flt.gate.b"),
                down_w: lookup(&map, "flt.down.w"),
                down_b: lookup(&map, "flt.down.b"),
                up_w: lookup(&map, "flt.up.w"),
                up_b: lookup(&map, "flt.up.b"),
            };
            let h = encode_context(tape, lookup(&map, "__x"), &bilstm)?;
            let filtered = modal_feature_filter(tape, h, &filter)?;
            weighted_mean(tape, filtered.out, &coeffs)
        },
        &inputs,
        FD_EPS,
        FD_TOL,
    )?;
    Ok(outcome(
        "encoders",
        format!("instance {instance}: L={l}, d_in={d_in}, d_out={d_out}"),
        report,
    ))
}

/// Relational graph enhancement over a random conversation.
fn check_graph(instance: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = instance_rng(2, instance, seed);
    let l = rng.gen_range(3..=5usize);
    let window = rng.gen_range(1..=3usize);
    let d = rng.gen_range(3..=6usize);
    let max_speakers = 2usize;
    let layers = if instance % 3 == 2 { 2 } else { 1 };
    let speakers: Vec<usize> = (0..l).map(|_| rng.gen_range(0..4usize)).collect();
    let graph = build_graph(&speakers, window, max_speakers)?;

    let n_speaker_rels = RelationFamily::Speaker.relation_count(max_speakers);
    let mut inputs = vec![Array::rand_uniform(&[l, d], -1.0, 1.0, &mut rng)];
    for _ in 0..layers {
        for _ in 0..n_speaker_rels {
            inputs.push(Array::rand_uniform(&[d, d], -0.7, 0.7, &mut rng));
        }
    }
    for _ in 0..layers {
        for _ in 0..CONTEXT_RELATIONS {
            inputs.push(Array::rand_uniform(&[d, d], -0.7, 0.7, &mut rng));
        }
    }
    let coeffs = Array::rand_uniform(&[l, d], -1.0, 1.0, &mut rng);

    let report = grad_check_multi(
        |tape, ids| {
            let mut cursor = 1;
            let mut take = |n: usize| {
                let slice = ids[cursor..cursor + n].to_vec();
                cursor += n;
                slice
            };
            let speaker_layers: Vec<Vec<TensorId>> =
                (0..layers).map(|_| take(n_speaker_rels)).collect();
            let context_layers: Vec<Vec<TensorId>> =
                (0..layers).map(|_| take(CONTEXT_RELATIONS)).collect();
            let out = enhance_text(tape, ids[0], &graph, &speaker_layers, &context_layers)?;
            weighted_mean(tape, out, &coeffs)
        },
        &inputs,
        FD_EPS,
        FD_TOL,
    )?;
    Ok(outcome(
        "graph",
        format!("instance {instance}: L={l}, window={window}, d={d}, layers={layers}"),
        report,
    ))
}

/// Prompt-prefixed transformer stack with its pooling head.
fn check_mpt(instance: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = instance_rng(3, instance, seed);
    let (d, heads) = *[(4usize, 2usize), (6, 2), (6, 3), (8, 2), (8, 4)]
        .get(instance % 5)
        .unwrap();
    let blocks = if instance % 5 == 4 { 2 } else { 1 };
    let l = rng.gen_range(2..=3usize);

    let mut params = ParamSet::new();
    init_mpt(&mut params, "mpt", d, blocks, &mut rng)?;

    let mut names: Vec<String> = vec!["__prompt".into(), "__text".into()];
    let mut inputs = vec![
        Array::rand_uniform(&[l, d], -1.0, 1.0, &mut rng),
        Array::rand_uniform(&[l, d], -1.0, 1.0, &mut rng),
    ];
    for (name, array) in params.iter() {
        names.push(name.clone());
        inputs.push(array.clone());
    }
    let coeffs = Array::rand_uniform(&[l, d], -1.0, 1.0, &mut rng);

    let report = grad_check_multi(
        |tape, ids| {
            let map: BTreeMap<String, TensorId> =
                names.iter().cloned().zip(ids.iter().copied()).collect();
            let stack = MptStackIds {
                blocks: (0..blocks)
                    .map(|b| {
                        let p = format!("mpt.block{b}");
                        MptBlockIds {
                            w_q: lookup(&map, &format!("{p}.w_q")),
                            w_k: lookup(&map, &format!("{p}.w_k")),
                            w_v: lookup(&map, &format!("{p}.w_v")),
                            w_o: lookup(&map, &format!("{p}.w_o")),
                            ffn_w1: lookup(&map, &format!("{p}.ffn.w1")),
                            ffn_b1: lookup(&map, &format!("{p}.ffn.b1")),
                            ffn_w2: lookup(&map, &format!("{p}.ffn.w2")),
                            ffn_b2: lookup(&map, &format!("{p}.ffn.b2")),
                            ln1_gain: lookup(&map, &format!("{p}.ln1.gain")),
                            ln1_bias: lookup(&map, &format!("{p}.ln1.bias")),
                            ln2_gain: lookup(&map, &format!("{p}.ln2.gain")),
                            ln2_bias: lookup(&map, &format!("{p}.ln2.bias")),
                        }
                    })
                    .collect(),
                pool_w_q: lookup(&map, "mpt.pool.w_q"),
                pool_w_k: lookup(&map, "mpt.pool.w_k"),
                pool_w_v: lookup(&map, "mpt.pool.w_v"),
            };
            let out = mpt_forward(
                tape,
                lookup(&map, "__prompt"),
                lookup(&map, "__text"),
                &stack,
                heads,
                0.0,
                None,
            )?;
            weighted_mean(tape, out, &coeffs)
        },
        &inputs,
        FD_EPS,
        FD_TOL,
    )?;
    Ok(outcome(
        "mpt",
        format!("instance {instance}: L={l}, d={d}, heads={heads}, blocks={blocks}"),
        report,
    ))
}

/// Joint objective: cross-entropy plus both contrastive terms.
fn check_losses(instance: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = instance_rng(4, instance, seed);
    let b = rng.gen_range(3..=5usize);
    let k = rng.gen_range(3..=5usize);
    let d = rng.gen_range(3..=4usize);
    let dm = rng.gen_range(3..=4usize);
    let classes = rng.gen_range(2..=3usize);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();

    let inputs = vec![
        Array::rand_uniform(&[b, classes], -1.0, 1.0, &mut rng), // logits
        Array::rand_uniform(&[b, k], -1.0, 1.0, &mut rng),       // fused
        Array::rand_uniform(&[b, d], -1.0, 1.0, &mut rng),       // text stream
        Array::rand_uniform(&[k, d], -0.7, 0.7, &mut rng),       // scl proj w
        Array::rand_uniform(&[d], -0.2, 0.2, &mut rng),          // scl proj b
        Array::rand_uniform(&[b, dm], -1.0, 1.0, &mut rng),      // modality stream
        Array::rand_uniform(&[k, dm], -0.7, 0.7, &mut rng),      // ucl proj w
        Array::rand_uniform(&[dm], -0.2, 0.2, &mut rng),         // ucl proj b
    ];
    let labels_for_closure = labels.clone();
    let report = grad_check_multi(
        |tape, ids| {
            let ce = cross_entropy(tape, ids[0], &labels_for_closure)?;
            let scl_proj = ProjectionIds { w: ids[3], b: ids[4] };
            let scl = scl_loss(tape, ids[2], ids[1], &labels_for_closure, &scl_proj, DEFAULT_TAU)?;
            let ucl_proj = ProjectionIds { w: ids[6], b: ids[7] };
            let ucl = ucl_loss(tape, ids[1], &[(ids[5], ucl_proj)])?;
            total_loss(tape, ce, scl, ucl, 0.1, 0.05)
        },
        &inputs,
        FD_EPS,
        FD_TOL,
    )?;
    Ok(outcome(
        "losses",
        format!("instance {instance}: B={b}, fused={k}, text={d}, classes={classes}"),
        report,
    ))
}

// ===== Tests =====
