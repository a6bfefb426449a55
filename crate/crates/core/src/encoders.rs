//! Sequence encoding and modal feature filtering.
//!
//! Each modality's per-utterance feature rows are passed through a
//! bidirectional LSTM whose two directions each produce half of the output
//! width, giving every utterance a context-aware representation of the full
//! model width. The auxiliary modalities (audio, visual) are then passed
//! through a feature filter that scores utterance positions with a softmax
//! gate and re-embeds the gated features through a sigmoid bottleneck,
//! suppressing uninformative positions before fusion.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, ParamSet, Tape, TensorId};

/// Negative-side slope of the gate activation.
pub const GATE_LEAK: f64 = 0.01;

/// Bottleneck width divisor: the filter compresses `d` down to `d / FILTER_BOTTLENECK_DIV`.
pub const FILTER_BOTTLENECK_DIV: usize = 4;

// ===== Bidirectional LSTM =====

/// Tape handles for one LSTM direction. Gate order inside the stacked
/// matrices is `[input, forget, cell, output]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirectionIds {
    /// `(d_in, 4h)` input projection.
    pub w_in: TensorId,
    /// `(h, 4h)` recurrent projection.
    pub w_rec: TensorId,
    /// `[4h]` bias.
    pub bias: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstmIds {
    pub forward: LstmDirectionIds,
    pub backward: LstmDirectionIds,
}

/// Square matrix with orthonormal columns, built by modified Gram-Schmidt
/// over Gaussian draws (re-drawing in the measure-zero degenerate case).
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Array {
    loop {
        let g = Array::rand_normal(&[n, n], 0.0, 1.0, rng);
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..n).map(|i| g.at(i, j)).collect())
            .collect();
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
                for i in 0..n {
                    cols[j][i] -= dot * cols[k][i];
                }
            }
            let norm = (0..n).map(|i| cols[j][i] * cols[j][i]).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..n {
                cols[j][i] /= norm;
            }
        }
        if ok {
            let mut data = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    data[i * n + j] = cols[j][i];
                }
            }
            return Array::new(vec![n, n], data).expect("square orthogonal shape");
        }
    }
}

/// Register bidirectional LSTM parameters under `prefix`. `d_out` must be
/// even; each direction produces `d_out / 2` features. Input projections are
/// uniform in `±1/sqrt(d_out)`, recurrent projections are per-gate
/// orthogonal, and biases are zero except the forget gate, which starts at 1
/// so early training does not erase cell state.
pub fn init_bilstm(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if d_out % 2 != 0 || d_out == 0 {
        return Err(Error::InvalidArgument(format!(
            "bilstm output width must be a positive even number, got {d_out}"
        )));
    }
    if d_in == 0 {
        return Err(Error::InvalidArgument(
            "bilstm input width must be positive".into(),
        ));
    }
    let h = d_out / 2;
    let bound = 1.0 / (d_out as f64).sqrt();
    for dir in ["fwd", "bwd"] {
        let w_in = Array::rand_uniform(&[d_in, 4 * h], -bound, bound, rng);
        // One orthogonal block per gate, stacked along the column axis.
        let mut w_rec = Array::zeros(&[h, 4 * h]);
        for gate in 0..4 {
            let q = orthogonal(h, rng);
            for i in 0..h {
                for j in 0..h {
                    w_rec.data_mut()[i * 4 * h + gate * h + j] = q.at(i, j);
                }
            }
        }
        let mut bias = Array::zeros(&[4 * h]);
        for j in h..2 * h {
            bias.data_mut()[j] = 1.0;
        }
        params.insert(format!("{prefix}.{dir}.w_in"), w_in)?;
        params.insert(format!("{prefix}.{dir}.w_rec"), w_rec)?;
        params.insert(format!("{prefix}.{dir}.bias"), bias)?;
    }
    Ok(())
}

/// Names registered by [`init_bilstm`] for `prefix`.
pub fn bilstm_param_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    for dir in ["fwd", "bwd"] {
        for leaf in ["w_in", "w_rec", "bias"] {
            names.push(format!("{prefix}.{dir}.{leaf}"));
        }
    }
    names
}

/// Run one LSTM direction over the rows of `x`, returning one `(1, h)`
/// hidden state per row, indexed by original row order.
fn run_direction(
    tape: &mut Tape,
    x: TensorId,
    ids: &LstmDirectionIds,
    reverse: bool,
) -> Result<Vec<TensorId>> {
    let l = tape.shape(x)[0];
    let h4 = tape.shape(ids.w_in)[1];
    let h = h4 / 4;
    let zero = tape.constant(Array::zeros(&[1, h]))?;
    let mut h_prev = zero;
    let mut c_prev = zero;
    let mut out = vec![None; l];
    let order: Vec<usize> = if reverse {
        (0..l).rev().collect()
    } else {
        (0..l).collect()
    };
    for t in order {
        let x_t = tape.slice(x, 0, t, 1)?;
        let xw = tape.matmul(x_t, ids.w_in)?;
        let hw = tape.matmul(h_prev, ids.w_rec)?;
        let pre = tape.add(xw, hw)?;
        let z = tape.add(pre, ids.bias)?;
        let zi = tape.slice(z, 1, 0, h)?;
        let zf = tape.slice(z, 1, h, h)?;
        let zg = tape.slice(z, 1, 2 * h, h)?;
        let zo = tape.slice(z, 1, 3 * h, h)?;
        let gi = tape.sigmoid(zi)?;
        let gf = tape.sigmoid(zf)?;
        let gg = tape.tanh(zg)?;
        let go = tape.sigmoid(zo)?;
        let keep = tape.mul(gf, c_prev)?;
        let write = tape.mul(gi, gg)?;
        let c = tape.add(keep, write)?;
        let ct = tape.tanh(c)?;
        let h_cur = tape.mul(go, ct)?;
        out[t] = Some(h_cur);
        h_prev = h_cur;
        c_prev = c;
    }
    Ok(out.into_iter().map(|o| o.expect("all rows visited")).collect())
}

/// Bidirectional LSTM over the utterance rows of `x` (`(L, d_in)`),
/// producing `(L, 2h)` where row `t` is `[forward_t ; backward_t]`.
pub fn encode_context(tape: &mut Tape, x: TensorId, ids: &BiLstmIds) -> Result<TensorId> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "encode_context expects a (L, d_in) input with L >= 1, got {xs:?}"
        )));
    }
    for dir in [&ids.forward, &ids.backward] {
        let win = tape.shape(dir.w_in).to_vec();
        let wrec = tape.shape(dir.w_rec).to_vec();
        let b = tape.shape(dir.bias).to_vec();
        if win.len() != 2 || win[0] != xs[1] || win[1] % 4 != 0 {
            return Err(Error::ShapeMismatch {
                op: "encode_context",
                lhs: vec![xs[1], 0],
                rhs: win,
            });
        }
        let h = win[1] / 4;
        if wrec != [h, 4 * h] || b != [4 * h] {
            return Err(Error::InvalidArgument(format!(
                "inconsistent lstm parameter shapes: w_rec {wrec:?}, bias {b:?}, hidden {h}"
            )));
        }
    }
    let fwd = run_direction(tape, x, &ids.forward, false)?;
    let bwd = run_direction(tape, x, &ids.backward, true)?;
    let mut rows = Vec::with_capacity(fwd.len());
    for (f, b) in fwd.iter().zip(bwd.iter()) {
        rows.push(tape.concat(&[*f, *b], 1)?);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}

// ===== Modal feature filter =====

#[derive(Debug, Clone, Copy)]
pub struct FilterIds {
    /// `(d, 1)` gate projection.
    pub gate_w: TensorId,
    /// `[1]` gate bias.
    pub gate_b: TensorId,
    /// `(d, d_b)` bottleneck down-projection.
    pub down_w: TensorId,
    /// `[d_b]` bottleneck bias.
    pub down_b: TensorId,
    /// `(d_b, d)` up-projection.
    pub up_w: TensorId,
    /// `[d]` output bias.
    pub up_b: TensorId,
}

/// Intermediate products of the filter, exposed so downstream code and
/// diagnostics can inspect the gate distribution.
#[derive(Debug, Clone, Copy)]
pub struct FilterOut {
    /// `(L, 1)` softmax gate over utterance positions (sums to 1).
    pub gate: TensorId,
    /// `(L, d)` gated features after the `L`-rescaled gate.
    pub gated: TensorId,
    /// `(L, d)` filtered output.
    pub out: TensorId,
}

fn xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Array::rand_uniform(shape, -limit, limit, rng)
}

/// Register feature-filter parameters under `prefix` for width `d`.
pub fn init_filter(
    params: &mut ParamSet,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if d < FILTER_BOTTLENECK_DIV {
        return Err(Error::InvalidArgument(format!(
            "filter width must be at least {FILTER_BOTTLENECK_DIV}, got {d}"
        )));
    }
    let d_b = d / FILTER_BOTTLENECK_DIV;
    params.insert(format!("{prefix}.gate.w"), xavier(&[d, 1], rng))?;
    params.insert(format!("{prefix}.gate.b"), Array::zeros(&[1]))?;
    params.insert(format!("{prefix}.down.w"), xavier(&[d, d_b], rng))?;
    params.insert(format!("{prefix}.down.b"), Array::zeros(&[d_b]))?;
    params.insert(format!("{prefix}.up.w"), xavier(&[d_b, d], rng))?;
    params.insert(format!("{prefix}.up.b"), Array::zeros(&[d]))?;
    Ok(())
}

/// Names registered by [`init_filter`] for `prefix`.
pub fn filter_param_names(prefix: &str) -> Vec<String> {
    ["gate.w", "gate.b", "down.w", "down.b", "up.w", "up.b"]
        .iter()
        .map(|leaf| format!("{prefix}.{leaf}"))
        .collect()
}

/// Filter the feature rows of `h` (`(L, d)`):
///
/// 1. score each position from its feature mean, broadcast back to width `d`,
/// 2. softmax the scores over positions and rescale by `L` so an
///    uninformative (uniform) gate is the identity,
/// 3. re-embed the gated rows through a sigmoid bottleneck of width `d/4`.
pub fn modal_feature_filter(tape: &mut Tape, h: TensorId, ids: &FilterIds) -> Result<FilterOut> {
    let hs = tape.shape(h).to_vec();
    if hs.len() != 2 || hs[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "modal_feature_filter expects (L, d) with L >= 1, got {hs:?}"
        )));
    }
    let (l, d) = (hs[0], hs[1]);
    if tape.shape(ids.gate_w) != [d, 1] {
        return Err(Error::ShapeMismatch {
            op: "modal_feature_filter",
            lhs: vec![d, 1],
            rhs: tape.shape(ids.gate_w).to_vec(),
        });
    }
    let pooled = tape.mean(h, Some(1))?; // (L, 1) per-position feature mean
    let ones = tape.constant(Array::filled(&[1, d], 1.0))?;
    let spread = tape.matmul(pooled, ones)?; // broadcast back to (L, d)
    let scored = tape.matmul(spread, ids.gate_w)?;
    let logits = tape.add(scored, ids.gate_b)?;
    let theta = tape.leaky_relu(logits, GATE_LEAK)?;
    let gate = tape.softmax(theta, 0)?; // over positions
    let rescaled = tape.scale(gate, l as f64)?;
    let gated = tape.mul(h, rescaled)?; // column-broadcast over features
    let down = tape.matmul(gated, ids.down_w)?;
    let down_b = tape.add(down, ids.down_b)?;
    let squeezed = tape.sigmoid(down_b)?;
    let up = tape.matmul(squeezed, ids.up_w)?;
    let out = tape.add(up, ids.up_b)?;
    Ok(FilterOut { gate, gated, out })
}

// ===== Tests =====
