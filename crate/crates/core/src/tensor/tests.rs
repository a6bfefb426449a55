//! Unit tests for the tape: forward semantics, backward rules against
//! finite differences, error paths, and the optimizer.

use super::test_util::{assert_all_close, assert_close};
use super::*;
use crate::error::Error;
use crate::rng::{rng_for, Stream};
use std::collections::BTreeMap;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn tape_with(values: &[Array]) -> (Tape, Vec<TensorId>) {
    let mut tape = Tape::new();
    let ids = values
        .iter()
        .map(|v| tape.leaf(v.clone()).unwrap())
        .collect();
    (tape, ids)
}

// ===== Forward semantics =====

#[test]
fn matmul_matches_hand_computation() {
    let a = Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Array::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
    let (mut tape, ids) = tape_with(&[a, b]);
    let c = tape.matmul(ids[0], ids[1]).unwrap();
    assert_eq!(tape.shape(c), &[2, 2]);
    assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn matmul_rejects_inner_dim_mismatch_naming_shapes() {
    let (mut tape, ids) = tape_with(&[Array::zeros(&[2, 3]), Array::zeros(&[2, 3])]);
    match tape.matmul(ids[0], ids[1]) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}", other = other.map(|_| ())),
    }
}

#[test]
fn add_broadcasts_row_col_scalar() {
    let x = Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let row = Array::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
    let col = Array::new(vec![2, 1], vec![100.0, 200.0]).unwrap();
    let scalar = Array::scalar(0.5);
    let (mut tape, ids) = tape_with(&[x, row, col, scalar]);
    let r = tape.add(ids[0], ids[1]).unwrap();
    assert_eq!(tape.value(r).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    let c = tape.add(ids[0], ids[2]).unwrap();
    assert_eq!(tape.value(c).data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
    let s = tape.add(ids[0], ids[3]).unwrap();
    assert_eq!(tape.value(s).data(), &[1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
}

#[test]
fn add_rejects_incompatible_shapes() {
    let (mut tape, ids) = tape_with(&[Array::zeros(&[2, 3]), Array::zeros(&[3, 2])]);
    assert!(matches!(
        tape.add(ids[0], ids[1]),
        Err(Error::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn softmax_rows_are_distributions_and_shift_invariant() {
    let mut rng = rng_for(11, Stream::Test);
    let x = Array::rand_uniform(&[4, 6], -3.0, 3.0, &mut rng);
    let mut shifted = x.clone();
    for v in shifted.data_mut() {
        *v += 123.0;
    }
    let (mut tape, ids) = tape_with(&[x, shifted]);
    let s = tape.softmax(ids[0], 1).unwrap();
    let s2 = tape.softmax(ids[1], 1).unwrap();
    for r in 0..4 {
        let row = tape.value(s).row(r);
        let sum: f64 = row.iter().sum();
        assert_close(sum, 1.0, 1e-12, "softmax row sum");
        assert!(row.iter().all(|&p| p > 0.0));
    }
    assert_all_close(
        tape.value(s).data(),
        tape.value(s2).data(),
        1e-12,
        "softmax shift invariance",
    );
}

#[test]
fn softmax_of_uniform_input_is_uniform() {
    let (mut tape, ids) = tape_with(&[Array::zeros(&[4])]);
    let s = tape.softmax(ids[0], 0).unwrap();
    assert_all_close(tape.value(s).data(), &[0.25; 4], 1e-15, "uniform softmax");
}

#[test]
fn softmax_survives_huge_inputs() {
    let x = Array::new(vec![2, 2], vec![1e6, -1e6, 1e6, 1e6]).unwrap();
    let (mut tape, ids) = tape_with(&[x]);
    let s = tape.softmax(ids[0], 1).unwrap();
    assert_all_close(
        tape.value(s).data(),
        &[1.0, 0.0, 0.5, 0.5],
        1e-12,
        "softmax extremes",
    );
}

#[test]
fn log_softmax_matches_log_of_softmax() {
    let mut rng = rng_for(12, Stream::Test);
    let x = Array::rand_uniform(&[3, 5], -4.0, 4.0, &mut rng);
    let (mut tape, ids) = tape_with(&[x]);
    let ls = tape.log_softmax(ids[0], 1).unwrap();
    let s = tape.softmax(ids[0], 1).unwrap();
    let log_s = tape.log(s).unwrap();
    assert_all_close(
        tape.value(ls).data(),
        tape.value(log_s).data(),
        1e-12,
        "log_softmax",
    );
}

#[test]
fn log_softmax_keeps_masked_entries_finite() {
    // A -1e9 additive mask must yield a finite log-probability, not log(0).
    let x = Array::new(vec![1, 3], vec![2.0, -1e9, 1.0]).unwrap();
    let (mut tape, ids) = tape_with(&[x]);
    let ls = tape.log_softmax(ids[0], 1).unwrap();
    let v = tape.value(ls).data();
    assert!(v.iter().all(|e| e.is_finite()));
    // The unmasked entries form a 2-way softmax.
    assert_close(v[0], (1.0f64 / (1.0 + (-1.0f64).exp())).ln(), 1e-9, "kept entry");
}

#[test]
fn concat_and_slice_roundtrip_both_axes() {
    let a = Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Array::new(vec![1, 2], vec![5.0, 6.0]).unwrap();
    let c = Array::new(vec![2, 3], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
    let (mut tape, ids) = tape_with(&[a, b, c]);
    let cat0 = tape.concat(&[ids[0], ids[1]], 0).unwrap();
    assert_eq!(tape.value(cat0).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let back = tape.slice(cat0, 0, 2, 1).unwrap();
    assert_eq!(tape.value(back).data(), &[5.0, 6.0]);

    let cat1 = tape.concat(&[ids[0], ids[2]], 1).unwrap();
    assert_eq!(tape.shape(cat1), &[2, 5]);
    assert_eq!(
        tape.value(cat1).data(),
        &[1.0, 2.0, 7.0, 8.0, 9.0, 3.0, 4.0, 10.0, 11.0, 12.0]
    );
    let mid = tape.slice(cat1, 1, 2, 3).unwrap();
    assert_eq!(tape.value(mid).data(), &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
}

#[test]
fn reductions_keep_axis_and_support_full() {
    let x = Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let (mut tape, ids) = tape_with(&[x]);
    let m1 = tape.mean(ids[0], Some(1)).unwrap();
    assert_eq!(tape.shape(m1), &[2, 1]);
    assert_eq!(tape.value(m1).data(), &[2.0, 5.0]);
    let s0 = tape.sum(ids[0], Some(0)).unwrap();
    assert_eq!(tape.shape(s0), &[1, 3]);
    assert_eq!(tape.value(s0).data(), &[5.0, 7.0, 9.0]);
    let all = tape.mean(ids[0], None).unwrap();
    assert_eq!(tape.shape(all), &[1]);
    assert_eq!(tape.value(all).data(), &[3.5]);
}

#[test]
fn l2_normalize_rows_are_unit_and_zero_rows_stay_zero() {
    let x = Array::new(vec![2, 3], vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let (mut tape, ids) = tape_with(&[x]);
    let y = tape.l2_normalize(ids[0]).unwrap();
    let v = tape.value(y);
    let n0: f64 = v.row(0).iter().map(|e| e * e).sum::<f64>().sqrt();
    assert!((n0 - 1.0).abs() < 1e-12, "unit norm, got {n0}");
    assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = rng_for(13, Stream::Test);
    let x = Array::rand_uniform(&[3, 8], -5.0, 5.0, &mut rng);
    let gain = Array::filled(&[8], 1.0);
    let bias = Array::zeros(&[8]);
    let (mut tape, ids) = tape_with(&[x, gain, bias]);
    let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
    for r in 0..3 {
        let row = tape.value(y).row(r);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12, "row mean {mean}");
        assert_close(var, 1.0, 1e-3, "row variance");
    }
}

#[test]
fn dropout_zero_probability_is_identity() {
    let x = Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (mut tape, ids) = tape_with(&[x]);
    let mut rng = rng_for(1, Stream::Dropout);
    let y = tape.dropout(ids[0], 0.0, &mut rng).unwrap();
    assert_eq!(y, ids[0]);
}

#[test]
fn dropout_scales_survivors_and_is_unbiased_on_average() {
    let x = Array::filled(&[1, 1000], 1.0);
    let (mut tape, ids) = tape_with(&[x]);
    let mut rng = rng_for(2, Stream::Dropout);
    let p = 0.3;
    let y = tape.dropout(ids[0], p, &mut rng).unwrap();
    let scale = 1.0 / (1.0 - p);
    let v = tape.value(y).data();
    assert!(v.iter().all(|&e| e == 0.0 || (e - scale).abs() < 1e-15));
    let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.1, "inverted scaling keeps mean ~1, got {mean}");
}

#[test]
fn dropout_rejects_bad_probability() {
    let (mut tape, ids) = tape_with(&[Array::scalar(1.0)]);
    let mut rng = rng_for(3, Stream::Dropout);
    assert!(tape.dropout(ids[0], 1.0, &mut rng).is_err());
    assert!(tape.dropout(ids[0], -0.1, &mut rng).is_err());
}

#[test]
fn transpose_is_an_involution() {
    let mut rng = rng_for(14, Stream::Test);
    let x = Array::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let (mut tape, ids) = tape_with(&[x.clone()]);
    let t = tape.transpose(ids[0]).unwrap();
    assert_eq!(tape.shape(t), &[5, 3]);
    let tt = tape.transpose(t).unwrap();
    assert_eq!(tape.value(tt), &x);
}

// ===== Non-finite detection =====

#[test]
fn exp_overflow_is_an_error_naming_the_op() {
    let (mut tape, ids) = tape_with(&[Array::scalar(1000.0)]);
    match tape.exp(ids[0]) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
        other => panic!("expected non-finite error, got {other:?}", other = other.map(|_| ())),
    }
}

#[test]
fn log_of_zero_is_an_error_naming_the_op() {
    let (mut tape, ids) = tape_with(&[Array::scalar(0.0)]);
    match tape.log(ids[0]) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
        other => panic!("expected non-finite error, got {other:?}", other = other.map(|_| ())),
    }
}

#[test]
fn non_finite_leaves_are_rejected() {
    let mut tape = Tape::new();
    assert!(tape.leaf(Array::scalar(f64::NAN)).is_err());
    assert!(tape.constant(Array::scalar(f64::INFINITY)).is_err());
}

// ===== Backward semantics =====

#[test]
fn square_via_mul_has_gradient_two_x() {
    // root = x * x at x = 3 -> d(root)/dx = 6 (the two product paths sum).
    let (mut tape, ids) = tape_with(&[Array::scalar(3.0)]);
    let sq = tape.mul(ids[0], ids[0]).unwrap();
    let grads = tape.backward(sq).unwrap();
    assert_eq!(grads.get(ids[0]).unwrap(), &[6.0]);
}

#[test]
fn softmax_sum_has_zero_gradient() {
    // sum(softmax(x)) == 1 identically, so the gradient must vanish.
    let mut rng = rng_for(15, Stream::Test);
    let x = Array::rand_uniform(&[6], -2.0, 2.0, &mut rng);
    let (mut tape, ids) = tape_with(&[x]);
    let s = tape.softmax(ids[0], 0).unwrap();
    let root = tape.sum(s, None).unwrap();
    let grads = tape.backward(root).unwrap();
    for &g in grads.get(ids[0]).unwrap() {
        assert!(g.abs() < 1e-12, "gradient should vanish, got {g}");
    }
}

#[test]
fn concat_backward_splits_gradients_exactly() {
    let a = Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Array::new(vec![1, 2], vec![5.0, 6.0]).unwrap();
    let (mut tape, ids) = tape_with(&[a, b]);
    let cat = tape.concat(&[ids[0], ids[1]], 0).unwrap();
    // Weight each entry differently so the split is observable.
    let w = tape
        .constant(Array::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
        .unwrap();
    let prod = tape.mul(cat, w).unwrap();
    let root = tape.sum(prod, None).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(ids[0]).unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(grads.get(ids[1]).unwrap(), &[5.0, 6.0]);
}

#[test]
fn detached_leaf_reads_back_zero_gradient() {
    let (mut tape, ids) = tape_with(&[Array::scalar(2.0)]);
    let c = tape.constant(Array::scalar(5.0)).unwrap();
    let prod = tape.mul(ids[0], c).unwrap();
    let grads = tape.backward(prod).unwrap();
    assert_eq!(grads.get(ids[0]).unwrap(), &[5.0]);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get_or_zeros(&tape, c).data(), &[0.0]);
}

#[test]
fn gradient_accumulates_over_shared_subexpressions() {
    // y = x + x; root = sum(y * y) = 4 x^2 -> d/dx = 8x.
    let (mut tape, ids) = tape_with(&[Array::scalar(1.5)]);
    let y = tape.add(ids[0], ids[0]).unwrap();
    let yy = tape.mul(y, y).unwrap();
    let grads = tape.backward(yy).unwrap();
    assert_eq!(grads.get(ids[0]).unwrap(), &[12.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let (tape, ids) = tape_with(&[Array::zeros(&[2, 2])]);
    assert!(matches!(
        tape.backward(ids[0]),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn dropout_backward_applies_the_stored_mask() {
    let x = Array::filled(&[1, 64], 2.0);
    let (mut tape, ids) = tape_with(&[x]);
    let mut rng = rng_for(4, Stream::Dropout);
    let p = 0.5;
    let y = tape.dropout(ids[0], p, &mut rng).unwrap();
    let root = tape.sum(y, None).unwrap();
    let grads = tape.backward(root).unwrap();
    let g = grads.get(ids[0]).unwrap();
    let out = tape.value(y).data();
    for i in 0..64 {
        let expected = if out[i] == 0.0 { 0.0 } else { 2.0 };
        assert_close(g[i], expected, 1e-12, "dropout grad");
    }
}

// ===== Finite-difference verification of every primitive =====

/// Reduce an arbitrary tensor to a scalar with fixed pseudo-random weights so
/// every output coordinate influences the root differently.
fn weighted_sum(tape: &mut Tape, x: TensorId) -> crate::error::Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * ((i * 7919 % 23) as f64)).collect();
    let wid = tape.constant(Array::new(shape, w)?)?;
    let prod = tape.mul(x, wid)?;
    tape.sum(prod, None)
}

fn check_primitive(
    name: &str,
    prim: Primitive,
    inputs: Vec<Array>,
) {
    let report = grad_check_multi(
        |tape, ids| {
            let out = tape.apply(&prim, ids)?;
            weighted_sum(tape, out)
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap_or_else(|e| panic!("{name}: grad check failed to run: {e}"));
    assert!(
        report.passed,
        "{name}: max rel err {:.3e} (tol {TOL:.0e}), {} failing coords",
        report.max_rel_err,
        report.failures().count()
    );
}

#[test]
fn every_primitive_matches_finite_differences_on_random_shapes() {
    let mut rng = rng_for(99, Stream::GradCheck);
    // Five random instances per primitive, varying shapes each round.
    for round in 0..5u32 {
        let r = 2 + (round as usize % 3);
        let c = 3 + (round as usize % 4);
        let gen = |rng: &mut _, shape: &[usize], lo: f64, hi: f64| {
            Array::rand_uniform(shape, lo, hi, rng)
        };

        let a = gen(&mut rng, &[r, c], -2.0, 2.0);
        let b = gen(&mut rng, &[c, r], -2.0, 2.0);
        check_primitive("matmul", Primitive::Matmul, vec![a.clone(), b]);

        let same = gen(&mut rng, &[r, c], -2.0, 2.0);
        check_primitive("add/same", Primitive::Add, vec![a.clone(), same.clone()]);
        check_primitive("mul/same", Primitive::Mul, vec![a.clone(), same]);
        let row = gen(&mut rng, &[c], -2.0, 2.0);
        check_primitive("add/row", Primitive::Add, vec![a.clone(), row.clone()]);
        check_primitive("mul/row", Primitive::Mul, vec![a.clone(), row]);
        let col = gen(&mut rng, &[r, 1], -2.0, 2.0);
        check_primitive("add/col", Primitive::Add, vec![a.clone(), col.clone()]);
        check_primitive("mul/col", Primitive::Mul, vec![a.clone(), col]);
        let scalar = gen(&mut rng, &[1], -2.0, 2.0);
        check_primitive("add/scalar", Primitive::Add, vec![a.clone(), scalar.clone()]);
        check_primitive("mul/scalar", Primitive::Mul, vec![a.clone(), scalar]);

        for axis in 0..2 {
            let p1 = gen(&mut rng, &[r, c], -2.0, 2.0);
            let mut s2 = vec![r, c];
            s2[axis] = 2;
            let p2 = gen(&mut rng, &s2, -2.0, 2.0);
            check_primitive("concat", Primitive::Concat { axis }, vec![p1.clone(), p2]);
            check_primitive(
                "slice",
                Primitive::Slice {
                    axis,
                    start: 1,
                    len: [r, c][axis] - 1,
                },
                vec![p1.clone()],
            );
            check_primitive("sum", Primitive::Sum { axis: Some(axis) }, vec![p1.clone()]);
            check_primitive("mean", Primitive::Mean { axis: Some(axis) }, vec![p1.clone()]);
            check_primitive("softmax", Primitive::Softmax { axis }, vec![p1.clone()]);
            check_primitive("log_softmax", Primitive::LogSoftmax { axis }, vec![p1]);
        }
        let x = gen(&mut rng, &[r, c], -2.0, 2.0);
        check_primitive("sum/all", Primitive::Sum { axis: None }, vec![x.clone()]);
        check_primitive("mean/all", Primitive::Mean { axis: None }, vec![x.clone()]);
        check_primitive("sigmoid", Primitive::Sigmoid, vec![x.clone()]);
        check_primitive("tanh", Primitive::Tanh, vec![x.clone()]);
        check_primitive("exp", Primitive::Exp, vec![x.clone()]);
        check_primitive("transpose", Primitive::Transpose, vec![x.clone()]);
        check_primitive("scale", Primitive::Scale { factor: -1.7 }, vec![x.clone()]);
        check_primitive("l2_normalize", Primitive::L2Normalize, vec![x]);

        let pos = gen(&mut rng, &[r, c], 0.5, 2.5);
        check_primitive("log", Primitive::Log, vec![pos]);

        // Keep relu-family inputs away from the kink at 0.
        let mut away = gen(&mut rng, &[r, c], 0.1, 2.0);
        for (i, v) in away.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        check_primitive("relu", Primitive::Relu, vec![away.clone()]);
        check_primitive(
            "leaky_relu",
            Primitive::LeakyRelu { slope: 0.01 },
            vec![away],
        );

        let xn = gen(&mut rng, &[r, c], -2.0, 2.0);
        let gain = gen(&mut rng, &[c], 0.5, 1.5);
        let bias = gen(&mut rng, &[c], -0.5, 0.5);
        check_primitive(
            "layer_norm",
            Primitive::LayerNorm { eps: 1e-5 },
            vec![xn, gain, bias],
        );
    }
}

#[test]
fn relu_kink_coordinates_are_excluded_not_failed() {
    let x = Array::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
    let report = grad_check(
        |tape, id| {
            let r = tape.relu(id)?;
            tape.sum(r, None)
        },
        &x,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(report.passed);
    assert_eq!(report.excluded, 1);
    let kink = report.coords.iter().find(|c| c.index == 1).unwrap();
    assert!(kink.excluded, "coordinate at the kink must be excluded");
    // The analytic subgradient at 0 follows the negative side.
    assert_eq!(kink.analytic, 0.0);
}

#[test]
fn leaky_relu_subgradient_at_zero_uses_negative_slope() {
    let x = Array::new(vec![2], vec![0.0, 2.0]).unwrap();
    let (mut tape, ids) = tape_with(&[x]);
    let y = tape.leaky_relu(ids[0], 0.01).unwrap();
    let root = tape.sum(y, None).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(ids[0]).unwrap(), &[0.01, 1.0]);
}

#[test]
fn grad_check_rejects_non_scalar_outputs() {
    let x = Array::zeros(&[2, 2]);
    let res = grad_check(|_tape, id| Ok(id), &x, EPS, TOL);
    assert!(matches!(res, Err(Error::InvalidArgument(_))));
}

#[test]
fn composed_expression_passes_grad_check() {
    // A three-layer composition touching matmul, layer_norm, softmax, and a
    // contrastive-style log pick, as a smoke test of rule interaction.
    let mut rng = rng_for(123, Stream::GradCheck);
    let x = Array::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let w = Array::rand_uniform(&[4, 4], -0.8, 0.8, &mut rng);
    let gain = Array::rand_uniform(&[4], 0.8, 1.2, &mut rng);
    let bias = Array::rand_uniform(&[4], -0.2, 0.2, &mut rng);
    let report = grad_check_multi(
        |tape, ids| {
            let h = tape.matmul(ids[0], ids[1])?;
            let n = tape.layer_norm(h, ids[2], ids[3], 1e-5)?;
            let t = tape.tanh(n)?;
            let nrm = tape.l2_normalize(t)?;
            let sims = tape.transpose(nrm)?;
            let gram = tape.matmul(nrm, sims)?;
            let lp = tape.log_softmax(gram, 1)?;
            let eye = tape.constant(Array::eye(3))?;
            let picked = tape.mul(lp, eye)?;
            let s = tape.sum(picked, None)?;
            tape.scale(s, -1.0)
        },
        &[x, w, gain, bias],
        EPS,
        TOL,
    )
    .unwrap();
    assert!(
        report.passed,
        "composition: max rel err {:.3e}",
        report.max_rel_err
    );
}

// ===== Adam =====

#[test]
fn adam_first_step_moves_by_about_lr_against_the_gradient() {
    let mut params = ParamSet::new();
    params.insert("w", Array::scalar(1.0)).unwrap();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), Array::scalar(1.0));
    let mut opt = Adam::new(AdamConfig {
        lr: 0.1,
        ..AdamConfig::default()
    })
    .unwrap();
    opt.step(&mut params, &grads).unwrap();
    // Bias correction makes m_hat = g and v_hat = g^2 on step one, so the
    // update is lr * g / (|g| + eps) ~= lr.
    let w = params.get("w").unwrap().data()[0];
    assert_close(w, 0.9, 1e-6, "first adam step");
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adam_leaves_zero_gradient_params_unchanged_from_fresh_state() {
    let mut params = ParamSet::new();
    params.insert("a", Array::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
    params.insert("b", Array::scalar(3.0)).unwrap();
    let mut grads = BTreeMap::new();
    grads.insert("b".to_string(), Array::scalar(1.0));
    let mut opt = Adam::new(AdamConfig::default()).unwrap();
    opt.step(&mut params, &grads).unwrap();
    assert_eq!(params.get("a").unwrap().data(), &[1.0, -2.0]);
    assert!(params.get("b").unwrap().data()[0] < 3.0);
}

#[test]
fn adam_descends_a_quadratic() {
    // Minimize f(w) = (w - 2)^2; gradient 2(w - 2).
    let mut params = ParamSet::new();
    params.insert("w", Array::scalar(-1.0)).unwrap();
    let mut opt = Adam::new(AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    })
    .unwrap();
    for _ in 0..500 {
        let w = params.get("w").unwrap().data()[0];
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Array::scalar(2.0 * (w - 2.0)));
        opt.step(&mut params, &grads).unwrap();
    }
    let w = params.get("w").unwrap().data()[0];
    assert!((w - 2.0).abs() < 1e-2, "adam should converge near 2, got {w}");
}

#[test]
fn adam_rejects_mismatched_gradient_shape_and_unknown_names() {
    let mut params = ParamSet::new();
    params.insert("w", Array::zeros(&[2, 2])).unwrap();
    let mut opt = Adam::new(AdamConfig::default()).unwrap();
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), Array::zeros(&[2, 3]));
    assert!(opt.step(&mut params, &grads).is_err());
    let mut grads2 = BTreeMap::new();
    grads2.insert("nope".to_string(), Array::zeros(&[2, 2]));
    assert!(opt.step(&mut params, &grads2).is_err());
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut params = ParamSet::new();
        params.insert("w", Array::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        for step in 0..50 {
            let g: Vec<f64> = params
                .get("w")
                .unwrap()
                .data()
                .iter()
                .map(|w| w.sin() + step as f64 * 1e-3)
                .collect();
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), Array::new(vec![3], g).unwrap());
            opt.step(&mut params, &grads).unwrap();
        }
        params.get("w").unwrap().data().to_vec()
    };
    assert_eq!(run(), run());
}
