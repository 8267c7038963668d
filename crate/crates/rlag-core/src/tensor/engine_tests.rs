use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_flat, finite_diff_gradient, max_grad_error};
use super::{Tape, Tensor, Var};
use crate::error::Error;

const LN4: f64 = 1.386_294_361_119_890_6;

fn leaf(tape: &mut Tape, t: Tensor) -> Var {
    tape.leaf(Arc::new(t), true)
}

// -- forward oracles ----------------------------------------------------------

#[test]
fn log_softmax_uniform_row() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, Tensor::vector(vec![0.0; 4]));
    let y = tape.log_softmax(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v + LN4).abs() < 1e-12, "expected -ln4, got {v}");
    }
}

#[test]
fn matmul_scalar_product() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, Tensor::matrix(1, 1, vec![2.0]).unwrap());
    let b = leaf(&mut tape, Tensor::matrix(1, 1, vec![3.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[6.0]);
}

#[test]
fn layer_norm_matches_scalar_recomputation() {
    // oracle: direct (x - mean) / sqrt(var + eps) in plain f64
    let xs = [1.0_f64, 2.0, 3.0];
    let eps = 1e-5;
    let mean = xs.iter().sum::<f64>() / 3.0;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
    let expected: Vec<f64> = xs.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();

    let mut tape = Tape::new();
    let x = leaf(&mut tape, Tensor::vector(xs.to_vec()));
    let y = tape.layer_norm(x, eps).unwrap();
    for (got, want) in tape.value(y).data().iter().zip(&expected) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn exp_log_softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..40).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let mut tape = Tape::new();
    let x = leaf(&mut tape, Tensor::matrix(5, 8, data).unwrap());
    let ls = tape.log_softmax(x).unwrap();
    let p = tape.exp(ls);
    let t = tape.value(p);
    for r in 0..5 {
        let s: f64 = (0..8).map(|c| t.at2(r, c)).sum();
        assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
    }
}

// -- backward closed forms ----------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, Tensor::vector(vec![4.0, -1.0, 0.5]));
    let s = tape.sum_all(x);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_log_softmax_pick_is_softmax_minus_onehot() {
    let xs = vec![0.3, -1.2, 2.0, 0.7];
    let k = 2;
    let mut tape = Tape::new();
    let x = leaf(&mut tape, Tensor::matrix(1, 4, xs.clone()).unwrap());
    let ls = tape.log_softmax(x).unwrap();
    let picked = tape.gather_items(ls, &[(0, k)]).unwrap();
    let root = tape.sum_all(picked);
    let grads = tape.backward(root).unwrap();

    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = xs.iter().map(|v| (v - m).exp()).sum();
    let got = grads.get(x).unwrap().data();
    for (j, &xj) in xs.iter().enumerate() {
        let softmax_j = (xj - m).exp() / z;
        let want = if j == k { 1.0 - softmax_j } else { -softmax_j };
        assert!((got[j] - want).abs() < 1e-12, "coord {j}: {} vs {want}", got[j]);
    }
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w1: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |w1d: &[f64], w2d: &[f64]| -> crate::Result<f64> {
        let mut tape = Tape::new();
        let xv = leaf(&mut tape, Tensor::matrix(1, 4, x.clone()).unwrap());
        let w1v = leaf(&mut tape, Tensor::matrix(4, 8, w1d.to_vec()).unwrap());
        let w2v = leaf(&mut tape, Tensor::matrix(8, 1, w2d.to_vec()).unwrap());
        let h = tape.matmul(xv, w1v)?;
        let h = tape.gelu(h);
        let out = tape.matmul(h, w2v)?;
        let out = tape.sum_all(out);
        tape.scalar_value(out)
    };

    // analytic
    let mut tape = Tape::new();
    let xv = leaf(&mut tape, Tensor::matrix(1, 4, x.clone()).unwrap());
    let w1v = leaf(&mut tape, Tensor::matrix(4, 8, w1.clone()).unwrap());
    let w2v = leaf(&mut tape, Tensor::matrix(8, 1, w2.clone()).unwrap());
    let h = tape.matmul(xv, w1v).unwrap();
    let h = tape.gelu(h);
    let out = tape.matmul(h, w2v).unwrap();
    let root = tape.sum_all(out);
    let grads = tape.backward(root).unwrap();

    let fd1 = finite_diff_flat(|p| eval(p, &w2), &w1, 1e-5).unwrap();
    let fd2 = finite_diff_flat(|p| eval(&w1, p), &w2, 1e-5).unwrap();
    let e1 = max_grad_error(grads.get(w1v).unwrap().data(), &fd1);
    let e2 = max_grad_error(grads.get(w2v).unwrap().data(), &fd2);
    assert!(e1 < 1e-6 && e2 < 1e-6, "mlp grad errors {e1} / {e2}");
}

// -- finite-difference oracle sanity -------------------------------------------

#[test]
fn finite_diff_of_square_is_two_p() {
    let p = Tensor::scalar(3.0);
    let g = finite_diff_gradient(|t| Ok(t.item()? * t.item()?), &p, 1e-5).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-8);
}

#[test]
fn finite_diff_of_constant_is_zero() {
    let p = Tensor::vector(vec![1.0, -2.0, 7.5]);
    let g = finite_diff_gradient(|_| Ok(42.0), &p, 1e-5).unwrap();
    assert!(g.data().iter().all(|v| *v == 0.0));
}

// -- errors --------------------------------------------------------------------

#[test]
fn shape_mismatch_names_primitive() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = leaf(&mut tape, Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    match tape.matmul(a, b) {
        Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, Tensor::vector(vec![1.0, 0.0]));
    assert!(matches!(tape.log(a), Err(Error::Domain { op: "log", .. })));
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
}

#[test]
fn second_backward_is_rejected() {
    let mut tape = Tape::new();
    let a = leaf(&mut tape, Tensor::scalar(2.0));
    let y = tape.scalar_mul(a, 3.0);
    tape.backward(y).unwrap();

    let mut tape2 = Tape::new();
    let a2 = leaf(&mut tape2, Tensor::scalar(2.0));
    let y2 = tape2.scalar_mul(a2, 3.0);
    tape2.backward(y2).unwrap();
    assert!(matches!(tape2.backward(y2), Err(Error::Contract(_))));
}

// -- property: every primitive agrees with finite differences ------------------

/// Builds a scalar from an op output by weighting with fixed pseudo-random
/// coefficients, so every output entry influences the root.
fn weighted_scalar(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let t = tape.value(out);
    if t.is_scalar() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w: Vec<f64> = (0..t.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(Tensor::new(t.shape().to_vec(), w).unwrap());
    let prod = tape.mul(out, w).unwrap();
    tape.sum_all(prod)
}

fn check_primitive<F>(name: &str, seed: u64, input: Tensor, build: F)
where
    F: Fn(&mut Tape, Var) -> crate::Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, input.clone());
        let out = build(&mut tape, x).unwrap();
        let root = weighted_scalar(&mut tape, out, seed);
        let grads = tape.backward(root).unwrap();
        grads.get(x).unwrap().clone()
    };
    let shape = input.shape().to_vec();
    let fd = finite_diff_flat(
        |flat| {
            let mut tape = Tape::new();
            let x = tape.leaf(Arc::new(Tensor::new(shape.clone(), flat.to_vec())?), false);
            let out = build(&mut tape, x)?;
            let root = weighted_scalar(&mut tape, out, seed);
            tape.scalar_value(root)
        },
        input.data(),
        1e-5,
    )
    .unwrap();
    let err = max_grad_error(analytic.data(), &fd);
    assert!(err < 1e-5, "{name} seed {seed}: max grad error {err}");
}

#[test]
fn every_primitive_matches_finite_differences_over_100_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
        };

        let other = rand_mat(&mut rng, 3, 4);
        check_primitive("matmul-lhs", seed, rand_mat(&mut rng, 2, 3), |t, x| {
            let b = t.constant(other.clone());
            t.matmul(x, b)
        });
        let lhs = rand_mat(&mut rng, 2, 3);
        check_primitive("matmul-rhs", seed, rand_mat(&mut rng, 3, 4), |t, x| {
            let a = t.constant(lhs.clone());
            t.matmul(a, x)
        });
        check_primitive("transpose", seed, rand_mat(&mut rng, 3, 5), |t, x| t.transpose(x));
        let addend = rand_mat(&mut rng, 3, 3);
        check_primitive("add", seed, rand_mat(&mut rng, 3, 3), |t, x| {
            let b = t.constant(addend.clone());
            t.add(x, b)
        });
        check_primitive("add-scalar", seed, rand_mat(&mut rng, 2, 3), |t, x| {
            Ok(t.add_scalar(x, 0.37))
        });
        let factor = rand_mat(&mut rng, 3, 3);
        check_primitive("mul", seed, rand_mat(&mut rng, 3, 3), |t, x| {
            let b = t.constant(factor.clone());
            t.mul(x, b)
        });
        check_primitive("scalar-mul", seed, rand_mat(&mut rng, 2, 4), |t, x| {
            Ok(t.scalar_mul(x, -1.7))
        });
        check_primitive("exp", seed, rand_mat(&mut rng, 2, 3), |t, x| Ok(t.exp(x)));
        let pos = Tensor::matrix(
            2,
            3,
            (0..6).map(|_| rng.gen_range(0.2..3.0)).collect(),
        )
        .unwrap();
        check_primitive("log", seed, pos, |t, x| t.log(x));
        check_primitive("log-softmax", seed, rand_mat(&mut rng, 3, 6), |t, x| {
            t.log_softmax(x)
        });
        check_primitive("gather-rows", seed, rand_mat(&mut rng, 5, 3), |t, x| {
            t.gather_rows(x, &[4, 0, 0, 2])
        });
        check_primitive("gather-items", seed, rand_mat(&mut rng, 3, 4), |t, x| {
            t.gather_items(x, &[(0, 1), (2, 3), (0, 1)])
        });
        check_primitive("layer-norm", seed, rand_mat(&mut rng, 3, 6), |t, x| {
            t.layer_norm(x, 1e-5)
        });
        check_primitive("gelu", seed, rand_mat(&mut rng, 2, 5), |t, x| Ok(t.gelu(x)));
        let tail = rand_mat(&mut rng, 3, 2);
        check_primitive("concat-cols", seed, rand_mat(&mut rng, 3, 4), |t, x| {
            let b = t.constant(tail.clone());
            t.concat_cols(&[x, b])
        });
        check_primitive("slice-rows", seed, rand_mat(&mut rng, 5, 3), |t, x| {
            t.slice_rows(x, 1..4)
        });
        check_primitive("slice-cols", seed, rand_mat(&mut rng, 3, 6), |t, x| {
            t.slice_cols(x, 2..5)
        });
        check_primitive("sum", seed, rand_mat(&mut rng, 3, 4), |t, x| Ok(t.sum_all(x)));
        check_primitive("mean", seed, rand_mat(&mut rng, 3, 4), |t, x| Ok(t.mean_all(x)));
        check_primitive("softplus", seed, rand_mat(&mut rng, 2, 4), |t, x| {
            Ok(t.softplus(x))
        });
        // keep sampled values away from the clamp kink where the derivative
        // jumps and finite differences are meaningless
        let clamped = Tensor::matrix(
            2,
            4,
            (0..8)
                .map(|_| {
                    let v: f64 = rng.gen_range(-2.0..2.0);
                    if (v - 0.25).abs() < 5e-2 {
                        v + 0.2
                    } else {
                        v
                    }
                })
                .collect(),
        )
        .unwrap();
        check_primitive("clamp-max", seed, clamped.clone(), |t, x| {
            Ok(t.clamp_max(x, 0.25))
        });
        check_primitive("clamp-min", seed, clamped, |t, x| Ok(t.clamp_min(x, 0.25)));
    }
}

#[test]
fn clamp_gradient_is_exactly_zero_in_constant_branch() {
    let mut tape = Tape::new();
    let x = leaf(&mut tape, Tensor::vector(vec![0.5, -0.5]));
    let y = tape.clamp_max(x, 0.0); // 0.5 clipped, -0.5 passes
    let root = tape.sum_all(y);
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
}
