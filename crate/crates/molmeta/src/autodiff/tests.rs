use super::params::{accumulate, Linear, Mlp, ParamSet};
use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Central-difference gradient of a scalar function of a flat vector.
fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe);
        probe[i] = x[i] - eps;
        let lo = f(&probe);
        probe[i] = x[i];
        g.push((hi - lo) / (2.0 * eps));
    }
    g
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (&a, &b)) in got.iter().zip(want).enumerate() {
        let scale = 1.0_f64.max(b.abs());
        assert!(
            (a - b).abs() <= tol * scale,
            "component {i}: got {a}, want {b}"
        );
    }
}

#[test]
fn sigmoid_value_and_grad_at_zero() {
    let tape = Tape::new();
    let x = tape.input(Tensor::scalar(0.0).with_grad());
    let y = x.sigmoid();
    assert_eq!(y.item(), 0.5);
    tape.backward(y).unwrap();
    assert_eq!(x.grad().item(), 0.25);
}

#[test]
fn square_grad_is_2x() {
    let tape = Tape::new();
    let x = tape.input(Tensor::scalar(3.0).with_grad());
    let y = x * x;
    assert_eq!(y.item(), 9.0);
    tape.backward(y).unwrap();
    assert_eq!(x.grad().item(), 6.0);
}

#[test]
fn softmax_uniform_and_known_ratios() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[1.0, 1.0, 1.0, 1.0]));
    let s = tape.softmax(x, 0).unwrap();
    assert_close(s.value().data(), &[0.25; 4], 1e-15);

    let y = tape.constant(Tensor::vector(&[0.0, 2f64.ln(), 4f64.ln()]));
    let s = tape.softmax(y, 0).unwrap();
    assert_close(
        s.value().data(),
        &[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0],
        1e-12,
    );
}

#[test]
fn softmax_is_shift_invariant() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(&[500.0, 501.0, 502.0]));
    let b = tape.constant(Tensor::vector(&[0.0, 1.0, 2.0]));
    let sa = tape.softmax(a, 0).unwrap();
    let sb = tape.softmax(b, 0).unwrap();
    assert_close(sa.value().data(), sb.value().data(), 1e-15);
    let total: f64 = sa.value().data().iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn cosine_similarity_frozen_cases() {
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(&[1.0, 2.0, 2.0]));
    assert!((tape.cosine_sim(v, v).unwrap().item() - 1.0).abs() < 1e-12);

    let a = tape.constant(Tensor::vector(&[1.0, 0.0]));
    let b = tape.constant(Tensor::vector(&[0.0, 3.0]));
    assert_eq!(tape.cosine_sim(a, b).unwrap().item(), 0.0);

    let c = tape.constant(Tensor::vector(&[2.0, 0.0]));
    let d = tape.constant(Tensor::vector(&[-1.0, 0.0]));
    assert!((tape.cosine_sim(c, d).unwrap().item() + 1.0).abs() < 1e-12);

    let z = tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
    assert_eq!(tape.cosine_sim(v, z).unwrap_err(), AutodiffError::ZeroVector);
}

#[test]
fn cosine_grad_matches_finite_differences() {
    let a0 = [0.3, -1.2, 0.7];
    let b0 = [1.1, 0.4, -0.6];
    let eval = |a: &[f64], b: &[f64]| {
        let tape = Tape::new();
        let va = tape.constant(Tensor::vector(a));
        let vb = tape.constant(Tensor::vector(b));
        tape.cosine_sim(va, vb).unwrap().item()
    };
    let tape = Tape::new();
    let va = tape.input(Tensor::vector(&a0).with_grad());
    let vb = tape.input(Tensor::vector(&b0).with_grad());
    let c = tape.cosine_sim(va, vb).unwrap();
    tape.backward(c).unwrap();
    let fd_a = fd_grad(|a| eval(a, &b0), &a0, 1e-6);
    let fd_b = fd_grad(|b| eval(&a0, b), &b0, 1e-6);
    assert_close(va.grad().data(), &fd_a, 1e-7);
    assert_close(vb.grad().data(), &fd_b, 1e-7);
}

#[test]
fn matmul_known_product_and_fd_grads() {
    let tape = Tape::new();
    let a = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).with_grad());
    let b = tape.input(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).with_grad());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
    let loss = c.sigmoid().sum();
    tape.backward(loss).unwrap();

    let a0 = [1.0, 2.0, 3.0, 4.0];
    let b0 = [5.0, 6.0, 7.0, 8.0];
    let eval = |ad: &[f64], bd: &[f64]| {
        let t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, ad.to_vec()));
        let b = t.constant(Tensor::matrix(2, 2, bd.to_vec()));
        t.matmul(a, b).unwrap().sigmoid().sum().item()
    };
    assert_close(a.grad().data(), &fd_grad(|x| eval(x, &b0), &a0, 1e-6), 1e-6);
    assert_close(b.grad().data(), &fd_grad(|x| eval(&a0, x), &b0, 1e-6), 1e-6);
}

#[test]
fn scalar_broadcast_add_reduces_grad() {
    let s0 = 0.4;
    let v0 = [1.0, -2.0, 0.5];
    let eval = |s: f64, v: &[f64]| {
        let t = Tape::new();
        let sv = t.constant(Tensor::scalar(s));
        let vv = t.constant(Tensor::vector(v));
        let z = sv + vv;
        (z * z).sum().item()
    };
    let tape = Tape::new();
    let s = tape.input(Tensor::scalar(s0).with_grad());
    let v = tape.input(Tensor::vector(&v0).with_grad());
    let z = s + v;
    let loss = (z * z).sum();
    tape.backward(loss).unwrap();
    let fd_s = fd_grad(|x| eval(x[0], &v0), &[s0], 1e-6);
    let fd_v = fd_grad(|x| eval(s0, x), &v0, 1e-6);
    assert_close(s.grad().data(), &fd_s, 1e-7);
    assert_close(v.grad().data(), &fd_v, 1e-7);
}

#[test]
fn mlp_grads_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let mut set = ParamSet::new();
    let mlp = Mlp::init(&mut set, 3, 4, 2, &mut rng);
    let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // loss as a function of one flattened parameter tensor
    let loss_at = |set: &ParamSet, x: &[f64]| {
        let tape = Tape::new();
        let leaves = set.leaves(&tape);
        let xin = tape.constant(Tensor::vector(x));
        let out = mlp.apply(&leaves, xin).unwrap();
        out.sigmoid().sum().item()
    };

    let tape = Tape::new();
    let leaves = set.leaves(&tape);
    let xin = tape.input(Tensor::vector(&x0).with_grad());
    let out = mlp.apply(&leaves, xin).unwrap();
    let loss = out.sigmoid().sum();
    tape.backward(loss).unwrap();
    let grads = set.read_grads(&leaves);

    for (pi, grad) in grads.iter().enumerate() {
        let base = set.get(super::params::ParamId(pi)).data().to_vec();
        let fd = fd_grad(
            |p| {
                let mut probe = set.clone();
                probe
                    .get_mut(super::params::ParamId(pi))
                    .data_mut()
                    .copy_from_slice(p);
                loss_at(&probe, &x0)
            },
            &base,
            1e-5,
        );
        assert_close(grad.data(), &fd, 1e-6);
    }
    let fd_x = fd_grad(|x| loss_at(&set, x), &x0, 1e-5);
    assert_close(xin.grad().data(), &fd_x, 1e-6);
}

#[test]
fn abs_subgradient_zero_at_kink() {
    let tape = Tape::new();
    let x = tape.input(Tensor::vector(&[-2.0, 0.0, 3.0]).with_grad());
    let loss = x.abs().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn leaky_relu_negative_branch_at_zero() {
    let tape = Tape::new();
    let x = tape.input(Tensor::vector(&[-1.0, 0.0, 2.0]).with_grad());
    let y = x.leaky_relu();
    assert_eq!(y.value().data(), &[-LEAKY_SLOPE, 0.0, 2.0]);
    let loss = y.sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().data(), &[LEAKY_SLOPE, LEAKY_SLOPE, 1.0]);
}

#[test]
fn clamp_gradient_is_passthrough_inside_zero_outside() {
    let tape = Tape::new();
    let x = tape.input(Tensor::vector(&[-0.5, 0.3, 1.8]).with_grad());
    let y = tape.clamp(x, 0.0, 1.0);
    assert_eq!(y.value().data(), &[0.0, 0.3, 1.0]);
    let loss = y.sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn detach_blocks_gradient_flow() {
    let tape = Tape::new();
    let x = tape.input(Tensor::scalar(2.0).with_grad());
    let through = x * x;
    let blocked = x.detach() * x.detach();
    let loss = through + blocked;
    tape.backward(loss).unwrap();
    // only the live branch contributes: d(x^2)/dx = 4
    assert_eq!(x.grad().item(), 4.0);
}

#[test]
fn row_select_scatters_gradient() {
    let tape = Tape::new();
    let m = tape.input(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
    let r = tape.row(m, 1);
    assert_eq!(r.value().data(), &[3.0, 4.0]);
    let loss = (r * r).sum();
    tape.backward(loss).unwrap();
    assert_eq!(m.grad().data(), &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
}

#[test]
fn stack_and_concat_route_gradients() {
    let tape = Tape::new();
    let a = tape.input(Tensor::scalar(1.0).with_grad());
    let b = tape.input(Tensor::scalar(2.0).with_grad());
    let v = tape.stack(&[a, b]).unwrap();
    let w = tape.input(Tensor::vector(&[3.0, 4.0]).with_grad());
    let cat = tape.concat(v, w).unwrap();
    assert_eq!(cat.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    let weights = tape.constant(Tensor::vector(&[10.0, 20.0, 30.0, 40.0]));
    let loss = (cat * weights).sum();
    tape.backward(loss).unwrap();
    assert_eq!(a.grad().item(), 10.0);
    assert_eq!(b.grad().item(), 20.0);
    assert_eq!(w.grad().data(), &[30.0, 40.0]);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(&[1.0, 2.0]));
    let b = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    let err = tape.add(a, b).unwrap_err();
    match err {
        AutodiffError::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "add");
            assert_eq!(lhs, vec![2]);
            assert_eq!(rhs, vec![3]);
        }
        other => panic!("unexpected error {other:?}"),
    }
    let m = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
    assert!(tape.matmul(m, m).is_err());
}

#[test]
fn backward_rejects_vector_loss() {
    let tape = Tape::new();
    let x = tape.input(Tensor::vector(&[1.0, 2.0]).with_grad());
    let y = x * x;
    assert_eq!(
        tape.backward(y),
        Err(AutodiffError::NotScalarLoss(vec![2]))
    );
}

#[test]
fn repeated_backward_is_bit_identical() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut set = ParamSet::new();
    let lin = Linear::init(&mut set, 4, 3, &mut rng);
    let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let tape = Tape::new();
    let leaves = set.leaves(&tape);
    let x = tape.constant(Tensor::vector(&x0));
    let y = lin.apply(&leaves, x).unwrap();
    let loss = y.sigmoid().sum();
    tape.backward(loss).unwrap();
    let first: Vec<Vec<u64>> = set
        .read_grads(&leaves)
        .iter()
        .map(|g| g.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    tape.backward(loss).unwrap();
    let second: Vec<Vec<u64>> = set
        .read_grads(&leaves)
        .iter()
        .map(|g| g.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(first, second);
}

#[test]
fn accumulate_sums_gradient_vectors() {
    let mut acc = vec![Tensor::zeros(&[2]), Tensor::zeros(&[])];
    let g = vec![Tensor::vector(&[1.0, 2.0]), Tensor::scalar(3.0)];
    accumulate(&mut acc, &g, 0.5);
    accumulate(&mut acc, &g, 0.5);
    assert_eq!(acc[0].data(), &[1.0, 2.0]);
    assert_eq!(acc[1].item(), 3.0);
}

#[test]
fn stepped_leaves_original_untouched() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut set = ParamSet::new();
    let id = set.add(uniform_like(&mut rng));
    let grads = vec![Tensor::vector(&[1.0, 1.0])];
    let before = set.get(id).data().to_vec();
    let adapted = set.stepped(&grads, -0.1);
    assert_eq!(set.get(id).data(), &before[..]);
    for (a, b) in adapted.get(id).data().iter().zip(&before) {
        assert!((a - (b - 0.1)).abs() < 1e-15);
    }
}

fn uniform_like(rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::vector(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn small_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0..5.0f64, 2..8)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in small_vec()) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::vector(&v));
            let s = tape.softmax(x, 0).unwrap();
            let data = s.value();
            let total: f64 = data.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(data.data().iter().all(|&p| p > 0.0 && p < 1.0 + 1e-12));
        }

        #[test]
        fn sigmoid_stays_in_open_unit_interval(v in small_vec()) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::vector(&v));
            let s = x.sigmoid();
            prop_assert!(s.value().data().iter().all(|&p| p > 0.0 && p < 1.0));
        }

        #[test]
        fn sum_grad_is_all_ones(v in small_vec()) {
            let tape = Tape::new();
            let x = tape.input(Tensor::vector(&v).with_grad());
            let loss = x.sum();
            tape.backward(loss).unwrap();
            prop_assert!(x.grad().data().iter().all(|&g| g == 1.0));
        }

        #[test]
        fn mean_grad_is_uniform(v in small_vec()) {
            let tape = Tape::new();
            let x = tape.input(Tensor::vector(&v).with_grad());
            let loss = x.mean();
            tape.backward(loss).unwrap();
            let n = v.len() as f64;
            prop_assert!(x.grad().data().iter().all(|&g| (g - 1.0 / n).abs() < 1e-15));
        }

        #[test]
        fn product_rule_matches_fd(a in -2.0..2.0f64, b in -2.0..2.0f64) {
            let eval = |x: f64, y: f64| {
                let t = Tape::new();
                let vx = t.constant(Tensor::scalar(x));
                let vy = t.constant(Tensor::scalar(y));
                ((vx * vy).sigmoid() * vx).item()
            };
            let tape = Tape::new();
            let x = tape.input(Tensor::scalar(a).with_grad());
            let y = tape.input(Tensor::scalar(b).with_grad());
            let loss = (x * y).sigmoid() * x;
            tape.backward(loss).unwrap();
            let fd_x = fd_grad(|p| eval(p[0], b), &[a], 1e-6)[0];
            let fd_y = fd_grad(|p| eval(a, p[0]), &[b], 1e-6)[0];
            prop_assert!((x.grad().item() - fd_x).abs() < 1e-6);
            prop_assert!((y.grad().item() - fd_y).abs() < 1e-6);
        }
    }
}
