use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_check, finite_diff_check_pair};
use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn relu_and_sigmoid_values() {
    let x = t64(&[3], &[-1.0, 0.0, 2.0]);
    assert_eq!(x.relu().unwrap().data(), &[0.0, 0.0, 2.0]);
    assert_eq!(t64(&[1], &[0.0]).sigmoid().unwrap().data(), &[0.5]);
}

#[test]
fn conv_all_ones_counts_receptive_field_overlap() {
    let x = Tensor::<f32>::full(&[1, 1, 4, 4], 1.0).unwrap();
    let w = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0).unwrap();
    let y = x.conv2d(&w, None, 1, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    #[rustfmt::skip]
    let expected = [
        4.0, 6.0, 6.0, 4.0,
        6.0, 9.0, 9.0, 6.0,
        6.0, 9.0, 9.0, 6.0,
        4.0, 6.0, 6.0, 4.0,
    ];
    assert_eq!(y.data(), &expected);
}

#[test]
fn conv_stride_two_shape() {
    let x = Tensor::<f32>::zeros(&[2, 3, 8, 8]).unwrap();
    let w = Tensor::<f32>::zeros(&[5, 3, 3, 3]).unwrap();
    assert_eq!(x.conv2d(&w, None, 2, 1).unwrap().shape(), &[2, 5, 4, 4]);
    let bad = Tensor::<f32>::zeros(&[5, 2, 3, 3]).unwrap();
    assert!(matches!(x.conv2d(&bad, None, 1, 1), Err(Error::Shape { .. })));
}

#[test]
fn grad_reverse_forward_is_identity_and_backward_flips() {
    let x = t64(&[2], &[0.3, -0.7]).to_param();
    let y = x.grad_reverse(1.0).unwrap();
    assert!(y.bit_eq(&x.detach()));
    let up = t64(&[2], &[0.2, -0.5]);
    backward(&y.mul(&up).unwrap().sum().unwrap()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![-0.2, 0.5]);

    let x = t64(&[1], &[0.4]).to_param();
    let up = t64(&[1], &[0.2]);
    backward(&x.grad_reverse(0.1).unwrap().mul(&up).unwrap().sum().unwrap()).unwrap();
    assert!((x.grad().unwrap()[0] + 0.02).abs() < 1e-15);
}

#[test]
fn grad_reverse_rejects_negative_lambda() {
    let x = t64(&[1], &[1.0]);
    assert!(matches!(x.grad_reverse(-0.5), Err(Error::Config(_))));
}

#[test]
fn composed_reversals_multiply() {
    let x = t64(&[3], &[1.0, 2.0, 3.0]).to_param();
    let y = x.grad_reverse(0.5).unwrap().grad_reverse(3.0).unwrap().sum().unwrap();
    backward(&y).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.5; 3]);
}

#[test]
fn backward_examples() {
    let x = t64(&[3], &[0.1, 0.2, 0.3]).to_param();
    let s = x.sum().unwrap();
    backward(&s).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    backward(&s).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);

    let x = t64(&[2], &[1.0, 2.0]).to_param();
    backward(&x.pow(2.0).unwrap().mean().unwrap()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = t64(&[2], &[1.0, 2.0]).to_param();
    assert!(matches!(backward(&x.relu().unwrap()), Err(Error::Contract(_))));
}

#[test]
fn non_finite_output_names_node() {
    let x = t64(&[2], &[1.0, 0.0]);
    match x.log() {
        Err(Error::NumericFault { node }) => assert!(node.starts_with("log"), "{node}"),
        other => panic!("expected numeric fault, got {other:?}"),
    }
}

#[test]
fn constants_record_no_graph() {
    let x = t64(&[2], &[1.0, 2.0]);
    let y = x.relu().unwrap().sum().unwrap();
    assert!(!y.requires_grad());
    assert!(Graph::trace(&y).is_empty());
}

#[test]
fn graph_is_topologically_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3], &mut rng).to_param();
    let w = random(&[4, 3], &mut rng).to_param();
    let h = x.linear(&w, None).unwrap().relu().unwrap();
    let loss = h.mul(&h).unwrap().mean().unwrap();
    let g = Graph::trace(&loss);
    assert_eq!(g.records.iter().map(|r| r.kind).collect::<Vec<_>>(), ["linear", "relu", "mul", "mean"]);
    for (i, r) in g.records.iter().enumerate() {
        assert!(r.inputs.iter().all(|&id| id < r.output));
        if i > 0 {
            assert!(g.records[i - 1].output < r.output);
        }
    }
}

#[test]
fn dropout_is_identity_when_off_and_seeded_when_on() {
    let x = Tensor::<f32>::full(&[1, 1000], 1.0).unwrap();
    assert!(x.dropout(0.1, false, 9).unwrap().bit_eq(&x));
    let a = x.dropout(0.1, true, 9).unwrap();
    let b = x.dropout(0.1, true, 9).unwrap();
    assert!(a.bit_eq(&b));
    let dropped = a.data().iter().filter(|&&v| v == 0.0).count();
    assert!((50..150).contains(&dropped), "{dropped}");
}

#[test]
fn finite_diff_oracle_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[5], &mut rng);
    assert!(finite_diff_check(|t| t.sum(), &x, 1e-4).unwrap() < 1e-9);
    // Plain differences see the identity forward, so they disagree with the
    // reversed backward rule.
    let err = finite_diff_check(|t| t.grad_reverse(1.0)?.sum(), &x, 1e-4).unwrap();
    assert!((err - 2.0).abs() < 1e-6);
    // Mirrored re-parameterization x0 - (x - x0) has derivative -1.
    let x0 = x.clone();
    let mirror = |t: &Tensor<f64>| t.add(&x0.scale(-1.0)?)?.scale(-1.0)?.add(&x0)?.sum();
    let rep = finite_diff_check_pair(|t| t.grad_reverse(1.0)?.sum(), mirror, &x, 1e-4, &Default::default()).unwrap();
    assert!(rep.max_rel_error < 1e-6);
    assert!(rep.analytic.iter().all(|&a| a == -1.0));
    let leaf = x.to_param();
    backward(&leaf.grad_reverse(1.0).unwrap().sum().unwrap()).unwrap();
    assert_eq!(leaf.grad().unwrap(), vec![-1.0; 5]);
}

#[test]
fn finite_diff_rejects_bad_step_and_nondeterminism() {
    let x = t64(&[2], &[0.1, 0.2]);
    assert!(matches!(finite_diff_check(|t| t.sum(), &x, 0.5), Err(Error::Config(_))));
    let counter = std::sync::atomic::AtomicU64::new(0);
    let flaky = |t: &Tensor<f64>| {
        let k = counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        t.dropout(0.5, true, k)?.sum()
    };
    assert!(matches!(finite_diff_check(flaky, &x, 1e-4), Err(Error::OracleInvalid(_))));
}
