use proptest::prelude::*;

use swda::tensor::gradcheck::finite_diff_check;
use swda::{backward, Error, Tensor};

fn param(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::param(shape, data).unwrap()
}

#[test]
fn shared_subexpression_accumulates() {
    let x = param(&[3], vec![1.0, -2.0, 0.5]);
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum().unwrap();
    backward(&y).unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, -3.0, 2.0]);
}

#[test]
fn grad_reverse_is_identity_forward_and_negated_backward() {
    let x = param(&[2], vec![0.3, -1.2]);
    let r = x.grad_reverse(0.7).unwrap();
    assert_eq!(r.to_vec(), x.to_vec());
    backward(&r.scale(2.0).unwrap().sum().unwrap()).unwrap();
    let g = x.grad().unwrap();
    assert!((g[0] + 1.4).abs() < 1e-15 && (g[1] + 1.4).abs() < 1e-15);
}

#[test]
fn negative_reversal_weight_rejected() {
    let x = param(&[1], vec![1.0]);
    assert!(x.grad_reverse(-1.0).is_err());
}

#[test]
fn mismatched_shapes_are_shape_errors() {
    let a = param(&[2], vec![1.0, 2.0]);
    let b = param(&[3], vec![1.0, 2.0, 3.0]);
    assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    let img = param(&[1, 2, 4, 4], vec![0.0; 32]);
    let w = param(&[3, 5, 3, 3], vec![0.0; 135]);
    assert!(matches!(img.conv2d(&w, None, 1, 1), Err(Error::Shape { .. })));
}

#[test]
fn conv_stride_two_halves_resolution() {
    let img = Tensor::<f64>::zeros(&[2, 3, 32, 32]).unwrap();
    let w = Tensor::<f64>::zeros(&[8, 3, 3, 3]).unwrap();
    assert_eq!(img.conv2d(&w, None, 2, 1).unwrap().shape(), &[2, 8, 16, 16]);
}

#[test]
fn f32_and_f64_agree_on_a_small_graph() {
    let v = vec![0.25, -0.5, 1.5, 0.75];
    let build = |x: &Tensor<f64>| x.sigmoid().unwrap().mul(&x.relu().unwrap()).unwrap().sum().unwrap();
    let x64 = param(&[4], v.clone());
    backward(&build(&x64)).unwrap();
    let x32 = Tensor::<f32>::param(&[4], v.iter().map(|&a| a as f32).collect()).unwrap();
    let y32 = x32.sigmoid().unwrap().mul(&x32.relu().unwrap()).unwrap().sum().unwrap();
    backward(&y32).unwrap();
    for (a, b) in x64.grad().unwrap().iter().zip(x32.grad().unwrap()) {
        assert!((a - b as f64).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smooth_chain_matches_central_differences(v in prop::collection::vec(-2.0f64..2.0, 1..12)) {
        let n = v.len();
        let x = Tensor::new(&[n], v).unwrap();
        let err = finite_diff_check(
            |t: &Tensor<f64>| t.sigmoid()?.mul(t)?.exp()?.mean(),
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-20.0f64..20.0, 3..9)) {
        let n = v.len();
        let s = Tensor::new(&[1, n], v).unwrap().softmax().unwrap();
        let total: f64 = s.to_vec().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
