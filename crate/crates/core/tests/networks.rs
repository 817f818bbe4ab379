use swda::nn::{self, ForwardOptions, ModelParams, NetConfig};
use swda::{backward, Tensor};

fn batch(n: usize) -> Tensor<f64> {
    let len = n * 3 * 32 * 32;
    let v = (0..len).map(|i| ((i * 37 % 101) as f64) / 101.0).collect();
    Tensor::new(&[n, 3, 32, 32], v).unwrap()
}

fn context_net() -> NetConfig {
    NetConfig { local_context: true, global_context: true, dropout: 0.0, ..NetConfig::default() }
}

#[test]
fn full_model_output_shapes() {
    let cfg = context_net();
    let p = ModelParams::<f32>::init(&cfg, 1).unwrap().cast::<f64>();
    let out = nn::model_forward(&p, &cfg, &batch(2), &ForwardOptions::default()).unwrap();
    let local = out.local_map.unwrap();
    assert_eq!(local.shape(), &[2, 1, 16, 16]);
    assert!(local.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    let g = out.global_prob.unwrap();
    assert_eq!(g.shape(), &[2, 1]);
    assert_eq!(out.detections.unwrap().shape(), &[2, 1 + 3 + 4, 8, 8]);
    assert_eq!(out.v1.unwrap().shape(), &[2, 128]);
    assert_eq!(out.v2.unwrap().shape(), &[2, 128]);
}

#[test]
fn reversal_weight_scales_feature_gradients_only() {
    let cfg = NetConfig { dropout: 0.0, ..NetConfig::default() };
    let p = ModelParams::<f32>::init(&cfg, 2).unwrap().cast::<f64>();
    let grads = |lambda: f64| {
        p.zero_grad();
        let opts = ForwardOptions { lambda, detect: false, ..ForwardOptions::default() };
        let out = nn::model_forward(&p, &cfg, &batch(1), &opts).unwrap();
        let l = out.local_map.unwrap().mean().unwrap().add(&out.global_prob.unwrap().mean().unwrap()).unwrap();
        backward(&l).unwrap();
        let f = p.get("f1.conv1.w").unwrap().grad().unwrap();
        let d = p.get("dg.fc.w").unwrap().grad().unwrap();
        (f, d)
    };
    let (f1, d1) = grads(1.0);
    let (f2, d2) = grads(2.5);
    assert_eq!(d1, d2);
    let scale = f1.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(scale > 0.0);
    for (a, b) in f1.iter().zip(&f2) {
        assert!((2.5 * a - b).abs() <= 1e-12 * scale);
    }
}

#[test]
fn zeroed_context_changes_only_the_head_input() {
    let cfg = context_net();
    let p = ModelParams::<f32>::init(&cfg, 3).unwrap().cast::<f64>();
    let on = nn::model_forward(&p, &cfg, &batch(1), &ForwardOptions::default()).unwrap();
    let off = nn::model_forward(&p, &cfg, &batch(1), &ForwardOptions { zero_context: true, ..ForwardOptions::default() }).unwrap();
    assert!(on.f.bit_eq(&off.f));
    assert!(!on.detections.unwrap().bit_eq(&off.detections.unwrap()));
}

#[test]
fn checkpoint_directory_restores_every_parameter() {
    let cfg = context_net();
    let p = ModelParams::<f32>::init(&cfg, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.write_dir(dir.path()).unwrap();
    let back = ModelParams::<f32>::read_dir(dir.path()).unwrap();
    assert!(p.bit_eq(&back));
    back.check_layout(&cfg).unwrap();
    assert!(back.check_layout(&NetConfig { num_classes: 5, ..cfg }).is_err());
}
