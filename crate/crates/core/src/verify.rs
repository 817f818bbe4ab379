//! Gradient verification suite: every primitive and every loss, checked
//! against central differences at random points.
//!
//! Each case is built twice from the same f32-representable values: once in
//! f64, where analytic and numeric gradients must agree to 1e-6, and once in
//! f32, where the f32 backward pass is compared against the f64 differences
//! with tolerance 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Scenario, ScenarioKind};
use crate::error::{Error, Result};
use crate::losses::{self, Annotations, Modulator};
use crate::nn::{self, ForwardOptions, ModelParams, Reversal};
use crate::train::{self, MirrorAnchors, StepOptions, TrainConfig};
use crate::tensor::gradcheck::{finite_diff_check_pair, CheckOptions, REL_FLOOR};
use crate::tensor::{backward, Element, Primitive, Tensor};

pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-3;
const STEP: f64 = 1e-5;

type Scalar<T> = Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>>>;

/// One differentiable input of one op, with the point at which to probe it.
pub struct Case<T: Element> {
    pub x: Tensor<T>,
    pub analytic: Scalar<T>,
    /// Function whose true derivative is the intended gradient; equal to
    /// `analytic` except around gradient reversal.
    pub numeric: Scalar<T>,
    /// Coordinates to probe; all when `None`.
    pub coords: Option<Vec<usize>>,
}

/// Source of f32-representable random values shared by the f64 and f32 builds.
pub struct Draw(ChaCha8Rng);

impl Draw {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.0.random_range(lo..hi) as f32 as f64).collect()
    }

    /// Magnitudes in `[lo, hi]` with random sign.
    pub fn signed(&mut self, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let m = self.0.random_range(lo..hi);
                let v = if self.0.random::<bool>() { m } else { -m };
                v as f32 as f64
            })
            .collect()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn seed(&mut self) -> u64 {
        self.0.random()
    }
}

fn tensor<T: Element>(shape: &[usize], v: &[f64]) -> Tensor<T> {
    Tensor::from_f64(shape, v).expect("verify fixture shape")
}

/// `sum(r ⊙ y)` with a fixed weight tensor matching `y`.
fn weighted<T: Element>(r: &Tensor<T>, y: Tensor<T>) -> Result<Tensor<T>> {
    y.mul(r)?.sum()
}

/// Builds one case per differentiable input of `prim`, scalarized by fixed
/// random weights. Inputs avoid non-differentiable points by a margin far
/// larger than the finite-difference step.
pub fn primitive_cases<T: Element>(kind: &str, d: &mut Draw) -> Result<Vec<Case<T>>> {
    let mut cases = Vec::new();
    // Operands for the primitive; `at` selects which one is probed.
    let mut push = |prim: Primitive, shapes: Vec<Vec<usize>>, values: Vec<Vec<f64>>, out_shape: Vec<usize>, r: Vec<f64>| {
        let r: Tensor<T> = tensor(&out_shape, &r);
        for at in 0..shapes.len() {
            let operands: Vec<Tensor<T>> = shapes.iter().zip(&values).map(|(s, v)| tensor(s, v)).collect();
            let x = operands[at].clone();
            let (p, ops, rr) = (prim.clone(), operands.clone(), r.clone());
            let analytic: Scalar<T> = Box::new(move |t| {
                let mut inputs: Vec<&Tensor<T>> = ops.iter().collect();
                inputs[at] = t;
                weighted(&rr, crate::tensor::apply_primitive(p.clone(), &inputs)?)
            });
            let numeric: Scalar<T> = match prim {
                Primitive::GradReverse { lambda } => {
                    let (x0, rr) = (x.clone(), r.clone());
                    Box::new(move |t| weighted(&rr, mirror(t, &x0, lambda)?))
                }
                _ => {
                    let (p, ops, rr) = (prim.clone(), operands.clone(), r.clone());
                    Box::new(move |t| {
                        let mut inputs: Vec<&Tensor<T>> = ops.iter().collect();
                        inputs[at] = t;
                        weighted(&rr, crate::tensor::apply_primitive(p.clone(), &inputs)?)
                    })
                }
            };
            cases.push(Case { x, analytic, numeric, coords: None });
        }
    };
    let weights = |d: &mut Draw, n: usize| d.signed(0.5, 1.0, n);
    match kind {
        "conv2d" => {
            // Same-sign operands keep every gradient coordinate away from
            // cancellation to zero, where relative error is meaningless.
            let (x, w, b) = (d.uniform(0.1, 1.0, 2 * 2 * 5 * 5), d.uniform(0.1, 1.0, 3 * 2 * 3 * 3), d.uniform(-1.0, 1.0, 3));
            let r = d.uniform(0.5, 1.0, 2 * 3 * 3 * 3);
            push(
                Primitive::Conv2d { stride: 2, pad: 1 },
                vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
                vec![x, w, b],
                vec![2, 3, 3, 3],
                r,
            );
        }
        "linear" => {
            let (x, w, b) = (d.uniform(-1.0, 1.0, 3 * 4), d.uniform(-1.0, 1.0, 5 * 4), d.uniform(-1.0, 1.0, 5));
            let r = weights(d, 15);
            push(Primitive::Linear, vec![vec![3, 4], vec![5, 4], vec![5]], vec![x, w, b], vec![3, 5], r);
        }
        "relu" | "sigmoid" | "exp" => {
            let x = d.signed(0.1, 1.0, 12);
            let prim = match kind {
                "relu" => Primitive::Relu,
                "sigmoid" => Primitive::Sigmoid,
                _ => Primitive::Exp,
            };
            let r = weights(d, 12);
            push(prim, vec![vec![2, 6]], vec![x], vec![2, 6], r);
        }
        "softmax" => {
            let x = d.uniform(-2.0, 2.0, 2 * 4 * 3);
            let r = weights(d, 24);
            push(Primitive::Softmax, vec![vec![2, 4, 3]], vec![x], vec![2, 4, 3], r);
        }
        "add" | "mul" => {
            let (a, b) = (d.uniform(-1.0, 1.0, 6), d.uniform(-1.0, 1.0, 6));
            let prim = if kind == "add" { Primitive::Add } else { Primitive::Mul };
            let r = weights(d, 6);
            push(prim, vec![vec![2, 3], vec![2, 3]], vec![a, b], vec![2, 3], r);
        }
        "affine" => {
            let x = d.uniform(-1.0, 1.0, 6);
            let (s, t) = (d.uniform(-2.0, 2.0, 2)[0], d.uniform(-1.0, 1.0, 1)[0]);
            let r = weights(d, 6);
            push(Primitive::Affine { scale: s, shift: t }, vec![vec![6]], vec![x], vec![6], r);
        }
        "concat_channels" => {
            let (a, b) = (d.uniform(-1.0, 1.0, 2 * 2 * 4), d.uniform(-1.0, 1.0, 2 * 3 * 4));
            let r = weights(d, 2 * 5 * 4);
            push(
                Primitive::ConcatChannels,
                vec![vec![2, 2, 2, 2], vec![2, 3, 2, 2]],
                vec![a, b],
                vec![2, 5, 2, 2],
                r,
            );
        }
        "slice_channels" => {
            let x = d.uniform(-1.0, 1.0, 2 * 5 * 4);
            let r = weights(d, 2 * 2 * 4);
            push(Primitive::SliceChannels { start: 1, len: 2 }, vec![vec![2, 5, 2, 2]], vec![x], vec![2, 2, 2, 2], r);
        }
        "broadcast_spatial" => {
            let x = d.uniform(-1.0, 1.0, 6);
            let r = weights(d, 2 * 3 * 2 * 3);
            push(Primitive::BroadcastSpatial { h: 2, w: 3 }, vec![vec![2, 3]], vec![x], vec![2, 3, 2, 3], r);
        }
        "global_avg_pool" => {
            let x = d.uniform(-1.0, 1.0, 2 * 3 * 9);
            let r = weights(d, 6);
            push(Primitive::GlobalAvgPool, vec![vec![2, 3, 3, 3]], vec![x], vec![2, 3], r);
        }
        "channel_affine_norm" => {
            let x = d.uniform(-1.0, 1.0, 2 * 3 * 4);
            let (s, t) = (d.uniform(0.5, 1.5, 3), d.uniform(-0.5, 0.5, 3));
            let r = weights(d, 24);
            push(
                Primitive::ChannelAffineNorm { eps: 1e-5 },
                vec![vec![2, 3, 2, 2], vec![3], vec![3]],
                vec![x, s, t],
                vec![2, 3, 2, 2],
                r,
            );
        }
        "dropout" => {
            let x = d.uniform(-1.0, 1.0, 20);
            let seed = d.seed();
            let r = weights(d, 20);
            push(Primitive::Dropout { p: 0.3, train: true, seed }, vec![vec![20]], vec![x], vec![20], r);
        }
        "smooth_l1" => {
            let beta = 0.5;
            let x: Vec<f64> = d
                .signed(0.05, 1.5, 12)
                .into_iter()
                .map(|v| if (v.abs() - beta).abs() < 0.05 { v * 1.3 } else { v })
                .collect();
            let r = weights(d, 12);
            push(Primitive::SmoothL1 { beta }, vec![vec![12]], vec![x], vec![12], r);
        }
        "log" => {
            let x = d.uniform(0.2, 2.0, 10);
            let r = weights(d, 10);
            push(Primitive::Log, vec![vec![10]], vec![x], vec![10], r);
        }
        "pow" => {
            let x = d.uniform(0.2, 1.5, 10);
            let e = d.uniform(0.5, 4.0, 1)[0];
            let r = weights(d, 10);
            push(Primitive::Pow { exponent: e }, vec![vec![10]], vec![x], vec![10], r);
        }
        "clamp" => {
            let x: Vec<f64> = d
                .uniform(-1.0, 1.0, 12)
                .into_iter()
                .map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.25 } else { v })
                .collect();
            let r = weights(d, 12);
            push(Primitive::Clamp { min: -0.5, max: 0.5 }, vec![vec![12]], vec![x], vec![12], r);
        }
        "mean" | "sum" => {
            let x = d.uniform(-1.0, 1.0, 7);
            let r = weights(d, 1);
            let prim = if kind == "mean" { Primitive::Mean } else { Primitive::Sum };
            push(prim, vec![vec![7]], vec![x], vec![1], r);
        }
        "grad_reverse" => {
            let x = d.uniform(-1.0, 1.0, 8);
            let lambda = d.uniform(0.05, 2.0, 1)[0];
            let r = weights(d, 8);
            push(Primitive::GradReverse { lambda }, vec![vec![8]], vec![x], vec![8], r);
        }
        other => return Err(Error::Contract(format!("no gradient case for primitive {other}"))),
    }
    Ok(cases)
}

/// Re-parameterization `x0 - λ (x - x0)`: value `x` at `x = x0`, derivative `-λ`.
pub fn mirror<T: Element>(x: &Tensor<T>, x0: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    x.add(&x0.scale(-1.0)?)?.scale(-lambda)?.add(x0)
}

/// Names of the loss checks, in report order.
pub const LOSS_OPS: [&str; 8] = [
    "focal_loss_gamma0",
    "focal_loss_gamma3",
    "focal_loss_gamma5",
    "exp_focal_loss_eta5",
    "cross_entropy_loss",
    "local_loss",
    "detection_loss",
    "modulated_loss_at_half",
];

fn modulator_for(kind: &str) -> Option<Modulator> {
    Some(match kind {
        "focal_loss_gamma0" => Modulator::Focal { gamma: 0.0 },
        "focal_loss_gamma3" => Modulator::Focal { gamma: 3.0 },
        "focal_loss_gamma5" | "modulated_loss_at_half" => Modulator::Focal { gamma: 5.0 },
        "exp_focal_loss_eta5" => Modulator::ExpFocal { eta: 5.0 },
        "cross_entropy_loss" => Modulator::CrossEntropy,
        _ => return None,
    })
}

/// Random annotations on a `grid`×`grid` layout.
pub fn random_annotations(d: &mut Draw, count: usize, classes: usize) -> Annotations {
    let mut boxes = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..count {
        let wh = d.uniform(0.15, 0.45, 2);
        let c = d.uniform(0.0, 1.0, 2);
        let cx = wh[0] / 2.0 + c[0] * (1.0 - wh[0]);
        let cy = wh[1] / 2.0 + c[1] * (1.0 - wh[1]);
        boxes.push([cx, cy, wh[0], wh[1]]);
        ids.push(d.index(classes));
    }
    Annotations { boxes, classes: ids }
}

pub fn loss_cases<T: Element>(kind: &str, d: &mut Draw) -> Result<Vec<Case<T>>> {
    let mut cases: Vec<Case<T>> = Vec::new();
    if kind == "modulated_loss_at_half" {
        let m = modulator_for(kind).expect("listed");
        let f: fn(&Tensor<T>, Modulator) -> Result<Tensor<T>> = |t, m| losses::modulated_loss_tensor(t, m)?.sum();
        cases.push(Case {
            x: tensor(&[1], &[0.5]),
            analytic: Box::new(move |t| f(t, m)),
            numeric: Box::new(move |t| f(t, m)),
            coords: None,
        });
        return Ok(cases);
    }
    if let Some(m) = modulator_for(kind) {
        let src: Tensor<T> = tensor(&[3, 1], &d.uniform(0.05, 0.95, 3));
        let tgt: Tensor<T> = tensor(&[2, 1], &d.uniform(0.05, 0.95, 2));
        let (s, t) = (src.clone(), tgt.clone());
        let vary_src = move |x: &Tensor<T>| losses::global_loss(x, &t, m);
        let vary_tgt = move |x: &Tensor<T>| losses::global_loss(&s, x, m);
        cases.push(Case { x: src, analytic: Box::new(vary_src.clone()), numeric: Box::new(vary_src), coords: None });
        cases.push(Case { x: tgt, analytic: Box::new(vary_tgt.clone()), numeric: Box::new(vary_tgt), coords: None });
        return Ok(cases);
    }
    match kind {
        "local_loss" => {
            let src: Tensor<T> = tensor(&[2, 1, 4, 4], &d.uniform(0.05, 0.95, 32));
            let tgt: Tensor<T> = tensor(&[2, 1, 3, 3], &d.uniform(0.05, 0.95, 18));
            let (s, t) = (src.clone(), tgt.clone());
            let vary_src = move |x: &Tensor<T>| losses::local_loss(x, &t);
            let vary_tgt = move |x: &Tensor<T>| losses::local_loss(&s, x);
            cases.push(Case { x: src, analytic: Box::new(vary_src.clone()), numeric: Box::new(vary_src), coords: None });
            cases.push(Case { x: tgt, analytic: Box::new(vary_tgt.clone()), numeric: Box::new(vary_tgt), coords: None });
        }
        "detection_loss" => {
            let (k, grid) = (3, 4);
            let anns: Vec<Annotations> = (0..2).map(|i| random_annotations(d, 1 + i, k)).collect();
            let cells = grid * grid;
            let mut pred = d.uniform(-1.5, 1.5, 2 * (5 + k) * cells);
            // keep box residuals away from the smooth-L1 transition
            for (i, ann) in anns.iter().enumerate() {
                let tg = losses::encode_targets(ann, grid);
                for c in 0..cells {
                    if tg.assigned[c].is_none() {
                        continue;
                    }
                    for j in 0..4 {
                        let idx = (i * (5 + k) + 1 + k + j) * cells + c;
                        let r = pred[idx] - tg.offsets[c][j];
                        if (r.abs() - losses::SMOOTH_L1_BETA).abs() < 0.05 {
                            pred[idx] = (tg.offsets[c][j] + 0.5 * r) as f32 as f64;
                        }
                    }
                }
            }
            let x: Tensor<T> = tensor(&[2, 5 + k, grid, grid], &pred);
            let f = move |t: &Tensor<T>| losses::detection_loss(t, &[Some(&anns[0]), Some(&anns[1])], k);
            cases.push(Case { x, analytic: Box::new(f.clone()), numeric: Box::new(f), coords: None });
        }
        other => return Err(Error::Contract(format!("no gradient case for loss {other}"))),
    }
    Ok(cases)
}

/// Name of the check over the whole training objective.
pub const FULL_OBJECTIVE: &str = "full_objective";

fn anchors<T: Element>(params: &ModelParams<T>, cfg: &TrainConfig, s: &data::DetectionSample) -> Result<Reversal<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(s.image.shape());
    let image: Tensor<T> = Tensor::new(&shape, s.image.to_vec())?.cast();
    let opts = ForwardOptions { local: false, global: false, detect: false, ..ForwardOptions::default() };
    let out = nn::model_forward(params, &cfg.net(), &image, &opts)?;
    Ok(Reversal::Mirror { f1: out.f1.detach(), f: out.f.detach() })
}

fn central<T: Element>(f: &Scalar<T>, x: &Tensor<T>, i: usize, h: f64) -> Result<f64> {
    let at = |delta: f64| -> Result<f64> {
        let mut v = x.to_vec();
        v[i] = T::from_f64(v[i].as_f64() + delta);
        Ok(f(&Tensor::new(x.shape(), v)?)?.item().as_f64())
    };
    Ok((at(h)? - at(-h)?) / (2.0 * h))
}

/// True when central differences at two step sizes agree, i.e. no ReLU
/// kink lies inside the probe window. Uses only the numeric function.
fn smooth_at<T: Element>(f: &Scalar<T>, x: &Tensor<T>, i: usize) -> Result<bool> {
    let (wide, narrow) = (central(f, x, i, STEP)?, central(f, x, i, STEP / 10.0)?);
    Ok((wide - narrow).abs() <= (1e-7 * wide.abs()).max(1e-8))
}

const SCREEN_TRIES: usize = 12;

/// One case per parameter tensor of the full model (FL, local and global
/// classifiers, context vectors, dropout) on one rendered source/target pair.
///
/// With `choose_coords`, probes the largest-magnitude analytic entry and one
/// random entry of each tensor, skipping entries whose neighbourhood is not
/// smooth. Without it `coords` is left empty (the f32 replay reuses the f64
/// coordinates).
pub fn full_objective_cases<T: Element>(d: &mut Draw, choose_coords: bool) -> Result<Vec<Case<T>>> {
    let cfg = TrainConfig::default();
    let params: ModelParams<T> = ModelParams::<f32>::init(&cfg.net(), d.seed())?.cast();
    let g = data::generate(&Scenario { kind: ScenarioKind::LocalShift, seed: d.seed(), train_n: 1, test_n: 1 })?;
    let (src, tgt) = (g.source_train.samples[0].clone(), g.target_train.samples[0].unlabeled());
    let step = StepOptions { seed: d.seed(), ..StepOptions::default() };
    let mirror = MirrorAnchors { source: anchors(&params, &cfg, &src)?, target: anchors(&params, &cfg, &tgt)? };

    let leaves = ModelParams::from_map(params.iter().map(|(k, v)| (k.clone(), v.to_param())).collect());
    if choose_coords {
        backward(&train::step_losses(&leaves, &cfg, &src, &tgt, &step, None)?.l_total)?;
    }

    let mut cases = Vec::new();
    for (path, leaf) in leaves.iter() {
        let build = |mirrored: bool| -> Scalar<T> {
            let (params, cfg, src, tgt, step, mirror, path) =
                (params.clone(), cfg.clone(), src.clone(), tgt.clone(), step.clone(), mirror.clone(), path.clone());
            Box::new(move |x: &Tensor<T>| {
                let mut p = params.clone();
                p.insert(&path, x.clone());
                Ok(train::step_losses(&p, &cfg, &src, &tgt, &step, mirrored.then_some(&mirror))?.l_total)
            })
        };
        let (analytic, numeric) = (build(false), build(true));
        let x = params.get(path)?.clone();
        let mut coords = Vec::new();
        if choose_coords {
            let grad: Vec<f64> = leaf.grad().unwrap_or_default().iter().map(|v| v.as_f64().abs()).collect();
            let mut order: Vec<usize> = (0..leaf.numel()).collect();
            order.sort_by(|&a, &b| grad[b].total_cmp(&grad[a]).then(a.cmp(&b)));
            let random: Vec<usize> = (0..SCREEN_TRIES).map(|_| d.index(leaf.numel())).collect();
            for candidates in [&order[..order.len().min(SCREEN_TRIES)], &random[..]] {
                for &i in candidates {
                    if !coords.contains(&i) && smooth_at(&numeric, &x, i)? {
                        coords.push(i);
                        break;
                    }
                }
            }
            if coords.is_empty() {
                return Err(Error::OracleInvalid(format!("no smooth probe point found for {path}")));
            }
        }
        cases.push(Case { x, analytic, numeric, coords: Some(coords) });
    }
    Ok(cases)
}

/// Gradient check of the whole objective, reversal layers included.
pub fn full_objective_suite(opts: &SuiteOptions) -> Result<OpCheck> {
    run_op(
        FULL_OBJECTIVE,
        opts,
        salt_of(FULL_OBJECTIVE),
        |d| full_objective_cases::<f64>(d, true),
        |d| full_objective_cases::<f32>(d, false),
    )
}

/// Worst relative errors of one op over all its cases and points.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_f64: f64,
    pub max_rel_f32: f64,
    pub points: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_f64 < TOL_F64 && self.max_rel_f32 < TOL_F32
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub points: usize,
    pub seed: u64,
    /// Scales the analytic gradient of the named op (or every op for
    /// `"all"`) so that the checker can be shown to fail.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { points: 10, seed: 0, corrupt: None }
    }
}

impl SuiteOptions {
    fn corrupt_scale(&self, name: &str) -> Option<f64> {
        match self.corrupt.as_deref() {
            Some("all") => Some(1.5),
            Some(n) if n == name => Some(1.5),
            _ => None,
        }
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / n.abs().max(REL_FLOOR)
}

fn nan_max(acc: f64, v: f64) -> f64 {
    if v.is_nan() || acc.is_nan() {
        f64::NAN
    } else {
        acc.max(v)
    }
}

/// Checks a matched pair of cases: the f64 case against its own central
/// differences and the f32 backward against the same differences.
pub fn check_case_pair(c64: &Case<f64>, c32: &Case<f32>, corrupt: Option<f64>) -> Result<(f64, f64)> {
    let opts = CheckOptions { coords: c64.coords.clone(), corrupt_scale: corrupt };
    let report = finite_diff_check_pair(&c64.analytic, &c64.numeric, &c64.x, STEP, &opts)?;

    let leaf = c32.x.to_param();
    let y = (c32.analytic)(&leaf)?;
    backward(&y)?;
    let g32 = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let coords: Vec<usize> = match &c64.coords {
        Some(c) => c.clone(),
        None => (0..c64.x.numel()).collect(),
    };
    let scale = corrupt.unwrap_or(1.0);
    let mut worst32 = 0.0f64;
    for (k, &i) in coords.iter().enumerate() {
        worst32 = nan_max(worst32, rel(g32[i] as f64 * scale, report.numeric[k]));
    }
    Ok((report.max_rel_error, worst32))
}

fn run_op<B64, B32>(name: &str, opts: &SuiteOptions, salt: u64, build64: B64, build32: B32) -> Result<OpCheck>
where
    B64: Fn(&mut Draw) -> Result<Vec<Case<f64>>>,
    B32: Fn(&mut Draw) -> Result<Vec<Case<f32>>>,
{
    let mut out = OpCheck { name: name.to_string(), max_rel_f64: 0.0, max_rel_f32: 0.0, points: 0 };
    for point in 0..opts.points {
        let seed = opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (point as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let c64 = build64(&mut Draw::new(seed))?;
        let c32 = build32(&mut Draw::new(seed))?;
        for (a, b) in c64.iter().zip(&c32) {
            let (e64, e32) = check_case_pair(a, b, opts.corrupt_scale(name))?;
            out.max_rel_f64 = nan_max(out.max_rel_f64, e64);
            out.max_rel_f32 = nan_max(out.max_rel_f32, e32);
        }
        out.points += 1;
    }
    Ok(out)
}

fn salt_of(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// One check per tensor primitive, in [`Primitive::KINDS`] order.
pub fn primitive_suite(opts: &SuiteOptions) -> Result<Vec<OpCheck>> {
    Primitive::KINDS
        .iter()
        .map(|&k| run_op(k, opts, salt_of(k), |d| primitive_cases::<f64>(k, d), |d| primitive_cases::<f32>(k, d)))
        .collect()
}

/// One check per loss op, in [`LOSS_OPS`] order.
pub fn loss_suite(opts: &SuiteOptions) -> Result<Vec<OpCheck>> {
    LOSS_OPS
        .iter()
        .map(|&k| run_op(k, opts, salt_of(k), |d| loss_cases::<f64>(k, d), |d| loss_cases::<f32>(k, d)))
        .collect()
}
