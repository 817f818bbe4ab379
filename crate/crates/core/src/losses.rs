//! Detection loss, modulated domain losses and the adversarial objective.
//!
//! Every loss is built from tensor primitives so that a single backward pass
//! through the network (with gradient reversal in front of the domain
//! classifiers) yields the min-max update.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Clamp applied to probabilities before `log` and `pow`.
pub const PROB_EPS: f64 = 1e-7;

/// Transition point of the box-regression smooth-L1 penalty.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Domain label: source images are `d = 1`, target images `d = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> u8 {
        match self {
            Domain::Source => 1,
            Domain::Target => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Weighting `f(p_t)` applied to the log-loss of the global classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Modulator {
    /// `(1 - p_t)^gamma`
    Focal { gamma: f64 },
    /// `exp(-eta * p_t)`
    ExpFocal { eta: f64 },
    /// Plain cross-entropy, `f = 1`.
    CrossEntropy,
}

impl Modulator {
    pub fn validate(self) -> Result<Self> {
        match self {
            Modulator::Focal { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")))
            }
            Modulator::ExpFocal { eta } if !(eta >= 0.0 && eta.is_finite()) => {
                Err(Error::Config(format!("exponential focal eta must be >= 0, got {eta}")))
            }
            m => Ok(m),
        }
    }

    /// The modulating factor at `p_t` (no clamping).
    pub fn factor(self, p_t: f64) -> f64 {
        match self {
            Modulator::Focal { gamma } => (1.0 - p_t).powf(gamma),
            Modulator::ExpFocal { eta } => (-eta * p_t).exp(),
            Modulator::CrossEntropy => 1.0,
        }
    }
}

impl fmt::Display for Modulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modulator::Focal { gamma } => write!(f, "FL(gamma={gamma})"),
            Modulator::ExpFocal { eta } => write!(f, "EFL(eta={eta})"),
            Modulator::CrossEntropy => f.write_str("CE"),
        }
    }
}

/// Probability assigned to the true domain: `p` for source, `1 - p` for target.
pub fn p_t(p: f64, d: Domain) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(match d {
        Domain::Source => p,
        Domain::Target => 1.0 - p,
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-f(p_t) * ln(p_t)` evaluated in double precision.
pub fn modulated_loss(p_t: f64, kind: Modulator) -> f64 {
    let p = clamp_prob(p_t);
    -kind.factor(p) * p.ln()
}

/// Elementwise `-f(p_t) * ln(p_t)` over a tensor of `p_t` values.
pub fn modulated_loss_tensor<T: Element>(p_t: &Tensor<T>, kind: Modulator) -> Result<Tensor<T>> {
    let p = p_t.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let nll = p.log()?.scale(-1.0)?;
    match kind.validate()? {
        Modulator::Focal { gamma } => p.one_minus()?.pow(gamma)?.mul(&nll),
        Modulator::ExpFocal { eta } => p.scale(-eta)?.exp()?.mul(&nll),
        Modulator::CrossEntropy => Ok(nll),
    }
}

fn check_probabilities<T: Element>(what: &str, t: &Tensor<T>, err: fn(String) -> Error) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(err(format!("{what} contains {v}, outside [0, 1]")));
    }
    Ok(())
}

/// Weak global alignment loss:
/// `½(mean_s FL(p) + mean_t FL(1 - p))` where `p` is the classifier's
/// probability that an image comes from the source domain.
pub fn global_loss<T: Element>(dg_source: &Tensor<T>, dg_target: &Tensor<T>, kind: Modulator) -> Result<Tensor<T>> {
    check_probabilities("source global prediction", dg_source, Error::Domain)?;
    check_probabilities("target global prediction", dg_target, Error::Domain)?;
    let src = modulated_loss_tensor(dg_source, kind)?.mean()?;
    let tgt = modulated_loss_tensor(&dg_target.one_minus()?, kind)?.mean()?;
    src.add(&tgt)?.scale(0.5)
}

/// Strong local alignment loss:
/// `½(mean(D_l(source)²) + mean((1 - D_l(target))²))`.
///
/// Source and target maps may have different spatial sizes.
pub fn local_loss<T: Element>(dl_source: &Tensor<T>, dl_target: &Tensor<T>) -> Result<Tensor<T>> {
    check_probabilities("source local map", dl_source, Error::Contract)?;
    check_probabilities("target local map", dl_target, Error::Contract)?;
    let src = dl_source.pow(2.0)?.mean()?;
    let tgt = dl_target.one_minus()?.pow(2.0)?.mean()?;
    src.add(&tgt)?.scale(0.5)
}

/// Ground-truth boxes `(cx, cy, w, h)` in unit coordinates with class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub boxes: Vec<[f64; 4]>,
    pub classes: Vec<usize>,
}

/// Per-cell training targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    pub grid: usize,
    /// Ground-truth index assigned to each cell (row-major), if positive.
    pub assigned: Vec<Option<usize>>,
    pub classes: Vec<usize>,
    /// (dx, dy, log w, log h) relative to the cell anchor.
    pub offsets: Vec<[f64; 4]>,
}

/// Assigns each grid cell to the smallest ground-truth box containing its
/// center and encodes regression targets in cell units.
pub fn encode_targets(ann: &Annotations, grid: usize) -> CellTargets {
    let cells = grid * grid;
    let mut assigned = vec![None; cells];
    let mut classes = vec![0; cells];
    let mut offsets = vec![[0.0; 4]; cells];
    let g = grid as f64;
    for gy in 0..grid {
        for gx in 0..grid {
            let (px, py) = ((gx as f64 + 0.5) / g, (gy as f64 + 0.5) / g);
            let best = ann
                .boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    (px - b[0]).abs() <= b[2] / 2.0 && (py - b[1]).abs() <= b[3] / 2.0
                })
                .min_by(|(ia, a), (ib, b)| {
                    (a[2] * a[3]).total_cmp(&(b[2] * b[3])).then(ia.cmp(ib))
                });
            if let Some((i, b)) = best {
                let c = gy * grid + gx;
                assigned[c] = Some(i);
                classes[c] = ann.classes[i];
                offsets[c] = [(b[0] - px) * g, (b[1] - py) * g, (b[2] * g).ln(), (b[3] * g).ln()];
            }
        }
    }
    CellTargets {
        grid,
        assigned,
        classes,
        offsets,
    }
}

/// Box `(cx, cy, w, h)` decoded from cell offsets.
pub fn decode_box(offsets: [f64; 4], gx: usize, gy: usize, grid: usize) -> [f64; 4] {
    let g = grid as f64;
    [
        (gx as f64 + 0.5 + offsets[0]) / g,
        (gy as f64 + 0.5 + offsets[1]) / g,
        offsets[2].exp() / g,
        offsets[3].exp() / g,
    ]
}

/// Detection loss over a batch of head outputs `(N, 1 + K + 4, G, G)`:
/// mean objectness binary cross-entropy over all cells, plus class
/// cross-entropy and smooth-L1 box regression averaged over positive cells.
///
/// Every sample must carry annotations; unlabeled (target) samples are a
/// contract violation.
pub fn detection_loss<T: Element>(pred: &Tensor<T>, gt: &[Option<&Annotations>], num_classes: usize) -> Result<Tensor<T>> {
    let &[n, ch, gh, gw] = pred.shape() else {
        return Err(Error::shape("detection_loss", format!("need (N,C,G,G), got {:?}", pred.shape())));
    };
    if ch != 1 + num_classes + 4 || gh != gw {
        return Err(Error::shape(
            "detection_loss",
            format!("head output {:?} does not fit {num_classes} classes on a square grid", pred.shape()),
        ));
    }
    if gt.len() != n {
        return Err(Error::Contract(format!("{} annotation sets for a batch of {n}", gt.len())));
    }
    let grid = gh;
    let cells = grid * grid;
    let mut obj = vec![T::zero(); n * cells];
    let mut cls_mask = vec![T::zero(); n * num_classes * cells];
    let mut box_mask = vec![T::zero(); n * 4 * cells];
    let mut box_tgt = vec![T::zero(); n * 4 * cells];
    let mut positives = 0usize;
    for (i, ann) in gt.iter().enumerate() {
        let ann = ann.ok_or_else(|| {
            Error::Contract(format!("sample {i} has no ground truth; detection loss is source-only"))
        })?;
        if ann.boxes.len() != ann.classes.len() {
            return Err(Error::Contract(format!("sample {i}: boxes and classes differ in length")));
        }
        if let Some(&k) = ann.classes.iter().find(|&&k| k >= num_classes) {
            return Err(Error::Contract(format!("sample {i}: class id {k} >= {num_classes}")));
        }
        let tg = encode_targets(ann, grid);
        for c in 0..cells {
            if tg.assigned[c].is_none() {
                continue;
            }
            positives += 1;
            obj[i * cells + c] = T::one();
            cls_mask[(i * num_classes + tg.classes[c]) * cells + c] = T::one();
            for k in 0..4 {
                box_mask[(i * 4 + k) * cells + c] = T::one();
                box_tgt[(i * 4 + k) * cells + c] = T::from_f64(tg.offsets[c][k]);
            }
        }
    }

    let obj_t = Tensor::new(&[n, 1, grid, grid], obj)?;
    let p = pred.slice_channels(0, 1)?.sigmoid()?.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos_term = p.log()?.mul(&obj_t)?;
    let neg_term = p.one_minus()?.log()?.mul(&obj_t.one_minus()?)?;
    let mut loss = pos_term.add(&neg_term)?.mean()?.scale(-1.0)?;
    if positives == 0 {
        return Ok(loss);
    }
    let inv_pos = 1.0 / positives as f64;

    let cls_t = Tensor::new(&[n, num_classes, grid, grid], cls_mask)?;
    let probs = pred.slice_channels(1, num_classes)?.softmax()?.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let ce = probs.log()?.mul(&cls_t)?.sum()?.scale(-inv_pos)?;

    let mask = Tensor::new(&[n, 4, grid, grid], box_mask)?;
    let target = Tensor::new(&[n, 4, grid, grid], box_tgt)?;
    let diff = pred.slice_channels(1 + num_classes, 4)?.mul(&mask)?.add(&target.scale(-1.0)?)?;
    let reg = diff.smooth_l1(SMOOTH_L1_BETA)?.sum()?.scale(inv_pos)?;

    loss = loss.add(&ce)?.add(&reg)?;
    Ok(loss)
}

/// Scalar losses of one training step.
#[derive(Debug, Clone)]
pub struct LossBundle<T: Element = f32> {
    pub l_cls: Tensor<T>,
    pub l_global: Tensor<T>,
    pub l_loc: Tensor<T>,
    pub l_adv: Tensor<T>,
    pub l_total: Tensor<T>,
}

impl<T: Element> LossBundle<T> {
    /// (l_cls, l_global, l_loc, l_adv, l_total) as doubles.
    pub fn values(&self) -> [f64; 5] {
        [
            self.l_cls.item().as_f64(),
            self.l_global.item().as_f64(),
            self.l_loc.item().as_f64(),
            self.l_adv.item().as_f64(),
            self.l_total.item().as_f64(),
        ]
    }
}

/// Combines the terms into `l_total = l_cls + l_loc + l_global`.
///
/// The min-max sign structure is not applied here: the domain-classifier
/// inputs pass through gradient reversal, so descending `l_total` trains the
/// classifiers to separate domains while the feature extractor receives
/// `∂l_cls - λ ∂l_adv`. Disabled terms are `None` and contribute an exact zero.
pub fn total_objective<T: Element>(
    l_cls: Tensor<T>,
    l_global: Option<Tensor<T>>,
    l_loc: Option<Tensor<T>>,
) -> Result<LossBundle<T>> {
    let zero = || Tensor::scalar(T::zero());
    let l_global = l_global.unwrap_or_else(zero);
    let l_loc = l_loc.unwrap_or_else(zero);
    let l_adv = l_loc.add(&l_global)?;
    let l_total = l_cls.add(&l_adv)?;
    Ok(LossBundle {
        l_cls,
        l_global,
        l_loc,
        l_adv,
        l_total,
    })
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn p_t_branches() {
        assert_eq!(p_t(0.3, Domain::Source).unwrap(), 0.3);
        assert_eq!(p_t(0.3, Domain::Target).unwrap(), 0.7);
        assert_eq!(p_t(1.0, Domain::Target).unwrap(), 0.0);
        assert!(matches!(p_t(1.2, Domain::Source), Err(Error::Domain(_))));
        assert!(matches!(p_t(f64::NAN, Domain::Source), Err(Error::Domain(_))));
    }

    #[test]
    fn modulated_values() {
        // (0.5)^5 ln 2, e^-2.5 ln 2, ln 2
        let ln2 = std::f64::consts::LN_2;
        assert!((modulated_loss(0.5, Modulator::Focal { gamma: 5.0 }) - 0.5f64.powi(5) * ln2).abs() < 1e-15);
        assert!((modulated_loss(0.5, Modulator::Focal { gamma: 5.0 }) - 0.021661).abs() < 1e-6);
        assert!((modulated_loss(0.5, Modulator::ExpFocal { eta: 5.0 }) - 0.056897).abs() < 1e-6);
        assert!((modulated_loss(0.5, Modulator::CrossEntropy) - 0.693147).abs() < 1e-6);
        assert!(modulated_loss(1.0, Modulator::Focal { gamma: 2.0 }) < 1e-12);
    }

    #[test]
    fn tensor_and_scalar_forms_agree() {
        let ps = [1e-9, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0];
        for kind in [Modulator::Focal { gamma: 3.0 }, Modulator::ExpFocal { eta: 5.0 }, Modulator::CrossEntropy] {
            let out = modulated_loss_tensor(&t(&[ps.len()], &ps), kind).unwrap();
            for (&p, &v) in ps.iter().zip(out.data()) {
                assert!((modulated_loss(p, kind) - v).abs() < 1e-12, "{kind} {p}");
            }
        }
    }

    #[test]
    fn negative_parameters_rejected() {
        let x = t(&[1], &[0.5]);
        assert!(modulated_loss_tensor(&x, Modulator::Focal { gamma: -1.0 }).is_err());
        assert!(modulated_loss_tensor(&x, Modulator::ExpFocal { eta: -0.1 }).is_err());
    }

    #[test]
    fn global_loss_examples() {
        let half = t(&[1], &[0.5]);
        let fl = global_loss(&half, &half, Modulator::Focal { gamma: 5.0 }).unwrap().item();
        assert!((fl - 0.021661).abs() < 1e-6);
        let ce = global_loss(&half, &half, Modulator::CrossEntropy).unwrap().item();
        assert!((ce - 0.693147).abs() < 1e-6);
        for kind in [Modulator::Focal { gamma: 5.0 }, Modulator::ExpFocal { eta: 5.0 }, Modulator::CrossEntropy] {
            let v = global_loss(&t(&[1], &[1.0]), &t(&[1], &[0.0]), kind).unwrap().item();
            assert!(v < 2e-7, "{kind}: {v}");
        }
        assert!(matches!(
            global_loss(&t(&[1], &[1.5]), &half, Modulator::CrossEntropy),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn local_loss_examples() {
        let half = Tensor::<f64>::full(&[1, 1, 4, 4], 0.5).unwrap();
        assert!((local_loss(&half, &half).unwrap().item() - 0.25).abs() < 1e-12);
        let zeros = Tensor::<f64>::zeros(&[1, 1, 4, 4]).unwrap();
        let ones = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0).unwrap();
        assert_eq!(local_loss(&zeros, &ones).unwrap().item(), 0.0);
        let ones4 = Tensor::<f64>::full(&[1, 1, 4, 4], 1.0).unwrap();
        let zeros3 = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        assert_eq!(local_loss(&ones4, &zeros3).unwrap().item(), 1.0);
        let bad = Tensor::<f64>::full(&[1, 1, 2, 2], -0.1).unwrap();
        assert!(matches!(local_loss(&bad, &half), Err(Error::Contract(_))));
    }

    fn one_cell_pred(obj_logit: f64, class_logits: [f64; 3], offs: [f64; 4]) -> Tensor<f64> {
        let mut v = vec![obj_logit];
        v.extend(class_logits);
        v.extend(offs);
        t(&[1, 8, 1, 1], &v)
    }

    #[test]
    fn detection_loss_one_positive_at_half() {
        // One cell covering the whole image; box equals the cell anchor.
        let ann = Annotations { boxes: vec![[0.5, 0.5, 1.0, 1.0]], classes: vec![2] };
        // class 2 at probability 0.5: logits (0, 0, ln 2)
        let pred = one_cell_pred(0.0, [0.0, 0.0, 2f64.ln()], [0.0; 4]);
        let l = detection_loss(&pred, &[Some(&ann)], 3).unwrap().item();
        assert!((l - 1.386294).abs() < 1e-6, "{l}");
    }

    #[test]
    fn detection_loss_minimum_cases() {
        let ann = Annotations { boxes: vec![[0.4, 0.55, 0.5, 0.25]], classes: vec![1] };
        let grid = 4;
        let tg = encode_targets(&ann, grid);
        let logit = ((1.0 - PROB_EPS) / PROB_EPS).ln();
        let big = 40.0;
        let cells = grid * grid;
        let mut v = vec![0.0; 8 * cells];
        for c in 0..cells {
            if tg.assigned[c].is_some() {
                v[c] = logit;
                v[(1 + 1) * cells + c] = big;
                for k in 0..4 {
                    v[(4 + k) * cells + c] = tg.offsets[c][k];
                }
            } else {
                v[c] = -logit;
            }
        }
        assert!(tg.assigned.iter().any(Option::is_some));
        let pred = t(&[1, 8, grid, grid], &v);
        assert!(detection_loss(&pred, &[Some(&ann)], 3).unwrap().item() < 1e-5);

        let empty = Annotations { boxes: vec![], classes: vec![] };
        let mut v = vec![0.0; 8 * cells];
        v[..cells].fill(-logit);
        let pred = t(&[1, 8, grid, grid], &v);
        assert!(detection_loss(&pred, &[Some(&empty)], 3).unwrap().item() < 1e-5);
    }

    #[test]
    fn detection_loss_rejects_unlabeled() {
        let pred = one_cell_pred(0.0, [0.0; 3], [0.0; 4]);
        assert!(matches!(detection_loss(&pred, &[None], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn assignment_prefers_smallest_box() {
        let ann = Annotations {
            boxes: vec![[0.55, 0.55, 0.8, 0.8], [0.4, 0.4, 0.3, 0.3]],
            classes: vec![0, 1],
        };
        let tg = encode_targets(&ann, 8);
        // cell (3,3) center (0.4375, 0.4375) lies in both
        assert_eq!(tg.assigned[3 * 8 + 3], Some(1));
        assert_eq!(tg.classes[3 * 8 + 3], 1);
        assert_eq!(tg.assigned[0], None);
        assert_eq!(tg.assigned[7 * 8 + 7], Some(0));
    }

    #[test]
    fn zero_offsets_decode_to_cell() {
        let b = decode_box([0.0; 4], 2, 5, 8);
        assert_eq!(b, [2.5 / 8.0, 5.5 / 8.0, 1.0 / 8.0, 1.0 / 8.0]);
        let ann = Annotations { boxes: vec![[0.3, 0.6, 0.4, 0.2]], classes: vec![0] };
        let tg = encode_targets(&ann, 8);
        for c in 0..64 {
            if tg.assigned[c].is_some() {
                let d = decode_box(tg.offsets[c], c % 8, c / 8, 8);
                for k in 0..4 {
                    assert!((d[k] - ann.boxes[0][k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bundle_sums_terms() {
        let b = total_objective(
            Tensor::<f64>::scalar(1.5),
            Some(Tensor::scalar(0.25)),
            Some(Tensor::scalar(0.125)),
        )
        .unwrap();
        assert_eq!(b.values(), [1.5, 0.25, 0.125, 0.375, 1.875]);
        let b = total_objective(Tensor::<f64>::scalar(2.0), None, None).unwrap();
        assert_eq!(b.l_adv.item(), 0.0);
        assert_eq!(b.l_total.item(), 2.0);
    }

    #[test]
    fn focal_gradient_vanishes_for_easy_examples() {
        let grad_at = |kind| {
            let x = t(&[1], &[0.99]).to_param();
            backward(&modulated_loss_tensor(&x, kind).unwrap().sum().unwrap()).unwrap();
            x.grad().unwrap()[0].abs()
        };
        let fl = grad_at(Modulator::Focal { gamma: 5.0 });
        let ce = grad_at(Modulator::CrossEntropy);
        assert!(fl < 1e-6 * ce, "{fl} vs {ce}");
    }
}
