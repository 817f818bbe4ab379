//! Detector and domain classifiers.
//!
//! Topology (desk scale):
//!
//! ```text
//! image ─F1─▶ f1 (stride 2) ─F2─▶ f (stride 4) ─R─▶ cells ─fuse─▶ head
//!              │                   │                    ▲
//!              └─GRL─▶ D_l ─▶ map  └─GRL─▶ D_g ─▶ prob  │
//!                        └─ v1 ─────────────┴─ v2 ──────┘
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::decode_box;
use crate::swdt;
use crate::tensor::{Element, Tensor};

/// Width of each context vector.
pub const CONTEXT_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// F1 width.
    pub c1: usize,
    /// F2 width; also the per-cell region feature width.
    pub c2: usize,
    pub local_hidden: usize,
    pub global_width: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub norm_eps: f64,
    /// Concatenate the local-classifier context vector onto region features.
    pub local_context: bool,
    /// Concatenate the global-classifier context vector onto region features.
    pub global_context: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            c1: 32,
            c2: 64,
            local_hidden: 64,
            global_width: CONTEXT_DIM,
            num_classes: 3,
            dropout: 0.1,
            norm_eps: 1e-5,
            local_context: false,
            global_context: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(4) || self.image_size < 8 {
            return Err(Error::Config(format!("image size {} must be a multiple of 4, at least 8", self.image_size)));
        }
        // three stride-2 convs (k3, p1) on the global map
        let mut s = self.image_size / 4;
        for _ in 0..3 {
            if s == 0 {
                break;
            }
            s = (s - 1) / 2 + 1;
        }
        if self.image_size / 4 < 1 || s < 1 {
            return Err(Error::Config("global classifier input collapses below 1x1".into()));
        }
        if self.global_width != CONTEXT_DIM {
            return Err(Error::Config(format!(
                "global classifier width must equal the context width {CONTEXT_DIM}, got {}",
                self.global_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.num_classes == 0 || self.c1 == 0 || self.c2 == 0 || self.local_hidden == 0 {
            return Err(Error::Config("network widths and class count must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / 4
    }

    pub fn head_channels(&self) -> usize {
        1 + self.num_classes + 4
    }

    pub fn context_branches(&self) -> usize {
        self.local_context as usize + self.global_context as usize
    }

    /// Region feature width after fusion.
    pub fn fused_width(&self) -> usize {
        self.c2 + CONTEXT_DIM * self.context_branches()
    }

    /// Every parameter path with its shape, in initialization order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            v.push((format!("{name}.w"), vec![o, i, k, k]));
            v.push((format!("{name}.b"), vec![o]));
        };
        conv("f1.conv1", self.c1, self.in_channels, 3);
        conv("f1.conv2", self.c1, self.c1, 3);
        conv("f2.conv1", self.c2, self.c1, 3);
        conv("f2.conv2", self.c2, self.c2, 3);
        conv("dl.conv1", self.local_hidden, self.c1, 1);
        conv("dl.conv2", CONTEXT_DIM, self.local_hidden, 1);
        conv("dl.conv3", 1, CONTEXT_DIM, 1);
        conv("dg.conv1", self.global_width, self.c2, 3);
        conv("dg.conv2", self.global_width, self.global_width, 3);
        conv("dg.conv3", self.global_width, self.global_width, 3);
        conv("r.conv1", self.c2, self.c2, 3);
        conv("r.conv2", self.c2, self.c2, 3);
        conv("r.head", self.head_channels(), self.fused_width(), 1);
        for i in 1..=3 {
            v.push((format!("dg.norm{i}.scale"), vec![self.global_width]));
            v.push((format!("dg.norm{i}.shift"), vec![self.global_width]));
        }
        v.push(("dg.fc.w".into(), vec![1, self.global_width]));
        v.push(("dg.fc.b".into(), vec![1]));
        v
    }
}

fn path_stream(path: &str) -> u64 {
    path.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Learnable parameters keyed by stable path names.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Element = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    /// Seeded initialization: weights from N(0, 2/fan_in), zero biases, unit
    /// norm scales. Each parameter draws from its own stream keyed by its
    /// path, so a parameter's values do not depend on which others exist.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut map = BTreeMap::new();
        for (path, shape) in cfg.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if path.ends_with(".w") {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(path_stream(&path));
                (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
            } else if path.ends_with(".scale") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            map.insert(path, Tensor::param(&shape, data)?);
        }
        Ok(Self { map })
    }

    pub fn from_map(map: BTreeMap<String, Tensor<T>>) -> Self {
        Self { map }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.map
            .get(path)
            .ok_or_else(|| Error::Contract(format!("missing parameter {path}")))
    }

    pub fn insert(&mut self, path: &str, t: Tensor<T>) {
        self.map.insert(path.to_string(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.map.values().for_each(Tensor::zero_grad);
    }

    /// Same values in another precision, as fresh gradient leaves.
    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast::<U>().to_param())).collect(),
        }
    }

    /// Bitwise equality of every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

impl ModelParams<f32> {
    /// One SWDT file per parameter plus `params.txt` listing path and shape.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut listing = String::new();
        for (path, t) in &self.map {
            swdt::write(t, &dir.join(format!("{path}.swdt")))?;
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            listing.push_str(&format!("{path} {}\n", dims.join("x")));
        }
        let listing_path = dir.join("params.txt");
        fs::write(&listing_path, listing).map_err(|e| Error::io(&listing_path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let listing_path = dir.join("params.txt");
        let text = fs::read_to_string(&listing_path).map_err(|e| Error::io(&listing_path, e))?;
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (path, dims) = line
                .split_once(' ')
                .ok_or_else(|| Error::load(&listing_path, format!("malformed line {line:?}")))?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::load(&listing_path, format!("bad extent in {line:?}"))))
                .collect::<Result<_>>()?;
            let file = dir.join(format!("{path}.swdt"));
            let t = swdt::read(&file)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::load(&file, format!("shape {:?}, listing says {shape:?}", t.shape())));
            }
            map.insert(path.to_string(), t.to_param());
        }
        Ok(Self { map })
    }

    /// Checks that every parameter of `cfg` is present with the right shape.
    pub fn check_layout(&self, cfg: &NetConfig) -> Result<()> {
        let layout = cfg.layout();
        if layout.len() != self.map.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} parameters, network expects {}",
                self.map.len(),
                layout.len()
            )));
        }
        for (path, shape) in layout {
            let t = self.get(&path)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!("parameter {path} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

fn conv<T: Element>(p: &ModelParams<T>, name: &str, x: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    x.conv2d(p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), stride, pad)
}

/// `(f1, f)`: the mid-level map at stride 2 and the global map at stride 4.
pub fn forward_features<T: Element>(p: &ModelParams<T>, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let expected = p.get("f1.conv1.w")?.shape()[1];
    if image.ndim() != 4 || image.shape()[1] != expected {
        return Err(Error::shape(
            "forward_features",
            format!("expected (N,{expected},H,W) image batch, got {:?}", image.shape()),
        ));
    }
    let h = conv(p, "f1.conv1", image, 1, 1)?.relu()?;
    let f1 = conv(p, "f1.conv2", &h, 2, 1)?.relu()?;
    let h = conv(p, "f2.conv1", &f1, 2, 1)?.relu()?;
    let f = conv(p, "f2.conv2", &h, 1, 1)?.relu()?;
    Ok((f1, f))
}

/// Per-position domain map `(N,1,H,W)` and context vector `v1 (N,128)`.
pub fn forward_local_classifier<T: Element>(p: &ModelParams<T>, f1: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let h = conv(p, "dl.conv1", f1, 1, 0)?.relu()?;
    let h = conv(p, "dl.conv2", &h, 1, 0)?.relu()?;
    let v1 = h.global_avg_pool()?;
    let map = conv(p, "dl.conv3", &h, 1, 0)?.sigmoid()?;
    Ok((map, v1))
}

/// Probability of source `(N,1)` and context vector `v2 (N,128)`.
pub fn forward_global_classifier<T: Element>(
    p: &ModelParams<T>,
    f: &Tensor<T>,
    dropout: f64,
    eps: f64,
    train: bool,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut h = f.clone();
    for i in 1..=3 {
        h = conv(p, &format!("dg.conv{i}"), &h, 2, 1)?;
        h = h.channel_affine_norm(p.get(&format!("dg.norm{i}.scale"))?, p.get(&format!("dg.norm{i}.shift"))?, eps)?;
        h = h.relu()?.dropout(dropout, train, seed.wrapping_add(i as u64))?;
    }
    let v2 = h.global_avg_pool()?;
    let prob = v2.linear(p.get("dg.fc.w")?, Some(p.get("dg.fc.b")?))?.sigmoid()?;
    Ok((prob, v2))
}

/// How context vectors reach the detection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextMode {
    Disabled,
    Enabled,
    /// Replaced by zeros of the same width.
    Zeroed,
}

/// Concatenates every `(N,D)` context vector onto each cell of `region`
/// `(N,C,G,G)`.
pub fn fuse_context<T: Element>(region: &Tensor<T>, contexts: &[&Tensor<T>], mode: ContextMode) -> Result<Tensor<T>> {
    if mode == ContextMode::Disabled {
        return Ok(region.clone());
    }
    if contexts.is_empty() {
        return Err(Error::Contract("context fusion enabled without context vectors".into()));
    }
    let (h, w) = (region.shape()[2], region.shape()[3]);
    let mut parts = vec![region.clone()];
    for v in contexts {
        let v = match mode {
            ContextMode::Zeroed => Tensor::zeros(v.shape())?,
            _ => (*v).clone(),
        };
        parts.push(v.broadcast_spatial(h, w)?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat_channels(&refs)
}

/// Two 3×3 convs over the global map giving per-cell region features.
pub fn forward_region<T: Element>(p: &ModelParams<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let h = conv(p, "r.conv1", f, 1, 1)?.relu()?;
    conv(p, "r.conv2", &h, 1, 1)?.relu()
}

/// Per-cell `(objectness logit, K class logits, dx, dy, log w, log h)`.
pub fn forward_detection_head<T: Element>(p: &ModelParams<T>, fused: &Tensor<T>) -> Result<Tensor<T>> {
    conv(p, "r.head", fused, 1, 0)
}

/// How the domain-classifier inputs are cut off from the feature extractor.
#[derive(Debug, Clone)]
pub enum Reversal<T: Element> {
    /// Gradient reversal layer.
    Layer,
    /// `a - λ (x - a)` with `a` fixed at the given anchors (f1, f). Same
    /// value at the anchor; its true derivative is the reversed gradient, so
    /// finite differences can verify the layer.
    Mirror { f1: Tensor<T>, f: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct ForwardOptions<T: Element> {
    pub lambda: f64,
    pub reversal: Reversal<T>,
    /// Run the local classifier.
    pub local: bool,
    /// Run the global classifier.
    pub global: bool,
    /// Replace context vectors by zeros before fusion.
    pub zero_context: bool,
    /// Cut context vectors from the graph before fusion.
    pub detach_context: bool,
    pub train: bool,
    pub seed: u64,
    /// Run the region branch and detection head.
    pub detect: bool,
}

impl<T: Element> Default for ForwardOptions<T> {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            reversal: Reversal::Layer,
            local: true,
            global: true,
            zero_context: false,
            detach_context: false,
            train: false,
            seed: 0,
            detect: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs<T: Element> {
    pub f1: Tensor<T>,
    pub f: Tensor<T>,
    pub local_map: Option<Tensor<T>>,
    pub global_prob: Option<Tensor<T>>,
    pub v1: Option<Tensor<T>>,
    pub v2: Option<Tensor<T>>,
    /// `(N, 1 + K + 4, G, G)` when `detect` is set.
    pub detections: Option<Tensor<T>>,
}

fn reverse<T: Element>(x: &Tensor<T>, anchor: Option<&Tensor<T>>, lambda: f64) -> Result<Tensor<T>> {
    match anchor {
        None => x.grad_reverse(lambda),
        Some(a) => {
            crate::tensor::GradReverseAttr::new(lambda)?;
            x.add(&a.scale(-1.0)?)?.scale(-lambda)?.add(a)
        }
    }
}

/// Full forward pass. A classifier runs when its loss is active
/// (`opts.local` / `opts.global`) or when the network fuses its context.
pub fn model_forward<T: Element>(
    p: &ModelParams<T>,
    cfg: &NetConfig,
    image: &Tensor<T>,
    opts: &ForwardOptions<T>,
) -> Result<ForwardOutputs<T>> {
    let (f1, f) = forward_features(p, image)?;
    let (a1, af) = match &opts.reversal {
        Reversal::Layer => (None, None),
        Reversal::Mirror { f1, f } => (Some(f1), Some(f)),
    };
    let (mut local_map, mut v1) = (None, None);
    if opts.local || cfg.local_context {
        let (m, v) = forward_local_classifier(p, &reverse(&f1, a1, opts.lambda)?)?;
        local_map = Some(m);
        v1 = Some(v);
    }
    let (mut global_prob, mut v2) = (None, None);
    if opts.global || cfg.global_context {
        let (g, v) = forward_global_classifier(
            p,
            &reverse(&f, af, opts.lambda)?,
            cfg.dropout,
            cfg.norm_eps,
            opts.train,
            opts.seed,
        )?;
        global_prob = Some(g);
        v2 = Some(v);
    }
    if !opts.detect {
        return Ok(ForwardOutputs { f1, f, local_map, global_prob, v1, v2, detections: None });
    }
    let mut contexts = Vec::new();
    if cfg.local_context {
        contexts.push(v1.clone().expect("computed above"));
    }
    if cfg.global_context {
        contexts.push(v2.clone().expect("computed above"));
    }
    if opts.detach_context {
        contexts = contexts.iter().map(Tensor::detach).collect();
    }
    let mode = match (contexts.is_empty(), opts.zero_context) {
        (true, _) => ContextMode::Disabled,
        (false, false) => ContextMode::Enabled,
        (false, true) => ContextMode::Zeroed,
    };
    let region = forward_region(p, &f)?;
    let refs: Vec<&Tensor<T>> = contexts.iter().collect();
    let fused = fuse_context(&region, &refs, mode)?;
    let detections = Some(forward_detection_head(p, &fused)?);
    Ok(ForwardOutputs {
        f1,
        f,
        local_map,
        global_prob,
        v1,
        v2,
        detections,
    })
}

/// A decoded detection on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class: usize,
    pub confidence: f64,
    /// Row-major grid cell that produced the box.
    pub cell: usize,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Clips a `(cx, cy, w, h)` box to the unit square.
pub fn clip_box(b: [f64; 4]) -> [f64; 4] {
    let x0 = (b[0] - b[2] / 2.0).clamp(0.0, 1.0);
    let y0 = (b[1] - b[3] / 2.0).clamp(0.0, 1.0);
    let x1 = (b[0] + b[2] / 2.0).clamp(0.0, 1.0);
    let y1 = (b[1] + b[3] / 2.0).clamp(0.0, 1.0);
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0]
}

/// Decodes one image's head output `(C, G, G)` (sample `n` of a batch) into
/// one detection per cell: confidence is objectness times the highest class
/// probability.
pub fn decode<T: Element>(head: &Tensor<T>, n: usize, num_classes: usize) -> Vec<Detection> {
    let (ch, g) = (head.shape()[1], head.shape()[2]);
    let cells = g * g;
    let base = n * ch * cells;
    let v = |c: usize, cell: usize| head.data()[base + c * cells + cell].as_f64();
    (0..cells)
        .map(|cell| {
            let obj = sigmoid(v(0, cell));
            let logits: Vec<f64> = (0..num_classes).map(|k| v(1 + k, cell)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let (class, best) = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &l)| if l > acc.1 { (k, l) } else { acc });
            let prob = (best - m).exp() / z;
            let offs = [v(1 + num_classes, cell), v(2 + num_classes, cell), v(3 + num_classes, cell), v(4 + num_classes, cell)];
            Detection {
                bbox: clip_box(decode_box(offs, cell % g, cell / g, g)),
                class,
                confidence: obj * prob,
                cell,
            }
        })
        .collect()
}
