//! Synthetic two-domain detection datasets.
//!
//! Three shape classes (circle, square, triangle) are rasterized into 3×32×32
//! images. Source images hold one or two large shapes on plain light
//! backgrounds. Targets differ by scenario:
//!
//! * `identical`: the source images themselves.
//! * `local-shift`: same layout distribution, then a low-frequency
//!   multiplicative haze and a hue rotation.
//! * `global-shift`: three to six small shapes on textured backgrounds.
//!
//! Every image draws from its own random stream keyed by (seed, domain,
//! split, index), so generation order does not matter.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Annotations, Domain};
use crate::swdt;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["circle", "square", "triangle"];
pub const MAX_BOXES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Identical,
    LocalShift,
    GlobalShift,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Identical => "identical",
            ScenarioKind::LocalShift => "local-shift",
            ScenarioKind::GlobalShift => "global-shift",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical" => Ok(ScenarioKind::Identical),
            "local-shift" => Ok(ScenarioKind::LocalShift),
            "global-shift" => Ok(ScenarioKind::GlobalShift),
            other => Err(Error::Config(format!(
                "unknown scenario {other:?} (expected identical, local-shift or global-shift)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub train_n: usize,
    pub test_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectionSample {
    pub id: usize,
    /// (3, 32, 32), values in [0, 1].
    pub image: Tensor<f32>,
    /// `None` once labels are withheld.
    pub annotations: Option<Annotations>,
    pub domain: Domain,
}

impl DetectionSample {
    /// Copy with labels removed, as seen by training on the target domain.
    pub fn unlabeled(&self) -> Self {
        Self {
            annotations: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub domain: Domain,
    pub samples: Vec<DetectionSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Every sample without labels.
    pub fn strip_labels(&self) -> Self {
        Self {
            samples: self.samples.iter().map(DetectionSample::unlabeled).collect(),
            ..self.clone()
        }
    }
}

/// The four datasets of a scenario.
#[derive(Debug, Clone)]
pub struct Generated {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl Generated {
    pub fn get(&self, domain: Domain, split: Split) -> &Dataset {
        match (domain, split) {
            (Domain::Source, Split::Train) => &self.source_train,
            (Domain::Source, Split::Test) => &self.source_test,
            (Domain::Target, Split::Train) => &self.target_train,
            (Domain::Target, Split::Test) => &self.target_test,
        }
    }
}

fn stream_id(domain: Domain, split: Split, index: usize) -> u64 {
    let d = domain.label() as u64;
    let s = matches!(split, Split::Test) as u64;
    (d << 63) | (s << 62) | index as u64
}

fn image_rng(seed: u64, domain: Domain, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, split, index));
    rng
}

/// RGB image under construction, channel-major.
struct Canvas {
    px: Vec<f64>,
}

const N: usize = IMAGE_SIZE;

impl Canvas {
    fn filled(rgb: [f64; 3]) -> Self {
        let mut px = vec![0.0; CHANNELS * N * N];
        for (c, &v) in rgb.iter().enumerate() {
            px[c * N * N..(c + 1) * N * N].fill(v);
        }
        Self { px }
    }

    fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.px[(c * N + y) * N + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.px[(c * N + y) * N + x] = v;
    }

    /// Blends `rgb` in by the shape's 4×4-supersampled coverage.
    fn draw(&mut self, class: usize, b: [f64; 4], rgb: [f64; 3]) {
        const SS: usize = 4;
        let (x0, x1) = (((b[0] - b[2] / 2.0) * N as f64).floor() as isize, ((b[0] + b[2] / 2.0) * N as f64).ceil() as isize);
        let (y0, y1) = (((b[1] - b[3] / 2.0) * N as f64).floor() as isize, ((b[1] + b[3] / 2.0) * N as f64).ceil() as isize);
        for py in y0.max(0)..y1.min(N as isize) {
            for px in x0.max(0)..x1.min(N as isize) {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = (px as f64 + (sx as f64 + 0.5) / SS as f64) / N as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) / SS as f64) / N as f64;
                        hits += inside(class, b, x, y) as usize;
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cov = hits as f64 / (SS * SS) as f64;
                let (py, px) = (py as usize, px as usize);
                for (c, &v) in rgb.iter().enumerate() {
                    let old = self.get(c, py, px);
                    self.set(c, py, px, old * (1.0 - cov) + v * cov);
                }
            }
        }
    }

    fn into_tensor(self) -> Tensor<f32> {
        let data = self.px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        Tensor::new(&[CHANNELS, N, N], data).expect("canvas shape")
    }
}

/// Whether `(x, y)` lies in the class shape inscribed in box `b`.
pub fn inside(class: usize, b: [f64; 4], x: f64, y: f64) -> bool {
    let (dx, dy) = (x - b[0], y - b[1]);
    let (hw, hh) = (b[2] / 2.0, b[3] / 2.0);
    match class {
        0 => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
        1 => dx.abs() <= hw && dy.abs() <= hh,
        _ => {
            // apex at top centre, base along the bottom edge
            let t = (dy + hh) / b[3];
            (0.0..=1.0).contains(&t) && dx.abs() <= hw * t
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Saturated shape colour drawn from a warm hue band, darker than any
/// background so that shapes keep contrast in every domain.
fn shape_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    hsv(rng.random_range(0.0..90.0), rng.random_range(0.6..1.0), rng.random_range(0.45..0.75))
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    (a[0] - b[0]).abs() < (a[2] + b[2]) / 2.0 + margin && (a[1] - b[1]).abs() < (a[3] + b[3]) / 2.0 + margin
}

/// Places `count` non-overlapping boxes with sides in `[lo, hi]`; gives up
/// on a box after a bounded number of attempts.
fn layout(rng: &mut ChaCha8Rng, count: usize, lo: f64, hi: f64) -> Vec<[f64; 4]> {
    let mut boxes: Vec<[f64; 4]> = Vec::new();
    for _ in 0..count {
        for _ in 0..200 {
            let (w, h) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
            let b = [cx, cy, w, h];
            if boxes.iter().all(|o| !overlaps(o, &b, 0.02)) {
                boxes.push(b);
                break;
            }
        }
    }
    boxes
}

fn light_background(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let base: f64 = rng.random_range(0.8..0.95);
    let mut rgb = [base; 3];
    for v in &mut rgb {
        *v = (*v + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
    }
    rgb
}

fn scene(rng: &mut ChaCha8Rng, bg: Canvas, count: usize, lo: f64, hi: f64) -> (Canvas, Annotations) {
    let mut canvas = bg;
    let boxes = layout(rng, count, lo, hi);
    let mut classes = Vec::with_capacity(boxes.len());
    for b in &boxes {
        let k = rng.random_range(0..NUM_CLASSES);
        canvas.draw(k, *b, shape_color(rng));
        classes.push(k);
    }
    (canvas, Annotations { boxes, classes })
}

/// One or two large shapes on a plain light background.
fn source_image(rng: &mut ChaCha8Rng) -> (Canvas, Annotations) {
    let count = rng.random_range(1..=2);
    let bg = Canvas::filled(light_background(rng));
    scene(rng, bg, count, 0.3, 0.5)
}

/// Smooth multiplicative field in [0.5, 1] from a few random plane waves.
fn apply_haze(rng: &mut ChaCha8Rng, canvas: &mut Canvas) {
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..2.0 * PI);
            let freq = rng.random_range(0.5..2.0);
            [freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0)]
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w[3]).sum();
    for y in 0..N {
        for x in 0..N {
            let (u, v) = ((x as f64 + 0.5) / N as f64, (y as f64 + 0.5) / N as f64);
            let s: f64 = waves.iter().map(|w| w[3] * (2.0 * PI * (w[0] * u + w[1] * v) + w[2]).cos()).sum::<f64>() / total;
            let m = 0.75 + 0.25 * s;
            for c in 0..CHANNELS {
                let old = canvas.get(c, y, x);
                canvas.set(c, y, x, old * m);
            }
        }
    }
}

/// Rotates colours about the grey axis by `degrees`.
fn rotate_hue(canvas: &mut Canvas, degrees: f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0f64.sqrt();
    let t = (1.0 - c) / 3.0;
    // Rodrigues rotation about (1,1,1)/sqrt(3)
    let m = [
        [c + t, t - s * k, t + s * k],
        [t + s * k, c + t, t - s * k],
        [t - s * k, t + s * k, c + t],
    ];
    for y in 0..N {
        for x in 0..N {
            let p = [canvas.get(0, y, x), canvas.get(1, y, x), canvas.get(2, y, x)];
            for (ch, row) in m.iter().enumerate() {
                canvas.set(ch, y, x, row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
            }
        }
    }
}

fn local_shift_image(rng: &mut ChaCha8Rng) -> (Canvas, Annotations) {
    let (mut canvas, ann) = source_image(rng);
    apply_haze(rng, &mut canvas);
    let angle = rng.random_range(120.0..240.0);
    rotate_hue(&mut canvas, angle);
    (canvas, ann)
}

/// Oriented stripes plus per-pixel noise around a mid-light grey.
fn textured_background(rng: &mut ChaCha8Rng) -> Canvas {
    let base = light_background(rng);
    let mut canvas = Canvas::filled(base);
    let theta = rng.random_range(0.0..PI);
    let freq = rng.random_range(3.0..8.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.08..0.15);
    for y in 0..N {
        for x in 0..N {
            let (u, v) = ((x as f64 + 0.5) / N as f64, (y as f64 + 0.5) / N as f64);
            let stripe = amp * (2.0 * PI * freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
            for c in 0..CHANNELS {
                let noise = rng.random_range(-0.05..0.05);
                canvas.set(c, y, x, base[c] - amp + stripe + noise);
            }
        }
    }
    canvas
}

fn global_shift_image(rng: &mut ChaCha8Rng) -> (Canvas, Annotations) {
    let bg = textured_background(rng);
    let count = rng.random_range(3..=MAX_BOXES);
    loop {
        let mut attempt = rng.clone();
        let (canvas, ann) = scene(&mut attempt, Canvas { px: bg.px.clone() }, count, 0.1, 0.2);
        *rng = attempt;
        if ann.boxes.len() >= 3 {
            return (canvas, ann);
        }
    }
}

fn generate_set(scenario: &Scenario, domain: Domain, split: Split, n: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let effective = match (scenario.kind, domain) {
                (ScenarioKind::Identical, _) | (_, Domain::Source) => Domain::Source,
                _ => Domain::Target,
            };
            let mut rng = image_rng(scenario.seed, effective, split, i);
            let (canvas, ann) = match (scenario.kind, effective) {
                (_, Domain::Source) => source_image(&mut rng),
                (ScenarioKind::LocalShift, _) => local_shift_image(&mut rng),
                _ => global_shift_image(&mut rng),
            };
            DetectionSample {
                id: i,
                image: canvas.into_tensor(),
                annotations: Some(ann),
                domain,
            }
        })
        .collect();
    Dataset {
        scenario: scenario.kind,
        seed: scenario.seed,
        domain,
        samples,
    }
}

/// Generates labelled train and test sets for both domains.
pub fn generate(scenario: &Scenario) -> Result<Generated> {
    if scenario.train_n == 0 || scenario.test_n == 0 {
        return Err(Error::Contract(format!(
            "sample counts must be positive (train {}, test {})",
            scenario.train_n, scenario.test_n
        )));
    }
    Ok(Generated {
        source_train: generate_set(scenario, Domain::Source, Split::Train, scenario.train_n),
        source_test: generate_set(scenario, Domain::Source, Split::Test, scenario.test_n),
        target_train: generate_set(scenario, Domain::Target, Split::Train, scenario.train_n),
        target_test: generate_set(scenario, Domain::Target, Split::Test, scenario.test_n),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    file: String,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    scenario: String,
    seed: u64,
    domain: Domain,
    samples: Vec<ManifestSample>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `manifest.json` and one SWDT image per sample into `dir`.
/// Unlabelled samples are written with empty box lists.
pub fn write_dataset(set: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(set.len());
    for s in &set.samples {
        let file = format!("img_{:05}.swdt", s.id);
        swdt::write_atomic(&dir.join(&file), &swdt::encode(&s.image))?;
        let (boxes, classes) = match &s.annotations {
            Some(a) => (a.boxes.clone(), a.classes.clone()),
            None => (Vec::new(), Vec::new()),
        };
        samples.push(ManifestSample { file, boxes, classes });
    }
    let manifest = Manifest {
        scenario: set.scenario.as_str().to_string(),
        seed: set.seed,
        domain: set.domain,
        samples,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    swdt::write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

fn validate_annotations(ann: &Annotations) -> std::result::Result<(), String> {
    if ann.boxes.len() != ann.classes.len() {
        return Err(format!("{} boxes but {} classes", ann.boxes.len(), ann.classes.len()));
    }
    if ann.boxes.is_empty() || ann.boxes.len() > MAX_BOXES {
        return Err(format!("box count {} outside [1, {MAX_BOXES}]", ann.boxes.len()));
    }
    const TOL: f64 = 1e-9;
    for b in &ann.boxes {
        let ok = b.iter().all(|v| v.is_finite())
            && b[2] > 0.0
            && b[3] > 0.0
            && b[0] - b[2] / 2.0 >= -TOL
            && b[1] - b[3] / 2.0 >= -TOL
            && b[0] + b[2] / 2.0 <= 1.0 + TOL
            && b[1] + b[3] / 2.0 <= 1.0 + TOL;
        if !ok {
            return Err(format!("box {b:?} is not inside the unit square"));
        }
    }
    if let Some(k) = ann.classes.iter().find(|&&k| k >= NUM_CLASSES) {
        return Err(format!("class id {k} >= {NUM_CLASSES}"));
    }
    Ok(())
}

/// Reads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&mpath, e.to_string()))?;
    let scenario: ScenarioKind = manifest
        .scenario
        .parse()
        .map_err(|e: Error| Error::load(&mpath, e.to_string()))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, m) in manifest.samples.into_iter().enumerate() {
        if m.file.contains('/') || m.file.contains('\\') || m.file.starts_with('.') {
            return Err(Error::load(&mpath, format!("sample {i}: file name {:?} is not a plain name", m.file)));
        }
        let ipath = dir.join(&m.file);
        let image: Tensor<f32> = swdt::read(&ipath)?;
        if image.shape() != [CHANNELS, N, N] {
            return Err(Error::load(&ipath, format!("image shape {:?}, expected [3, 32, 32]", image.shape())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::load(&ipath, "pixel values outside [0, 1]"));
        }
        let annotations = if m.boxes.is_empty() && m.classes.is_empty() {
            None
        } else {
            let a = Annotations { boxes: m.boxes, classes: m.classes };
            validate_annotations(&a).map_err(|d| Error::load(&mpath, format!("sample {i}: {d}")))?;
            Some(a)
        };
        samples.push(DetectionSample { id: i, image, annotations, domain: manifest.domain });
    }
    Ok(Dataset {
        scenario,
        seed: manifest.seed,
        domain: manifest.domain,
        samples,
    })
}

/// Writes `<root>/{source,target}/{train,test}`.
pub fn write_generated(g: &Generated, root: &Path) -> Result<()> {
    for domain in [Domain::Source, Domain::Target] {
        for split in [Split::Train, Split::Test] {
            write_dataset(g.get(domain, split), &dataset_dir(root, domain, split))?;
        }
    }
    Ok(())
}

pub fn dataset_dir(root: &Path, domain: Domain, split: Split) -> std::path::PathBuf {
    root.join(domain.as_str()).join(split.as_str())
}

pub fn read_generated(root: &Path) -> Result<Generated> {
    let r = |d, s| read_dataset(&dataset_dir(root, d, s));
    Ok(Generated {
        source_train: r(Domain::Source, Split::Train)?,
        source_test: r(Domain::Source, Split::Test)?,
        target_train: r(Domain::Target, Split::Train)?,
        target_test: r(Domain::Target, Split::Test)?,
    })
}
