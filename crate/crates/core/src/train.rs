//! Min-max training over paired source/target minibatches.
//!
//! One step draws a labelled source image and an unlabelled target image,
//! runs both through the network, and takes a single backward pass of
//! `l_cls + l_loc + l_global`. Gradient reversal in front of the domain
//! classifiers turns that descent into ascent for the feature extractor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DetectionSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, Modulator};
use crate::nn::{self, ForwardOptions, ModelParams, NetConfig, Reversal};
use crate::swdt;
use crate::tensor::{backward, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Fl,
    Efl,
    Ce,
}

impl LossKind {
    fn parse(v: &str) -> Option<Self> {
        match v {
            "fl" => Some(LossKind::Fl),
            "efl" => Some(LossKind::Efl),
            "ce" => Some(LossKind::Ce),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Fl => "fl",
            LossKind::Efl => "efl",
            LossKind::Ce => "ce",
        }
    }
}

/// Every training hyperparameter. Keys of the config file are the field
/// names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub gamma: f64,
    pub eta: f64,
    pub lambda: f64,
    pub use_global: bool,
    pub use_local: bool,
    pub use_context: bool,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub iters: u64,
    pub momentum: f64,
    pub seed: u64,
    /// Root written by dataset generation (`source/train`, `target/train`, ...).
    pub data_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Fl,
            gamma: 5.0,
            eta: 5.0,
            lambda: 1.0,
            use_global: true,
            use_local: true,
            use_context: true,
            lr: 0.001,
            lr_drop_factor: 0.1,
            iters: 2000,
            momentum: 0.9,
            seed: 0,
            data_dir: PathBuf::from("data"),
        }
    }
}

pub const CONFIG_KEYS: [&str; 13] = [
    "loss_kind",
    "gamma",
    "eta",
    "lambda",
    "use_global",
    "use_local",
    "use_context",
    "lr",
    "lr_drop_factor",
    "iters",
    "momentum",
    "seed",
    "data_dir",
];

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for key {key}"))),
    }
}

impl TrainConfig {
    /// Sets one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "loss_kind" => {
                self.loss_kind = LossKind::parse(v)
                    .ok_or_else(|| Error::Config(format!("invalid loss_kind {v:?} (expected fl, efl or ce)")))?
            }
            "gamma" => self.gamma = parse_num(key, v)?,
            "eta" => self.eta = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "use_global" => self.use_global = parse_bool(key, v)?,
            "use_local" => self.use_local = parse_bool(key, v)?,
            "use_context" => self.use_context = parse_bool(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_drop_factor" => self.lr_drop_factor = parse_num(key, v)?,
            "iters" => self.iters = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "loss_kind={}", self.loss_kind.as_str());
        let _ = writeln!(s, "gamma={}", self.gamma);
        let _ = writeln!(s, "eta={}", self.eta);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "use_global={}", self.use_global);
        let _ = writeln!(s, "use_local={}", self.use_local);
        let _ = writeln!(s, "use_context={}", self.use_context);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "lr_drop_factor={}", self.lr_drop_factor);
        let _ = writeln!(s, "iters={}", self.iters);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "data_dir={}", self.data_dir.display());
        s
    }

    /// Hex SHA-256 of the canonical config text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.modulator()?;
        crate::tensor::GradReverseAttr::new(self.lambda)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::Config(format!("lr_drop_factor must be in (0, 1], got {}", self.lr_drop_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.use_context && !(self.use_global || self.use_local) {
            return Err(Error::Config("use_context needs use_global or use_local".into()));
        }
        Ok(())
    }

    pub fn modulator(&self) -> Result<Modulator> {
        match self.loss_kind {
            LossKind::Fl => Modulator::Focal { gamma: self.gamma },
            LossKind::Efl => Modulator::ExpFocal { eta: self.eta },
            LossKind::Ce => Modulator::CrossEntropy,
        }
        .validate()
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            num_classes: NUM_CLASSES,
            local_context: self.use_context && self.use_local,
            global_context: self.use_context && self.use_global,
            ..NetConfig::default()
        }
    }

    /// Iteration at which the learning rate drops (5/7 of the run).
    pub fn drop_at(&self) -> u64 {
        self.iters * 5 / 7
    }

    /// Learning rate used by step `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.drop_at() {
            self.lr
        } else {
            self.lr * self.lr_drop_factor
        }
    }
}

/// Parameters, momentum buffers, step counter and the run's random stream.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub momentum: BTreeMap<String, Vec<f32>>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

/// Random stream of the training loop; parameter init uses other streams.
const LOOP_STREAM: u64 = u64::MAX;

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.net(), cfg.seed)?;
        let momentum = params.iter().map(|(k, v)| (k.clone(), vec![0.0; v.numel()])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(LOOP_STREAM);
        Ok(Self { params, momentum, iteration: 0, rng })
    }

    /// Writes the checkpoint atomically: everything goes into a sibling
    /// temporary directory that is renamed into place.
    pub fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.params.write_dir(&tmp.join("params"))?;
        let mdir = tmp.join("momentum");
        fs::create_dir_all(&mdir).map_err(|e| Error::io(&mdir, e))?;
        for (k, v) in &self.momentum {
            let shape = self.params.get(k)?.shape().to_vec();
            swdt::write(&Tensor::new(&shape, v.clone())?, &mdir.join(format!("{k}.swdt")))?;
        }
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let mut manifest = String::new();
        let _ = writeln!(manifest, "config_hash={}", cfg.hash());
        let _ = writeln!(manifest, "iteration={}", self.iteration);
        let _ = writeln!(manifest, "rng_seed={seed}");
        let _ = writeln!(manifest, "rng_stream={}", self.rng.get_stream());
        let _ = writeln!(manifest, "rng_word_pos={}", self.rng.get_word_pos());
        for (k, v) in self.params.iter() {
            let dims: Vec<String> = v.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(manifest, "param {k} {}", dims.join("x"));
        }
        let _ = write!(manifest, "# config\n{}", cfg.to_text().lines().map(|l| format!("# {l}\n")).collect::<String>());
        let mpath = tmp.join("manifest.txt");
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let mpath = dir.join("manifest.txt");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                if !line.starts_with('#') {
                    fields.insert(k.to_string(), v.to_string());
                }
            }
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| Error::load(&mpath, format!("missing {k}")));
        let bad = |k: &str| Error::load(&mpath, format!("malformed {k}"));
        let iteration: u64 = field("iteration")?.parse().map_err(|_| bad("iteration"))?;
        let seed_hex = field("rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(bad("rng_seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng_seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(field("rng_stream")?.parse().map_err(|_| bad("rng_stream"))?);
        rng.set_word_pos(field("rng_word_pos")?.parse().map_err(|_| bad("rng_word_pos"))?);
        let params = ModelParams::read_dir(&dir.join("params"))?;
        let mut momentum = BTreeMap::new();
        for (k, v) in params.iter() {
            let m: Tensor<f32> = swdt::read(&dir.join("momentum").join(format!("{k}.swdt")))?;
            if m.shape() != v.shape() {
                return Err(Error::load(&mpath, format!("momentum for {k} has shape {:?}", m.shape())));
            }
            momentum.insert(k.clone(), m.to_vec());
        }
        let hash = field("config_hash")?.clone();
        Ok((Self { params, momentum, iteration, rng }, hash))
    }
}

/// Config recorded in a checkpoint manifest, checked against its hash.
pub fn checkpoint_config(dir: &Path) -> Result<TrainConfig> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let body: String = text
        .lines()
        .skip_while(|l| *l != "# config")
        .skip(1)
        .filter_map(|l| l.strip_prefix("# "))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = TrainConfig::parse(&body).map_err(|e| Error::load(&mpath, e.to_string()))?;
    let recorded = text.lines().find_map(|l| l.strip_prefix("config_hash="));
    if recorded != Some(cfg.hash().as_str()) {
        return Err(Error::load(&mpath, "config does not match config_hash"));
    }
    Ok(cfg)
}

/// Uniformly draws one source and one target sample; target labels are
/// removed.
pub fn make_minibatch(
    source: &Dataset,
    target: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<(DetectionSample, DetectionSample)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract(format!(
            "minibatch needs nonempty sets (source {}, target {})",
            source.len(),
            target.len()
        )));
    }
    let s = source.samples[rng.random_range(0..source.len())].clone();
    let t = target.samples[rng.random_range(0..target.len())].unlabeled();
    Ok((s, t))
}

fn batch_of<T: Element>(s: &DetectionSample) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(s.image.shape());
    Ok(Tensor::new(&shape, s.image.to_vec())?.cast())
}

/// Knobs of [`step_losses`] used by oracles and the trainer.
#[derive(Debug, Clone)]
pub struct StepOptions<T: Element> {
    pub train: bool,
    pub seed: u64,
    pub reversal: Reversal<T>,
    /// Leave the detection loss out (adversarial terms only).
    pub adversarial_only: bool,
    pub detach_context: bool,
}

impl<T: Element> Default for StepOptions<T> {
    fn default() -> Self {
        Self { train: true, seed: 0, reversal: Reversal::Layer, adversarial_only: false, detach_context: false }
    }
}

/// Anchors for mirrored reversal, one pair per domain.
#[derive(Debug, Clone)]
pub struct MirrorAnchors<T: Element> {
    pub source: Reversal<T>,
    pub target: Reversal<T>,
}

/// Builds the full objective for one minibatch.
pub fn step_losses<T: Element>(
    params: &ModelParams<T>,
    cfg: &TrainConfig,
    source: &DetectionSample,
    target: &DetectionSample,
    opts: &StepOptions<T>,
    mirror: Option<&MirrorAnchors<T>>,
) -> Result<LossBundle<T>> {
    let net = cfg.net();
    let ann = source
        .annotations
        .as_ref()
        .ok_or_else(|| Error::Contract("source sample without labels".into()))?;
    let base = ForwardOptions {
        lambda: cfg.lambda,
        reversal: Reversal::Layer,
        local: cfg.use_local,
        global: cfg.use_global,
        zero_context: false,
        detach_context: opts.detach_context,
        train: opts.train,
        seed: opts.seed,
        detect: true,
    };
    let src_opts = ForwardOptions {
        reversal: mirror.map(|m| m.source.clone()).unwrap_or(Reversal::Layer),
        ..base.clone()
    };
    let tgt_opts = ForwardOptions {
        reversal: mirror.map(|m| m.target.clone()).unwrap_or(Reversal::Layer),
        seed: opts.seed ^ 0x5bd1_e995,
        detect: false,
        ..base
    };
    let needs_target = cfg.use_local || cfg.use_global;
    let s = nn::model_forward(params, &net, &batch_of(source)?, &src_opts)?;
    let l_cls = if opts.adversarial_only {
        Tensor::scalar(T::zero())
    } else {
        losses::detection_loss(s.detections.as_ref().expect("detect set"), &[Some(ann)], net.num_classes)?
    };
    if !needs_target {
        return losses::total_objective(l_cls, None, None);
    }
    let t = nn::model_forward(params, &net, &batch_of(target)?, &tgt_opts)?;
    let l_global = if cfg.use_global {
        let m = cfg.modulator()?;
        Some(losses::global_loss(s.global_prob.as_ref().expect("global on"), t.global_prob.as_ref().expect("global on"), m)?)
    } else {
        None
    };
    let l_loc = if cfg.use_local {
        Some(losses::local_loss(s.local_map.as_ref().expect("local on"), t.local_map.as_ref().expect("local on"))?)
    } else {
        None
    };
    losses::total_objective(l_cls, l_global, l_loc)
}

/// Losses of one step, in double precision, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub l_cls: f32,
    pub l_global: f32,
    pub l_loc: f32,
    pub l_total: f32,
    pub lr: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter={} l_cls={} l_global={} l_loc={} l_total={} lr={}",
            self.iteration, self.l_cls, self.l_global, self.l_loc, self.l_total, self.lr
        )
    }
}

/// SGD with momentum: `v ← μ v + g`, `θ ← θ − lr v`. Parameters without a
/// gradient keep their values but their momentum still decays.
pub fn sgd_update(state: &mut TrainState, lr: f64, momentum: f64) -> Result<()> {
    let (lr, mu) = (lr as f32, momentum as f32);
    let mut next = BTreeMap::new();
    for (k, p) in state.params.iter() {
        let v = state.momentum.get_mut(k).expect("momentum slot per parameter");
        let g = p.grad();
        if let Some(g) = &g {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NumericFault { node: format!("gradient of {k} (element {i})") });
            }
        }
        let mut data = p.to_vec();
        for i in 0..data.len() {
            let gi = g.as_ref().map_or(0.0, |g| g[i]);
            v[i] = mu * v[i] + gi;
            data[i] -= lr * v[i];
        }
        next.insert(k.clone(), Tensor::param(p.shape(), data)?);
    }
    state.params = ModelParams::from_map(next);
    Ok(())
}

/// One training step on a drawn minibatch.
pub fn train_step(
    state: &mut TrainState,
    source: &DetectionSample,
    target: &DetectionSample,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let seed: u64 = state.rng.random();
    let opts = StepOptions { seed, ..StepOptions::default() };
    state.params.zero_grad();
    let bundle = step_losses(&state.params, cfg, source, target, &opts, None)?;
    backward(&bundle.l_total)?;
    let lr = cfg.lr_at(state.iteration);
    sgd_update(state, lr, cfg.momentum)?;
    state.iteration += 1;
    let [l_cls, l_global, l_loc, _, l_total] = bundle.values();
    Ok(StepRecord {
        iteration: state.iteration,
        l_cls: l_cls as f32,
        l_global: l_global as f32,
        l_loc: l_loc as f32,
        l_total: l_total as f32,
        lr,
    })
}

/// Output locations of a training run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoint("final")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.log")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.log")
    }
}

/// Training sets as consumed by the loop: labelled source, unlabelled target.
pub struct TrainData {
    pub source: Dataset,
    pub target: Dataset,
}

impl TrainData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        use crate::data::{dataset_dir, read_dataset, Split};
        use crate::losses::Domain;
        let source = read_dataset(&dataset_dir(&cfg.data_dir, Domain::Source, Split::Train))?;
        let target = read_dataset(&dataset_dir(&cfg.data_dir, Domain::Target, Split::Train))?.strip_labels();
        Ok(Self { source, target })
    }
}

/// Steps from `state` up to iteration `until` (at most `cfg.iters`),
/// appending one metrics line per step and checkpointing at the
/// learning-rate drop. The last state is saved as `final` when the run is
/// complete and as `iter_<n>` otherwise.
pub fn train_from(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    run: &RunPaths,
    until: u64,
) -> Result<Vec<StepRecord>> {
    let until = until.min(cfg.iters);
    use std::io::Write;
    fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    let open = |p: PathBuf| {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))
            .map(|f| (f, p))
    };
    let (mut metrics, mpath) = open(run.metrics())?;
    let (mut timing, tpath) = open(run.timing())?;
    let mut records = Vec::new();
    let drop_at = cfg.drop_at();
    while state.iteration < until {
        let t0 = Instant::now();
        let (s, t) = make_minibatch(&data.source, &data.target, &mut state.rng)?;
        let rec = train_step(state, &s, &t, cfg)?;
        writeln!(metrics, "{}", rec.log_line()).map_err(|e| Error::io(&mpath, e))?;
        writeln!(timing, "iter={} wall_ms={:.3}", rec.iteration, t0.elapsed().as_secs_f64() * 1e3)
            .map_err(|e| Error::io(&tpath, e))?;
        records.push(rec);
        if state.iteration == drop_at && drop_at < cfg.iters {
            state.save(&run.checkpoint("phase1"), cfg)?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&mpath, e))?;
    if state.iteration >= cfg.iters {
        state.save(&run.final_checkpoint(), cfg)?;
    } else {
        state.save(&run.checkpoint(&format!("iter_{}", state.iteration)), cfg)?;
    }
    Ok(records)
}

/// Fresh run: initializes, trains and writes `checkpoints/final`.
pub fn train(cfg: &TrainConfig, data: &TrainData, run: &RunPaths) -> Result<(TrainState, Vec<StepRecord>)> {
    let mut state = TrainState::init(cfg)?;
    for p in [run.metrics(), run.timing()] {
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let records = train_from(&mut state, cfg, data, run, cfg.iters)?;
    Ok((state, records))
}

/// `l_adv` at the start of a step and after re-evaluating with only one side
/// of the min-max updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddleReport {
    pub base: f64,
    pub classifiers_updated: f64,
    pub features_updated: f64,
}

impl SaddleReport {
    pub fn holds(&self) -> bool {
        self.classifiers_updated < self.base && self.features_updated > self.base
    }
}

fn is_classifier(path: &str) -> bool {
    path.starts_with("dl.") || path.starts_with("dg.")
}

fn is_feature(path: &str) -> bool {
    path.starts_with("f1.") || path.starts_with("f2.")
}

/// Takes one plain gradient step on `l_adv` alone (64-bit, dropout off) and
/// re-evaluates `l_adv` with only the classifiers moved, then with only the
/// feature extractor moved.
pub fn saddle_check(
    params: &ModelParams<f32>,
    cfg: &TrainConfig,
    source: &DetectionSample,
    target: &DetectionSample,
    lr: f64,
) -> Result<SaddleReport> {
    let p64: ModelParams<f64> = params.cast();
    let opts = StepOptions { train: false, adversarial_only: true, ..StepOptions::default() };
    let bundle = step_losses(&p64, cfg, source, target, &opts, None)?;
    backward(&bundle.l_adv)?;
    let stepped = |keep: fn(&str) -> bool| -> Result<ModelParams<f64>> {
        let mut q = ModelParams::from_map(BTreeMap::new());
        for (k, v) in p64.iter() {
            let data = match (keep(k), v.grad()) {
                (true, Some(g)) => v.data().iter().zip(&g).map(|(&a, &b)| a - lr * b).collect(),
                _ => v.to_vec(),
            };
            q.insert(k, Tensor::param(v.shape(), data)?);
        }
        Ok(q)
    };
    let eval = |q: &ModelParams<f64>| -> Result<f64> {
        Ok(step_losses(q, cfg, source, target, &opts, None)?.l_adv.item())
    };
    Ok(SaddleReport {
        base: bundle.l_adv.item(),
        classifiers_updated: eval(&stepped(is_classifier)?)?,
        features_updated: eval(&stepped(is_feature)?)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Scenario, ScenarioKind};

    fn tiny() -> (TrainData, crate::data::Generated) {
        let g = generate(&Scenario { kind: ScenarioKind::LocalShift, seed: 0, train_n: 10, test_n: 2 }).unwrap();
        (TrainData { source: g.source_train.clone(), target: g.target_train.strip_labels() }, g)
    }

    #[test]
    fn config_text_roundtrip_and_errors() {
        let c = TrainConfig::parse("# defaults plus\nloss_kind=ce\ngamma = 3\nuse_local=false\nuse_context=false\n").unwrap();
        assert_eq!(c.loss_kind, LossKind::Ce);
        assert_eq!(c.gamma, 3.0);
        assert!(!c.use_local);
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        match TrainConfig::parse("gama=3") {
            Err(Error::Config(m)) => assert!(m.contains("gama")),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig::parse("lambda=-1").is_err());
        assert!(TrainConfig::parse("lr=0").is_err());
        assert_eq!(c.to_text().lines().count(), CONFIG_KEYS.len());
    }

    #[test]
    fn schedule_drops_at_five_sevenths() {
        let c = TrainConfig { iters: 1400, ..TrainConfig::default() };
        assert_eq!(c.drop_at(), 1000);
        assert_eq!(c.lr_at(999), 0.001);
        assert!((c.lr_at(1000) - 0.0001).abs() < 1e-18);
    }

    #[test]
    fn minibatch_contract() {
        let (d, _) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 10];
        for _ in 0..1000 {
            let (s, t) = make_minibatch(&d.source, &d.target, &mut rng).unwrap();
            seen[s.id] = true;
            assert!(t.annotations.is_none());
            assert!(s.annotations.is_some());
        }
        assert!(seen.iter().all(|&b| b));
        let empty = Dataset { samples: vec![], ..d.source.clone() };
        assert!(matches!(make_minibatch(&empty, &d.target, &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn target_labels_never_reach_detection_loss() {
        let (d, _) = tiny();
        let cfg = TrainConfig::default();
        let p = ModelParams::<f32>::init(&cfg.net(), 0).unwrap();
        let unl = d.source.samples[0].unlabeled();
        let r = step_losses(&p, &cfg, &unl, &d.target.samples[0], &StepOptions::default(), None);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let (d, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { iters: 6, seed: 3, ..TrainConfig::default() };
        let (full, recs) = train(&cfg, &d, &RunPaths::new(&dir.path().join("a"))).unwrap();

        let run_b = RunPaths::new(&dir.path().join("b"));
        let mut state = TrainState::init(&cfg).unwrap();
        train_from(&mut state, &cfg, &d, &run_b, 3).unwrap();
        let (mut state, _) = TrainState::load(&run_b.checkpoint("iter_3")).unwrap();
        let rest = train_from(&mut state, &cfg, &d, &run_b, cfg.iters).unwrap();
        assert_eq!(&recs[3..], &rest[..]);
        assert!(state.params.bit_eq(&full.params));
    }

    #[test]
    fn zero_iterations_checkpoint_is_init() {
        let (d, _) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { iters: 0, seed: 9, ..TrainConfig::default() };
        let run = RunPaths::new(dir.path());
        train(&cfg, &d, &run).unwrap();
        let (state, hash) = TrainState::load(&run.final_checkpoint()).unwrap();
        assert!(state.params.bit_eq(&ModelParams::init(&cfg.net(), 9).unwrap()));
        assert_eq!(hash, cfg.hash());
        assert_eq!(checkpoint_config(&run.final_checkpoint()).unwrap(), cfg);
        assert_eq!(fs::read_to_string(run.metrics()).unwrap(), "");
    }

    #[test]
    fn saddle_direction() {
        let (d, _) = tiny();
        let cfg = TrainConfig::default();
        let p = ModelParams::<f32>::init(&cfg.net(), 1).unwrap();
        let r = saddle_check(&p, &cfg, &d.source.samples[0], &d.target.samples[1], 1e-3).unwrap();
        assert!(r.holds(), "{r:?}");
    }
}
