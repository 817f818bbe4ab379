use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use swda::data::{self, Scenario, ScenarioKind};
use swda::eval;
use swda::experiment::{self, GridConfig};
use swda::train::{self, RunPaths, TrainConfig, TrainData, TrainState};
use swda::verify::{self, SuiteOptions};
use swda::Error;

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

const EXIT_USAGE: u8 = 1;
const EXIT_CONTRACT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "swda", version, about = "Adversarial domain alignment for a toy one-stage detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a source/target dataset pair.
    GenData(GenData),
    /// Train one configuration; the run directory is named from the config hash.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a labelled dataset and print the report as JSON.
    Eval(EvalCmd),
    /// Train and evaluate the six alignment configurations over several seeds.
    Ablate(Ablate),
    /// Check every analytic gradient against central differences.
    Gradcheck(Gradcheck),
    /// Project pooled backbone features of both domains onto two principal axes.
    ExportFeatures(ExportFeatures),
}

#[derive(Args)]
struct GenData {
    /// identical, local-shift or global-shift
    #[arg(long)]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training images per domain.
    #[arg(long, default_value_t = 500)]
    train_n: usize,
    /// Test images per domain.
    #[arg(long, default_value_t = 100)]
    test_n: usize,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Config keys accepted as `--key=value`; applied after `--config`.
#[derive(Args, Default)]
struct Overrides {
    /// fl, efl or ce
    #[arg(long = "loss_kind")]
    loss_kind: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    /// Gradient reversal weight.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long = "use_global")]
    use_global: Option<String>,
    #[arg(long = "use_local")]
    use_local: Option<String>,
    #[arg(long = "use_context")]
    use_context: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "lr_drop_factor")]
    lr_drop_factor: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Root holding source/ and target/ dataset directories.
    #[arg(long = "data_dir")]
    data_dir: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        [
            ("loss_kind", &self.loss_kind),
            ("gamma", &self.gamma),
            ("eta", &self.eta),
            ("lambda", &self.lambda),
            ("use_global", &self.use_global),
            ("use_local", &self.use_local),
            ("use_context", &self.use_context),
            ("lr", &self.lr),
            ("lr_drop_factor", &self.lr_drop_factor),
            ("iters", &self.iters),
            ("momentum", &self.momentum),
            ("seed", &self.seed),
            ("data_dir", &self.data_dir),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }

    fn config(&self, file: Option<&Path>) -> swda::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in self.pairs() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainCmd {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent of the run directories.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalCmd {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (containing manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Replace context vectors by zeros at inference.
    #[arg(long)]
    zero_context: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    scenario: ScenarioKind,
    /// Number of seeds; each seed renders its own data.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// First seed of the range.
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train_n: usize,
    #[arg(long, default_value_t = 100)]
    test_n: usize,
    /// Comma-separated subset of the grid (default: all six).
    #[arg(long, value_delimiter = ',')]
    configs: Vec<GridConfig>,
    /// Base config file; the grid overrides the alignment switches.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Gradcheck {
    /// Random points per primitive and loss.
    #[arg(long, default_value_t = 10)]
    points: usize,
    /// Random points for the full training objective.
    #[arg(long, default_value_t = 2)]
    full_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the analytic gradient of one op (or "all") to exercise the failure path.
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct ExportFeatures {
    /// Run directory or checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source dataset directory.
    #[arg(long)]
    source: PathBuf,
    /// Target dataset directory.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Core(Error),
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = Result<(), Failure>;

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

fn write_manifest(dir: &Path, command: &str, config: Option<&TrainConfig>, seed: Option<u64>, extra: serde_json::Value) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Error::Contract(format!("cannot create {}: {e}", dir.display())))?;
    let m = json!({
        "command": command,
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
        "config": config.map(TrainConfig::to_text),
        "config_hash": config.map(TrainConfig::hash),
        "seed": seed.or(config.map(|c| c.seed)),
        "git_describe": git_describe(),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "details": extra,
    });
    let path = dir.join("run-manifest.json");
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| Error::Contract(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn resolve_checkpoint(p: &Path) -> PathBuf {
    let fin = RunPaths::new(p).final_checkpoint();
    if fin.join("manifest.txt").exists() {
        fin
    } else {
        p.to_path_buf()
    }
}

fn gen_data(a: GenData) -> Outcome {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .map_err(|e| Error::Contract(format!("cannot read {}: {e}", a.out.display())))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(Failure::Usage(format!("{} is not empty; pass --force to replace it", a.out.display())));
        }
        if non_empty {
            fs::remove_dir_all(&a.out).map_err(|e| Error::Contract(format!("cannot clear {}: {e}", a.out.display())))?;
        }
    }
    let g = data::generate(&Scenario { kind: a.scenario, seed: a.seed, train_n: a.train_n, test_n: a.test_n })?;
    data::write_generated(&g, &a.out)?;
    write_manifest(
        &a.out,
        "gen-data",
        None,
        Some(a.seed),
        json!({ "scenario": a.scenario.as_str(), "train_n": a.train_n, "test_n": a.test_n }),
    )?;
    say!("wrote {} ({} train + {} test per domain)", a.out.display(), a.train_n, a.test_n);
    Ok(())
}

fn train_cmd(a: TrainCmd) -> Outcome {
    let cfg = a.overrides.config(a.config.as_deref())?;
    let run_dir = a.runs_dir.join(&cfg.hash()[..16]);
    let data = TrainData::load(&cfg)?;
    let run = RunPaths::new(&run_dir);
    fs::create_dir_all(&run_dir).map_err(|e| Error::Contract(format!("cannot create {}: {e}", run_dir.display())))?;
    fs::write(run_dir.join("config.txt"), cfg.to_text())
        .map_err(|e| Error::Contract(format!("cannot write config: {e}")))?;
    write_manifest(&run_dir, "train", Some(&cfg), None, json!({}))?;
    let (state, records) = train::train(&cfg, &data, &run)?;
    if let Some(last) = records.last() {
        say!("{}", last.log_line());
    }
    say!("run {} finished at iteration {}", run_dir.display(), state.iteration);
    Ok(())
}

fn eval_cmd(a: EvalCmd) -> Outcome {
    let ckpt = resolve_checkpoint(&a.checkpoint);
    let cfg = train::checkpoint_config(&ckpt)?;
    let (state, _) = TrainState::load(&ckpt)?;
    state.params.check_layout(&cfg.net())?;
    let set = data::read_dataset(&a.data)?;
    let report = eval::evaluate(&state.params, &cfg.net(), &set, a.zero_context)?;
    let text = report.to_json();
    say!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, text + "\n").map_err(|e| Error::Contract(format!("cannot write {}: {e}", out.display())))?;
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        write_manifest(dir, "eval", Some(&cfg), None, json!({ "checkpoint": ckpt, "data": a.data, "zero_context": a.zero_context }))?;
    }
    Ok(())
}

fn ablate(a: Ablate) -> Outcome {
    let base = a.overrides.config(a.config.as_deref())?;
    let configs = if a.configs.is_empty() { GridConfig::ALL.to_vec() } else { a.configs.clone() };
    write_manifest(
        &a.out,
        "ablate",
        Some(&base),
        None,
        json!({
            "scenario": a.scenario.as_str(),
            "seeds": a.seeds,
            "first_seed": a.first_seed,
            "train_n": a.train_n,
            "test_n": a.test_n,
            "configs": configs.iter().map(|c| c.name()).collect::<Vec<_>>(),
        }),
    )?;
    let cells = experiment::run_grid(&base, a.scenario, &configs, a.first_seed..a.first_seed + a.seeds, (a.train_n, a.test_n), &a.out, |c| {
        match &c.error {
            None => eprintln!(
                "{} seed {}: target {:.4} source {:.4}",
                c.config.name(),
                c.seed,
                c.target_map.unwrap_or(f64::NAN),
                c.source_map.unwrap_or(f64::NAN)
            ),
            Some(e) => eprintln!("{} seed {}: failed: {e}", c.config.name(), c.seed),
        }
    })?;
    let write = |name: &str, text: &str| {
        let p = a.out.join(name);
        fs::write(&p, text).map_err(|e| Error::Contract(format!("cannot write {}: {e}", p.display())))
    };
    write("cells.csv", &experiment::cells_csv(&cells))?;
    let summary = experiment::rows_csv(&experiment::summarize(&cells));
    write("summary.csv", &summary)?;
    say!("{}", summary.trim_end());
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Outcome {
    let opts = SuiteOptions { points: a.points, seed: a.seed, corrupt: a.corrupt.clone() };
    let mut checks = verify::primitive_suite(&opts)?;
    checks.extend(verify::loss_suite(&opts)?);
    checks.push(verify::full_objective_suite(&SuiteOptions { points: a.full_points, ..opts })?);
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        say!("{:<26} f64 {:.3e}  f32 {:.3e}  points {:>2}  {verdict}", c.name, c.max_rel_f64, c.max_rel_f32, c.points);
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        say!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn export_features(a: ExportFeatures) -> Outcome {
    let ckpt = resolve_checkpoint(&a.checkpoint);
    let cfg = train::checkpoint_config(&ckpt)?;
    let (state, _) = TrainState::load(&ckpt)?;
    let source = data::read_dataset(&a.source)?;
    let target = data::read_dataset(&a.target)?;
    let (points, _) = eval::export_features(&state.params, &source, &target, &a.out)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    write_manifest(dir, "export-features", Some(&cfg), None, json!({ "checkpoint": ckpt, "points": points.len() }))?;
    say!("wrote {} points to {}", points.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ExportFeatures(a) => export_features(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONTRACT)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_USAGE,
                Error::NumericFault { .. } => EXIT_NUMERIC,
                _ => EXIT_CONTRACT,
            })
        }
    }
}
