//! Ablation grid: the six alignment configurations trained and evaluated
//! over several seeds.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{self, Generated, Scenario, ScenarioKind, Split};
use crate::error::Result;
use crate::eval::{self, EvalReport};
use crate::losses::Domain;
use crate::train::{self, LossKind, RunPaths, TrainConfig, TrainData, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridConfig {
    SourceOnly,
    CeGlobal,
    FlGlobal,
    FlCtx,
    FlCtxL,
    LOnly,
}

impl GridConfig {
    pub const ALL: [GridConfig; 6] = [
        GridConfig::SourceOnly,
        GridConfig::CeGlobal,
        GridConfig::FlGlobal,
        GridConfig::FlCtx,
        GridConfig::FlCtxL,
        GridConfig::LOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GridConfig::SourceOnly => "source-only",
            GridConfig::CeGlobal => "ce-global",
            GridConfig::FlGlobal => "fl-global",
            GridConfig::FlCtx => "fl-ctx",
            GridConfig::FlCtxL => "fl-ctx-l",
            GridConfig::LOnly => "l-only",
        }
    }

    /// `base` with the alignment switches of this configuration.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let (kind, global, local, ctx) = match self {
            GridConfig::SourceOnly => (base.loss_kind, false, false, false),
            GridConfig::CeGlobal => (LossKind::Ce, true, false, false),
            GridConfig::FlGlobal => (LossKind::Fl, true, false, false),
            GridConfig::FlCtx => (LossKind::Fl, true, false, true),
            GridConfig::FlCtxL => (LossKind::Fl, true, true, true),
            GridConfig::LOnly => (base.loss_kind, false, true, false),
        };
        c.loss_kind = kind;
        c.use_global = global;
        c.use_local = local;
        c.use_context = ctx;
        c
    }
}

impl std::str::FromStr for GridConfig {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        GridConfig::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| format!("unknown grid configuration {s:?}"))
    }
}

/// Outcome of one trained configuration.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub state: TrainState,
    pub cfg: TrainConfig,
    pub source: EvalReport,
    pub target: EvalReport,
    pub seconds: f64,
}

/// Generated data of `kind` at `seed`.
pub fn scenario_data(kind: ScenarioKind, seed: u64, train_n: usize, test_n: usize) -> Result<Generated> {
    data::generate(&Scenario { kind, seed, train_n, test_n })
}

/// Trains `cfg` on the train splits of `g` (target labels withheld) inside
/// `run_dir`, then evaluates on both test splits.
pub fn run_cell(cfg: &TrainConfig, g: &Generated, run_dir: &Path) -> Result<CellRun> {
    let d = TrainData {
        source: g.get(Domain::Source, Split::Train).clone(),
        target: g.get(Domain::Target, Split::Train).strip_labels(),
    };
    let t0 = Instant::now();
    let (state, _) = train::train(cfg, &d, &RunPaths::new(run_dir))?;
    let seconds = t0.elapsed().as_secs_f64();
    let net = cfg.net();
    let source = eval::evaluate(&state.params, &net, g.get(Domain::Source, Split::Test), false)?;
    let target = eval::evaluate(&state.params, &net, g.get(Domain::Target, Split::Test), false)?;
    Ok(CellRun { state, cfg: cfg.clone(), source, target, seconds })
}

/// One grid cell result; `error` is set when training or evaluation failed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub config: GridConfig,
    pub seed: u64,
    pub target_map: Option<f64>,
    pub source_map: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub config: GridConfig,
    pub runs: usize,
    pub failed: usize,
    pub target_mean: f64,
    pub target_std: f64,
    pub source_mean: f64,
    pub source_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Mean and population standard deviation per configuration over the
/// successful cells, in grid order.
pub fn summarize(cells: &[CellResult]) -> Vec<Row> {
    GridConfig::ALL
        .into_iter()
        .filter(|g| cells.iter().any(|c| c.config == *g))
        .map(|g| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.config == g).collect();
            let t: Vec<f64> = mine.iter().filter_map(|c| c.target_map).collect();
            let s: Vec<f64> = mine.iter().filter_map(|c| c.source_map).collect();
            let (target_mean, target_std) = mean_std(&t);
            let (source_mean, source_std) = mean_std(&s);
            Row {
                config: g,
                runs: mine.len(),
                failed: mine.iter().filter(|c| c.error.is_some()).count(),
                target_mean,
                target_std,
                source_mean,
                source_std,
            }
        })
        .collect()
}

pub fn rows_csv(rows: &[Row]) -> String {
    let mut s = String::from("config,runs,failed,target_map,target_map_std,source_map,source_map_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.config.name(),
            r.runs,
            r.failed,
            r.target_mean,
            r.target_std,
            r.source_mean,
            r.source_std
        );
    }
    s
}

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut s = String::from("config,seed,target_map,source_map,error\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for c in cells {
        let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(s, "{},{},{},{},{}", c.config.name(), c.seed, opt(c.target_map), opt(c.source_map), err);
    }
    s
}

/// Runs `configs` over `seeds`; data and training share the seed.
/// A failing cell is recorded and the grid continues. `on_cell` sees each
/// result as it completes.
pub fn run_grid(
    base: &TrainConfig,
    kind: ScenarioKind,
    configs: &[GridConfig],
    seeds: std::ops::Range<u64>,
    sizes: (usize, usize),
    out: &Path,
    mut on_cell: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    for seed in seeds {
        let g = scenario_data(kind, seed, sizes.0, sizes.1)?;
        for &config in configs {
            let mut cfg = config.apply(base);
            cfg.seed = seed;
            let dir = out.join(format!("{}-seed{}", config.name(), seed));
            let cell = match run_cell(&cfg, &g, &dir) {
                Ok(r) => CellResult {
                    config,
                    seed,
                    target_map: Some(r.target.map),
                    source_map: Some(r.source.map),
                    error: None,
                },
                Err(e) => CellResult { config, seed, target_map: None, source_map: None, error: Some(e.to_string()) },
            };
            on_cell(&cell);
            cells.push(cell);
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_names_roundtrip() {
        for g in GridConfig::ALL {
            assert_eq!(g.name().parse::<GridConfig>().unwrap(), g);
        }
        assert!("fl".parse::<GridConfig>().is_err());
    }

    #[test]
    fn switches() {
        let base = TrainConfig::default();
        let so = GridConfig::SourceOnly.apply(&base);
        assert!(!so.use_global && !so.use_local && !so.use_context);
        let ce = GridConfig::CeGlobal.apply(&base);
        assert_eq!(ce.loss_kind, LossKind::Ce);
        assert!(ce.use_global && !ce.use_local && !ce.use_context);
        let full = GridConfig::FlCtxL.apply(&base);
        assert!(full.use_global && full.use_local && full.use_context);
        let l = GridConfig::LOnly.apply(&base);
        assert!(!l.use_global && l.use_local && !l.use_context);
    }

    #[test]
    fn summary_skips_failed_cells() {
        let ok = |seed, t| CellResult { config: GridConfig::FlGlobal, seed, target_map: Some(t), source_map: Some(1.0), error: None };
        let cells = vec![
            ok(0, 0.2),
            ok(1, 0.4),
            CellResult { config: GridConfig::FlGlobal, seed: 2, target_map: None, source_map: None, error: Some("x".into()) },
        ];
        let rows = summarize(&cells);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].runs, rows[0].failed), (3, 1));
        assert!((rows[0].target_mean - 0.3).abs() < 1e-12);
        assert!((rows[0].target_std - 0.1).abs() < 1e-12);
        assert!(rows_csv(&rows).starts_with("config,runs,failed,target_map,"));
    }
}
