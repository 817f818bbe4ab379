//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Oracle and invariant criteria (1-5, 10, 11) decide the exit status.
//! Criteria 6-9 are desk-scale experiments; their lines report the measured
//! numbers and verdict but do not fail the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swda::data::{ScenarioKind, Split};
use swda::eval::{self, average_precision, average_precision_bruteforce, Scored};
use swda::experiment::{self, CellRun, GridConfig};
use swda::losses::{self, Domain, Modulator};
use swda::nn::ModelParams;
use swda::train::{self, TrainConfig};
use swda::verify::{self, SuiteOptions};
use swda::{backward, Tensor};

/// Learning rate of the experiment runs, chosen on held-out seeds 100-101
/// by source-only validation mAP and numerical stability of all six
/// configurations.
const EXPERIMENT_LR: &str = "0.002";
const SEEDS: [u64; 3] = [0, 1, 2];
const TRAIN_N: usize = 500;
const TEST_N: usize = 100;
const MARGIN: f64 = 0.03;

struct Verdicts {
    lines: Vec<(u32, bool, bool, String)>,
}

impl Verdicts {
    fn record(&mut self, id: u32, gating: bool, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let kind = if gating { "" } else { " (experiment)" };
        println!("criterion {id:>2}: {tag}{kind} - {detail}");
        self.lines.push((id, gating, pass, detail));
    }
}

fn criterion_1(v: &mut Verdicts) {
    let t0 = Instant::now();
    let opts = SuiteOptions::default();
    let mut checks = verify::primitive_suite(&opts).expect("primitive suite runs");
    checks.extend(verify::loss_suite(&opts).expect("loss suite runs"));
    checks.push(verify::full_objective_suite(&SuiteOptions { points: 2, ..opts }).expect("full suite runs"));
    let secs = t0.elapsed().as_secs_f64();
    let worst64 = checks.iter().map(|c| c.max_rel_f64).fold(0.0, f64::max);
    let worst32 = checks.iter().map(|c| c.max_rel_f32).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    v.record(
        1,
        true,
        failed.is_empty() && secs < 60.0,
        format!(
            "{} ops, worst rel err f64 {worst64:.2e} (< 1e-6), f32 {worst32:.2e} (< 1e-3), {secs:.1}s; failed: {failed:?}",
            checks.len()
        ),
    );
}

#[allow(clippy::approx_constant)]
fn criterion_2(v: &mut Verdicts) {
    let fl = losses::modulated_loss(0.5, Modulator::Focal { gamma: 5.0 });
    let efl = losses::modulated_loss(0.5, Modulator::ExpFocal { eta: 5.0 });
    let ce = losses::modulated_loss(0.5, Modulator::CrossEntropy);
    let half = Tensor::<f64>::full(&[2, 1, 8, 8], 0.5).unwrap();
    let local = losses::local_loss(&half, &half).unwrap().item();
    let pass = (fl - 0.021661).abs() <= 1e-6
        && (efl - 0.056897).abs() <= 1e-6
        && (ce - 0.693147).abs() <= 1e-6
        && (local - 0.25).abs() <= 1e-6;
    v.record(2, true, pass, format!("FL {fl:.7} EFL {efl:.7} CE {ce:.7} local {local:.7}"));
}

fn criterion_3(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let worst = (0..1000)
        .map(|_| {
            let p: f64 = rng.random_range(1e-6..1.0);
            (losses::modulated_loss(p, Modulator::Focal { gamma: 0.0 }) - losses::modulated_loss(p, Modulator::CrossEntropy)).abs()
        })
        .fold(0.0, f64::max);
    let kinds = [
        Modulator::Focal { gamma: 0.0 },
        Modulator::Focal { gamma: 3.0 },
        Modulator::Focal { gamma: 5.0 },
        Modulator::ExpFocal { eta: 5.0 },
        Modulator::CrossEntropy,
    ];
    let monotone = kinds.iter().all(|m| {
        let f: Vec<f64> = (0..=10_000).map(|i| m.factor(i as f64 / 10_000.0)).collect();
        f.windows(2).all(|w| w[1] <= w[0])
    });
    v.record(3, true, worst <= 1e-7 && monotone, format!("max |FL0 - CE| {worst:.1e}; modulators monotone: {monotone}"));
}

fn criterion_4(v: &mut Verdicts) {
    let grad = |m: Modulator| {
        let x = Tensor::<f64>::param(&[1], vec![0.99]).unwrap();
        backward(&losses::modulated_loss_tensor(&x, m).unwrap().sum().unwrap()).unwrap();
        x.grad().unwrap()[0]
    };
    let fl = grad(Modulator::Focal { gamma: 5.0 });
    let ce = grad(Modulator::CrossEntropy);
    v.record(4, true, fl.abs() < 1e-6 * ce.abs(), format!("|dFL/dp| {:.3e} vs 1e-6 * |dCE/dp| {:.3e}", fl.abs(), 1e-6 * ce.abs()));
}

fn criterion_5(v: &mut Verdicts) {
    let cfg = TrainConfig::default();
    let g = experiment::scenario_data(ScenarioKind::LocalShift, 5, 8, 1).unwrap();
    let mut held = 0;
    let mut worst = String::new();
    for seed in 0..5u64 {
        let p = ModelParams::<f32>::init(&cfg.net(), seed).unwrap();
        let s = &g.source_train.samples[seed as usize];
        let t = g.target_train.samples[seed as usize + 1].unlabeled();
        let r = train::saddle_check(&p, &cfg, s, &t, 1e-3).unwrap();
        if r.holds() {
            held += 1;
        } else {
            worst = format!(" (seed {seed}: {r:?})");
        }
    }
    v.record(5, true, held == 5, format!("{held}/5 seeds: D-only step lowers l_adv, F-only step raises it{worst}"));
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn base_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.set("lr", EXPERIMENT_LR).unwrap();
    c
}

/// Trains every (config, seed) pair of one scenario.
fn run_scenario(kind: ScenarioKind, configs: &[GridConfig], root: &Path) -> BTreeMap<(&'static str, u64), CellRun> {
    let mut out = BTreeMap::new();
    for seed in SEEDS {
        let g = experiment::scenario_data(kind, seed, TRAIN_N, TEST_N).unwrap();
        for &c in configs {
            let mut cfg = c.apply(&base_config());
            cfg.seed = seed;
            let dir = root.join(format!("{}-{}-seed{seed}", kind.as_str(), c.name()));
            let run = experiment::run_cell(&cfg, &g, &dir)
                .unwrap_or_else(|e| panic!("{} {} seed {seed} failed: {e}", kind.as_str(), c.name()));
            println!(
                "    {:<13} {:<12} seed {seed}: target mAP {:.4} source mAP {:.4} ({:.0}s)",
                kind.as_str(),
                c.name(),
                run.target.map,
                run.source.map,
                run.seconds
            );
            out.insert((c.name(), seed), run);
        }
    }
    out
}

fn avg(runs: &BTreeMap<(&'static str, u64), CellRun>, c: GridConfig, f: fn(&CellRun) -> f64) -> f64 {
    mean(&SEEDS.iter().map(|s| f(&runs[&(c.name(), *s)])).collect::<Vec<_>>())
}

fn tmap(r: &CellRun) -> f64 {
    r.target.map
}

fn smap(r: &CellRun) -> f64 {
    r.source.map
}

fn criteria_6_to_9(v: &mut Verdicts, root: &Path) -> PathBuf {
    use GridConfig::*;
    let global = run_scenario(ScenarioKind::GlobalShift, &[SourceOnly, CeGlobal, FlGlobal, FlCtxL], root);
    let slowest = global.values().map(|r| r.seconds).fold(0.0, f64::max);
    let (so, ce, fl, full) = (
        avg(&global, SourceOnly, tmap),
        avg(&global, CeGlobal, tmap),
        avg(&global, FlGlobal, tmap),
        avg(&global, FlCtxL, tmap),
    );
    v.record(
        6,
        false,
        fl >= ce + MARGIN && full >= so + MARGIN && slowest < 600.0,
        format!(
            "global-shift target mAP over 3 seeds: FL-global {fl:.4} vs CE-global {ce:.4} (+{MARGIN} needed); \
             FL+CTX+L {full:.4} vs source-only {so:.4} (+{MARGIN} needed); slowest run {slowest:.0}s"
        ),
    );

    let local = run_scenario(ScenarioKind::LocalShift, &[SourceOnly, LOnly, FlCtxL], root);
    let (lso, lo) = (avg(&local, SourceOnly, tmap), avg(&local, LOnly, tmap));
    v.record(
        7,
        false,
        lo >= lso + MARGIN,
        format!("local-shift target mAP over 3 seeds: L-only {lo:.4} vs source-only {lso:.4} (+{MARGIN} needed)"),
    );

    let (sfull, sso) = (avg(&global, FlCtxL, smap), avg(&global, SourceOnly, smap));
    v.record(
        8,
        false,
        sfull >= sso - 0.02,
        format!("global-shift source mAP over 3 seeds: FL+CTX+L {sfull:.4} vs source-only {sso:.4} (-0.02 allowed)"),
    );

    let run = &local[&(FlCtxL.name(), 0)];
    let g = experiment::scenario_data(ScenarioKind::LocalShift, 0, TRAIN_N, TEST_N).unwrap();
    let test = g.get(Domain::Target, Split::Test);
    let zeroed = eval::evaluate(&run.state.params, &run.cfg.net(), test, true).unwrap().map;
    let normal = run.target.map;
    v.record(
        9,
        false,
        (zeroed - normal).abs() <= 0.10,
        format!("local-shift FL+CTX+L seed 0 target mAP: zeroed context {zeroed:.4} vs normal {normal:.4} (within 0.10)"),
    );
    root.join(format!("{}-{}-seed0", ScenarioKind::GlobalShift.as_str(), FlCtxL.name()))
}

fn criterion_10(v: &mut Verdicts) {
    let g = [0.5, 0.5, 0.2, 0.2];
    let g2 = [0.2, 0.2, 0.2, 0.2];
    let far = [0.1, 0.1, 0.05, 0.05];
    let s = |confidence, bbox| Scored { image: 0, confidence, bbox };
    let worked = [
        average_precision(&[s(0.9, g)], &[(0, g)], 0.5) == 1.0,
        average_precision(&[s(0.9, far)], &[(0, g)], 0.5) == 0.0,
        average_precision(&[s(0.9, g), s(0.5, far)], &[(0, g)], 0.5) == 1.0,
        average_precision(&[s(0.9, far), s(0.5, g)], &[(0, g), (0, g2)], 0.5) == 0.25,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let images = rng.random_range(1..4usize);
        let rand_box = |rng: &mut ChaCha8Rng| {
            [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)]
        };
        let gt: Vec<(usize, [f64; 4])> = (0..rng.random_range(0..6usize))
            .map(|_| (rng.random_range(0..images), rand_box(&mut rng)))
            .collect();
        let dets: Vec<Scored> = (0..rng.random_range(0..=10usize))
            .map(|_| {
                let image = rng.random_range(0..images);
                // half the detections jitter a ground-truth box so matches occur
                let bbox = match gt.iter().find(|g| g.0 == image) {
                    Some(&(_, b)) if rng.random_bool(0.5) => {
                        [b[0] + rng.random_range(-0.05..0.05), b[1] + rng.random_range(-0.05..0.05), b[2], b[3]]
                    }
                    _ => rand_box(&mut rng),
                };
                Scored { image, confidence: rng.random_range(0.0..1.0), bbox }
            })
            .collect();
        let a = average_precision(&dets, &gt, 0.5);
        let b = average_precision_bruteforce(&dets, &gt, 0.5);
        worst = worst.max((a - b).abs());
    }
    let all_worked = worked.iter().all(|&w| w);
    v.record(10, true, all_worked && worst <= 1e-9, format!("200 random instances, max |AP - brute force| {worst:.1e}; worked examples exact: {worked:?}"));
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_11(v: &mut Verdicts, first: &Path, root: &Path) {
    let mut cfg = GridConfig::FlCtxL.apply(&base_config());
    cfg.seed = 0;
    let g = experiment::scenario_data(ScenarioKind::GlobalShift, 0, TRAIN_N, TEST_N).unwrap();
    let second = root.join("repeat");
    experiment::run_cell(&cfg, &g, &second).unwrap();
    let a = files_under(&first.join("checkpoints"));
    let b = files_under(&second.join("checkpoints"));
    let same_ckpt = !a.is_empty() && a == b;
    let same_log = fs::read(first.join("metrics.log")).unwrap() == fs::read(second.join("metrics.log")).unwrap();
    v.record(
        11,
        true,
        same_ckpt && same_log,
        format!("two 2000-iteration FL+CTX+L runs: {} checkpoint files identical: {same_ckpt}; metrics.log identical: {same_log}", a.len()),
    );
}

fn main() {
    let started = Instant::now();
    let mut v = Verdicts { lines: Vec::new() };
    let root = tempfile::tempdir().unwrap();
    criterion_1(&mut v);
    criterion_2(&mut v);
    criterion_3(&mut v);
    criterion_4(&mut v);
    criterion_5(&mut v);
    criterion_10(&mut v);
    let first = criteria_6_to_9(&mut v, root.path());
    criterion_11(&mut v, &first, root.path());

    v.lines.sort_by_key(|l| l.0);
    println!("\nsummary ({:.0}s):", started.elapsed().as_secs_f64());
    for (id, gating, pass, _) in &v.lines {
        println!("  {id:>2} {} {}", if *pass { "PASS" } else { "FAIL" }, if *gating { "" } else { "(experiment)" });
    }
    let gate_failures: Vec<u32> = v.lines.iter().filter(|l| l.1 && !l.2).map(|l| l.0).collect();
    if !gate_failures.is_empty() {
        eprintln!("gating criteria failed: {gate_failures:?}");
        std::process::exit(1);
    }
}
