//! End-to-end acceptance checks. Prints one line per criterion and exits
//! nonzero if any fails.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use acll::boopt::{lagrangian_objective, seed_from_cache, EvalCache, Evaluation, GRID_STEPS};
use acll::config::{build_tasks, default_finetune, SequencePreset, PRESET_POINTS_PER_SPLIT};
use acll::dual::{acll_select, dual_value, DualSearchConfig, Selection};
use acll::lifelong::{run_sequence, LifelongConfig, SequenceRun, Strategy};
use acll::net::TrainConfig;
use acll::surrogate::{fit_gp, GpHyper};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;
const EPSILON: f64 = 0.02;
const TIME_LIMIT: Duration = Duration::from_secs(600);

struct PresetRun {
    preset: SequencePreset,
    acll: SequenceRun,
    acll_time: Duration,
    fixed: SequenceRun,
}

fn run_presets() -> Vec<PresetRun> {
    std::thread::scope(|s| {
        let handles: Vec<_> = SequencePreset::ALL
            .into_iter()
            .map(|preset| {
                s.spawn(move || {
                    let tasks = build_tasks(
                        &preset.tasks(PRESET_POINTS_PER_SPLIT),
                        &TrainConfig::default(),
                        &default_finetune(),
                        SEED,
                    )
                    .unwrap();
                    let cfg = LifelongConfig::default();
                    let fixed = s.spawn({
                        let (tasks, cfg) = (tasks.clone(), cfg.clone());
                        move || run_sequence(&tasks, Strategy::Fixed { rate: 0.5 }, &cfg, SEED).unwrap()
                    });
                    let start = Instant::now();
                    let acll = run_sequence(&tasks, Strategy::Acll { epsilon: EPSILON }, &cfg, SEED).unwrap();
                    let acll_time = start.elapsed();
                    PresetRun { preset, acll, acll_time, fixed: fixed.join().unwrap() }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn select(f: impl Fn(f64) -> Evaluation, reference: f64, cfg: &DualSearchConfig) -> (Selection, EvalCache) {
    let mut cache = EvalCache::new();
    let mut evaluate = |t: &[f64]| Ok(f(t[0]));
    let sel = acll_select(&mut evaluate, reference, cfg, &mut cache, 1).unwrap();
    (sel, cache)
}

fn c1_constraint(runs: &[PresetRun]) -> Result<String, String> {
    for r in runs {
        for t in &r.acll.report.tasks {
            if t.infeasible || t.val_risk > t.reference_risk + EPSILON || t.selection_risk != Some(t.val_risk) {
                return Err(format!(
                    "{}/{}: val {} ref {} selection {:?}",
                    r.preset.name(),
                    t.name,
                    t.val_risk,
                    t.reference_risk,
                    t.selection_risk
                ));
            }
        }
        if r.acll_time >= TIME_LIMIT {
            return Err(format!("{} took {:?}", r.preset.name(), r.acll_time));
        }
    }
    let times: Vec<String> = runs.iter().map(|r| format!("{} {:.0}s", r.preset.name(), r.acll_time.as_secs_f64())).collect();
    Ok(times.join(", "))
}

fn c2_no_forgetting(runs: &[PresetRun]) -> Result<String, String> {
    let mut checked = 0;
    for r in runs {
        for run in [&r.acll, &r.fixed] {
            for (j, (post, end)) in run.predictions_post_task.iter().zip(&run.predictions_end).enumerate() {
                if post != end {
                    return Err(format!("{} {} task {}", r.preset.name(), run.report.label, j + 1));
                }
                checked += post.len();
            }
        }
    }
    Ok(format!("{checked} test predictions identical"))
}

fn c3_ordering(runs: &[PresetRun]) -> Result<String, String> {
    let r = runs.iter().find(|r| r.preset == SequencePreset::SimpleToHard).unwrap();
    let theta = r.acll.report.tasks[0].theta[0];
    let acll_hard = r.acll.report.tasks[1].test_acc_end;
    let fixed_hard = r.fixed.report.tasks[1].test_acc_end;
    let msg = format!("theta_simple {theta}, hard acc acll {acll_hard} vs fixed {fixed_hard}");
    if theta > 0.5 && acll_hard >= fixed_hard {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c4_capacity(runs: &[PresetRun]) -> Result<String, String> {
    let report = &runs[0].fixed.report;
    let shared = report.shared_weights as f64;
    let free = shared - report.owned_weights_after_task[1] as f64;
    let msg = format!("{free} of {shared} free after two tasks");
    if (free - 0.25 * shared).abs() <= 1.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn max_posterior_gap(points: &[Vec<f64>], a: &[f64], b: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let ga = fit_gp(points, a, GpHyper::for_targets(a)).unwrap();
    let gb = fit_gp(points, b, GpHyper::for_targets(b)).unwrap();
    let dim = points[0].len();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let (ma, va) = ga.posterior(&x);
        let (mb, vb) = gb.posterior(&x);
        worst = worst.max((ma - mb).abs()).max((va - vb).abs());
    }
    worst
}

fn c5_caching(runs: &[PresetRun]) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    // Real caches, reweighted against a fresh objective computation.
    for audit in runs.iter().flat_map(|r| &r.acll.audits) {
        for lambda in [0.0, 0.37, 3.0, 64.0] {
            let (points, reweighted) = seed_from_cache(&audit.cache, lambda).unwrap();
            let fresh: Vec<f64> = audit
                .cache
                .entries()
                .iter()
                .map(|e| lagrangian_objective(e.size, e.risk, lambda).unwrap())
                .collect();
            worst = worst.max(max_posterior_gap(&points, &reweighted, &fresh, &mut rng));
        }
    }
    // A cache built at other multipliers, against fresh evaluate calls.
    let f = |t: f64| Evaluation { size: 1.0 - t, risk: 0.05 + 0.2 * t * t };
    let (_, cache) = select(f, 0.05, &DualSearchConfig::default());
    let lambda = 1.7;
    let (points, reweighted) = seed_from_cache(&cache, lambda).unwrap();
    let fresh: Vec<f64> = points.iter().map(|p| f(p[0]).size + lambda * f(p[0]).risk).collect();
    worst = worst.max(max_posterior_gap(&points, &reweighted, &fresh, &mut rng));
    let msg = format!("max posterior difference {worst:e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c6_concavity(runs: &[PresetRun]) -> Result<String, String> {
    let grid: Vec<f64> = (0..50).map(|i| 64.0 * i as f64 / 49.0).collect();
    let mut triples = 0;
    for audit in runs.iter().flat_map(|r| &r.acll.audits) {
        let g: Vec<f64> = grid.iter().map(|&l| dual_value(&audit.cache, l).unwrap()).collect();
        for mid in 1..g.len() - 1 {
            for d in 1..=mid.min(g.len() - 1 - mid) {
                triples += 1;
                if g[mid] < 0.5 * (g[mid - d] + g[mid + d]) - 1e-12 {
                    return Err(format!("violated at lambda {} (spread {d})", grid[mid]));
                }
            }
        }
    }
    Ok(format!("{triples} triples"))
}

fn c7_convergence(runs: &[PresetRun]) -> Result<String, String> {
    let mut problems = Vec::new();
    for r in runs {
        for t in &r.acll.report.tasks {
            let rounds = t.dual_rounds.unwrap_or(0);
            if t.dual_converged != Some(true) || rounds > 12 {
                problems.push(format!(
                    "{}/{} rounds {} converged {:?} lambda {:?}",
                    r.preset.name(),
                    t.name,
                    rounds,
                    t.dual_converged,
                    t.lambda_final
                ));
            }
        }
    }
    if problems.is_empty() {
        Ok("all brackets converged".into())
    } else {
        Err(problems.join("; "))
    }
}

fn c8_overhead(runs: &[PresetRun]) -> Result<String, String> {
    let cap = DualSearchConfig::default().evaluation_cap();
    let most = runs.iter().flat_map(|r| &r.acll.report.tasks).map(|t| t.risk_evaluations).max().unwrap();
    let msg = format!("max {most} evaluations per selection, bound {cap}");
    if most <= cap && cap == 120 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_staircase() -> Result<String, String> {
    let stairs = |t: f64| Evaluation { size: 1.0 - t, risk: if t <= 0.8 { 0.10 } else { 0.40 } };
    let (reference, cfg) = (0.10, DualSearchConfig::default());
    let oracle = (0..=1000)
        .map(|i| i as f64 / 1000.0)
        .filter(|&t| stairs(t).risk <= reference + cfg.epsilon)
        .min_by(|a, b| stairs(*a).size.total_cmp(&stairs(*b).size))
        .unwrap();
    let (sel, _) = select(stairs, reference, &cfg);
    let step = 1.0 / GRID_STEPS as f64;
    let msg = format!("theta* {} vs scan {oracle}", sel.theta[0]);
    if (sel.theta[0] - oracle).abs() <= step + 1e-12 && !sel.infeasible {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c10_gradient() -> Result<String, String> {
    let worst = (0..20)
        .map(|seed| {
            let (net, inputs, labels, task) = common::random_instance(seed);
            common::max_relative_error(&net, task, &inputs, &labels)
        })
        .fold(0.0, f64::max);
    let msg = format!("max relative error {worst:e}");
    if worst < 1e-4 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c11_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.json");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_acll"))
            .arg("run")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        outputs.push(out);
    }
    let mut files = vec![Path::new("summary.csv").to_path_buf()];
    for entry in fs::read_dir(&outputs[0]).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        if path.is_dir() {
            files.push(Path::new(path.file_name().unwrap()).join("report.json"));
        }
    }
    for f in &files {
        let a = fs::read(outputs[0].join(f)).map_err(|e| e.to_string())?;
        let b = fs::read(outputs[1].join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{} differs", f.display()));
        }
    }
    Ok(format!("{} files identical", files.len()))
}

fn c12_degenerate() -> Result<String, String> {
    let wide = DualSearchConfig { epsilon: 0.5, ..DualSearchConfig::default() };
    let (sel, _) = select(|t| Evaluation { size: 1.0 - t, risk: 0.1 + 0.3 * t }, 0.1, &wide);
    if sel.theta != [1.0] || sel.infeasible {
        return Err(format!("wide tolerance chose {:?}", sel.theta));
    }
    let strict = DualSearchConfig { epsilon: 0.0, ..DualSearchConfig::default() };
    let (sel, _) = select(|t| Evaluation { size: 1.0 - t, risk: 0.3 + 0.1 * t }, 0.1, &strict);
    if !sel.infeasible || sel.theta != [0.0] {
        return Err(format!("infeasible search returned {:?} flag {}", sel.theta, sel.infeasible));
    }
    Ok("theta*=1 under wide tolerance; flagged theta=0 when nothing is feasible".into())
}

fn main() -> ExitCode {
    let mut out = std::io::stdout();
    let runs = run_presets();
    let results: Vec<(&str, Result<String, String>)> = vec![
        ("constraint satisfaction and runtime", c1_constraint(&runs)),
        ("no forgetting", c2_no_forgetting(&runs)),
        ("adaptive vs fixed ordering", c3_ordering(&runs)),
        ("capacity arithmetic", c4_capacity(&runs)),
        ("caching equivalence", c5_caching(&runs)),
        ("dual concavity", c6_concavity(&runs)),
        ("multiplier search convergence", c7_convergence(&runs)),
        ("evaluation overhead", c8_overhead(&runs)),
        ("staircase oracle", c9_staircase()),
        ("gradient check", c10_gradient()),
        ("cli determinism", c11_determinism()),
        ("degenerate inputs", c12_degenerate()),
    ];
    let mut failed = 0;
    for (i, (name, result)) in results.iter().enumerate() {
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        writeln!(out, "criterion {:>2} {tag}: {name}: {detail}", i + 1).unwrap();
    }
    writeln!(out, "acceptance: {} passed, {failed} failed", results.len() - failed).unwrap();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
