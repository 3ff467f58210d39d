//! Experiment configuration and the strategy × sequence runner.
//!
//! A config is a JSON object:
//!
//! ```json
//! {
//!   "seed": 7,
//!   "out_dir": "runs/demo",
//!   "sequence": "simple_to_hard",
//!   "strategies": [{"name": "acll"}, {"name": "fixed", "rate": 0.5}],
//!   "network": {"hidden": [64, 64], "granularity": "global"},
//!   "train": {"epochs": 60},
//!   "finetune": {"epochs": 20},
//!   "dual": {"epsilon": 0.02},
//!   "bo": {"n_init": 5, "n_iter": 10}
//! }
//! ```
//!
//! Every section except `sequence` and `strategies` is optional; missing
//! fields take their defaults. `sequence` is a preset name or a list of task
//! objects `{"name", "kind", "class_count", "n_per_split", "noise_std"}`.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::boopt::BoBudget;
use crate::compressor::Granularity;
use crate::datagen::{generate_dataset, validate_params, DatasetKind, DatasetParams};
use crate::dual::DualSearchConfig;
use crate::error::{AcllError, Result};
use crate::lifelong::{derive_seed, run_sequence, LifelongConfig, SequenceRun, Strategy, TaskSpec};
use crate::net::TrainConfig;

/// Default points per split for preset tasks.
pub const PRESET_POINTS_PER_SPLIT: usize = 2000;

const PHASE_DATA: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequencePreset {
    /// blobs-2 → spirals-5 → rings-3
    SimpleToHard,
    /// spirals-5 → blobs-2 → rings-3
    HardToSimple,
}

impl SequencePreset {
    pub const ALL: [SequencePreset; 2] = [SequencePreset::SimpleToHard, SequencePreset::HardToSimple];

    pub fn name(self) -> &'static str {
        match self {
            SequencePreset::SimpleToHard => "simple_to_hard",
            SequencePreset::HardToSimple => "hard_to_simple",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn tasks(self, n_per_split: usize) -> Vec<TaskDef> {
        let blobs = TaskDef::new("blobs2", DatasetKind::Blobs, 2, n_per_split, 0.4);
        let spirals = TaskDef::new("spirals5", DatasetKind::Spirals, 5, n_per_split, 0.05);
        let rings = TaskDef::new("rings3", DatasetKind::Rings, 3, n_per_split, 0.1);
        match self {
            SequencePreset::SimpleToHard => vec![blobs, spirals, rings],
            SequencePreset::HardToSimple => vec![spirals, blobs, rings],
        }
    }
}

/// Dataset recipe of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDef {
    pub name: String,
    pub kind: DatasetKind,
    pub class_count: usize,
    pub n_per_split: usize,
    pub noise_std: f64,
}

impl TaskDef {
    pub fn new(name: &str, kind: DatasetKind, class_count: usize, n_per_split: usize, noise_std: f64) -> Self {
        TaskDef { name: name.into(), kind, class_count, n_per_split, noise_std }
    }

    pub fn params(&self) -> DatasetParams {
        DatasetParams { class_count: self.class_count, n_per_split: self.n_per_split, noise_std: self.noise_std }
    }
}

/// Materializes task recipes; the data seed of task `k` derives from `seed`.
pub fn build_tasks(defs: &[TaskDef], train: &TrainConfig, finetune: &TrainConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    defs.iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(TaskSpec {
                name: d.name.clone(),
                dataset: generate_dataset(d.kind, &d.params(), derive_seed(seed, i + 1, PHASE_DATA))?,
                train_cfg: *train,
                finetune_cfg: *finetune,
            })
        })
        .collect()
}

pub fn default_finetune() -> TrainConfig {
    TrainConfig { epochs: 20, ..TrainConfig::default() }
}

/// A fully resolved, validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub sequence_name: String,
    pub tasks: Vec<TaskDef>,
    pub strategies: Vec<Strategy>,
    pub lifelong: LifelongConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
}

impl ExperimentConfig {
    pub fn build_tasks(&self) -> Result<Vec<TaskSpec>> {
        build_tasks(&self.tasks, &self.train, &self.finetune, self.seed)
    }
}

/// One constraint violation, located by a path such as `dual.epsilon`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Why a config was not accepted.
#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    /// Not JSON at all; carries the parser's line and column.
    Syntax { line: usize, column: usize, message: String },
    Invalid(Vec<Diagnostic>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Syntax { line, column, message } => {
                write!(f, "config line {line}, column {column}: {message}")
            }
            ConfigError::Invalid(diags) => {
                write!(f, "{} config error(s):", diags.len())?;
                for d in diags {
                    write!(f, "\n  {d}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

struct Checker {
    diags: Vec<Diagnostic>,
}

impl Checker {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.diags.push(Diagnostic { path: path.into(), message: message.into() });
    }

    /// Overlays `section` onto the serialized default and deserializes.
    fn merged<T: Serialize + DeserializeOwned>(&mut self, path: &str, default: T, section: Option<&Value>) -> Option<T> {
        let Some(section) = section else { return Some(default) };
        let Value::Object(overrides) = section else {
            self.push(path, "expected an object");
            return None;
        };
        let mut base = match serde_json::to_value(&default) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config sections serialize to objects"),
        };
        for (k, v) in overrides {
            if !base.contains_key(k) {
                self.push(format!("{path}.{k}"), "unknown field");
                continue;
            }
            base.insert(k.clone(), v.clone());
        }
        for (k, v) in &base {
            let mut probe = serde_json::to_value(&default).expect("default serializes");
            probe[k] = v.clone();
            if let Err(e) = serde_json::from_value::<T>(probe) {
                self.push(format!("{path}.{k}"), e.to_string());
            }
        }
        serde_json::from_value(Value::Object(base)).ok()
    }

    fn train(&mut self, path: &str, cfg: &TrainConfig) {
        if cfg.epochs == 0 {
            self.push(format!("{path}.epochs"), "must be at least 1");
        }
        if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
            self.push(format!("{path}.learning_rate"), "must be positive");
        }
        if cfg.batch_size == 0 {
            self.push(format!("{path}.batch_size"), "must be at least 1");
        }
    }
}

const TOP_LEVEL: [&str; 10] =
    ["seed", "out_dir", "sequence", "strategies", "network", "train", "finetune", "dual", "bo", "n_per_split"];

/// Every constraint violation in a parsed config document.
pub fn validate_value(doc: &Value) -> Vec<Diagnostic> {
    resolve(doc).err().unwrap_or_default()
}

/// Reads and validates a config file. An empty list means `run` accepts it.
pub fn validate_config(path: &Path) -> std::result::Result<Vec<Diagnostic>, ConfigError> {
    match load_config(path) {
        Ok(_) => Ok(Vec::new()),
        Err(ConfigError::Invalid(d)) => Ok(d),
        Err(ConfigError::Syntax { line, column, message }) => {
            Ok(vec![Diagnostic { path: format!("line {line}, column {column}"), message }])
        }
        Err(e) => Err(e),
    }
}

pub fn parse_config(text: &str) -> std::result::Result<ExperimentConfig, ConfigError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    resolve(&doc).map_err(ConfigError::Invalid)
}

pub fn load_config(path: &Path) -> std::result::Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(ConfigError::Io)?;
    parse_config(&text)
}

fn resolve(doc: &Value) -> std::result::Result<ExperimentConfig, Vec<Diagnostic>> {
    let mut c = Checker { diags: Vec::new() };
    let Value::Object(root) = doc else {
        return Err(vec![Diagnostic { path: "$".into(), message: "expected a JSON object".into() }]);
    };
    for key in root.keys() {
        if !TOP_LEVEL.contains(&key.as_str()) {
            c.push(key.clone(), "unknown field");
        }
    }

    let seed = match root.get("seed") {
        None => 0,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            c.push("seed", "must be a non-negative integer");
            0
        }),
    };
    let out_dir = match root.get("out_dir") {
        None => PathBuf::from("acll-out"),
        Some(Value::String(s)) if !s.is_empty() => PathBuf::from(s),
        Some(_) => {
            c.push("out_dir", "must be a non-empty string");
            PathBuf::new()
        }
    };
    let n_per_split = match root.get("n_per_split") {
        None => PRESET_POINTS_PER_SPLIT,
        Some(v) => match v.as_u64() {
            Some(n) if n >= 2 => n as usize,
            _ => {
                c.push("n_per_split", "must be an integer of at least 2");
                PRESET_POINTS_PER_SPLIT
            }
        },
    };

    let (sequence_name, tasks) = resolve_sequence(&mut c, root.get("sequence"), n_per_split);

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct NetworkSection {
        hidden: Vec<usize>,
        granularity: Granularity,
    }
    let network = c.merged(
        "network",
        NetworkSection { hidden: vec![64, 64], granularity: Granularity::Global },
        root.get("network"),
    );
    if let Some(n) = &network {
        if n.hidden.contains(&0) {
            c.push("network.hidden", "layer widths must be positive");
        }
    }

    let train = c.merged("train", TrainConfig::default(), root.get("train"));
    if let Some(t) = &train {
        c.train("train", t);
    }
    let finetune = c.merged("finetune", default_finetune(), root.get("finetune"));
    if let Some(t) = &finetune {
        c.train("finetune", t);
    }

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct DualSection {
        epsilon: f64,
        lambda_lo: f64,
        lambda_hi: f64,
        lambda_tol: f64,
        max_rounds: usize,
        max_evaluations: Option<usize>,
        inner_finetune_epochs: Option<usize>,
    }
    let d = DualSearchConfig::default();
    let dual = c.merged(
        "dual",
        DualSection {
            epsilon: d.epsilon,
            lambda_lo: d.lambda_lo,
            lambda_hi: d.lambda_hi,
            lambda_tol: d.lambda_tol,
            max_rounds: d.max_rounds,
            max_evaluations: None,
            inner_finetune_epochs: None,
        },
        root.get("dual"),
    );
    if let Some(d) = &dual {
        if !(d.epsilon.is_finite() && d.epsilon >= 0.0) {
            c.push("dual.epsilon", format!("must be non-negative, got {}", d.epsilon));
        }
        if !(d.lambda_lo.is_finite() && d.lambda_lo >= 0.0) {
            c.push("dual.lambda_lo", "must be non-negative");
        }
        if !(d.lambda_hi.is_finite() && d.lambda_hi > d.lambda_lo) {
            c.push("dual.lambda_hi", "must exceed lambda_lo");
        }
        if !(d.lambda_tol.is_finite() && d.lambda_tol > 0.0) {
            c.push("dual.lambda_tol", "must be positive");
        }
        if d.max_rounds < 2 {
            c.push("dual.max_rounds", "must be at least 2");
        }
        if d.inner_finetune_epochs == Some(0) {
            c.push("dual.inner_finetune_epochs", "must be at least 1");
        }
    }

    let bo = c.merged("bo", BoBudget::default(), root.get("bo"));
    if let Some(b) = &bo {
        if b.n_init < 2 {
            c.push("bo.n_init", "must be at least 2");
        }
        if b.n_iter < 1 {
            c.push("bo.n_iter", "must be at least 1");
        }
        if !(b.ei_tolerance.is_finite() && b.ei_tolerance >= 0.0) {
            c.push("bo.ei_tolerance", "must be non-negative");
        }
    }

    if let (Some(d), Some(b)) = (&dual, &bo) {
        if d.max_evaluations.is_some_and(|m| m < b.n_init + 1) {
            c.push("dual.max_evaluations", "must exceed bo.n_init");
        }
    }

    let default_eps = dual.as_ref().map_or(d.epsilon, |d| d.epsilon);
    let strategies = resolve_strategies(&mut c, root.get("strategies"), default_eps);

    if !c.diags.is_empty() {
        return Err(c.diags);
    }
    let (network, train, finetune, dual, bo) = (
        network.expect("checked"),
        train.expect("checked"),
        finetune.expect("checked"),
        dual.expect("checked"),
        bo.expect("checked"),
    );
    Ok(ExperimentConfig {
        seed,
        out_dir,
        sequence_name,
        tasks,
        strategies,
        lifelong: LifelongConfig {
            hidden: network.hidden,
            granularity: network.granularity,
            dual: DualSearchConfig {
                epsilon: dual.epsilon,
                lambda_lo: dual.lambda_lo,
                lambda_hi: dual.lambda_hi,
                lambda_tol: dual.lambda_tol,
                max_rounds: dual.max_rounds,
                bo_budget: bo,
                max_evaluations: dual.max_evaluations,
            },
            inner_finetune_epochs: dual.inner_finetune_epochs,
        },
        train,
        finetune,
    })
}

fn resolve_sequence(c: &mut Checker, seq: Option<&Value>, n_per_split: usize) -> (String, Vec<TaskDef>) {
    match seq {
        None => {
            c.push("sequence", "missing; give a preset name or a list of tasks");
            (String::new(), Vec::new())
        }
        Some(Value::String(name)) => match SequencePreset::from_name(name) {
            Some(p) => (p.name().to_string(), p.tasks(n_per_split)),
            None => {
                let known: Vec<_> = SequencePreset::ALL.iter().map(|p| p.name()).collect();
                c.push("sequence", format!("unknown preset {name:?}; known: {}", known.join(", ")));
                (String::new(), Vec::new())
            }
        },
        Some(Value::Array(items)) if !items.is_empty() => {
            let mut tasks = Vec::new();
            for (i, item) in items.iter().enumerate() {
                let path = format!("sequence[{i}]");
                match serde_json::from_value::<TaskDef>(item.clone()) {
                    Ok(t) => {
                        if let Err(e) = validate_params(&t.params()) {
                            c.push(path, e.to_string());
                        } else if tasks.iter().any(|o: &TaskDef| o.name == t.name) {
                            c.push(format!("{path}.name"), format!("duplicate task name {:?}", t.name));
                        } else {
                            tasks.push(t);
                        }
                    }
                    Err(e) => c.push(path, e.to_string()),
                }
            }
            ("custom".to_string(), tasks)
        }
        Some(_) => {
            c.push("sequence", "expected a preset name or a non-empty list of tasks");
            (String::new(), Vec::new())
        }
    }
}

fn resolve_strategies(c: &mut Checker, value: Option<&Value>, default_eps: f64) -> Vec<Strategy> {
    let items = match value {
        Some(Value::Array(items)) if !items.is_empty() => items,
        _ => {
            c.push("strategies", "expected a non-empty list");
            return Vec::new();
        }
    };
    let mut out: Vec<Strategy> = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let path = format!("strategies[{i}]");
        let mut obj = match item {
            Value::String(s) => {
                let mut m = Map::new();
                m.insert("name".into(), Value::String(s.clone()));
                m
            }
            Value::Object(m) => m.clone(),
            _ => {
                c.push(path, "expected a strategy name or object");
                continue;
            }
        };
        if obj.get("name").and_then(Value::as_str) == Some("acll") && !obj.contains_key("epsilon") {
            obj.insert("epsilon".into(), Value::from(default_eps));
        }
        match serde_json::from_value::<Strategy>(Value::Object(obj)) {
            Ok(s) => {
                if let Err(e) = s.validate() {
                    c.push(path, e.to_string());
                } else if out.iter().any(|o| o.label() == s.label()) {
                    c.push(path, format!("duplicate strategy {}", s.label()));
                } else {
                    out.push(s);
                }
            }
            Err(e) => c.push(path, e.to_string()),
        }
    }
    out
}

/// One row of the summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub task: String,
    pub chosen_theta: Vec<f64>,
    pub size: f64,
    pub acc_post_task: f64,
    pub acc_end_of_sequence: f64,
    pub avg_over_tasks: f64,
}

pub const SUMMARY_HEADER: &str = "strategy,task,chosen_theta,size,acc_post_task,acc_end_of_sequence,avg_over_tasks";

/// Projects reports onto summary rows, in report order.
pub fn summary_rows(runs: &[SequenceRun]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for run in runs {
        let r = &run.report;
        let avg = r.average_end_accuracy();
        for t in &r.tasks {
            rows.push(SummaryRow {
                strategy: r.label.clone(),
                task: t.name.clone(),
                chosen_theta: t.theta.clone(),
                size: t.size,
                acc_post_task: t.test_acc_post_task,
                acc_end_of_sequence: t.test_acc_end,
                avg_over_tasks: avg,
            });
        }
    }
    rows
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], mut out: W) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    for row in rows {
        // Per-layer thetas are joined with ';' so the CSV stays flat.
        let theta = row.chosen_theta.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.strategy, row.task, theta, row.size, row.acc_post_task, row.acc_end_of_sequence, row.avg_over_tasks
        )?;
    }
    Ok(())
}

/// Runs every strategy (concurrently, one thread each) and writes reports.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SequenceRun>> {
    let tasks = cfg.build_tasks()?;
    let results: Vec<Result<SequenceRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .strategies
            .iter()
            .map(|&s| {
                let tasks = &tasks;
                scope.spawn(move || run_sequence(tasks, s, &cfg.lifelong, cfg.seed))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(AcllError::InvalidState("worker panicked".into()))))
            .collect()
    });
    let runs = results
        .into_iter()
        .zip(&cfg.strategies)
        .map(|(r, s)| r.map_err(|e| e.within(format!("strategy {}", s.label()))))
        .collect::<Result<Vec<_>>>()?;
    write_outputs(&cfg.out_dir, &runs)?;
    Ok(runs)
}

/// Layout: `<out>/<strategy>/report.json`, `cache_task<k>.jsonl`,
/// `trail_task<k>.jsonl`, and `<out>/summary.csv`.
pub fn write_outputs(out_dir: &Path, runs: &[SequenceRun]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for run in runs {
        let dir = out_dir.join(&run.report.label);
        fs::create_dir_all(&dir)?;
        let mut report = serde_json::to_string_pretty(&run.report)?;
        report.push('\n');
        fs::write(dir.join("report.json"), report)?;
        for (k, audit) in run.audits.iter().enumerate() {
            let n = k + 1;
            audit.cache.write_jsonl(BufWriter::new(fs::File::create(dir.join(format!("cache_task{n}.jsonl")))?))?;
            let mut trail = BufWriter::new(fs::File::create(dir.join(format!("trail_task{n}.jsonl")))?);
            for round in &audit.trail {
                serde_json::to_writer(&mut trail, round)?;
                trail.write_all(b"\n")?;
            }
            trail.flush()?;
        }
    }
    let mut csv = BufWriter::new(fs::File::create(out_dir.join("summary.csv"))?);
    write_summary_csv(&summary_rows(runs), &mut csv)?;
    csv.flush()?;
    Ok(())
}
