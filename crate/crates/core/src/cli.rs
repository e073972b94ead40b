//! Command-line driver: configuration, presets, run directories and manifests.
//!
//! A run is configured by one JSON document (`RunConfig`). Values are merged
//! in the order preset → `--config` file → `--set key=value` overrides →
//! dedicated flags (`--seed`). Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{condensation, heatmap_svg, pca_svg, pca_trajectory, series_csv, write_figures};
use crate::critical::{
    attention_rate, degenerate_row_residual, find_degenerate_point, find_kappa1, focus_along_ray, linearize,
    linearize_at, origin, unstable_direction_check, CriticalPoint, FdOrder,
};
use crate::error::{invalid, Error, Result};
use crate::flow::{integrate_flow, stage_times, timing_scaling, FlowConfig, StageThresholds};
use crate::linalg::Mat;
use crate::markov::{build_stationary, build_transition, sample_dataset, Dataset, MarkovSpec, StationaryDistribution};
use crate::model::{init_params, train, ModelParams, Optimizer};
use crate::perturbation::{escape_experiment, ls_decompose, ls_sweep};
use crate::reduced::{integrate_reduced, q_growth_rate};
use crate::verify::run_suite;

pub const MANIFEST_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "ATTNSTAGES_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    GenData,
    Train,
    Flow,
    Critical,
    Reduced,
    Perturb,
    Analyze,
    Verify,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::GenData => "gen-data",
            Experiment::Train => "train",
            Experiment::Flow => "flow",
            Experiment::Critical => "critical",
            Experiment::Reduced => "reduced",
            Experiment::Perturb => "perturb",
            Experiment::Analyze => "analyze",
            Experiment::Verify => "verify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Json,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// One trajectory with stage detection and figures.
    Single,
    /// ε-sweep of Stage-I exit times.
    Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Origin,
    Second,
    Degenerate,
}

/// Full resolved configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub d: usize,
    pub m: usize,
    /// Explicit stationary distribution; overrides `pi1`, `c`, `delta`.
    pub pi: Option<Vec<f64>>,
    pub pi1: f64,
    /// Low-token offsets (length d−1); defaults to zeros.
    pub c: Option<Vec<f64>>,
    pub delta: f64,
    pub lambda: f64,
    /// Initialization scale ε.
    pub eps: f64,
    pub seed: u64,
    /// Dataset size N and sequence length s.
    pub n: usize,
    pub s: usize,
    pub data_format: DataFormat,
    /// Input dataset for `train` (JSON or MKV1); sampled from the chain when absent.
    pub data: Option<PathBuf>,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub record_every: usize,
    pub flow: FlowConfig,
    pub flow_mode: FlowMode,
    pub stages: StageThresholds,
    pub eps_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub point: PointKind,
    pub fd_step: Option<f64>,
    pub eta_large: Option<f64>,
    pub focus_level: f64,
    /// Seed value of η for the reduced dilution run.
    pub eta0: f64,
    pub reduced_step: f64,
    pub reduced_time: Option<f64>,
    pub deltas: Vec<f64>,
    /// Run the escape flow after the δ-sweep at this δ (0 disables).
    pub escape_delta: f64,
    pub escape_flow: FlowConfig,
    /// Run directory (or snapshot directory) read by `analyze`.
    pub input: Option<PathBuf>,
    pub suite: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 4,
            m: 16,
            pi: None,
            pi1: 0.75,
            c: None,
            delta: 0.0,
            lambda: 0.8,
            eps: 1e-3,
            seed: 1,
            n: 1000,
            s: 64,
            data_format: DataFormat::Json,
            data: None,
            optimizer: Optimizer::Gd,
            lr: 0.1,
            steps: 1000,
            record_every: 10,
            flow: FlowConfig::default(),
            flow_mode: FlowMode::Single,
            stages: StageThresholds::default(),
            eps_list: vec![1e-2, 1e-3, 1e-4],
            seeds: vec![1, 2, 3],
            point: PointKind::Second,
            fd_step: None,
            eta_large: None,
            focus_level: 40.0,
            eta0: 1e-6,
            reduced_step: 0.01,
            reduced_time: None,
            deltas: vec![1e-2, 1e-3, 1e-4],
            escape_delta: 0.0,
            escape_flow: FlowConfig { step_size: 0.5, max_time: 3000.0, record_every: 20, ..FlowConfig::default() },
            input: None,
            suite: "all".into(),
        }
    }
}

impl RunConfig {
    pub fn spec(&self) -> Result<MarkovSpec> {
        let dist = match &self.pi {
            Some(p) => {
                if p.len() != self.d {
                    return Err(invalid("pi", format!("length {} differs from d = {}", p.len(), self.d)));
                }
                StationaryDistribution::from_probs(p)?
            }
            None => {
                let zeros = vec![0.0; self.d.saturating_sub(1)];
                build_stationary(self.d, self.pi1, self.c.as_deref().unwrap_or(&zeros), self.delta)?
            }
        };
        build_transition(dist, self.lambda)
    }

    /// Checks that do not depend on the experiment being run.
    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.m == 0 {
            return Err(invalid("m", "must be ≥ 1"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", format!("must be ≥ 0, got {}", self.eps)));
        }
        self.flow.validate()?;
        Ok(())
    }
}

pub struct Preset {
    pub name: &'static str,
    pub experiment: Experiment,
    pub description: &'static str,
    overrides: fn() -> Value,
}

impl Preset {
    pub fn config_value(&self) -> Value {
        (self.overrides)()
    }

    pub fn config(&self) -> Result<RunConfig> {
        resolve(Some(self.config_value()), None, &[], None)
    }
}

pub fn presets() -> Vec<Preset> {
    vec![
        Preset {
            name: "synthetic-fig2",
            experiment: Experiment::Flow,
            description: "four-stage population flow, π=(0.75,0.19,0.05,0.01), λ=0.8, ε=1e-4",
            overrides: || {
                serde_json::json!({
                    "d": 4, "m": 16, "pi": [0.75, 0.19, 0.05, 0.01], "lambda": 0.8, "eps": 1e-4, "seed": 1,
                    "flow": {"step_size": 0.05, "max_time": 400.0, "integrator": "rk4", "record_every": 20,
                             "adaptive": false, "snapshot_every": 1}
                })
            },
        },
        Preset {
            name: "kappa1-demo",
            experiment: Experiment::Critical,
            description: "second critical point κ₁ on a d=3 two-group chain with its unstable direction",
            overrides: || serde_json::json!({"d": 3, "m": 4, "pi1": 0.75, "lambda": 0.8, "point": "second"}),
        },
        Preset {
            name: "dilution-demo",
            experiment: Experiment::Reduced,
            description: "reduced flow from θ_c¹ with η(t₀)=1e-6 showing mass redistribution",
            overrides: || serde_json::json!({"d": 3, "m": 4, "pi1": 0.75, "lambda": 0.8, "eta0": 1e-6}),
        },
        Preset {
            name: "ls-sweep",
            experiment: Experiment::Perturb,
            description: "δ-sweep at the d=3 degenerate point: gradient and eigenvalue scales",
            overrides: || {
                serde_json::json!({"d": 3, "m": 4, "pi1": 0.6, "lambda": 0.6, "deltas": [1e-2, 1e-3, 1e-4],
                                   "escape_delta": 1e-2})
            },
        },
        Preset {
            name: "timing-scaling",
            experiment: Experiment::Flow,
            description: "Stage-I exit time against log(1/ε) over ε ∈ {1e-2,1e-3,1e-4}, three seeds",
            overrides: || {
                serde_json::json!({
                    "d": 4, "m": 8, "pi": [0.75, 0.19, 0.05, 0.01], "lambda": 0.8, "flow_mode": "timing",
                    "eps_list": [1e-2, 1e-3, 1e-4], "seeds": [1, 2, 3],
                    "flow": {"step_size": 0.05, "max_time": 200.0, "integrator": "rk4", "record_every": 4,
                             "adaptive": false, "snapshot_every": 0}
                })
            },
        },
    ]
}

pub fn find_preset(name: &str) -> Result<Preset> {
    presets()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| invalid("preset", format!("unknown preset `{name}`")))
}

/// Recursive merge of `over` into `base`; objects merge key by key.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// `key=value` with dotted keys for nested fields; the value is parsed as
/// JSON and falls back to a plain string.
fn parse_override(s: &str) -> Result<Value> {
    let (key, raw) = s.split_once('=').ok_or_else(|| invalid("set", format!("expected key=value, got `{s}`")))?;
    let val = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut v = val;
    for part in key.split('.').rev() {
        if part.is_empty() {
            return Err(invalid("set", format!("empty key segment in `{key}`")));
        }
        let mut m = Map::new();
        m.insert(part.to_string(), v);
        v = Value::Object(m);
    }
    Ok(v)
}

/// A manifest is accepted as a config file: its `config` member is used.
fn config_from_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text)?;
    match v.get("manifest_version") {
        Some(_) => v.get("config").cloned().ok_or_else(|| Error::Format("manifest without `config`".into())),
        None => Ok(v),
    }
}

pub fn resolve(preset: Option<Value>, file: Option<Value>, sets: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    for layer in [preset, file].into_iter().flatten() {
        if !layer.is_object() {
            return Err(Error::Format("configuration must be a JSON object".into()));
        }
        merge(&mut v, layer);
    }
    for s in sets {
        merge(&mut v, parse_override(s)?);
    }
    if let Some(seed) = seed {
        merge(&mut v, serde_json::json!({ "seed": seed }));
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Format(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Parser, Debug)]
#[command(name = "attnstages", version, about = "Gradient-flow laboratory for attention training stages")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config file (a manifest.json is also accepted).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset to start from.
    #[arg(long)]
    pub preset: Option<String>,
    /// Field override, e.g. `--set lambda=0.5` or `--set flow.max_time=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to ATTNSTAGES_THREADS).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Allow writing into an existing run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a Markov dataset.
    GenData(Common),
    /// Train on a sampled or supplied dataset.
    Train(Common),
    /// Integrate the population gradient flow.
    Flow(Common),
    /// Construct and linearize a critical point.
    Critical(Common),
    /// Integrate the reduced rank-one flow from the second critical point.
    Reduced(Common),
    /// Symmetry-breaking δ-sweep at the degenerate point.
    Perturb(Common),
    /// Condensation, PCA and orthogonal components of a snapshot directory.
    Analyze(Common),
    /// Run self-check suites.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Option<String>,
    },
    /// List built-in presets.
    Presets,
}

/// Outcome of a run, mapped to the process exit code.
#[derive(Debug)]
pub enum Outcome {
    Ok,
    CertificationFailed(String),
}

impl Error {
    /// 1 for invalid input, 2 for numerical or certification failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Certification(_) | Error::NoRoot(_) | Error::Diverged { .. } | Error::Integration { .. } => 2,
            _ => 1,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes files into a run directory and records their hashes.
pub struct RunDir {
    pub path: PathBuf,
    files: Vec<(String, String)>,
}

impl RunDir {
    pub fn create(path: &Path, force: bool) -> Result<RunDir> {
        if path.exists() && !force {
            let nonempty = path.is_file() || std::fs::read_dir(path)?.next().is_some();
            if nonempty {
                return Err(invalid(
                    "out",
                    format!("run directory {} already exists; pass --force to overwrite", path.display()),
                ));
            }
        }
        std::fs::create_dir_all(path)?;
        Ok(RunDir { path: path.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, bytes)?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, v: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    /// Record files written by other writers (figures, snapshots) below `sub`.
    fn adopt(&mut self, sub: &str) -> Result<()> {
        let dir = self.path.join(sub);
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        names.sort();
        for p in names.into_iter().filter(|p| p.is_file()) {
            let bytes = std::fs::read(&p)?;
            let name = format!("{sub}/{}", p.file_name().unwrap_or_default().to_string_lossy());
            self.files.push((name, sha256_hex(&bytes)));
        }
        Ok(())
    }

    fn finish(self, experiment: Experiment, cfg: &RunConfig, inputs: &[(String, Vec<u8>)], status: &str) -> Result<()> {
        let cfg_json = serde_json::to_value(cfg)?;
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&serde_json::json!({"experiment": experiment, "config": cfg_json}))?);
        for (name, bytes) in inputs {
            h.update(name.as_bytes());
            h.update(bytes);
        }
        let input_hash: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let manifest = serde_json::json!({
            "manifest_version": MANIFEST_VERSION,
            "tool": "attnstages",
            "tool_version": env!("CARGO_PKG_VERSION"),
            "experiment": experiment,
            "config": cfg_json,
            "input_hash": input_hash,
            "inputs": inputs.iter().map(|(n, b)| serde_json::json!({"path": n, "sha256": sha256_hex(b)})).collect::<Vec<_>>(),
            "outputs": self.files.iter().map(|(n, s)| serde_json::json!({"path": n, "sha256": s})).collect::<Vec<_>>(),
            "status": status,
        });
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        std::fs::write(self.path.join("manifest.json"), s)?;
        Ok(())
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| invalid("threads", format!("{THREADS_ENV}=`{v}` is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(invalid("threads", "must be ≥ 1"));
        }
        // a second call (e.g. from tests in one process) leaves the first pool in place
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn default_out(experiment: Experiment, cfg: &RunConfig) -> Result<PathBuf> {
    let h = sha256_hex(serde_json::to_string(cfg)?.as_bytes());
    Ok(PathBuf::from("runs").join(format!("{}-{}", experiment.name(), &h[..10])))
}

fn two_col_csv(header: &str, rows: impl Iterator<Item = (f64, f64)>) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in rows {
        s.push_str(&format!("{a},{b}\n"));
    }
    s
}

fn run_gen_data(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let data = sample_dataset(&spec, cfg.n, cfg.s, cfg.seed)?;
    match cfg.data_format {
        DataFormat::Json => dir.write("dataset.json", serde_json::to_string(&data.to_json())?.as_bytes())?,
        DataFormat::Binary => {
            let mut buf = Vec::new();
            data.write_binary(&mut buf)?;
            dir.write("dataset.mkv", &buf)?;
        }
    }
    let f = crate::markov::empirical_frequencies(&data);
    dir.write(
        "frequencies.csv",
        two_col_csv("pi,freq", spec.pi().iter().cloned().zip(f.iter().cloned())).as_bytes(),
    )?;
    Ok(Outcome::Ok)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(b"MKV1") {
        Dataset::read_binary(&bytes[..])
    } else {
        Dataset::from_json(&serde_json::from_slice(&bytes)?)
    }
}

fn write_trajectory(dir: &mut RunDir, traj: &crate::Trajectory) -> Result<()> {
    dir.write("metrics.csv", traj.metrics_csv().as_bytes())?;
    traj.write_snapshots(&dir.path.join("snapshots"))?;
    dir.adopt("snapshots")
}

fn run_train(cfg: &RunConfig, dir: &mut RunDir, inputs: &mut Vec<(String, Vec<u8>)>) -> Result<Outcome> {
    let data = match &cfg.data {
        Some(p) => {
            inputs.push((p.display().to_string(), std::fs::read(p)?));
            load_dataset(p)?
        }
        None => sample_dataset(&cfg.spec()?, cfg.n, cfg.s, cfg.seed)?,
    };
    let p0 = init_params(data.d, cfg.m, cfg.eps, cfg.seed)?;
    let traj = train(&p0, &data, cfg.optimizer, cfg.lr, cfg.steps, cfg.record_every)?;
    write_trajectory(dir, &traj)?;
    if let Some(last) = traj.snapshots.last() {
        dir.write_json("final_params.json", &last.to_json(cfg.steps))?;
    }
    figures(dir, &traj, &cfg.stages)?;
    Ok(Outcome::Ok)
}

fn figures(dir: &mut RunDir, traj: &crate::Trajectory, th: &StageThresholds) -> Result<()> {
    if traj.len() < 10 {
        return Ok(());
    }
    write_figures(traj, th, &dir.path.join("figures"))?;
    dir.adopt("figures")
}

fn run_flow(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let spec = cfg.spec()?;
    match cfg.flow_mode {
        FlowMode::Single => {
            let p0 = init_params(spec.d(), cfg.m, cfg.eps, cfg.seed)?;
            let traj = integrate_flow(&p0, &spec, &cfg.flow)?;
            write_trajectory(dir, &traj)?;
            let stages = stage_times(&traj, &cfg.stages)?;
            dir.write_json("stages.json", &stages)?;
            figures(dir, &traj, &cfg.stages)?;
            Ok(Outcome::Ok)
        }
        FlowMode::Timing => {
            let table = timing_scaling(&spec, cfg.m, &cfg.eps_list, &cfg.seeds, &cfg.flow, &cfg.stages)?;
            dir.write_json("timing.json", &table)?;
            let mut csv = String::from("eps,log_inv_eps,mean_exit\n");
            for r in &table.rows {
                csv.push_str(&format!("{},{},{}\n", r.eps, (1.0 / r.eps).ln(), r.mean_exit));
            }
            dir.write("timing.csv", csv.as_bytes())?;
            Ok(Outcome::Ok)
        }
    }
}

fn run_critical(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let point: CriticalPoint = match cfg.point {
        PointKind::Origin => origin(&spec, cfg.m)?,
        PointKind::Second => find_kappa1(&spec, cfg.m, None)?,
        PointKind::Degenerate => find_degenerate_point(&spec, cfg.m, cfg.eta_large)?,
    };
    let mut report = serde_json::json!({ "point": point.to_json() });
    let lin = match cfg.point {
        PointKind::Second => {
            let lin = linearize(&point, &spec, cfg.fd_step)?;
            let c = attention_rate(&spec, point.kappa1.unwrap_or(f64::NAN));
            report["linearization"] = lin.to_json(1);
            report["attention_rate_c"] = c.into();
            report["relative_error_mu_c"] = ((lin.mu - c).abs() / c).into();
            report["cross_block_max"] = lin.cross_block_max(spec.d(), cfg.m).into();
            report["unstable_direction"] = serde_json::to_value(unstable_direction_check(&point, &spec, &lin)?)?;
            report["focus"] = serde_json::to_value(focus_along_ray(&point, &spec, cfg.focus_level)?)?;
            lin
        }
        PointKind::Degenerate => {
            let lin = linearize_at(&point.params, &spec, Some(cfg.fd_step.unwrap_or(1e-4)), FdOrder::Fourth)?;
            let kernel = lin.eigenvalues.iter().filter(|e| e.abs() <= 1e-8).count();
            report["linearization"] = lin.to_json(0);
            report["kernel_dimension"] = kernel.into();
            report["row_residual"] = degenerate_row_residual(&point, &spec)?.into();
            lin
        }
        PointKind::Origin => {
            let lin = linearize(&point, &spec, cfg.fd_step)?;
            report["linearization"] = lin.to_json(1);
            lin
        }
    };
    let mut csv = String::from("index,eigenvalue\n");
    for (k, e) in lin.eigenvalues.iter().enumerate() {
        csv.push_str(&format!("{k},{e}\n"));
    }
    dir.write("spectrum.csv", csv.as_bytes())?;
    dir.write_json("critical.json", &report)?;
    dir.write_json("params.json", &point.params.to_json(0))?;
    Ok(Outcome::Ok)
}

fn run_reduced(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let cp = find_kappa1(&spec, cfg.m, None)?;
    let mut st = cp.state.clone().ok_or_else(|| invalid("point", "missing reduced coordinates"))?;
    let r = cfg.eta0.abs().sqrt();
    st.lam_q = r;
    st.lam_k = cfg.eta0.signum() * r;
    let mu = attention_rate(&spec, cp.kappa1.unwrap_or(f64::NAN));
    let t_max = cfg.reduced_time.unwrap_or(40.0 / mu);
    let every = ((t_max / cfg.reduced_step) / 2000.0).ceil().max(1.0) as usize;
    let tr = integrate_reduced(&st, &spec, cfg.reduced_step, t_max, every)?;
    dir.write("reduced.csv", tr.csv(&spec).as_bytes())?;
    let fit = q_growth_rate(&tr, &spec);
    let summary = serde_json::json!({
        "kappa1": cp.kappa1,
        "attention_rate_c": mu,
        "eta_rate": 2.0 * mu,
        "q_slope": fit.map(|f| f.0),
        "q_fit_r2": fit.map(|f| f.1),
        "q_fit_points": fit.map(|f| f.2),
    });
    dir.write_json("summary.json", &summary)?;
    match fit {
        Some(_) => Ok(Outcome::Ok),
        None => Ok(Outcome::CertificationFailed("no linear growth window for Q".into())),
    }
}

fn run_perturb(cfg: &RunConfig, dir: &mut RunDir) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let dp = find_degenerate_point(&spec, cfg.m, cfg.eta_large)?;
    let ls = ls_decompose(&dp, &spec)?;
    let rep = ls_sweep(&ls, &cfg.deltas)?;
    dir.write_json("ls_report.json", &rep.to_json())?;
    if cfg.escape_delta > 0.0 {
        let pp = ls.build_perturbed_point(cfg.escape_delta)?;
        let esc = escape_experiment(&pp, &cfg.escape_flow, 1e-8, cfg.seed)?;
        dir.write("escape_metrics.csv", esc.trajectory.metrics_csv().as_bytes())?;
        dir.write_json(
            "escape.json",
            &serde_json::json!({
                "delta": cfg.escape_delta,
                "manifold_distance_rate": esc.rate,
                "orth_rate": esc.orth_rate,
                "max_manifold_distance": esc.max_manifold_distance,
                "attention_row_split": esc.row_split,
                "embedding_split": esc.embedding_split,
            }),
        )?;
    }
    Ok(Outcome::Ok)
}

fn read_snapshots(dir: &Path) -> Result<Vec<ModelParams>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    // names carry the time with fixed decimals; sort numerically
    let time = |p: &PathBuf| {
        p.file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.strip_prefix("snap_"))
            .and_then(|s| s.parse::<f64>().ok())
            .unwrap_or(f64::INFINITY)
    };
    paths.sort_by(|a, b| time(a).total_cmp(&time(b)));
    paths
        .iter()
        .map(|p| Ok(ModelParams::from_json(&serde_json::from_slice(&std::fs::read(p)?)?)?.0))
        .collect()
}

fn run_analyze(cfg: &RunConfig, dir: &mut RunDir, inputs: &mut Vec<(String, Vec<u8>)>) -> Result<Outcome> {
    let input = cfg.input.as_ref().ok_or_else(|| invalid("input", "analyze needs `input` (a run or snapshot directory)"))?;
    let snapdir = if input.join("snapshots").is_dir() { input.join("snapshots") } else { input.clone() };
    let snaps = read_snapshots(&snapdir)?;
    if snaps.is_empty() {
        return Err(invalid("input", format!("no snapshots in {}", snapdir.display())));
    }
    for s in &snaps {
        inputs.push(("snapshot".into(), serde_json::to_vec(&s.to_json(0))?));
    }
    let last = snaps.last().expect("nonempty");
    let cm = condensation(&last.w0);
    dir.write_json("condensation_W0.json", &cm)?;
    dir.write("condensation_W0.svg", heatmap_svg(&cm.ordered(), "Cosine similarity of W0 rows").as_bytes())?;
    let cm1 = condensation(&last.w1.transpose());
    dir.write("condensation_W1.svg", heatmap_svg(&cm1.ordered(), "Cosine similarity of W1 columns").as_bytes())?;
    let w0s: Vec<Mat> = snaps.iter().map(|s| s.w0.clone()).collect();
    if snaps.len() >= 2 {
        let pca = pca_trajectory(&w0s)?;
        dir.write_json("pca_W0.json", &pca)?;
        dir.write("pca_W0.svg", pca_svg(&pca, "Embedding trajectories (PCA)").as_bytes())?;
    }
    let idx: Vec<f64> = (0..snaps.len()).map(|k| k as f64).collect();
    let orth: Vec<Vec<f64>> = snaps.iter().map(|s| crate::trajectory::orthogonal_row_norms(&s.w0)).collect();
    dir.write("orth_components.csv", series_csv(&idx, &orth, "orth", 2).replacen('t', "snapshot", 1).as_bytes())?;
    Ok(Outcome::Ok)
}

fn run_verify(suite: &str, dir: &mut RunDir) -> Result<Outcome> {
    let results = run_suite(suite)?;
    for r in &results {
        println!("[{}] {}/{}: {}", if r.passed { "PASS" } else { "FAIL" }, r.suite, r.name, r.detail);
    }
    dir.write_json("verify.json", &results)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::CertificationFailed(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

/// Execute one experiment; returns the run directory.
pub fn run_experiment(experiment: Experiment, common: &Common, suite: Option<&str>) -> Result<(PathBuf, Outcome)> {
    configure_threads(common.threads)?;
    let preset = match &common.preset {
        Some(name) => {
            let p = find_preset(name)?;
            if p.experiment != experiment {
                return Err(invalid(
                    "preset",
                    format!("preset `{name}` belongs to `{}`, not `{}`", p.experiment.name(), experiment.name()),
                ));
            }
            Some(p.config_value())
        }
        None => None,
    };
    let mut inputs = Vec::new();
    let file = match &common.config {
        Some(p) => {
            inputs.push((p.display().to_string(), std::fs::read(p)?));
            Some(config_from_file(p)?)
        }
        None => None,
    };
    let mut sets = common.sets.clone();
    if let Some(s) = suite {
        sets.push(format!("suite=\"{s}\""));
    }
    let cfg = resolve(preset, file, &sets, common.seed)?;
    // the config file is echoed in the manifest; hash only external data inputs
    inputs.clear();
    let out = match &common.out {
        Some(p) => p.clone(),
        None => default_out(experiment, &cfg)?,
    };
    let mut dir = RunDir::create(&out, common.force)?;
    let result = match experiment {
        Experiment::GenData => run_gen_data(&cfg, &mut dir),
        Experiment::Train => run_train(&cfg, &mut dir, &mut inputs),
        Experiment::Flow => run_flow(&cfg, &mut dir),
        Experiment::Critical => run_critical(&cfg, &mut dir),
        Experiment::Reduced => run_reduced(&cfg, &mut dir),
        Experiment::Perturb => run_perturb(&cfg, &mut dir),
        Experiment::Analyze => run_analyze(&cfg, &mut dir, &mut inputs),
        Experiment::Verify => run_verify(&cfg.suite, &mut dir),
    };
    let status = match &result {
        Ok(Outcome::Ok) => "ok".to_string(),
        Ok(Outcome::CertificationFailed(m)) => format!("certification failed: {m}"),
        Err(e) => format!("error: {e}"),
    };
    dir.finish(experiment, &cfg, &inputs, &status)?;
    result.map(|o| (out, o))
}

pub fn presets_listing() -> String {
    presets().iter().map(|p| format!("{:<16} {:<9} {}\n", p.name, p.experiment.name(), p.description)).collect()
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (experiment, common, suite) = match cli.command {
        Command::Presets => {
            print!("{}", presets_listing());
            return 0;
        }
        Command::GenData(c) => (Experiment::GenData, c, None),
        Command::Train(c) => (Experiment::Train, c, None),
        Command::Flow(c) => (Experiment::Flow, c, None),
        Command::Critical(c) => (Experiment::Critical, c, None),
        Command::Reduced(c) => (Experiment::Reduced, c, None),
        Command::Perturb(c) => (Experiment::Perturb, c, None),
        Command::Analyze(c) => (Experiment::Analyze, c, None),
        Command::Verify { common, suite } => (Experiment::Verify, common, suite),
    };
    match run_experiment(experiment, &common, suite.as_deref()) {
        Ok((dir, Outcome::Ok)) => {
            println!("{}", dir.display());
            0
        }
        Ok((dir, Outcome::CertificationFailed(m))) => {
            eprintln!("certification failed: {m} (run directory {})", dir.display());
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
