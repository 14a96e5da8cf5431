//! Experiment runner: `varcal <experiment> [--flag value]...`.
//!
//! Parameters come from an optional TOML file (`--config`) and are
//! overridden flag by flag. Every run writes fixed-name artifacts and a
//! `manifest.json` under the output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, ValueEnum};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibration::{
    assemble_calibrated_lagrangian, calibration_inequality_test, integrate_minimizer_field, CalibratedLagrangian,
    FieldOptions, Potential, Rect, SamplingSpec,
};
use crate::constructions::nonpu::measures_for_depth;
use crate::constructions::{build_nonpu_construction, build_pu_potential, NonPuConfig, NonPuConstruction, PuConfig};
use crate::convexify::{envelope_of, relaxation_gap_check};
use crate::core::{energy, BoundaryProblem, Error, Lagrangian, SuperlinearBound, REGISTRY};
use crate::direct_method::{estimate_ground_energy, lavrentiev_gap, MinimizeConfig};
use crate::regularity::{
    lipschitz_intersection_probe, regularity_sweep, sample_singular_points, tonelli_constants, BoundaryGrid,
    DirectMinimizers, FieldMinimizers, MeshPlan, RefinedMinimizers, SampleConfig, SingularSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Minimize,
    Lavrentiev,
    Relax,
    Calibrate,
    BuildPu,
    BuildNonpu,
    Regularity,
    SingularScan,
    Probe,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

/// Experiment parameters. Unset entries fall back to per-experiment defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// registry key of the Lagrangian
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lagrangian: Option<String>,
    /// extra Lagrangian parameters, `name=value`
    #[arg(long = "param", value_name = "NAME=VALUE")]
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub param: Vec<String>,
    /// boundary data `a,A,b,B`
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bc: Option<Vec<f64>>,
    /// cells of the coarsest mesh
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    /// dyadic refinement levels
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
    /// Manià weight of `p^2`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps0: Option<f64>,
    /// increasing slope caps
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caps: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// construction depth K
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// superlinear bound: p2 or p4
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<String>,
    /// pu or nonpu
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub construction: Option<String>,
    /// samples of the construction checks
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// random paths of the calibration test
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    /// points per axis of the hypothesis grid
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    /// box radius R
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    /// near-minimizers of the regularity sweep
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cases: Option<usize>,
    /// left boundary values of the scan grid
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub left: Option<Vec<f64>>,
    /// right boundary values of the scan grid
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub right: Option<Vec<f64>>,
    /// level-1 cores whose field lines are scanned
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cores: Option<Vec<u64>>,
    /// random curves per probe
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curves: Option<usize>,
    /// Lipschitz constant of the probe curves
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lip: Option<f64>,
    /// neighbourhood radii of the probe
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
}

impl Params {
    /// Entries set here win over `base`.
    fn over(&self, base: &Params) -> Params {
        let mut m = match serde_json::to_value(base).expect("params serialize") {
            Value::Object(m) => m,
            _ => unreachable!(),
        };
        if let Value::Object(top) = serde_json::to_value(self).expect("params serialize") {
            m.extend(top);
        }
        serde_json::from_value(Value::Object(m)).expect("merged params deserialize")
    }
}

#[derive(Debug, Parser)]
#[command(name = "varcal", version, about = "Variational experiments: minimization, relaxation, calibration, singular sets")]
pub struct Cli {
    /// may be omitted when the config file names it
    pub experiment: Option<Experiment>,
    /// TOML file with `seed`, `out` and a `[params]` table
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub params: Params,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    experiment: Option<Experiment>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    #[serde(default)]
    params: Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub params: Params,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    Contract = 1,
    Finding = 2,
    Usage = 64,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub enum RunError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        RunError::Lib(e)
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Usage(s) => write!(f, "usage: {s}"),
            RunError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, RunError> {
    Err(RunError::Usage(msg.into()))
}

type RunResult<T> = std::result::Result<T, RunError>;

impl ExperimentConfig {
    pub fn from_cli(cli: Cli) -> RunResult<Self> {
        let file = match &cli.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| RunError::Usage(format!("{}: {e}", p.display())))?;
                toml::from_str::<ConfigFile>(&text).map_err(|e| RunError::Usage(format!("{}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        let experiment = match (cli.experiment, file.experiment) {
            (Some(c), Some(f)) if c != f => return usage(format!("config file is for `{f}`, not `{c}`")),
            (Some(e), _) | (None, Some(e)) => e,
            (None, None) => return usage("an experiment is required"),
        };
        let Some(seed) = cli.seed.or(file.seed) else {
            return usage("a seed is required (--seed or `seed` in the config file)");
        };
        let out = cli.out.or(file.out).unwrap_or_else(|| PathBuf::from(format!("runs/{experiment}-seed{seed}")));
        let cfg = ExperimentConfig { experiment, params: cli.params.over(&file.params), out, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> RunResult<()> {
        let p = &self.params;
        if let Some(k) = &p.lagrangian {
            if !REGISTRY.contains(&k.as_str()) {
                return usage(format!("unknown lagrangian `{k}`; known: {}", REGISTRY.join(", ")));
            }
        }
        self.lagrangian_params()?;
        if let Some(bc) = &p.bc {
            if bc.len() != 4 || !(bc[0] < bc[2]) || bc.iter().any(|v| !v.is_finite()) {
                return usage("--bc takes a,A,b,B with a < b");
            }
        }
        if let Some(c) = p.cells {
            if c < 2 {
                return usage("--cells must be at least 2");
            }
        }
        if p.levels == Some(0) {
            return usage("--levels must be positive");
        }
        if matches!(self.experiment, Experiment::Lavrentiev) && p.levels == Some(1) {
            return usage("the gap table needs at least two levels");
        }
        for (name, v) in [("eps0", p.eps0), ("tol", p.tol), ("radius", p.radius), ("lip", p.lip)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return usage(format!("--{name} must be positive"));
                }
            }
        }
        if let Some(c) = &p.caps {
            if c.is_empty() || c.iter().any(|v| !(*v > 0.0)) || c.windows(2).any(|w| !(w[0] < w[1])) {
                return usage("--caps must be positive and strictly increasing");
            }
        }
        if let Some(g) = &p.gammas {
            if g.is_empty() || g.iter().any(|v| !(*v > 0.0)) {
                return usage("--gammas must be positive");
            }
        }
        if let Some(o) = &p.omega {
            omega_from_tag(o)?;
        }
        if let Some(c) = &p.construction {
            if c != "pu" && c != "nonpu" {
                return usage("--construction is pu or nonpu");
            }
        }
        if p.depth == Some(0) {
            return usage("--depth must be positive");
        }
        for (name, v) in [("samples", p.samples), ("paths", p.paths), ("cases", p.cases), ("curves", p.curves)] {
            if v == Some(0) {
                return usage(format!("--{name} must be positive"));
            }
        }
        if let Some(g) = p.grid {
            if g < 2 {
                return usage("--grid must be at least 2");
            }
        }
        Ok(())
    }

    fn lagrangian_params(&self) -> RunResult<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        for kv in &self.params.param {
            let Some((k, v)) = kv.split_once('=') else {
                return usage(format!("--param `{kv}` is not NAME=VALUE"));
            };
            let v: f64 = v.trim().parse().map_err(|_| RunError::Usage(format!("--param `{kv}`: bad number")))?;
            m.insert(k.trim().to_string(), v);
        }
        if let Some(e) = self.params.eps0 {
            m.insert("eps0".into(), e);
        }
        Ok(m)
    }

    fn lagrangian(&self, default: &str) -> RunResult<Lagrangian> {
        let key = self.params.lagrangian.as_deref().unwrap_or(default);
        Lagrangian::from_registry(key, &self.lagrangian_params()?).map_err(|e| RunError::Usage(e.to_string()))
    }

    fn problem(&self, default: [f64; 4]) -> RunResult<BoundaryProblem> {
        let bc = self.params.bc.clone().unwrap_or(default.to_vec());
        BoundaryProblem::new(bc[0], bc[1], bc[2], bc[3]).map_err(|e| RunError::Usage(e.to_string()))
    }

    fn omega(&self) -> RunResult<SuperlinearBound> {
        omega_from_tag(self.params.omega.as_deref().unwrap_or("p2"))
    }

    fn minimize_config(&self) -> MinimizeConfig {
        MinimizeConfig {
            n_cells: self.params.cells.unwrap_or(8),
            restarts: self.params.restarts.unwrap_or(0),
            seed: self.seed,
            ..MinimizeConfig::default()
        }
    }
}

fn omega_from_tag(tag: &str) -> RunResult<SuperlinearBound> {
    match tag {
        "p2" => Ok(SuperlinearBound::p2()),
        "p4" => Ok(SuperlinearBound::p4()),
        _ => usage(format!("unknown omega `{tag}` (p2 or p4)")),
    }
}

/// Files of one run, in write order.
struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn write(&mut self, name: &str, contents: &str) -> RunResult<()> {
        fs::write(self.dir.join(name), contents).map_err(Error::from)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, v: &T) -> RunResult<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
        s.push('\n');
        self.write(name, &s)
    }
}

/// Outcome of a pipeline: findings make the exit status 2.
#[derive(Debug, Default)]
struct Outcome {
    findings: Vec<String>,
}

impl Outcome {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.findings.push(what.into());
        }
    }
}

struct DirLock(PathBuf);

impl DirLock {
    fn take(dir: &Path) -> RunResult<Self> {
        let p = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(_) => Ok(DirLock(p)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Contract(format!("{} is locked by another run", dir.display())).into())
            }
            Err(e) => Err(Error::from(e).into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn thread_pool() -> RunResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("VARCAL_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => b = b.num_threads(n),
            _ => return usage(format!("VARCAL_THREADS must be a positive integer, got `{v}`")),
        }
    }
    b.build().map_err(|e| RunError::Usage(e.to_string()))
}

/// Runs one experiment and returns its exit status with the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> (ExitStatus, PathBuf) {
    let status = match try_run(cfg) {
        Ok(s) => s,
        Err(RunError::Usage(m)) => {
            eprintln!("varcal: {m}");
            ExitStatus::Usage
        }
        Err(RunError::Lib(e)) => {
            eprintln!("varcal: {e}");
            ExitStatus::Contract
        }
    };
    (status, cfg.out.clone())
}

fn try_run(cfg: &ExperimentConfig) -> RunResult<ExitStatus> {
    cfg.validate()?;
    let pool = thread_pool()?;
    fs::create_dir_all(&cfg.out).map_err(Error::from)?;
    let _lock = DirLock::take(&cfg.out)?;
    let mut art = Artifacts { dir: cfg.out.clone(), files: Vec::new() };
    let t0 = Instant::now();
    let res = pool.install(|| dispatch(cfg, &mut art));
    let (status, findings, error) = match res {
        Ok(o) if o.findings.is_empty() => (ExitStatus::Ok, o.findings, None),
        Ok(o) => (ExitStatus::Finding, o.findings, None),
        Err(RunError::Lib(e @ Error::Construction { .. })) => (ExitStatus::Finding, vec![e.to_string()], None),
        Err(RunError::Lib(e)) => (ExitStatus::Contract, Vec::new(), Some(e.to_string())),
        Err(e) => return Err(e),
    };
    for f in &findings {
        eprintln!("finding: {f}");
    }
    if let Some(e) = &error {
        eprintln!("varcal: {e}");
    }
    let mut files = art.files.clone();
    files.push("manifest.json".into());
    let manifest = json!({
        "experiment": cfg.experiment,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg,
        "status": match status { ExitStatus::Ok => "ok", ExitStatus::Finding => "finding", _ => "error" },
        "findings": findings,
        "error": error,
        "wall_time_s": t0.elapsed().as_secs_f64(),
        "files": files,
    });
    art.json("manifest.json", &manifest)?;
    Ok(status)
}

fn dispatch(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    match cfg.experiment {
        Experiment::Minimize => minimize(cfg, art),
        Experiment::Lavrentiev => lavrentiev(cfg, art),
        Experiment::Relax => relax(cfg, art),
        Experiment::Calibrate => calibrate(cfg, art),
        Experiment::BuildPu => build_pu(cfg, art),
        Experiment::BuildNonpu => build_nonpu(cfg, art),
        Experiment::Regularity => regularity(cfg, art),
        Experiment::SingularScan => singular_scan(cfg, art).map(|(o, _)| o),
        Experiment::Probe => probe(cfg, art),
    }
}

/// Parses `argv`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitStatus::Usage.code() } else { 0 };
        }
    };
    let cfg = match ExperimentConfig::from_cli(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("varcal: {e}");
            return ExitStatus::Usage.code();
        }
    };
    let (status, dir) = run_experiment(&cfg);
    if matches!(status, ExitStatus::Ok | ExitStatus::Finding) {
        println!("{}", dir.display());
    }
    status.code()
}

fn minimize(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let l = cfg.lagrangian("quadratic")?;
    let pb = cfg.problem([0.0, 0.0, 1.0, 1.0])?;
    let est = estimate_ground_energy(&l, &pb, &cfg.minimize_config(), cfg.params.levels.unwrap_or(3))?;
    let mut csv = String::from("level,cells,energy,converged\n");
    for (i, ((n, e), c)) in est.levels.iter().zip(&est.converged).enumerate() {
        csv.push_str(&format!("{i},{n},{e:?},{c}\n"));
    }
    art.write("energy.csv", &csv)?;
    art.write("path.csv", &path_csv(est.path.nodes(), est.path.values()))?;
    art.json("result.json", &json!({
        "lagrangian": l.name,
        "problem": est.problem,
        "energy": est.value,
        "trend": est.trend,
        "levels": est.levels,
        "converged": est.converged,
    }))?;
    let pts: Vec<(f64, f64)> = est.levels.iter().map(|&(n, e)| (n as f64, e)).collect();
    art.write("energy.svg", &svg::lines("ground energy", "cells", "energy", &[("energy".into(), pts)], true, false))?;
    let path: Vec<(f64, f64)> = est.path.nodes().iter().copied().zip(est.path.values().iter().copied()).collect();
    art.write("path.svg", &svg::lines("minimizer", "x", "u", &[("u".into(), path)], false, false))?;
    let mut o = Outcome::default();
    o.check(est.converged.iter().all(|&c| c), "minimization did not converge on every level");
    Ok(o)
}

fn lavrentiev(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let l = cfg.lagrangian("mania")?;
    let pb = cfg.problem([0.0, 0.0, 1.0, 1.0])?;
    let caps = cfg.params.caps.clone().unwrap_or(vec![4.0, 8.0, 16.0]);
    let t = lavrentiev_gap(&l, &pb, &cfg.minimize_config(), &caps, cfg.params.levels.unwrap_or(4))?;
    art.write("gap.csv", &t.to_csv())?;
    art.json("gap.json", &t)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = t
        .rows
        .iter()
        .map(|r| (format!("cap {}", r.cap), r.gaps.iter().enumerate().map(|(i, g)| (i as f64, *g)).collect()))
        .collect();
    art.write("gap.svg", &svg::lines("capped minus uncapped ground energy", "level", "gap", &series, false, false))?;
    let mut o = Outcome::default();
    o.check(t.rows.iter().any(|r| r.stabilized), "no cap shows a positive stabilized gap");
    Ok(o)
}

fn relax(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let l = cfg.lagrangian("double_well")?;
    let pb = cfg.problem([0.0, 0.0, 1.0, 0.0])?;
    let tol = cfg.params.tol.unwrap_or(1e-3);
    let rep = relaxation_gap_check(&l, &pb, &cfg.minimize_config(), cfg.params.levels.unwrap_or(4), tol)?;
    let mut csv = String::from("level,cells,ground_l,ground_lc,gap\n");
    for (i, ((a, b), g)) in rep.ground_l.levels.iter().zip(&rep.ground_lc.levels).zip(&rep.gaps_per_level).enumerate() {
        csv.push_str(&format!("{i},{},{:?},{:?},{g:?}\n", a.0, a.1, b.1));
    }
    art.write("relax.csv", &csv)?;
    art.json("relax.json", &rep)?;
    let env = envelope_of(|p| l.eval(pb.a, pb.big_a, p), 3.0, 401)?;
    art.write("envelope.csv", &env.to_csv())?;
    let f: Vec<(f64, f64)> = env.p_grid.iter().copied().zip(env.original.iter().copied()).collect();
    let c: Vec<(f64, f64)> = env.p_grid.iter().copied().zip(env.values.iter().copied()).collect();
    art.write("envelope.svg", &svg::lines("slope envelope at the left endpoint", "p", "L", &[("L".into(), f), ("envelope".into(), c)], false, false))?;
    let gaps: Vec<(f64, f64)> = rep.ground_l.levels.iter().zip(&rep.gaps_per_level).map(|(a, g)| (a.0 as f64, *g)).collect();
    art.write("gap.svg", &svg::lines("relaxation gap", "cells", "gap", &[("gap".into(), gaps)], true, true))?;
    let mut o = Outcome::default();
    o.check(rep.within_tol, format!("relaxation gap {:e} above {tol:e}", rep.gap));
    Ok(o)
}

enum Built {
    NonPu(Arc<NonPuConstruction>),
    Pu(Arc<crate::constructions::PuConstruction>),
}

const PU_WINDOW: Rect = Rect { x0: -0.25, x1: 1.25, y0: -0.25, y1: 1.25 };

fn build(cfg: &ExperimentConfig) -> RunResult<Built> {
    let omega = cfg.omega()?;
    let samples = cfg.params.samples;
    match cfg.params.construction.as_deref().unwrap_or("nonpu") {
        "pu" => {
            let d = PuConfig::default();
            let pc = PuConfig { depth: cfg.params.depth.unwrap_or(d.depth), samples: samples.unwrap_or(d.samples), seed: cfg.seed, ..d };
            Ok(Built::Pu(Arc::new(build_pu_potential(&omega, &pc)?)))
        }
        _ => {
            let d = NonPuConfig::default();
            let nc = NonPuConfig { depth: cfg.params.depth.unwrap_or(d.depth), samples: samples.unwrap_or(d.samples), seed: cfg.seed, ..d };
            Ok(Built::NonPu(Arc::new(build_nonpu_construction(&omega, &nc)?)))
        }
    }
}

impl Built {
    fn potential(&self) -> Potential {
        match self {
            Built::NonPu(c) => c.potential(),
            Built::Pu(c) => c.potential(PU_WINDOW),
        }
    }

    fn calibrate(&self, cfg: &ExperimentConfig, art: &mut Artifacts, o: &mut Outcome) -> RunResult<Option<CalibratedLagrangian>> {
        let (s, exclusion) = match self {
            Built::NonPu(c) => (c.singular(), c.constants.ell[c.depth()]),
            Built::Pu(c) => (c.singular(), 0.0),
        };
        let n = cfg.params.grid.unwrap_or(200);
        let spec = SamplingSpec { nx: n, ny: n, exclusion, seed: cfg.seed, ..SamplingSpec::default() };
        let omega = match self {
            Built::NonPu(c) => c.omega,
            Built::Pu(c) => c.omega,
        };
        match assemble_calibrated_lagrangian(&self.potential(), &omega, &s, &spec) {
            Ok(cal) => {
                art.json("hypotheses.json", &cal.report)?;
                Ok(Some(cal))
            }
            Err(r) => {
                art.json("hypotheses.json", &r.report)?;
                o.check(false, "pointwise hypotheses fail; Lagrangian refused");
                Ok(None)
            }
        }
    }

    /// Start point and span of the plotted field line.
    fn field_start(&self) -> (f64, f64, (f64, f64)) {
        match self {
            Built::NonPu(c) => (0.5, c.chi1_abs(0.5), (0.4999, 0.5001)),
            Built::Pu(_) => (0.5, 0.5, (0.49, 0.51)),
        }
    }

    fn path_span(&self) -> f64 {
        match self {
            Built::NonPu(_) => 0.01,
            Built::Pu(_) => 0.05,
        }
    }
}

fn potential_dump(phi: &Potential, n: usize) -> (String, String) {
    let region = phi.region();
    let mut csv = String::from("i,j,x,y,phi\n");
    let mut vals = Vec::with_capacity(n * n);
    for (k, (x, y)) in region.grid(n, n).into_iter().enumerate() {
        let v = phi.eval(x, y).unwrap_or(f64::NAN);
        csv.push_str(&format!("{},{},{x:?},{y:?},{v:?}\n", k % n, k / n));
        vals.push(v);
    }
    let svg = svg::heatmap(&format!("potential {}", phi.describe()), n, n, &vals);
    (csv, svg)
}

fn calibrate(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let b = build(cfg)?;
    let mut o = Outcome::default();
    let Some(cal) = b.calibrate(cfg, art, &mut o)? else { return Ok(o) };
    let region = cal.phi.region();
    let span = b.path_span();
    let rep = calibration_inequality_test(&cal, &|rng: &mut ChaCha8Rng| region.random_path(rng, 40, span), cfg.params.paths.unwrap_or(1000), cfg.seed);
    o.check(rep.violations == 0, format!("{} calibration violations", rep.violations));
    o.check(rep.errors == 0, format!("{} paths left the admissible region", rep.errors));
    let (x0, y0, span) = b.field_start();
    let f = integrate_minimizer_field(&cal, x0, y0, span, &FieldOptions::default())?;
    let e = energy(&cal.lagrangian, &f.path)?.total;
    let (a, ya) = f.path.start();
    let (bx, yb) = f.path.end();
    let inc = cal.phi.eval(bx, yb)? - cal.phi.eval(a, ya)?;
    let rel = (e - inc).abs() / inc.abs().max(f64::MIN_POSITIVE);
    o.check(rel <= 1e-2, format!("field energy {e:e} vs potential increment {inc:e}"));
    art.json("calibration.json", &json!({
        "potential": cal.phi.describe(),
        "paths": rep,
        "field": { "start": [x0, y0], "end": [bx, yb], "energy": e, "increment": inc, "relative_error": rel,
                   "truncated": f.truncated, "steps": f.steps, "max_slope": f.max_slope },
    }))?;
    art.write("field.csv", &path_csv(f.path.nodes(), f.path.values()))?;
    let pts: Vec<(f64, f64)> = f.path.nodes().iter().copied().zip(f.path.values().iter().copied()).collect();
    art.write("field.svg", &svg::lines("field trajectory", "x", "y", &[("field line".into(), pts)], false, false))?;
    let (csv, svg) = potential_dump(&cal.phi, 64);
    art.write("potential.csv", &csv)?;
    art.write("potential.svg", &svg)?;
    Ok(o)
}

fn build_nonpu(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let mut c = cfg.clone();
    c.params.construction = Some("nonpu".into());
    let Built::NonPu(nc) = build(&c)? else { unreachable!() };
    let k = &nc.constants;
    art.json("constants.json", &json!({
        "omega": nc.omega.tag(),
        "depth": nc.depth(),
        "A": k.a, "B": k.b, "C": k.c, "C_budget": k.c_budget, "eps": k.eps, "ell": k.ell,
    }))?;
    let mut csv = String::from("k,lambda,log2_ratio,n,rho,kappa,c,a,b,w,s\n");
    for l in &nc.levels {
        csv.push_str(&format!("{},{:e},{},{},{},{},{:e},{},{},{:e},{}\n", l.k, l.lambda, l.log2_ratio, l.n, l.rho, l.kappa, l.c, l.a, l.b, l.w, l.s));
    }
    art.write("levels.csv", &csv)?;
    let f = |q: &num_rational::Ratio<i128>| *q.numer() as f64 / *q.denom() as f64;
    let mut m = String::from("k,t_measure,image_measure,t_measure_f64,image_measure_f64\n");
    for (i, (t, img)) in measures_for_depth(nc.depth())?.iter().enumerate() {
        m.push_str(&format!("{i},{t},{img},{:?},{:?}\n", f(t), f(img)));
    }
    art.write("measures.csv", &m)?;
    let rep = nc.report.as_ref().expect("checked build");
    art.json("checks.json", rep)?;
    let (csv, svg) = potential_dump(&nc.potential(), 64);
    art.write("potential.csv", &csv)?;
    art.write("potential.svg", &svg)?;
    let mut o = Outcome::default();
    for (name, mg) in rep.summary() {
        o.check(mg.pass, format!("{name}: worst margin {:e}", mg.worst));
    }
    Ok(o)
}

fn build_pu(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let mut c = cfg.clone();
    c.params.construction = Some("pu".into());
    let Built::Pu(pc) = build(&c)? else { unreachable!() };
    art.json("constants.json", &json!({ "omega": pc.omega.tag(), "depth": pc.depth(), "constants": pc.constants }))?;
    let mut csv = String::from("k,base_depth,generations,intervals,mass,e_norm,size_bound,eps_prev,p_in,p_between,p_out,nested\n");
    for r in &pc.reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{}\n",
            r.k, r.base_depth, r.generations, r.intervals, r.mass, r.e_norm, r.size_bound, r.eps_prev, r.p_in.worst, r.p_between.worst, r.p_out.worst, r.nested
        ));
    }
    art.write("levels.csv", &csv)?;
    let mut iv = String::from("k,lo,hi\n");
    for layer in &pc.layers {
        for (a, b) in layer.profile.interval_list() {
            iv.push_str(&format!("{},{a:e},{b:e}\n", layer.k));
        }
    }
    art.write("intervals.csv", &iv)?;
    art.json("checks.json", &pc.reports)?;
    let (csv, svg) = potential_dump(&pc.potential(PU_WINDOW), 64);
    art.write("potential.csv", &csv)?;
    art.write("potential.svg", &svg)?;
    let mut o = Outcome::default();
    for r in &pc.reports {
        o.check(r.p_in.pass && r.p_between.pass && r.p_out.pass && r.nested, format!("level {} shell checks", r.k));
    }
    Ok(o)
}

fn regularity(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let l = cfg.lagrangian("quadratic_y")?;
    let k = tonelli_constants(&l, cfg.params.radius.unwrap_or(1.0))?;
    art.json("tonelli.json", &k)?;
    let cases = regularity_sweep(&l, &k, cfg.params.cases.unwrap_or(100), cfg.seed)?;
    let mut csv = String::from("case,a,A,b,B,steep,applicable,violation,excess,steep_energy,margin,reason\n");
    for (i, c) in cases.iter().enumerate() {
        let (p, r) = (&c.problem, &c.report);
        csv.push_str(&format!(
            "{i},{:?},{:?},{:?},{:?},{},{},{},{:e},{:e},{:e},{}\n",
            p.a, p.big_a, p.b, p.big_b, c.steep, r.applicable, r.violation, r.excess, r.steep_energy, r.margin, r.reason.as_deref().unwrap_or("")
        ));
    }
    art.write("regularity.csv", &csv)?;
    let v = cases.iter().filter(|c| c.report.violation).count();
    art.json("summary.json", &json!({
        "cases": cases.len(),
        "applicable": cases.iter().filter(|c| c.report.applicable).count(),
        "violations": v,
    }))?;
    let mut o = Outcome::default();
    o.check(v == 0, format!("{v} regularity violations"));
    Ok(o)
}

fn singular_scan(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<(Outcome, SingularSample)> {
    let p = &cfg.params;
    let levels = p.levels;
    let sample = if p.construction.is_some() {
        let c = ExperimentConfig { params: Params { construction: Some("nonpu".into()), samples: Some(p.samples.unwrap_or(200)), ..p.clone() }, ..cfg.clone() };
        if p.construction.as_deref() == Some("pu") {
            return usage("singular-scan supports the nonpu construction only");
        }
        let b = build(&c)?;
        let mut o = Outcome::default();
        let Built::NonPu(nc) = &b else { unreachable!() };
        let c = ExperimentConfig { params: Params { grid: Some(p.grid.unwrap_or(20)), ..c.params }, ..c };
        let Some(cal) = b.calibrate(&c, art, &mut o)? else { return Ok((o, SingularSample { points: Vec::new(), levels: 0, grid: grid_note(), source: "refused".into() })) };
        let cores = p.cores.clone().unwrap_or(vec![100, 2000, 4100, 7000]);
        let grid = BoundaryGrid { problems: nc.core_starts(&cores)? };
        let src = FieldMinimizers { cal: &cal, opts: FieldOptions::default(), n0: p.cells.unwrap_or(2) };
        sample_singular_points(&src, &grid, &SampleConfig { levels: levels.unwrap_or(3), ..Default::default() })?
    } else {
        let l = cfg.lagrangian("quadratic_y")?;
        let mania = l.name == "mania";
        let bc = p.bc.clone().unwrap_or(vec![0.0, 0.0, 1.0, 1.0]);
        let (left, right) = if mania { (vec![bc[1]], vec![bc[3]]) } else { (vec![-1.0, 0.0, 1.0], vec![-1.0, 0.0, 2.0]) };
        let grid = BoundaryGrid::product(bc[0], bc[2], p.left.as_deref().unwrap_or(&left), p.right.as_deref().unwrap_or(&right))?;
        let n0 = p.cells.unwrap_or(8);
        let plan = if mania { MeshPlan::Graded { n0, ratio: 0.7, extra0: 4, extra_step: 4 } } else { MeshPlan::Uniform { n0 } };
        let src = DirectMinimizers { l: &l, cfg: cfg.minimize_config(), plan };
        sample_singular_points(&src as &dyn RefinedMinimizers, &grid, &SampleConfig { levels: levels.unwrap_or(4), ..Default::default() })?
    };
    art.write("points.csv", &sample.to_csv())?;
    art.json("sample.json", &sample)?;
    let pts: Vec<(f64, f64)> = sample.points.iter().map(|q| (q.x, q.y)).collect();
    art.write("points.svg", &svg::scatter("blow-up candidates", "x", "y", &pts))?;
    Ok((Outcome::default(), sample))
}

fn grid_note() -> String {
    "none".into()
}

fn probe(cfg: &ExperimentConfig, art: &mut Artifacts) -> RunResult<Outcome> {
    let (mut o, sample) = singular_scan(cfg, art)?;
    let gammas = cfg.params.gammas.clone().unwrap_or(vec![1e-2, 1e-3, 1e-4, 1e-5]);
    let rep = lipschitz_intersection_probe(&sample, cfg.params.curves.unwrap_or(64), cfg.params.lip.unwrap_or(1.0), &gammas, cfg.seed);
    art.write("decay.csv", &rep.to_csv())?;
    art.json("probe.json", &rep)?;
    let g = |f: fn(&crate::regularity::ProbeRow) -> f64| rep.rows.iter().map(|r| (r.gamma, f(r))).collect::<Vec<_>>();
    let series = vec![("graphs mean".to_string(), g(|r| r.graphs_mean)), ("vertical mean".to_string(), g(|r| r.vertical_mean))];
    art.write("decay.svg", &svg::lines("intersection measure of gamma-neighbourhoods", "gamma", "measure", &series, true, true))?;
    o.check(rep.monotone, "intersection measures do not decay monotonically");
    Ok(o)
}

fn path_csv(xs: &[f64], ys: &[f64]) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in xs.iter().zip(ys) {
        s.push_str(&format!("{x:?},{y:?}\n"));
    }
    s
}

/// Minimal deterministic SVG charts.
mod svg {
    use std::fmt::Write;

    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

    fn header(title: &str) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            W / 2.0,
            escape(title)
        )
    }

    fn escape(s: &str) -> String {
        s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }

    struct Axis {
        lo: f64,
        hi: f64,
        log: bool,
    }

    impl Axis {
        fn fit(vals: impl Iterator<Item = f64>, log: bool) -> Axis {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in vals {
                let v = if log { v.log10() } else { v };
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if !lo.is_finite() {
                (lo, hi) = (0.0, 1.0);
            }
            if hi - lo < 1e-300_f64.max(1e-12 * hi.abs()) {
                (lo, hi) = (lo - 0.5, hi + 0.5);
            }
            Axis { lo, hi, log }
        }

        fn unit(&self, v: f64) -> f64 {
            let v = if self.log { v.log10() } else { v };
            (v - self.lo) / (self.hi - self.lo)
        }

        fn label(&self, u: f64) -> String {
            let v = self.lo + u * (self.hi - self.lo);
            if self.log {
                format!("1e{v:.1}")
            } else {
                format!("{v:.3e}")
            }
        }
    }

    fn usable(p: &(f64, f64), lx: bool, ly: bool) -> bool {
        p.0.is_finite() && p.1.is_finite() && (!lx || p.0 > 0.0) && (!ly || p.1 > 0.0)
    }

    fn frame(s: &mut String, ax: &Axis, ay: &Axis, xlabel: &str, ylabel: &str) {
        let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, H - PAD, PAD / 2.0);
        let _ = writeln!(s, "<rect x=\"{x0}\" y=\"{y1}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>", x1 - x0, y0 - y1);
        for k in 0..=4 {
            let u = k as f64 / 4.0;
            let px = x0 + u * (x1 - x0);
            let py = y0 - u * (y0 - y1);
            let _ = writeln!(s, "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", y0 + 16.0, ax.label(u));
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 4.0, py + 4.0, ay.label(u));
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 12.0, escape(xlabel));
        let _ = writeln!(s, "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{}</text>", (y0 + y1) / 2.0, (y0 + y1) / 2.0, escape(ylabel));
    }

    fn to_px(ax: &Axis, ay: &Axis, p: (f64, f64)) -> (f64, f64) {
        let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, H - PAD, PAD / 2.0);
        (x0 + ax.unit(p.0) * (x1 - x0), y0 - ay.unit(p.1) * (y0 - y1))
    }

    pub fn lines(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)], logx: bool, logy: bool) -> String {
        let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| usable(p, logx, logy)).collect();
        let ax = Axis::fit(all.iter().map(|p| p.0), logx);
        let ay = Axis::fit(all.iter().map(|p| p.1), logy);
        let mut s = header(title);
        frame(&mut s, &ax, &ay, xlabel, ylabel);
        for (k, (name, pts)) in series.iter().enumerate() {
            let c = COLORS[k % COLORS.len()];
            let coords: Vec<String> = pts
                .iter()
                .filter(|p| usable(p, logx, logy))
                .map(|&p| {
                    let (x, y) = to_px(&ax, &ay, p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", coords.join(" "));
            for pt in &coords {
                let (x, y) = pt.split_once(',').unwrap();
                let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{c}\"/>");
            }
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{c}\">{}</text>", W - PAD / 2.0 - 150.0, PAD / 2.0 + 16.0 * (k as f64 + 1.0), escape(name));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn scatter(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)]) -> String {
        let ok: Vec<(f64, f64)> = pts.iter().copied().filter(|p| usable(p, false, false)).collect();
        let ax = Axis::fit(ok.iter().map(|p| p.0), false);
        let ay = Axis::fit(ok.iter().map(|p| p.1), false);
        let mut s = header(title);
        frame(&mut s, &ax, &ay, xlabel, ylabel);
        for &p in &ok {
            let (x, y) = to_px(&ax, &ay, p);
            let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\"/>", COLORS[1]);
        }
        if ok.is_empty() {
            let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no points</text>", W / 2.0, H / 2.0);
        }
        s.push_str("</svg>\n");
        s
    }

    fn ramp(u: f64) -> String {
        const STOPS: [(f64, f64, f64); 5] = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
        let t = u.clamp(0.0, 1.0) * 4.0;
        let i = (t.floor() as usize).min(3);
        let f = t - i as f64;
        let (a, b) = (STOPS[i], STOPS[i + 1]);
        let m = |x: f64, y: f64| (x + f * (y - x)).round() as u8;
        format!("#{:02x}{:02x}{:02x}", m(a.0, b.0), m(a.1, b.1), m(a.2, b.2))
    }

    /// Row-major `values[j * nx + i]` in region unit coordinates; NaN cells are grey.
    pub fn heatmap(title: &str, nx: usize, ny: usize, values: &[f64]) -> String {
        let (lo, hi) = values.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut s = header(title);
        let (x0, y0) = (PAD, PAD / 2.0);
        let (w, h) = (W - 1.5 * PAD, H - 1.5 * PAD);
        let (cw, ch) = (w / nx as f64, h / ny as f64);
        for j in 0..ny {
            for i in 0..nx {
                let v = values[j * nx + i];
                let fill = if v.is_finite() { ramp((v - lo) / span) } else { "#bbbbbb".into() };
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                    x0 + i as f64 * cw,
                    y0 + h - (j + 1) as f64 * ch,
                    cw + 0.05,
                    ch + 0.05
                );
            }
        }
        if lo.is_finite() {
            let _ = writeln!(s, "<text x=\"{x0}\" y=\"{:.1}\">min {lo:.4e}, max {hi:.4e}</text>", H - 12.0);
        }
        s.push_str("</svg>\n");
        s
    }
}
