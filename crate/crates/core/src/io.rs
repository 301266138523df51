//! Experiment specs, deterministic output files and the run dispatcher.
//!
//! A spec is a TOML document. After parsing, every optional field is
//! resolved to a concrete value, so the spec hash (SHA-256 of the canonical
//! JSON form, without `output_dir` and `threads`) identifies the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::ensemble::with_threads;
use crate::error::{Error, Result};
use crate::estimators::{DerivativeField, DerivativeSettings, JACKKNIFE_GROUPS, MAX_BINS, N_MIN};
use crate::field::{self, FieldCheckConfig};
use crate::harness::{
    compare_velocity_profiles, decoupling_experiment, node_crossing, run_beta_sweep, run_simulation,
    two_time_expectation, DecouplingConfig, MeasurementPlan, NodeCrossingConfig, Observable, RunFields,
    SimulationConfig, StateProcess, SweepConfig, TwoTimeConfig,
};
use crate::process::{ProcessKind, VelocityFamily, VelocityInitProfile};
use crate::quantum::{StateParams, CATALOG};
use crate::sde::{self, IntegratorConfig, MAX_DT_BETA};

/// Default output root when the spec does not name one.
pub const OUT_ENV: &str = "NELSONLAB_OUT";
pub const DEFAULT_OUT: &str = "nelsonlab-out";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Ou,
    Simulate,
    BetaSweep,
    VelocityProfiles,
    TwoTime,
    Decoupling,
    Field,
    Spectrum,
    NodeCrossing,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Ou,
        ExperimentKind::Simulate,
        ExperimentKind::BetaSweep,
        ExperimentKind::VelocityProfiles,
        ExperimentKind::TwoTime,
        ExperimentKind::Decoupling,
        ExperimentKind::Field,
        ExperimentKind::Spectrum,
        ExperimentKind::NodeCrossing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ou => "ou",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::BetaSweep => "beta_sweep",
            ExperimentKind::VelocityProfiles => "velocity_profiles",
            ExperimentKind::TwoTime => "two_time",
            ExperimentKind::Decoupling => "decoupling",
            ExperimentKind::Field => "field",
            ExperimentKind::Spectrum => "spectrum",
            ExperimentKind::NodeCrossing => "node_crossing",
        }
    }

    fn default_state(self) -> &'static str {
        match self {
            ExperimentKind::TwoTime | ExperimentKind::Decoupling => "two_particle_gaussian",
            ExperimentKind::NodeCrossing => "ho_superposition_01",
            _ => "ho_ground",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Constants {
    pub hbar: f64,
    pub mass: f64,
    pub omega: f64,
    pub sigma0: f64,
    pub x0: f64,
    pub p0: f64,
    pub kappa: f64,
    /// Noise amplitude; must equal `sqrt(hbar / mass)`.
    pub eps: Option<f64>,
    pub xi: f64,
    #[serde(rename = "G")]
    pub g: f64,
    pub field_mass: f64,
    pub box_length: f64,
}

impl Default for Constants {
    fn default() -> Self {
        let p = StateParams::default();
        Self {
            hbar: p.hbar,
            mass: p.mass,
            omega: p.omega,
            sigma0: p.sigma0,
            x0: p.x0,
            p0: p.p0,
            kappa: p.kappa,
            eps: None,
            xi: 1.0,
            g: 1.0 / (4.0 * std::f64::consts::PI),
            field_mass: 1.0,
            box_length: 10.0,
        }
    }
}

impl Constants {
    pub fn state_params(&self) -> StateParams {
        StateParams {
            mass: self.mass,
            omega: self.omega,
            hbar: self.hbar,
            sigma0: self.sigma0,
            x0: self.x0,
            p0: self.p0,
            kappa: self.kappa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSpec {
    pub delta: f64,
    pub window: f64,
    pub max_bins: usize,
    pub n_min: usize,
    pub groups: usize,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            delta: 0.02,
            window: 0.4,
            max_bins: MAX_BINS,
            n_min: N_MIN,
            groups: JACKKNIFE_GROUPS,
        }
    }
}

impl EstimatorSpec {
    pub fn settings(&self) -> DerivativeSettings {
        DerivativeSettings {
            delta: self.delta,
            window: self.window,
            n_min: self.n_min,
            groups: self.groups,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VelocitySpec {
    pub family: VelocityFamily,
    pub spread: f64,
}

impl Default for VelocitySpec {
    fn default() -> Self {
        Self {
            family: VelocityFamily::GaussianAboutB,
            spread: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuSpec {
    /// `dt = dt_beta / beta` for each beta.
    pub dt_beta: f64,
    pub n_paths: usize,
    pub path_steps: usize,
}

impl Default for OuSpec {
    fn default() -> Self {
        Self {
            dt_beta: 0.05,
            n_paths: 2000,
            path_steps: 20_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementSpec {
    pub measured: usize,
    pub t1: f64,
    pub t2: f64,
    pub f: Observable,
    pub g: Observable,
    pub collapse: bool,
    pub grid_n: usize,
    pub grid_length: f64,
    pub width: Option<f64>,
    pub strata: usize,
    pub quantum_dt: f64,
}

impl Default for MeasurementSpec {
    fn default() -> Self {
        let c = TwoTimeConfig::default();
        Self {
            measured: 0,
            t1: 0.5,
            t2: 2.0,
            f: Observable::identity(),
            g: Observable::identity(),
            collapse: true,
            grid_n: c.grid_n,
            grid_length: c.grid_length,
            width: None,
            strata: c.strata,
            quantum_dt: c.quantum_dt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecouplingSpec {
    pub correlated: bool,
    pub t0: f64,
    pub smoothing: Option<f64>,
    pub swap_noise: bool,
    pub checkpoints: usize,
}

impl Default for DecouplingSpec {
    fn default() -> Self {
        let c = DecouplingConfig::default();
        Self {
            correlated: c.correlated,
            t0: c.t0,
            smoothing: c.smoothing,
            swap_noise: c.swap_noise,
            checkpoints: c.checkpoints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeSpec {
    pub dts: Vec<f64>,
    pub eta: f64,
}

impl Default for NodeSpec {
    fn default() -> Self {
        let c = NodeCrossingConfig::default();
        Self { dts: c.dts, eta: c.eta }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSpec {
    pub mode_counts: Vec<usize>,
    pub noise_time: f64,
    pub noise_traj: usize,
    pub variance_modes: usize,
    pub variance_time: f64,
    pub variance_traj: usize,
    pub equivalence_traj: usize,
    pub equivalence_horizon: f64,
    /// Points of the exported field snapshot.
    pub snapshot_points: usize,
}

impl Default for FieldSpec {
    fn default() -> Self {
        let c = FieldCheckConfig::default();
        Self {
            mode_counts: c.mode_counts,
            noise_time: c.noise_time,
            noise_traj: c.noise_traj,
            variance_modes: c.variance_modes,
            variance_time: c.variance_time,
            variance_traj: c.variance_traj,
            equivalence_traj: c.equivalence_traj,
            equivalence_horizon: c.equivalence_horizon,
            snapshot_points: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectrumSpec {
    pub k: Vec<f64>,
    pub t: f64,
    /// Matter spectrum `|k|^index` of the Poisson round trip.
    pub index: f64,
    pub grid_n: usize,
    pub length: f64,
    pub realizations: usize,
    pub bands: usize,
}

impl Default for SpectrumSpec {
    fn default() -> Self {
        Self {
            k: vec![0.5, 1.0, 2.0, 4.0],
            t: 1.0,
            index: 1.0,
            grid_n: 1024,
            length: 100.0,
            realizations: 1000,
            bands: 32,
        }
    }
}

/// A complete experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub state: Option<String>,
    pub process: Option<ProcessKind>,
    pub seed: u64,
    pub betas: Option<Vec<f64>>,
    pub n_traj: Option<usize>,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    /// Marginal checkpoints of `simulate`.
    pub checkpoints: usize,
    /// Also run each sweep point at `dt / 2`.
    pub dt_halving: bool,
    pub constants: Constants,
    pub estimator: EstimatorSpec,
    pub velocity: VelocitySpec,
    pub ou: OuSpec,
    pub measurement: MeasurementSpec,
    pub decoupling: DecouplingSpec,
    pub node: NodeSpec,
    pub field: FieldSpec,
    pub spectrum: SpectrumSpec,
    pub output_dir: Option<String>,
    pub threads: Option<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Simulate,
            state: None,
            process: None,
            seed: 7,
            betas: None,
            n_traj: None,
            dt: None,
            horizon: None,
            checkpoints: 5,
            dt_halving: false,
            constants: Constants::default(),
            estimator: EstimatorSpec::default(),
            velocity: VelocitySpec::default(),
            ou: OuSpec::default(),
            measurement: MeasurementSpec::default(),
            decoupling: DecouplingSpec::default(),
            node: NodeSpec::default(),
            field: FieldSpec::default(),
            spectrum: SpectrumSpec::default(),
            output_dir: None,
            threads: None,
        }
    }
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    /// Fills every unset field with the kind's default.
    pub fn resolve(mut self) -> Self {
        use ExperimentKind as K;
        let k = self.kind;
        self.state.get_or_insert_with(|| k.default_state().to_string());
        self.process.get_or_insert(match k {
            K::BetaSweep | K::VelocityProfiles | K::Decoupling | K::Field => ProcessKind::PhaseSpace,
            _ => ProcessKind::NelsonWhite,
        });
        self.betas.get_or_insert_with(|| match k {
            K::Ou => vec![5.0, 20.0, 100.0],
            K::BetaSweep => vec![10.0, 30.0, 100.0],
            K::Field => vec![1000.0],
            _ => vec![100.0],
        });
        self.n_traj.get_or_insert(match k {
            K::TwoTime => TwoTimeConfig::default().n_traj,
            K::Decoupling => DecouplingConfig::default().n_traj,
            K::NodeCrossing => NodeCrossingConfig::default().n_traj,
            _ => 100_000,
        });
        self.dt.get_or_insert(match k {
            K::Field => 1e-4,
            _ => 1e-3,
        });
        self.horizon.get_or_insert(match k {
            K::NodeCrossing => NodeCrossingConfig::default().horizon,
            _ => 2.0,
        });
        self
    }

    pub fn state(&self) -> &str {
        self.state.as_deref().unwrap_or(self.kind.default_state())
    }

    pub fn process(&self) -> ProcessKind {
        self.process.unwrap_or(ProcessKind::NelsonWhite)
    }

    pub fn betas(&self) -> &[f64] {
        self.betas.as_deref().unwrap_or(&[])
    }

    pub fn n_traj(&self) -> usize {
        self.n_traj.unwrap_or(0)
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(f64::NAN)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon.unwrap_or(f64::NAN)
    }

    pub fn profile(&self) -> Result<VelocityInitProfile> {
        VelocityInitProfile::new(self.velocity.family, self.velocity.spread)
    }

    /// Kinds whose runs drive colored noise with the listed betas.
    fn uses_colored_noise(&self) -> bool {
        use ExperimentKind as K;
        match self.kind {
            K::BetaSweep | K::VelocityProfiles | K::Decoupling | K::Field => true,
            K::Simulate => self.process().is_colored(),
            _ => false,
        }
    }

    /// Checks the numerical and physical constraints.
    pub fn validate(&self) -> Result<()> {
        use ExperimentKind as K;
        let c = &self.constants;
        for (name, v) in [("hbar", c.hbar), ("mass", c.mass), ("omega", c.omega), ("sigma0", c.sigma0)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("constants.{name} must be > 0, got {v}")));
            }
        }
        let eps = (c.hbar / c.mass).sqrt();
        if let Some(e) = c.eps {
            if !((e - eps).abs() <= 1e-12 * eps) {
                return Err(Error::config(format!(
                    "constants.eps = {e} violates eps = sqrt(hbar/mass) = {eps}"
                )));
            }
        }
        let dt = self.dt();
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config(format!("dt must be > 0, got {dt}")));
        }
        let h = self.horizon();
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::config(format!("horizon must be > 0, got {h}")));
        }
        if self.n_traj() == 0 {
            return Err(Error::config("n_traj must be > 0"));
        }
        let betas = self.betas();
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::config("betas must be a non-empty list of positive numbers"));
        }
        if self.uses_colored_noise() {
            for &b in betas {
                sde::check_resolution(dt, b)?;
            }
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::config(format!("seed must fit a signed 64-bit integer, got {}", self.seed)));
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(Error::config("threads must be >= 1"));
            }
        }
        let state = self.state();
        match self.kind {
            K::Simulate | K::BetaSweep | K::VelocityProfiles => {
                if !CATALOG.contains(&state) || state == "two_particle_gaussian" {
                    return Err(Error::config(format!("{} needs a one-particle catalog state, got '{state}'", self.kind.name())));
                }
            }
            K::TwoTime | K::Decoupling if state != "two_particle_gaussian" => {
                return Err(Error::config(format!("{} runs on two_particle_gaussian", self.kind.name())));
            }
            K::NodeCrossing if state != "ho_superposition_01" => {
                return Err(Error::config("node_crossing runs on ho_superposition_01"));
            }
            _ => {}
        }
        match self.kind {
            K::BetaSweep => {
                if !matches!(self.process(), ProcessKind::PhaseSpace | ProcessKind::ColoredSmoothing) {
                    return Err(Error::config("beta_sweep takes process = phase_space or colored_smoothing"));
                }
                if betas.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::config("beta_sweep betas must be strictly ascending"));
                }
            }
            K::Simulate if self.process() == ProcessKind::PhaseSpaceMulti => {
                return Err(Error::config("simulate takes a one-particle process"));
            }
            K::Ou => {
                if !(self.ou.dt_beta > 0.0 && self.ou.dt_beta <= MAX_DT_BETA) {
                    return Err(Error::config(format!("ou.dt_beta must be in (0, {MAX_DT_BETA}]")));
                }
            }
            K::NodeCrossing => {
                if self.node.dts.is_empty() || self.node.dts.iter().any(|d| !(*d > 0.0)) {
                    return Err(Error::config("node.dts must be positive"));
                }
            }
            K::Spectrum => {
                let s = &self.spectrum;
                if s.k.iter().any(|k| *k == 0.0) {
                    return Err(Error::config("spectrum.k must not contain 0 (undefined Poisson zero mode)"));
                }
                if self.constants.xi == 0.0 || !(self.constants.g > 0.0) {
                    return Err(Error::config("spectrum needs xi != 0 and G > 0"));
                }
            }
            _ => {}
        }
        self.profile()?;
        Ok(())
    }

    /// Canonical JSON form: resolved, without the output location and
    /// thread count.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone().resolve();
        c.output_dir = None;
        c.threads = None;
        serde_json::to_string(&c).expect("spec serializes")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

// ---------------------------------------------------------------- parsing

/// Applies `key=value` overrides (dotted keys; the value is read as a TOML
/// literal, or as a string when it does not parse as one).
pub fn apply_overrides(doc: &mut toml::Table, sets: &[String]) -> Result<()> {
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override '{s}' is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse(format!("override '{s}' has an empty key")));
        }
        let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(raw.trim().to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let mut table = &mut *doc;
        for p in &parts[..parts.len() - 1] {
            let entry = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| Error::Parse(format!("override '{key}': '{p}' is not a table")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

/// Parses, overrides, defaults and validates a spec document.
pub fn parse_spec_with(text: &str, sets: &[String]) -> Result<ExperimentSpec> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.message().to_string()))?;
    apply_overrides(&mut doc, sets)?;
    let text = toml::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))?;
    let mut unknown = Vec::new();
    let de = toml::Deserializer::new(&text);
    let spec: ExperimentSpec = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| Error::Parse(e.message().to_string()))?;
    if !unknown.is_empty() {
        unknown.sort();
        return Err(Error::UnknownKeys(unknown));
    }
    let spec = spec.resolve();
    spec.validate()?;
    Ok(spec)
}

pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    parse_spec_with(text, &[])
}

// ---------------------------------------------------------------- columnar files

/// Shortest round-trip decimal form of a float.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnarOutput {
    pub spec_hash: String,
    pub columns: Vec<String>,
    pub units: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ColumnarOutput {
    pub fn new(spec_hash: &str, cols: &[(&str, &str)]) -> Self {
        Self {
            spec_hash: spec_hash.to_string(),
            columns: cols.iter().map(|c| c.0.to_string()).collect(),
            units: cols.iter().map(|c| c.1.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "# spec_hash={} columns={} units={}\n",
            self.spec_hash,
            self.columns.join(","),
            self.units.join(",")
        );
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(|x| fmt_f64(*x)).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn parse_columnar(text: &str) -> Result<ColumnarOutput> {
    let mut lines = text.lines();
    let head = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| Error::Parse("missing '# spec_hash=...' header".into()))?;
    let mut hash = None;
    let mut cols = None;
    let mut units = None;
    for part in head.split(' ') {
        match part.split_once('=') {
            Some(("spec_hash", v)) => hash = Some(v.to_string()),
            Some(("columns", v)) => cols = Some(v.split(',').map(str::to_string).collect::<Vec<_>>()),
            Some(("units", v)) => units = Some(v.split(',').map(str::to_string).collect::<Vec<_>>()),
            _ => return Err(Error::Parse(format!("bad header field '{part}'"))),
        }
    }
    let (hash, cols, units) = match (hash, cols, units) {
        (Some(h), Some(c), Some(u)) if c.len() == u.len() => (h, c, u),
        _ => return Err(Error::Parse("header needs spec_hash, columns and matching units".into())),
    };
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        if l.is_empty() {
            continue;
        }
        let row: Vec<f64> = l
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
        if row.len() != cols.len() {
            return Err(Error::Parse(format!("row {} has {} fields, expected {}", i + 1, row.len(), cols.len())));
        }
        rows.push(row);
    }
    Ok(ColumnarOutput {
        spec_hash: hash,
        columns: cols,
        units,
        rows,
    })
}

pub fn read_columnar(path: &Path) -> Result<ColumnarOutput> {
    parse_columnar(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------- running

/// Files of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub spec_hash: String,
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

struct Outputs {
    hash: String,
    csv: Vec<(String, ColumnarOutput)>,
}

impl Outputs {
    fn table(&mut self, name: &str, cols: &[(&str, &str)]) -> &mut ColumnarOutput {
        self.csv.push((name.to_string(), ColumnarOutput::new(&self.hash, cols)));
        &mut self.csv.last_mut().unwrap().1
    }
}

pub fn output_root(spec: &ExperimentSpec) -> PathBuf {
    match &spec.output_dir {
        Some(d) => PathBuf::from(d),
        None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
    }
}

pub fn run_dir(spec: &ExperimentSpec) -> PathBuf {
    output_root(spec).join(format!("{}-{}", spec.kind.name(), &spec.hash()[..12]))
}

/// Runs the experiment and writes `spec.toml`, `summary.json`, the CSV
/// tables and `timing.json` (the only file that varies between reruns)
/// into `<root>/<kind>-<hash12>/`. On failure the directory is removed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunOutput> {
    let spec = spec.clone().resolve();
    spec.validate()?;
    let hash = spec.hash();
    let dir = run_dir(&spec);
    let start = Instant::now();
    let mut out = Outputs {
        hash: hash.clone(),
        csv: Vec::new(),
    };
    let result = with_threads(spec.threads, || dispatch(&spec, &mut out));
    let body = match result {
        Ok(b) => b,
        Err(e) => return Err(e),
    };
    let wall = start.elapsed().as_secs_f64();
    let write = || -> Result<Vec<PathBuf>> {
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        let mut files = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text)?;
            files.push(p);
            Ok(())
        };
        let mut canon = spec.clone();
        canon.output_dir = None;
        canon.threads = None;
        put("spec.toml", canon.to_toml()?)?;
        let summary = json!({
            "spec_hash": hash,
            "kind": spec.kind.name(),
            "result": body,
        });
        put("summary.json", serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))? + "\n")?;
        for (name, t) in &out.csv {
            put(&format!("{name}.csv"), t.render())?;
        }
        put(
            "timing.json",
            serde_json::to_string_pretty(&json!({ "spec_hash": hash, "wall_seconds": wall })).unwrap() + "\n",
        )?;
        Ok(files)
    };
    match write() {
        Ok(files) => Ok(RunOutput {
            summary: json!({ "spec_hash": hash, "kind": spec.kind.name(), "result": body }),
            dir,
            spec_hash: hash,
            files,
        }),
        Err(e) => {
            let _ = fs::remove_dir_all(&dir);
            Err(e)
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report serializes")
}

fn dispatch(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    use ExperimentKind as K;
    let module = match spec.kind {
        K::Ou => "sde-core",
        K::Field | K::Spectrum => "field-sim",
        _ => "harness",
    };
    let r = match spec.kind {
        K::Ou => run_ou(spec, out),
        K::Simulate => run_simulate(spec, out),
        K::BetaSweep => run_sweep(spec, out),
        K::VelocityProfiles => run_profiles(spec, out),
        K::TwoTime => run_two_time(spec, out),
        K::Decoupling => run_decoupling(spec, out),
        K::Field => run_field(spec, out),
        K::Spectrum => run_spectrum(spec, out),
        K::NodeCrossing => run_node(spec, out),
    };
    r.map_err(|e| e.in_module(module))
}

fn run_ou(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let mut reports = Vec::new();
    for (i, &b) in spec.betas().iter().enumerate() {
        let dt = spec.ou.dt_beta / b;
        reports.push(sde::ou_law(b, dt, spec.ou.n_paths, spec.ou.path_steps, spec.seed + i as u64)?);
    }
    let t = out.table(
        "ou",
        &[
            ("beta", "1/time"),
            ("dt", "time"),
            ("variance", "1/time"),
            ("variance_se", "1/time"),
            ("target_variance", "1/time"),
            ("decay_rate", "1/time"),
            ("decay_rate_se", "1/time"),
            ("effective_samples", "count"),
        ],
    );
    for r in &reports {
        t.push(vec![
            r.beta,
            r.dt,
            r.variance,
            r.variance_se,
            r.target_variance,
            r.decay_rate,
            r.decay_rate_se,
            r.effective_samples,
        ]);
    }
    let pass = reports
        .iter()
        .all(|r| r.variance_rel_error.abs() <= 0.05 && r.rate_rel_error.abs() <= 0.10 && r.effective_samples >= 1e6);
    Ok(json!({
        "reports": to_value(&reports),
        "variance_within_5pct_and_rate_within_10pct": pass,
        "note": sde::OU_LAW_NOTE,
    }))
}

fn sim_config(spec: &ExperimentSpec, kind: ProcessKind, beta: Option<f64>) -> Result<SimulationConfig> {
    let mut c = SimulationConfig::new(spec.state(), kind, beta);
    c.params = spec.constants.state_params();
    c.dt = spec.dt();
    c.horizon = spec.horizon();
    c.n_traj = spec.n_traj();
    c.seed = spec.seed;
    c.profile = spec.profile()?;
    c.derivatives = spec.estimator.settings();
    c.max_bins = spec.estimator.max_bins;
    c.checkpoints = spec.checkpoints;
    Ok(c)
}

const FIELD_COLS: [(&str, &str); 14] = [
    ("beta", "1/time"),
    ("bin_center", "length"),
    ("position", "length"),
    ("count", "count"),
    ("forward", "length/time"),
    ("forward_se", "length/time"),
    ("backward", "length/time"),
    ("backward_se", "length/time"),
    ("acceleration", "length/time^2"),
    ("acceleration_se", "length/time^2"),
    ("drift_estimate", "length/time"),
    ("drift_estimate_se", "length/time"),
    ("oracle_drift", "length/time"),
    ("force", "length/time^2"),
];

fn push_fields(t: &mut ColumnarOutput, beta: f64, f: &RunFields, sp: &StateProcess) {
    let centers = f.acceleration.centers();
    let nan_or = |d: Option<&DerivativeField>, j: usize| -> (f64, f64) {
        match d {
            Some(d) if d.reliable[j] => (d.estimate[j], d.stderr[j]),
            _ => (f64::NAN, f64::NAN),
        }
    };
    for j in 0..centers.len() {
        let x = f.acceleration.position[j];
        let (fw, fws) = nan_or(Some(&f.forward), j);
        let (bw, bws) = nan_or(f.backward.as_ref(), j);
        let (ac, acs) = nan_or(Some(&f.acceleration), j);
        let (de, des) = nan_or(Some(&f.drift_estimate), j);
        t.push(vec![
            beta,
            centers[j],
            x,
            f.acceleration.count[j] as f64,
            fw,
            fws,
            bw,
            bws,
            ac,
            acs,
            de,
            des,
            sp.drift_at(x, f.acceleration.t),
            sp.force(x),
        ]);
    }
}

fn run_simulate(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let kind = spec.process();
    let beta = kind.is_colored().then(|| spec.betas()[0]);
    let c = sim_config(spec, kind, beta)?;
    let r = run_simulation(&c)?;
    let t = out.table(
        "checkpoints",
        &[
            ("t", "time"),
            ("distance_l1", "1"),
            ("distance_l1_se", "1"),
            ("distance_w1", "length"),
            ("distance_w1_se", "length"),
            ("mean", "length"),
            ("variance", "length^2"),
            ("variance_se", "length^2"),
            ("oracle_mean", "length"),
            ("oracle_variance", "length^2"),
        ],
    );
    for k in &r.checkpoints {
        t.push(vec![
            k.t,
            k.distance_l1,
            k.distance_l1_se,
            k.distance_w1,
            k.distance_w1_se,
            k.mean,
            k.variance,
            k.variance_se,
            k.oracle_mean,
            k.oracle_variance,
        ]);
    }
    let t = out.table("marginals", &[("t", "time"), ("x", "length"), ("empirical", "1/length"), ("oracle", "1/length")]);
    for m in &r.marginals {
        for i in 0..m.oracle.grid.n {
            t.push(vec![m.t, m.oracle.grid.point(i), m.empirical.values[i], m.oracle.values[i]]);
        }
    }
    if let Some(f) = &r.fields {
        let sp = StateProcess::new(&c.state, &c.params, c.horizon)?;
        let t = out.table("fields", &FIELD_COLS);
        push_fields(t, beta.unwrap_or(f64::INFINITY), f, &sp);
    }
    let a = &r.analysis;
    Ok(json!({
        "report": to_value(&r),
        "escaped": a.escaped,
        "max_checkpoint_l1": r.checkpoints.iter().map(|c| c.distance_l1).fold(0.0, f64::max),
        "residual_within_3_pooled_se": a.residual_norm < 3.0 * a.residual_pooled_se,
    }))
}

fn run_sweep(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let mut c = SweepConfig::new(spec.state(), spec.process(), spec.betas().to_vec());
    c.params = spec.constants.state_params();
    c.dt = spec.dt();
    c.horizon = spec.horizon();
    c.n_traj = spec.n_traj();
    c.seed = spec.seed;
    c.profile = spec.profile()?;
    c.derivatives = spec.estimator.settings();
    c.max_bins = spec.estimator.max_bins;
    c.dt_halving = spec.dt_halving;
    let r = run_beta_sweep(&c)?;
    let t = out.table(
        "sweep",
        &[
            ("beta", "1/time"),
            ("distance_l1", "1"),
            ("distance_l1_se", "1"),
            ("distance_w1", "length"),
            ("distance_w1_se", "length"),
            ("residual_norm", "length/time^2"),
            ("residual_norm_se", "length/time^2"),
            ("residual_pooled_se", "length/time^2"),
            ("residual_norm_half_delta", "length/time^2"),
            ("acceleration_slope", "1/time^2"),
            ("acceleration_slope_se", "1/time^2"),
            ("drift_mismatch", "length/time"),
            ("drift_mismatch_se", "length/time"),
            ("quantum_force_norm", "length/time^2"),
            ("distance_l1_half_dt", "1"),
            ("escaped", "count"),
            ("t_final", "time"),
            ("t_eval", "time"),
        ],
    );
    for w in &r.rows {
        t.push(vec![
            w.beta,
            w.distance_l1,
            w.distance_l1_se,
            w.distance_w1,
            w.distance_w1_se,
            w.residual_norm,
            w.residual_norm_se,
            w.residual_pooled_se,
            w.residual_norm_half_delta,
            w.acceleration_slope,
            w.acceleration_slope_se,
            w.drift_mismatch,
            w.drift_mismatch_se,
            w.quantum_force_norm,
            w.distance_l1_half_dt.unwrap_or(f64::NAN),
            w.escaped as f64,
            w.t_final,
            w.t_eval,
        ]);
    }
    let sp = StateProcess::new(&c.state, &c.params, c.horizon)?;
    let t = out.table("fields", &FIELD_COLS);
    for (b, f) in &r.fields {
        push_fields(t, *b, f, &sp);
    }
    Ok(json!({
        "report": to_value(&r),
        "escaped": r.rows.iter().map(|w| w.escaped).sum::<usize>(),
        "distance_non_increasing": r.non_increasing("distance_l1"),
        "drift_mismatch_non_increasing": r.non_increasing("drift_mismatch"),
    }))
}

fn run_profiles(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let mut rows = Vec::new();
    for &b in spec.betas() {
        rows.push(compare_velocity_profiles(
            spec.state(),
            &spec.constants.state_params(),
            b,
            spec.velocity.spread,
            spec.dt(),
            spec.horizon(),
            spec.n_traj(),
            spec.seed,
        )?);
    }
    let t = out.table(
        "profiles",
        &[
            ("beta", "1/time"),
            ("spread", "length/time"),
            ("mean_gaussian", "length"),
            ("mean_gaussian_se", "length"),
            ("mean_two_point", "length"),
            ("mean_two_point_se", "length"),
            ("variance_gaussian", "length^2"),
            ("variance_gaussian_se", "length^2"),
            ("variance_two_point", "length^2"),
            ("variance_two_point_se", "length^2"),
            ("ks_statistic", "1"),
            ("ks_p", "1"),
            ("l1_between", "1"),
        ],
    );
    for r in &rows {
        t.push(vec![
            r.beta,
            r.spread,
            r.mean[0],
            r.mean_se[0],
            r.mean[1],
            r.mean_se[1],
            r.variance[0],
            r.variance_se[0],
            r.variance[1],
            r.variance_se[1],
            r.ks_statistic,
            r.ks_p,
            r.l1_between,
        ]);
    }
    Ok(json!({
        "comparisons": to_value(&rows),
        "within_error": rows.iter().all(|r| r.within_error),
    }))
}

pub fn two_time_parts(spec: &ExperimentSpec) -> (MeasurementPlan, TwoTimeConfig) {
    let m = &spec.measurement;
    let plan = MeasurementPlan {
        measured: m.measured,
        t1: m.t1,
        t2: m.t2,
        f: m.f.clone(),
        g: m.g.clone(),
        collapse: m.collapse,
    };
    let c = TwoTimeConfig {
        params: spec.constants.state_params(),
        grid_n: m.grid_n,
        grid_length: m.grid_length,
        width: m.width,
        strata: m.strata,
        n_traj: spec.n_traj(),
        dt: spec.dt(),
        quantum_dt: m.quantum_dt,
        seed: spec.seed,
    };
    (plan, c)
}

fn run_two_time(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let (plan, c) = two_time_parts(spec);
    let r = two_time_expectation(&plan, &c)?;
    let t = out.table(
        "two_time",
        &[
            ("t1", "time"),
            ("t2", "time"),
            ("width", "length"),
            ("quantum", "1"),
            ("quantum_half_width", "1"),
            ("collapse_on", "1"),
            ("collapse_on_se", "1"),
            ("collapse_off", "1"),
            ("collapse_off_se", "1"),
            ("collapse_on_half_width", "1"),
            ("collapse_on_half_width_se", "1"),
            ("linear_on", "1"),
            ("linear_on_se", "1"),
            ("linear_off", "1"),
            ("linear_off_se", "1"),
        ],
    );
    t.push(vec![
        plan.t1,
        plan.t2,
        r.width,
        r.quantum,
        r.quantum_half_width,
        r.collapse_on.value,
        r.collapse_on.stderr,
        r.collapse_off.value,
        r.collapse_off.stderr,
        r.collapse_on_half_width.value,
        r.collapse_on_half_width.stderr,
        r.linear_on.value,
        r.linear_on.stderr,
        r.linear_off.value,
        r.linear_off.stderr,
    ]);
    t.push(vec![
        plan.t1,
        plan.t1,
        r.width,
        r.equal_time_quantum,
        f64::NAN,
        r.equal_time_on.value,
        r.equal_time_on.stderr,
        r.equal_time_off.value,
        r.equal_time_off.stderr,
        f64::NAN,
        f64::NAN,
        f64::NAN,
        f64::NAN,
        f64::NAN,
        f64::NAN,
    ]);
    Ok(json!({
        "report": to_value(&r),
        "collapse_on_within_3_se": r.on_sigmas <= 3.0,
        "collapse_off_beyond_5_se": r.off_sigmas >= 5.0,
    }))
}

fn run_decoupling(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let d = &spec.decoupling;
    let c = DecouplingConfig {
        params: spec.constants.state_params(),
        correlated: d.correlated,
        beta: spec.betas()[0],
        dt: spec.dt(),
        t0: d.t0,
        horizon: spec.horizon(),
        smoothing: d.smoothing,
        n_traj: spec.n_traj(),
        seed: spec.seed,
        profile: spec.profile()?,
        checkpoints: d.checkpoints,
        swap_noise: d.swap_noise,
    };
    let r = decoupling_experiment(&c)?;
    let t = out.table(
        "decoupling",
        &[
            ("t", "time"),
            ("covariance", "length^2"),
            ("covariance_se", "length^2"),
            ("oracle_covariance", "length^2"),
            ("variance_1", "length^2"),
            ("variance_1_se", "length^2"),
            ("oracle_variance_1", "length^2"),
            ("variance_2", "length^2"),
            ("variance_2_se", "length^2"),
            ("oracle_variance_2", "length^2"),
        ],
    );
    for i in 0..r.times.len() {
        t.push(vec![
            r.times[i],
            r.covariance[i],
            r.covariance_se[i],
            r.oracle_covariance[i],
            r.variance[0][i],
            r.variance_se[0][i],
            r.oracle_variance[0][i],
            r.variance[1][i],
            r.variance_se[1][i],
            r.oracle_variance[1][i],
        ]);
    }
    Ok(json!({ "report": to_value(&r) }))
}

pub fn field_config(spec: &ExperimentSpec) -> Result<FieldCheckConfig> {
    let f = &spec.field;
    Ok(FieldCheckConfig {
        length: spec.constants.box_length,
        mass: spec.constants.field_mass,
        hbar: spec.constants.hbar,
        beta: spec.betas()[0],
        dt: spec.dt(),
        profile: spec.profile()?,
        seed: spec.seed,
        mode_counts: f.mode_counts.clone(),
        noise_time: f.noise_time,
        noise_traj: f.noise_traj,
        variance_modes: f.variance_modes,
        variance_time: f.variance_time,
        variance_traj: f.variance_traj,
        equivalence_traj: f.equivalence_traj,
        equivalence_horizon: f.equivalence_horizon,
    })
}

fn run_field(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let c = field_config(spec)?;
    let r = field::field_checks(&c)?;
    let t = out.table(
        "noise",
        &[
            ("n_modes", "count"),
            ("x", "length"),
            ("x2", "length"),
            ("covariance", "1/length"),
            ("covariance_se", "1/length"),
            ("kernel", "1/length"),
        ],
    );
    for n in &r.noise {
        for a in 0..n.probes.len() {
            for b in 0..n.probes.len() {
                t.push(vec![
                    n.n_modes as f64,
                    n.probes[a],
                    n.probes[b],
                    n.covariance[a][b],
                    n.covariance_se[a][b],
                    n.kernel[a][b],
                ]);
            }
        }
    }
    let t = out.table(
        "mode_variances",
        &[
            ("mode_id", "index"),
            ("omega", "1/time"),
            ("variance", "field^2"),
            ("variance_se", "field^2"),
            ("target", "field^2"),
        ],
    );
    for v in &r.variances {
        t.push(vec![v.mode as f64, v.omega, v.variance, v.variance_se, v.target]);
    }

    // one trajectory of the variance run, per mode and as a field
    let modes = field::mode_basis(c.length, c.variance_modes, c.mass)?;
    let cfg = IntegratorConfig::for_horizon(c.dt, c.variance_time)?;
    let stride = (cfg.n_steps / 10).max(1);
    let cfg = cfg.with_recording(0, stride);
    let ens = field::simulate_field_phase_space(&modes, &vec![c.beta; modes.n()], c.hbar.sqrt(), c.profile, &cfg, 1, c.seed)?;
    let t = out.table(
        "mode_trajectories",
        &[("mode_id", "index"), ("t", "time"), ("q", "field"), ("v", "field/time"), ("noise", "1/time^0.5")],
    );
    for i in 0..modes.n() {
        for (r, time) in ens.times.iter().enumerate() {
            t.push(vec![
                i as f64,
                *time,
                ens.x_at(r, 0, i),
                ens.v_at(r, 0, i).unwrap_or(f64::NAN),
                ens.noise_at(r, 0, i).unwrap_or(f64::NAN),
            ]);
        }
    }
    let xs = modes.grid(spec.field.snapshot_points.max(2));
    let tl = *ens.times.last().unwrap();
    let snap = field::snapshot(&ens, 0, tl, &modes, &xs)?;
    let t = out.table("field_snapshot", &[("t", "time"), ("x", "length"), ("phi", "field"), ("V", "field/time")]);
    for j in 0..xs.len() {
        t.push(vec![snap.t, snap.x[j], snap.phi[j], snap.v[j]]);
    }
    Ok(json!({ "report": to_value(&r) }))
}

fn run_spectrum(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let s = &spec.spectrum;
    let c = &spec.constants;
    let eps = c.eps.unwrap_or((c.hbar / c.mass).sqrt());
    let t = out.table("spectrum", &[("k", "1/length"), ("P", "length"), ("P_theta", "length")]);
    let mut rows = Vec::new();
    for &k in &s.k {
        let p = field::gravitational_spectrum(k, s.t, eps, c.xi, c.g)?;
        let pt = field::potential_spectrum(p, k, c.g)?;
        t.push(vec![k, p, pt]);
        rows.push(json!({ "k": k, "P": p, "P_theta": pt }));
    }
    let idx = s.index;
    let check = field::poisson_round_trip(s.grid_n, s.length, |k: f64| k.abs().powf(idx), c.g, s.realizations, s.bands, spec.seed)?;
    let t = out.table(
        "poisson",
        &[("k_lo", "1/length"), ("k_hi", "1/length"), ("modes", "count"), ("ratio", "1"), ("ratio_se", "1")],
    );
    for b in &check.bands {
        t.push(vec![b.k_lo, b.k_hi, b.modes as f64, b.ratio, b.ratio_se]);
    }
    Ok(json!({
        "t": s.t,
        "eps": eps,
        "xi": c.xi,
        "G": c.g,
        "spectrum": rows,
        "poisson": to_value(&check),
        "poisson_within_5pct": check.max_rel_error <= 0.05,
    }))
}

fn run_node(spec: &ExperimentSpec, out: &mut Outputs) -> Result<serde_json::Value> {
    let c = NodeCrossingConfig {
        params: spec.constants.state_params(),
        dts: spec.node.dts.clone(),
        horizon: spec.horizon(),
        n_traj: spec.n_traj(),
        seed: spec.seed,
        eta: spec.node.eta,
    };
    let rows = node_crossing(&c)?;
    let t = out.table(
        "node_crossing",
        &[
            ("dt", "time"),
            ("entries", "count"),
            ("rate", "1/time"),
            ("rate_se", "1/time"),
            ("trajectories_entering", "count"),
        ],
    );
    for r in &rows {
        t.push(vec![r.dt, r.entries as f64, r.rate, r.rate_se, r.trajectories_entering as f64]);
    }
    Ok(json!({ "rows": to_value(&rows) }))
}

// ---------------------------------------------------------------- catalog

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSchema {
    pub name: String,
    pub kind: String,
    pub default: serde_json::Value,
    pub doc: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub category: String,
    pub doc: String,
    pub params: Vec<ParamSchema>,
}

fn p(name: &str, kind: &str, default: serde_json::Value, doc: &str) -> ParamSchema {
    ParamSchema {
        name: name.into(),
        kind: kind.into(),
        default,
        doc: doc.into(),
    }
}

/// Analytic states, process families and experiment kinds with their
/// parameters.
pub fn list_catalog() -> Vec<CatalogEntry> {
    let c = Constants::default();
    let e = EstimatorSpec::default();
    let v = VelocitySpec::default();
    let state_params = || {
        vec![
            p("constants.hbar", "float", json!(c.hbar), "reduced Planck constant"),
            p("constants.mass", "float", json!(c.mass), "particle mass"),
            p("constants.omega", "float", json!(c.omega), "oscillator frequency"),
        ]
    };
    let mut out = Vec::new();
    let states: [(&str, &str, Vec<ParamSchema>); 5] = [
        ("free_gaussian", "spreading free packet", vec![
            p("constants.sigma0", "float", json!(c.sigma0), "initial width"),
            p("constants.p0", "float", json!(c.p0), "initial momentum"),
        ]),
        ("ho_ground", "oscillator ground state", vec![]),
        ("ho_coherent", "displaced oscillator ground state", vec![
            p("constants.x0", "float", json!(c.x0), "initial displacement"),
            p("constants.p0", "float", json!(c.p0), "initial momentum"),
        ]),
        ("ho_superposition_01", "(phi_0 + phi_1)/sqrt 2, moving node", vec![]),
        ("two_particle_gaussian", "ground state of two coupled oscillators", vec![
            p("constants.kappa", "float", json!(c.kappa), "coupling, |kappa| < 1"),
        ]),
    ];
    for (name, doc, extra) in states {
        let mut params = state_params();
        params.extend(extra);
        out.push(CatalogEntry {
            name: name.into(),
            category: "state".into(),
            doc: doc.into(),
            params,
        });
    }
    let colored = || {
        vec![
            p("betas", "float list", json!([10.0, 30.0, 100.0]), "colored-noise rates; dt*beta <= 0.1"),
            p("dt", "float", json!(1e-3), "time step"),
        ]
    };
    out.push(CatalogEntry {
        name: "nelson_white".into(),
        category: "process".into(),
        doc: "dx = b dt + eps dW".into(),
        params: vec![p("dt", "float", json!(1e-3), "time step")],
    });
    out.push(CatalogEntry {
        name: "colored_smoothing".into(),
        category: "process".into(),
        doc: "dx = b dt + eps A dt, dA = -beta A dt + beta dW".into(),
        params: colored(),
    });
    let mut ps = colored();
    ps.push(p("velocity.family", "gaussian_about_b | two_point_about_b", json!("gaussian_about_b"), "initial velocity law about b(x)"));
    ps.push(p("velocity.spread", "float", json!(v.spread), "spread of the initial velocity about b(x)"));
    out.push(CatalogEntry {
        name: "phase_space".into(),
        category: "process".into(),
        doc: "dx = (v + eps A) dt, dv = a(x) dt".into(),
        params: ps,
    });
    let common = vec![
        p("seed", "integer", json!(7), "master seed"),
        p("n_traj", "integer", json!(100_000), "trajectories"),
        p("horizon", "float", json!(2.0), "final time"),
        p("estimator.delta", "float", json!(e.delta), "difference-quotient lag"),
        p("estimator.window", "float", json!(e.window), "time window pooled around the evaluation time"),
        p("estimator.max_bins", "integer", json!(e.max_bins), "cap on Freedman-Diaconis bins"),
    ];
    let kinds: [(&str, &str, Vec<ParamSchema>); 10] = [
        ("ou", "colored-noise variance and decay rate", vec![
            p("ou.dt_beta", "float", json!(0.05), "dt * beta"),
            p("ou.n_paths", "integer", json!(2000), "paths per beta"),
            p("ou.path_steps", "integer", json!(20_000), "steps per path"),
        ]),
        ("simulate", "one run of a catalog state against its oracle", vec![
            p("process", "nelson_white | colored_smoothing | phase_space", json!("nelson_white"), "process family"),
            p("checkpoints", "integer", json!(5), "marginal checkpoints"),
        ]),
        ("beta_sweep", "phase-space or colored run per beta with trend verdicts", vec![
            p("process", "phase_space | colored_smoothing", json!("phase_space"), "process family"),
            p("dt_halving", "bool", json!(false), "repeat the distance at dt/2"),
        ]),
        ("velocity_profiles", "gaussian vs two-point initial velocities", vec![]),
        ("two_time", "position measurement at t1, observation at t2", vec![
            p("measurement.t1", "float", json!(0.5), "measurement time"),
            p("measurement.t2", "float", json!(2.0), "observation time"),
            p("measurement.collapse", "bool", json!(true), "restart from the collapsed density"),
        ]),
        ("two_time_expectation", "alias of two_time", vec![]),
        ("decoupling", "correlations after switching off a coupling", vec![
            p("decoupling.t0", "float", json!(0.0), "start time; coupling acts on [t0, 0)"),
        ]),
        ("field", "free scalar field in a periodic box", vec![
            p("constants.box_length", "float", json!(c.box_length), "box length"),
            p("constants.field_mass", "float", json!(c.field_mass), "field mass"),
            p("field.mode_counts", "integer list", json!([8, 16, 32]), "truncations"),
        ]),
        ("spectrum", "matter and potential spectra, Poisson round trip", vec![
            p("spectrum.k", "float list", json!([0.5, 1.0, 2.0, 4.0]), "wavenumbers"),
            p("spectrum.t", "float", json!(1.0), "time"),
            p("constants.xi", "float", json!(c.xi), "noise coupling xi"),
            p("constants.G", "float", json!(c.g), "Newton constant"),
        ]),
        ("node_crossing", "entries into the node region of ho_superposition_01", vec![
            p("node.dts", "float list", json!([4e-3, 2e-3, 1e-3]), "step sizes"),
        ]),
    ];
    for (name, doc, extra) in kinds {
        let mut params = common.clone();
        params.extend(extra);
        out.push(CatalogEntry {
            name: name.into(),
            category: "experiment".into(),
            doc: doc.into(),
            params,
        });
    }
    out
}

/// Kind names accepted by specs, including aliases.
pub fn parse_kind(name: &str) -> Result<ExperimentKind> {
    if name == "two_time_expectation" {
        return Ok(ExperimentKind::TwoTime);
    }
    ExperimentKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::config(format!("unknown experiment kind '{name}'")))
}

// ---------------------------------------------------------------- tracing

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub run_dirs: usize,
    pub files_checked: usize,
    pub mismatches: Vec<String>,
}

/// Verifies that every output under `root` carries the hash of the
/// `spec.toml` next to it (and that the directory name matches).
pub fn trace(root: &Path) -> Result<TraceReport> {
    let mut rep = TraceReport::default();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        let spec_path = d.join("spec.toml");
        let expected = if spec_path.is_file() {
            rep.run_dirs += 1;
            let spec = parse_spec(&fs::read_to_string(&spec_path)?)?;
            let h = spec.hash();
            let dn = d.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if !dn.ends_with(&h[..12]) {
                rep.mismatches.push(format!("{}: directory name does not end with {}", d.display(), &h[..12]));
            }
            Some(h)
        } else {
            None
        };
        for p in entries {
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
            let found = match ext {
                "csv" => Some(read_columnar(&p).map(|c| c.spec_hash)),
                "json" => Some(
                    fs::read_to_string(&p)
                        .map_err(Error::from)
                        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).map_err(|e| Error::Parse(e.to_string())))
                        .map(|v| v.get("spec_hash").and_then(|h| h.as_str()).unwrap_or("").to_string()),
                ),
                _ => None,
            };
            let Some(found) = found else { continue };
            rep.files_checked += 1;
            match (found, &expected) {
                (Ok(h), Some(e)) if &h == e => {}
                (Ok(h), Some(e)) => rep.mismatches.push(format!("{}: hash {h} != spec {e}", p.display())),
                (Ok(_), None) => rep.mismatches.push(format!("{}: no spec.toml beside it", p.display())),
                (Err(e), _) => rep.mismatches.push(format!("{}: {e}", p.display())),
            }
        }
    }
    Ok(rep)
}

/// As [`trace`], failing on any mismatch.
pub fn verify_trace(root: &Path) -> Result<TraceReport> {
    let rep = trace(root)?;
    if !rep.mismatches.is_empty() {
        return Err(Error::Trace(rep.mismatches.join("; ")));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_spec_gets_defaults() {
        let s = parse_spec("kind = \"beta_sweep\"\nstate = \"ho_ground\"\nseed = 3\n").unwrap();
        assert_eq!(s.betas(), &[10.0, 30.0, 100.0]);
        assert_eq!(s.process(), ProcessKind::PhaseSpace);
        assert_eq!(s.dt(), 1e-3);
        assert_eq!(s.seed, 3);
    }

    #[test]
    fn resolution_rule_is_enforced() {
        let e = parse_spec("kind = \"beta_sweep\"\ndt = 0.01\nbetas = [100.0]\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("dt*beta")), "{e}");
    }

    #[test]
    fn unknown_keys_are_listed() {
        let e = parse_spec("kind = \"ou\"\nbogus = 1\n[constants]\nhbar = 1.0\nplanck = 2\n").unwrap_err();
        match e {
            Error::UnknownKeys(k) => assert_eq!(k, vec!["bogus".to_string(), "constants.planck".to_string()]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn eps_must_match() {
        assert!(parse_spec("kind = \"simulate\"\n[constants]\nhbar = 4.0\neps = 2.0\n").is_ok());
        let e = parse_spec("kind = \"simulate\"\n[constants]\neps = 2.0\n").unwrap_err();
        assert!(e.to_string().contains("sqrt(hbar/mass)"));
    }

    #[test]
    fn overrides() {
        let s = parse_spec_with(
            "kind = \"simulate\"\n",
            &["constants.omega=2".into(), "process=colored_smoothing".into(), "betas=[50.0]".into()],
        )
        .unwrap();
        assert_eq!(s.constants.omega, 2.0);
        assert_eq!(s.process(), ProcessKind::ColoredSmoothing);
        assert_eq!(s.betas(), &[50.0]);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let s = parse_spec_with("kind = \"two_time\"\n", &["measurement.g={type=\"indicator\", lo=0.0, hi=1.0}".into()]).unwrap();
        let back = parse_spec(&s.to_toml().unwrap()).unwrap();
        assert_eq!(s, back);
        assert_eq!(s.hash(), back.hash());
        let mut moved = s.clone();
        moved.output_dir = Some("/elsewhere".into());
        moved.threads = Some(3);
        assert_eq!(moved.hash(), s.hash());
        let mut other = s.clone();
        other.seed += 1;
        assert_ne!(other.hash(), s.hash());
    }

    #[test]
    fn columnar_round_trip() {
        let mut c = ColumnarOutput::new("ab12", &[("x", "length"), ("y", "1")]);
        c.push(vec![0.1, 1.0 / 3.0]);
        c.push(vec![1e-300, f64::NAN]);
        let text = c.render();
        assert!(text.starts_with("# spec_hash=ab12 columns=x,y units=length,1\n"));
        let back = parse_columnar(&text).unwrap();
        assert_eq!(back.rows[0], c.rows[0]);
        assert_eq!(back.rows[1][0], 1e-300);
        assert!(back.rows[1][1].is_nan());
    }

    #[test]
    fn catalog_contents() {
        let cat = list_catalog();
        let names: Vec<&str> = cat.iter().map(|e| e.name.as_str()).collect();
        assert!(names.contains(&"ho_ground"));
        assert!(names.contains(&"two_time_expectation"));
        let ps = cat.iter().find(|e| e.name == "phase_space").unwrap();
        assert!(ps.params.iter().any(|p| p.name == "betas"));
        assert!(ps.params.iter().any(|p| p.name.starts_with("velocity.")));
        assert_eq!(parse_kind("two_time_expectation").unwrap(), ExperimentKind::TwoTime);
    }
}
