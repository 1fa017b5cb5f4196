//! Scenario ingestion (TOML `.scn` files), the bundled system registry,
//! pipeline orchestration (linearize -> pushforward -> solve bridge ->
//! simulate -> recover), and artifact emission.

use crate::bridge::{
    control_energy, schrodinger_fixed_point, FixedPointOptions, LinearizedPlant,
    SchrodingerSolution, Stepping,
};
use crate::density::{
    pushforward_density, recover_original_density, DensityError, GaussianDensity, GridDensity,
    SampleDensity,
};
use crate::exprdsl::{parse_scalar, parse_vector};
use crate::feedlin::{
    build_linearization, check_proposition1, FeedbackLinearization, InverseMap, Prop1Options,
    RelDegOptions,
};
use crate::grid::GridSpec;
use crate::simulate::{
    euler_maruyama, liouville_flow, steer_original_coordinates, Scheme, SimConfig, SimTrajectory,
    SteerReport,
};
use crate::vectorfield::{ControlAffineSystem, DomainBox, ScalarField};
use crate::Error;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum ScenarioError {
    #[error("scenario: file not found: {path}")]
    MissingFile { path: String },
    #[error("scenario: cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("scenario: invalid override '{arg}': expected key=value")]
    BadOverride { arg: String },
    #[error("scenario: validation failed:\n{}", diagnostics.iter().map(|d| format!("  - {d}")).collect::<Vec<_>>().join("\n"))]
    Invalid { diagnostics: Vec<Diagnostic> },
    #[error("scenario: {0}")]
    Unsupported(String),
}

/// One static-validation finding, with the config path it refers to.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Analyze,
    Steer,
    Simulate,
    All,
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "analyze" => RunMode::Analyze,
            "steer" => RunMode::Steer,
            "simulate" => RunMode::Simulate,
            "all" => RunMode::All,
            other => return Err(format!("unknown mode '{other}'")),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SystemSpec {
    /// Name in the bundled registry; overrides the inline fields.
    pub registry: Option<String>,
    pub f: Option<Vec<String>>,
    pub g: Option<Vec<Vec<String>>>,
    pub domain_lo: Option<Vec<f64>>,
    pub domain_hi: Option<Vec<f64>>,
    /// Optional analytic inverse of the linearizing coordinates, one
    /// expression per state, written in the variables `x1..xn` standing
    /// for `z1..zn`.
    pub inverse: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EndpointSpec {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Grid { path: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeSpec {
    pub epsilon: f64,
    pub grid_lo: Vec<f64>,
    pub grid_hi: Vec<f64>,
    pub grid_shape: Vec<usize>,
    #[serde(default = "default_nt")]
    pub nt: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_nt() -> usize {
    200
}
fn default_tol() -> f64 {
    1e-8
}
fn default_max_iter() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Particle budget for the original-coordinate steering check.
    #[serde(default = "default_steer_particles")]
    pub steer_particles: usize,
    /// Cap on particles written to the trajectory CSV.
    #[serde(default = "default_csv_particles")]
    pub csv_particles: usize,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_particles() -> usize {
    10_000
}
fn default_steer_particles() -> usize {
    256
}
fn default_csv_particles() -> usize {
    1000
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            dt: default_dt(),
            particles: default_particles(),
            seed: 0,
            scheme: Scheme::default(),
            steer_particles: default_steer_particles(),
            csv_particles: default_csv_particles(),
        }
    }
}

/// A full scenario: system, outputs, endpoint densities, solver grid, and
/// run knobs. Deserialized from a TOML `.scn` file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub system: SystemSpec,
    /// Output expressions `h_1..h_m` (defaulted by the registry).
    pub outputs: Option<Vec<String>>,
    pub x0: Option<Vec<f64>>,
    /// Endpoint densities; required for the steering stages.
    pub rho0: Option<EndpointSpec>,
    pub rho1: Option<EndpointSpec>,
    pub bridge: Option<BridgeSpec>,
    #[serde(default)]
    pub sim: SimSpec,
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_mode() -> String {
    "all".into()
}

/// A registry system with its standard outputs and expansion point.
pub struct RegistryEntry {
    pub system: ControlAffineSystem,
    pub outputs: Vec<ScalarField>,
    pub x0: Vec<f64>,
    pub inverse: Option<InverseMap>,
}

pub const REGISTRY_NAMES: [&str; 4] = [
    "paper_example",
    "double_integrator",
    "toy1d",
    "toy2d_nonlinear",
];

/// Bundled systems used by the test suites and the example scenarios.
pub fn registry(name: &str) -> Option<RegistryEntry> {
    let entry = match name {
        "paper_example" => {
            let f = parse_vector(
                &[
                    "x2 + x2^2".into(),
                    "x3 - x1*x4 + x4*x5".into(),
                    "x2*x4 + x1*x5 - x5^2".into(),
                    "x5".into(),
                    "x2^2".into(),
                ],
                5,
            )
            .ok()?;
            let g1 = parse_vector(
                &[
                    "0".into(),
                    "0".into(),
                    "cos(x1 - x5)".into(),
                    "0".into(),
                    "0".into(),
                ],
                5,
            )
            .ok()?;
            let g2 = parse_vector(
                &["1".into(), "0".into(), "1".into(), "0".into(), "1".into()],
                5,
            )
            .ok()?;
            let system =
                ControlAffineSystem::new(f, vec![g1, g2], DomainBox::cube(5, 2.0)).ok()?;
            let outputs = vec![
                parse_scalar("x1 - x5", 5).ok()?,
                parse_scalar("x4", 5).ok()?,
            ];
            let inverse = parse_vector(
                &[
                    "x1 + x5".into(),
                    "x2".into(),
                    "x3 + x1*x4".into(),
                    "x4".into(),
                    "x5".into(),
                ],
                5,
            )
            .ok()?;
            RegistryEntry {
                system,
                outputs,
                x0: vec![0.0; 5],
                inverse: Some(InverseMap::Expr(inverse)),
            }
        }
        "double_integrator" => {
            let f = parse_vector(&["x2".into(), "0".into()], 2).ok()?;
            let g = parse_vector(&["0".into(), "1".into()], 2).ok()?;
            let system = ControlAffineSystem::new(f, vec![g], DomainBox::cube(2, 5.0)).ok()?;
            let inverse = parse_vector(&["x1".into(), "x2".into()], 2).ok()?;
            RegistryEntry {
                system,
                outputs: vec![parse_scalar("x1", 2).ok()?],
                x0: vec![0.0; 2],
                inverse: Some(InverseMap::Expr(inverse)),
            }
        }
        "toy1d" => {
            let f = parse_vector(&["0".into()], 1).ok()?;
            let g = parse_vector(&["1".into()], 1).ok()?;
            let system = ControlAffineSystem::new(f, vec![g], DomainBox::cube(1, 6.0)).ok()?;
            let inverse = parse_vector(&["x1".into()], 1).ok()?;
            RegistryEntry {
                system,
                outputs: vec![parse_scalar("x1", 1).ok()?],
                x0: vec![0.0],
                inverse: Some(InverseMap::Expr(inverse)),
            }
        }
        "toy2d_nonlinear" => {
            let f = parse_vector(&["x2 + x2^3".into(), "0".into()], 2).ok()?;
            let g = parse_vector(&["0".into(), "1".into()], 2).ok()?;
            let system = ControlAffineSystem::new(f, vec![g], DomainBox::cube(2, 3.0)).ok()?;
            // τ = (x1, x2 + x2³); the second component inverts by Cardano
            let inverse = InverseMap::Closure(Arc::new(|z: &[f64]| {
                let p = z[1] / 2.0;
                let q = (z[1] * z[1] / 4.0 + 1.0 / 27.0).sqrt();
                let x2 = (p + q).cbrt() + (p - q).cbrt();
                vec![z[0], x2]
            }));
            RegistryEntry {
                system,
                outputs: vec![parse_scalar("x1", 2).ok()?],
                x0: vec![0.0; 2],
                inverse: Some(inverse),
            }
        }
        _ => return None,
    };
    Some(entry)
}

/// Scenario text -> TOML value with `--set key=value` overrides applied.
fn load_value(path: &Path, overrides: &[String]) -> Result<toml::Value, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|_| ScenarioError::MissingFile {
        path: path.display().to_string(),
    })?;
    let mut value: toml::Value = toml::from_str(&text).map_err(|e| ScenarioError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for arg in overrides {
        let (key, raw) = arg
            .split_once('=')
            .ok_or_else(|| ScenarioError::BadOverride { arg: arg.clone() })?;
        let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
            Ok(toml::Value::Table(t)) => t
                .get("v")
                .cloned()
                .unwrap_or_else(|| toml::Value::String(raw.to_string())),
            _ => toml::Value::String(raw.to_string()),
        };
        let mut cursor = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            cursor = cursor
                .as_table_mut()
                .ok_or_else(|| ScenarioError::BadOverride { arg: arg.clone() })?
                .entry(part.to_string())
                .or_insert(toml::Value::Table(Default::default()));
        }
        cursor
            .as_table_mut()
            .ok_or_else(|| ScenarioError::BadOverride { arg: arg.clone() })?
            .insert(parts[parts.len() - 1].to_string(), parsed);
    }
    Ok(value)
}

/// Load a scenario file, applying overrides.
pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<Scenario, ScenarioError> {
    let value = load_value(path, overrides)?;
    value
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| ScenarioError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

fn canonical_json(v: &serde_json::Value, out: &mut String) {
    match v {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string"));
                out.push(':');
                canonical_json(&map[*k], out);
            }
            out.push('}');
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Digest of the canonicalized (sorted-key) scenario content.
pub fn scenario_hash(scenario: &Scenario) -> String {
    let json = serde_json::to_value(scenario).expect("scenario serializes");
    let mut canon = String::new();
    canonical_json(&json, &mut canon);
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct ResolvedScenario {
    scenario: Scenario,
    system: ControlAffineSystem,
    outputs: Vec<ScalarField>,
    x0: Vec<f64>,
    inverse: Option<InverseMap>,
    mode: RunMode,
}

fn resolve(
    scenario: Scenario,
    mode_override: Option<RunMode>,
    base_dir: &Path,
) -> Result<ResolvedScenario, ScenarioError> {
    let diagnostics = validate_scenario(&scenario, base_dir);
    if !diagnostics.is_empty() {
        return Err(ScenarioError::Invalid { diagnostics });
    }
    let mode = match mode_override {
        Some(m) => m,
        None => scenario.mode.parse().expect("validated"),
    };
    let (system, mut outputs, mut x0, inverse) = match &scenario.system.registry {
        Some(name) => {
            let entry = registry(name).expect("validated");
            (entry.system, entry.outputs, entry.x0, entry.inverse)
        }
        None => {
            let f_srcs = scenario.system.f.clone().expect("validated");
            let n = f_srcs.len();
            let f = parse_vector(&f_srcs, n).expect("validated");
            let g = scenario
                .system
                .g
                .clone()
                .expect("validated")
                .iter()
                .map(|col| parse_vector(col, n).expect("validated"))
                .collect();
            let domain = DomainBox::new(
                scenario.system.domain_lo.clone().expect("validated"),
                scenario.system.domain_hi.clone().expect("validated"),
            )
            .expect("validated");
            let system = ControlAffineSystem::new(f, g, domain).expect("validated");
            let inverse = scenario
                .system
                .inverse
                .as_ref()
                .map(|srcs| InverseMap::Expr(parse_vector(srcs, n).expect("validated")));
            (system, Vec::new(), Vec::new(), inverse)
        }
    };
    if let Some(srcs) = &scenario.outputs {
        outputs = srcs
            .iter()
            .map(|s| parse_scalar(s, system.state_dim()).expect("validated"))
            .collect();
    }
    if let Some(point) = &scenario.x0 {
        x0 = point.clone();
    }
    Ok(ResolvedScenario {
        scenario,
        system,
        outputs,
        x0,
        inverse,
        mode,
    })
}

/// Static validation (dimensions, grammar, files); no numerics.
pub fn validate_scenario(scenario: &Scenario, base_dir: &Path) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |path: &str, message: String| {
        out.push(Diagnostic {
            path: path.to_string(),
            message,
        })
    };

    if scenario.mode.parse::<RunMode>().is_err() {
        push("mode", format!("unknown mode '{}'", scenario.mode));
    }

    // system block
    let n: Option<usize> = match &scenario.system.registry {
        Some(name) => {
            if !REGISTRY_NAMES.contains(&name.as_str()) {
                push(
                    "system.registry",
                    format!("unknown registry system '{name}'"),
                );
                None
            } else {
                registry(name).map(|e| e.system.state_dim())
            }
        }
        None => {
            let mut dim = None;
            match &scenario.system.f {
                None => push("system.f", "inline system needs drift expressions".into()),
                Some(srcs) => {
                    let nn = srcs.len();
                    dim = Some(nn);
                    for (i, s) in srcs.iter().enumerate() {
                        if let Err(e) = crate::exprdsl::parse_expr(s, nn) {
                            push(&format!("system.f[{i}]"), e.to_string());
                        }
                    }
                }
            }
            match (&scenario.system.g, dim) {
                (None, _) => push("system.g", "inline system needs input columns".into()),
                (Some(cols), Some(nn)) => {
                    if cols.is_empty() {
                        push("system.g", "need at least one input column".into());
                    }
                    for (j, col) in cols.iter().enumerate() {
                        if col.len() != nn {
                            push(
                                &format!("system.g[{j}]"),
                                format!("column has {} entries, state dimension is {nn}", col.len()),
                            );
                        }
                        for (i, s) in col.iter().enumerate() {
                            if let Err(e) = crate::exprdsl::parse_expr(s, nn) {
                                push(&format!("system.g[{j}][{i}]"), e.to_string());
                            }
                        }
                    }
                }
                _ => {}
            }
            match (&scenario.system.domain_lo, &scenario.system.domain_hi, dim) {
                (Some(lo), Some(hi), Some(nn)) => {
                    if lo.len() != nn || hi.len() != nn {
                        push("system.domain_lo", "domain bounds must match the state dimension".into());
                    }
                }
                (None, _, _) | (_, None, _) => {
                    push("system.domain_lo", "inline system needs domain bounds".into())
                }
                _ => {}
            }
            dim
        }
    };

    let m: Option<usize> = match &scenario.system.registry {
        Some(name) => registry(name).map(|e| e.system.input_dim()),
        None => scenario.system.g.as_ref().map(|g| g.len()),
    };

    // outputs: full-state linearization needs exactly one output per input
    if let Some(srcs) = &scenario.outputs {
        if let (Some(nn), Some(mm)) = (n, m) {
            if srcs.len() != mm {
                push(
                    "outputs",
                    format!(
                        "got {} output expressions but the system has {mm} inputs; full-state linearization needs one output per input",
                        srcs.len()
                    ),
                );
            }
            for (i, s) in srcs.iter().enumerate() {
                if let Err(e) = crate::exprdsl::parse_expr(s, nn) {
                    push(&format!("outputs[{i}]"), e.to_string());
                }
            }
        }
    } else if scenario.system.registry.is_none() {
        push("outputs", "inline systems must specify output expressions".into());
    }

    if let (Some(x0), Some(nn)) = (&scenario.x0, n) {
        if x0.len() != nn {
            push("x0", format!("expansion point has {} entries, expected {nn}", x0.len()));
        }
    }

    let mode_needs_bridge = matches!(
        scenario.mode.parse::<RunMode>(),
        Ok(RunMode::Steer | RunMode::Simulate | RunMode::All)
    );

    // endpoints
    for (label, spec) in [("rho0", &scenario.rho0), ("rho1", &scenario.rho1)] {
        let Some(spec) = spec else {
            if mode_needs_bridge {
                push(label, "steering modes need endpoint densities".into());
            }
            continue;
        };
        match spec {
            EndpointSpec::Gaussian { mean, cov } => {
                if let Some(nn) = n {
                    if mean.len() != nn {
                        push(&format!("{label}.mean"), format!("has {} entries, expected {nn}", mean.len()));
                    }
                }
                if cov.len() != mean.len() || cov.iter().any(|row| row.len() != mean.len()) {
                    push(&format!("{label}.cov"), "covariance must be square and match the mean".into());
                } else {
                    let mat = DMatrix::from_fn(mean.len(), mean.len(), |i, j| cov[i][j]);
                    if GaussianDensity::new(mean.clone(), mat).is_err() {
                        push(&format!("{label}.cov"), "covariance is not symmetric positive definite".into());
                    }
                }
            }
            EndpointSpec::Grid { path } => {
                let resolved = base_dir.join(path);
                if !resolved.exists() {
                    push(&format!("{label}.path"), format!("file does not exist: {}", resolved.display()));
                }
            }
        }
    }

    // bridge grid
    if let Some(bridge) = &scenario.bridge {
        let d = bridge.grid_shape.len();
        if bridge.grid_lo.len() != d || bridge.grid_hi.len() != d {
            push("bridge.grid_lo", "grid bounds and shape must agree".into());
        }
        if let Some(nn) = n {
            if d != nn {
                push(
                    "bridge.grid_shape",
                    format!("solver grid has {d} axes but the state dimension is {nn}"),
                );
            }
        }
        if bridge.grid_shape.iter().any(|&s| s == 0) {
            push("bridge.grid_shape", "grid shape entries must be positive".into());
        }
        if bridge
            .grid_lo
            .iter()
            .zip(&bridge.grid_hi)
            .any(|(a, b)| a >= b)
        {
            push("bridge.grid_lo", "grid box must have positive extent".into());
        }
        if bridge.epsilon < 0.0 {
            push("bridge.epsilon", "noise level must be nonnegative".into());
        }
        if bridge.nt == 0 {
            push("bridge.nt", "need at least one stored time step".into());
        }
        if mode_needs_bridge {
            if d > 2 {
                push(
                    "bridge.grid_shape",
                    format!("grid solves support 1 or 2 axes, got {d}; higher dimensions are validated by particles only"),
                );
            }
            if bridge.epsilon == 0.0 {
                push("bridge.epsilon", "the Schrödinger system needs epsilon > 0".into());
            }
        }
    } else if mode_needs_bridge {
        push("bridge", "steering modes need a [bridge] section".into());
    }

    // sim block
    let steps = 1.0 / scenario.sim.dt;
    if scenario.sim.dt <= 0.0 || (steps - steps.round()).abs() > 1e-9 * steps.abs().max(1.0) {
        push("sim.dt", format!("dt = {} must divide the unit horizon", scenario.sim.dt));
    }
    if scenario.sim.particles == 0 {
        push("sim.particles", "need at least one particle".into());
    }

    out
}

/// Validate a scenario file; returns static diagnostics (empty when clean).
pub fn validate(path: &Path) -> Result<Vec<Diagnostic>, ScenarioError> {
    let scenario = load_scenario(path, &[])?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    Ok(validate_scenario(&scenario, base_dir))
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub pi: Vec<usize>,
    pub total_relative_degree: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub c0: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub feasible: bool,
    pub input_rank: usize,
    pub distribution_ranks: Vec<usize>,
    pub involutive: Vec<Option<bool>>,
    pub z_domain_lo: Vec<f64>,
    pub z_domain_hi: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct SteerSummary {
    pub iterations: usize,
    pub boundary_l1_0: f64,
    pub boundary_l1_1: f64,
    pub flagged_fraction: f64,
    pub grid_energy: f64,
    pub pushforward_factor_rho0: f64,
    pub pushforward_factor_rho1: f64,
}

#[derive(Debug, Serialize)]
pub struct SimulationSummary {
    pub scheme: Scheme,
    pub particles: usize,
    pub terminal_mean: Vec<f64>,
    pub terminal_cov_diag: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_cov_diag: Vec<f64>,
    pub exit_flags: usize,
    pub steer_consistency: Option<f64>,
    pub steer_mean_energy: Option<f64>,
    pub steer_exit_flags: Option<usize>,
}

/// Everything a run produced, for callers that want values rather than
/// files.
pub struct RunOutput {
    pub scenario_hash: String,
    pub mode: RunMode,
    pub out_dir: PathBuf,
    pub analysis: Option<AnalysisReport>,
    pub steering: Option<SteerSummary>,
    pub solution: Option<SchrodingerSolution>,
    pub simulation: Option<SimulationSummary>,
    pub steer_report: Option<SteerReport>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn load_endpoint(
    spec: &EndpointSpec,
    base_dir: &Path,
) -> Result<Box<dyn SampleDensity>, Error> {
    match spec {
        EndpointSpec::Gaussian { mean, cov } => {
            let mat = DMatrix::from_fn(mean.len(), mean.len(), |i, j| cov[i][j]);
            Ok(Box::new(GaussianDensity::new(mean.clone(), mat).map_err(DensityError::from)?))
        }
        EndpointSpec::Grid { path } => {
            let full = base_dir.join(path);
            Ok(Box::new(GridDensity::read_csv(&full)?))
        }
    }
}

/// Run a scenario end to end and emit artifacts into `out_dir`.
///
/// Artifacts: a deterministic `manifest.toml` (the wall-clock stamp lives
/// in `runinfo.txt` so repeated runs stay byte-identical), `analysis.*`
/// for the linearization report, long-format CSVs plus per-slice grid
/// files for the solved bridge, and trajectory/moment CSVs for the
/// particle stage.
pub fn run(
    scenario_path: &Path,
    out_dir: &Path,
    mode_override: Option<RunMode>,
    overrides: &[String],
) -> Result<RunOutput, Error> {
    let scenario = load_scenario(scenario_path, overrides)?;
    let base_dir = scenario_path.parent().unwrap_or(Path::new("."));
    let mut resolved = resolve(scenario, mode_override, base_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let hash = scenario_hash(&resolved.scenario);

    let mut output = RunOutput {
        scenario_hash: hash.clone(),
        mode: resolved.mode,
        out_dir: out_dir.to_path_buf(),
        analysis: None,
        steering: None,
        solution: None,
        simulation: None,
        steer_report: None,
    };

    let do_analyze = matches!(resolved.mode, RunMode::Analyze | RunMode::All);
    let do_steer = matches!(
        resolved.mode,
        RunMode::Steer | RunMode::Simulate | RunMode::All
    );
    let do_simulate = matches!(resolved.mode, RunMode::Simulate | RunMode::All);

    // the linearization is needed by every stage
    let mut fl = build_linearization(
        &resolved.system,
        &resolved.outputs,
        &resolved.x0,
        &RelDegOptions::default(),
    )?;
    if let Some(inverse) = resolved.inverse.take() {
        fl = fl.with_analytic_inverse(inverse);
    }
    let fl = Arc::new(fl);

    if do_analyze {
        let report = check_proposition1(&resolved.system, &resolved.x0, &Prop1Options::default())?;
        let analysis = AnalysisReport {
            pi: fl.rd.pi.clone(),
            total_relative_degree: fl.rd.total,
            state_dim: resolved.system.state_dim(),
            input_dim: resolved.system.input_dim(),
            c0: matrix_rows(&fl.rd.c0),
            a: matrix_rows(&fl.a),
            b: matrix_rows(&fl.b),
            feasible: report.feasible,
            input_rank: report.input_rank,
            distribution_ranks: report.distributions.iter().map(|d| d.rank_at_x0).collect(),
            involutive: report.distributions.iter().map(|d| d.involutive).collect(),
            z_domain_lo: fl.z_domain.lo.clone(),
            z_domain_hi: fl.z_domain.hi.clone(),
        };
        write_analysis_artifacts(out_dir, &analysis, &fl, &resolved)?;
        output.analysis = Some(analysis);
    }

    if do_steer {
        let bridge_spec = resolved.scenario.bridge.clone().expect("validated");
        let epsilon = bridge_spec.epsilon;
        let plant = LinearizedPlant::from_linearization(fl.clone(), epsilon)?;
        let grid = GridSpec::new(
            bridge_spec.grid_lo.clone(),
            bridge_spec.grid_hi.clone(),
            bridge_spec.grid_shape.clone(),
        );
        let rho0 = load_endpoint(resolved.scenario.rho0.as_ref().expect("validated"), base_dir)?;
        let rho1 = load_endpoint(resolved.scenario.rho1.as_ref().expect("validated"), base_dir)?;
        let (sigma0, factor0) = pushforward_density(rho0.as_ref(), fl.as_ref(), &grid)?;
        let (sigma1, factor1) = pushforward_density(rho1.as_ref(), fl.as_ref(), &grid)?;
        let opts = FixedPointOptions {
            nt: bridge_spec.nt,
            tol: bridge_spec.tol,
            max_iter: bridge_spec.max_iter,
            stepping: Stepping::Auto,
        };
        let solution = schrodinger_fixed_point(&plant, &sigma0, &sigma1, &opts)?;
        let energy = control_energy(&plant, &solution)?;
        let steering = SteerSummary {
            iterations: solution.iterations,
            boundary_l1_0: solution.boundary_l1.0,
            boundary_l1_1: solution.boundary_l1.1,
            flagged_fraction: solution.flagged_fraction,
            grid_energy: energy,
            pushforward_factor_rho0: factor0,
            pushforward_factor_rho1: factor1,
        };
        write_steer_artifacts(out_dir, &solution, &steering)?;

        if do_simulate {
            let simcfg = SimConfig::new(
                resolved.scenario.sim.dt,
                1.0,
                resolved.scenario.sim.particles,
                resolved.scenario.sim.seed,
                resolved.scenario.sim.scheme,
            )
            .map_err(crate::Error::Sim)?;
            // z-side ensemble: sample ρ0, push through τ
            use rand_chacha::rand_core::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(resolved.scenario.sim.seed);
            let x_init = rho0.sample_particles(resolved.scenario.sim.particles, &mut rng);
            let z_init = x_init.map(|x| fl.tau_at(x).map_err(DensityError::from))?;
            let traj = match resolved.scenario.sim.scheme {
                Scheme::Deterministic => {
                    liouville_flow(&plant, &solution.v_opt, &z_init, &simcfg)?
                }
                Scheme::EulerMaruyama => {
                    euler_maruyama(&plant, &solution.v_opt, &z_init, &simcfg)?
                }
            };
            let (term_mean, term_cov) = traj.terminal().moments();
            let (target_mean, target_cov) = sigma1.moments();
            // original-coordinate consistency run (deterministic by
            // construction)
            let steer_cfg = SimConfig::new(
                resolved.scenario.sim.dt,
                1.0,
                resolved.scenario.sim.steer_particles,
                resolved.scenario.sim.seed.wrapping_add(1),
                Scheme::Deterministic,
            )
            .map_err(crate::Error::Sim)?;
            let steer = steer_original_coordinates(
                &resolved.system,
                &fl,
                &plant,
                &solution.v_opt,
                rho0.as_ref(),
                &steer_cfg,
            )?;
            let simulation = SimulationSummary {
                scheme: resolved.scenario.sim.scheme,
                particles: resolved.scenario.sim.particles,
                terminal_mean: term_mean.iter().cloned().collect(),
                terminal_cov_diag: (0..term_cov.nrows()).map(|i| term_cov[(i, i)]).collect(),
                target_mean: target_mean.iter().cloned().collect(),
                target_cov_diag: (0..target_cov.nrows()).map(|i| target_cov[(i, i)]).collect(),
                exit_flags: traj.exit_flags,
                steer_consistency: Some(steer.max_consistency),
                steer_mean_energy: Some(steer.mean_energy),
                steer_exit_flags: Some(steer.exit_flags),
            };
            write_sim_artifacts(
                out_dir,
                &traj,
                &simulation,
                resolved.scenario.sim.csv_particles,
            )?;
            // recovered original-coordinate density of σ1 for the report,
            // grid permitting
            if grid.dim() <= 3 {
                let x_grid = GridSpec::new(
                    resolved.system.domain.lo.clone(),
                    resolved.system.domain.hi.clone(),
                    bridge_spec.grid_shape.clone(),
                );
                if let Ok((rho1_back, _)) =
                    recover_original_density(&sigma1, fl.as_ref(), &x_grid)
                {
                    rho1_back.write_csv(&out_dir.join("rho1_recovered.csv"))?;
                }
            }
            output.simulation = Some(simulation);
            output.steer_report = Some(steer);
        }
        output.steering = Some(steering);
        output.solution = Some(solution);
    }

    write_manifest(out_dir, &resolved.scenario, &hash, &output)?;
    Ok(output)
}

fn write_manifest(
    out_dir: &Path,
    scenario: &Scenario,
    hash: &str,
    output: &RunOutput,
) -> Result<(), Error> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        scenario_hash: &'a str,
        version: &'a str,
        mode: RunMode,
        iterations: Option<usize>,
        residual_history: Option<&'a [f64]>,
        scenario: &'a Scenario,
    }
    let manifest = Manifest {
        scenario_hash: hash,
        version: env!("CARGO_PKG_VERSION"),
        mode: output.mode,
        iterations: output.steering.as_ref().map(|s| s.iterations),
        residual_history: output
            .solution
            .as_ref()
            .map(|s| s.residual_history.as_slice()),
        scenario,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| {
        Error::Scenario(ScenarioError::Unsupported(format!(
            "manifest serialization: {e}"
        )))
    })?;
    std::fs::write(out_dir.join("manifest.toml"), text)?;
    // wall-clock stamp lives apart so artifact bytes stay reproducible
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::write(
        out_dir.join("runinfo.txt"),
        format!("unix_time={stamp}\n"),
    )?;
    Ok(())
}

fn write_analysis_artifacts(
    out_dir: &Path,
    analysis: &AnalysisReport,
    fl: &FeedbackLinearization,
    resolved: &ResolvedScenario,
) -> Result<(), Error> {
    let toml_text = toml::to_string_pretty(analysis).map_err(|e| {
        Error::Scenario(ScenarioError::Unsupported(format!(
            "analysis serialization: {e}"
        )))
    })?;
    std::fs::write(out_dir.join("analysis.toml"), toml_text)?;

    let mut txt = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(txt, "Feedback linearization analysis");
    let _ = writeln!(txt, "===============================");
    let _ = writeln!(
        txt,
        "state dim n = {}, input dim m = {}",
        analysis.state_dim, analysis.input_dim
    );
    let _ = writeln!(txt, "vector relative degree pi = {:?}", analysis.pi);
    let _ = writeln!(txt, "sum(pi) = {}", analysis.total_relative_degree);
    let _ = writeln!(txt, "decoupling matrix C(x0):");
    for row in &analysis.c0 {
        let _ = writeln!(txt, "  {row:?}");
    }
    let _ = writeln!(txt, "span/involutivity feasibility: {}", analysis.feasible);
    let _ = writeln!(txt, "rank G(x0) = {}", analysis.input_rank);
    let _ = writeln!(
        txt,
        "distribution ranks at x0: {:?}",
        analysis.distribution_ranks
    );
    let _ = writeln!(txt, "involutivity flags: {:?}", analysis.involutive);
    let _ = writeln!(txt, "Brunovsky A:");
    for row in &analysis.a {
        let _ = writeln!(txt, "  {row:?}");
    }
    let _ = writeln!(txt, "Brunovsky B:");
    for row in &analysis.b {
        let _ = writeln!(txt, "  {row:?}");
    }
    let _ = writeln!(txt, "z-domain (corner image): lo = {:?}, hi = {:?}",
        analysis.z_domain_lo, analysis.z_domain_hi);

    // spot tables of the triple at the expansion point and nearby probes
    let _ = writeln!(txt, "\nspot tables (tau / delta / Gamma):");
    let mut points = vec![resolved.x0.clone()];
    points.extend(crate::probe::probe_points(&resolved.x0, 0.25, 3));
    for x in &points {
        let _ = writeln!(txt, "  x = {x:?}");
        if let Ok(z) = fl.tau_at(x) {
            let _ = writeln!(txt, "    tau(x)   = {z:?}");
        }
        if let Ok((delta, gamma)) = fl.delta_gamma(x) {
            let _ = writeln!(txt, "    delta(x) = {:?}", delta.as_slice());
            let _ = writeln!(txt, "    Gamma(x) = {:?}", matrix_rows(&gamma));
        }
    }
    std::fs::write(out_dir.join("analysis.txt"), txt)?;
    Ok(())
}

fn write_long_csv(
    path: &Path,
    field: &crate::bridge::SpaceTimeField,
    value_name: &str,
) -> Result<(), Error> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = field.grid.dim();
    write!(file, "t")?;
    for a in 0..d {
        write!(file, ",z{}", a + 1)?;
    }
    writeln!(file, ",{value_name}")?;
    for k in 0..=field.nt {
        let t = field.time(k);
        let slice = field.slice(k);
        for (c, v) in slice.iter().enumerate() {
            let center = field.grid.center(c);
            write!(file, "{t}")?;
            for z in &center {
                write!(file, ",{z}")?;
            }
            writeln!(file, ",{v}")?;
        }
    }
    Ok(())
}

fn write_steer_artifacts(
    out_dir: &Path,
    solution: &SchrodingerSolution,
    summary: &SteerSummary,
) -> Result<(), Error> {
    write_long_csv(&out_dir.join("sigma_opt.csv"), &solution.sigma_opt, "sigma")?;
    write_long_csv(&out_dir.join("psi.csv"), &solution.psi, "psi")?;
    // control components as separate long files
    for comp in 0..solution.v_opt.m {
        let path = out_dir.join(format!("v_opt_{}.csv", comp + 1));
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = solution.v_opt.grid.dim();
        write!(file, "t")?;
        for a in 0..d {
            write!(file, ",z{}", a + 1)?;
        }
        writeln!(file, ",v")?;
        for k in 0..=solution.v_opt.nt {
            let t = k as f64 / solution.v_opt.nt as f64;
            for (c, v) in solution.v_opt.component(k, comp).iter().enumerate() {
                let center = solution.v_opt.grid.center(c);
                write!(file, "{t}")?;
                for z in &center {
                    write!(file, ",{z}")?;
                }
                writeln!(file, ",{v}")?;
            }
        }
    }
    // per-slice grid files at a coarse stride
    let slices_dir = out_dir.join("slices");
    std::fs::create_dir_all(&slices_dir)?;
    let stride = (solution.sigma_opt.nt / 10).max(1);
    for k in (0..=solution.sigma_opt.nt).step_by(stride) {
        let values = solution.sigma_opt.slice(k).to_vec();
        if let Ok((gd, _)) =
            GridDensity::from_unnormalized(solution.sigma_opt.grid.clone(), values)
        {
            gd.write_csv(&slices_dir.join(format!("sigma_t{k:04}.csv")))?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("residuals.csv"))?);
    writeln!(file, "iteration,l1_change")?;
    for (i, r) in solution.residual_history.iter().enumerate() {
        writeln!(file, "{},{r}", i + 1)?;
    }
    let text = toml::to_string_pretty(summary).map_err(|e| {
        Error::Scenario(ScenarioError::Unsupported(format!(
            "steer summary serialization: {e}"
        )))
    })?;
    std::fs::write(out_dir.join("steer_summary.toml"), text)?;
    Ok(())
}

fn write_sim_artifacts(
    out_dir: &Path,
    traj: &SimTrajectory,
    summary: &SimulationSummary,
    csv_particles: usize,
) -> Result<(), Error> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("trajectory.csv"))?);
    let d = traj.frames[0].dim();
    write!(file, "t,particle")?;
    for a in 0..d {
        write!(file, ",z{}", a + 1)?;
    }
    writeln!(file)?;
    for (t, frame) in traj.times.iter().zip(&traj.frames) {
        for p in 0..frame.len().min(csv_particles) {
            write!(file, "{t},{p}")?;
            for v in frame.point(p) {
                write!(file, ",{v}")?;
            }
            writeln!(file)?;
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("moments.csv"))?);
    write!(file, "t")?;
    for a in 0..d {
        write!(file, ",mean{}", a + 1)?;
    }
    for a in 0..d {
        write!(file, ",var{}", a + 1)?;
    }
    writeln!(file)?;
    for (t, frame) in traj.times.iter().zip(&traj.frames) {
        let (mean, cov) = frame.moments();
        write!(file, "{t}")?;
        for v in mean.iter() {
            write!(file, ",{v}")?;
        }
        for a in 0..d {
            write!(file, ",{}", cov[(a, a)])?;
        }
        writeln!(file)?;
    }
    let text = toml::to_string_pretty(summary).map_err(|e| {
        Error::Scenario(ScenarioError::Unsupported(format!(
            "simulation summary serialization: {e}"
        )))
    })?;
    std::fs::write(out_dir.join("simulation_summary.toml"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_entries_resolve() {
        for name in REGISTRY_NAMES {
            let entry = registry(name).unwrap_or_else(|| panic!("registry {name}"));
            assert_eq!(entry.outputs.len(), entry.system.input_dim());
            assert_eq!(entry.x0.len(), entry.system.state_dim());
        }
        assert!(registry("nonexistent").is_none());
    }

    #[test]
    fn toy2d_inverse_matches_forward() {
        let entry = registry("toy2d_nonlinear").unwrap();
        let InverseMap::Closure(inv) = entry.inverse.unwrap() else {
            panic!("expected closure inverse");
        };
        for x2 in [-1.2, -0.3, 0.0, 0.7, 1.5] {
            let z = [0.4, x2 + x2 * x2 * x2];
            let back = inv(&z);
            assert!((back[1] - x2).abs() < 1e-12, "x2 = {x2}: got {}", back[1]);
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let scn = Scenario {
            system: SystemSpec {
                registry: Some("toy1d".into()),
                ..Default::default()
            },
            outputs: None,
            x0: None,
            rho0: Some(EndpointSpec::Gaussian {
                mean: vec![-1.0],
                cov: vec![vec![0.25]],
            }),
            rho1: Some(EndpointSpec::Gaussian {
                mean: vec![1.0],
                cov: vec![vec![0.25]],
            }),
            bridge: Some(BridgeSpec {
                epsilon: 0.5,
                grid_lo: vec![-4.0],
                grid_hi: vec![4.0],
                grid_shape: vec![100],
                nt: 50,
                tol: 1e-8,
                max_iter: 200,
            }),
            sim: SimSpec::default(),
            mode: "steer".into(),
        };
        let h1 = scenario_hash(&scn);
        let h2 = scenario_hash(&scn);
        assert_eq!(h1, h2);
        let mut other = scn.clone();
        other.bridge.as_mut().unwrap().epsilon = 0.25;
        assert_ne!(h1, scenario_hash(&other));
    }

    #[test]
    fn validate_catches_output_count_mismatch() {
        let scn = Scenario {
            system: SystemSpec {
                registry: Some("paper_example".into()),
                ..Default::default()
            },
            outputs: Some(vec!["x1 - x5".into()]), // needs 2
            x0: None,
            rho0: Some(EndpointSpec::Gaussian {
                mean: vec![0.0; 5],
                cov: identity_cov(5),
            }),
            rho1: Some(EndpointSpec::Gaussian {
                mean: vec![0.0; 5],
                cov: identity_cov(5),
            }),
            bridge: Some(BridgeSpec {
                epsilon: 0.5,
                grid_lo: vec![-1.0; 5],
                grid_hi: vec![1.0; 5],
                grid_shape: vec![4; 5],
                nt: 10,
                tol: 1e-8,
                max_iter: 10,
            }),
            sim: SimSpec::default(),
            mode: "analyze".into(),
        };
        let diags = validate_scenario(&scn, Path::new("."));
        assert!(diags.iter().any(|d| d.path == "outputs"), "{diags:?}");
    }

    #[test]
    fn validate_flags_missing_grid_file() {
        let scn = Scenario {
            system: SystemSpec {
                registry: Some("toy1d".into()),
                ..Default::default()
            },
            outputs: None,
            x0: None,
            rho0: Some(EndpointSpec::Grid {
                path: "no_such_file.csv".into(),
            }),
            rho1: Some(EndpointSpec::Gaussian {
                mean: vec![1.0],
                cov: vec![vec![0.25]],
            }),
            bridge: Some(BridgeSpec {
                epsilon: 0.5,
                grid_lo: vec![-4.0],
                grid_hi: vec![4.0],
                grid_shape: vec![50],
                nt: 20,
                tol: 1e-8,
                max_iter: 50,
            }),
            sim: SimSpec::default(),
            mode: "steer".into(),
        };
        let diags = validate_scenario(&scn, Path::new("/tmp"));
        assert!(diags.iter().any(|d| d.path == "rho0.path"));
    }

    fn identity_cov(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}
