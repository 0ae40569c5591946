//! Scenario files and the end-to-end run pipeline.
//!
//! A scenario is a TOML document describing the orbit, its initial uncertainty, the filter used
//! to build the prior, the window grid and sensing sites, and the utility/privacy entries. A
//! run builds the window, synthesizes noise or precisions for the selected mode, re-checks every
//! trace with the oracle and writes plot-ready reports:
//!
//! - `precisions.csv`: `site,axis,precision,noise_variance`, one row per sensed axis
//! - `posterior_trace.csv`: `time_s,sqrt_trace_km,prior_sqrt_trace_km` over the saved grid
//! - `convergence.csv`: `iter,gamma,delta` for the iterative modes
//! - `summary.json`: the full [`RunReport`]
//! - `problem_dump.txt`: the first LMI problem, on request
//!
//! Floats in the CSV files are written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kalman::{self, GaussianBelief, PriorMoments, SigmaConfig};
use crate::lmi::SolverStats;
use crate::orbital::{self, GravityModel, OrbitalElements};
use crate::synthesis::{
    self, Bound, IterationRecord, SynthesisOptions, SynthesisResult, SynthesisStatus, TraceConstraint, TradeoffSpec,
};
use crate::window::{self, AugmentedWindow, FilterKind, InitialBelief, OrbitPropagator, WindowConfig};

/// Per-axis sensor noise used when a scenario does not set one (km²).
pub const DEFAULT_SENSOR_NOISE: f64 = 0.01;
pub const DEFAULT_ENKF_MEMBERS: usize = 100;
pub const DEFAULT_SEED: u64 = 0;
/// Position components, the default for sites and constraint entries.
const POSITION: [usize; 3] = [0, 1, 2];
const AXIS_NAMES: [&str; 6] = ["x", "y", "z", "vx", "vy", "vz"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("scenario does not match the schema: {0}")]
    Parse(String),
    #[error("invalid scenario: {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{field}: time {time} s is not on the saved grid (nearest saved times: {nearest:?})")]
    OffGrid { field: String, time: f64, nearest: Vec<f64> },
    #[error("{stage} stage failed: {message}")]
    Stage { stage: &'static str, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid { field: field.into(), message: message.into() }
}

fn stage(stage: &'static str) -> impl FnOnce(String) -> ScenarioError {
    move |message| ScenarioError::Stage { stage, message }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Largest data noise meeting the utility bounds.
    Utility,
    /// Smallest data noise meeting the privacy bounds.
    Privacy,
    /// Maximize the privacy traces subject to the utility bounds.
    UtilityAware,
    /// Minimize the utility traces subject to the privacy bounds.
    PrivacyAware,
    /// Sparse per-axis sensor precisions meeting the utility bounds.
    Precision,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "utility" => Ok(Self::Utility),
            "privacy" => Ok(Self::Privacy),
            "utility_aware" => Ok(Self::UtilityAware),
            "privacy_aware" => Ok(Self::PrivacyAware),
            "precision" => Ok(Self::Precision),
            other => Err(format!(
                "unknown mode `{other}` (expected utility, privacy, utility_aware, privacy_aware or precision)"
            )),
        }
    }
}

impl Mode {
    /// Whether the utility entries are bounds (true) or reported/optimized traces.
    fn utility_bounded(self) -> bool {
        matches!(self, Self::Utility | Self::UtilityAware | Self::Precision)
    }

    fn privacy_bounded(self) -> bool {
        matches!(self, Self::Privacy | Self::PrivacyAware)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterName {
    Ukf,
    Enkf,
}

impl std::str::FromStr for FilterName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ukf" => Ok(Self::Ukf),
            "enkf" => Ok(Self::Enkf),
            other => Err(format!("unknown filter `{other}` (expected ukf or enkf)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElementsConfig {
    pub a_km: f64,
    pub e: f64,
    pub i_deg: f64,
    pub raan_deg: f64,
    pub argp_deg: f64,
    pub true_anomaly_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elements: Option<ElementsConfig>,
    /// Number of zonal harmonics after the point mass (0 to 3, i.e. up to J₄).
    #[serde(default)]
    pub zonal_terms: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// One of `a`, `e`, `i`, `raan`, `argp`, `f`.
    pub parameter: String,
    /// Standard deviation as a fraction of the parameter's mean value.
    pub sigma_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon_s: f64,
    pub dt_s: f64,
    pub save_every: usize,
    /// Extra saved times (s) off the uniform grid, typically constraint times.
    #[serde(default)]
    pub extra_times_s: Vec<f64>,
    /// Orbital period (s) echoed in reports; informational.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbital_period_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub time_s: f64,
    #[serde(default)]
    pub components: Option<Vec<usize>>,
    /// Per-axis sensor noise for this site (km²); overrides the scenario value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensor_noise_km2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryConfig {
    pub time_s: f64,
    #[serde(default)]
    pub components: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_km2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction_of_prior: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub max_iter: Option<usize>,
}

/// Scenario file contents. After [`load_scenario`] every optional field is filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub mode: Mode,
    pub orbit: OrbitConfig,
    pub init_uncertainty: UncertaintyConfig,
    #[serde(default)]
    pub filter: Option<FilterConfig>,
    pub window: GridConfig,
    #[serde(default)]
    pub sensor_noise_km2: Option<f64>,
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub utility: Vec<EntryConfig>,
    #[serde(default)]
    pub privacy: Vec<EntryConfig>,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// Defaults filled in or overrides applied, in the order they happened.
    pub defaults_applied: Vec<String>,
}

/// Parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Read { path: path.to_path_buf(), source })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    Scenario::new(config)
}

/// Command-line overrides applied on top of a loaded scenario.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub filter: Option<FilterName>,
    pub tol: Option<f64>,
}

impl Scenario {
    pub fn new(mut config: ScenarioConfig) -> Result<Self, ScenarioError> {
        let mut defaults = Vec::new();
        fill_defaults(&mut config, &mut defaults);
        validate(&config)?;
        Ok(Self { config, defaults_applied: defaults })
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self, ScenarioError> {
        let c = &mut self.config;
        if let Some(mode) = o.mode {
            if mode != c.mode {
                self.defaults_applied.push(format!("mode overridden to {mode:?}"));
                c.mode = mode;
            }
        }
        if let Some(kind) = o.filter {
            let f = c.filter.get_or_insert_with(|| FilterConfig { kind, n: None, seed: None, alpha: None, beta: None, kappa: None });
            if f.kind != kind {
                *f = FilterConfig { kind, n: None, seed: None, alpha: None, beta: None, kappa: None };
                self.defaults_applied.push(format!("filter overridden to {kind:?}"));
            }
        }
        if let Some(seed) = o.seed {
            let f = c.filter.as_mut().expect("filled by defaults");
            if f.kind == FilterName::Enkf {
                f.seed = Some(seed);
                self.defaults_applied.push(format!("seed overridden to {seed}"));
            } else {
                self.defaults_applied.push(format!("seed {seed} ignored by the unscented filter"));
            }
        }
        if let Some(tol) = o.tol {
            c.solver.get_or_insert(SolverConfig { tol: None, eps: None, max_iter: None }).tol = Some(tol);
            self.defaults_applied.push(format!("solver tolerance overridden to {tol:e}"));
        }
        fill_defaults(c, &mut self.defaults_applied);
        validate(c)?;
        Ok(self)
    }

    pub fn seed(&self) -> Option<u64> {
        self.config.filter.as_ref().filter(|f| f.kind == FilterName::Enkf).and_then(|f| f.seed)
    }

    fn window_config(&self) -> WindowConfig {
        let c = &self.config;
        let mut extra = c.window.extra_times_s.clone();
        extra.sort_by(f64::total_cmp);
        WindowConfig {
            horizon: c.window.horizon_s,
            dt: c.window.dt_s,
            save_every: c.window.save_every,
            extra_times: extra,
            meas_times: c.sites.iter().map(|s| s.time_s).collect(),
            meas_components: c.sites.iter().map(|s| s.components.clone().expect("filled")).collect(),
        }
    }

    fn gravity(&self) -> Result<GravityModel, ScenarioError> {
        let n = self.config.orbit.zonal_terms.expect("filled");
        GravityModel::earth(n).map_err(|e| invalid("orbit.zonal_terms", e.to_string()))
    }

    fn mean_elements(&self, g: &GravityModel) -> Result<OrbitalElements, ScenarioError> {
        let o = &self.config.orbit;
        match (&o.tle, &o.elements) {
            (Some(tle), None) => {
                let t = orbital::Tle::parse(tle).map_err(|e| invalid("orbit.tle", e.to_string()))?;
                t.to_elements(g.mu).map_err(|e| invalid("orbit.tle", e.to_string()))
            }
            (None, Some(e)) => OrbitalElements::new(
                e.a_km,
                e.e,
                e.i_deg.to_radians(),
                e.raan_deg.to_radians(),
                e.argp_deg.to_radians(),
                e.true_anomaly_deg.to_radians(),
            )
            .map_err(|err| invalid("orbit.elements", err.to_string())),
            _ => Err(invalid("orbit", "exactly one of `tle` and `elements` is required")),
        }
    }

    fn initial_belief(&self) -> Result<InitialBelief, ScenarioError> {
        let g = self.gravity()?;
        let el = self.mean_elements(&g)?;
        let u = &self.config.init_uncertainty;
        let idx = parameter_index(&u.parameter).ok_or_else(|| invalid("init_uncertainty.parameter", "unknown parameter"))?;
        let mean = DVector::from_column_slice(el.to_vector().as_slice());
        let sigma = u.sigma_fraction * mean[idx].abs();
        if !(sigma > 0.0) {
            return Err(invalid(
                "init_uncertainty.sigma_fraction",
                format!("gives a zero standard deviation for `{}` (mean {})", u.parameter, mean[idx]),
            ));
        }
        let mut cov = DMatrix::zeros(6, 6);
        cov[(idx, idx)] = sigma * sigma;
        let elements = GaussianBelief::new(mean, cov).map_err(|e| invalid("init_uncertainty", e.to_string()))?;
        Ok(InitialBelief::Keplerian { elements, gravity: g })
    }

    fn filter_kind(&self) -> FilterKind {
        let f = self.config.filter.as_ref().expect("filled");
        match f.kind {
            FilterName::Enkf => FilterKind::Enkf { n: f.n.expect("filled"), seed: f.seed.expect("filled") },
            FilterName::Ukf => FilterKind::Ukf(SigmaConfig {
                alpha: f.alpha.expect("filled"),
                beta: f.beta.expect("filled"),
                kappa: f.kappa.expect("filled"),
            }),
        }
    }

    fn synthesis_options(&self) -> SynthesisOptions {
        let s = self.config.solver.as_ref().expect("filled");
        let mut opts = SynthesisOptions::default();
        opts.solver.tol = s.tol.expect("filled");
        opts.eps = s.eps.expect("filled");
        opts.max_iter = s.max_iter.expect("filled");
        opts
    }
}

fn parameter_index(name: &str) -> Option<usize> {
    ["a", "e", "i", "raan", "argp", "f"].iter().position(|p| *p == name)
}

fn fill_defaults(c: &mut ScenarioConfig, d: &mut Vec<String>) {
    if c.orbit.zonal_terms.is_none() {
        c.orbit.zonal_terms = Some(3);
        d.push("orbit.zonal_terms = 3 (J2..J4)".into());
    }
    let f = c.filter.get_or_insert_with(|| {
        d.push("filter.kind = ukf".into());
        FilterConfig { kind: FilterName::Ukf, n: None, seed: None, alpha: None, beta: None, kappa: None }
    });
    match f.kind {
        FilterName::Ukf => {
            let def = SigmaConfig::default();
            for (slot, v, name) in [(&mut f.alpha, def.alpha, "alpha"), (&mut f.beta, def.beta, "beta"), (&mut f.kappa, def.kappa, "kappa")] {
                if slot.is_none() {
                    *slot = Some(v);
                    d.push(format!("filter.{name} = {v}"));
                }
            }
        }
        FilterName::Enkf => {
            if f.n.is_none() {
                f.n = Some(DEFAULT_ENKF_MEMBERS);
                d.push(format!("filter.n = {DEFAULT_ENKF_MEMBERS}"));
            }
            if f.seed.is_none() {
                f.seed = Some(DEFAULT_SEED);
                d.push(format!("filter.seed = {DEFAULT_SEED}"));
            }
        }
    }
    if c.sensor_noise_km2.is_none() {
        c.sensor_noise_km2 = Some(DEFAULT_SENSOR_NOISE);
        d.push(format!("sensor_noise_km2 = {DEFAULT_SENSOR_NOISE}"));
    }
    for (i, s) in c.sites.iter_mut().enumerate() {
        if s.components.is_none() {
            s.components = Some(POSITION.to_vec());
            d.push(format!("sites[{i}].components = [0, 1, 2]"));
        }
    }
    for (list, name) in [(&mut c.utility, "utility"), (&mut c.privacy, "privacy")] {
        for (i, e) in list.iter_mut().enumerate() {
            if e.components.is_none() {
                e.components = Some(POSITION.to_vec());
                d.push(format!("{name}[{i}].components = [0, 1, 2]"));
            }
        }
    }
    let s = c.solver.get_or_insert(SolverConfig { tol: None, eps: None, max_iter: None });
    let def = SynthesisOptions::default();
    if s.tol.is_none() {
        s.tol = Some(def.solver.tol);
        d.push(format!("solver.tol = {:e}", def.solver.tol));
    }
    if s.eps.is_none() {
        s.eps = Some(def.eps);
        d.push(format!("solver.eps = {:e}", def.eps));
    }
    if s.max_iter.is_none() {
        s.max_iter = Some(def.max_iter);
        d.push(format!("solver.max_iter = {}", def.max_iter));
    }
}

fn positive(field: &str, v: f64) -> Result<(), ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn validate(c: &ScenarioConfig) -> Result<(), ScenarioError> {
    match (&c.orbit.tle, &c.orbit.elements) {
        (Some(_), None) | (None, Some(_)) => {}
        _ => return Err(invalid("orbit", "exactly one of `tle` and `elements` is required")),
    }
    if parameter_index(&c.init_uncertainty.parameter).is_none() {
        return Err(invalid(
            "init_uncertainty.parameter",
            format!("`{}` is not one of a, e, i, raan, argp, f", c.init_uncertainty.parameter),
        ));
    }
    positive("init_uncertainty.sigma_fraction", c.init_uncertainty.sigma_fraction)?;
    let f = c.filter.as_ref().expect("filled");
    match f.kind {
        FilterName::Ukf => {
            if f.n.is_some() || f.seed.is_some() {
                return Err(invalid("filter", "`n` and `seed` apply to the ensemble filter only"));
            }
            positive("filter.alpha", f.alpha.expect("filled"))?;
        }
        FilterName::Enkf => {
            if f.alpha.is_some() || f.beta.is_some() || f.kappa.is_some() {
                return Err(invalid("filter", "`alpha`, `beta` and `kappa` apply to the unscented filter only"));
            }
            if f.n.expect("filled") < 2 {
                return Err(invalid("filter.n", "at least 2 members are required"));
            }
        }
    }
    let noise = c.sensor_noise_km2.expect("filled");
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid("sensor_noise_km2", format!("must be finite and non-negative, got {noise}")));
    }
    for (i, s) in c.sites.iter().enumerate() {
        if let Some(v) = s.sensor_noise_km2 {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("sites[{i}].sensor_noise_km2"), format!("must be finite and non-negative, got {v}")));
            }
        }
        check_components(&format!("sites[{i}].components"), s.components.as_deref().expect("filled"))?;
    }
    if c.sites.is_empty() {
        return Err(invalid("sites", "at least one sensing site is required"));
    }
    let s = c.solver.as_ref().expect("filled");
    positive("solver.tol", s.tol.expect("filled"))?;
    positive("solver.eps", s.eps.expect("filled"))?;
    if s.max_iter.expect("filled") == 0 {
        return Err(invalid("solver.max_iter", "must be at least 1"));
    }

    let wc = WindowConfig {
        horizon: c.window.horizon_s,
        dt: c.window.dt_s,
        save_every: c.window.save_every,
        extra_times: c.window.extra_times_s.clone(),
        meas_times: c.sites.iter().map(|s| s.time_s).collect(),
        meas_components: c.sites.iter().map(|s| s.components.clone().expect("filled")).collect(),
    };
    wc.validate(6).map_err(|e| invalid("window", e.to_string()))?;
    let grid: Vec<f64> = wc
        .saved_steps()
        .map_err(|e| invalid("window", e.to_string()))?
        .iter()
        .map(|&k| k as f64 * c.window.dt_s)
        .collect();

    for (list, name, bounded) in [(&c.utility, "utility", c.mode.utility_bounded()), (&c.privacy, "privacy", c.mode.privacy_bounded())] {
        for (i, e) in list.iter().enumerate() {
            let field = format!("{name}[{i}]");
            check_components(&format!("{field}.components"), e.components.as_deref().expect("filled"))?;
            on_grid(&grid, &format!("{field}.time_s"), e.time_s)?;
            match (e.gamma_km2, e.fraction_of_prior) {
                (Some(_), Some(_)) => return Err(invalid(&field, "set at most one of `gamma_km2` and `fraction_of_prior`")),
                (Some(g), None) => positive(&format!("{field}.gamma_km2"), g)?,
                (None, Some(f)) => {
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(invalid(format!("{field}.fraction_of_prior"), format!("must lie in (0, 1], got {f}")));
                    }
                }
                (None, None) if bounded => {
                    return Err(invalid(&field, format!("mode {:?} needs a bound on every {name} entry", c.mode)))
                }
                (None, None) => {}
            }
        }
    }
    let need_utility = matches!(c.mode, Mode::Utility | Mode::UtilityAware | Mode::Precision | Mode::PrivacyAware);
    let need_privacy = matches!(c.mode, Mode::Privacy | Mode::UtilityAware | Mode::PrivacyAware);
    if need_utility && c.utility.is_empty() {
        return Err(invalid("utility", format!("mode {:?} needs at least one utility entry", c.mode)));
    }
    if need_privacy && c.privacy.is_empty() {
        return Err(invalid("privacy", format!("mode {:?} needs at least one privacy entry", c.mode)));
    }
    Ok(())
}

fn check_components(field: &str, comps: &[usize]) -> Result<(), ScenarioError> {
    if comps.is_empty() {
        return Err(invalid(field, "at least one component is required"));
    }
    if let Some(c) = comps.iter().find(|&&c| c >= 6) {
        return Err(invalid(field, format!("component {c} is out of range 0..6")));
    }
    let mut sorted = comps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != comps.len() {
        return Err(invalid(field, "components must be distinct"));
    }
    Ok(())
}

fn on_grid(grid: &[f64], field: &str, time: f64) -> Result<(), ScenarioError> {
    let tol = 1e-9 * grid.last().copied().unwrap_or(0.0).abs().max(1.0);
    if grid.iter().any(|&g| (g - time).abs() <= tol) {
        return Ok(());
    }
    let mut nearest: Vec<f64> = grid.to_vec();
    nearest.sort_by(|a, b| (a - time).abs().total_cmp(&(b - time).abs()));
    nearest.truncate(2);
    nearest.sort_by(f64::total_cmp);
    Err(ScenarioError::OffGrid { field: field.into(), time, nearest })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub dump_problem: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxisReport {
    pub component: usize,
    pub axis: &'static str,
    /// Data precision (km⁻²); `0` for an unshared axis.
    pub precision: f64,
    /// Data noise variance (km²); `+∞` for an unshared axis.
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteReport {
    /// 1-based site number in file order.
    pub site: usize,
    pub time_s: f64,
    pub sensor_noise_km2: f64,
    pub axes: Vec<AxisReport>,
    pub precision_sum: f64,
    pub noise_variance_sum: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskReport {
    pub label: String,
    pub time_s: f64,
    pub components: Vec<usize>,
    /// Resolved bound (km²); `None` for a reported or optimized trace.
    pub bound_km2: Option<f64>,
    pub prior_trace_km2: f64,
    pub achieved_trace_km2: f64,
    pub achieved_sqrt_trace_km: f64,
    pub satisfied: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorPoint {
    pub time_s: f64,
    pub sqrt_trace_km: f64,
    pub prior_sqrt_trace_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub crate_version: &'static str,
    pub filter: FilterName,
    pub seed: Option<u64>,
    pub defaults_applied: Vec<String>,
    pub saved_times: usize,
    pub augmented_dim: usize,
    pub synthesis_dim: usize,
    pub measurement_dim: usize,
    pub covariance_scale: f64,
    pub window_seconds: f64,
    pub synthesis_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: ScenarioConfig,
    pub mode: Mode,
    pub formulation: &'static str,
    pub status: SynthesisStatus,
    pub certified: bool,
    pub message: Option<String>,
    /// Best achievable trace when the problem is infeasible (km²).
    pub floor_km2: Option<f64>,
    pub objective: f64,
    pub sites: Vec<SiteReport>,
    pub utility: Vec<MaskReport>,
    pub privacy: Vec<MaskReport>,
    pub iterations: Vec<IterationRecord>,
    #[serde(skip)]
    pub posterior: Vec<PosteriorPoint>,
    pub solver: Vec<SolverStats>,
    pub metadata: Metadata,
}

fn entry_bound(e: &EntryConfig, bounded: bool) -> Bound {
    match (bounded, e.gamma_km2, e.fraction_of_prior) {
        (true, Some(g), _) => Bound::Absolute(g),
        (true, None, Some(f)) => Bound::FractionOfPrior(f),
        _ => Bound::Free,
    }
}

fn entry_label(kind: &str, e: &EntryConfig) -> String {
    let comps: Vec<&str> = e.components.as_deref().expect("filled").iter().map(|&c| AXIS_NAMES[c]).collect();
    format!("{kind}@{}s[{}]", e.time_s, comps.join(","))
}

fn build_spec(s: &Scenario, w: &AugmentedWindow) -> Result<TradeoffSpec, ScenarioError> {
    let c = &s.config;
    let mut spec = TradeoffSpec::default();
    for (list, kind, bounded, out) in [
        (&c.utility, "utility", c.mode.utility_bounded(), &mut spec.utility),
        (&c.privacy, "privacy", c.mode.privacy_bounded(), &mut spec.privacy),
    ] {
        for e in list {
            let mask = w.make_mask(e.time_s, e.components.as_deref().expect("filled")).map_err(|err| stage("window")(err.to_string()))?;
            out.push(TraceConstraint::new(entry_label(kind, e), mask.matrix, entry_bound(e, bounded)));
        }
    }
    Ok(spec)
}

fn sensor_noise(s: &Scenario) -> DMatrix<f64> {
    let c = &s.config;
    let default = c.sensor_noise_km2.expect("filled");
    let v: Vec<f64> = c
        .sites
        .iter()
        .flat_map(|site| {
            let n = site.components.as_ref().expect("filled").len();
            std::iter::repeat_n(site.sensor_noise_km2.unwrap_or(default), n)
        })
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(v))
}

/// Noise data the mode's formulation actually used; the precision mode treats `λ` as the
/// whole sensor precision.
fn effective_prior(mode: Mode, pm: &PriorMoments) -> PriorMoments {
    if mode == Mode::Precision {
        let m = pm.meas_dim();
        PriorMoments { r_sensor: DMatrix::zeros(m, m), ..pm.clone() }
    } else {
        pm.clone()
    }
}

fn dispatch(
    mode: Mode,
    pm: &PriorMoments,
    c: &DMatrix<f64>,
    spec: &TradeoffSpec,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, synthesis::SynthesisError> {
    match mode {
        Mode::Utility => synthesis::max_noise_for_utility(pm, spec, opts),
        Mode::Privacy => synthesis::min_noise_for_privacy(pm, spec, opts),
        Mode::UtilityAware => synthesis::utility_aware_privacy(pm, Some(c), spec, opts),
        Mode::PrivacyAware => synthesis::privacy_aware_utility(pm, Some(c), spec, opts),
        Mode::Precision => synthesis::min_precision_for_utility(pm, Some(c), spec, opts),
    }
}

/// Posterior under the synthesized data, or `None` when the run produced none.
fn posterior_of(pm: &PriorMoments, res: &SynthesisResult) -> Result<Option<DMatrix<f64>>, ScenarioError> {
    let post = if let Some(s) = &res.s_data {
        kalman::posterior_covariance_precision(pm, s)
    } else if let Some(r) = &res.r_data {
        kalman::posterior_covariance(pm, r)
    } else {
        return Ok(None);
    };
    post.map(Some).map_err(|e| stage("verify")(e.to_string()))
}

fn site_reports(s: &Scenario, res: &SynthesisResult) -> Vec<SiteReport> {
    let c = &s.config;
    let default = c.sensor_noise_km2.expect("filled");
    let diag_precision = res.s_data.as_ref().map(|m| m.diagonal());
    let diag_noise = res.r_data.as_ref().map(|m| m.diagonal());
    let mut row = 0;
    c.sites
        .iter()
        .enumerate()
        .map(|(i, site)| {
            let axes: Vec<AxisReport> = site
                .components
                .as_ref()
                .expect("filled")
                .iter()
                .map(|&comp| {
                    let (precision, noise_variance) = match (&diag_precision, &diag_noise) {
                        (Some(p), _) => (p[row], if p[row] > 0.0 { 1.0 / p[row] } else { f64::INFINITY }),
                        (None, Some(r)) => (if r[row] > 0.0 { 1.0 / r[row] } else { f64::INFINITY }, r[row]),
                        (None, None) => (f64::NAN, f64::NAN),
                    };
                    row += 1;
                    AxisReport { component: comp, axis: AXIS_NAMES[comp], precision, noise_variance }
                })
                .collect();
            let precision_sum = axes.iter().map(|a| a.precision).sum::<f64>();
            SiteReport {
                site: i + 1,
                time_s: site.time_s,
                sensor_noise_km2: if s.config.mode == Mode::Precision { 0.0 } else { site.sensor_noise_km2.unwrap_or(default) },
                noise_variance_sum: axes.iter().map(|a| a.noise_variance).sum(),
                active: precision_sum > 0.0,
                axes,
                precision_sum,
            }
        })
        .collect()
}

fn mask_reports(
    entries: &[EntryConfig],
    constraints: &[TraceConstraint],
    bounds: &[Option<f64>],
    achieved: &[f64],
    prior: &DMatrix<f64>,
    utility: bool,
) -> Vec<MaskReport> {
    entries
        .iter()
        .zip(constraints)
        .enumerate()
        .map(|(i, (e, con))| {
            let bound = bounds.get(i).copied().flatten();
            let value = achieved.get(i).copied().unwrap_or(f64::NAN);
            MaskReport {
                label: con.label.clone(),
                time_s: e.time_s,
                components: e.components.clone().expect("filled"),
                bound_km2: bound,
                prior_trace_km2: (&con.mask * prior * con.mask.transpose()).trace(),
                achieved_trace_km2: value,
                achieved_sqrt_trace_km: value.max(0.0).sqrt(),
                satisfied: bound.filter(|_| value.is_finite()).map(|g| {
                    if utility {
                        value <= g + synthesis::CERT_TOL
                    } else {
                        value >= g - synthesis::CERT_TOL
                    }
                }),
            }
        })
        .collect()
}

/// Window, prior and trace constraints of a scenario, before synthesis.
#[derive(Debug, Clone)]
pub struct Problem {
    /// Window over the full saved grid.
    pub window: AugmentedWindow,
    /// Window kept to the constraint and measurement times; synthesis runs on this one.
    pub reduced: AugmentedWindow,
    /// Prior of `window` with the sensor noise the mode uses.
    pub prior_full: PriorMoments,
    /// Prior of `reduced` with the sensor noise the mode uses.
    pub prior: PriorMoments,
    /// Constraints on `reduced`; entries on the unbounded side are [`Bound::Free`].
    pub spec: TradeoffSpec,
}

/// Builds the window and the synthesis problem of a scenario without solving it.
pub fn build_problem(s: &Scenario) -> Result<Problem, ScenarioError> {
    let c = &s.config;
    let init = s.initial_belief()?;
    let gravity = s.gravity()?;
    let wc = s.window_config();
    let window = window::build_window(&init, &wc, s.filter_kind(), &OrbitPropagator { gravity })
        .map_err(|e| stage("window")(e.to_string()))?;
    let noise = sensor_noise(s);
    let mut constraint_times: Vec<f64> = c.utility.iter().chain(&c.privacy).map(|e| e.time_s).collect();
    constraint_times.sort_by(f64::total_cmp);
    constraint_times.dedup();
    let reduced = window.restrict_to_times(&constraint_times).map_err(|e| stage("window")(e.to_string()))?;
    let with_noise = |w: &AugmentedWindow| {
        w.prior.clone().with_sensor_noise(noise.clone()).map(|pm| effective_prior(c.mode, &pm)).map_err(|e| stage("window")(e.to_string()))
    };
    let prior_full = with_noise(&window)?;
    let prior = with_noise(&reduced)?;
    let spec = build_spec(s, &reduced)?;
    Ok(Problem { window, reduced, prior_full, prior, spec })
}

/// Runs the scenario and writes the report files into `out_dir`.
///
/// An infeasible synthesis still produces a report; only pipeline failures return an error.
pub fn run(s: &Scenario, out_dir: &Path, opts: &RunOptions) -> Result<RunReport, ScenarioError> {
    let c = &s.config;
    let t0 = Instant::now();
    let Problem { window: full, reduced: small, prior_full: pm_full, prior: pm, spec } = build_problem(s)?;
    let window_seconds = t0.elapsed().as_secs_f64();

    let mut sopts = s.synthesis_options();
    sopts.dump_problem = opts.dump_problem;
    let t1 = Instant::now();
    let res = dispatch(c.mode, &pm, &small.meas_matrix, &spec, &sopts).map_err(|e| stage("synthesis")(e.to_string()))?;
    let synthesis_seconds = t1.elapsed().as_secs_f64();

    // full-window posterior for the diagnostic grid
    let post = posterior_of(&pm_full, &res)?;
    let prior_series = full.sqrt_trace_series(&full.prior.sigma_xx, &POSITION);
    let post_series = post.as_ref().map(|p| full.sqrt_trace_series(p, &POSITION));
    let posterior: Vec<PosteriorPoint> = full
        .saved_times
        .iter()
        .enumerate()
        .map(|(i, &t)| PosteriorPoint {
            time_s: t,
            sqrt_trace_km: post_series.as_ref().map_or(f64::NAN, |p| p[i]),
            prior_sqrt_trace_km: prior_series[i],
        })
        .collect();

    let filter = c.filter.as_ref().expect("filled").kind;
    let report = RunReport {
        scenario: c.clone(),
        mode: c.mode,
        formulation: res.formulation,
        status: res.status,
        certified: res.status == SynthesisStatus::Optimal && res.certified(),
        message: res.message.clone(),
        floor_km2: res.floor,
        objective: res.objective,
        sites: site_reports(s, &res),
        utility: mask_reports(&c.utility, &spec.utility, &res.utility_bounds, &res.achieved_utility, &pm.sigma_xx, true),
        privacy: mask_reports(&c.privacy, &spec.privacy, &res.privacy_bounds, &res.achieved_privacy, &pm.sigma_xx, false),
        iterations: res.iterations.clone(),
        posterior,
        solver: res.solver_stats.clone(),
        metadata: Metadata {
            crate_version: env!("CARGO_PKG_VERSION"),
            filter,
            seed: s.seed(),
            defaults_applied: s.defaults_applied.clone(),
            saved_times: full.saved_times.len(),
            augmented_dim: full.aug_dim(),
            synthesis_dim: small.aug_dim(),
            measurement_dim: pm.meas_dim(),
            covariance_scale: res.scale,
            window_seconds,
            synthesis_seconds,
        },
    };
    write_reports(&report, res.problem_dump.as_deref(), out_dir)?;
    Ok(report)
}

/// Fixed 17-significant-digit formatting used by every CSV column.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

pub fn precisions_csv(r: &RunReport) -> String {
    let mut out = String::from("site,axis,precision,noise_variance\n");
    for site in &r.sites {
        for a in &site.axes {
            let _ = writeln!(out, "{},{},{},{}", site.site, a.axis, fmt_f64(a.precision), fmt_f64(a.noise_variance));
        }
    }
    out
}

pub fn posterior_csv(r: &RunReport) -> String {
    let mut out = String::from("time_s,sqrt_trace_km,prior_sqrt_trace_km\n");
    for p in &r.posterior {
        let _ = writeln!(out, "{},{},{}", fmt_f64(p.time_s), fmt_f64(p.sqrt_trace_km), fmt_f64(p.prior_sqrt_trace_km));
    }
    out
}

pub fn convergence_csv(r: &RunReport) -> String {
    let mut out = String::from("iter,gamma,delta\n");
    for it in &r.iterations {
        let _ = writeln!(out, "{},{},{}", it.iter, fmt_f64(it.gamma), fmt_f64(it.delta));
    }
    out
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), ScenarioError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| ScenarioError::Write { path, source })
}

fn write_reports(r: &RunReport, dump: Option<&str>, dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|source| ScenarioError::Write { path: dir.to_path_buf(), source })?;
    write_file(dir, "precisions.csv", &precisions_csv(r))?;
    write_file(dir, "posterior_trace.csv", &posterior_csv(r))?;
    write_file(dir, "convergence.csv", &convergence_csv(r))?;
    let json = serde_json::to_string_pretty(r).map_err(|e| stage("report")(e.to_string()))?;
    write_file(dir, "summary.json", &json)?;
    if let Some(d) = dump {
        write_file(dir, "problem_dump.txt", d)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
mode = "utility"

[orbit]
elements = { a_km = 7000.0, e = 0.001, i_deg = 51.6, raan_deg = 10.0, argp_deg = 20.0, true_anomaly_deg = 30.0 }

[init_uncertainty]
parameter = "a"
sigma_fraction = 0.001

[window]
horizon_s = 600.0
dt_s = 10.0
save_every = 10

[[sites]]
time_s = 0.0

[[sites]]
time_s = 300.0

[[utility]]
time_s = 600.0
gamma_km2 = 1.0
"#;

    #[test]
    fn minimal_scenario_fills_defaults() {
        let s = parse_scenario(MINIMAL).unwrap();
        let f = s.config.filter.as_ref().unwrap();
        assert_eq!(f.kind, FilterName::Ukf);
        assert_eq!(f.alpha, Some(1e-3));
        assert_eq!(s.config.sensor_noise_km2, Some(DEFAULT_SENSOR_NOISE));
        assert_eq!(s.config.sites[1].components.as_deref(), Some(&[0, 1, 2][..]));
        assert!(s.defaults_applied.iter().any(|d| d.starts_with("sensor_noise_km2")));
    }

    #[test]
    fn missing_mode_is_rejected() {
        let text = MINIMAL.replace("mode = \"utility\"", "");
        let err = parse_scenario(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(ref m) if m.contains("mode")), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("save_every = 10", "save_every = 10\nsave_evry = 3");
        let err = parse_scenario(&text).unwrap_err();
        assert!(matches!(err, ScenarioError::Parse(ref m) if m.contains("save_evry")), "{err}");
    }

    #[test]
    fn off_grid_constraint_lists_neighbours() {
        let text = MINIMAL.replace("time_s = 600.0", "time_s = 250.0");
        match parse_scenario(&text).unwrap_err() {
            ScenarioError::OffGrid { time, nearest, .. } => {
                assert_eq!(time, 250.0);
                assert_eq!(nearest, vec![200.0, 300.0]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn mode_requirements() {
        let text = MINIMAL.replace("mode = \"utility\"", "mode = \"privacy\"");
        assert!(matches!(parse_scenario(&text).unwrap_err(), ScenarioError::Invalid { ref field, .. } if field == "privacy"));
        let text = MINIMAL.replace("gamma_km2 = 1.0", "");
        assert!(matches!(parse_scenario(&text).unwrap_err(), ScenarioError::Invalid { ref field, .. } if field == "utility[0]"));
    }

    #[test]
    fn filter_keys_must_match_kind() {
        let text = format!("{MINIMAL}\n[filter]\nkind = \"ukf\"\nseed = 3\n");
        assert!(parse_scenario(&text).is_err());
        let text = format!("{MINIMAL}\n[filter]\nkind = \"enkf\"\n");
        let s = parse_scenario(&text).unwrap();
        assert_eq!(s.seed(), Some(DEFAULT_SEED));
    }

    #[test]
    fn overrides_switch_filter_and_seed() {
        let s = parse_scenario(MINIMAL)
            .unwrap()
            .with_overrides(&Overrides { filter: Some(FilterName::Enkf), seed: Some(7), mode: Some(Mode::Precision), tol: Some(1e-7) })
            .unwrap();
        assert_eq!(s.seed(), Some(7));
        assert_eq!(s.config.mode, Mode::Precision);
        assert_eq!(s.config.solver.as_ref().unwrap().tol, Some(1e-7));
        assert_eq!(s.config.filter.as_ref().unwrap().n, Some(DEFAULT_ENKF_MEMBERS));
    }

    #[test]
    fn csv_floats_have_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }
}
