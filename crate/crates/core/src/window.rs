//! Augmented batch model over a window of saved times.
//!
//! Every ensemble member is propagated through the whole horizon and its states at the saved
//! times are stacked into one augmented vector `X = (x_{t₀}, x_{t₁}, …)`. Measurements are
//! linear selections of position components, `Y = C X`, so the prior blocks follow from the
//! augmented state covariance alone.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::kalman::{self, Ensemble, GaussianBelief, KalmanError, PriorMoments, SigmaConfig};
use crate::linalg;
use crate::orbital::{self, GravityModel, OrbitalElements, StateVector};

/// Relative tolerance when matching a time in seconds to the integer step grid.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("invalid window configuration: {0}")]
    Config(String),
    #[error("time {time} s is not on the saved grid (nearest saved times: {nearest:?})")]
    OffGrid { time: f64, nearest: Vec<f64> },
    #[error("component {component} is out of range for state dimension {state_dim}")]
    Component { component: usize, state_dim: usize },
    #[error("propagation of member {member} failed: {message}")]
    Propagation { member: usize, message: String },
    #[error(transparent)]
    Kalman(#[from] KalmanError),
}

/// Time grid and sensing layout of a batch window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    /// Window length (s).
    pub horizon: f64,
    /// Integrator step (s).
    pub dt: f64,
    /// Integrator steps between uniformly saved states.
    pub save_every: usize,
    /// Additional times (s) to save, typically constraint times.
    pub extra_times: Vec<f64>,
    /// Measurement times (s), strictly increasing.
    pub meas_times: Vec<f64>,
    /// Sensed state components at each measurement time.
    pub meas_components: Vec<Vec<usize>>,
}

impl WindowConfig {
    /// Integer step index of `time`, or `None` when it is off the integrator grid.
    fn step_of(&self, time: f64) -> Option<usize> {
        let k = time / self.dt;
        let r = k.round();
        if r < 0.0 || (k - r).abs() > GRID_TOL * k.abs().max(1.0) {
            None
        } else {
            Some(r as usize)
        }
    }

    pub fn total_steps(&self) -> Result<usize, WindowError> {
        self.step_of(self.horizon)
            .ok_or_else(|| WindowError::Config(format!("horizon {} s is not a multiple of dt {} s", self.horizon, self.dt)))
    }

    pub fn validate(&self, state_dim: usize) -> Result<(), WindowError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(WindowError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(WindowError::Config(format!("horizon must be non-negative, got {}", self.horizon)));
        }
        if self.save_every == 0 {
            return Err(WindowError::Config("save_every must be at least 1".into()));
        }
        let steps = self.total_steps()?;
        if steps % self.save_every != 0 {
            return Err(WindowError::Config(format!(
                "horizon ({steps} steps) is not divisible by save_every ({})",
                self.save_every
            )));
        }
        if self.meas_times.len() != self.meas_components.len() {
            return Err(WindowError::Config(format!(
                "{} measurement times but {} component lists",
                self.meas_times.len(),
                self.meas_components.len()
            )));
        }
        if self.meas_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(WindowError::Config("measurement times must be strictly increasing".into()));
        }
        for &t in self.meas_times.iter().chain(&self.extra_times) {
            match self.step_of(t) {
                Some(k) if k <= steps => {}
                _ => {
                    return Err(WindowError::Config(format!(
                        "time {t} s is outside [0, {}] or not a multiple of dt",
                        self.horizon
                    )))
                }
            }
        }
        for comps in &self.meas_components {
            if comps.is_empty() {
                return Err(WindowError::Config("every measurement time needs at least one component".into()));
            }
            if let Some(&c) = comps.iter().find(|&&c| c >= state_dim) {
                return Err(WindowError::Component { component: c, state_dim });
            }
        }
        Ok(())
    }

    /// Saved step indices: the uniform grid plus measurement and extra times, sorted and unique.
    pub fn saved_steps(&self) -> Result<Vec<usize>, WindowError> {
        let steps = self.total_steps()?;
        let mut out: Vec<usize> = (0..=steps).step_by(self.save_every).collect();
        for &t in self.meas_times.iter().chain(&self.extra_times) {
            out.push(self.step_of(t).ok_or_else(|| WindowError::Config(format!("time {t} s is off the dt grid")))?);
        }
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    pub fn meas_dim(&self) -> usize {
        self.meas_components.iter().map(Vec::len).sum()
    }
}

/// Maps an initial state to the states at the requested (sorted) step indices.
pub trait StatePropagator: Sync {
    fn state_dim(&self) -> usize;
    fn propagate_to_steps(&self, x0: &DVector<f64>, dt: f64, steps: &[usize]) -> Result<Vec<DVector<f64>>, String>;
}

/// Cowell propagation of Cartesian orbital states.
#[derive(Debug, Clone)]
pub struct OrbitPropagator {
    pub gravity: GravityModel,
}

impl StatePropagator for OrbitPropagator {
    fn state_dim(&self) -> usize {
        6
    }

    fn propagate_to_steps(&self, x0: &DVector<f64>, dt: f64, steps: &[usize]) -> Result<Vec<DVector<f64>>, String> {
        let sv = StateVector::from_slice(x0.as_slice(), 0.0).map_err(|e| e.to_string())?;
        let out = orbital::propagate_to_steps(&sv, dt, steps, &self.gravity).map_err(|e| e.to_string())?;
        Ok(out.iter().map(|s| DVector::from_column_slice(s.to_vector().as_slice())).collect())
    }
}

/// Linear time-invariant dynamics `x_{k+1} = F x_k`; used for closed-form checks.
#[derive(Debug, Clone)]
pub struct LinearPropagator {
    pub step_matrix: DMatrix<f64>,
}

impl StatePropagator for LinearPropagator {
    fn state_dim(&self) -> usize {
        self.step_matrix.nrows()
    }

    fn propagate_to_steps(&self, x0: &DVector<f64>, _dt: f64, steps: &[usize]) -> Result<Vec<DVector<f64>>, String> {
        let mut out = Vec::with_capacity(steps.len());
        let mut x = x0.clone();
        let mut k = 0;
        for &target in steps {
            while k < target {
                x = &self.step_matrix * x;
                k += 1;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Initial uncertainty, either directly in the propagation coordinates or on Keplerian elements
/// `(a, e, i, Ω, ω, f)` that are converted to Cartesian state member by member.
#[derive(Debug, Clone)]
pub enum InitialBelief {
    Cartesian(GaussianBelief),
    Keplerian { elements: GaussianBelief, gravity: GravityModel },
}

impl InitialBelief {
    fn belief(&self) -> &GaussianBelief {
        match self {
            Self::Cartesian(b) => b,
            Self::Keplerian { elements, .. } => elements,
        }
    }

    fn to_state(&self, sample: &DVector<f64>) -> Result<DVector<f64>, String> {
        match self {
            Self::Cartesian(_) => Ok(sample.clone()),
            Self::Keplerian { gravity, .. } => {
                let el = OrbitalElements::from_slice(sample.as_slice()).map_err(|e| e.to_string())?;
                let sv = orbital::kepler_to_cartesian(&el, gravity).map_err(|e| e.to_string())?;
                Ok(DVector::from_column_slice(sv.to_vector().as_slice()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Enkf { n: usize, seed: u64 },
    Ukf(SigmaConfig),
}

/// Stacked prior over the saved grid.
#[derive(Debug, Clone)]
pub struct AugmentedWindow {
    pub saved_times: Vec<f64>,
    pub state_dim: usize,
    /// Augmented samples (`state_dim · n_saved` rows), kept for diagnostics and sub-windows.
    pub ensemble: Ensemble,
    pub mean: DVector<f64>,
    pub meas_matrix: DMatrix<f64>,
    pub prior: PriorMoments,
    pub meas_times: Vec<f64>,
    pub meas_components: Vec<Vec<usize>>,
}

/// Propagates the initial uncertainty through the window and assembles the augmented prior.
///
/// No measurement update happens inside the window; the result is a pure prior whose blocks
/// are `Σₓₓ`, `Σₓᵧ = Σₓₓ Cᵀ`, `Σᵧᵧ = C Σₓₓ Cᵀ` and `ℛˢ = 0` (set it with
/// [`PriorMoments::with_sensor_noise`]).
pub fn build_window<P: StatePropagator>(
    init: &InitialBelief,
    cfg: &WindowConfig,
    filter: FilterKind,
    propagator: &P,
) -> Result<AugmentedWindow, WindowError> {
    let state_dim = propagator.state_dim();
    cfg.validate(state_dim)?;
    let steps = cfg.saved_steps()?;
    let base = match filter {
        FilterKind::Enkf { n, seed } => kalman::sample_ensemble(init.belief(), n, seed)?,
        FilterKind::Ukf(sc) => kalman::sigma_points(init.belief(), &sc)?,
    };
    let dt = cfg.dt;
    let stacked = kalman::propagate_ensemble(&base, |sample| -> Result<DVector<f64>, String> {
        let x0 = init.to_state(sample)?;
        if x0.len() != state_dim {
            return Err(format!("initial state has dimension {}, expected {state_dim}", x0.len()));
        }
        let states = propagator.propagate_to_steps(&x0, dt, &steps)?;
        let mut out = DVector::zeros(state_dim * steps.len());
        for (j, s) in states.iter().enumerate() {
            out.rows_mut(j * state_dim, state_dim).copy_from(s);
        }
        Ok(out)
    })
    .map_err(|e| match e {
        KalmanError::Propagation { member, message } => WindowError::Propagation { member, message },
        other => WindowError::Kalman(other),
    })?;
    let saved_times: Vec<f64> = steps.iter().map(|&k| k as f64 * dt).collect();
    assemble(stacked, saved_times, state_dim, cfg)
}

fn assemble(ensemble: Ensemble, saved_times: Vec<f64>, state_dim: usize, cfg: &WindowConfig) -> Result<AugmentedWindow, WindowError> {
    let moments = kalman::ensemble_moments(&ensemble)?;
    let aug_dim = state_dim * saved_times.len();
    let meas_dim = cfg.meas_dim();
    let mut c = DMatrix::zeros(meas_dim, aug_dim);
    let mut row = 0;
    for (t, comps) in cfg.meas_times.iter().zip(&cfg.meas_components) {
        let j = grid_index(&saved_times, *t)?;
        for &comp in comps {
            c[(row, j * state_dim + comp)] = 1.0;
            row += 1;
        }
    }
    let sigma_xy = &moments.covariance * c.transpose();
    let sigma_yy = linalg::symmetrize(&(&c * &sigma_xy));
    let prior = PriorMoments {
        sigma_xx: moments.covariance,
        sigma_xy,
        sigma_yy,
        r_sensor: DMatrix::zeros(meas_dim, meas_dim),
    };
    Ok(AugmentedWindow {
        saved_times,
        state_dim,
        ensemble,
        mean: moments.mean,
        meas_matrix: c,
        prior,
        meas_times: cfg.meas_times.clone(),
        meas_components: cfg.meas_components.clone(),
    })
}

fn grid_index(saved_times: &[f64], time: f64) -> Result<usize, WindowError> {
    let scale = saved_times.last().copied().unwrap_or(0.0).abs().max(1.0);
    if let Some(i) = saved_times.iter().position(|&s| (s - time).abs() <= GRID_TOL * scale) {
        return Ok(i);
    }
    let mut by_distance: Vec<f64> = saved_times.to_vec();
    by_distance.sort_by(|a, b| (a - time).abs().total_cmp(&(b - time).abs()));
    by_distance.truncate(2);
    by_distance.sort_by(f64::total_cmp);
    Err(WindowError::OffGrid { time, nearest: by_distance })
}

/// Selection of `(time index, component)` entries of the augmented state.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub rows: Vec<(usize, usize)>,
    pub matrix: DMatrix<f64>,
}

impl SelectionMask {
    /// Augmented-vector indices picked by each mask row.
    pub fn indices(&self, state_dim: usize) -> Vec<usize> {
        self.rows.iter().map(|&(t, c)| t * state_dim + c).collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl AugmentedWindow {
    pub fn aug_dim(&self) -> usize {
        self.state_dim * self.saved_times.len()
    }

    pub fn time_index(&self, time: f64) -> Result<usize, WindowError> {
        grid_index(&self.saved_times, time)
    }

    /// Mask selecting `components` at `time`.
    pub fn make_mask(&self, time: f64, components: &[usize]) -> Result<SelectionMask, WindowError> {
        self.make_mask_multi(&[(time, components.to_vec())])
    }

    /// Mask over several `(time, components)` groups, in the given order.
    pub fn make_mask_multi(&self, groups: &[(f64, Vec<usize>)]) -> Result<SelectionMask, WindowError> {
        let mut rows = Vec::new();
        for (time, comps) in groups {
            let ti = self.time_index(*time)?;
            for &c in comps {
                if c >= self.state_dim {
                    return Err(WindowError::Component { component: c, state_dim: self.state_dim });
                }
                if rows.contains(&(ti, c)) {
                    return Err(WindowError::Config(format!("component {c} at {time} s selected twice")));
                }
                rows.push((ti, c));
            }
        }
        if rows.is_empty() {
            return Err(WindowError::Config("a mask needs at least one component".into()));
        }
        let mut matrix = DMatrix::zeros(rows.len(), self.aug_dim());
        for (r, &(ti, c)) in rows.iter().enumerate() {
            matrix[(r, ti * self.state_dim + c)] = 1.0;
        }
        Ok(SelectionMask { rows, matrix })
    }

    /// Keeps only the saved times listed (plus every measurement time), re-indexing the
    /// augmented state. Masks must be rebuilt against the returned window.
    pub fn restrict_to_times(&self, times: &[f64]) -> Result<AugmentedWindow, WindowError> {
        let mut keep: Vec<usize> = Vec::new();
        for &t in times.iter().chain(&self.meas_times) {
            keep.push(self.time_index(t)?);
        }
        keep.sort_unstable();
        keep.dedup();
        let rows: Vec<usize> = keep
            .iter()
            .flat_map(|&ti| (0..self.state_dim).map(move |c| ti * self.state_dim + c))
            .collect();
        let ensemble = self.ensemble.select_rows(&rows);
        let saved_times: Vec<f64> = keep.iter().map(|&i| self.saved_times[i]).collect();
        let sigma_xx = linalg::submatrix(&self.prior.sigma_xx, &rows, &rows);
        let sigma_xy = linalg::submatrix(&self.prior.sigma_xy, &rows, &(0..self.prior.meas_dim()).collect::<Vec<_>>());
        let meas_matrix = linalg::submatrix(&self.meas_matrix, &(0..self.meas_matrix.nrows()).collect::<Vec<_>>(), &rows);
        Ok(AugmentedWindow {
            saved_times,
            state_dim: self.state_dim,
            ensemble,
            mean: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.mean[r])),
            meas_matrix,
            prior: PriorMoments {
                sigma_xx,
                sigma_xy,
                sigma_yy: self.prior.sigma_yy.clone(),
                r_sensor: self.prior.r_sensor.clone(),
            },
            meas_times: self.meas_times.clone(),
            meas_components: self.meas_components.clone(),
        })
    }

    /// `√trace` of the selected components' covariance at every saved time.
    pub fn sqrt_trace_series(&self, cov: &DMatrix<f64>, components: &[usize]) -> Vec<f64> {
        (0..self.saved_times.len())
            .map(|ti| {
                components
                    .iter()
                    .map(|&c| {
                        let i = ti * self.state_dim + c;
                        cov[(i, i)]
                    })
                    .sum::<f64>()
                    .max(0.0)
                    .sqrt()
            })
            .collect()
    }
}

/// Block-diagonal sensor noise in measurement order from one variance per sensed component.
pub fn sensor_noise_block(cfg: &WindowConfig, variances: &[f64]) -> Result<DMatrix<f64>, WindowError> {
    let m = cfg.meas_dim();
    if variances.len() != m {
        return Err(WindowError::Config(format!(
            "{} variances given for {m} sensed components",
            variances.len()
        )));
    }
    if let Some(v) = variances.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(WindowError::Config(format!("sensor variance {v} must be finite and non-negative")));
    }
    Ok(DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
}
