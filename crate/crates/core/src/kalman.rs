//! Ensemble and unscented moment machinery.
//!
//! Both filters share the same posterior-variance update
//! `Σ⁺ = Σ⁻ₓₓ − Σ⁻ₓᵧ (Σ⁻ᵧᵧ + ℛ)⁻¹ Σ⁻ₓᵧᵀ`; they differ only in how samples are drawn and how
//! moments are weighted. Random ensembles use `1/N` mean weights and the `1/(N−1)` centering;
//! sigma-point ensembles carry the unscented weight vectors.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KalmanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("propagation of member {member} failed: {message}")]
    Propagation { member: usize, message: String },
    #[error("invalid sigma-point configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleKind {
    Random,
    Sigma,
}

/// State samples stored column-wise with their moment weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub samples: DMatrix<f64>,
    pub kind: EnsembleKind,
    pub mean_weights: DVector<f64>,
    pub cov_weights: DVector<f64>,
    pub seed: Option<u64>,
}

impl Ensemble {
    /// Wraps equally weighted random samples (`N ≥ 2`).
    pub fn random(samples: DMatrix<f64>, seed: Option<u64>) -> Result<Self, KalmanError> {
        let n = samples.ncols();
        if n < 2 {
            return Err(KalmanError::InvalidArgument(format!(
                "a random ensemble needs at least 2 members, got {n}"
            )));
        }
        Ok(Self {
            samples,
            kind: EnsembleKind::Random,
            mean_weights: DVector::from_element(n, 1.0 / n as f64),
            cov_weights: DVector::from_element(n, 1.0 / (n as f64 - 1.0)),
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn member(&self, i: usize) -> DVector<f64> {
        self.samples.column(i).into_owned()
    }

    /// Keeps only the listed state rows, preserving weights.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let samples = DMatrix::from_fn(rows.len(), self.len(), |i, j| self.samples[(rows[i], j)]);
        Self { samples, ..self.clone() }
    }

    /// Weighted mean, computed as `X₀ + Σ wⱼ (Xⱼ − X₀)`.
    ///
    /// Mean weights are assumed to sum to one. Working relative to the first member avoids
    /// multiplying full-magnitude states by the large unscented weights.
    pub fn mean(&self) -> DVector<f64> {
        let n = self.len();
        if n == 0 {
            return DVector::zeros(self.dim());
        }
        let base = self.samples.column(0).into_owned();
        let mut acc = DVector::zeros(self.dim());
        for j in 1..n {
            acc += (self.samples.column(j) - &base) * self.mean_weights[j];
        }
        base + acc
    }

    /// True when every non-centre point shares the mean and covariance weight.
    fn shared_tail_weights(&self) -> bool {
        (1..self.len()).all(|j| self.mean_weights[j] == self.cov_weights[j])
    }

    fn deviations(&self, mean: &DVector<f64>) -> DMatrix<f64> {
        let mut d = self.samples.clone();
        for mut col in d.column_iter_mut() {
            col -= mean;
        }
        d
    }
}

/// Gaussian mean and symmetric PSD covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validates shapes and symmetry (1e-12 relative); eigenvalues down to `−1e-10·scale`
    /// are clipped to zero, anything more negative is rejected.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self, KalmanError> {
        let n = mean.len();
        if covariance.shape() != (n, n) {
            return Err(KalmanError::Dimension(format!(
                "covariance is {:?}, mean has length {n}",
                covariance.shape()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(KalmanError::InvalidArgument("non-finite belief entries".into()));
        }
        if !linalg::is_symmetric(&covariance, 1e-12) {
            return Err(KalmanError::NotPsd("covariance is not symmetric".into()));
        }
        let sym = linalg::symmetrize(&covariance);
        if n == 0 {
            return Ok(Self { mean, covariance: sym });
        }
        let lmin = linalg::min_eigenvalue(&sym);
        let scale = 1.0 + linalg::max_abs(&sym);
        if lmin < -1e-10 * scale {
            return Err(KalmanError::NotPsd(format!("minimum eigenvalue {lmin:e}")));
        }
        let covariance = if lmin < 0.0 { linalg::clip_psd(&sym) } else { sym };
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Prior covariance blocks of the (augmented) state/measurement pair plus the known sensor noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMoments {
    pub sigma_xx: DMatrix<f64>,
    pub sigma_xy: DMatrix<f64>,
    pub sigma_yy: DMatrix<f64>,
    pub r_sensor: DMatrix<f64>,
}

impl PriorMoments {
    /// Checks block dimensions and that the joint covariance is PSD within `1e-8·scale`.
    pub fn new(
        sigma_xx: DMatrix<f64>,
        sigma_xy: DMatrix<f64>,
        sigma_yy: DMatrix<f64>,
        r_sensor: DMatrix<f64>,
    ) -> Result<Self, KalmanError> {
        let pm = Self { sigma_xx, sigma_xy, sigma_yy, r_sensor };
        pm.check_dimensions()?;
        pm.check_joint_psd(1e-8)?;
        Ok(pm)
    }

    /// Linear measurement `y = Cx`: `Σₓᵧ = ΣC ᵀ`, `Σᵧᵧ = CΣCᵀ`.
    pub fn linear(sigma_xx: DMatrix<f64>, c: &DMatrix<f64>, r_sensor: DMatrix<f64>) -> Result<Self, KalmanError> {
        if c.ncols() != sigma_xx.nrows() {
            return Err(KalmanError::Dimension(format!(
                "measurement matrix has {} columns, state dimension is {}",
                c.ncols(),
                sigma_xx.nrows()
            )));
        }
        let sigma_xy = &sigma_xx * c.transpose();
        let sigma_yy = linalg::symmetrize(&(c * &sigma_xy));
        Self::new(sigma_xx, sigma_xy, sigma_yy, r_sensor)
    }

    pub fn state_dim(&self) -> usize {
        self.sigma_xx.nrows()
    }

    pub fn meas_dim(&self) -> usize {
        self.sigma_yy.nrows()
    }

    fn check_dimensions(&self) -> Result<(), KalmanError> {
        let n = self.sigma_xx.nrows();
        let m = self.sigma_yy.nrows();
        let ok = self.sigma_xx.is_square()
            && self.sigma_yy.is_square()
            && self.sigma_xy.shape() == (n, m)
            && self.r_sensor.shape() == (m, m);
        if ok {
            Ok(())
        } else {
            Err(KalmanError::Dimension(format!(
                "sigma_xx {:?}, sigma_xy {:?}, sigma_yy {:?}, r_sensor {:?}",
                self.sigma_xx.shape(),
                self.sigma_xy.shape(),
                self.sigma_yy.shape(),
                self.r_sensor.shape()
            )))
        }
    }

    pub fn joint_covariance(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let m = self.meas_dim();
        let mut j = DMatrix::zeros(n + m, n + m);
        j.view_mut((0, 0), (n, n)).copy_from(&self.sigma_xx);
        j.view_mut((0, n), (n, m)).copy_from(&self.sigma_xy);
        j.view_mut((n, 0), (m, n)).copy_from(&self.sigma_xy.transpose());
        j.view_mut((n, n), (m, m)).copy_from(&self.sigma_yy);
        j
    }

    /// Cholesky test of `joint + tol·scale·I`, cheap enough for large augmented windows.
    pub fn check_joint_psd(&self, tol: f64) -> Result<(), KalmanError> {
        let mut j = self.joint_covariance();
        if !linalg::is_symmetric(&j, 1e-9) {
            return Err(KalmanError::NotPsd("joint covariance is not symmetric".into()));
        }
        if !linalg::is_symmetric(&self.r_sensor, 1e-9) || self.r_sensor.diagonal().iter().any(|&v| v < 0.0) {
            return Err(KalmanError::NotPsd("sensor noise must be symmetric PSD".into()));
        }
        let scale = linalg::max_abs(&j).max(f64::MIN_POSITIVE);
        let shift = tol * scale;
        for i in 0..j.nrows() {
            j[(i, i)] += shift;
        }
        if j.nrows() > 0 && linalg::symmetrize(&j).cholesky().is_none() {
            return Err(KalmanError::NotPsd(format!(
                "joint covariance is not PSD within {tol:e} of its scale"
            )));
        }
        Ok(())
    }

    pub fn with_sensor_noise(mut self, r_sensor: DMatrix<f64>) -> Result<Self, KalmanError> {
        let m = self.meas_dim();
        if r_sensor.shape() != (m, m) {
            return Err(KalmanError::Dimension(format!(
                "sensor noise is {:?}, measurement dimension is {m}",
                r_sensor.shape()
            )));
        }
        self.r_sensor = r_sensor;
        Ok(self)
    }

    /// Restricts to a subset of measurement channels.
    pub fn select_measurements(&self, keep: &[usize]) -> Self {
        let n = self.state_dim();
        let all: Vec<usize> = (0..n).collect();
        Self {
            sigma_xx: self.sigma_xx.clone(),
            sigma_xy: linalg::submatrix(&self.sigma_xy, &all, keep),
            sigma_yy: linalg::submatrix(&self.sigma_yy, keep, keep),
            r_sensor: linalg::submatrix(&self.r_sensor, keep, keep),
        }
    }

    /// Re-expresses the measurement channels as `y' = Tᵀ y`.
    pub fn rotate_measurements(&self, t: &DMatrix<f64>) -> Self {
        Self {
            sigma_xx: self.sigma_xx.clone(),
            sigma_xy: &self.sigma_xy * t,
            sigma_yy: linalg::symmetrize(&(t.transpose() * &self.sigma_yy * t)),
            r_sensor: linalg::symmetrize(&(t.transpose() * &self.r_sensor * t)),
        }
    }
}

/// Unscented-transform tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        Self { alpha: 1e-3, beta: 2.0, kappa: 0.0 }
    }
}

impl SigmaConfig {
    pub fn validate(&self) -> Result<(), KalmanError> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(KalmanError::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if !self.beta.is_finite() || !self.kappa.is_finite() {
            return Err(KalmanError::Config("beta and kappa must be finite".into()));
        }
        Ok(())
    }

    /// Scaling parameter `ρ = α²(n+κ) − n`.
    pub fn rho(&self, n: usize) -> f64 {
        let n = n as f64;
        self.alpha * self.alpha * (n + self.kappa) - n
    }
}

/// Draws `n` samples from the belief via the symmetric square root of its covariance.
pub fn sample_ensemble(belief: &GaussianBelief, n: usize, seed: u64) -> Result<Ensemble, KalmanError> {
    if n < 2 {
        return Err(KalmanError::InvalidArgument(format!(
            "ensemble size must be at least 2, got {n}"
        )));
    }
    let d = belief.dim();
    let root = linalg::sym_sqrt(&belief.covariance);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let mut samples = root * normals;
    for mut col in samples.column_iter_mut() {
        col += &belief.mean;
    }
    Ensemble::random(samples, Some(seed))
}

/// Weighted mean and PSD covariance of an ensemble.
///
/// Random ensembles use the `1/(N−1)` centred Gram form. For sigma points the covariance
/// `Σ wᶜᵢ (Xᵢ − m)(Xᵢ − m)ᵀ` is rewritten with `dᵢ = Xᵢ − X₀` and `μ = m − X₀` as
/// `Σᵢ≥₁ wᵢ dᵢdᵢᵀ + (Σwᶜ − 2) μμᵀ`, which has only non-negative weights for `β ≥ α²` and
/// avoids the cancellation between the large negative centre weight and the outer points.
pub fn ensemble_moments(e: &Ensemble) -> Result<GaussianBelief, KalmanError> {
    if e.is_empty() {
        return Err(KalmanError::InvalidArgument("empty ensemble".into()));
    }
    let mean = e.mean();
    if e.kind == EnsembleKind::Sigma && e.shared_tail_weights() {
        let n = e.len();
        let base = e.samples.column(0).into_owned();
        let mut d = DMatrix::zeros(e.dim(), n);
        let mut w = DVector::zeros(n);
        for j in 1..n {
            d.set_column(j - 1, &(e.samples.column(j) - &base));
            w[j - 1] = e.cov_weights[j];
        }
        d.set_column(n - 1, &(&mean - &base));
        w[n - 1] = e.cov_weights.sum() - 2.0;
        let covariance = linalg::psd_weighted_gram(&d, &w);
        return Ok(GaussianBelief { mean, covariance });
    }
    let d = e.deviations(&mean);
    let covariance = linalg::psd_weighted_gram(&d, &e.cov_weights);
    Ok(GaussianBelief { mean, covariance })
}

/// Unscented sigma points: the mean and `mean ± columns of √((n+ρ)Σ)`.
pub fn sigma_points(belief: &GaussianBelief, cfg: &SigmaConfig) -> Result<Ensemble, KalmanError> {
    cfg.validate()?;
    let n = belief.dim();
    if n == 0 {
        return Err(KalmanError::InvalidArgument("belief has dimension 0".into()));
    }
    let rho = cfg.rho(n);
    let spread = n as f64 + rho;
    if !(spread > 0.0) {
        return Err(KalmanError::Config(format!("n + ρ = {spread} must be positive")));
    }
    let root = linalg::sym_sqrt(&(&belief.covariance * spread));
    let mut samples = DMatrix::zeros(n, 2 * n + 1);
    samples.set_column(0, &belief.mean);
    for i in 0..n {
        samples.set_column(1 + i, &(&belief.mean + root.column(i)));
        samples.set_column(1 + n + i, &(&belief.mean - root.column(i)));
    }
    let w0m = rho / spread;
    let wi = 1.0 / (2.0 * spread);
    let mut mean_weights = DVector::from_element(2 * n + 1, wi);
    let mut cov_weights = DVector::from_element(2 * n + 1, wi);
    mean_weights[0] = w0m;
    cov_weights[0] = w0m + (1.0 - cfg.alpha * cfg.alpha + cfg.beta);
    Ok(Ensemble { samples, kind: EnsembleKind::Sigma, mean_weights, cov_weights, seed: None })
}

/// Maps every member through `dynamics`; members run in parallel and are merged in column order.
pub fn propagate_ensemble<F, E>(e: &Ensemble, dynamics: F) -> Result<Ensemble, KalmanError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, E> + Sync,
    E: std::fmt::Display,
{
    let outputs: Vec<DVector<f64>> = (0..e.len())
        .into_par_iter()
        .map(|i| dynamics(&e.member(i)).map_err(|err| KalmanError::Propagation { member: i, message: err.to_string() }))
        .collect::<Result<_, _>>()?;
    let dim = outputs.first().map_or(e.dim(), |v| v.len());
    if let Some((i, _)) = outputs.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(KalmanError::Propagation {
            member: i,
            message: format!("output dimension differs from member 0 ({dim})"),
        });
    }
    let samples = DMatrix::from_fn(dim, e.len(), |r, c| outputs[c][r]);
    Ok(Ensemble { samples, ..e.clone() })
}

fn map_measurements<H>(e: &Ensemble, h: &H) -> Result<DMatrix<f64>, KalmanError>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let ys: Vec<DVector<f64>> = (0..e.len()).map(|i| h(&e.member(i))).collect();
    let m = ys.first().map_or(0, |y| y.len());
    if let Some((i, y)) = ys.iter().enumerate().find(|(_, y)| y.len() != m) {
        return Err(KalmanError::Dimension(format!(
            "member {i} produced a {}-dimensional measurement, expected {m}",
            y.len()
        )));
    }
    Ok(DMatrix::from_fn(m, e.len(), |r, c| ys[c][r]))
}

/// Empirical `Σ⁻ₓₓ`, `Σ⁻ₓᵧ`, `Σ⁻ᵧᵧ` under the measurement map `h`; sensor noise is left zero.
///
/// The joint state/measurement covariance is formed in one piece so the blocks are jointly PSD.
pub fn cross_covariances<H>(e: &Ensemble, h: H) -> Result<PriorMoments, KalmanError>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let ys = map_measurements(e, &h)?;
    let n = e.dim();
    let m = ys.nrows();
    let mut joint = DMatrix::zeros(n + m, e.len());
    joint.view_mut((0, 0), (n, e.len())).copy_from(&e.samples);
    joint.view_mut((n, 0), (m, e.len())).copy_from(&ys);
    let stacked = Ensemble { samples: joint, ..e.clone() };
    let cov = ensemble_moments(&stacked)?.covariance;
    Ok(PriorMoments {
        sigma_xx: cov.view((0, 0), (n, n)).into_owned(),
        sigma_xy: cov.view((0, n), (n, m)).into_owned(),
        sigma_yy: cov.view((n, n), (m, m)).into_owned(),
        r_sensor: DMatrix::zeros(m, m),
    })
}

/// Gain `Σₓᵧ (Σᵧᵧ + ℛ)⁻¹`.
pub fn kalman_gain(sigma_xy: &DMatrix<f64>, sigma_yy: &DMatrix<f64>, r_total: &DMatrix<f64>) -> Result<DMatrix<f64>, KalmanError> {
    let inner = sigma_yy + r_total;
    let rhs = sigma_xy.transpose();
    let sol = linalg::spd_solve(&inner, &rhs)
        .ok_or_else(|| KalmanError::Numerical("innovation covariance is singular after regularization".into()))?;
    Ok(sol.transpose())
}

/// Perturbed-observation ensemble update; `εⁱ ~ 𝒩(0, ℛ)` is drawn from a generator seeded with `seed`.
pub fn enkf_update<H>(
    e: &Ensemble,
    y: &DVector<f64>,
    pm: &PriorMoments,
    r_total: &DMatrix<f64>,
    h: H,
    seed: u64,
) -> Result<Ensemble, KalmanError>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    if e.kind != EnsembleKind::Random {
        return Err(KalmanError::InvalidArgument("the perturbed-observation update needs a random ensemble".into()));
    }
    let m = y.len();
    if pm.meas_dim() != m || r_total.shape() != (m, m) || pm.state_dim() != e.dim() {
        return Err(KalmanError::Dimension(format!(
            "measurement length {m}, prior meas dim {}, r_total {:?}, state dims {}/{}",
            pm.meas_dim(),
            r_total.shape(),
            pm.state_dim(),
            e.dim()
        )));
    }
    let gain = kalman_gain(&pm.sigma_xy, &pm.sigma_yy, r_total)?;
    let noise_root = linalg::sym_sqrt(r_total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys = map_measurements(e, &h)?;
    if ys.nrows() != m {
        return Err(KalmanError::Dimension(format!("h produces {} components, y has {m}", ys.nrows())));
    }
    let mut samples = e.samples.clone();
    for i in 0..e.len() {
        let z = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let eps = &noise_root * z;
        let innovation = y - ys.column(i) + eps;
        let mut col = samples.column_mut(i);
        col += &gain * innovation;
    }
    Ok(Ensemble { samples, seed: Some(seed), ..e.clone() })
}

/// `Σ⁺ = Σ⁻ₓₓ − Σ⁻ₓᵧ (Σ⁻ᵧᵧ + ℛˢ + ℛᵈ)⁻¹ Σ⁻ₓᵧᵀ`, symmetrized.
pub fn posterior_covariance(pm: &PriorMoments, r_data: &DMatrix<f64>) -> Result<DMatrix<f64>, KalmanError> {
    let m = pm.meas_dim();
    if r_data.shape() != (m, m) {
        return Err(KalmanError::Dimension(format!(
            "data noise is {:?}, measurement dimension is {m}",
            r_data.shape()
        )));
    }
    if m == 0 {
        return Ok(pm.sigma_xx.clone());
    }
    let inner = &pm.sigma_yy + &pm.r_sensor + r_data;
    let solved = linalg::spd_solve(&inner, &pm.sigma_xy.transpose())
        .ok_or_else(|| KalmanError::Numerical("Σyy + ℛ is not invertible after regularization".into()))?;
    Ok(linalg::symmetrize(&(&pm.sigma_xx - &pm.sigma_xy * solved)))
}

/// Data precision below which a channel is treated as unshared (infinite synthetic noise).
pub const PRECISION_CUTOFF: f64 = 1e-9;

/// Posterior covariance when the synthetic noise is given as a precision `𝒮ᵈ = (ℛᵈ)⁻¹`.
///
/// Directions of `𝒮ᵈ` with precision below [`PRECISION_CUTOFF`] are dropped as excluded
/// channels; the remaining ones use `ℛᵈ = 1/λ`.
pub fn posterior_covariance_precision(pm: &PriorMoments, s_data: &DMatrix<f64>) -> Result<DMatrix<f64>, KalmanError> {
    let m = pm.meas_dim();
    if s_data.shape() != (m, m) {
        return Err(KalmanError::Dimension(format!(
            "data precision is {:?}, measurement dimension is {m}",
            s_data.shape()
        )));
    }
    if linalg::is_diagonal(s_data) {
        let keep: Vec<usize> = (0..m).filter(|&i| s_data[(i, i)] >= PRECISION_CUTOFF).collect();
        let sub = pm.select_measurements(&keep);
        let r = DMatrix::from_diagonal(&DVector::from_iterator(keep.len(), keep.iter().map(|&i| 1.0 / s_data[(i, i)])));
        return posterior_covariance(&sub, &r);
    }
    let eig = linalg::sym_eigen(s_data);
    let keep: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] >= PRECISION_CUTOFF).collect();
    let t = DMatrix::from_fn(m, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    let rotated = pm.rotate_measurements(&t);
    let r = DMatrix::from_diagonal(&DVector::from_iterator(keep.len(), keep.iter().map(|&i| 1.0 / eig.eigenvalues[i])));
    posterior_covariance(&rotated, &r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_pm() -> PriorMoments {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        PriorMoments::new(one(4.0), one(4.0), one(4.0), one(1.0)).unwrap()
    }

    #[test]
    fn zero_covariance_samples_equal_mean() {
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, -2.0]), DMatrix::zeros(2, 2)).unwrap();
        let e = sample_ensemble(&b, 5, 3).unwrap();
        for c in e.samples.column_iter() {
            assert_eq!(c, b.mean);
        }
        assert!(sample_ensemble(&b, 1, 3).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let b = GaussianBelief::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        assert_eq!(sample_ensemble(&b, 20, 11).unwrap(), sample_ensemble(&b, 20, 11).unwrap());
        assert_ne!(sample_ensemble(&b, 20, 11).unwrap().samples, sample_ensemble(&b, 20, 12).unwrap().samples);
    }

    #[test]
    fn large_sample_variance() {
        let b = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 4.0)).unwrap();
        let e = sample_ensemble(&b, 100_000, 2024).unwrap();
        let var = ensemble_moments(&e).unwrap().covariance[(0, 0)];
        assert!((var - 4.0).abs() / 4.0 < 0.03, "variance {var}");
    }

    #[test]
    fn two_point_moments() {
        let e = Ensemble::random(DMatrix::from_row_slice(1, 2, &[0.0, 2.0]), None).unwrap();
        let m = ensemble_moments(&e).unwrap();
        assert_relative_eq!(m.mean[0], 1.0);
        assert_relative_eq!(m.covariance[(0, 0)], 2.0);
    }

    #[test]
    fn identical_members_have_zero_covariance() {
        let e = Ensemble::random(DMatrix::from_fn(3, 4, |r, _| r as f64), None).unwrap();
        assert_eq!(ensemble_moments(&e).unwrap().covariance, DMatrix::zeros(3, 3));
        let pm = cross_covariances(&e, |x| x.rows(0, 2).into_owned()).unwrap();
        assert_eq!(pm.sigma_xy, DMatrix::zeros(3, 2));
        assert_eq!(pm.sigma_yy, DMatrix::zeros(2, 2));
    }

    #[test]
    fn scalar_sigma_points_by_hand() {
        let b = GaussianBelief::new(DVector::from_vec(vec![3.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let e = sigma_points(&b, &SigmaConfig::default()).unwrap();
        // ρ = 1e-6 − 1, n + ρ = 1e-6, spread √1e-6 = 1e-3
        assert_relative_eq!(SigmaConfig::default().rho(1), 1e-6 - 1.0, max_relative = 1e-12);
        assert_relative_eq!(e.samples[(0, 1)], 3.0 + 1e-3, max_relative = 1e-12);
        assert_relative_eq!(e.samples[(0, 2)], 3.0 - 1e-3, max_relative = 1e-12);
        assert_relative_eq!(e.mean_weights[0], -999_999.0, max_relative = 1e-9);
        assert_relative_eq!(e.mean_weights[1], 5e5, max_relative = 1e-9);
        assert_relative_eq!(e.mean_weights.sum(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(e.cov_weights[0], e.mean_weights[0] + 3.0 - 1e-6, max_relative = 1e-12);
    }

    #[test]
    fn zero_covariance_sigma_points_collapse() {
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::zeros(2, 2)).unwrap();
        let e = sigma_points(&b, &SigmaConfig::default()).unwrap();
        for c in e.samples.column_iter() {
            assert_eq!(c, b.mean);
        }
    }

    #[test]
    fn sigma_moments_recover_generating_gaussian() {
        let mean = DVector::from_vec(vec![1.0, -3.0, 2.5]);
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.1, 1.0, 0.2, 0.0, -0.4, 0.5]);
        let cov = &a * a.transpose();
        let b = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let e = sigma_points(&b, &SigmaConfig::default()).unwrap();
        let m = ensemble_moments(&e).unwrap();
        // rounding in μ ± r is amplified by the 1/(2(n+ρ)) weights (~1.7e5 here)
        assert_relative_eq!(m.mean, mean, epsilon = 1e-10);
        assert_relative_eq!(m.covariance, cov, epsilon = 1e-10);
    }

    #[test]
    fn sigma_moments_with_orbit_sized_mean() {
        // offsets of ~1e-3 around a 7000 km mean lose ~1e-10 relative to rounding
        let mean = DVector::from_vec(vec![7000.0, -3000.0, 10.0]);
        let cov = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 2.0, 0.5, 0.0, 0.5, 1.0]);
        let b = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let m = ensemble_moments(&sigma_points(&b, &SigmaConfig::default()).unwrap()).unwrap();
        assert_relative_eq!(m.mean, mean, max_relative = 1e-12);
        assert_relative_eq!(m.covariance, cov, epsilon = 1e-6);
    }

    #[test]
    fn sigma_config_rejects_bad_alpha() {
        let b = GaussianBelief::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let cfg = SigmaConfig { alpha: 0.0, ..SigmaConfig::default() };
        assert!(matches!(sigma_points(&b, &cfg), Err(KalmanError::Config(_))));
    }

    #[test]
    fn linear_propagation_of_random_ensemble() {
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let e = sample_ensemble(&b, 50, 5).unwrap();
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let before = ensemble_moments(&e).unwrap();
        let out = propagate_ensemble(&e, |x| Ok::<_, KalmanError>(&f * x)).unwrap();
        let after = ensemble_moments(&out).unwrap();
        assert_relative_eq!(after.mean, &f * &before.mean, epsilon = 1e-10);
        assert_relative_eq!(after.covariance, &f * &before.covariance * f.transpose(), epsilon = 1e-10);
        let same = propagate_ensemble(&e, |x| Ok::<_, KalmanError>(x.clone())).unwrap();
        assert_eq!(same, e);
    }

    #[test]
    fn propagation_failure_carries_member_index() {
        let e = Ensemble::random(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]), None).unwrap();
        let err = propagate_ensemble(&e, |x| if x[0] > 1.5 { Err("boom") } else { Ok(x.clone()) }).unwrap_err();
        assert_eq!(err, KalmanError::Propagation { member: 2, message: "boom".into() });
    }

    #[test]
    fn identity_measurement_cross_covariances() {
        let b = GaussianBelief::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let e = sample_ensemble(&b, 30, 9).unwrap();
        let pm = cross_covariances(&e, |x| x.clone()).unwrap();
        assert_relative_eq!(pm.sigma_xy, pm.sigma_xx, epsilon = 1e-12);
        assert_relative_eq!(pm.sigma_yy, pm.sigma_xx, epsilon = 1e-12);
    }

    #[test]
    fn linear_measurement_cross_covariances() {
        let b = GaussianBelief::new(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let e = sample_ensemble(&b, 40, 1).unwrap();
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 1.0]);
        let pm = cross_covariances(&e, |x| &c * x).unwrap();
        assert_relative_eq!(pm.sigma_xy, &pm.sigma_xx * c.transpose(), epsilon = 1e-10);
        assert_relative_eq!(pm.sigma_yy, &c * &pm.sigma_xx * c.transpose(), epsilon = 1e-10);
        assert!(cross_covariances(&e, |x| if x[0] > 0.0 { x.clone() } else { x.rows(0, 1).into_owned() }).is_err());
    }

    #[test]
    fn scalar_posterior_by_hand() {
        let post = posterior_covariance(&scalar_pm(), &DMatrix::zeros(1, 1)).unwrap();
        assert_relative_eq!(post[(0, 0)], 0.8, epsilon = 1e-14);
        let big = posterior_covariance(&scalar_pm(), &DMatrix::from_element(1, 1, 1e12)).unwrap();
        assert_relative_eq!(big[(0, 0)], 4.0, max_relative = 1e-6);
    }

    #[test]
    fn zero_data_noise_is_the_minimum() {
        let pm = scalar_pm();
        let floor = posterior_covariance(&pm, &DMatrix::zeros(1, 1)).unwrap()[(0, 0)];
        for k in 0..=100 {
            let r = k as f64 * 10.0;
            let v = posterior_covariance(&pm, &DMatrix::from_element(1, 1, r)).unwrap()[(0, 0)];
            assert!(v >= floor);
        }
    }

    #[test]
    fn precision_form_matches_noise_form() {
        let pm = PriorMoments::linear(
            DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            &DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 0.5,
        )
        .unwrap();
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = s.clone().try_inverse().unwrap();
        let a = posterior_covariance(&pm, &r).unwrap();
        let b = posterior_covariance_precision(&pm, &s).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
        // zero precision on channel 1 equals dropping it
        let s0 = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let dropped = posterior_covariance(&pm.select_measurements(&[0]), &DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert_relative_eq!(posterior_covariance_precision(&pm, &s0).unwrap(), dropped, epsilon = 1e-12);
    }

    #[test]
    fn enkf_huge_noise_leaves_members() {
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let e = sample_ensemble(&b, 100, 4).unwrap();
        let pm = cross_covariances(&e, |x| x.clone()).unwrap();
        // the perturbation term scales as Σ/√ℛ, so ℛ must be well above 1e12 for 1e-6 agreement
        let r = DMatrix::from_element(1, 1, 1e14);
        let out = enkf_update(&e, &DVector::from_vec(vec![3.0]), &pm, &r, |x| x.clone(), 8).unwrap();
        for (a, b) in out.samples.iter().zip(e.samples.iter()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn enkf_identical_members_move_only_by_perturbation() {
        let e = Ensemble::random(DMatrix::from_element(1, 5, 2.0), None).unwrap();
        let pm = PriorMoments::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let r = DMatrix::from_element(1, 1, 1.0);
        let y = DVector::from_vec(vec![2.0]);
        let out = enkf_update(&e, &y, &pm, &r, |x| x.clone(), 1).unwrap();
        // y − h(x) = 0, so the shift is exactly K εⁱ with K = 1/2
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..5 {
            let z: f64 = StandardNormal.sample(&mut rng);
            assert_relative_eq!(out.samples[(0, i)], 2.0 + 0.5 * z, epsilon = 1e-14);
        }
    }

    #[test]
    fn enkf_scalar_posterior_variance() {
        let (prior, r) = (4.0, 1.0);
        let b = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, prior)).unwrap();
        let e = sample_ensemble(&b, 10_000, 77).unwrap();
        let pm = cross_covariances(&e, |x| x.clone()).unwrap();
        let rm = DMatrix::from_element(1, 1, r);
        let out = enkf_update(&e, &DVector::from_vec(vec![0.5]), &pm, &rm, |x| x.clone(), 78).unwrap();
        let var = ensemble_moments(&out).unwrap().covariance[(0, 0)];
        let exact = prior * r / (prior + r);
        assert!((var - exact).abs() / exact < 0.05, "{var} vs {exact}");
    }

    #[test]
    fn belief_rejects_indefinite_covariance() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(GaussianBelief::new(DVector::zeros(2), c), Err(KalmanError::NotPsd(_))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(GaussianBelief::new(DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn prior_moments_reject_bad_blocks() {
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        assert!(matches!(
            PriorMoments::new(one(1.0), one(2.0), one(1.0), one(0.0)),
            Err(KalmanError::NotPsd(_))
        ));
        assert!(matches!(
            PriorMoments::new(one(1.0), DMatrix::zeros(1, 2), one(1.0), one(0.0)),
            Err(KalmanError::Dimension(_))
        ));
    }
}
