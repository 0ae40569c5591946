//! Synthetic-noise and sensor-precision design against trace bounds on the posterior.
//!
//! Utility bounds require `trace(M Σ⁺ Mᵀ) ≤ γ_u`, privacy bounds `trace(M Σ⁺ Mᵀ) ≥ γ_p`.
//! Five formulations are provided:
//!
//! * [`max_noise_for_utility`]: largest data noise meeting utility bounds, written with the
//!   inversion identity so the LMI is linear in the data precision `𝒮 = ℛ⁻¹`.
//! * [`max_noise_for_utility_sqrt`]: the same problem in gain form, needing only a factor of
//!   the prior instead of `(Σᵧᵧ + ℛˢ)⁻¹`.
//! * [`min_precision_for_utility`]: smallest total per-axis sensor precision (an ℓ₁ objective
//!   that switches sensors off).
//! * [`min_noise_for_privacy`]: smallest data noise meeting privacy bounds.
//! * [`utility_aware_privacy`] / [`privacy_aware_utility`]: both bound families at once. The
//!   coupling `𝒮ℛ = I` is linearized around the current iterate and the problem re-solved
//!   until the optimized trace stops moving.
//!
//! Every result is re-certified with [`verify_traces`], which evaluates the posterior directly
//! and never reads solver variables.
//!
//! Covariance data is divided by a scale factor before it reaches the solver and results are
//! mapped back, since km²-sized priors and unit-sized bounds otherwise differ by five orders of
//! magnitude.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::kalman::{self, KalmanError, PriorMoments};
use crate::linalg;
use crate::lmi::{self, AffineExpr, BlockLmi, LinearForm, LmiError, LmiProblem, LmiStatus, Sense, SolveOptions, SolverStats, VarId, VarShape};

/// Tolerance on certified traces.
pub const CERT_TOL: f64 = 1e-6;
/// Condition number of `Σᵧᵧ + ℛˢ` above which the inverse-free formulation is used.
pub const FALLBACK_CONDITION: f64 = 1e10;
/// Per-axis precisions below this (km⁻²) mark a sensor as switched off.
pub const PRECISION_CUTOFF: f64 = kalman::PRECISION_CUTOFF;
/// Precisions below this fraction of the largest one are also treated as off in the one-shot
/// formulations, where that is the interior-point noise floor.
const SOLVE_RELATIVE_CUTOFF: f64 = 1e-7;
/// Relative cutoff for the iterative modes, whose accepted iterates are exact (not solver
/// output) and can span many decades.
const ITERATE_RELATIVE_CUTOFF: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("invalid tradeoff specification: {0}")]
    Spec(String),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Lmi(#[from] LmiError),
}

/// Trace bound attached to a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Absolute trace in km².
    Absolute(f64),
    /// Fraction of the prior trace under the same mask.
    FractionOfPrior(f64),
    /// Optimized by the iterative modes.
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceConstraint {
    pub label: String,
    /// Selection matrix (rows × state dimension).
    pub mask: DMatrix<f64>,
    pub bound: Bound,
}

impl TraceConstraint {
    pub fn new(label: impl Into<String>, mask: DMatrix<f64>, bound: Bound) -> Self {
        Self { label: label.into(), mask, bound }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TradeoffSpec {
    pub utility: Vec<TraceConstraint>,
    pub privacy: Vec<TraceConstraint>,
}

impl TradeoffSpec {
    fn check(&self, pm: &PriorMoments) -> Result<(), SynthesisError> {
        let n = pm.state_dim();
        for c in self.utility.iter().chain(&self.privacy) {
            if c.mask.ncols() != n || c.mask.nrows() == 0 {
                return Err(SynthesisError::Spec(format!(
                    "mask {:?} of {} does not fit state dimension {n}",
                    c.mask.shape(),
                    c.label
                )));
            }
            match c.bound {
                Bound::Absolute(g) if !(g > 0.0) || !g.is_finite() => {
                    return Err(SynthesisError::Spec(format!("{}: bound {g} must be positive", c.label)))
                }
                Bound::FractionOfPrior(f) if !(f > 0.0 && f <= 1.0) => {
                    return Err(SynthesisError::Spec(format!("{}: fraction {f} must lie in (0, 1]", c.label)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-mask traces of a posterior covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Traces {
    pub utility: Vec<f64>,
    pub privacy: Vec<f64>,
}

fn mask_trace(m: &DMatrix<f64>, cov: &DMatrix<f64>) -> f64 {
    (m * cov * m.transpose()).trace()
}

fn traces_of(cov: &DMatrix<f64>, spec: &TradeoffSpec) -> Traces {
    Traces {
        utility: spec.utility.iter().map(|c| mask_trace(&c.mask, cov)).collect(),
        privacy: spec.privacy.iter().map(|c| mask_trace(&c.mask, cov)).collect(),
    }
}

/// Oracle: per-mask traces of the posterior under data noise `r_data`.
pub fn verify_traces(pm: &PriorMoments, r_data: &DMatrix<f64>, spec: &TradeoffSpec) -> Result<Traces, SynthesisError> {
    let post = kalman::posterior_covariance(pm, r_data)?;
    Ok(traces_of(&post, spec))
}

/// Oracle for a precision-form result; channels with precision below the cutoff are excluded.
pub fn verify_traces_precision(pm: &PriorMoments, s_data: &DMatrix<f64>, spec: &TradeoffSpec) -> Result<Traces, SynthesisError> {
    let post = kalman::posterior_covariance_precision(pm, s_data)?;
    Ok(traces_of(&post, spec))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStructure {
    Diagonal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisOptions {
    pub structure: NoiseStructure,
    pub solver: SolveOptions,
    /// Convergence threshold on the optimized trace (km²) for the iterative modes.
    pub eps: f64,
    pub max_iter: usize,
    /// Fixed covariance scale; `None` picks the smallest resolved trace bound, or the largest
    /// measurement variance when no bound is set.
    pub scale: Option<f64>,
    /// Initial per-axis precision (km⁻²) of the iterative modes.
    pub initial_precision: f64,
    /// Maximum halvings of a rejected iterative step.
    pub max_halvings: usize,
    pub dump_problem: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            structure: NoiseStructure::Diagonal,
            solver: SolveOptions::default(),
            eps: 1e-3,
            max_iter: 50,
            scale: None,
            initial_precision: 1.0,
            max_halvings: 5,
            dump_problem: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
    MaxIter,
}

impl From<LmiStatus> for SynthesisStatus {
    fn from(s: LmiStatus) -> Self {
        match s {
            LmiStatus::Optimal => Self::Optimal,
            LmiStatus::Infeasible => Self::Infeasible,
            LmiStatus::Unbounded => Self::Unbounded,
            LmiStatus::NumericalFailure => Self::NumericalFailure,
            LmiStatus::MaxIter => Self::MaxIter,
        }
    }
}

/// One accepted iterate of the iterative modes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Optimized trace recomputed by the oracle (km²).
    pub gamma: f64,
    /// The solver's bound on the same quantity (km²).
    pub solver_gamma: f64,
    pub delta: f64,
    pub halvings: usize,
    pub active_sensors: usize,
    /// The inner solve stopped short of the solver tolerances; the step was still certified.
    pub inexact: bool,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub formulation: &'static str,
    pub status: SynthesisStatus,
    /// Data-noise covariance (km²); off axes carry `+∞` on the diagonal.
    pub r_data: Option<DMatrix<f64>>,
    /// Data precision (km⁻²).
    pub s_data: Option<DMatrix<f64>>,
    /// Per-axis precisions for diagonal designs.
    pub precisions: Option<DVector<f64>>,
    /// Axes whose precision fell below the cutoff (sensor unnecessary / noise unbounded).
    pub unbounded_axes: Vec<usize>,
    /// Gain rows selected by each utility mask, when the formulation has one.
    pub gain: Option<Vec<DMatrix<f64>>>,
    pub achieved_utility: Vec<f64>,
    pub achieved_privacy: Vec<f64>,
    /// Bounds after resolving fractions; `None` for free entries.
    pub utility_bounds: Vec<Option<f64>>,
    pub privacy_bounds: Vec<Option<f64>>,
    pub objective: f64,
    pub iterations: Vec<IterationRecord>,
    /// Smallest achievable utility trace or largest achievable privacy trace, when infeasible.
    pub floor: Option<f64>,
    pub message: Option<String>,
    pub scale: f64,
    pub solver_stats: Vec<SolverStats>,
    pub problem_dump: Option<String>,
}

impl SynthesisResult {
    fn empty(formulation: &'static str, scale: f64) -> Self {
        Self {
            formulation,
            status: SynthesisStatus::NumericalFailure,
            r_data: None,
            s_data: None,
            precisions: None,
            unbounded_axes: Vec::new(),
            gain: None,
            achieved_utility: Vec::new(),
            achieved_privacy: Vec::new(),
            utility_bounds: Vec::new(),
            privacy_bounds: Vec::new(),
            objective: f64::NAN,
            iterations: Vec::new(),
            floor: None,
            message: None,
            scale,
            solver_stats: Vec::new(),
            problem_dump: None,
        }
    }

    /// True when every resolved bound holds within [`CERT_TOL`].
    pub fn certified(&self) -> bool {
        let u = self
            .achieved_utility
            .iter()
            .zip(&self.utility_bounds)
            .all(|(t, b)| b.is_none_or(|g| *t <= g + CERT_TOL));
        let p = self
            .achieved_privacy
            .iter()
            .zip(&self.privacy_bounds)
            .all(|(t, b)| b.is_none_or(|g| *t >= g - CERT_TOL));
        u && p
    }
}

fn resolve(c: &TraceConstraint, pm: &PriorMoments) -> Option<f64> {
    match c.bound {
        Bound::Absolute(g) => Some(g),
        Bound::FractionOfPrior(f) => Some(f * mask_trace(&c.mask, &pm.sigma_xx)),
        Bound::Free => None,
    }
}

/// Problem data divided by the scale factor.
struct Scaled {
    s: f64,
    pm: PriorMoments,
}

fn scaled(pm: &PriorMoments, spec: &TradeoffSpec, opts: &SynthesisOptions) -> Scaled {
    let s = opts.scale.unwrap_or_else(|| {
        let smallest_bound = spec
            .utility
            .iter()
            .chain(&spec.privacy)
            .filter_map(|c| resolve(c, pm))
            .filter(|g| *g > 0.0 && g.is_finite())
            .fold(f64::INFINITY, f64::min);
        if smallest_bound.is_finite() {
            return smallest_bound;
        }
        let w = &pm.sigma_yy + &pm.r_sensor;
        let d = w.diagonal().iter().fold(0.0_f64, |a, &v| a.max(v));
        if d > 0.0 && d.is_finite() {
            d
        } else {
            1.0
        }
    });
    Scaled {
        s,
        pm: PriorMoments {
            sigma_xx: &pm.sigma_xx / s,
            sigma_xy: &pm.sigma_xy / s,
            sigma_yy: &pm.sigma_yy / s,
            r_sensor: &pm.r_sensor / s,
        },
    }
}

fn precision_shape(m: usize, st: NoiseStructure) -> VarShape {
    match st {
        NoiseStructure::Diagonal => VarShape::Diagonal(m),
        NoiseStructure::Full => VarShape::Symmetric(m),
    }
}

/// Adds `V ⪰ 0` (entrywise for diagonal variables).
fn add_psd_var(p: &mut LmiProblem, v: VarId, m: usize, st: NoiseStructure, label: &str) {
    match st {
        NoiseStructure::Diagonal => {
            for i in 0..m {
                let mut w = DMatrix::zeros(m, m);
                w[(i, i)] = 1.0;
                p.add_nonneg(format!("{label}[{i}]≥0"), LinearForm::new().add(v, w));
            }
        }
        NoiseStructure::Full => p.add_psd(BlockLmi::new(format!("{label}⪰0"), &[m]).set(0, 0, AffineExpr::zeros(m, m).add_var(v))),
    }
}

fn trace_form(v: VarId, n: usize, sign: f64) -> LinearForm {
    LinearForm::new().add(v, DMatrix::identity(n, n) * sign)
}

/// Drops tiny precisions, returning the cleaned matrix and the switched-off axes.
fn clean_precision(s: &DMatrix<f64>, st: NoiseStructure, rel: f64) -> (DMatrix<f64>, Vec<usize>) {
    let s = linalg::symmetrize(s);
    match st {
        NoiseStructure::Diagonal => {
            let d = s.diagonal();
            let max = d.iter().fold(0.0_f64, |a, &v| a.max(v));
            let cut = PRECISION_CUTOFF.max(rel * max);
            let mut off = Vec::new();
            let cleaned = DVector::from_iterator(
                d.len(),
                d.iter().enumerate().map(|(i, &v)| {
                    if v < cut {
                        off.push(i);
                        0.0
                    } else {
                        v
                    }
                }),
            );
            (DMatrix::from_diagonal(&cleaned), off)
        }
        NoiseStructure::Full => {
            let eig = linalg::sym_eigen(&s);
            let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v));
            let cut = PRECISION_CUTOFF.max(rel * max);
            let vals = eig.eigenvalues.map(|v| if v < cut { 0.0 } else { v });
            let off = (0..vals.len()).filter(|&i| vals[i] == 0.0).collect();
            (
                linalg::symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())),
                off,
            )
        }
    }
}

/// Noise covariance matching a cleaned precision; off diagonal axes become `+∞`. Returns
/// `None` for a singular full-structure precision.
fn noise_from_precision(s: &DMatrix<f64>, st: NoiseStructure, off: &[usize]) -> Option<DMatrix<f64>> {
    match st {
        NoiseStructure::Diagonal => Some(DMatrix::from_diagonal(&s.diagonal().map(|v| if v > 0.0 { 1.0 / v } else { f64::INFINITY }))),
        NoiseStructure::Full if off.is_empty() => linalg::spd_inverse(s),
        NoiseStructure::Full => None,
    }
}

/// Fills in precision, noise, and oracle traces for a physical-units precision matrix.
fn finish_precision(
    res: &mut SynthesisResult,
    pm_oracle: &PriorMoments,
    s_phys: &DMatrix<f64>,
    st: NoiseStructure,
    spec: &TradeoffSpec,
    rel: f64,
) -> Result<(), SynthesisError> {
    let (s, off) = clean_precision(s_phys, st, rel);
    let traces = verify_traces_precision(pm_oracle, &s, spec)?;
    res.achieved_utility = traces.utility;
    res.achieved_privacy = traces.privacy;
    res.r_data = noise_from_precision(&s, st, &off);
    if st == NoiseStructure::Diagonal {
        res.precisions = Some(s.diagonal());
    }
    res.s_data = Some(s);
    res.unbounded_axes = off;
    Ok(())
}

fn finish_noise(res: &mut SynthesisResult, pm: &PriorMoments, r_phys: &DMatrix<f64>, st: NoiseStructure, spec: &TradeoffSpec) -> Result<(), SynthesisError> {
    let r = match st {
        NoiseStructure::Diagonal => DMatrix::from_diagonal(&r_phys.diagonal().map(|v| v.max(0.0))),
        NoiseStructure::Full => linalg::clip_psd(r_phys),
    };
    let traces = verify_traces(pm, &r, spec)?;
    res.achieved_utility = traces.utility;
    res.achieved_privacy = traces.privacy;
    res.s_data = linalg::spd_inverse(&r).filter(|_| r.diagonal().iter().all(|&v| v > 0.0));
    if st == NoiseStructure::Diagonal {
        res.precisions = res.s_data.as_ref().map(|s| s.diagonal());
    }
    res.r_data = Some(r);
    Ok(())
}

/// Uniform growth factors tried when an optimal solve misses a one-sided bound by solver tolerance.
const SLACK_FACTORS: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Scales a precision up by the smallest factor in [`SLACK_FACTORS`] that certifies every
/// utility bound. Posterior traces are monotone in the precision, so this only tightens.
fn absorb_utility_slack(
    res: &mut SynthesisResult,
    pm: &PriorMoments,
    s_phys: DMatrix<f64>,
    st: NoiseStructure,
    spec: &TradeoffSpec,
) -> Result<DMatrix<f64>, SynthesisError> {
    let ok = |s: &DMatrix<f64>| -> Result<bool, SynthesisError> {
        let t = verify_traces_precision(pm, &clean_precision(s, st, SOLVE_RELATIVE_CUTOFF).0, spec)?;
        Ok(t.utility.iter().zip(&res.utility_bounds).all(|(t, b)| b.is_none_or(|g| *t <= g + CERT_TOL)))
    };
    if ok(&s_phys)? {
        return Ok(s_phys);
    }
    for eta in SLACK_FACTORS {
        let cand = &s_phys * (1.0 + eta);
        if ok(&cand)? {
            res.message = Some(format!("precision scaled by 1 + {eta:.0e} to absorb solver tolerance"));
            return Ok(cand);
        }
    }
    Ok(s_phys)
}

/// Noise counterpart of [`absorb_utility_slack`] for privacy bounds.
fn absorb_privacy_slack(
    res: &mut SynthesisResult,
    pm: &PriorMoments,
    r_phys: DMatrix<f64>,
    spec: &TradeoffSpec,
) -> Result<DMatrix<f64>, SynthesisError> {
    let ok = |r: &DMatrix<f64>| -> Result<bool, SynthesisError> {
        let t = verify_traces(pm, &linalg::clip_psd(r), spec)?;
        Ok(t.privacy.iter().zip(&res.privacy_bounds).all(|(t, b)| b.is_none_or(|g| *t >= g - CERT_TOL)))
    };
    if ok(&r_phys)? {
        return Ok(r_phys);
    }
    for eta in SLACK_FACTORS {
        let cand = &r_phys * (1.0 + eta);
        if ok(&cand)? {
            res.message = Some(format!("noise scaled by 1 + {eta:.0e} to absorb solver tolerance"));
            return Ok(cand);
        }
    }
    Ok(r_phys)
}

/// Utility floor: traces with no data noise added.
fn utility_floor(pm: &PriorMoments, spec: &TradeoffSpec) -> Result<Traces, SynthesisError> {
    verify_traces(pm, &DMatrix::zeros(pm.meas_dim(), pm.meas_dim()), spec)
}

/// Returns an infeasibility result if some utility bound lies below the zero-noise floor.
fn check_utility_floor(
    pm: &PriorMoments,
    spec: &TradeoffSpec,
    bounds: &[Option<f64>],
    formulation: &'static str,
    scale: f64,
) -> Result<Option<SynthesisResult>, SynthesisError> {
    let floor = utility_floor(pm, spec)?;
    for (j, (t, b)) in floor.utility.iter().zip(bounds).enumerate() {
        if let Some(g) = b {
            if *g < t - CERT_TOL {
                let mut res = SynthesisResult::empty(formulation, scale);
                res.status = SynthesisStatus::Infeasible;
                res.floor = Some(*t);
                res.utility_bounds = bounds.to_vec();
                res.message = Some(format!(
                    "utility bound {g:.6e} km² for {} is below the noise-free floor {t:.6e} km²",
                    spec.utility[j].label
                ));
                return Ok(Some(res));
            }
        }
    }
    Ok(None)
}

fn require(cond: bool, msg: &str) -> Result<(), SynthesisError> {
    if cond {
        Ok(())
    } else {
        Err(SynthesisError::Spec(msg.into()))
    }
}

fn utility_bounds(spec: &TradeoffSpec, pm: &PriorMoments, allow_free: bool) -> Result<Vec<Option<f64>>, SynthesisError> {
    let b: Vec<Option<f64>> = spec.utility.iter().map(|c| resolve(c, pm)).collect();
    if !allow_free && b.iter().any(Option::is_none) {
        return Err(SynthesisError::Spec("utility entries need a bound in this mode".into()));
    }
    Ok(b)
}

fn privacy_bounds(spec: &TradeoffSpec, pm: &PriorMoments, allow_free: bool) -> Result<Vec<Option<f64>>, SynthesisError> {
    let b: Vec<Option<f64>> = spec.privacy.iter().map(|c| resolve(c, pm)).collect();
    if !allow_free && b.iter().any(Option::is_none) {
        return Err(SynthesisError::Spec("privacy entries need a bound in this mode".into()));
    }
    Ok(b)
}

/// Largest data noise (smallest `trace 𝒮`) keeping every utility trace below its bound.
///
/// Uses `Z = Σᵧᵧ + ℛˢ` and the block `[Q − MΣₓₓMᵀ + MΣₓᵧZ⁻¹ΣₓᵧᵀMᵀ, MΣₓᵧ; ·, Z + Z𝒮Z] ⪰ 0`.
/// Falls back to [`max_noise_for_utility_sqrt`] when `Z` is ill-conditioned.
pub fn max_noise_for_utility(pm: &PriorMoments, spec: &TradeoffSpec, opts: &SynthesisOptions) -> Result<SynthesisResult, SynthesisError> {
    spec.check(pm)?;
    require(!spec.utility.is_empty(), "at least one utility entry is required")?;
    let bounds = utility_bounds(spec, pm, false)?;
    let sc = scaled(pm, spec, opts);
    if let Some(res) = check_utility_floor(pm, spec, &bounds, "max_noise_for_utility", sc.s)? {
        return Ok(res);
    }
    let z = &sc.pm.sigma_yy + &sc.pm.r_sensor;
    let reg = linalg::regularize_spd(&z);
    if reg.condition > FALLBACK_CONDITION {
        let mut res = max_noise_for_utility_sqrt(pm, None, spec, opts)?;
        res.message = Some(format!(
            "condition number of Σyy + Rs is {:.3e}; solved in gain form",
            reg.condition
        ));
        return Ok(res);
    }
    let zi = linalg::spd_inverse(&z).ok_or_else(|| KalmanError::Numerical("Σyy + Rs is singular".into()))?;
    let m = pm.meas_dim();
    let mut p = LmiProblem::new();
    let s = p.add_var("S", precision_shape(m, opts.structure));
    add_psd_var(&mut p, s, m, opts.structure, "S");
    for (j, c) in spec.utility.iter().enumerate() {
        let rows = c.mask.nrows();
        let q = p.add_var(format!("Qu{j}"), VarShape::Symmetric(rows));
        let mxy = &c.mask * &sc.pm.sigma_xy;
        let floor = &c.mask * &sc.pm.sigma_xx * c.mask.transpose() - &mxy * &zi * mxy.transpose();
        let blk = BlockLmi::new(format!("utility{j}"), &[rows, m])
            .set(0, 0, AffineExpr::constant(-floor).add_var(q))
            .set(0, 1, AffineExpr::constant(mxy))
            .set(1, 1, AffineExpr::constant(z.clone()).add_product(s, Some(z.clone()), Some(z.clone())));
        p.add_psd(blk);
        let g = bounds[j].expect("checked") / sc.s;
        p.add_nonneg(format!("trace(Qu{j})≤γ"), trace_form(q, rows, -1.0).with_constant(g));
    }
    p.set_objective(Sense::Minimize, trace_form(s, m, 1.0));
    let sol = lmi::solve(&p, &opts.solver)?;
    let mut res = SynthesisResult::empty("max_noise_for_utility", sc.s);
    res.utility_bounds = bounds;
    res.privacy_bounds = privacy_bounds(spec, pm, true)?;
    res.status = sol.status.into();
    res.solver_stats.push(sol.stats.clone());
    if opts.dump_problem {
        res.problem_dump = Some(p.dump()?);
    }
    if sol.is_optimal() {
        let s_phys = absorb_utility_slack(&mut res, pm, sol.value(s) / sc.s, opts.structure, spec)?;
        finish_precision(&mut res, pm, &s_phys, opts.structure, spec, SOLVE_RELATIVE_CUTOFF)?;
        res.objective = res.s_data.as_ref().map_or(f64::NAN, |s| s.trace());
    }
    Ok(res)
}

/// Factor data for the gain-form LMIs: `Gx`, `Gy` with `[Gx; Gy][Gx; Gy]ᵀ` equal to the joint
/// prior covariance, and a factor `Ls` of the sensor noise.
struct GainFactors {
    gx: DMatrix<f64>,
    gy: DMatrix<f64>,
    ls: Option<DMatrix<f64>>,
}

fn gain_factors(pm: &PriorMoments, c: Option<&DMatrix<f64>>) -> Result<GainFactors, SynthesisError> {
    let (gx, gy) = match c {
        Some(c) => {
            if c.shape() != (pm.meas_dim(), pm.state_dim()) {
                return Err(SynthesisError::Spec(format!(
                    "measurement matrix is {:?}, expected {}×{}",
                    c.shape(),
                    pm.meas_dim(),
                    pm.state_dim()
                )));
            }
            let l = linalg::thin_factor(&pm.sigma_xx);
            let gy = c * &l;
            (l, gy)
        }
        None => {
            let g = linalg::thin_factor(&pm.joint_covariance());
            let n = pm.state_dim();
            (g.rows(0, n).into_owned(), g.rows(n, pm.meas_dim()).into_owned())
        }
    };
    let ls = if linalg::max_abs(&pm.r_sensor) > 0.0 { Some(linalg::thin_factor(&pm.r_sensor)) } else { None };
    Ok(GainFactors { gx, gy, ls })
}

/// Gain-form utility block `[Q, MGx − K Gy, K Ls, K F; ·, I, 0, 0; ·, 0, I, 0; ·, 0, 0, P]`
/// where the data-precision block is `P` (affine in the decision variables) and `F` an optional
/// right factor on `K`. With `k_ref` the gain is `K = k_ref + ΔK` and only `ΔK` is a variable,
/// so the block carries the accurately precomputed residual `MGx − k_ref Gy` instead of
/// asking the solver to cancel two large terms. Returns the `Q` and `ΔK` (or `K`) variables.
fn add_gain_utility(
    p: &mut LmiProblem,
    j: usize,
    mask: &DMatrix<f64>,
    f: &GainFactors,
    k_right: Option<&DMatrix<f64>>,
    k_ref: Option<&DMatrix<f64>>,
    precision_block: AffineExpr,
) -> (VarId, VarId) {
    let rows = mask.nrows();
    let m = f.gy.nrows();
    let r = f.gx.ncols();
    let q = p.add_var(format!("Qu{j}"), VarShape::Symmetric(rows));
    let k = p.add_var(format!("K{j}"), VarShape::Full(rows, m));
    // K acts as K·F on the state/sensor paths when the precision block has been congruence-scaled
    let kf = |right: &DMatrix<f64>| match k_right {
        Some(fm) => fm * right,
        None => right.clone(),
    };
    let k0 = k_ref.cloned().unwrap_or_else(|| DMatrix::zeros(rows, m));
    let mut sizes = vec![rows, r];
    if f.ls.is_some() {
        sizes.push(f.ls.as_ref().map_or(0, |l| l.ncols()));
    }
    sizes.push(m);
    let mut blk = BlockLmi::new(format!("utility{j}"), &sizes)
        .set(0, 0, AffineExpr::zeros(rows, rows).add_var(q))
        .set(0, 1, AffineExpr::constant(mask * &f.gx - &k0 * kf(&f.gy)).add_product(k, None, Some(-kf(&f.gy))))
        .set(1, 1, AffineExpr::constant(DMatrix::identity(r, r)));
    let last = sizes.len() - 1;
    if let Some(ls) = &f.ls {
        let rs = ls.ncols();
        blk = blk
            .set(0, 2, AffineExpr::constant(&k0 * kf(ls)).add_product(k, None, Some(kf(ls))))
            .set(2, 2, AffineExpr::constant(DMatrix::identity(rs, rs)));
    }
    blk = blk
        .set(0, last, AffineExpr::constant(k0).add_var(k))
        .set(last, last, precision_block);
    p.add_psd(blk);
    (q, k)
}

/// Privacy block in prior-factor coordinates.
///
/// With `[Gx; Gy]` a factor of the joint prior and `H` the (possibly congruence-scaled) `Gy`,
/// the masked posterior is `M Gx Z Gxᵀ Mᵀ` for the largest `Z` satisfying
/// `[I − Z, Z Hᵀ; H Z, A − H Z Hᵀ] ⪰ 0`, where `A` is the (scaled) total measurement noise.
/// This is the covariance-form block `[Q, MΣₓᵧ; ·, W + A] ⪰ 0` after the congruence
/// `[I, 0; −H, I]`, and it avoids forming the posterior as a small difference of large traces.
///
/// `Z` is further written as `D Ẑ Dᵀ` with `D = V diag(λ^{-1/4})` from the eigenpairs `(V, λ)`
/// of `I + Hᵀ A₀⁻¹ H`, `A₀` a reference noise level. The quarter power splits the dynamic
/// range of `H` between the two diagonal blocks; a full normalization (`λ^{-1/2}`) leaves the
/// upper block badly scaled on the multi-orbit windows.
/// Returns `Ẑ` and the weight `DᵀGxᵀMᵀMGxD` with `trace(M Σ⁺ Mᵀ) = ⟨weight, Ẑ⟩`.
const FACTOR_EXPONENT: f64 = 0.25;

fn add_factor_privacy(
    p: &mut LmiProblem,
    i: usize,
    mask: &DMatrix<f64>,
    gx: &DMatrix<f64>,
    h: &DMatrix<f64>,
    a_ref: &DMatrix<f64>,
    noise: AffineExpr,
) -> (VarId, DMatrix<f64>) {
    let r = gx.ncols();
    let m = h.nrows();
    let info = match linalg::spd_inverse(a_ref) {
        Some(ai) => DMatrix::<f64>::identity(r, r) + h.transpose() * ai * h,
        None => DMatrix::<f64>::identity(r, r),
    };
    let eig = linalg::sym_eigen(&info);
    let lam = eig.eigenvalues.map(|v| v.max(1.0).powf(2.0 * FACTOR_EXPONENT));
    let d = &eig.eigenvectors * DMatrix::from_diagonal(&lam.map(|v| 1.0 / v.sqrt()));
    let hd = h * &d;
    let z = p.add_var(format!("Zp{i}"), VarShape::Symmetric(r));
    let blk = BlockLmi::new(format!("privacy{i}"), &[r, m])
        .set(0, 0, AffineExpr::constant(DMatrix::from_diagonal(&lam)).add_product(z, Some(-DMatrix::identity(r, r)), None))
        .set(0, 1, AffineExpr::zeros(r, m).add_product(z, None, Some(hd.transpose())))
        .set(1, 1, noise.add_product(z, Some(-hd.clone()), Some(hd.transpose())));
    p.add_psd(blk);
    let mgd = mask * gx * &d;
    (z, linalg::symmetrize(&(mgd.transpose() * mgd)))
}

/// Gain-form version of [`max_noise_for_utility`]: minimizes `trace 𝒮` over `𝒮`, `Q`, `K`.
///
/// With a measurement matrix `C` the prior factor is a thin root `L` of `Σₓₓ` and `Gy = CL`;
/// without one the joint prior covariance is factored directly.
pub fn max_noise_for_utility_sqrt(
    pm: &PriorMoments,
    c: Option<&DMatrix<f64>>,
    spec: &TradeoffSpec,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    gain_form_utility(pm, c, spec, opts, true, "max_noise_for_utility_sqrt")
}

/// Smallest total sensor precision `Σλ` (per-axis, diagonal) meeting the utility bounds.
///
/// `λ` is the full precision of each sensed axis, so the prior's sensor noise is not used.
/// Axes with `λ` below the cutoff are reported as switched off.
pub fn min_precision_for_utility(
    pm: &PriorMoments,
    c: Option<&DMatrix<f64>>,
    spec: &TradeoffSpec,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    let m = pm.meas_dim();
    let bare = pm.clone().with_sensor_noise(DMatrix::zeros(m, m))?;
    let opts = SynthesisOptions { structure: NoiseStructure::Diagonal, ..*opts };
    gain_form_utility(&bare, c, spec, &opts, false, "min_precision_for_utility")
}

fn gain_form_utility(
    pm: &PriorMoments,
    c: Option<&DMatrix<f64>>,
    spec: &TradeoffSpec,
    opts: &SynthesisOptions,
    with_sensor: bool,
    formulation: &'static str,
) -> Result<SynthesisResult, SynthesisError> {
    spec.check(pm)?;
    require(!spec.utility.is_empty(), "at least one utility entry is required")?;
    let bounds = utility_bounds(spec, pm, false)?;
    let sc = scaled(pm, spec, opts);
    if let Some(res) = check_utility_floor(pm, spec, &bounds, formulation, sc.s)? {
        return Ok(res);
    }
    let mut f = gain_factors(&sc.pm, c)?;
    if !with_sensor {
        f.ls = None;
    }
    let m = pm.meas_dim();
    let mut p = LmiProblem::new();
    let s = p.add_var("S", precision_shape(m, opts.structure));
    add_psd_var(&mut p, s, m, opts.structure, "S");
    let mut ks = Vec::new();
    for (j, con) in spec.utility.iter().enumerate() {
        let (q, k) = add_gain_utility(&mut p, j, &con.mask, &f, None, None, AffineExpr::zeros(m, m).add_var(s));
        let g = bounds[j].expect("checked") / sc.s;
        p.add_nonneg(format!("trace(Qu{j})≤γ"), trace_form(q, con.mask.nrows(), -1.0).with_constant(g));
        ks.push(k);
    }
    p.set_objective(Sense::Minimize, trace_form(s, m, 1.0));
    let sol = lmi::solve(&p, &opts.solver)?;
    let mut res = SynthesisResult::empty(formulation, sc.s);
    res.utility_bounds = bounds;
    res.privacy_bounds = privacy_bounds(spec, pm, true)?;
    res.status = sol.status.into();
    res.solver_stats.push(sol.stats.clone());
    if opts.dump_problem {
        res.problem_dump = Some(p.dump()?);
    }
    if sol.is_optimal() {
        let s_phys = absorb_utility_slack(&mut res, pm, sol.value(s) / sc.s, opts.structure, spec)?;
        finish_precision(&mut res, pm, &s_phys, opts.structure, spec, SOLVE_RELATIVE_CUTOFF)?;
        res.objective = res.s_data.as_ref().map_or(f64::NAN, |s| s.trace());
        res.gain = Some(ks.iter().map(|&k| sol.value(k).clone()).collect());
    }
    Ok(res)
}

/// Smallest data noise (`trace ℛ`) keeping every privacy trace above its bound.
///
/// Each privacy entry contributes one factor-form block (see [`add_factor_privacy`]) whose
/// variable carries the masked posterior directly, with `⟨weight, Ẑ⟩ ≥ γ_p`.
pub fn min_noise_for_privacy(pm: &PriorMoments, spec: &TradeoffSpec, opts: &SynthesisOptions) -> Result<SynthesisResult, SynthesisError> {
    spec.check(pm)?;
    require(!spec.privacy.is_empty(), "at least one privacy entry is required")?;
    let bounds = privacy_bounds(spec, pm, false)?;
    let sc = scaled(pm, spec, opts);
    let mut res = SynthesisResult::empty("min_noise_for_privacy", sc.s);
    res.privacy_bounds = bounds.clone();
    res.utility_bounds = utility_bounds(spec, pm, true)?;
    for (i, (con, b)) in spec.privacy.iter().zip(&bounds).enumerate() {
        let prior = mask_trace(&con.mask, &pm.sigma_xx);
        let g = b.expect("checked");
        if g > prior + CERT_TOL {
            res.status = SynthesisStatus::Infeasible;
            res.floor = Some(prior);
            res.message = Some(format!(
                "privacy bound {g:.6e} km² for {} exceeds the prior trace {prior:.6e} km²; no amount of noise reaches it",
                spec.privacy[i].label
            ));
            return Ok(res);
        }
    }
    let m = pm.meas_dim();
    let f = gain_factors(&sc.pm, None)?;
    // reference noise for the factor scaling: the sensor noise, or unit noise in scaled units
    let a_ref = &sc.pm.r_sensor + DMatrix::<f64>::identity(m, m);
    let mut p = LmiProblem::new();
    let r = p.add_var("R", precision_shape(m, opts.structure));
    add_psd_var(&mut p, r, m, opts.structure, "R");
    for (i, con) in spec.privacy.iter().enumerate() {
        let noise = AffineExpr::constant(sc.pm.r_sensor.clone()).add_var(r);
        let (z, wgt) = add_factor_privacy(&mut p, i, &con.mask, &f.gx, &f.gy, &a_ref, noise);
        let g = bounds[i].expect("checked") / sc.s;
        p.add_nonneg(format!("trace(MΣ⁺Mᵀ)[{i}]≥γ"), LinearForm::new().add(z, wgt).with_constant(-g));
    }
    p.set_objective(Sense::Minimize, trace_form(r, m, 1.0));
    let sol = lmi::solve(&p, &opts.solver)?;
    res.status = sol.status.into();
    res.solver_stats.push(sol.stats.clone());
    if opts.dump_problem {
        res.problem_dump = Some(p.dump()?);
    }
    if sol.is_optimal() {
        let r_phys = absorb_privacy_slack(&mut res, pm, sol.value(r) * sc.s, spec)?;
        finish_noise(&mut res, pm, &r_phys, opts.structure, spec)?;
        res.objective = res.r_data.as_ref().map_or(f64::NAN, |r| r.trace());
    }
    Ok(res)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// Utility exact in `𝒮`, privacy linearized; maximize free privacy traces.
    UtilityAware,
    /// Privacy exact in `ℛ`, utility linearized; minimize free utility traces.
    PrivacyAware,
}

/// Maximizes the free privacy traces subject to the utility bounds (and any fixed privacy bounds).
///
/// Each iteration solves the joint problem with `𝒮 = 𝒮̄ + 𝒮̃` in the utility LMI and
/// `ℛ = ℛ̄ + ℛ̃` in the privacy LMI, tied by the linearized coupling `𝒮̃ℛ̄ + 𝒮̄ℛ̃ = 0`, and
/// then sets `𝒮̄ ← 𝒮̄ + 𝒮̃`, `ℛ̄ ← 𝒮̄⁻¹`. Because `(𝒮̄ + 𝒮̃)⁻¹ ⪰ ℛ̄ + ℛ̃`, every accepted
/// iterate meets the privacy constraints it was solved for.
///
/// Internally the blocks are congruence-scaled by `F = 𝒮̄^{1/2}` and the step is expressed by
/// the relative variable `Θ = F⁻¹𝒮̃F⁻¹ = −Fℛ̃F`, so that switched-off sensors (`𝒮̄ → 0`,
/// `ℛ̄ → ∞`) never require an inverse.
pub fn utility_aware_privacy(
    pm: &PriorMoments,
    c: Option<&DMatrix<f64>>,
    spec: &TradeoffSpec,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    require(!spec.utility.is_empty(), "at least one utility entry is required")?;
    iterate(pm, c, spec, opts, Direction::UtilityAware)
}

/// Minimizes the free utility traces subject to the privacy bounds (and any fixed utility
/// bounds), updating `ℛ̄ ← ℛ̄ + ℛ̃`, `𝒮̄ ← ℛ̄⁻¹` each iteration.
///
/// Here the step is `ℛ = F⁻¹(I + Θ)F⁻¹`, exact in the privacy LMI, while the utility LMI uses
/// the lower bound `F(I − Θ)F` on the new precision. The iteration starts from the
/// smallest-trace noise meeting the privacy bounds (see [`min_noise_for_privacy`]), so every
/// iterate stays privacy-feasible.
pub fn privacy_aware_utility(
    pm: &PriorMoments,
    c: Option<&DMatrix<f64>>,
    spec: &TradeoffSpec,
    opts: &SynthesisOptions,
) -> Result<SynthesisResult, SynthesisError> {
    require(!spec.privacy.is_empty(), "at least one privacy entry is required")?;
    iterate(pm, c, spec, opts, Direction::PrivacyAware)
}

/// Relative tightening of the fixed bounds inside each iterative step, so that inexact inner
/// solves still land inside the certified region.
const STEP_MARGIN: f64 = 1e-5;

/// Lower bound on `I + Θ` in the privacy-aware step, which caps precision growth per iteration.
const PRIVACY_AWARE_MARGIN: f64 = 1e-2;

struct StepProblem {
    problem: LmiProblem,
    theta: VarId,
    gammas: Vec<VarId>,
    /// Gain increments and the reference gains they are added to.
    ks: Vec<(VarId, DMatrix<f64>)>,
}

fn build_step(
    sc: &Scaled,
    f: &GainFactors,
    spec: &TradeoffSpec,
    ubounds: &[Option<f64>],
    pbounds: &[Option<f64>],
    sqrt_s: &DMatrix<f64>,
    opts: &SynthesisOptions,
    dir: Direction,
) -> StepProblem {
    let m = sqrt_s.nrows();
    let ident = DMatrix::<f64>::identity(m, m);
    let mut p = LmiProblem::new();
    let theta = p.add_var("Theta", precision_shape(m, opts.structure));
    let mut gammas = Vec::new();
    let mut ks = Vec::new();
    // utility: K S⁻¹ Kᵀ with K = K'F. Utility-aware uses S = F(I + Θ)F exactly; privacy-aware
    // replaces the new precision F(I + Θ)⁻¹F by its lower bound F(I − Θ)F.
    let ublock = AffineExpr::constant(ident.clone()).add_var(theta);
    let ublock = match dir {
        Direction::UtilityAware => ublock,
        Direction::PrivacyAware => AffineExpr::constant(ident.clone()).add_product(theta, Some(-ident.clone()), None),
    };
    // optimal gain at the current point, in the scaled coordinates K' = K F⁻¹:
    // MΣₓᵧ F (F W F + I)⁻¹ with W = Σᵧᵧ + ℛˢ
    let sigma_xy_f = &f.gx * (sqrt_s * &f.gy).transpose();
    let w_f = sqrt_s * (&f.gy * f.gy.transpose() + &sc.pm.r_sensor) * sqrt_s + &ident;
    let w_f_inv = linalg::spd_inverse(&w_f).unwrap_or_else(|| ident.clone());
    for (j, con) in spec.utility.iter().enumerate() {
        let k0 = &con.mask * &sigma_xy_f * &w_f_inv;
        let (q, k) = add_gain_utility(&mut p, j, &con.mask, f, Some(sqrt_s), Some(&k0), ublock.clone());
        ks.push((k, k0));
        let rows = con.mask.nrows();
        match ubounds[j] {
            Some(g) => p.add_nonneg(format!("trace(Qu{j})≤γ"), trace_form(q, rows, -1.0).with_constant(g * (1.0 - STEP_MARGIN) / sc.s)),
            None => {
                let gv = p.add_var(format!("gamma_u{j}"), VarShape::Scalar);
                p.add_nonneg(format!("trace(Qu{j})≤γu{j}"), trace_form(q, rows, -1.0).add(gv, DMatrix::from_element(1, 1, 1.0)));
                gammas.push(gv);
            }
        }
    }
    // privacy: the noise seen by the privacy block is F⁻¹(I ∓ Θ)F⁻¹ + ℛˢ, i.e. I ∓ Θ + FℛˢF
    // after congruence by F; utility-aware linearizes it (−Θ), privacy-aware is exact (+Θ)
    let h = sqrt_s * &f.gy;
    let frs = sqrt_s * &sc.pm.r_sensor * sqrt_s;
    let pblock_sign = match dir {
        Direction::UtilityAware => -1.0,
        Direction::PrivacyAware => 1.0,
    };
    for (i, con) in spec.privacy.iter().enumerate() {
        let noise = AffineExpr::constant(&frs + &ident).add_product(theta, Some(&ident * pblock_sign), None);
        let (z, wgt) = add_factor_privacy(&mut p, i, &con.mask, &f.gx, &h, &(&frs + &ident), noise);
        match pbounds[i] {
            Some(g) => p.add_nonneg(
                format!("trace(MΣ⁺Mᵀ)[{i}]≥γ"),
                LinearForm::new().add(z, wgt).with_constant(-g * (1.0 + STEP_MARGIN) / sc.s),
            ),
            None => {
                let gv = p.add_var(format!("gamma_p{i}"), VarShape::Scalar);
                p.add_nonneg(
                    format!("trace(MΣ⁺Mᵀ)[{i}]≥γp{i}"),
                    LinearForm::new().add(z, wgt).add(gv, DMatrix::from_element(1, 1, -1.0)),
                );
                gammas.push(gv);
            }
        }
    }
    if dir == Direction::PrivacyAware {
        // the new noise F⁻¹(I + Θ)F⁻¹ must stay positive; this also bounds the per-step precision growth
        let blk = AffineExpr::constant(&ident * (1.0 - PRIVACY_AWARE_MARGIN)).add_var(theta);
        match opts.structure {
            NoiseStructure::Diagonal => {
                for i in 0..m {
                    let mut wgt = DMatrix::zeros(m, m);
                    wgt[(i, i)] = 1.0;
                    p.add_nonneg(format!("Theta[{i}]≥δ−1"), LinearForm::new().add(theta, wgt).with_constant(1.0 - PRIVACY_AWARE_MARGIN));
                }
            }
            NoiseStructure::Full => p.add_psd(BlockLmi::new("I+Θ⪰δ", &[m]).set(0, 0, blk)),
        }
    }
    let mut obj = LinearForm::new();
    for &g in &gammas {
        obj = obj.add(g, DMatrix::from_element(1, 1, 1.0));
    }
    let sense = match dir {
        Direction::UtilityAware => Sense::Maximize,
        Direction::PrivacyAware => Sense::Minimize,
    };
    p.set_objective(sense, obj);
    StepProblem { problem: p, theta, gammas, ks }
}

/// New precision (scaled units) for a step fraction `t ∈ (0, 1]`.
fn step_precision(sqrt_s: &DMatrix<f64>, theta: &DMatrix<f64>, t: f64, dir: Direction, st: NoiseStructure) -> DMatrix<f64> {
    let m = theta.nrows();
    let ident = DMatrix::<f64>::identity(m, m);
    let inner = match dir {
        Direction::UtilityAware => &ident + theta * t,
        Direction::PrivacyAware => {
            let a = &ident + theta * t;
            match st {
                NoiseStructure::Diagonal => DMatrix::from_diagonal(&a.diagonal().map(|v| 1.0 / v.max(PRIVACY_AWARE_MARGIN))),
                NoiseStructure::Full => linalg::spd_inverse(&a).unwrap_or_else(|| ident.clone()),
            }
        }
    };
    let inner = match st {
        NoiseStructure::Diagonal => DMatrix::from_diagonal(&inner.diagonal().map(|v| v.max(0.0))),
        NoiseStructure::Full => linalg::clip_psd(&inner),
    };
    linalg::symmetrize(&(sqrt_s * inner * sqrt_s))
}

fn iterate(
    pm: &PriorMoments,
    c: Option<&DMatrix<f64>>,
    spec: &TradeoffSpec,
    opts: &SynthesisOptions,
    dir: Direction,
) -> Result<SynthesisResult, SynthesisError> {
    spec.check(pm)?;
    let (formulation, ub, pb) = match dir {
        Direction::UtilityAware => ("utility_aware_privacy", utility_bounds(spec, pm, false)?, privacy_bounds(spec, pm, true)?),
        Direction::PrivacyAware => ("privacy_aware_utility", utility_bounds(spec, pm, true)?, privacy_bounds(spec, pm, false)?),
    };
    let free: Vec<usize> = match dir {
        Direction::UtilityAware => (0..pb.len()).filter(|&i| pb[i].is_none()).collect(),
        Direction::PrivacyAware => (0..ub.len()).filter(|&i| ub[i].is_none()).collect(),
    };
    require(!free.is_empty(), "the iterative modes need at least one free (unbounded) entry to optimize")?;
    let sc = scaled(pm, spec, opts);
    let mut res = SynthesisResult::empty(formulation, sc.s);
    res.utility_bounds = ub.clone();
    res.privacy_bounds = pb.clone();
    if let Some(mut r) = check_utility_floor(pm, spec, &ub, formulation, sc.s)? {
        r.privacy_bounds = pb;
        return Ok(r);
    }
    for (i, (con, b)) in spec.privacy.iter().zip(&pb).enumerate() {
        let prior = mask_trace(&con.mask, &pm.sigma_xx);
        if let Some(g) = b {
            if *g > prior + CERT_TOL {
                res.status = SynthesisStatus::Infeasible;
                res.floor = Some(prior);
                res.message = Some(format!(
                    "privacy bound {g:.6e} km² for {} exceeds the prior trace {prior:.6e} km²",
                    spec.privacy[i].label
                ));
                return Ok(res);
            }
        }
    }
    let f = gain_factors(&sc.pm, c)?;
    let m = pm.meas_dim();
    // S̄ in scaled units: physical precision times s
    let mut s_bar = DMatrix::<f64>::identity(m, m) * (opts.initial_precision * sc.s);
    if dir == Direction::PrivacyAware {
        let warm = min_noise_for_privacy(pm, spec, opts)?;
        let Some(r0) = warm.r_data.filter(|_| warm.status == SynthesisStatus::Optimal) else {
            res.status = warm.status;
            res.message = Some(format!("no noise meets the privacy bounds: {}", warm.message.unwrap_or_default()));
            return Ok(res);
        };
        // raise the noise to at least 1/initial_precision per direction; more noise keeps privacy
        let eig = linalg::sym_eigen(&r0);
        let floor = 1.0 / opts.initial_precision;
        let s_vals = eig.eigenvalues.map(|v| sc.s / v.max(floor));
        s_bar = linalg::symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&s_vals) * eig.eigenvectors.transpose()));
        if opts.structure == NoiseStructure::Diagonal {
            s_bar = DMatrix::from_diagonal(&s_bar.diagonal());
        }
    }
    let objective_of = |t: &Traces| -> f64 {
        match dir {
            Direction::UtilityAware => free.iter().map(|&i| t.privacy[i]).sum(),
            Direction::PrivacyAware => free.iter().map(|&j| t.utility[j]).sum(),
        }
    };
    let certified = |t: &Traces| -> bool {
        let u = t.utility.iter().zip(&ub).all(|(v, b)| b.is_none_or(|g| *v <= g + CERT_TOL));
        let p = t.privacy.iter().zip(&pb).all(|(v, b)| b.is_none_or(|g| *v >= g - CERT_TOL));
        u && p
    };
    let oracle = |s_scaled: &DMatrix<f64>| -> Result<Traces, SynthesisError> {
        let (s_phys, _) = clean_precision(&(s_scaled / sc.s), opts.structure, ITERATE_RELATIVE_CUTOFF);
        verify_traces_precision(pm, &s_phys, spec)
    };
    let mut gamma_old = objective_of(&oracle(&s_bar)?);
    let mut last_gain = None;
    let mut accepted_any = false;
    res.status = SynthesisStatus::MaxIter;
    for iter in 1..=opts.max_iter {
        let sqrt_s = match opts.structure {
            NoiseStructure::Diagonal => DMatrix::from_diagonal(&s_bar.diagonal().map(|v| v.max(0.0).sqrt())),
            NoiseStructure::Full => linalg::sym_sqrt(&s_bar),
        };
        let step = build_step(&sc, &f, spec, &ub, &pb, &sqrt_s, opts, dir);
        if opts.dump_problem && res.problem_dump.is_none() {
            res.problem_dump = Some(step.problem.dump()?);
        }
        let sol = lmi::solve(&step.problem, &opts.solver)?;
        res.solver_stats.push(sol.stats.clone());
        // an inexact inner solve still proposes a step; the oracle check below decides
        let inexact = matches!(sol.status, LmiStatus::NumericalFailure | LmiStatus::MaxIter)
            && sol.values.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !sol.is_optimal() && !inexact {
            if accepted_any {
                res.message = Some(format!("iteration {iter} stopped with solver status {:?}", sol.status));
                res.status = if sol.status == LmiStatus::MaxIter { SynthesisStatus::MaxIter } else { sol.status.into() };
            } else {
                res.status = sol.status.into();
                res.message = Some(format!("first iteration failed with solver status {:?}", sol.status));
            }
            break;
        }
        let solver_gamma: f64 = step.gammas.iter().map(|&g| sol.scalar(g)).sum::<f64>() * sc.s;
        let theta = sol.value(step.theta).clone();
        let mut halvings = 0;
        let mut t = 1.0;
        let accepted = loop {
            let cand = step_precision(&sqrt_s, &theta, t, dir, opts.structure);
            let traces = oracle(&cand)?;
            if certified(&traces) {
                break Some((cand, traces));
            }
            if halvings == opts.max_halvings {
                break None;
            }
            halvings += 1;
            t *= 0.5;
        };
        let Some((cand, traces)) = accepted else {
            res.message = Some(format!("iteration {iter}: no certified step after {halvings} halvings"));
            res.status = if accepted_any { SynthesisStatus::NumericalFailure } else { SynthesisStatus::Infeasible };
            break;
        };
        let gamma = objective_of(&traces);
        if inexact {
            let improved = match dir {
                Direction::UtilityAware => gamma > gamma_old,
                Direction::PrivacyAware => gamma < gamma_old,
            };
            if !improved {
                res.message = Some(format!("iteration {iter}: inexact solve ({}) gave no improvement", sol.stats.solver_status));
                res.status = SynthesisStatus::NumericalFailure;
                break;
            }
        }
        s_bar = cand;
        accepted_any = true;
        last_gain = Some(step.ks.iter().map(|(k, k0)| (k0 + sol.value(*k)) * &sqrt_s).collect::<Vec<_>>());
        let delta = (gamma - gamma_old).abs();
        let active = match opts.structure {
            NoiseStructure::Diagonal => clean_precision(&(&s_bar / sc.s), opts.structure, ITERATE_RELATIVE_CUTOFF).0.diagonal().iter().filter(|&&v| v > 0.0).count(),
            NoiseStructure::Full => m - clean_precision(&(&s_bar / sc.s), opts.structure, ITERATE_RELATIVE_CUTOFF).1.len(),
        };
        res.iterations.push(IterationRecord { iter, gamma, solver_gamma, delta, halvings, active_sensors: active, inexact });
        gamma_old = gamma;
        if delta <= opts.eps {
            res.status = SynthesisStatus::Optimal;
            break;
        }
    }
    if accepted_any {
        let s_phys = &s_bar / sc.s;
        finish_precision(&mut res, pm, &s_phys, opts.structure, spec, ITERATE_RELATIVE_CUTOFF)?;
        res.objective = match dir {
            Direction::UtilityAware => free.iter().map(|&i| res.achieved_privacy[i]).sum(),
            Direction::PrivacyAware => free.iter().map(|&j| res.achieved_utility[j]).sum(),
        };
        res.gain = last_gain;
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_pm() -> PriorMoments {
        PriorMoments::new(one(4.0), one(4.0), one(4.0), one(1.0)).unwrap()
    }

    fn spec_u(g: f64) -> TradeoffSpec {
        TradeoffSpec { utility: vec![TraceConstraint::new("u", one(1.0), Bound::Absolute(g))], privacy: vec![] }
    }

    fn spec_p(b: Bound) -> TradeoffSpec {
        TradeoffSpec { utility: vec![], privacy: vec![TraceConstraint::new("p", one(1.0), b)] }
    }

    #[test]
    fn oracle_scalar_values() {
        let pm = scalar_pm();
        let t = verify_traces(&pm, &one(0.0), &spec_u(1.0)).unwrap();
        assert_relative_eq!(t.utility[0], 0.8, epsilon = 1e-14);
        let t = verify_traces(&pm, &one(1e12), &spec_u(1.0)).unwrap();
        assert_relative_eq!(t.utility[0], 4.0, max_relative = 1e-6);
    }

    #[test]
    fn scalar_max_noise() {
        let res = max_noise_for_utility(&scalar_pm(), &spec_u(1.0), &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Optimal);
        assert_relative_eq!(res.r_data.as_ref().unwrap()[(0, 0)], 1.0 / 3.0, epsilon = 1e-5);
        assert!(res.certified());
    }

    #[test]
    fn scalar_max_noise_gain_form() {
        let c = one(1.0);
        let res = max_noise_for_utility_sqrt(&scalar_pm(), Some(&c), &spec_u(1.0), &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Optimal);
        assert_relative_eq!(res.r_data.as_ref().unwrap()[(0, 0)], 1.0 / 3.0, epsilon = 1e-5);
        assert_relative_eq!(res.gain.as_ref().unwrap()[0][(0, 0)], 0.75, epsilon = 1e-4);
    }

    #[test]
    fn slack_utility_needs_no_data() {
        let res = max_noise_for_utility(&scalar_pm(), &spec_u(5.0), &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Optimal);
        assert_eq!(res.s_data.as_ref().unwrap()[(0, 0)], 0.0);
        assert_eq!(res.unbounded_axes, vec![0]);
        assert!(res.r_data.as_ref().unwrap()[(0, 0)].is_infinite());
    }

    #[test]
    fn utility_below_floor_is_infeasible() {
        let res = max_noise_for_utility(&scalar_pm(), &spec_u(0.5), &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Infeasible);
        assert_relative_eq!(res.floor.unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn scalar_min_precision() {
        let pm = PriorMoments::new(one(4.0), one(4.0), one(4.0), one(0.0)).unwrap();
        let res = min_precision_for_utility(&pm, Some(&one(1.0)), &spec_u(1.0), &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Optimal);
        assert_relative_eq!(res.precisions.as_ref().unwrap()[0], 0.75, epsilon = 1e-5);
        let off = min_precision_for_utility(&pm, None, &spec_u(4.5), &SynthesisOptions::default()).unwrap();
        assert_eq!(off.precisions.unwrap()[0], 0.0);
    }

    #[test]
    fn scalar_min_noise_for_privacy() {
        let res = min_noise_for_privacy(&scalar_pm(), &spec_p(Bound::Absolute(2.0)), &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Optimal);
        assert_relative_eq!(res.r_data.as_ref().unwrap()[(0, 0)], 3.0, epsilon = 1e-5);
        let zero = min_noise_for_privacy(&scalar_pm(), &spec_p(Bound::Absolute(0.5)), &SynthesisOptions::default()).unwrap();
        assert!(zero.r_data.unwrap()[(0, 0)] < 1e-6);
        let inf = min_noise_for_privacy(&scalar_pm(), &spec_p(Bound::Absolute(4.1)), &SynthesisOptions::default()).unwrap();
        assert_eq!(inf.status, SynthesisStatus::Infeasible);
    }

    #[test]
    fn scalar_utility_aware_privacy_meets_utility_bound() {
        let spec = TradeoffSpec {
            utility: vec![TraceConstraint::new("u", one(1.0), Bound::Absolute(1.0))],
            privacy: vec![TraceConstraint::new("p", one(1.0), Bound::Free)],
        };
        let res = utility_aware_privacy(&scalar_pm(), None, &spec, &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Optimal, "{:?}", res.message);
        assert!(res.certified());
        assert_relative_eq!(res.achieved_privacy[0], 1.0, epsilon = 1e-3);
        assert_relative_eq!(res.r_data.as_ref().unwrap()[(0, 0)], 1.0 / 3.0, epsilon = 1e-3);
    }

    #[test]
    fn scalar_privacy_aware_utility_meets_privacy_bound() {
        let spec = TradeoffSpec {
            utility: vec![TraceConstraint::new("u", one(1.0), Bound::Free)],
            privacy: vec![TraceConstraint::new("p", one(1.0), Bound::Absolute(2.0))],
        };
        let res = privacy_aware_utility(&scalar_pm(), None, &spec, &SynthesisOptions::default()).unwrap();
        assert_eq!(res.status, SynthesisStatus::Optimal, "{:?}", res.message);
        assert!(res.certified());
        assert_relative_eq!(res.achieved_utility[0], 2.0, epsilon = 1e-3);
        assert_relative_eq!(res.r_data.as_ref().unwrap()[(0, 0)], 3.0, epsilon = 1e-2);
    }

    #[test]
    fn no_utility_constraint_privacy_reaches_prior() {
        // a slack utility bound leaves privacy free to approach the prior trace
        let spec = TradeoffSpec {
            utility: vec![TraceConstraint::new("u", one(1.0), Bound::Absolute(4.0))],
            privacy: vec![TraceConstraint::new("p", one(1.0), Bound::Free)],
        };
        let res = utility_aware_privacy(&scalar_pm(), None, &spec, &SynthesisOptions::default()).unwrap();
        assert!(res.achieved_privacy[0] >= 4.0 * 0.99, "{}", res.achieved_privacy[0]);
    }
}
