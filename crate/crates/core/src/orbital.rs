//! Orbit state representations, TLE ingestion, Keplerian/Cartesian conversion
//! and fixed-step propagation under two-body plus zonal-harmonic gravity.
//!
//! Units throughout are km, km/s and seconds; angles are radians.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Vector3, Vector6};
use thiserror::Error;

/// Earth gravitational parameter, km³/s².
pub const MU_EARTH: f64 = 398_600.4418;
/// Earth equatorial radius, km.
pub const R_EARTH: f64 = 6378.137;
pub const J2: f64 = 1.082_626_68e-3;
pub const J3: f64 = -2.5327e-6;
pub const J4: f64 = -1.6196e-6;

const SECONDS_PER_DAY: f64 = 86_400.0;
const KEPLER_TOL: f64 = 1e-12;
const KEPLER_MAX_ITER: usize = 50;
const DEGENERATE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitError {
    #[error("TLE line {line}: checksum mismatch (expected {expected}, found {found})")]
    Checksum { line: usize, expected: u32, found: u32 },
    #[error("TLE line {line}: invalid {field} in columns {start}-{end}: {text:?}")]
    Field {
        line: usize,
        field: &'static str,
        start: usize,
        end: usize,
        text: String,
    },
    #[error("TLE format: {0}")]
    Format(String),
    #[error("invalid orbital elements: {0}")]
    InvalidElements(String),
    #[error("unsupported orbit: eccentricity {0} is not elliptical")]
    UnsupportedOrbit(f64),
    #[error("degenerate orbit: angular momentum {0:e} km²/s is effectively zero")]
    DegenerateOrbit(f64),
    #[error("gravity singularity at the origin")]
    Singularity,
    #[error("reentry at step {step}: radius {radius} km is below {limit} km")]
    Reentry { step: usize, radius: f64, limit: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("Kepler's equation did not converge for mean anomaly {0}")]
    KeplerNonConvergence(f64),
}

/// Keplerian elements `(a, e, i, Ω, ω, f)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitalElements {
    pub semi_major_axis: f64,
    pub eccentricity: f64,
    pub inclination: f64,
    pub raan: f64,
    pub arg_perigee: f64,
    pub true_anomaly: f64,
}

impl OrbitalElements {
    /// Validates the elements and wraps the three node/perigee/anomaly angles into `[0, 2π)`.
    pub fn new(
        semi_major_axis: f64,
        eccentricity: f64,
        inclination: f64,
        raan: f64,
        arg_perigee: f64,
        true_anomaly: f64,
    ) -> Result<Self, OrbitError> {
        let el = Self {
            semi_major_axis,
            eccentricity,
            inclination,
            raan: wrap_angle(raan),
            arg_perigee: wrap_angle(arg_perigee),
            true_anomaly: wrap_angle(true_anomaly),
        };
        el.validate()?;
        Ok(el)
    }

    pub fn validate(&self) -> Result<(), OrbitError> {
        let finite = [
            self.semi_major_axis,
            self.eccentricity,
            self.inclination,
            self.raan,
            self.arg_perigee,
            self.true_anomaly,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(OrbitError::InvalidElements("non-finite element".into()));
        }
        if self.eccentricity >= 1.0 {
            return Err(OrbitError::UnsupportedOrbit(self.eccentricity));
        }
        if self.semi_major_axis <= 0.0 {
            return Err(OrbitError::InvalidElements(format!(
                "semi-major axis {} must be positive",
                self.semi_major_axis
            )));
        }
        if self.eccentricity < 0.0 {
            return Err(OrbitError::InvalidElements(format!(
                "eccentricity {} must be non-negative",
                self.eccentricity
            )));
        }
        if !(0.0..=PI).contains(&self.inclination) {
            return Err(OrbitError::InvalidElements(format!(
                "inclination {} outside [0, π]",
                self.inclination
            )));
        }
        Ok(())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.semi_major_axis,
            self.eccentricity,
            self.inclination,
            self.raan,
            self.arg_perigee,
            self.true_anomaly,
        )
    }

    /// Builds elements from `(a, e, i, Ω, ω, f)` with validation.
    pub fn from_slice(v: &[f64]) -> Result<Self, OrbitError> {
        if v.len() != 6 {
            return Err(OrbitError::InvalidArgument(format!(
                "expected 6 Keplerian elements, got {}",
                v.len()
            )));
        }
        Self::new(v[0], v[1], v[2], v[3], v[4], v[5])
    }
}

/// Cartesian inertial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub epoch: f64,
}

impl StateVector {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>, epoch: f64) -> Self {
        Self { position, velocity, epoch }
    }

    /// `(x, y, z, ẋ, ẏ, ż)`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.position.x,
            self.position.y,
            self.position.z,
            self.velocity.x,
            self.velocity.y,
            self.velocity.z,
        )
    }

    pub fn from_slice(v: &[f64], epoch: f64) -> Result<Self, OrbitError> {
        if v.len() != 6 {
            return Err(OrbitError::InvalidArgument(format!(
                "expected 6 Cartesian components, got {}",
                v.len()
            )));
        }
        Ok(Self::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
            epoch,
        ))
    }

    /// Specific orbital energy `v²/2 − μ/r`.
    pub fn specific_energy(&self, mu: f64) -> f64 {
        0.5 * self.velocity.norm_squared() - mu / self.position.norm()
    }

    pub fn angular_momentum(&self) -> Vector3<f64> {
        self.position.cross(&self.velocity)
    }
}

/// Point-mass gravity plus up to three zonal harmonics (J₂, J₃, J₄).
#[derive(Debug, Clone, PartialEq)]
pub struct GravityModel {
    pub mu: f64,
    pub earth_radius: f64,
    pub zonal_coeffs: Vec<f64>,
}

impl GravityModel {
    pub fn new(mu: f64, earth_radius: f64, zonal_coeffs: Vec<f64>) -> Result<Self, OrbitError> {
        if !(mu > 0.0) {
            return Err(OrbitError::InvalidArgument(format!("mu {mu} must be positive")));
        }
        if !(earth_radius > 0.0) {
            return Err(OrbitError::InvalidArgument(format!(
                "earth radius {earth_radius} must be positive"
            )));
        }
        if zonal_coeffs.len() > 3 {
            return Err(OrbitError::InvalidArgument(format!(
                "at most 3 zonal coefficients (J2..J4) supported, got {}",
                zonal_coeffs.len()
            )));
        }
        Ok(Self { mu, earth_radius, zonal_coeffs })
    }

    pub fn two_body() -> Self {
        Self { mu: MU_EARTH, earth_radius: R_EARTH, zonal_coeffs: Vec::new() }
    }

    /// Earth model truncated after `n_zonal` harmonics (0 = two-body, 3 = through J₄).
    pub fn earth(n_zonal: usize) -> Result<Self, OrbitError> {
        let all = [J2, J3, J4];
        if n_zonal > all.len() {
            return Err(OrbitError::InvalidArgument(format!(
                "at most 3 zonal terms supported, got {n_zonal}"
            )));
        }
        Self::new(MU_EARTH, R_EARTH, all[..n_zonal].to_vec())
    }

    pub fn earth_j4() -> Self {
        Self { mu: MU_EARTH, earth_radius: R_EARTH, zonal_coeffs: vec![J2, J3, J4] }
    }
}

/// Parsed two-line element set. Only the orbital fields are retained.
#[derive(Debug, Clone, PartialEq)]
pub struct Tle {
    pub name: Option<String>,
    pub catalog_number: u32,
    pub epoch_year: u32,
    pub epoch_day: f64,
    pub inclination_deg: f64,
    pub raan_deg: f64,
    pub eccentricity: f64,
    pub arg_perigee_deg: f64,
    pub mean_anomaly_deg: f64,
    /// Revolutions per day.
    pub mean_motion: f64,
}

fn tle_checksum(line: &str) -> u32 {
    line.bytes()
        .take(68)
        .map(|b| match b {
            b'0'..=b'9' => u32::from(b - b'0'),
            b'-' => 1,
            _ => 0,
        })
        .sum::<u32>()
        % 10
}

fn field<'a>(line: &'a str, line_no: usize, start: usize, end: usize) -> &'a str {
    // columns are 1-based inclusive, lines are validated ASCII of length 69
    debug_assert!(line_no == 1 || line_no == 2);
    line[start - 1..end].trim()
}

fn parse_f64(line: &str, line_no: usize, name: &'static str, start: usize, end: usize) -> Result<f64, OrbitError> {
    let text = field(line, line_no, start, end);
    text.parse::<f64>().map_err(|_| OrbitError::Field {
        line: line_no,
        field: name,
        start,
        end,
        text: text.to_string(),
    })
}

fn parse_u32(line: &str, line_no: usize, name: &'static str, start: usize, end: usize) -> Result<u32, OrbitError> {
    let text = field(line, line_no, start, end);
    text.parse::<u32>().map_err(|_| OrbitError::Field {
        line: line_no,
        field: name,
        start,
        end,
        text: text.to_string(),
    })
}

impl Tle {
    /// Parses a two- or three-line (named) element set in the standard fixed-column layout.
    pub fn parse(text: &str) -> Result<Self, OrbitError> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches(['\r', ' ', '\t']))
            .filter(|l| !l.trim().is_empty())
            .collect();
        let (name, l1, l2) = match lines.as_slice() {
            [l1, l2] => (None, *l1, *l2),
            [name, l1, l2] => (Some(name.trim().to_string()), *l1, *l2),
            _ => {
                return Err(OrbitError::Format(format!(
                    "expected 2 element lines (plus optional name line), got {} non-empty lines",
                    lines.len()
                )))
            }
        };
        for (no, line, tag) in [(1usize, l1, '1'), (2, l2, '2')] {
            if !line.is_ascii() {
                return Err(OrbitError::Format(format!("line {no} contains non-ASCII characters")));
            }
            if line.len() != 69 {
                return Err(OrbitError::Format(format!(
                    "line {no} has {} characters, expected 69",
                    line.len()
                )));
            }
            if !line.starts_with(tag) {
                return Err(OrbitError::Format(format!("line {no} must start with '{tag}'")));
            }
            let found = parse_u32(line, no, "checksum", 69, 69)?;
            let expected = tle_checksum(line);
            if found != expected {
                return Err(OrbitError::Checksum { line: no, expected, found });
            }
        }

        let catalog_number = parse_u32(l1, 1, "catalog number", 3, 7)?;
        let catalog_2 = parse_u32(l2, 2, "catalog number", 3, 7)?;
        if catalog_number != catalog_2 {
            return Err(OrbitError::Format(format!(
                "catalog numbers differ between lines ({catalog_number} vs {catalog_2})"
            )));
        }
        let yy = parse_u32(l1, 1, "epoch year", 19, 20)?;
        let epoch_year = if yy < 57 { 2000 + yy } else { 1900 + yy };
        let epoch_day = parse_f64(l1, 1, "epoch day", 21, 32)?;

        let inclination_deg = parse_f64(l2, 2, "inclination", 9, 16)?;
        let raan_deg = parse_f64(l2, 2, "right ascension", 18, 25)?;
        let ecc_text = field(l2, 2, 27, 33);
        if ecc_text.is_empty() || !ecc_text.bytes().all(|b| b.is_ascii_digit()) {
            return Err(OrbitError::Field {
                line: 2,
                field: "eccentricity",
                start: 27,
                end: 33,
                text: ecc_text.to_string(),
            });
        }
        let eccentricity = format!("0.{ecc_text}").parse::<f64>().map_err(|_| OrbitError::Field {
            line: 2,
            field: "eccentricity",
            start: 27,
            end: 33,
            text: ecc_text.to_string(),
        })?;
        let arg_perigee_deg = parse_f64(l2, 2, "argument of perigee", 35, 42)?;
        let mean_anomaly_deg = parse_f64(l2, 2, "mean anomaly", 44, 51)?;
        let mean_motion = parse_f64(l2, 2, "mean motion", 53, 63)?;
        if !(mean_motion > 0.0) {
            return Err(OrbitError::Field {
                line: 2,
                field: "mean motion",
                start: 53,
                end: 63,
                text: field(l2, 2, 53, 63).to_string(),
            });
        }

        Ok(Self {
            name,
            catalog_number,
            epoch_year,
            epoch_day,
            inclination_deg,
            raan_deg,
            eccentricity,
            arg_perigee_deg,
            mean_anomaly_deg,
            mean_motion,
        })
    }

    /// Semi-major axis from mean motion, `a = (μ/n²)^(1/3)` with `n` in rad/s.
    pub fn semi_major_axis(&self, mu: f64) -> f64 {
        let n = self.mean_motion * TAU / SECONDS_PER_DAY;
        (mu / (n * n)).cbrt()
    }

    pub fn to_elements(&self, mu: f64) -> Result<OrbitalElements, OrbitError> {
        let e = self.eccentricity;
        let mean_anomaly = self.mean_anomaly_deg.to_radians();
        let ecc_anomaly = solve_kepler(mean_anomaly, e)?;
        OrbitalElements::new(
            self.semi_major_axis(mu),
            e,
            self.inclination_deg.to_radians(),
            self.raan_deg.to_radians(),
            self.arg_perigee_deg.to_radians(),
            eccentric_to_true(ecc_anomaly, e),
        )
    }
}

/// Parses a TLE and converts it to Keplerian elements with the standard Earth μ.
pub fn parse_tle(text: &str) -> Result<OrbitalElements, OrbitError> {
    Tle::parse(text)?.to_elements(MU_EARTH)
}

/// Newton iteration on `M = E − e sin E` starting from `E₀ = M`.
pub fn solve_kepler(mean_anomaly: f64, e: f64) -> Result<f64, OrbitError> {
    if !(0.0..1.0).contains(&e) {
        return Err(OrbitError::UnsupportedOrbit(e));
    }
    let m = wrap_angle(mean_anomaly);
    let mut ecc = m;
    for _ in 0..KEPLER_MAX_ITER {
        let step = (ecc - e * ecc.sin() - m) / (1.0 - e * ecc.cos());
        ecc -= step;
        if step.abs() <= KEPLER_TOL {
            return Ok(ecc);
        }
    }
    Err(OrbitError::KeplerNonConvergence(mean_anomaly))
}

pub fn eccentric_to_true(ecc_anomaly: f64, e: f64) -> f64 {
    let beta = (1.0 - e * e).sqrt();
    wrap_angle((beta * ecc_anomaly.sin()).atan2(ecc_anomaly.cos() - e))
}

pub fn wrap_angle(x: f64) -> f64 {
    let w = x.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

fn perifocal_to_inertial(raan: f64, inclination: f64, arg_perigee: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), raan)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), inclination)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), arg_perigee)
}

pub fn kepler_to_cartesian(el: &OrbitalElements, g: &GravityModel) -> Result<StateVector, OrbitError> {
    el.validate()?;
    let e = el.eccentricity;
    let p = el.semi_major_axis * (1.0 - e * e);
    let (sf, cf) = el.true_anomaly.sin_cos();
    let r = p / (1.0 + e * cf);
    let pos_pf = Vector3::new(r * cf, r * sf, 0.0);
    let k = (g.mu / p).sqrt();
    let vel_pf = Vector3::new(-k * sf, k * (e + cf), 0.0);
    let rot = perifocal_to_inertial(el.raan, el.inclination, el.arg_perigee);
    Ok(StateVector::new(rot * pos_pf, rot * vel_pf, 0.0))
}

/// Inverse of [`kepler_to_cartesian`] on elliptical orbits.
///
/// Circular orbits (`e < 1e-12`) report `ω = 0` with the argument of latitude in `f`;
/// equatorial orbits (`i < 1e-12`) report `Ω = 0` and measure from the x axis.
pub fn cartesian_to_kepler(sv: &StateVector, g: &GravityModel) -> Result<OrbitalElements, OrbitError> {
    let r_vec = sv.position;
    let v_vec = sv.velocity;
    let r = r_vec.norm();
    if r == 0.0 {
        return Err(OrbitError::Singularity);
    }
    let h_vec = r_vec.cross(&v_vec);
    let h = h_vec.norm();
    if h <= 1e-10 * r * v_vec.norm().max(1e-300) || h == 0.0 {
        return Err(OrbitError::DegenerateOrbit(h));
    }
    let mu = g.mu;
    let energy = 0.5 * v_vec.norm_squared() - mu / r;
    if energy >= 0.0 {
        let e_vec = ((v_vec.norm_squared() - mu / r) * r_vec - r_vec.dot(&v_vec) * v_vec) / mu;
        return Err(OrbitError::UnsupportedOrbit(e_vec.norm()));
    }
    let a = -mu / (2.0 * energy);
    let e_vec = ((v_vec.norm_squared() - mu / r) * r_vec - r_vec.dot(&v_vec) * v_vec) / mu;
    let mut e = e_vec.norm();

    let inclination = (h_vec.x.hypot(h_vec.y)).atan2(h_vec.z);
    let raan = if inclination < DEGENERATE_TOL {
        0.0
    } else {
        wrap_angle(h_vec.x.atan2(-h_vec.y))
    };
    let node = Vector3::new(raan.cos(), raan.sin(), 0.0);
    let h_hat = h_vec / h;
    // argument of latitude (or true longitude when equatorial)
    let u = r_vec.dot(&h_hat.cross(&node)).atan2(r_vec.dot(&node));

    let (arg_perigee, true_anomaly) = if e < DEGENERATE_TOL {
        e = 0.0;
        (0.0, wrap_angle(u))
    } else {
        let p = h * h / mu;
        let f = (h * r_vec.dot(&v_vec) / (mu * r)).atan2(p / r - 1.0);
        (wrap_angle(u - f), wrap_angle(f))
    };

    OrbitalElements::new(a, e, inclination.clamp(0.0, PI), raan, arg_perigee, true_anomaly)
}

/// Gravitational acceleration, km/s². The two-body term points toward the origin.
pub fn acceleration(r: &Vector3<f64>, g: &GravityModel) -> Result<Vector3<f64>, OrbitError> {
    let rn = r.norm();
    if rn == 0.0 || !rn.is_finite() {
        return Err(OrbitError::Singularity);
    }
    let mu = g.mu;
    let mut acc = -(mu / (rn * rn * rn)) * r;
    if g.zonal_coeffs.is_empty() {
        return Ok(acc);
    }
    let (x, y, z) = (r.x, r.y, r.z);
    let re = g.earth_radius;
    let r2 = rn * rn;
    let s = z / rn;
    let s2 = s * s;
    for (idx, &jn) in g.zonal_coeffs.iter().enumerate() {
        if jn == 0.0 {
            continue;
        }
        match idx + 2 {
            2 => {
                let k = -1.5 * jn * mu * re * re / (r2 * r2 * rn);
                acc.x += k * x * (1.0 - 5.0 * s2);
                acc.y += k * y * (1.0 - 5.0 * s2);
                acc.z += k * z * (3.0 - 5.0 * s2);
            }
            3 => {
                let k = -2.5 * jn * mu * re.powi(3) / (r2 * r2 * r2 * rn);
                acc.x += k * x * (3.0 * z - 7.0 * z * s2);
                acc.y += k * y * (3.0 * z - 7.0 * z * s2);
                acc.z += k * (6.0 * z * z - 7.0 * z * z * s2 - 0.6 * r2);
            }
            4 => {
                let k = 1.875 * jn * mu * re.powi(4) / (r2 * r2 * r2 * rn);
                let common = 1.0 - 14.0 * s2 + 21.0 * s2 * s2;
                acc.x += k * x * common;
                acc.y += k * y * common;
                acc.z += k * z * (5.0 - 70.0 / 3.0 * s2 + 21.0 * s2 * s2);
            }
            _ => unreachable!("zonal degree validated at construction"),
        }
    }
    Ok(acc)
}

fn derivative(state: &Vector6<f64>, g: &GravityModel) -> Result<Vector6<f64>, OrbitError> {
    let r = Vector3::new(state[0], state[1], state[2]);
    let a = acceleration(&r, g)?;
    Ok(Vector6::new(state[3], state[4], state[5], a.x, a.y, a.z))
}

/// One classical RK4 step of the Cowell equations.
pub fn rk4_step(state: &Vector6<f64>, dt: f64, g: &GravityModel) -> Result<Vector6<f64>, OrbitError> {
    let k1 = derivative(state, g)?;
    let k2 = derivative(&(state + 0.5 * dt * k1), g)?;
    let k3 = derivative(&(state + 0.5 * dt * k2), g)?;
    let k4 = derivative(&(state + dt * k3), g)?;
    Ok(state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Fixed-step RK4 propagation returning `n_steps + 1` states including the initial one.
pub fn propagate(sv: &StateVector, dt: f64, n_steps: usize, g: &GravityModel) -> Result<Vec<StateVector>, OrbitError> {
    let mut out = Vec::with_capacity(n_steps + 1);
    propagate_with(sv, dt, n_steps, g, |_, s| out.push(s))?;
    Ok(out)
}

/// Propagates and returns only the states at the requested step indices (sorted ascending).
pub fn propagate_to_steps(
    sv: &StateVector,
    dt: f64,
    steps: &[usize],
    g: &GravityModel,
) -> Result<Vec<StateVector>, OrbitError> {
    if steps.windows(2).any(|w| w[0] > w[1]) {
        return Err(OrbitError::InvalidArgument("step indices must be sorted".into()));
    }
    let last = steps.last().copied().unwrap_or(0);
    let mut out = Vec::with_capacity(steps.len());
    let mut next = 0;
    propagate_with(sv, dt, last, g, |k, s| {
        while next < steps.len() && steps[next] == k {
            out.push(s);
            next += 1;
        }
    })?;
    Ok(out)
}

fn propagate_with<F: FnMut(usize, StateVector)>(
    sv: &StateVector,
    dt: f64,
    n_steps: usize,
    g: &GravityModel,
    mut visit: F,
) -> Result<(), OrbitError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(OrbitError::InvalidArgument(format!("time step {dt} must be positive")));
    }
    let check = |k: usize, s: &Vector6<f64>| -> Result<(), OrbitError> {
        let radius = Vector3::new(s[0], s[1], s[2]).norm();
        if !(radius >= g.earth_radius) {
            return Err(OrbitError::Reentry { step: k, radius, limit: g.earth_radius });
        }
        Ok(())
    };
    let mut state = sv.to_vector();
    check(0, &state)?;
    visit(0, *sv);
    for k in 1..=n_steps {
        state = rk4_step(&state, dt, g)?;
        check(k, &state)?;
        visit(
            k,
            StateVector::new(
                Vector3::new(state[0], state[1], state[2]),
                Vector3::new(state[3], state[4], state[5]),
                sv.epoch + k as f64 * dt,
            ),
        );
    }
    Ok(())
}

pub fn orbital_period(a: f64, mu: f64) -> f64 {
    TAU * (a * a * a / mu).sqrt()
}
