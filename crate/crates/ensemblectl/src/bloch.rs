//! Dimensionless Bloch ensemble dynamics.
//!
//! The magnetization M(t, ω, ε) evolves under
//! dM/dt = [ω Ω_z + ε u(t) Ω_y + ε v(t) Ω_x] M, where ω is the natural
//! frequency offset, ε the rf-amplitude attenuation factor, and (u, v) the
//! transverse control pair. This module holds the rotation generators, the
//! right-hand side and its exact Jacobians, a fixed-step RK4 validator used
//! to score every designed pulse independently of the collocation states,
//! the iterated Lie-bracket computation, and the conversion between
//! dimensionless and physical pulse representations.

use crate::spectral::Real;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BlochError {
    #[error("bloch.delta must lie in [0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("bloch.b must be nonnegative, got {0}")]
    InvalidBand(f64),
    #[error("bloch.amplitude_bound must be positive, got {0}")]
    InvalidAmplitude(f64),
    #[error("bloch.duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("simulation needs at least 100 steps, got {0}")]
    TooFewSteps(usize),
    #[error("control evaluation returned a non-finite value at t = {0}")]
    NonFiniteControl(f64),
    #[error("nominal amplitude must be positive, got {0}")]
    InvalidNominalAmplitude(f64),
    #[error("physical pulse times must be strictly increasing (row {0})")]
    NonMonotoneTime(usize),
    #[error("physical pulse amplitude must be nonnegative (row {0})")]
    NegativeAmplitude(usize),
}

pub type Mat3<S> = [[S; 3]; 3];

/// The SO(3) rotation generators Ω_x, Ω_y, Ω_z.
#[derive(Debug, Clone, Copy)]
pub struct RotationGenerators<S> {
    pub omega_x: Mat3<S>,
    pub omega_y: Mat3<S>,
    pub omega_z: Mat3<S>,
}

pub fn generators<S: Real>() -> RotationGenerators<S> {
    let z = S::zero();
    let o = S::one();
    RotationGenerators {
        omega_x: [[z, z, z], [z, z, -o], [z, o, z]],
        omega_y: [[z, z, o], [z, z, z], [-o, z, z]],
        omega_z: [[z, -o, z], [o, z, z], [z, z, z]],
    }
}

pub fn mat_mul<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut c = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for k in 0..3 {
                acc = acc + a[i][k] * b[k][j];
            }
            c[i][j] = acc;
        }
    }
    c
}

pub fn mat_sub<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut c = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][j] - b[i][j];
        }
    }
    c
}

pub fn commutator<S: Real>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    mat_sub(&mat_mul(a, b), &mat_mul(b, a))
}

/// Right-hand side of the Bloch equation with effective frequency
/// `omega`, attenuation `eps`, and transverse controls (u, v).
#[inline]
pub fn bloch_rhs<S: Real>(omega: S, eps: S, m: &[S; 3], u: S, v: S) -> [S; 3] {
    let eu = eps * u;
    let ev = eps * v;
    [
        -omega * m[1] + eu * m[2],
        omega * m[0] - ev * m[2],
        -eu * m[0] + ev * m[1],
    ]
}

/// Jacobian of `bloch_rhs` with respect to the state: the generator matrix
/// ω Ω_z + εu Ω_y + εv Ω_x itself (the dynamics are linear in M).
#[inline]
pub fn bloch_state_jacobian<S: Real>(omega: S, eps: S, u: S, v: S) -> Mat3<S> {
    let z = S::zero();
    let eu = eps * u;
    let ev = eps * v;
    [[z, -omega, eu], [omega, z, -ev], [-eu, ev, z]]
}

/// Jacobian of `bloch_rhs` with respect to (u, v); columns are ε Ω_y M and
/// ε Ω_x M.
#[inline]
pub fn bloch_control_jacobian<S: Real>(eps: S, m: &[S; 3]) -> [[S; 2]; 3] {
    let z = S::zero();
    [
        [eps * m[2], z],
        [z, -eps * m[2]],
        [-eps * m[0], eps * m[1]],
    ]
}

/// k-fold iterated commutator ad^k_{ω Ω_z}(Ω_y).
pub fn ad_chain<S: Real>(omega: S, k: usize) -> Mat3<S> {
    let gens = generators::<S>();
    let mut x = gens.omega_z;
    for i in 0..3 {
        for j in 0..3 {
            x[i][j] = x[i][j] * omega;
        }
    }
    let mut acc = gens.omega_y;
    for _ in 0..k {
        acc = commutator(&x, &acc);
    }
    acc
}

/// Time-varying frequency profile added to the static offset ω.
pub type FrequencyProfile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Dimensionless Bloch problem parameters.
#[derive(Clone)]
pub struct BlochParams {
    /// Frequency half-band: ω ∈ [-B, B].
    pub b: f64,
    /// rf-inhomogeneity half-width: ε ∈ [1-δ, 1+δ].
    pub delta: f64,
    /// Maximum control norm √(u² + v²).
    pub amplitude_bound: f64,
    /// Dimensionless pulse duration.
    pub duration: f64,
    /// Optional additive time-varying frequency offset ω(t).
    pub frequency_profile: Option<FrequencyProfile>,
}

impl std::fmt::Debug for BlochParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlochParams")
            .field("b", &self.b)
            .field("delta", &self.delta)
            .field("amplitude_bound", &self.amplitude_bound)
            .field("duration", &self.duration)
            .field("frequency_profile", &self.frequency_profile.is_some())
            .finish()
    }
}

impl BlochParams {
    pub fn validate(&self) -> Result<(), BlochError> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(BlochError::InvalidDelta(self.delta));
        }
        if self.b < 0.0 || !self.b.is_finite() {
            return Err(BlochError::InvalidBand(self.b));
        }
        if self.amplitude_bound <= 0.0 {
            return Err(BlochError::InvalidAmplitude(self.amplitude_bound));
        }
        if self.duration <= 0.0 {
            return Err(BlochError::InvalidDuration(self.duration));
        }
        Ok(())
    }

    #[inline]
    pub fn effective_omega(&self, t: f64, omega: f64) -> f64 {
        match &self.frequency_profile {
            Some(p) => omega + p(t),
            None => omega,
        }
    }
}

/// Default step count of the RK4 validator.
pub const DEFAULT_RK4_STEPS: usize = 4000;

/// Integrate one ensemble member from `initial` under the control
/// interpolant with classic fixed-step RK4.
fn rk4_member(
    params: &BlochParams,
    controls: &(dyn Fn(f64) -> (f64, f64) + Sync),
    initial: [f64; 3],
    omega: f64,
    eps: f64,
    steps: usize,
) -> Result<[f64; 3], BlochError> {
    let h = params.duration / steps as f64;
    let mut m = initial;
    let rhs = |t: f64, m: &[f64; 3]| -> Result<[f64; 3], BlochError> {
        let (u, v) = controls(t);
        if !u.is_finite() || !v.is_finite() {
            return Err(BlochError::NonFiniteControl(t));
        }
        Ok(bloch_rhs(params.effective_omega(t, omega), eps, m, u, v))
    };
    for i in 0..steps {
        let t = i as f64 * h;
        let k1 = rhs(t, &m)?;
        let m2 = [
            m[0] + 0.5 * h * k1[0],
            m[1] + 0.5 * h * k1[1],
            m[2] + 0.5 * h * k1[2],
        ];
        let k2 = rhs(t + 0.5 * h, &m2)?;
        let m3 = [
            m[0] + 0.5 * h * k2[0],
            m[1] + 0.5 * h * k2[1],
            m[2] + 0.5 * h * k2[2],
        ];
        let k3 = rhs(t + 0.5 * h, &m3)?;
        let m4 = [m[0] + h * k3[0], m[1] + h * k3[1], m[2] + h * k3[2]];
        let k4 = rhs(t + h, &m4)?;
        for c in 0..3 {
            m[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
    }
    Ok(m)
}

/// RK4 terminal magnetization for each (ω, ε) sample, all starting from the
/// same initial state. Members integrate independently; results are
/// collected in sample order.
pub fn simulate(
    params: &BlochParams,
    controls: &(dyn Fn(f64) -> (f64, f64) + Sync),
    initial: [f64; 3],
    samples: &[(f64, f64)],
    steps: usize,
) -> Result<Vec<[f64; 3]>, BlochError> {
    let initials = vec![initial; samples.len()];
    simulate_from(params, controls, &initials, samples, steps)
}

/// RK4 terminal magnetization with a distinct initial state per sample.
pub fn simulate_from(
    params: &BlochParams,
    controls: &(dyn Fn(f64) -> (f64, f64) + Sync),
    initials: &[[f64; 3]],
    samples: &[(f64, f64)],
    steps: usize,
) -> Result<Vec<[f64; 3]>, BlochError> {
    assert_eq!(initials.len(), samples.len());
    if steps < 100 {
        return Err(BlochError::TooFewSteps(steps));
    }
    samples
        .par_iter()
        .zip(initials.par_iter())
        .map(|(&(omega, eps), &m0)| rk4_member(params, controls, m0, omega, eps, steps))
        .collect()
}

/// One sample of a lab-frame pulse: time in seconds, B1 amplitude in Hz,
/// phase in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalSample {
    pub t_seconds: f64,
    pub amplitude_hz: f64,
    pub phase_rad: f64,
}

/// Physical-unit pulse, scaled by a nominal amplitude.
#[derive(Debug, Clone)]
pub struct PhysicalPulse {
    pub samples: Vec<PhysicalSample>,
    pub nominal_amplitude_hz: f64,
}

impl PhysicalPulse {
    pub fn validate(&self) -> Result<(), BlochError> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.amplitude_hz < 0.0 {
                return Err(BlochError::NegativeAmplitude(i));
            }
            if i > 0 && s.t_seconds <= self.samples[i - 1].t_seconds {
                return Err(BlochError::NonMonotoneTime(i));
            }
        }
        Ok(())
    }

    /// CSV with header `t_seconds,amplitude_hz,phase_rad`, 12 significant
    /// digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_seconds,amplitude_hz,phase_rad\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{:.11e},{:.11e},{:.11e}\n",
                s.t_seconds, s.amplitude_hz, s.phase_rad
            ));
        }
        out
    }
}

/// Convert dimensionless control samples (t, u, v) to a physical pulse.
///
/// Dimensionless time τ = 2π A_phys t_phys, so t_phys = τ / (2π A_phys);
/// amplitude = A_phys √(u² + v²) and phase = atan2(v, u).
pub fn to_physical(
    samples: &[(f64, f64, f64)],
    nominal_amplitude_hz: f64,
) -> Result<PhysicalPulse, BlochError> {
    if nominal_amplitude_hz <= 0.0 {
        return Err(BlochError::InvalidNominalAmplitude(nominal_amplitude_hz));
    }
    let scale = 1.0 / (2.0 * std::f64::consts::PI * nominal_amplitude_hz);
    let samples = samples
        .iter()
        .map(|&(t, u, v)| PhysicalSample {
            t_seconds: t * scale,
            amplitude_hz: nominal_amplitude_hz * (u * u + v * v).sqrt(),
            phase_rad: v.atan2(u),
        })
        .collect();
    let pulse = PhysicalPulse {
        samples,
        nominal_amplitude_hz,
    };
    pulse.validate()?;
    Ok(pulse)
}

/// Inverse of `to_physical` on a shared sample grid: dimensionless
/// (t, u, v) samples.
pub fn from_physical(
    pulse: &PhysicalPulse,
    nominal_amplitude_hz: f64,
) -> Result<Vec<(f64, f64, f64)>, BlochError> {
    if nominal_amplitude_hz <= 0.0 {
        return Err(BlochError::InvalidNominalAmplitude(nominal_amplitude_hz));
    }
    pulse.validate()?;
    Ok(pulse
        .samples
        .iter()
        .map(|s| {
            let tau = 2.0 * std::f64::consts::PI * nominal_amplitude_hz * s.t_seconds;
            let g = s.amplitude_hz / nominal_amplitude_hz;
            (tau, g * s.phase_rad.cos(), g * s.phase_rad.sin())
        })
        .collect())
}
