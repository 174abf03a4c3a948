//! Noise models for UWB ranging.
//!
//! * Two-way-ranging error: a Gaussian/Gamma mixture whose Gamma component
//!   produces the heavy right tail seen with multipath and NLoS.
//! * Delay error on relayed (indirect) distances: the neighbors move during
//!   the measure-to-transmit interval, so the transmitted distance is off by
//!   a displacement uniformly distributed inside a ball of radius
//!   `r = eta_bar * v_bar`. The resulting density is a quartic supported on
//!   `[-r, r]`.
//! * Actuator error: zero-mean Gaussian on heading rate and body velocity.
//!
//! Densities are evaluated in `f64`; samplers draw from a caller-owned RNG
//! so trials stay reproducible.

use std::f64::consts::PI;

use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{CrlError, Result};

/// Parameters of the Gaussian/Gamma ranging-error mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeavyTailSpec {
    /// Heavy-tail scale factor; the Gamma component has weight `s_ht / (1 + s_ht)`.
    pub s_ht: f64,
    /// Base of the Gaussian mean; the Gaussian is centred at `s_ht * mu`.
    pub mu: f64,
    pub sigma: f64,
    pub k_shape: f64,
    /// Gamma rate (1/m).
    pub rate: f64,
}

impl HeavyTailSpec {
    pub fn paper_default() -> Self {
        Self {
            s_ht: 0.2,
            mu: 0.1,
            sigma: 0.1,
            k_shape: 2.0,
            rate: 3.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.s_ht >= 0.0 && self.sigma > 0.0 && self.k_shape > 0.0 && self.rate > 0.0 && self.mu.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CrlError::Config(format!("invalid heavy-tail spec {self:?}")))
        }
    }

    fn gamma_weight(&self) -> f64 {
        self.s_ht / (1.0 + self.s_ht)
    }

    /// Mixture mean, in closed form.
    pub fn mean(&self) -> f64 {
        let w = self.gamma_weight();
        (1.0 - w) * self.s_ht * self.mu + w * self.k_shape / self.rate
    }

    /// Mixture variance, in closed form.
    pub fn variance(&self) -> f64 {
        let w = self.gamma_weight();
        let g_mean = self.s_ht * self.mu;
        let gm_mean = self.k_shape / self.rate;
        let second = (1.0 - w) * (self.sigma * self.sigma + g_mean * g_mean)
            + w * (self.k_shape / (self.rate * self.rate) + gm_mean * gm_mean);
        second - self.mean().powi(2)
    }
}

fn gaussian_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Gamma density in the rate parameterization, zero for negative arguments.
fn gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    if x == 0.0 {
        return match shape.partial_cmp(&1.0) {
            Some(std::cmp::Ordering::Less) => f64::INFINITY,
            Some(std::cmp::Ordering::Equal) => rate,
            _ => 0.0,
        };
    }
    (shape * rate.ln() + (shape - 1.0) * x.ln() - rate * x - ln_gamma(shape)).exp()
}

/// Density of the ranging error `nu` (1/m).
pub fn uwb_pdf(nu: f64, spec: &HeavyTailSpec) -> f64 {
    let w = spec.gamma_weight();
    (1.0 - w) * gaussian_pdf(nu, spec.s_ht * spec.mu, spec.sigma) + w * gamma_pdf(nu, spec.k_shape, spec.rate)
}

/// Draws one ranging error.
pub fn uwb_sample<R: Rng + ?Sized>(rng: &mut R, spec: &HeavyTailSpec) -> f64 {
    if rng.random::<f64>() < spec.gamma_weight() {
        Gamma::new(spec.k_shape, 1.0 / spec.rate)
            .expect("validated gamma parameters")
            .sample(rng)
    } else {
        Normal::new(spec.s_ht * spec.mu, spec.sigma)
            .expect("validated gaussian parameters")
            .sample(rng)
    }
}

/// Parameters of the delay-induced error on relayed distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelaySpec {
    /// Upper bound of the measure-to-transmit interval (s).
    pub eta_bar: f64,
    /// Upper bound of the relative speed between any two agents (m/s).
    pub v_bar: f64,
    /// Distance at which the density is frozen (m).
    pub d_ref: f64,
}

impl DelaySpec {
    /// `eta = 0.01 s`, `v = 15 m/s`, frozen at the worst case `d = 3 r`.
    pub fn paper_default() -> Self {
        let eta_bar = 0.01;
        let v_bar = 15.0;
        Self {
            eta_bar,
            v_bar,
            d_ref: 3.0 * eta_bar * v_bar,
        }
    }

    pub fn r_bar(&self) -> f64 {
        self.eta_bar * self.v_bar
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_bar > 0.0 && self.v_bar > 0.0) {
            return Err(CrlError::Config(format!("invalid delay spec {self:?}")));
        }
        // Below d = r the quartic goes negative inside the support.
        if self.d_ref < self.r_bar() {
            return Err(CrlError::Config(format!(
                "delay reference distance {} is below the displacement radius {}",
                self.d_ref,
                self.r_bar()
            )));
        }
        Ok(())
    }
}

/// Approximate spherical-cap area for a distance error `nu` at distance `d`.
fn cap_area(nu: f64, d: f64, r: f64) -> f64 {
    let q = nu * nu + 2.0 * nu * d - r * r;
    PI * (4.0 * d * d * r * r - q * q)
}

fn delay_normalizer(d: f64, r: f64) -> f64 {
    15.0 / (16.0 * PI * r.powi(3) * (5.0 * d * d - r * r))
}

/// Delay-error density for displacement radius `r` at distance `d`.
pub fn delay_pdf_at(nu: f64, r: f64, d: f64) -> f64 {
    if nu < -r || nu > r {
        return 0.0;
    }
    (delay_normalizer(d, r) * cap_area(nu, d, r)).max(0.0)
}

/// Delay-error density at the spec's frozen reference distance.
pub fn delay_pdf(nu: f64, spec: &DelaySpec) -> f64 {
    delay_pdf_at(nu, spec.r_bar(), spec.d_ref)
}

/// Rejection sampler for the delay error at one fixed distance.
#[derive(Debug, Clone, Copy)]
pub struct DelaySampler {
    r: f64,
    d: f64,
    envelope: f64,
}

impl DelaySampler {
    /// Distances below `r` are raised to `r`, where the density is still
    /// nonnegative.
    pub fn new(r: f64, d: f64) -> Self {
        let d = d.max(r);
        // The cap area peaks where nu^2 + 2 nu d - r^2 = 0, at 4 pi d^2 r^2.
        let peak = delay_normalizer(d, r) * 4.0 * PI * d * d * r * r;
        Self {
            r,
            d,
            envelope: 1.05 * peak,
        }
    }

    pub fn from_spec(spec: &DelaySpec) -> Self {
        Self::new(spec.r_bar(), spec.d_ref)
    }

    pub fn radius(&self) -> f64 {
        self.r
    }

    pub fn pdf(&self, nu: f64) -> f64 {
        delay_pdf_at(nu, self.r, self.d)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let nu = rng.random_range(-self.r..=self.r);
            let u = rng.random::<f64>() * self.envelope;
            if u <= self.pdf(nu) {
                return nu;
            }
        }
    }
}

/// Draws one delay error at the spec's frozen distance.
pub fn delay_sample<R: Rng + ?Sized>(rng: &mut R, spec: &DelaySpec) -> f64 {
    DelaySampler::from_spec(spec).sample(rng)
}

/// Standard deviations of the Gaussian actuator noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorNoiseSpec {
    /// Heading-rate noise (rad/s).
    pub sigma_psi: f64,
    /// Per-axis velocity noise (m/s).
    pub sigma_v: f64,
}

impl ActuatorNoiseSpec {
    pub fn paper_default() -> Self {
        Self {
            sigma_psi: 0.4,
            sigma_v: 0.25,
        }
    }

    pub fn zero() -> Self {
        Self {
            sigma_psi: 0.0,
            sigma_v: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_psi >= 0.0 && self.sigma_v >= 0.0 {
            Ok(())
        } else {
            Err(CrlError::Config(format!("invalid actuator noise {self:?}")))
        }
    }

    /// `Q_u = diag(sigma_psi^2, sigma_v^2, sigma_v^2, sigma_v^2)`.
    pub fn covariance(&self) -> Matrix4<f64> {
        let v = self.sigma_v * self.sigma_v;
        Matrix4::from_diagonal(&Vector4::new(self.sigma_psi * self.sigma_psi, v, v, v))
    }
}

/// Draws one actuator perturbation `(d_psi_dot, d_vx, d_vy, d_vz)`.
pub fn actuator_sample<R: Rng + ?Sized>(rng: &mut R, spec: &ActuatorNoiseSpec) -> Vector4<f64> {
    let psi = Normal::new(0.0, spec.sigma_psi).expect("validated actuator spec");
    let v = Normal::new(0.0, spec.sigma_v).expect("validated actuator spec");
    Vector4::new(psi.sample(rng), v.sample(rng), v.sample(rng), v.sample(rng))
}

/// How the delay density's distance argument is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// Frozen at `DelaySpec::d_ref` for every measurement.
    #[default]
    Frozen,
    /// Evaluated at the true neighbor-to-neighbor distance of each measurement.
    PerMeasurement,
}

/// All noise sources of a run. A disabled (`None`) source contributes zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub uwb: Option<HeavyTailSpec>,
    pub delay: Option<DelaySpec>,
    #[serde(default)]
    pub delay_mode: DelayMode,
    pub actuator: ActuatorNoiseSpec,
}

impl NoiseConfig {
    pub fn paper_default() -> Self {
        Self {
            uwb: Some(HeavyTailSpec::paper_default()),
            delay: Some(DelaySpec::paper_default()),
            delay_mode: DelayMode::Frozen,
            actuator: ActuatorNoiseSpec::paper_default(),
        }
    }

    pub fn noiseless() -> Self {
        Self {
            uwb: None,
            delay: None,
            delay_mode: DelayMode::Frozen,
            actuator: ActuatorNoiseSpec::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(u) = &self.uwb {
            u.validate()?;
        }
        if let Some(d) = &self.delay {
            d.validate()?;
        }
        self.actuator.validate()
    }
}
