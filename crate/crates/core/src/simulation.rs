//! Swarm ground truth, range measurements and the per-step estimation loop
//! of the host agent, plus the Monte Carlo harness.
//!
//! A trial is split in two: a [`Scenario`] holds everything random (true
//! trajectories, measurement draws, initial belief) and is fully determined
//! by the configuration and seed; [`estimate`] runs one estimation method on
//! it. Methods compared on the same scenario therefore see identical noise.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};
use crate::filters::{ekf_predict, ekf_update, mlvc_update, FilterBelief, FixedPointConfig, KernelKind};
use crate::geometry::{planar_rotation, wrap_angle, ControlInput, RelativeState};
use crate::models::{AugmentedInput, AugmentedState, CrlModel, IndirectLayout, SchemeKind, SystemModel, Topology};
use crate::noise::{actuator_sample, uwb_sample, DelayMode, DelaySampler, NoiseConfig};

/// Closed-form nominal trajectory of one agent: a horizontal circle with a
/// vertical oscillation and intermittent constant-rate heading turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub x_c: f64,
    pub y_c: f64,
    pub z_c: f64,
    pub radius: f64,
    pub radius_z: f64,
    pub freq: f64,
    pub freq_z: f64,
    pub phase: f64,
    pub psi0: f64,
    /// Heading change of each turn.
    pub psi_turn: f64,
    /// Start times of the 2 s turns.
    pub turn_starts: Vec<f64>,
}

pub const TURN_DURATION: f64 = 2.0;

impl TrajectorySpec {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.radius < 0.0 || self.radius_z < 0.0 || self.freq < 0.0 || self.freq_z < 0.0 {
            return Err(CrlError::Config(
                "trajectory radii and frequencies must be non-negative".into(),
            ));
        }
        let mut starts = self.turn_starts.clone();
        starts.sort_by(f64::total_cmp);
        for (i, &t) in starts.iter().enumerate() {
            if t < 0.0 || t + TURN_DURATION > horizon {
                return Err(CrlError::Config(format!(
                    "turn at {t} s leaves the {horizon} s horizon"
                )));
            }
            if i > 0 && t < starts[i - 1] + TURN_DURATION {
                return Err(CrlError::Config(format!(
                    "turns at {} s and {t} s overlap",
                    starts[i - 1]
                )));
            }
        }
        Ok(())
    }

    fn turning(&self, t: f64) -> bool {
        // half-open window, so an Euler sum over the turn adds exactly psi_turn
        self.turn_starts
            .iter()
            .any(|&s| t >= s - 1e-9 && t < s + TURN_DURATION - 1e-9)
    }
}

/// `(x_c, y_c, z_c, radius, radius_z, freq, freq_z, phase, psi0, psi_turn, turn_starts)`.
type SwarmRow = (f64, f64, f64, f64, f64, f64, f64, f64, f64, f64, [f64; 3]);

/// The five-agent reference swarm.
pub fn paper_swarm() -> Vec<TrajectorySpec> {
    use std::f64::consts::PI;
    let rows: [SwarmRow; 5] = [
        (0.0, 0.0, 7.0, 1.0, 4.0, 0.3, 0.2, 0.0, 0.0, PI / 6.0, [3.0, 10.0, 20.0]),
        (
            2.0,
            2.0,
            8.0,
            1.2,
            4.5,
            0.4,
            0.4,
            PI / 4.0,
            2.0 * PI / 5.0,
            PI / 6.0,
            [6.0, 12.0, 15.0],
        ),
        (
            -2.0,
            2.0,
            9.0,
            0.8,
            6.0,
            0.2,
            0.3,
            4.0 * PI / 3.0,
            3.0 * PI / 5.0,
            -PI / 6.0,
            [4.0, 8.0, 11.0],
        ),
        (
            -2.0,
            -2.0,
            6.0,
            1.3,
            3.5,
            0.5,
            0.35,
            -4.0 * PI / 3.0,
            4.0 * PI / 5.0,
            -PI / 6.0,
            [5.0, 9.0, 12.0],
        ),
        (
            2.0,
            -2.0,
            5.0,
            0.7,
            2.0,
            0.1,
            0.25,
            -PI / 4.0,
            PI / 5.0,
            PI / 6.0,
            [7.0, 11.0, 25.0],
        ),
    ];
    rows.iter()
        .map(
            |&(x_c, y_c, z_c, radius, radius_z, freq, freq_z, phase, psi0, psi_turn, starts)| TrajectorySpec {
                x_c,
                y_c,
                z_c,
                radius,
                radius_z,
                freq,
                freq_z,
                phase,
                psi0,
                psi_turn,
                turn_starts: starts.to_vec(),
            },
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalState {
    pub position: Vector3<f64>,
    pub heading: f64,
    pub velocity_world: Vector3<f64>,
    /// World velocity expressed in the agent's horizontal frame.
    pub velocity_body: Vector3<f64>,
    pub heading_rate: f64,
}

impl NominalState {
    pub fn input(&self) -> ControlInput<f64> {
        ControlInput::new(self.heading_rate, self.velocity_body)
    }
}

pub fn nominal_state(spec: &TrajectorySpec, t: f64) -> NominalState {
    use std::f64::consts::TAU;
    let a = TAU * spec.freq * t + spec.phase;
    let b = TAU * spec.freq_z * t;
    let position = Vector3::new(
        spec.x_c + spec.radius * a.cos(),
        spec.y_c + spec.radius * a.sin(),
        spec.z_c + spec.radius_z * b.sin(),
    );
    let velocity_world = Vector3::new(
        -TAU * spec.freq * spec.radius * a.sin(),
        TAU * spec.freq * spec.radius * a.cos(),
        TAU * spec.freq_z * spec.radius_z * b.cos(),
    );
    let turned: f64 = spec
        .turn_starts
        .iter()
        .map(|&s| 0.5 * spec.psi_turn * (t - s).clamp(0.0, TURN_DURATION))
        .sum();
    let heading = wrap_angle(spec.psi0 + turned);
    let heading_rate = if spec.turning(t) { 0.5 * spec.psi_turn } else { 0.0 };
    NominalState {
        position,
        heading,
        velocity_world,
        velocity_body: planar_rotation(heading).transpose() * velocity_world,
        heading_rate,
    }
}

/// Heading and position of an agent in the common world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalPose {
    pub position: Vector3<f64>,
    pub heading: f64,
}

/// State of `other` in the horizontal frame of `host`.
pub fn relative_state(host: &GlobalPose, other: &GlobalPose) -> RelativeState<f64> {
    RelativeState::new(
        other.heading - host.heading,
        planar_rotation(host.heading).transpose() * (other.position - host.position),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    Smart,
    Inattentive,
}

impl CovarianceMode {
    pub fn label(&self) -> &'static str {
        match self {
            CovarianceMode::Smart => "smart",
            CovarianceMode::Inattentive => "inattentive",
        }
    }
}

impl std::str::FromStr for CovarianceMode {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "smart" => Ok(CovarianceMode::Smart),
            "inattentive" => Ok(CovarianceMode::Inattentive),
            other => Err(CrlError::Config(format!("unknown covariance mode '{other}'"))),
        }
    }
}

/// Range variances assumed by the filter in each covariance mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementVariances {
    pub smart_direct: f64,
    pub smart_indirect: f64,
    pub inattentive: f64,
}

impl Default for MeasurementVariances {
    fn default() -> Self {
        Self {
            smart_direct: 0.08,
            smart_indirect: 0.09,
            inattentive: 0.01,
        }
    }
}

/// Diagonal measurement covariance for `n` direct and `p_id` relayed ranges.
pub fn build_r(
    mode: CovarianceMode,
    scheme: SchemeKind,
    n: usize,
    p_id: usize,
    variances: &MeasurementVariances,
) -> DMatrix<f64> {
    let indirect = if scheme.uses_indirect() { p_id } else { 0 };
    let diag = DVector::from_fn(n + indirect, |i, _| match mode {
        CovarianceMode::Inattentive => variances.inattentive,
        CovarianceMode::Smart if i < n => variances.smart_direct,
        CovarianceMode::Smart => variances.smart_indirect,
    });
    DMatrix::from_diagonal(&diag)
}

/// `I_blocks ⊗ Q_u`.
pub fn build_q(q_u: &nalgebra::Matrix4<f64>, blocks: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(4 * blocks, 4 * blocks);
    for b in 0..blocks {
        q.view_mut((4 * b, 4 * b), (4, 4)).copy_from(q_u);
    }
    q
}

/// Initial heading and position error bounds `(psi_e, r_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyLevel {
    pub psi_e: f64,
    pub r_e: f64,
}

impl UncertaintyLevel {
    /// Level `q` of the evaluation grid: `(q π/18, q/2)`.
    pub fn from_q(q: f64) -> Self {
        Self {
            psi_e: q * std::f64::consts::PI / 18.0,
            r_e: q / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi_e > 0.0 && self.r_e > 0.0 {
            Ok(())
        } else {
            Err(CrlError::Config("uncertainty level must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FilterSpec {
    Ekf,
    Kernel {
        kernel: KernelKind,
        #[serde(default)]
        fixed_point: FixedPointConfig,
    },
}

impl FilterSpec {
    pub fn mlvc() -> Self {
        FilterSpec::Kernel {
            kernel: KernelKind::LogVersoria(5.0),
            fixed_point: FixedPointConfig::default(),
        }
    }

    /// Parenthesized suffix used in method names: `(MLVC)`, `(MVC)`, `(MGC)`.
    pub fn suffix(&self) -> String {
        match self {
            FilterSpec::Ekf => String::new(),
            FilterSpec::Kernel { kernel, fixed_point } => {
                let name = match kernel {
                    KernelKind::LogVersoria(_) => "MLVC",
                    KernelKind::Versoria(_) => "MVC",
                    KernelKind::Gaussian(_) => "MGC",
                };
                if fixed_point.max_iters == 1 {
                    format!("({name}-1it)")
                } else {
                    format!("({name})")
                }
            }
        }
    }
}

/// `ekf`, `mlvc`, `mvc`, `mgc`, or any kernel name with a `-1it` suffix;
/// kernels use bandwidth 5.
impl std::str::FromStr for FilterSpec {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (name, fixed_point) = match lower.strip_suffix("-1it") {
            Some(name) => (name, FixedPointConfig::one_iteration()),
            None => (lower.as_str(), FixedPointConfig::default()),
        };
        let kernel = match name {
            "ekf" if fixed_point.max_iters != 1 => return Ok(FilterSpec::Ekf),
            "mlvc" => KernelKind::LogVersoria(5.0),
            "mvc" => KernelKind::Versoria(5.0),
            "mgc" => KernelKind::Gaussian(5.0),
            _ => return Err(CrlError::Config(format!("unknown filter '{s}'"))),
        };
        Ok(FilterSpec::Kernel { kernel, fixed_point })
    }
}

/// Scheme, filter and covariance mode of one estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub scheme: SchemeKind,
    pub filter: FilterSpec,
    pub mode: CovarianceMode,
}

impl Method {
    pub fn new(scheme: SchemeKind, filter: FilterSpec, mode: CovarianceMode) -> Self {
        Self { scheme, filter, mode }
    }

    /// Name without the covariance mode, e.g. `fCRL(MLVC)`.
    pub fn name(&self) -> String {
        format!("{}{}", self.scheme.label(), self.filter.suffix())
    }

    pub fn validate(&self) -> Result<()> {
        if let FilterSpec::Kernel { kernel, fixed_point } = &self.filter {
            kernel.validate()?;
            fixed_point.validate()?;
        }
        Ok(())
    }
}

/// Methods of the standard evaluation: every scheme with EKF and MLVC in
/// both covariance modes, plus the smart-mode fCRL kernel comparison
/// (Versoria, Gaussian) and single-iteration MLVC.
pub fn comparison_methods() -> Vec<Method> {
    let mut methods = Vec::new();
    for mode in [CovarianceMode::Smart, CovarianceMode::Inattentive] {
        for scheme in [SchemeKind::Fcrl, SchemeKind::Hcrl, SchemeKind::Ncrl] {
            methods.push(Method::new(scheme, FilterSpec::Ekf, mode));
            methods.push(Method::new(scheme, FilterSpec::mlvc(), mode));
        }
    }
    for name in ["mvc", "mgc", "mlvc-1it"] {
        let filter = name.parse().expect("built-in filter name");
        methods.push(Method::new(SchemeKind::Fcrl, filter, CovarianceMode::Smart));
    }
    methods
}

/// Full description of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub horizon: f64,
    pub ts: f64,
    pub swarm: Vec<TrajectorySpec>,
    /// Neighbor sets per agent; all-to-all when absent.
    #[serde(default)]
    pub topology: Option<Topology>,
    #[serde(default)]
    pub host: usize,
    pub scheme: SchemeKind,
    pub filter: FilterSpec,
    pub mode: CovarianceMode,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub variances: MeasurementVariances,
    pub uncertainty: UncertaintyLevel,
    #[serde(default)]
    pub seed: u64,
    /// Probability of losing each measurement entry.
    #[serde(default)]
    pub p_drop: f64,
}

impl RunConfig {
    /// Reference evaluation setup: five agents, all-to-all, host agent 1,
    /// fCRL with the LV kernel filter in smart mode, level `q = 1`.
    pub fn paper_default() -> Self {
        Self {
            horizon: 30.0,
            ts: 0.01,
            swarm: paper_swarm(),
            topology: None,
            host: 0,
            scheme: SchemeKind::Fcrl,
            filter: FilterSpec::mlvc(),
            mode: CovarianceMode::Smart,
            noise: NoiseConfig::paper_default(),
            variances: MeasurementVariances::default(),
            uncertainty: UncertaintyLevel::from_q(1.0),
            seed: 0,
            p_drop: 0.0,
        }
    }

    /// `paper-default` or a path to a JSON file.
    pub fn load(source: &str) -> Result<Self> {
        if source == "paper-default" {
            return Ok(Self::paper_default());
        }
        let text = std::fs::read_to_string(source).map_err(|e| CrlError::io(source, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CrlError::ser(source, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn topology(&self) -> Topology {
        self.topology
            .clone()
            .unwrap_or_else(|| Topology::all_to_all(self.swarm.len()))
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.ts).round() as usize
    }

    pub fn method(&self) -> Method {
        Method::new(self.scheme, self.filter, self.mode)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ts > 0.0 && self.horizon > 0.0) {
            return Err(CrlError::Config("horizon and sampling time must be positive".into()));
        }
        let steps = self.horizon / self.ts;
        if (steps - steps.round()).abs() > 1e-6 {
            return Err(CrlError::Config(format!(
                "horizon {} s is not a whole number of {} s steps",
                self.horizon, self.ts
            )));
        }
        if self.swarm.len() < 2 {
            return Err(CrlError::Config("the swarm needs at least two agents".into()));
        }
        for s in &self.swarm {
            s.validate(self.horizon)?;
        }
        let topo = self.topology();
        if topo.n_agents() != self.swarm.len() {
            return Err(CrlError::Config("topology and swarm sizes differ".into()));
        }
        topo.validate()?;
        topo.neighbor_set(self.host)?;
        self.noise.validate()?;
        self.uncertainty.validate()?;
        self.method().validate()?;
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(CrlError::Config(format!(
                "p_drop must lie in [0, 1], got {}",
                self.p_drop
            )));
        }
        let v = &self.variances;
        if !(v.smart_direct > 0.0 && v.smart_indirect > 0.0 && v.inattentive > 0.0) {
            return Err(CrlError::Config("measurement variances must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of everything except the seed.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let text = serde_json::to_string(&c).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

// Independent random streams of a trial.
const STREAM_TRUTH: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_MEASURE: u64 = 2;
const STREAM_DROP: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Nominal inputs of every agent at steps `0..n_steps`.
pub fn nominal_inputs(config: &RunConfig) -> Vec<Vec<ControlInput<f64>>> {
    (0..config.n_steps())
        .map(|k| {
            let t = k as f64 * config.ts;
            config.swarm.iter().map(|s| nominal_state(s, t).input()).collect()
        })
        .collect()
}

/// Euler-integrated global poses of every agent at steps `0..=n_steps`,
/// driven by the nominal inputs plus actuator noise.
pub fn propagate_truth<R: Rng + ?Sized>(
    config: &RunConfig,
    inputs: &[Vec<ControlInput<f64>>],
    rng: &mut R,
) -> Vec<Vec<GlobalPose>> {
    let ts = config.ts;
    let mut poses: Vec<GlobalPose> = config
        .swarm
        .iter()
        .map(|s| {
            let n = nominal_state(s, 0.0);
            GlobalPose {
                position: n.position,
                heading: n.heading,
            }
        })
        .collect();
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(poses.clone());
    for step in inputs {
        for (pose, u) in poses.iter_mut().zip(step) {
            let noise = actuator_sample(rng, &config.noise.actuator);
            let v = u.v + noise.fixed_rows::<3>(1);
            pose.position += planar_rotation(pose.heading) * v * ts;
            pose.heading = wrap_angle(pose.heading + (u.psi_dot + noise[0]) * ts);
        }
        out.push(poses.clone());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeKind {
    Direct,
    Indirect,
}

/// Range noise generator for a noise configuration.
#[derive(Debug, Clone)]
pub struct MeasurementNoise {
    config: NoiseConfig,
    frozen: Option<DelaySampler>,
}

impl MeasurementNoise {
    pub fn new(config: &NoiseConfig) -> Self {
        Self {
            config: config.clone(),
            frozen: config.delay.as_ref().map(DelaySampler::from_spec),
        }
    }

    /// Noisy range for a true distance. Relayed ranges add delay noise.
    pub fn measure<R: Rng + ?Sized>(&self, distance: f64, kind: RangeKind, rng: &mut R) -> f64 {
        let mut y = distance;
        if let Some(uwb) = &self.config.uwb {
            y += uwb_sample(rng, uwb);
        }
        if kind == RangeKind::Indirect {
            if let (Some(spec), Some(frozen)) = (&self.config.delay, &self.frozen) {
                y += match self.config.delay_mode {
                    DelayMode::Frozen => frozen.sample(rng),
                    DelayMode::PerMeasurement => DelaySampler::new(spec.r_bar(), distance).sample(rng),
                };
            }
        }
        y
    }
}

/// Message from a neighbor: its input and the ranges it reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationPackage {
    pub sender: usize,
    pub u: ControlInput<f64>,
    /// `(peer agent, distance)`; the host itself is the peer of the direct range.
    pub y: Vec<(usize, f64)>,
}

/// Randomness of one trial, shared by all estimation methods.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub host: usize,
    pub neighbors: Vec<usize>,
    pub layout: IndirectLayout,
    pub ts: f64,
    pub seed: u64,
    pub level: UncertaintyLevel,
    pub config_digest: String,
    /// Host and neighbor nominal inputs, steps `0..n`.
    pub inputs: Vec<AugmentedInput<f64>>,
    /// True relative states, steps `0..=n`.
    pub truth: Vec<AugmentedState<f64>>,
    /// Direct ranges at steps `1..=n` (index `k - 1`).
    pub direct: Vec<DVector<f64>>,
    /// Relayed ranges in layout order at steps `1..=n`.
    pub indirect: Vec<DVector<f64>>,
    /// Initial estimate and covariance of the augmented state.
    pub initial: FilterBelief<f64>,
    pub q_u: nalgebra::Matrix4<f64>,
    pub variances: MeasurementVariances,
    pub p_drop: f64,
}

impl Scenario {
    pub fn n_steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn n_neighbors(&self) -> usize {
        self.neighbors.len()
    }

    /// Packages received at step `k >= 1`. Relayed ranges appear once, in
    /// the package of the neighbor that sent them last.
    pub fn packages_at(&self, k: usize) -> Vec<InformationPackage> {
        let mut out: Vec<InformationPackage> = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(alpha, &j)| InformationPackage {
                sender: j,
                u: self.inputs[k - 1].neighbors[alpha],
                y: vec![(self.host, self.direct[k - 1][alpha])],
            })
            .collect();
        for (m, pair) in self.layout.pairs.iter().enumerate() {
            let other = if pair.transmitter == pair.a { pair.b } else { pair.a };
            out[pair.transmitter]
                .y
                .push((self.neighbors[other], self.indirect[k - 1][m]));
        }
        out
    }
}

/// Initial belief: heading offsets `U(-psi_e, psi_e)`, position offsets of
/// length `r_e` in a uniformly drawn direction angle pair, and
/// `P = I ⊗ diag(psi_e²/3, r_e²/4, r_e²/4, r_e²/2)`.
pub fn initialize_belief<R: Rng + ?Sized>(
    truth: &AugmentedState<f64>,
    level: &UncertaintyLevel,
    rng: &mut R,
) -> Result<FilterBelief<f64>> {
    use std::f64::consts::{FRAC_PI_2, TAU};
    level.validate()?;
    let blocks = truth
        .blocks
        .iter()
        .map(|b| {
            let dpsi = rng.random_range(-level.psi_e..=level.psi_e);
            let rho = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
            let phi = rng.random_range(0.0..TAU);
            let offset = Vector3::new(rho.cos() * phi.cos(), rho.cos() * phi.sin(), rho.sin()) * level.r_e;
            RelativeState::new(b.psi + dpsi, b.p + offset)
        })
        .collect();
    let x = AugmentedState::new(blocks).to_vector();
    let pe = [
        level.psi_e.powi(2) / 3.0,
        level.r_e.powi(2) / 4.0,
        level.r_e.powi(2) / 4.0,
        level.r_e.powi(2) / 2.0,
    ];
    let p = DMatrix::from_diagonal(&DVector::from_fn(x.len(), |i, _| pe[i % 4]));
    FilterBelief::new(x, p)
}

/// Draws the truth, the measurements and the initial belief of a trial.
pub fn generate_scenario(config: &RunConfig) -> Result<Scenario> {
    config.validate()?;
    let topo = config.topology();
    let neighbors = topo.neighbor_set(config.host)?.neighbors;
    let layout = topo.indirect_layout(config.host)?;
    let nominal = nominal_inputs(config);
    let poses = propagate_truth(config, &nominal, &mut stream(config.seed, STREAM_TRUTH));

    let host = config.host;
    let truth: Vec<AugmentedState<f64>> = poses
        .iter()
        .map(|p| AugmentedState::new(neighbors.iter().map(|&j| relative_state(&p[host], &p[j])).collect()))
        .collect();
    let inputs: Vec<AugmentedInput<f64>> = nominal
        .iter()
        .map(|u| AugmentedInput::new(u[host], neighbors.iter().map(|&j| u[j]).collect()))
        .collect();

    // Every range is drawn whatever the scheme, so all methods see the same noise.
    let noise = MeasurementNoise::new(&config.noise);
    let mut rng = stream(config.seed, STREAM_MEASURE);
    let mut direct = Vec::with_capacity(inputs.len());
    let mut indirect = Vec::with_capacity(inputs.len());
    for state in &truth[1..] {
        direct.push(DVector::from_iterator(
            neighbors.len(),
            state
                .blocks
                .iter()
                .map(|b| noise.measure(b.p.norm(), RangeKind::Direct, &mut rng)),
        ));
        indirect.push(DVector::from_iterator(
            layout.len(),
            layout.pairs.iter().map(|pair| {
                let d = (state.blocks[pair.a].p - state.blocks[pair.b].p).norm();
                noise.measure(d, RangeKind::Indirect, &mut rng)
            }),
        ));
    }

    let initial = initialize_belief(&truth[0], &config.uncertainty, &mut stream(config.seed, STREAM_INIT))?;
    Ok(Scenario {
        host,
        neighbors,
        layout,
        ts: config.ts,
        seed: config.seed,
        level: config.uncertainty,
        config_digest: config.digest(),
        inputs,
        truth,
        direct,
        indirect,
        initial,
        q_u: config.noise.actuator.covariance(),
        variances: config.variances,
        p_drop: config.p_drop,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub truth: AugmentedState<f64>,
    pub estimate: AugmentedState<f64>,
    pub p_trace: f64,
    /// Fixed-point iterations (largest over pairs for nCRL); none for the EKF.
    pub fp_iters: Option<u32>,
    pub step_time_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: String,
    pub scheme: SchemeKind,
    pub mode: CovarianceMode,
    /// Kernel label for kernel filters.
    pub kernel: Option<String>,
    pub max_iters: Option<usize>,
    pub seed: u64,
    pub level: UncertaintyLevel,
    pub config_digest: String,
    pub ts: f64,
    pub steps: Vec<StepRecord>,
    /// Reason the trial stopped early, if it did.
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn is_complete(&self, n_steps: usize) -> bool {
        self.failure.is_none() && self.steps.len() == n_steps
    }
}

/// Measurement model restricted to a subset of rows (lost packages).
struct SelectedRows<'a, M> {
    inner: &'a M,
    rows: &'a [usize],
}

impl<M: SystemModel<f64>> SystemModel<f64> for SelectedRows<'_, M> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn measurement_dim(&self) -> usize {
        self.rows.len()
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.inner.derivative(x, u)
    }

    fn process_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>, ts: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.inner.process_jacobians(x, u, ts)
    }

    fn measure(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.measure(x)?.select_rows(self.rows))
    }

    fn measurement_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inner.measurement_jacobian(x)?.select_rows(self.rows))
    }

    fn normalize_state(&self, x: &mut DVector<f64>) {
        self.inner.normalize_state(x)
    }
}

/// One measurement update; returns the fixed-point iteration count.
fn correct<M: SystemModel<f64>>(
    prior: &FilterBelief<f64>,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    model: &M,
    filter: &FilterSpec,
    keep: Option<&[usize]>,
) -> Result<(FilterBelief<f64>, Option<u32>)> {
    if let Some(rows) = keep {
        if rows.len() < y.len() {
            if rows.is_empty() {
                return Ok((prior.clone(), None));
            }
            let sub = SelectedRows { inner: model, rows };
            let r_sub = r.select_rows(rows).select_columns(rows);
            return apply_filter(prior, &y.select_rows(rows), &r_sub, &sub, filter);
        }
    }
    apply_filter(prior, y, r, model, filter)
}

fn apply_filter<M: SystemModel<f64>>(
    prior: &FilterBelief<f64>,
    y: &DVector<f64>,
    r: &DMatrix<f64>,
    model: &M,
    filter: &FilterSpec,
) -> Result<(FilterBelief<f64>, Option<u32>)> {
    match filter {
        FilterSpec::Ekf => Ok((ekf_update(prior, y, r, model)?, None)),
        FilterSpec::Kernel { kernel, fixed_point } => {
            let out = mlvc_update(prior, y, r, model, kernel, fixed_point)?;
            Ok((out.belief, Some(out.iterations as u32)))
        }
    }
}

fn kept_rows<R: Rng + ?Sized>(n: usize, p_drop: f64, rng: &mut R) -> Option<Vec<usize>> {
    if p_drop <= 0.0 {
        return None;
    }
    Some((0..n).filter(|_| !rng.random_bool(p_drop)).collect())
}

/// Runs one estimation method over a scenario.
///
/// A filter error ends the trial; the steps completed so far are kept and
/// the error is stored in `failure`.
pub fn estimate(scenario: &Scenario, method: &Method) -> TrialRecord {
    let (kernel, max_iters) = match &method.filter {
        FilterSpec::Ekf => (None, None),
        FilterSpec::Kernel { kernel, fixed_point } => (Some(kernel.to_string()), Some(fixed_point.max_iters)),
    };
    let mut record = TrialRecord {
        method: method.name(),
        scheme: method.scheme,
        mode: method.mode,
        kernel,
        max_iters,
        seed: scenario.seed,
        level: scenario.level,
        config_digest: scenario.config_digest.clone(),
        ts: scenario.ts,
        steps: Vec::with_capacity(scenario.n_steps()),
        failure: None,
    };
    let result = match method.scheme {
        SchemeKind::Fcrl | SchemeKind::Hcrl => run_augmented(scenario, method, &mut record.steps),
        SchemeKind::Ncrl => run_pairwise(scenario, method, &mut record.steps),
    };
    if let Err(e) = result {
        record.failure = Some(format!("step {}: {e}", record.steps.len() + 1));
    }
    record
}

fn run_augmented(scenario: &Scenario, method: &Method, steps: &mut Vec<StepRecord>) -> Result<()> {
    let n = scenario.n_neighbors();
    let model = CrlModel::new(method.scheme, n, scenario.layout.clone())?;
    let p_id = model.layout.len();
    let q = build_q(&scenario.q_u, n + 1);
    let r = build_r(method.mode, method.scheme, n, p_id, &scenario.variances);
    let mut drop_rng = stream(scenario.seed, STREAM_DROP);
    let mut belief = scenario.initial.clone();
    for k in 1..=scenario.n_steps() {
        let keep = kept_rows(n + p_id, scenario.p_drop, &mut drop_rng);
        let start = Instant::now();
        let u = scenario.inputs[k - 1].to_vector();
        let prior = ekf_predict(&belief, &u, &q, scenario.ts, &model)?;
        let y = if p_id > 0 {
            DVector::from_iterator(
                n + p_id,
                scenario.direct[k - 1]
                    .iter()
                    .chain(scenario.indirect[k - 1].iter())
                    .copied(),
            )
        } else {
            scenario.direct[k - 1].clone()
        };
        let (post, iters) = correct(&prior, &y, &r, &model, &method.filter, keep.as_deref())?;
        let elapsed = start.elapsed().as_nanos() as u64;
        belief = post;
        steps.push(StepRecord {
            k,
            truth: scenario.truth[k].clone(),
            estimate: AugmentedState::from_vector(&belief.x_hat)?,
            p_trace: belief.p.trace(),
            fp_iters: iters,
            step_time_ns: elapsed,
        });
    }
    Ok(())
}

fn run_pairwise(scenario: &Scenario, method: &Method, steps: &mut Vec<StepRecord>) -> Result<()> {
    let n = scenario.n_neighbors();
    let model = CrlModel::pairwise();
    let q = build_q(&scenario.q_u, 2);
    let r = build_r(method.mode, SchemeKind::Ncrl, 1, 0, &scenario.variances);
    let mut drop_rng = stream(scenario.seed, STREAM_DROP);
    let mut beliefs: Vec<FilterBelief<f64>> = (0..n).map(|a| scenario.initial.block(4 * a, 4)).collect();
    for k in 1..=scenario.n_steps() {
        let keep = kept_rows(n, scenario.p_drop, &mut drop_rng);
        let start = Instant::now();
        let inputs = &scenario.inputs[k - 1];
        let mut iters: Option<u32> = None;
        for (alpha, belief) in beliefs.iter_mut().enumerate() {
            let mut u = DVector::zeros(8);
            u.rows_mut(0, 4).copy_from(&inputs.host.to_vector());
            u.rows_mut(4, 4).copy_from(&inputs.neighbors[alpha].to_vector());
            let prior = ekf_predict(belief, &u, &q, scenario.ts, &model)?;
            let y = DVector::from_element(1, scenario.direct[k - 1][alpha]);
            let lost = keep.as_ref().is_some_and(|rows| !rows.contains(&alpha));
            let pair_keep: Option<&[usize]> = if lost { Some(&[]) } else { None };
            let (post, it) = correct(&prior, &y, &r, &model, &method.filter, pair_keep)?;
            *belief = post;
            if let Some(it) = it {
                iters = Some(iters.map_or(it, |m| m.max(it)));
            }
        }
        let elapsed = start.elapsed().as_nanos() as u64;
        let stacked = FilterBelief::stack(&beliefs);
        steps.push(StepRecord {
            k,
            truth: scenario.truth[k].clone(),
            estimate: AugmentedState::from_vector(&stacked.x_hat)?,
            p_trace: stacked.p.trace(),
            fp_iters: iters,
            step_time_ns: elapsed,
        });
    }
    Ok(())
}

/// Generates the scenario and runs the configured method on it.
pub fn run_trial(config: &RunConfig) -> Result<TrialRecord> {
    Ok(estimate(&generate_scenario(config)?, &config.method()))
}

/// Seed of trial `trial` at level index `level`: levels use disjoint ranges.
pub fn trial_seed(base_seed: u64, level: usize, trials_per_level: usize, trial: usize) -> u64 {
    base_seed + (level * trials_per_level + trial) as u64
}

/// Runs every method on `trials_per_level` scenarios per uncertainty level.
///
/// Scenarios are generated once and shared by all methods. Records are
/// ordered by level, trial, then method. Scenario failures become failed
/// records for every method.
pub fn run_monte_carlo_methods(
    base: &RunConfig,
    methods: &[Method],
    levels: &[UncertaintyLevel],
    trials_per_level: usize,
    base_seed: u64,
) -> Result<Vec<TrialRecord>> {
    if levels.is_empty() || methods.is_empty() {
        return Err(CrlError::Config(
            "at least one level and one method are required".into(),
        ));
    }
    for m in methods {
        m.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..levels.len())
        .flat_map(|l| (0..trials_per_level).map(move |t| (l, t)))
        .collect();
    let per_job: Vec<Vec<TrialRecord>> = jobs
        .par_iter()
        .map(|&(l, t)| {
            let mut cfg = base.clone();
            cfg.uncertainty = levels[l];
            cfg.seed = trial_seed(base_seed, l, trials_per_level, t);
            match generate_scenario(&cfg) {
                Ok(scenario) => methods.par_iter().map(|m| estimate(&scenario, m)).collect(),
                Err(e) => methods
                    .iter()
                    .map(|m| TrialRecord {
                        method: m.name(),
                        scheme: m.scheme,
                        mode: m.mode,
                        kernel: None,
                        max_iters: None,
                        seed: cfg.seed,
                        level: levels[l],
                        config_digest: cfg.digest(),
                        ts: cfg.ts,
                        steps: Vec::new(),
                        failure: Some(format!("scenario: {e}")),
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(per_job.into_iter().flatten().collect())
}

/// Monte Carlo run of the method configured in `base`.
pub fn run_monte_carlo(
    base: &RunConfig,
    levels: &[UncertaintyLevel],
    trials_per_level: usize,
    base_seed: u64,
) -> Result<Vec<TrialRecord>> {
    run_monte_carlo_methods(base, &[base.method()], levels, trials_per_level, base_seed)
}
