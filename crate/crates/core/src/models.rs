//! State-space models of the three localization schemes.
//!
//! All schemes share the augmented process model: one pairwise block per
//! neighbor, all driven by the host's input. They differ in what the
//! estimator measures:
//!
//! | scheme | process | measurements |
//! |--------|---------|--------------|
//! | fCRL   | augmented | direct host-neighbor ranges + relayed neighbor-neighbor ranges |
//! | hCRL   | augmented | direct ranges only |
//! | nCRL   | independent pairwise models | one direct range per pair |

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CrlError, Result};
use crate::geometry::{
    pair_dynamics, planar_rotation, planar_rotation_derivative, skew_selection, wrap_angle, ControlInput, PairInput,
    RelativeState,
};
use crate::scalar::Scalar;

pub const STATE_BLOCK: usize = 4;
pub const INPUT_BLOCK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Fcrl,
    Hcrl,
    Ncrl,
}

impl SchemeKind {
    pub fn label(&self) -> &'static str {
        match self {
            SchemeKind::Fcrl => "fCRL",
            SchemeKind::Hcrl => "hCRL",
            SchemeKind::Ncrl => "nCRL",
        }
    }

    pub fn uses_indirect(&self) -> bool {
        matches!(self, SchemeKind::Fcrl)
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = CrlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcrl" => Ok(SchemeKind::Fcrl),
            "hcrl" => Ok(SchemeKind::Hcrl),
            "ncrl" => Ok(SchemeKind::Ncrl),
            other => Err(CrlError::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Sorted neighbors of one host agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSet {
    pub host: usize,
    pub neighbors: Vec<usize>,
}

impl NeighborSet {
    pub fn new(host: usize, neighbors: Vec<usize>) -> Result<Self> {
        if neighbors.is_empty() {
            return Err(CrlError::Config(format!("agent {host} has no neighbors")));
        }
        if neighbors.contains(&host) {
            return Err(CrlError::Config(format!("agent {host} lists itself as a neighbor")));
        }
        if neighbors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CrlError::Config(format!(
                "neighbors of agent {host} must be strictly increasing: {neighbors:?}"
            )));
        }
        Ok(Self { host, neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn position(&self, agent: usize) -> Option<usize> {
        self.neighbors.binary_search(&agent).ok()
    }
}

/// Neighbor sets of every agent in the swarm, indexed by agent id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub neighbor_sets: Vec<Vec<usize>>,
}

impl Topology {
    pub fn all_to_all(n_agents: usize) -> Self {
        Self {
            neighbor_sets: (0..n_agents)
                .map(|i| (0..n_agents).filter(|&j| j != i).collect())
                .collect(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.neighbor_sets.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, set) in self.neighbor_sets.iter().enumerate() {
            NeighborSet::new(i, set.clone())?;
            if let Some(&bad) = set.iter().find(|&&j| j >= self.n_agents()) {
                return Err(CrlError::Config(format!("agent {i} has unknown neighbor {bad}")));
            }
        }
        Ok(())
    }

    pub fn neighbor_set(&self, host: usize) -> Result<NeighborSet> {
        let set = self
            .neighbor_sets
            .get(host)
            .ok_or_else(|| CrlError::Config(format!("unknown host agent {host}")))?;
        NeighborSet::new(host, set.clone())
    }

    /// Number of relayed distances before duplicate removal: every neighbor
    /// `j` relays its distance to each `l` in `N_host ∩ N_j`.
    pub fn raw_indirect_count(&self, host: usize) -> Result<usize> {
        let own = self.neighbor_set(host)?;
        Ok(own
            .neighbors
            .iter()
            .map(|&j| {
                self.neighbor_sets[j]
                    .iter()
                    .filter(|l| own.position(**l).is_some())
                    .count()
            })
            .sum())
    }

    /// Effective relayed-distance layout for `host`.
    ///
    /// A neighbor-neighbor distance is relayed by both endpoints; only the
    /// last transmission in the binding order is kept, so each unordered
    /// pair appears once.
    pub fn indirect_layout(&self, host: usize) -> Result<IndirectLayout> {
        let own = self.neighbor_set(host)?;
        let n = own.len();
        let mut transmitter: Vec<Option<usize>> = vec![None; n * n];
        for (alpha, &j) in own.neighbors.iter().enumerate() {
            for &l in &self.neighbor_sets[j] {
                if let Some(beta) = own.position(l) {
                    let (a, b) = (alpha.min(beta), alpha.max(beta));
                    transmitter[a * n + b] = Some(alpha);
                }
            }
        }
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                if let Some(t) = transmitter[a * n + b] {
                    pairs.push(IndirectPair { a, b, transmitter: t });
                }
            }
        }
        Ok(IndirectLayout { pairs })
    }
}

/// One effective relayed distance between neighbor positions `a < b` of the
/// host's neighbor list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndirectPair {
    pub a: usize,
    pub b: usize,
    /// Neighbor position whose package supplies the value.
    pub transmitter: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndirectLayout {
    pub pairs: Vec<IndirectPair>,
}

impl IndirectLayout {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Every unordered pair among `n` neighbors.
    pub fn complete(n: usize) -> Self {
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                pairs.push(IndirectPair { a, b, transmitter: b });
            }
        }
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Pairwise states of all neighbors, in neighbor-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState<T: Scalar> {
    pub blocks: Vec<RelativeState<T>>,
}

impl<T: Scalar> AugmentedState<T> {
    pub fn new(blocks: Vec<RelativeState<T>>) -> Self {
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn to_vector(&self) -> DVector<T> {
        DVector::from_iterator(
            STATE_BLOCK * self.blocks.len(),
            self.blocks
                .iter()
                .flat_map(|b| b.to_vector().into_iter().copied().collect::<Vec<_>>()),
        )
    }

    pub fn from_vector(x: &DVector<T>) -> Result<Self> {
        if !x.len().is_multiple_of(STATE_BLOCK) {
            return Err(CrlError::Dimension {
                expected: STATE_BLOCK * (x.len() / STATE_BLOCK + 1),
                got: x.len(),
                context: "augmented state vector",
            });
        }
        Ok(Self {
            blocks: x
                .as_slice()
                .chunks(STATE_BLOCK)
                .map(RelativeState::from_slice)
                .collect(),
        })
    }
}

/// Host input followed by every neighbor's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInput<T: Scalar> {
    pub host: ControlInput<T>,
    pub neighbors: Vec<ControlInput<T>>,
}

impl<T: Scalar> AugmentedInput<T> {
    pub fn new(host: ControlInput<T>, neighbors: Vec<ControlInput<T>>) -> Self {
        Self { host, neighbors }
    }

    pub fn pair(&self, alpha: usize) -> PairInput<T> {
        PairInput::new(self.host, self.neighbors[alpha])
    }

    pub fn to_vector(&self) -> DVector<T> {
        let mut out = Vec::with_capacity(INPUT_BLOCK * (self.neighbors.len() + 1));
        out.extend(self.host.to_vector().iter());
        for n in &self.neighbors {
            out.extend(n.to_vector().iter());
        }
        DVector::from_vec(out)
    }

    pub fn from_vector(u: &DVector<T>) -> Result<Self> {
        if u.len() < INPUT_BLOCK || !u.len().is_multiple_of(INPUT_BLOCK) {
            return Err(CrlError::Dimension {
                expected: INPUT_BLOCK * (u.len() / INPUT_BLOCK).max(1),
                got: u.len(),
                context: "augmented input vector",
            });
        }
        let mut chunks = u.as_slice().chunks(INPUT_BLOCK).map(ControlInput::from_slice);
        let host = chunks.next().expect("length checked");
        Ok(Self::new(host, chunks.collect()))
    }
}

/// Stacked range measurements for one estimation step.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementStack<T: Scalar> {
    pub direct: DVector<T>,
    pub indirect: DVector<T>,
    pub layout: IndirectLayout,
}

impl<T: Scalar> MeasurementStack<T> {
    /// `[direct; indirect]`.
    pub fn stacked(&self) -> DVector<T> {
        let mut v = Vec::with_capacity(self.direct.len() + self.indirect.len());
        v.extend(self.direct.iter());
        v.extend(self.indirect.iter());
        DVector::from_vec(v)
    }
}

fn checked_norm<T: Scalar>(v: &Vector3<T>, what: impl FnOnce() -> String) -> Result<T> {
    let n = v.norm();
    if n < T::min_distance() {
        Err(CrlError::Geometry(what()))
    } else {
        Ok(n)
    }
}

/// Blockwise pairwise dynamics with the shared host input.
pub fn augmented_dynamics<T: Scalar>(state: &AugmentedState<T>, input: &AugmentedInput<T>) -> Result<DVector<T>> {
    check_dim(state.len(), input.neighbors.len(), "neighbor inputs")?;
    let mut out = DVector::zeros(STATE_BLOCK * state.len());
    for (alpha, block) in state.blocks.iter().enumerate() {
        let d = pair_dynamics(block, &input.pair(alpha));
        out.fixed_rows_mut::<4>(STATE_BLOCK * alpha).copy_from(&d);
    }
    Ok(out)
}

/// Host-to-neighbor distances.
pub fn direct_measurement<T: Scalar>(state: &AugmentedState<T>) -> Result<DVector<T>> {
    let mut out = DVector::zeros(state.len());
    for (alpha, block) in state.blocks.iter().enumerate() {
        out[alpha] = checked_norm(&block.p, || format!("neighbor {alpha} coincides with the host"))?;
    }
    Ok(out)
}

/// Neighbor-to-neighbor distances in layout order.
pub fn indirect_measurement<T: Scalar>(state: &AugmentedState<T>, layout: &IndirectLayout) -> Result<DVector<T>> {
    let mut out = DVector::zeros(layout.len());
    for (row, pair) in layout.pairs.iter().enumerate() {
        if pair.a >= state.len() || pair.b >= state.len() {
            return Err(CrlError::Dimension {
                expected: state.len(),
                got: pair.a.max(pair.b) + 1,
                context: "indirect layout references a missing neighbor",
            });
        }
        let diff = state.blocks[pair.a].p - state.blocks[pair.b].p;
        out[row] = checked_norm(&diff, || format!("neighbors {} and {} coincide", pair.a, pair.b))?;
    }
    Ok(out)
}

/// Stacked measurement prediction for a scheme.
pub fn measurement<T: Scalar>(
    state: &AugmentedState<T>,
    scheme: SchemeKind,
    layout: &IndirectLayout,
) -> Result<DVector<T>> {
    let direct = direct_measurement(state)?;
    if !scheme.uses_indirect() {
        return Ok(direct);
    }
    let indirect = indirect_measurement(state, layout)?;
    Ok(MeasurementStack {
        direct,
        indirect,
        layout: layout.clone(),
    }
    .stacked())
}

/// Jacobian of [`measurement`] with respect to the augmented state.
///
/// Heading columns are structurally zero and kept so `H` is dense.
pub fn measurement_jacobian<T: Scalar>(
    state: &AugmentedState<T>,
    scheme: SchemeKind,
    layout: &IndirectLayout,
) -> Result<DMatrix<T>> {
    let n = state.len();
    let rows = n + if scheme.uses_indirect() { layout.len() } else { 0 };
    let mut h = DMatrix::zeros(rows, STATE_BLOCK * n);
    for (alpha, block) in state.blocks.iter().enumerate() {
        let d = checked_norm(&block.p, || format!("neighbor {alpha} coincides with the host"))?;
        let unit = block.p / d;
        h.fixed_view_mut::<1, 3>(alpha, STATE_BLOCK * alpha + 1)
            .copy_from(&unit.transpose());
    }
    if scheme.uses_indirect() {
        for (k, pair) in layout.pairs.iter().enumerate() {
            let diff = state.blocks[pair.a].p - state.blocks[pair.b].p;
            let d = checked_norm(&diff, || format!("neighbors {} and {} coincide", pair.a, pair.b))?;
            let unit = (diff / d).transpose();
            h.fixed_view_mut::<1, 3>(n + k, STATE_BLOCK * pair.a + 1)
                .copy_from(&unit);
            h.fixed_view_mut::<1, 3>(n + k, STATE_BLOCK * pair.b + 1)
                .copy_from(&(-unit));
        }
    }
    Ok(h)
}

/// Discrete-time Jacobians `A = I + Ts dg/dx` and `B = Ts dg/du`.
pub fn process_jacobians<T: Scalar>(
    state: &AugmentedState<T>,
    input: &AugmentedInput<T>,
    ts: T,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let n = state.len();
    check_dim(n, input.neighbors.len(), "neighbor inputs")?;
    let s = skew_selection::<T>();
    let mut a = DMatrix::identity(STATE_BLOCK * n, STATE_BLOCK * n);
    let mut b = DMatrix::zeros(STATE_BLOCK * n, INPUT_BLOCK * (n + 1));
    let host_rate = input.host.psi_dot;
    for (alpha, block) in state.blocks.iter().enumerate() {
        let r0 = STATE_BLOCK * alpha;
        let nb = &input.neighbors[alpha];

        // d p_dot / d psi_ij and d p_dot / d p
        let dpsi = planar_rotation_derivative(block.psi) * nb.v * ts;
        a.fixed_view_mut::<3, 1>(r0 + 1, r0).copy_from(&dpsi);
        let dp = s * (-host_rate * ts);
        let mut pos = a.fixed_view_mut::<3, 3>(r0 + 1, r0 + 1);
        pos += dp;

        // host input columns
        b[(r0, 0)] = -ts;
        b.fixed_view_mut::<3, 1>(r0 + 1, 0).copy_from(&(-(s * block.p) * ts));
        b.fixed_view_mut::<3, 3>(r0 + 1, 1)
            .copy_from(&(Matrix3::identity() * -ts));

        // own neighbor input columns
        let c0 = INPUT_BLOCK * (alpha + 1);
        b[(r0, c0)] = ts;
        b.fixed_view_mut::<3, 3>(r0 + 1, c0 + 1)
            .copy_from(&(planar_rotation(block.psi) * ts));
    }
    Ok((a, b))
}

/// One explicit Euler step of the augmented dynamics; headings re-wrapped.
pub fn discretize_step<T: Scalar>(
    state: &AugmentedState<T>,
    input: &AugmentedInput<T>,
    ts: T,
) -> Result<AugmentedState<T>> {
    if ts <= T::zero() {
        return Err(CrlError::Domain(format!("sampling time must be positive, got {ts}")));
    }
    let x = state.to_vector() + augmented_dynamics(state, input)? * ts;
    AugmentedState::from_vector(&x)
}

/// Discrete-time system seen by the filters.
pub trait SystemModel<T: Scalar> {
    fn state_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    fn measurement_dim(&self) -> usize;

    /// Continuous-time state derivative.
    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>>;

    /// `(A, B)` of the Euler-discretized model at `(x, u)`.
    fn process_jacobians(&self, x: &DVector<T>, u: &DVector<T>, ts: T) -> Result<(DMatrix<T>, DMatrix<T>)>;

    fn measure(&self, x: &DVector<T>) -> Result<DVector<T>>;

    fn measurement_jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>>;

    /// Maps a state back to its canonical representation (angle wrapping).
    fn normalize_state(&self, _x: &mut DVector<T>) {}
}

/// Augmented (or, with one neighbor, pairwise) localization model.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlModel {
    pub scheme: SchemeKind,
    pub n_neighbors: usize,
    pub layout: IndirectLayout,
}

impl CrlModel {
    pub fn new(scheme: SchemeKind, n_neighbors: usize, layout: IndirectLayout) -> Result<Self> {
        if n_neighbors == 0 {
            return Err(CrlError::Config("a model needs at least one neighbor".into()));
        }
        if let Some(p) = layout
            .pairs
            .iter()
            .find(|p| p.a >= n_neighbors || p.b >= n_neighbors || p.a >= p.b)
        {
            return Err(CrlError::Config(format!("invalid indirect pair {p:?}")));
        }
        let layout = if scheme.uses_indirect() {
            layout
        } else {
            IndirectLayout::empty()
        };
        Ok(Self {
            scheme,
            n_neighbors,
            layout,
        })
    }

    /// Single host/neighbor model used by each nCRL filter.
    pub fn pairwise() -> Self {
        Self {
            scheme: SchemeKind::Ncrl,
            n_neighbors: 1,
            layout: IndirectLayout::empty(),
        }
    }
}

impl<T: Scalar> SystemModel<T> for CrlModel {
    fn state_dim(&self) -> usize {
        STATE_BLOCK * self.n_neighbors
    }

    fn input_dim(&self) -> usize {
        INPUT_BLOCK * (self.n_neighbors + 1)
    }

    fn measurement_dim(&self) -> usize {
        self.n_neighbors + self.layout.len()
    }

    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        check_dim(SystemModel::<T>::state_dim(self), x.len(), "state")?;
        check_dim(SystemModel::<T>::input_dim(self), u.len(), "input")?;
        augmented_dynamics(&AugmentedState::from_vector(x)?, &AugmentedInput::from_vector(u)?)
    }

    fn process_jacobians(&self, x: &DVector<T>, u: &DVector<T>, ts: T) -> Result<(DMatrix<T>, DMatrix<T>)> {
        check_dim(SystemModel::<T>::input_dim(self), u.len(), "input")?;
        process_jacobians(&AugmentedState::from_vector(x)?, &AugmentedInput::from_vector(u)?, ts)
    }

    fn measure(&self, x: &DVector<T>) -> Result<DVector<T>> {
        measurement(&AugmentedState::from_vector(x)?, self.scheme, &self.layout)
    }

    fn measurement_jacobian(&self, x: &DVector<T>) -> Result<DMatrix<T>> {
        measurement_jacobian(&AugmentedState::from_vector(x)?, self.scheme, &self.layout)
    }

    fn normalize_state(&self, x: &mut DVector<T>) {
        for i in (0..x.len()).step_by(STATE_BLOCK) {
            x[i] = wrap_angle(x[i]);
        }
    }
}

/// Linear time-invariant model `x_dot = F x + G u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T: Scalar> {
    pub f: DMatrix<T>,
    pub g: DMatrix<T>,
    pub c: DMatrix<T>,
}

impl<T: Scalar> SystemModel<T> for LinearModel<T> {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    fn measurement_dim(&self) -> usize {
        self.c.nrows()
    }

    fn derivative(&self, x: &DVector<T>, u: &DVector<T>) -> Result<DVector<T>> {
        check_dim(self.f.ncols(), x.len(), "state")?;
        check_dim(self.g.ncols(), u.len(), "input")?;
        Ok(&self.f * x + &self.g * u)
    }

    fn process_jacobians(&self, _x: &DVector<T>, _u: &DVector<T>, ts: T) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let n = self.f.nrows();
        Ok((DMatrix::identity(n, n) + &self.f * ts, &self.g * ts))
    }

    fn measure(&self, x: &DVector<T>) -> Result<DVector<T>> {
        check_dim(self.c.ncols(), x.len(), "state")?;
        Ok(&self.c * x)
    }

    fn measurement_jacobian(&self, _x: &DVector<T>) -> Result<DMatrix<T>> {
        Ok(self.c.clone())
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testutil::numeric_jacobian;

    fn rs(psi: f64, x: f64, y: f64, z: f64) -> RelativeState<f64> {
        RelativeState::new(psi, Vector3::new(x, y, z))
    }

    fn ci(r: f64, x: f64, y: f64, z: f64) -> ControlInput<f64> {
        ControlInput::new(r, Vector3::new(x, y, z))
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> AugmentedState<f64> {
        AugmentedState::new(
            (0..n)
                .map(|_| {
                    rs(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    )
                })
                .collect(),
        )
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> AugmentedInput<f64> {
        let mut one = || {
            ci(
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            )
        };
        let host = one();
        AugmentedInput::new(host, (0..n).map(|_| one()).collect())
    }

    #[test]
    fn neighbor_set_validation() {
        assert!(NeighborSet::new(0, vec![1, 2, 4]).is_ok());
        assert!(NeighborSet::new(0, vec![]).is_err());
        assert!(NeighborSet::new(2, vec![1, 2]).is_err());
        assert!(NeighborSet::new(0, vec![2, 1]).is_err());
    }

    #[test]
    fn all_to_all_five_agents_layout() {
        let topo = Topology::all_to_all(5);
        for host in 0..5 {
            assert_eq!(topo.neighbor_set(host).unwrap().len(), 4);
            let layout = topo.indirect_layout(host).unwrap();
            assert_eq!(layout.len(), 6);
            // each unordered pair once, relayed twice before de-duplication
            assert_eq!(topo.raw_indirect_count(host).unwrap(), 12);
            assert!(layout.pairs.iter().all(|p| p.transmitter == p.b));
        }
    }

    #[test]
    fn sparse_topology_layout() {
        // 0 sees 1,2,3; 1 sees 0,2; 2 sees 0,1; 3 sees 0 only.
        let topo = Topology {
            neighbor_sets: vec![vec![1, 2, 3], vec![0, 2], vec![0, 1], vec![0]],
        };
        topo.validate().unwrap();
        let layout = topo.indirect_layout(0).unwrap();
        assert_eq!(layout.pairs.len(), 1);
        assert_eq!((layout.pairs[0].a, layout.pairs[0].b), (0, 1));
    }

    #[test]
    fn augmented_dynamics_reduces_to_pairwise() {
        let s = rs(0.4, 1.0, -2.0, 0.5);
        let u = AugmentedInput::new(ci(0.3, 1.0, 0.0, 0.2), vec![ci(-0.1, 0.0, 2.0, -1.0)]);
        let aug = augmented_dynamics(&AugmentedState::new(vec![s]), &u).unwrap();
        assert_eq!(aug.as_slice(), pair_dynamics(&s, &u.pair(0)).as_slice());
    }

    #[test]
    fn augmented_dynamics_parallel_swarm_is_still() {
        let v = ci(0.0, 1.0, 2.0, -0.5);
        let state = AugmentedState::new(vec![rs(0.0, 1.0, 2.0, 3.0), rs(0.0, -1.0, 0.5, 2.0)]);
        let d = augmented_dynamics(&state, &AugmentedInput::new(v, vec![v, v])).unwrap();
        assert_eq!(d, DVector::zeros(8));
    }

    #[test]
    fn augmented_dynamics_concatenates_blocks() {
        let state = AugmentedState::new(vec![rs(0.5, 1.0, 0.0, 0.0), rs(-1.0, 0.0, 2.0, 1.0)]);
        let u = AugmentedInput::new(
            ci(0.2, 1.0, 0.0, 0.0),
            vec![ci(0.0, 0.0, 1.0, 0.0), ci(-0.3, 2.0, 0.0, 1.0)],
        );
        let d = augmented_dynamics(&state, &u).unwrap();
        let b0 = pair_dynamics(&state.blocks[0], &u.pair(0));
        let b1 = pair_dynamics(&state.blocks[1], &u.pair(1));
        assert_eq!(&d.as_slice()[..4], b0.as_slice());
        assert_eq!(&d.as_slice()[4..], b1.as_slice());
        assert!(augmented_dynamics(&state, &AugmentedInput::new(u.host, vec![u.host])).is_err());
    }

    #[test]
    fn direct_and_indirect_examples() {
        let s = AugmentedState::new(vec![rs(0.0, 3.0, 4.0, 0.0), rs(0.0, 0.0, 0.0, 2.0)]);
        assert_eq!(direct_measurement(&s).unwrap().as_slice(), &[5.0, 2.0]);
        let one = AugmentedState::new(vec![rs(0.0, 1.0, 1.0, 1.0)]);
        assert_relative_eq!(direct_measurement(&one).unwrap()[0], 3.0_f64.sqrt());

        let swapped = AugmentedState::new(vec![s.blocks[1], s.blocks[0]]);
        assert_eq!(direct_measurement(&swapped).unwrap().as_slice(), &[2.0, 5.0]);

        let t = AugmentedState::new(vec![rs(0.0, 1.0, 0.0, 0.0), rs(0.0, 0.0, 1.0, 0.0)]);
        let fwd = IndirectLayout {
            pairs: vec![IndirectPair {
                a: 0,
                b: 1,
                transmitter: 1,
            }],
        };
        assert_relative_eq!(indirect_measurement(&t, &fwd).unwrap()[0], 2.0_f64.sqrt());
        let back = AugmentedState::new(vec![t.blocks[1], t.blocks[0]]);
        assert_eq!(
            indirect_measurement(&back, &fwd).unwrap(),
            indirect_measurement(&t, &fwd).unwrap()
        );

        let off = AugmentedState::new(vec![rs(0.0, 1.7, -2.0, 0.3), rs(0.0, 1.2, -2.0, 0.3)]);
        assert_relative_eq!(indirect_measurement(&off, &fwd).unwrap()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_geometry_is_an_error() {
        let s = AugmentedState::new(vec![rs(0.0, 0.0, 0.0, 0.0)]);
        assert!(matches!(direct_measurement(&s), Err(CrlError::Geometry(_))));
        let c = AugmentedState::new(vec![rs(0.0, 1.0, 0.0, 0.0), rs(0.2, 1.0, 0.0, 0.0)]);
        assert!(matches!(
            indirect_measurement(&c, &IndirectLayout::complete(2)),
            Err(CrlError::Geometry(_))
        ));
        assert!(measurement_jacobian(&c, SchemeKind::Fcrl, &IndirectLayout::complete(2)).is_err());
        assert!(measurement_jacobian(&c, SchemeKind::Hcrl, &IndirectLayout::complete(2)).is_ok());
    }

    #[test]
    fn jacobian_examples() {
        let s = AugmentedState::new(vec![rs(0.3, 3.0, 4.0, 0.0)]);
        let h = measurement_jacobian(&s, SchemeKind::Hcrl, &IndirectLayout::empty()).unwrap();
        assert_relative_eq!(h, DMatrix::from_row_slice(1, 4, &[0.0, 0.6, 0.8, 0.0]), epsilon = 1e-15);

        let s = AugmentedState::new(vec![rs(0.0, 1.0, 0.0, 0.0), rs(0.0, 0.0, 1.0, 0.0)]);
        let h = measurement_jacobian(&s, SchemeKind::Fcrl, &IndirectLayout::complete(2)).unwrap();
        let r = 0.5_f64.sqrt();
        let expected = DMatrix::from_row_slice(
            3,
            8,
            &[
                0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, //
                0.0, r, -r, 0.0, 0.0, -r, r, 0.0,
            ],
        );
        assert_relative_eq!(h, expected, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_rows_have_unit_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = IndirectLayout::complete(4);
        for _ in 0..50 {
            let s = random_state(&mut rng, 4);
            let h = measurement_jacobian(&s, SchemeKind::Fcrl, &layout).unwrap();
            for r in 0..4 {
                assert_relative_eq!(h.row(r).norm(), 1.0, epsilon = 1e-12);
            }
            for (k, p) in layout.pairs.iter().enumerate() {
                let row = h.row(4 + k);
                assert_relative_eq!(row.norm(), 2.0_f64.sqrt(), epsilon = 1e-12);
                let a = row.columns(4 * p.a + 1, 3).into_owned();
                let b = row.columns(4 * p.b + 1, 3).into_owned();
                assert_relative_eq!(a, -b, epsilon = 1e-15);
            }
            for alpha in 0..4 {
                assert!(h.column(4 * alpha).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn process_jacobian_examples() {
        let s = AugmentedState::new(vec![rs(0.0, 1.0, 2.0, 3.0)]);
        let zero = AugmentedInput::new(ControlInput::zero(), vec![ControlInput::zero()]);
        let (a, _) = process_jacobians(&s, &zero, 0.01).unwrap();
        assert_eq!(a, DMatrix::identity(4, 4));

        let turning = AugmentedInput::new(ci(1.0, 0.0, 0.0, 0.0), vec![ControlInput::zero()]);
        let (a, _) = process_jacobians(&s, &turning, 0.01).unwrap();
        let expected = Matrix3::identity() - skew_selection::<f64>() * 0.01;
        assert_relative_eq!(a.fixed_view::<3, 3>(1, 1).into_owned(), expected, epsilon = 1e-15);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ts = 0.01;
        for n in 1..=4 {
            let model = CrlModel::new(SchemeKind::Fcrl, n, IndirectLayout::complete(n)).unwrap();
            for _ in 0..25 {
                let x = random_state(&mut rng, n).to_vector();
                let u = random_input(&mut rng, n).to_vector();

                let h = SystemModel::<f64>::measurement_jacobian(&model, &x).unwrap();
                let h_num = numeric_jacobian(|x| model.measure(x).unwrap(), &x, 1e-6);
                assert!((&h - &h_num).norm() <= 1e-6 * h_num.norm().max(1.0));

                let (a, b) = SystemModel::<f64>::process_jacobians(&model, &x, &u, ts).unwrap();
                let step = |x: &DVector<f64>, u: &DVector<f64>| x + model.derivative(x, u).unwrap() * ts;
                let a_num = numeric_jacobian(|x| step(x, &u), &x, 1e-6);
                let b_num = numeric_jacobian(|u| step(&x, u), &u, 1e-6);
                assert!((&a - &a_num).norm() <= 1e-6 * a_num.norm());
                assert!((&b - &b_num).norm() <= 1e-6 * b_num.norm().max(1e-2));
            }
        }
    }

    #[test]
    fn discretize_examples() {
        let v = ci(0.0, 1.0, 0.0, 0.0);
        let s = AugmentedState::new(vec![rs(0.0, 1.0, 2.0, 3.0)]);
        let still = discretize_step(&s, &AugmentedInput::new(v, vec![v]), 0.01).unwrap();
        assert_eq!(still, s);

        let moving = AugmentedInput::new(ControlInput::zero(), vec![v]);
        let next = discretize_step(&s, &moving, 0.01).unwrap();
        assert_relative_eq!(next.blocks[0].p, Vector3::new(1.01, 2.0, 3.0), epsilon = 1e-15);
        assert!(discretize_step(&s, &moving, 0.0).is_err());

        let spin = AugmentedInput::new(ControlInput::zero(), vec![ci(10.0, 0.0, 0.0, 0.0)]);
        let near_pi = AugmentedState::new(vec![rs(3.1, 1.0, 0.0, 0.0)]);
        let wrapped = discretize_step(&near_pi, &spin, 0.01).unwrap();
        assert_relative_eq!(wrapped.blocks[0].psi, 3.2 - 2.0 * std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn euler_error_is_second_order() {
        // Deviation between one full step and two half steps shrinks by 4x
        // when the step halves.
        let s = AugmentedState::new(vec![rs(0.3, 2.0, -1.0, 0.5)]);
        let u = AugmentedInput::new(ci(0.8, 1.0, 0.5, 0.0), vec![ci(-0.4, 0.0, 1.5, 0.3)]);
        let gap = |ts: f64| {
            let full = discretize_step(&s, &u, ts).unwrap();
            let half = discretize_step(&discretize_step(&s, &u, ts / 2.0).unwrap(), &u, ts / 2.0).unwrap();
            (full.to_vector() - half.to_vector()).norm()
        };
        let ratio = gap(0.02) / gap(0.01);
        assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn pairwise_models_reproduce_augmented_trajectory() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 4;
        let mut aug = random_state(&mut rng, n);
        let mut pairs: Vec<AugmentedState<f64>> = aug.blocks.iter().map(|b| AugmentedState::new(vec![*b])).collect();
        for _ in 0..500 {
            let u = random_input(&mut rng, n);
            aug = discretize_step(&aug, &u, 0.01).unwrap();
            for (alpha, p) in pairs.iter_mut().enumerate() {
                *p = discretize_step(p, &AugmentedInput::new(u.host, vec![u.neighbors[alpha]]), 0.01).unwrap();
            }
        }
        for (alpha, p) in pairs.iter().enumerate() {
            assert!((aug.blocks[alpha].to_vector() - p.blocks[0].to_vector()).norm() < 1e-12);
        }
    }

    #[test]
    fn linear_model_jacobians() {
        let m = LinearModel {
            f: DMatrix::from_element(1, 1, -0.5),
            g: DMatrix::from_element(1, 1, 2.0),
            c: DMatrix::from_element(1, 1, 1.0),
        };
        let (a, b) = m
            .process_jacobians(&DVector::zeros(1), &DVector::zeros(1), 0.1)
            .unwrap();
        assert_relative_eq!(a[(0, 0)], 0.95);
        assert_relative_eq!(b[(0, 0)], 0.2);
    }

    proptest! {
        #[test]
        fn vector_round_trip(values in proptest::collection::vec(-3.0_f64..3.0, 12)) {
            let x = DVector::from_vec(values);
            let back = AugmentedState::from_vector(&x).unwrap().to_vector();
            // headings already inside (-pi, pi] survive unchanged
            prop_assert_eq!(back, x.clone());
            let u = AugmentedInput::from_vector(&x).unwrap().to_vector();
            prop_assert_eq!(u, x);
        }
    }
}
