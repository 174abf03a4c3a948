//! Observability matrices of the localization schemes and numeric rank
//! analysis.
//!
//! Only the position states enter: each neighbor contributes a 3-column
//! block. Row `k` of a block is the `k`-th order (augmented) Lie derivative
//! of the corresponding range, with the positive distance factor dropped.

use nalgebra::{DMatrix, Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, CrlError, Result};
use crate::geometry::{planar_rotation, skew_selection, vertical_selection, PairInput, RelativeState};
use crate::models::{AugmentedInput, AugmentedState, IndirectLayout, SchemeKind};
use crate::scalar::{lit, to_f64, Scalar};

/// Default relative singular-value threshold for numeric rank.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservabilityBlock<T: Scalar> {
    pub rows: Matrix3<T>,
    /// Distance factor removed from every entry.
    pub scale: T,
}

impl<T: Scalar> ObservabilityBlock<T> {
    /// Block as it appears in the stacked matrix: `rows / scale`.
    pub fn scaled(&self) -> Matrix3<T> {
        self.rows / self.scale
    }
}

fn row<T: Scalar>(v: Vector3<T>) -> RowVector3<T> {
    v.transpose()
}

/// Pairwise block: `p^T`, `v_ij^T` and the scaled-velocity row.
pub fn pairwise_ob_matrix<T: Scalar>(state: &RelativeState<T>, input: &PairInput<T>) -> Result<ObservabilityBlock<T>> {
    let scale = state.p.norm();
    if scale < T::min_distance() {
        return Err(CrlError::Geometry("host and neighbor collide".into()));
    }
    let r = planar_rotation(state.psi);
    let (vi, vj) = (input.host.v, input.neighbor.v);
    let (wi, wj) = (input.host.psi_dot, input.neighbor.psi_dot);
    let w = r * vj * wj - vi * wi;
    let third = row(vertical_selection::<T>() * vj) * input.relative_heading_rate()
        - row(skew_selection::<T>().transpose() * w);
    Ok(ObservabilityBlock {
        rows: Matrix3::from_rows(&[row(state.p), row(r * vj - vi), third]),
        scale,
    })
}

/// Block of the relayed range between neighbors `a` and `b` of one host.
pub fn indirect_ob_block<T: Scalar>(
    state_a: &RelativeState<T>,
    state_b: &RelativeState<T>,
    input_a: &PairInput<T>,
    input_b: &PairInput<T>,
) -> Result<ObservabilityBlock<T>> {
    let diff = state_a.p - state_b.p;
    let scale = diff.norm();
    if scale < T::min_distance() {
        return Err(CrlError::Geometry("neighbors coincide".into()));
    }
    let (ra, rb) = (planar_rotation(state_a.psi), planar_rotation(state_b.psi));
    let (va, vb) = (input_a.neighbor.v, input_b.neighbor.v);
    let (wa, wb) = (input_a.relative_heading_rate(), input_b.relative_heading_rate());
    let third = row(vertical_selection::<T>() * (va * wa - vb * wb))
        - row(skew_selection::<T>().transpose() * (ra * va * wa - rb * vb * wb));
    Ok(ObservabilityBlock {
        rows: Matrix3::from_rows(&[row(diff), row(ra * va - rb * vb), third]),
        scale,
    })
}

/// Stacked observability matrix of a host and its neighbors over the
/// `3 N` position states.
///
/// `order` selects how many Lie-derivative rows each range contributes
/// (0 keeps the range differentials only, 2 keeps all three rows).
pub fn crl_ob_matrix<T: Scalar>(
    states: &AugmentedState<T>,
    inputs: &AugmentedInput<T>,
    scheme: SchemeKind,
    layout: &IndirectLayout,
    order: usize,
) -> Result<DMatrix<T>> {
    let n = states.len();
    check_dim(n, inputs.neighbors.len(), "neighbor inputs")?;
    if order > 2 {
        return Err(CrlError::Domain(format!(
            "observability order must be 0, 1 or 2, got {order}"
        )));
    }
    let k = order + 1;
    let indirect = if scheme.uses_indirect() { layout.len() } else { 0 };
    let mut ob = DMatrix::zeros(k * (n + indirect), 3 * n);
    for alpha in 0..n {
        let block = pairwise_ob_matrix(&states.blocks[alpha], &inputs.pair(alpha))?.scaled();
        ob.view_mut((k * alpha, 3 * alpha), (k, 3)).copy_from(&block.rows(0, k));
    }
    if scheme.uses_indirect() {
        for (m, pair) in layout.pairs.iter().enumerate() {
            if pair.a >= n || pair.b >= n {
                return Err(CrlError::Config(format!(
                    "indirect pair {pair:?} exceeds {n} neighbors"
                )));
            }
            let block = indirect_ob_block(
                &states.blocks[pair.a],
                &states.blocks[pair.b],
                &inputs.pair(pair.a),
                &inputs.pair(pair.b),
            )?
            .scaled();
            let r0 = k * (n + m);
            ob.view_mut((r0, 3 * pair.a), (k, 3)).copy_from(&block.rows(0, k));
            ob.view_mut((r0, 3 * pair.b), (k, 3)).copy_from(&(-block.rows(0, k)));
        }
    }
    Ok(ob)
}

/// Numeric rank from singular values above `tol * sigma_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankInfo {
    pub rank: usize,
    /// Smallest of the `min(rows, cols)` singular values.
    pub sigma_min: f64,
    pub sigma_max: f64,
}

pub fn numeric_rank<T: Scalar>(m: &DMatrix<T>, tol: f64) -> RankInfo {
    if m.is_empty() {
        return RankInfo {
            rank: 0,
            sigma_min: 0.0,
            sigma_max: 0.0,
        };
    }
    let sv: Vec<f64> = m.singular_values().iter().map(|&s| to_f64(s)).collect();
    let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
    let sigma_min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let rank = if sigma_max > 0.0 {
        sv.iter().filter(|&&s| s > tol * sigma_max).count()
    } else {
        0
    };
    RankInfo {
        rank,
        sigma_min,
        sigma_max,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotionCase {
    ParallelMotion,
    AlignedRelativeMotion,
    HorizontalNoVertical,
    HorizontalSameHeadingRate,
    Generic,
}

impl MotionCase {
    pub fn label(&self) -> &'static str {
        match self {
            MotionCase::ParallelMotion => "parallel",
            MotionCase::AlignedRelativeMotion => "aligned",
            MotionCase::HorizontalNoVertical => "horizontal_no_vertical",
            MotionCase::HorizontalSameHeadingRate => "horizontal_same_rate",
            MotionCase::Generic => "generic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionClassification {
    pub case: MotionCase,
    /// More than one unobservable condition holds at once.
    pub multiple: bool,
}

/// First matching unobservable motion condition of a pair.
///
/// The same-heading-rate plane case also requires equal vertical speeds:
/// without them the pair leaves the plane and the third column of the
/// block does not vanish.
pub fn classify_motion<T: Scalar>(state: &RelativeState<T>, input: &PairInput<T>, tol: f64) -> MotionClassification {
    let tol = lit::<T>(tol);
    let v = planar_rotation(state.psi) * input.neighbor.v - input.host.v;
    let (vzi, vzj) = (input.host.v.z, input.neighbor.v.z);
    let small = |x: T| x.abs() <= tol;
    let in_plane = small(state.p.z);
    let checks = [
        (MotionCase::ParallelMotion, v.norm() <= tol),
        (
            MotionCase::AlignedRelativeMotion,
            state.p.cross(&v).norm() <= tol * state.p.norm() * v.norm(),
        ),
        (MotionCase::HorizontalNoVertical, in_plane && small(vzi) && small(vzj)),
        (
            MotionCase::HorizontalSameHeadingRate,
            in_plane && small(vzi - vzj) && small(input.relative_heading_rate()),
        ),
    ];
    let mut hits = checks.iter().filter(|(_, hit)| *hit).map(|(c, _)| *c);
    match hits.next() {
        Some(case) => MotionClassification {
            case,
            multiple: hits.next().is_some(),
        },
        None => MotionClassification {
            case: MotionCase::Generic,
            multiple: false,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSample {
    pub rank: usize,
    pub sigma_min: f64,
    /// Full rank for the sample, `3 N`.
    pub full_rank: usize,
}

/// Rank of the second-order observability matrix at every sample.
pub fn rank_along_trajectory<T: Scalar>(
    states: &[AugmentedState<T>],
    inputs: &[AugmentedInput<T>],
    scheme: SchemeKind,
    layout: &IndirectLayout,
    tol: f64,
) -> Result<Vec<RankSample>> {
    check_dim(states.len(), inputs.len(), "trajectory inputs")?;
    states
        .iter()
        .zip(inputs)
        .map(|(s, u)| {
            let ob = crl_ob_matrix(s, u, scheme, layout, 2)?;
            let info = numeric_rank(&ob, tol);
            Ok(RankSample {
                rank: info.rank,
                sigma_min: info.sigma_min,
                full_rank: ob.ncols(),
            })
        })
        .collect()
}
