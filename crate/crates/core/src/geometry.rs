//! Reference frames, rotations and the pairwise relative-motion vector
//! field.
//!
//! Relative positions are resolved in the host's *horizontal frame*: a
//! body-centred frame whose Z axis stays perpendicular to the ground, so
//! only the heading enters the pairwise kinematics.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{CrlError, Result};
use crate::scalar::{lit, Scalar};

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle<T: Scalar>(angle: T) -> T {
    let pi = T::pi();
    let two_pi = T::two_pi();
    let mut a = angle % two_pi;
    if a > pi {
        a -= two_pi;
    } else if a <= -pi {
        a += two_pi;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerAngles<T: Scalar> {
    pub phi: T,
    pub theta: T,
    pub psi: T,
}

impl<T: Scalar> EulerAngles<T> {
    pub fn new(phi: T, theta: T, psi: T) -> Result<Self> {
        if !(phi.is_finite() && theta.is_finite() && psi.is_finite()) {
            return Err(CrlError::Domain("euler angles must be finite".into()));
        }
        Ok(Self {
            phi,
            theta,
            psi: wrap_angle(psi),
        })
    }

    fn check_pitch(&self) -> Result<()> {
        if self.theta.abs() >= T::frac_pi_2() {
            return Err(CrlError::Domain(format!(
                "pitch {} at or beyond the +-pi/2 singularity",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Relative heading and relative position of one neighbor, resolved in the
/// host's horizontal frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeState<T: Scalar> {
    pub psi: T,
    pub p: Vector3<T>,
}

impl<T: Scalar> RelativeState<T> {
    pub fn new(psi: T, p: Vector3<T>) -> Self {
        Self {
            psi: wrap_angle(psi),
            p,
        }
    }

    pub fn to_vector(&self) -> Vector4<T> {
        Vector4::new(self.psi, self.p.x, self.p.y, self.p.z)
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(v[0], Vector3::new(v[1], v[2], v[3]))
    }

    pub fn distance(&self) -> T {
        self.p.norm()
    }
}

/// Heading rate and body velocity of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput<T: Scalar> {
    pub psi_dot: T,
    pub v: Vector3<T>,
}

impl<T: Scalar> ControlInput<T> {
    pub fn new(psi_dot: T, v: Vector3<T>) -> Self {
        Self { psi_dot, v }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), Vector3::zeros())
    }

    pub fn to_vector(&self) -> Vector4<T> {
        Vector4::new(self.psi_dot, self.v.x, self.v.y, self.v.z)
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self::new(v[0], Vector3::new(v[1], v[2], v[3]))
    }

    pub fn is_finite(&self) -> bool {
        self.psi_dot.is_finite() && self.v.iter().all(|c| c.is_finite())
    }
}

impl<T: Scalar> std::ops::Add for ControlInput<T> {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self::new(self.psi_dot + rhs.psi_dot, self.v + rhs.v)
    }
}

/// Inputs of a host/neighbor pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairInput<T: Scalar> {
    pub host: ControlInput<T>,
    pub neighbor: ControlInput<T>,
}

impl<T: Scalar> PairInput<T> {
    pub fn new(host: ControlInput<T>, neighbor: ControlInput<T>) -> Self {
        Self { host, neighbor }
    }

    /// Relative heading rate of the neighbor with respect to the host.
    pub fn relative_heading_rate(&self) -> T {
        self.neighbor.psi_dot - self.host.psi_dot
    }
}

/// Rotation taking body-frame vectors into the horizontal frame,
/// `R_Y(theta) R_X(phi)`.
pub fn rotation_body_to_horizontal<T: Scalar>(angles: &EulerAngles<T>) -> Result<Matrix3<T>> {
    angles.check_pitch()?;
    let (sp, cp) = angles.phi.sin_cos();
    let (st, ct) = angles.theta.sin_cos();
    Ok(Matrix3::new(
        ct,
        st * sp,
        st * cp,
        T::zero(),
        cp,
        -sp,
        -st,
        ct * sp,
        ct * cp,
    ))
}

/// Maps gyroscope body rates to Euler-angle rates `(phi_dot, theta_dot, psi_dot)`.
pub fn euler_rates_from_body_rates<T: Scalar>(angles: &EulerAngles<T>, omega: &Vector3<T>) -> Result<Vector3<T>> {
    angles.check_pitch()?;
    let (sp, cp) = angles.phi.sin_cos();
    let ct = angles.theta.cos();
    let tt = angles.theta.tan();
    let map = Matrix3::new(
        T::one(),
        sp * tt,
        cp * tt,
        T::zero(),
        cp,
        -sp,
        T::zero(),
        sp / ct,
        cp / ct,
    );
    Ok(map * omega)
}

/// Yaw rotation about Z.
pub fn planar_rotation<T: Scalar>(psi: T) -> Matrix3<T> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, T::zero(), s, c, T::zero(), T::zero(), T::zero(), T::one())
}

/// Derivative of [`planar_rotation`] with respect to the angle.
pub fn planar_rotation_derivative<T: Scalar>(psi: T) -> Matrix3<T> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(-s, -c, T::zero(), c, -s, T::zero(), T::zero(), T::zero(), T::zero())
}

/// The horizontal cross-product matrix `S`: `S p = e_z x p`.
pub fn skew_selection<T: Scalar>() -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -T::one(),
        T::zero(),
        T::one(),
        T::zero(),
        T::zero(),
        T::zero(),
        T::zero(),
        T::zero(),
    )
}

/// `E = diag(0, 0, 1)`, selects the vertical component.
pub fn vertical_selection<T: Scalar>() -> Matrix3<T> {
    Matrix3::from_diagonal(&Vector3::new(T::zero(), T::zero(), T::one()))
}

/// Time derivative of a pairwise relative state, ordered `(psi_dot_ij, p_dot)`.
pub fn pair_dynamics<T: Scalar>(state: &RelativeState<T>, input: &PairInput<T>) -> Vector4<T> {
    let host = &input.host;
    let nb = &input.neighbor;
    let p_dot = planar_rotation(state.psi) * nb.v - host.v - skew_selection::<T>() * state.p * host.psi_dot;
    Vector4::new(nb.psi_dot - host.psi_dot, p_dot.x, p_dot.y, p_dot.z)
}

/// Relative velocity `R(psi_ij) v_j - v_i` of the neighbor seen from the host.
pub fn relative_velocity<T: Scalar>(state: &RelativeState<T>, input: &PairInput<T>) -> Vector3<T> {
    planar_rotation(state.psi) * input.neighbor.v - input.host.v
}

/// Degrees from radians, used for reporting.
pub fn to_degrees<T: Scalar>(rad: T) -> T {
    rad * lit::<T>(180.0) / T::pi()
}
