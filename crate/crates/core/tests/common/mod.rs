#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;

use crl_core::geometry::{ControlInput, RelativeState};
use crl_core::models::{AugmentedInput, AugmentedState};
use crl_core::simulation::{RunConfig, TURN_DURATION};

/// Central-difference Jacobian of `f` at `x`.
pub fn numeric_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    jac
}

pub fn uniform_vec<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    )
}

/// Neighbors at least `min_sep` from the host and from each other.
pub fn random_geometry<R: Rng>(rng: &mut R, n: usize, min_sep: f64) -> AugmentedState<f64> {
    loop {
        let blocks: Vec<RelativeState<f64>> = (0..n)
            .map(|_| RelativeState::new(rng.random_range(-3.0..3.0), uniform_vec(rng, -8.0, 8.0)))
            .collect();
        let ok = blocks.iter().all(|b| b.p.norm() >= min_sep)
            && (0..n).all(|a| (a + 1..n).all(|b| (blocks[a].p - blocks[b].p).norm() >= min_sep));
        if ok {
            return AugmentedState::new(blocks);
        }
    }
}

pub fn random_inputs<R: Rng>(rng: &mut R, n: usize) -> AugmentedInput<f64> {
    let mut one = || ControlInput::new(rng.random_range(-1.0..1.0), uniform_vec(rng, -3.0, 3.0));
    let host = one();
    AugmentedInput::new(host, (0..n).map(|_| one()).collect())
}

/// Default configuration with the horizon cut short.
pub fn short_config(horizon: f64) -> RunConfig {
    let mut cfg = RunConfig::paper_default();
    cfg.horizon = horizon;
    for s in &mut cfg.swarm {
        s.turn_starts.retain(|&t| t + TURN_DURATION <= horizon);
    }
    cfg
}
