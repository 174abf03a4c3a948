mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crl_core::filters::{ekf_predict, ekf_update, mlvc_update, FilterBelief, FixedPointConfig, KernelKind};
use crl_core::models::{measurement, measurement_jacobian, CrlModel, IndirectLayout, SchemeKind, SystemModel};
use crl_core::observability::{crl_ob_matrix, numeric_rank, pairwise_ob_matrix, RANK_TOL};
use crl_core::{AugmentedState32, FilterBelief32};

fn spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    use rand::Rng;
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(n, n) * 0.2) * scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hcrl_rank_is_sum_of_pair_ranks(seed in any::<u64>(), n in 1usize..5, still in proptest::collection::vec(any::<bool>(), 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = common::random_geometry(&mut rng, n, 1.0);
        let mut inputs = common::random_inputs(&mut rng, n);
        // some pairs in parallel motion, which drops their rank to one
        for (alpha, &parallel) in still.iter().enumerate().take(n) {
            if parallel {
                let host = inputs.host;
                inputs.neighbors[alpha].psi_dot = host.psi_dot;
                inputs.neighbors[alpha].v = crl_core::geometry::planar_rotation(states.blocks[alpha].psi).transpose() * host.v;
            }
        }
        let ob = crl_ob_matrix(&states, &inputs, SchemeKind::Hcrl, &IndirectLayout::empty(), 2).unwrap();
        let total = numeric_rank(&ob, RANK_TOL).rank;
        let pairs: usize = (0..n)
            .map(|a| {
                let b = pairwise_ob_matrix(&states.blocks[a], &inputs.pair(a)).unwrap().scaled();
                numeric_rank(&DMatrix::from_iterator(3, 3, b.iter().copied()), RANK_TOL).rank
            })
            .sum();
        prop_assert_eq!(total, pairs);

        if n >= 2 {
            let full = crl_ob_matrix(&states, &inputs, SchemeKind::Fcrl, &IndirectLayout::complete(n), 2).unwrap();
            prop_assert!(numeric_rank(&full, RANK_TOL).rank >= total);
        }
    }

    #[test]
    fn f32_and_f64_filters_agree(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CrlModel::new(SchemeKind::Fcrl, n, IndirectLayout::complete(n)).unwrap();
        let truth = common::random_geometry(&mut rng, n, 1.5);
        let u = common::random_inputs(&mut rng, n).to_vector();
        let prior = FilterBelief::new(truth.to_vector(), spd(&mut rng, 4 * n, 0.02)).unwrap();
        let q = spd(&mut rng, 4 * (n + 1), 0.01);
        let m = SystemModel::<f64>::measurement_dim(&model);
        let y = measurement(&truth, SchemeKind::Fcrl, &model.layout).unwrap().add_scalar(0.05);
        let r = DMatrix::identity(m, m) * 0.08;

        let predicted = ekf_predict(&prior, &u, &q, 0.01, &model).unwrap();
        let post = ekf_update(&predicted, &y, &r, &model).unwrap();

        let prior32: FilterBelief32 = FilterBelief::new(prior.x_hat.cast(), prior.p.cast()).unwrap();
        let predicted32 = ekf_predict(&prior32, &u.cast(), &q.cast(), 0.01_f32, &model).unwrap();
        let post32 = ekf_update(&predicted32, &y.cast(), &r.cast(), &model).unwrap();
        let dx: DVector<f64> = post32.x_hat.cast::<f64>() - &post.x_hat;
        prop_assert!(dx.norm() < 1e-3 * post.x_hat.norm().max(1.0), "dx {}", dx.norm());

        let state32: AugmentedState32 = AugmentedState32::from_vector(&truth.to_vector().cast()).unwrap();
        let h32 = measurement_jacobian(&state32, SchemeKind::Fcrl, &model.layout).unwrap();
        let h = measurement_jacobian(&truth, SchemeKind::Fcrl, &model.layout).unwrap();
        prop_assert!((h32.cast::<f64>() - &h).norm() < 1e-5 * h.norm());
    }

    #[test]
    fn wide_kernels_reduce_to_the_ekf(seed in any::<u64>(), n in 1usize..4, gaussian in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = CrlModel::new(SchemeKind::Hcrl, n, IndirectLayout::empty()).unwrap();
        let truth = common::random_geometry(&mut rng, n, 1.5);
        let prior = FilterBelief::new(truth.to_vector().add_scalar(0.1), spd(&mut rng, 4 * n, 0.05)).unwrap();
        let y = measurement(&truth, SchemeKind::Hcrl, &model.layout).unwrap().add_scalar(-0.05);
        let r = spd(&mut rng, n, 0.05);
        // the LV weight keeps its 1/(1 + e²) factor for any bandwidth, so only
        // these two tend to unit weights
        let kernel = if gaussian { KernelKind::Gaussian(1e12) } else { KernelKind::Versoria(1e12) };
        let ekf = ekf_update(&prior, &y, &r, &model).unwrap();
        let k = mlvc_update(&prior, &y, &r, &model, &kernel, &FixedPointConfig::default()).unwrap();
        prop_assert!(k.converged);
        prop_assert!((&k.belief.x_hat - &ekf.x_hat).norm() < 1e-8 * ekf.x_hat.norm().max(1.0));
        prop_assert!((&k.belief.p - &ekf.p).norm() < 1e-8 * ekf.p.norm());
    }

    #[test]
    fn indirect_rows_match_finite_differences(seed in any::<u64>(), n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = IndirectLayout::complete(n);
        let state = common::random_geometry(&mut rng, n, 0.5);
        let h = measurement_jacobian(&state, SchemeKind::Fcrl, &layout).unwrap();
        let num = common::numeric_jacobian(
            |x| measurement(&crl_core::models::AugmentedState::from_vector(x).unwrap(), SchemeKind::Fcrl, &layout).unwrap(),
            &state.to_vector(),
            1e-6,
        );
        prop_assert!((h - num).norm() < 1e-7);
    }
}
