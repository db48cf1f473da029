//! Property tests for the engine's algebraic invariants.

use proptest::prelude::*;
use renoise_core::{
    build_ddim_schedule, denoise_step, inverse_step, noise_correction_optimize, sample_gaussian,
    Latent, RngState, Schedule, StepParams, Trajectory,
};

fn latent_strategy(len: usize) -> impl Strategy<Value = Latent> {
    prop::collection::vec(-1e3f64..1e3, len)
        .prop_map(move |data| Latent::new(vec![len], data).unwrap())
}

fn step_params_strategy() -> impl Strategy<Value = StepParams> {
    (
        prop_oneof![-2.0f64..-0.05, 0.05f64..2.0],
        -2.0f64..2.0,
        0.0f64..1.5,
    )
        .prop_map(|(phi, psi, rho)| StepParams::new(phi, psi, rho).unwrap())
}

proptest! {
    #[test]
    fn denoise_inverts_inverse(
        z in latent_strategy(6),
        delta in latent_strategy(6),
        eps in latent_strategy(6),
        p in step_params_strategy(),
    ) {
        let eps_opt = if p.rho > 0.0 { Some(&eps) } else { None };
        let z_t = inverse_step(&z, &delta, eps_opt, &p).unwrap();
        let back = denoise_step(&z_t, &delta, eps_opt, &p).unwrap();
        let err = back.max_abs_diff(&z).unwrap();
        prop_assert!(err <= 1e-13 * (1.0 + z.linf_norm()), "round-trip error {err}");
    }

    #[test]
    fn schedule_text_round_trip(levels in prop::collection::vec(0.01f64..0.99, 1..12)) {
        // sort descending and dedup to build a valid alpha_bar
        let mut levels = levels;
        levels.sort_by(|a, b| b.partial_cmp(a).unwrap());
        levels.dedup();
        let sched = build_ddim_schedule(&levels).unwrap();
        let text = sched.to_text();
        let back = Schedule::from_text(&text).unwrap();
        prop_assert_eq!(&sched, &back);
        prop_assert_eq!(text, back.to_text());
    }

    #[test]
    fn optimized_correction_contracts_geometrically(
        eps0 in latent_strategy(5),
        target in latent_strategy(5),
        eta in 0.05f64..1.0,
        iters in 1usize..8,
    ) {
        let rec = noise_correction_optimize(&eps0, &target, eta, iters).unwrap();
        let factor = (1.0 - eta).powi(iters as i32);
        // closed form: eps = target + (1 - eta)^iters * (eps0 - target)
        let expected = target.add_scaled(&eps0.sub(&target).unwrap(), factor).unwrap();
        let err = rec.eps.max_abs_diff(&expected).unwrap();
        prop_assert!(err <= 1e-12 * (1.0 + expected.linf_norm()));
        prop_assert!(rec.residual_after <= rec.residual_before);
        // componentwise the iterate never escapes the eps0..target bracket
        for ((e, &e0), &t) in rec.eps.data().iter().zip(eps0.data()).zip(target.data()) {
            let lo = e0.min(t) - 1e-9 * (1.0 + t.abs());
            let hi = e0.max(t) + 1e-9 * (1.0 + t.abs());
            prop_assert!(*e >= lo && *e <= hi);
        }
    }

    #[test]
    fn gaussian_sampling_is_deterministic(seed in any::<u64>(), n in 1usize..64) {
        let mut a = RngState::new(seed);
        let mut b = RngState::new(seed);
        let x = sample_gaussian(&mut a, &[n]).unwrap();
        let y = sample_gaussian(&mut b, &[n]).unwrap();
        prop_assert_eq!(x.data(), y.data());
        prop_assert!(x.is_finite());
    }

    #[test]
    fn trajectory_file_round_trip(
        t_count in 1usize..5,
        dim in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let latents: Vec<Latent> = (0..=t_count)
            .map(|_| sample_gaussian(&mut rng, &[dim]).unwrap())
            .collect();
        let noises: Vec<Option<Latent>> = (0..t_count)
            .map(|i| {
                if i % 2 == 0 {
                    Some(sample_gaussian(&mut rng, &[dim]).unwrap())
                } else {
                    None
                }
            })
            .collect();
        let rho: Vec<f64> = (0..t_count).map(|i| if i % 2 == 0 { 0.5 } else { 0.0 }).collect();
        let traj = Trajectory::new(latents, noises).unwrap();
        let mut buf = Vec::new();
        traj.write_to(&mut buf).unwrap();
        let back = Trajectory::read_from(&mut buf.as_slice(), Some(&rho)).unwrap();
        prop_assert_eq!(back, traj);
    }
}
