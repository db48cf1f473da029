//! Cross-module behavior of the inversion engine.

use renoise_core::{
    build_ancestral_schedule, build_ddim_schedule, build_euler_ode_schedule_uniform,
    denoise_step, denoise_trajectory, renoise_inversion, sample_gaussian, ConditioningRef,
    CountingPredictor, EditLossConfig, Latent, LinearPredictor, LinearPredictorParams,
    NoiseCorrection, RenoiseConfig, RenoiseWeights, RngState, SeededNonlinear,
    SeededNonlinearParams, ToyShiftedGaussian, ToyShiftedGaussianParams,
};

const C: ConditioningRef = ConditioningRef::Unconditioned;

#[test]
fn toy_trajectory_reconstructs_through_denoising() {
    let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(1.0).unwrap());
    let sched = build_euler_ode_schedule_uniform(0.0, 0.5, 5).unwrap();
    let z0 = Latent::scalar(2.0);
    let cfg = RenoiseConfig::new(1, RenoiseWeights::last_only(1));
    let mut rng = RngState::new(0);
    let inv = renoise_inversion(&z0, &toy, &sched, &cfg, &mut rng, &C).unwrap();
    let traj = denoise_trajectory(inv.z_terminal(), inv.noises(), &toy, &sched, &C).unwrap();
    let err = traj.initial().max_abs_diff(&z0).unwrap();
    assert!(err <= 1e-12, "reconstruction error {err}");
}

#[test]
fn fixed_point_consistency_when_converged() {
    // wherever the series converged, denoising the step output with the last
    // delta reproduces the previous latent
    let pred = SeededNonlinear::new(SeededNonlinearParams::new(7, 24, 0.3).unwrap());
    let sched = build_ddim_schedule(&[0.95, 0.8, 0.6, 0.4]).unwrap();
    let mut rng = RngState::new(2);
    let z0 = sample_gaussian(&mut rng, &[8]).unwrap();
    let cfg = RenoiseConfig::new(12, RenoiseWeights::last_only(12));
    let result = renoise_inversion(&z0, &pred, &sched, &cfg, &mut rng, &C).unwrap();
    for i in 0..sched.len() {
        let diffs = &result.report.delta_norms[i];
        if *diffs.last().unwrap() >= 1e-10 {
            continue;
        }
        let series = &result.per_step_series[i];
        let delta = series.deltas.last().unwrap();
        let z_t = &result.trajectory.latents[i + 1];
        let back = denoise_step(z_t, delta, None, &sched.step(i)).unwrap();
        let err = back.max_abs_diff(&result.trajectory.latents[i]).unwrap();
        assert!(err <= 1e-9, "step {i} fixed-point residual {err}");
    }
}

#[test]
fn ancestral_inversion_grows_the_latent_norm() {
    // phi stays near 1 on a near-flat level profile while each inverse step
    // keeps adding along the prediction, so a finer inversion leg (here 12
    // steps, against the 4-step denoising legs such schedules pair with)
    // pushes the terminal norm above the input's
    let pred = LinearPredictor::new(LinearPredictorParams::scaled_identity(16, 0.5).unwrap());
    let levels: Vec<f64> = (1..=12).map(|i| 1.0 - 0.02 * i as f64).collect();
    let sched = build_ancestral_schedule(&levels).unwrap();
    for p in sched.steps() {
        assert!((p.phi - 1.0).abs() < 0.1, "phi should stay near 1");
    }
    let cfg = RenoiseConfig::baseline();
    for seed in 0..5 {
        let mut rng = RngState::new(seed);
        let z0 = sample_gaussian(&mut rng, &[16]).unwrap();
        let result = renoise_inversion(&z0, &pred, &sched, &cfg, &mut rng, &C).unwrap();
        assert!(
            result.z_terminal().l2_norm() > z0.l2_norm(),
            "seed {seed}: norm did not grow"
        );
    }
}

#[test]
fn operation_count_includes_corrections_and_references() {
    let pred = SeededNonlinear::new(SeededNonlinearParams::new(5, 16, 0.2).unwrap());
    let sched = build_ancestral_schedule(&[0.95, 0.8, 0.6, 0.4, 0.2]).unwrap();
    let stochastic_steps = sched.steps().iter().filter(|p| p.rho > 0.0).count();
    let t = sched.len();
    let k = 2usize;

    let mut cfg = RenoiseConfig::new(k, RenoiseWeights::last_only(k));
    cfg.noise_correction = NoiseCorrection::Optimize { eta: 0.5, iters: 3 };
    cfg.edit_loss = Some(EditLossConfig {
        lambda_pair: 1.0,
        lambda_patch_kl: 0.01,
        patch_size: 2,
        ..EditLossConfig::default()
    });

    let counting = CountingPredictor::new(&pred);
    let mut rng = RngState::new(9);
    let z0 = sample_gaussian(&mut rng, &[4, 4]).unwrap();
    let result = renoise_inversion(&z0, &counting, &sched, &cfg, &mut rng, &C).unwrap();

    // K+1 per step, one reference per step (patch-KL active), one extra per
    // corrected step
    let expected = (t * (k + 1) + t + stochastic_steps) as u64;
    assert_eq!(result.op_count, expected);
    assert_eq!(counting.evaluations(), expected);
}

#[test]
fn k0_baseline_matches_manual_loop_bitwise_on_stochastic_schedule() {
    let pred = LinearPredictor::new(LinearPredictorParams::scaled_identity(3, 0.25).unwrap());
    let sched = build_ancestral_schedule(&[0.9, 0.7, 0.5, 0.3]).unwrap();
    let z0 = Latent::new(vec![3], vec![0.3, -0.8, 1.1]).unwrap();
    let cfg = RenoiseConfig::baseline();

    let mut rng_engine = RngState::new(123);
    let result = renoise_inversion(&z0, &pred, &sched, &cfg, &mut rng_engine, &C).unwrap();

    let mut rng_manual = RngState::new(123);
    let mut z = z0.clone();
    for i in 0..sched.len() {
        let p = sched.step(i);
        let info = sched.step_info(i);
        let eps = if p.rho > 0.0 {
            Some(sample_gaussian(&mut rng_manual, &[3]).unwrap())
        } else {
            None
        };
        z = renoise_core::approx_inverse_step(&z, &pred, info.t_src, &C, eps.as_ref(), &p).unwrap();
        let engine_bits: Vec<u64> = result.trajectory.latents[i + 1]
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let manual_bits: Vec<u64> = z.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(engine_bits, manual_bits, "bit mismatch at step {}", i + 1);
    }
}

#[test]
fn inversion_reports_nonfinite_step() {
    // an expanding inverse map overflows; the error names the first bad step
    let pred = LinearPredictor::new(LinearPredictorParams::scaled_identity(1, 1e8).unwrap());
    let sched = build_euler_ode_schedule_uniform(0.0, 400.0, 2).unwrap();
    let cfg = RenoiseConfig::new(40, RenoiseWeights::last_only(40));
    let mut rng = RngState::new(0);
    let err = renoise_inversion(&Latent::scalar(1.0), &pred, &sched, &cfg, &mut rng, &C)
        .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("non-finite latent at step"), "got: {msg}");
}

#[test]
fn edit_loss_reduces_autocorrelation_of_recorded_deltas() {
    let pred = SeededNonlinear::new(SeededNonlinearParams::new(21, 24, 0.3).unwrap());
    let sched = build_ddim_schedule(&[0.9, 0.6]).unwrap();
    let mut rng = RngState::new(4);
    let z0 = sample_gaussian(&mut rng, &[6, 6]).unwrap();

    let plain_cfg = RenoiseConfig::new(3, RenoiseWeights::last_only(3));
    let mut edited_cfg = plain_cfg.clone();
    edited_cfg.edit_loss = Some(EditLossConfig {
        lambda_pair: 10.0,
        lambda_patch_kl: 0.0,
        step_size: 0.5,
        ..EditLossConfig::default()
    });

    let mut r1 = RngState::new(77);
    let plain = renoise_inversion(&z0, &pred, &sched, &plain_cfg, &mut r1, &C).unwrap();
    let mut r2 = RngState::new(77);
    let edited = renoise_inversion(&z0, &pred, &sched, &edited_cfg, &mut r2, &C).unwrap();

    let shifts = [(1i64, 0i64), (0, 1)];
    let score = |series: &renoise_core::EstimateSeries| {
        series
            .deltas
            .iter()
            .map(|d| renoise_core::loss_pair(d, &shifts).unwrap().0)
            .sum::<f64>()
    };
    let plain_total: f64 = plain.per_step_series.iter().map(&score).sum();
    let edited_total: f64 = edited.per_step_series.iter().map(&score).sum();
    assert!(
        edited_total < plain_total,
        "regularized deltas should carry less autocorrelation: {edited_total} vs {plain_total}"
    );
}

#[test]
fn deterministic_inversion_is_reproducible() {
    let pred = SeededNonlinear::new(SeededNonlinearParams::new(2, 16, 0.3).unwrap());
    let sched = build_ddim_schedule(&[0.9, 0.7, 0.5]).unwrap();
    let mut rng = RngState::new(6);
    let z0 = sample_gaussian(&mut rng, &[5]).unwrap();
    let cfg = RenoiseConfig::new(2, RenoiseWeights::last_m_uniform(2, 2));
    let mut r1 = RngState::new(8);
    let mut r2 = RngState::new(8);
    let a = renoise_inversion(&z0, &pred, &sched, &cfg, &mut r1, &C).unwrap();
    let b = renoise_inversion(&z0, &pred, &sched, &cfg, &mut r2, &C).unwrap();
    assert_eq!(a.z_terminal().data(), b.z_terminal().data());
    assert_eq!(a.op_count, b.op_count);
}

#[test]
fn denoising_with_recorded_noises_replays_stochastic_inversion() {
    // without correction the replay carries the per-step fixed-point error,
    // which deep renoising makes negligible
    let pred = LinearPredictor::new(LinearPredictorParams::scaled_identity(2, 0.2).unwrap());
    let sched = build_ancestral_schedule(&[0.95, 0.75, 0.55]).unwrap();
    let z0 = Latent::new(vec![2], vec![0.4, -0.6]).unwrap();
    let cfg = RenoiseConfig::new(40, RenoiseWeights::last_only(40));
    let mut rng = RngState::new(15);
    let inv = renoise_inversion(&z0, &pred, &sched, &cfg, &mut rng, &C).unwrap();
    let traj = denoise_trajectory(inv.z_terminal(), inv.noises(), &pred, &sched, &C).unwrap();
    let err = traj.initial().max_abs_diff(&z0).unwrap();
    assert!(err <= 1e-9, "replay error {err}");
}
