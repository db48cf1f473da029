use renoise_core::{
    build_ddim_schedule, renoise_inversion, sample_gaussian, ConditioningRef, RenoiseConfig,
    RenoiseWeights, RngState, SeededNonlinear, SeededNonlinearParams,
};

fn main() -> renoise_core::Result<()> {
    let sched = build_ddim_schedule(&[0.9, 0.6, 0.3])?;
    let predictor = SeededNonlinear::new(SeededNonlinearParams::new(7, 24, 0.5)?);
    let cfg = RenoiseConfig::new(3, RenoiseWeights::banded_default(3, sched.len(), 0.25)?);
    let mut rng = RngState::new(1);
    let z0 = sample_gaussian(&mut rng, &[8, 8])?;
    let result = renoise_inversion(&z0, &predictor, &sched, &cfg, &mut rng,
                                   &ConditioningRef::Unconditioned)?;
    println!("terminal latent norm {}, {} predictor calls",
             result.z_terminal().l2_norm(), result.op_count);
    Ok(())
}
