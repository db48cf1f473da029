//! Step primitives and the denoising loop.
//!
//! The sampler family is the affine update
//! `z_prev = phi * z + psi * delta + rho * eps`, and its algebraic inverse
//! `z = (z_prev - psi * delta - rho * eps) / phi`. Predicted noise `delta`
//! is always passed in explicitly so callers control (and can count) every
//! predictor evaluation.

use crate::error::{CoreError, Result};
use crate::latent::Latent;
use crate::predictor::{ConditioningRef, NoisePredictor};
use crate::schedule::{Schedule, StepParams};
use std::io::{Read, Write};

/// One denoising step: `phi * z_t + psi * delta + rho * eps`.
///
/// `eps` is required when `rho > 0` and ignored otherwise.
pub fn denoise_step(
    z_t: &Latent,
    delta: &Latent,
    eps: Option<&Latent>,
    p: &StepParams,
) -> Result<Latent> {
    z_t.same_shape(delta)?;
    let mut out = z_t.scale(p.phi);
    out.axpy(delta, p.psi)?;
    if p.rho > 0.0 {
        let eps = eps.ok_or(CoreError::MissingNoise)?;
        out.axpy(eps, p.rho)?;
    }
    Ok(out)
}

/// Exact algebraic inverse of [`denoise_step`] for the same `delta` and `eps`:
/// `(z_prev - psi * delta - rho * eps) / phi`.
pub fn inverse_step(
    z_prev: &Latent,
    delta: &Latent,
    eps: Option<&Latent>,
    p: &StepParams,
) -> Result<Latent> {
    if p.phi == 0.0 {
        return Err(CoreError::ZeroPhi);
    }
    z_prev.same_shape(delta)?;
    let mut out = z_prev.add_scaled(delta, -p.psi)?;
    if p.rho > 0.0 {
        let eps = eps.ok_or(CoreError::MissingNoise)?;
        out.axpy(eps, -p.rho)?;
    }
    Ok(out.scale(1.0 / p.phi))
}

/// First-order approximate inverse: evaluates the predictor at the previous
/// latent instead of the unknown target. This is the baseline a plain
/// sampler reversal performs at every step.
pub fn approx_inverse_step(
    z_prev: &Latent,
    predictor: &dyn NoisePredictor,
    t: f64,
    c: &ConditioningRef,
    eps: Option<&Latent>,
    p: &StepParams,
) -> Result<Latent> {
    let delta = predictor.evaluate(z_prev, t, c)?;
    inverse_step(z_prev, &delta, eps, p)
}

/// Forward noising to level `t` (1-based): `alpha_t * z0 + sigma_t * eps`.
pub fn forward_noise(z0: &Latent, t: usize, sched: &Schedule, eps: &Latent) -> Result<Latent> {
    if t == 0 || t > sched.len() {
        return Err(CoreError::InvalidSchedule(format!(
            "noise level {t} outside 1..={}",
            sched.len()
        )));
    }
    z0.same_shape(eps)?;
    let a = sched.alpha()[t - 1];
    let s = sched.sigma()[t - 1];
    let mut out = z0.scale(a);
    out.axpy(eps, s)?;
    Ok(out)
}

/// A full latent trajectory `z_0 ..= z_T` with the per-step injected noises.
/// Noise slots for deterministic steps are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<Latent>,
    pub noises: Vec<Option<Latent>>,
}

impl Trajectory {
    pub fn new(latents: Vec<Latent>, noises: Vec<Option<Latent>>) -> Result<Self> {
        if latents.is_empty() || latents.len() != noises.len() + 1 {
            return Err(CoreError::InvalidConfig(format!(
                "trajectory needs T+1 latents and T noises, got {} and {}",
                latents.len(),
                noises.len()
            )));
        }
        let shape = latents[0].shape().to_vec();
        for l in &latents {
            if l.shape() != shape.as_slice() {
                return Err(CoreError::ShapeMismatch {
                    left: shape,
                    right: l.shape().to_vec(),
                });
            }
        }
        for n in noises.iter().flatten() {
            if n.shape() != shape.as_slice() {
                return Err(CoreError::ShapeMismatch {
                    left: shape,
                    right: n.shape().to_vec(),
                });
            }
        }
        Ok(Self { latents, noises })
    }

    pub fn steps(&self) -> usize {
        self.noises.len()
    }

    pub fn initial(&self) -> &Latent {
        &self.latents[0]
    }

    pub fn terminal(&self) -> &Latent {
        self.latents.last().expect("non-empty by construction")
    }
}

/// Runs the denoising loop from `z_T` down to `z_0`.
///
/// `noises[i]` is consumed by storage step `i`; it must be present wherever
/// `rho > 0` and is ignored on deterministic steps, so a deterministic
/// schedule never depends on the supplied list.
pub fn denoise_trajectory(
    z_terminal: &Latent,
    noises: &[Option<Latent>],
    predictor: &dyn NoisePredictor,
    sched: &Schedule,
    c: &ConditioningRef,
) -> Result<Trajectory> {
    let t_count = sched.len();
    if noises.len() != t_count {
        return Err(CoreError::InvalidConfig(format!(
            "expected {t_count} noise slots, got {}",
            noises.len()
        )));
    }
    let mut latents = vec![Latent::zeros(z_terminal.shape().to_vec())?; t_count + 1];
    latents[t_count] = z_terminal.clone();
    for i in (0..t_count).rev() {
        let p = sched.step(i);
        let info = sched.step_info(i);
        let z_cur = &latents[i + 1];
        let delta = predictor.evaluate(z_cur, info.t_tgt, c)?;
        let eps = noises[i].as_ref();
        if p.rho > 0.0 && eps.is_none() {
            return Err(CoreError::MissingNoise);
        }
        let z_prev = denoise_step(z_cur, &delta, eps, &p)?;
        if !z_prev.is_finite() {
            return Err(CoreError::NonFinite { step: i + 1 });
        }
        latents[i] = z_prev;
    }
    Trajectory::new(latents, noises.to_vec())
}

// --- trajectory file format ---------------------------------------------------

const TRAJECTORY_MAGIC: &[u8; 4] = b"RNZT";
const TRAJECTORY_VERSION: u32 = 1;

impl Trajectory {
    /// Writes the binary trajectory format: magic `RNZT`, version, latent
    /// rank and dims, T, then all latents and noises as little-endian f64 in
    /// index order. Absent noises are written as zero fields.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let shape = self.latents[0].shape();
        w.write_all(TRAJECTORY_MAGIC)?;
        w.write_all(&TRAJECTORY_VERSION.to_le_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.steps() as u32).to_le_bytes())?;
        for l in &self.latents {
            for v in l.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let numel: usize = shape.iter().product();
        let zero = vec![0u8; 8];
        for n in &self.noises {
            match n {
                Some(l) => {
                    for v in l.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                None => {
                    for _ in 0..numel {
                        w.write_all(&zero)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads the binary trajectory format. Noise slots are restored as
    /// `Some` wherever the corresponding step of `rho_hint` is stochastic;
    /// with no hint every slot is `Some`.
    pub fn read_from(r: &mut impl Read, rho_hint: Option<&[f64]>) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TRAJECTORY_MAGIC {
            return Err(CoreError::Parse("bad trajectory magic".into()));
        }
        let version = read_u32(r)?;
        if version != TRAJECTORY_VERSION {
            return Err(CoreError::Parse(format!(
                "unsupported trajectory version {version}"
            )));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(CoreError::Parse(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let t_count = read_u32(r)? as usize;
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(CoreError::Parse("zero-sized latent".into()));
        }
        let mut latents = Vec::with_capacity(t_count + 1);
        for _ in 0..=t_count {
            latents.push(Latent::new(shape.clone(), read_f64s(r, numel)?)?);
        }
        let mut noises = Vec::with_capacity(t_count);
        for i in 0..t_count {
            let field = Latent::new(shape.clone(), read_f64s(r, numel)?)?;
            let keep = rho_hint.map(|rho| rho.get(i).copied().unwrap_or(0.0) > 0.0);
            noises.push(match keep {
                Some(false) => None,
                _ => Some(field),
            });
        }
        Trajectory::new(latents, noises)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{
        LinearPredictor, LinearPredictorParams, ToyShiftedGaussian, ToyShiftedGaussianParams,
    };
    use crate::schedule::{build_ddim_schedule, build_euler_ode_schedule};

    const C: ConditioningRef = ConditioningRef::Unconditioned;

    fn params(phi: f64, psi: f64, rho: f64) -> StepParams {
        StepParams::new(phi, psi, rho).unwrap()
    }

    #[test]
    fn denoise_step_formula() {
        let z = Latent::new(vec![2], vec![1.0, 2.0]).unwrap();
        let d = Latent::new(vec![2], vec![0.5, -0.5]).unwrap();
        let out = denoise_step(&z, &d, None, &params(0.9, 0.1, 0.0)).unwrap();
        assert!((out.data()[0] - 0.95).abs() < 1e-15);
        assert!((out.data()[1] - 1.75).abs() < 1e-15);

        let ident = denoise_step(&z, &d, None, &params(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(ident.data(), z.data());

        let z0 = Latent::scalar(0.0);
        let d0 = Latent::scalar(0.0);
        let e = Latent::scalar(1.0);
        let out = denoise_step(&z0, &d0, Some(&e), &params(1.0, 0.2, 0.1)).unwrap();
        assert!((out.data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn denoise_step_requires_eps_when_stochastic() {
        let z = Latent::scalar(1.0);
        let d = Latent::scalar(0.0);
        assert!(matches!(
            denoise_step(&z, &d, None, &params(1.0, 0.0, 0.5)),
            Err(CoreError::MissingNoise)
        ));
    }

    #[test]
    fn inverse_step_formula() {
        let z_prev = Latent::new(vec![2], vec![0.95, 1.75]).unwrap();
        let d = Latent::new(vec![2], vec![0.5, -0.5]).unwrap();
        let out = inverse_step(&z_prev, &d, None, &params(0.9, 0.1, 0.0)).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!((out.data()[1] - 2.0).abs() < 1e-15);

        let z = Latent::scalar(3.0);
        let zero = Latent::scalar(0.0);
        let halved = inverse_step(&z, &zero, None, &params(2.0, 0.7, 0.0)).unwrap();
        assert_eq!(halved.data(), &[1.5]);
    }

    #[test]
    fn denoise_inverts_inverse_round_trip() {
        let mut rng = crate::rng::RngState::new(17);
        for case in 0..50 {
            let z = crate::rng::sample_gaussian(&mut rng, &[5]).unwrap();
            let d = crate::rng::sample_gaussian(&mut rng, &[5]).unwrap();
            let e = crate::rng::sample_gaussian(&mut rng, &[5]).unwrap();
            let phi = 0.5 + 0.1 * (case as f64 % 7.0);
            let p = params(phi, -0.4, 0.3);
            let z_t = inverse_step(&z, &d, Some(&e), &p).unwrap();
            let back = denoise_step(&z_t, &d, Some(&e), &p).unwrap();
            let err = back.max_abs_diff(&z).unwrap();
            assert!(err <= 1e-13 * (1.0 + z.linf_norm()), "err {err}");
        }
    }

    #[test]
    fn approx_inverse_toy_euler_first_estimate() {
        // one Euler step of size 0.1 from z = 2.0 at t = 0: the first
        // estimate moves along the field at the source time, 2.0 - 0.1 * 1
        let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(1.0).unwrap());
        let sched = build_euler_ode_schedule(0.0, &[0.1]).unwrap();
        let z_prev = Latent::scalar(2.0);
        let info = sched.step_info(0);
        let z1 = approx_inverse_step(&z_prev, &toy, info.t_src, &C, None, &sched.step(0)).unwrap();
        assert!((z1.data()[0] - 1.9).abs() < 1e-15, "{}", z1.data()[0]);
    }

    #[test]
    fn approx_inverse_zero_predictor_identity() {
        let zero = LinearPredictor::new(LinearPredictorParams::scaled_identity(1, 0.0).unwrap());
        let z_prev = Latent::scalar(4.0);
        let out = approx_inverse_step(&z_prev, &zero, 0.0, &C, None, &params(1.0, 0.37, 0.0)).unwrap();
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn approx_inverse_linear_contraction_value() {
        let p = LinearPredictor::new(LinearPredictorParams::scaled_identity(1, 0.5).unwrap());
        let z_prev = Latent::scalar(1.0);
        let out = approx_inverse_step(&z_prev, &p, 0.0, &C, None, &params(1.0, 0.5, 0.0)).unwrap();
        assert_eq!(out.data(), &[0.75]);
    }

    #[test]
    fn forward_noise_formula() {
        let sched = build_ddim_schedule(&[0.64]).unwrap();
        // alpha = 0.8, sigma = 0.6
        let z0 = Latent::scalar(1.0);
        let eps = Latent::scalar(1.0);
        let out = forward_noise(&z0, 1, &sched, &eps).unwrap();
        assert!((out.data()[0] - 1.4).abs() < 1e-15);

        let ident = build_ddim_schedule(&[1.0]).unwrap();
        let same = forward_noise(&z0, 1, &ident, &eps).unwrap();
        assert_eq!(same.data(), &[1.0]);
    }

    #[test]
    fn deterministic_trajectory_ignores_noises() {
        let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(1.0).unwrap());
        let sched = build_euler_ode_schedule(0.0, &[0.1, 0.1]).unwrap();
        let z_t = Latent::scalar(1.7);
        let none = vec![None, None];
        let junk = vec![Some(Latent::scalar(5.0)), Some(Latent::scalar(-5.0))];
        let a = denoise_trajectory(&z_t, &none, &toy, &sched, &C).unwrap();
        let b = denoise_trajectory(&z_t, &junk, &toy, &sched, &C).unwrap();
        assert_eq!(a.latents, b.latents);
    }

    #[test]
    fn identity_steps_leave_terminal_unchanged() {
        let zero = LinearPredictor::new(LinearPredictorParams::scaled_identity(1, 0.0).unwrap());
        let sched = build_ddim_schedule(&[1.0]).unwrap();
        let z_t = Latent::scalar(2.5);
        let traj = denoise_trajectory(&z_t, &[None], &zero, &sched, &C).unwrap();
        assert_eq!(traj.latents[0].data(), &[2.5]);
        assert_eq!(traj.latents[1].data(), &[2.5]);
    }

    #[test]
    fn denoising_linear_fixed_point_recovers_origin() {
        // z* = 0.8 satisfies (phi + psi * m) z* = 1.0 for phi=1, psi=0.5,
        // m=0.5; denoising it must land on 1.0
        let p = LinearPredictor::new(LinearPredictorParams::scaled_identity(1, 0.5).unwrap());
        let z_star = Latent::scalar(0.8);
        let d = p.evaluate(&z_star, 0.0, &C).unwrap();
        let back = denoise_step(&z_star, &d, None, &params(1.0, 0.5, 0.0)).unwrap();
        assert!((back.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trajectory_file_round_trip() {
        let latents = vec![
            Latent::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Latent::new(vec![2, 2], vec![0.5, 0.25, -1.0, 0.0]).unwrap(),
            Latent::new(vec![2, 2], vec![9.0, 8.0, 7.0, 6.0]).unwrap(),
        ];
        let noises = vec![None, Some(Latent::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap())];
        let traj = Trajectory::new(latents, noises).unwrap();
        let mut buf = Vec::new();
        traj.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"RNZT");
        let back = Trajectory::read_from(&mut buf.as_slice(), Some(&[0.0, 0.7])).unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn trajectory_file_rejects_bad_magic() {
        let mut buf = b"XXXX".to_vec();
        buf.extend_from_slice(&[0u8; 16]);
        assert!(Trajectory::read_from(&mut buf.as_slice(), None).is_err());
    }
}
