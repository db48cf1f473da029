//! The renoising inversion engine.
//!
//! Each inversion step must solve the implicit equation
//! `z = (z_prev - psi * pred(z, t) - rho * eps) / phi` for the next
//! trajectory point. The engine refines the first-order estimate by
//! fixed-point iteration: re-evaluate the predictor at the newest estimate,
//! redo the inverse step from the same `z_prev`, and finally combine the
//! estimates with per-timestep weights. Under a contractive predictor the
//! estimates converge geometrically and the weighted average shares their
//! limit.

use crate::diagnostics::ConvergenceReport;
use crate::error::{CoreError, Result};
use crate::latent::Latent;
use crate::predictor::{ConditioningRef, CountingPredictor, NoisePredictor};
use crate::regularize::{
    enhance_edit, noise_correction_exact, noise_correction_optimize, EditLossConfig, NoiseRecord,
};
use crate::rng::{sample_gaussian, RngState};
use crate::sampler::{denoise_trajectory, forward_noise, inverse_step, Trajectory};
use crate::schedule::{Schedule, StepInfo, StepParams};

/// Averaging weights for one contiguous range of timesteps.
///
/// `weights[j]` is the mass on estimate `z^(j+1)`; the seed estimate `z^(0)`
/// (the previous latent itself) is never eligible.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBand {
    /// Inclusive 1-based timestep bounds.
    pub t_min: usize,
    pub t_max: usize,
    pub weights: Vec<f64>,
}

const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

impl WeightBand {
    pub fn new(t_min: usize, t_max: usize, weights: Vec<f64>) -> Result<Self> {
        if t_min == 0 || t_max < t_min {
            return Err(CoreError::InvalidWeights(format!(
                "band bounds [{t_min}, {t_max}] are invalid"
            )));
        }
        if weights.is_empty() {
            return Err(CoreError::InvalidWeights("empty weight vector".into()));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(CoreError::InvalidWeights(
                "weights must be non-negative and finite".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(CoreError::InvalidWeights(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self {
            t_min,
            t_max,
            weights,
        })
    }
}

/// Piecewise-constant weight policy over the timestep range.
#[derive(Debug, Clone, PartialEq)]
pub struct RenoiseWeights {
    bands: Vec<WeightBand>,
}

impl RenoiseWeights {
    pub fn new(mut bands: Vec<WeightBand>) -> Result<Self> {
        if bands.is_empty() {
            return Err(CoreError::InvalidWeights("no weight bands".into()));
        }
        bands.sort_by_key(|b| b.t_min);
        for pair in bands.windows(2) {
            if pair[1].t_min <= pair[0].t_max {
                return Err(CoreError::InvalidWeights(format!(
                    "bands [{}, {}] and [{}, {}] overlap",
                    pair[0].t_min, pair[0].t_max, pair[1].t_min, pair[1].t_max
                )));
            }
        }
        Ok(Self { bands })
    }

    pub fn bands(&self) -> &[WeightBand] {
        &self.bands
    }

    /// Full mass on the final estimate `z^(K+1)`, over all timesteps.
    pub fn last_only(k: usize) -> Self {
        let mut weights = vec![0.0; k + 1];
        weights[k] = 1.0;
        Self {
            bands: vec![WeightBand {
                t_min: 1,
                t_max: usize::MAX,
                weights,
            }],
        }
    }

    /// Uniform mass on the last `m` estimates, over all timesteps.
    pub fn last_m_uniform(k: usize, m: usize) -> Self {
        Self {
            bands: vec![WeightBand {
                t_min: 1,
                t_max: usize::MAX,
                weights: last_m_weights(k, m),
            }],
        }
    }

    /// The default two-band policy: early timesteps (below the threshold
    /// fraction of T) average the first two estimates, i.e. barely renoise;
    /// later timesteps average the last three.
    pub fn banded_default(k: usize, t_count: usize, threshold_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold_fraction) {
            return Err(CoreError::InvalidWeights(format!(
                "threshold fraction {threshold_fraction} outside [0, 1]"
            )));
        }
        let threshold = (threshold_fraction * t_count as f64).floor() as usize;
        let early = first_m_weights(k, 2);
        let late = last_m_weights(k, 3);
        let bands = if threshold == 0 {
            vec![WeightBand {
                t_min: 1,
                t_max: usize::MAX,
                weights: late,
            }]
        } else if threshold >= t_count {
            vec![WeightBand {
                t_min: 1,
                t_max: usize::MAX,
                weights: early,
            }]
        } else {
            vec![
                WeightBand {
                    t_min: 1,
                    t_max: threshold,
                    weights: early,
                },
                WeightBand {
                    t_min: threshold + 1,
                    t_max: usize::MAX,
                    weights: late,
                },
            ]
        };
        Ok(Self { bands })
    }

    fn lookup(&self, t: usize) -> Option<&WeightBand> {
        self.bands.iter().find(|b| t >= b.t_min && t <= b.t_max)
    }

    /// Weight vector for timestep `t`, adjusted to exactly `k + 1` estimates:
    /// longer vectors are truncated and renormalized, shorter ones padded
    /// with zeros.
    pub fn effective(&self, t: usize, k: usize) -> Result<Vec<f64>> {
        let band = self
            .lookup(t)
            .ok_or(CoreError::UncoveredTimestep { t })?;
        let mut w: Vec<f64> = band.weights.iter().copied().take(k + 1).collect();
        w.resize(k + 1, 0.0);
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            return Err(CoreError::InvalidWeights(format!(
                "weights for timestep {t} truncate to zero mass at K={k}"
            )));
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            for v in &mut w {
                *v /= sum;
            }
        }
        Ok(w)
    }
}

fn first_m_weights(k: usize, m: usize) -> Vec<f64> {
    let len = k + 1;
    let m = m.min(len);
    let mut w = vec![0.0; len];
    for v in w.iter_mut().take(m) {
        *v = 1.0 / m as f64;
    }
    w
}

fn last_m_weights(k: usize, m: usize) -> Vec<f64> {
    let len = k + 1;
    let m = m.min(len);
    let mut w = vec![0.0; len];
    for v in w.iter_mut().skip(len - m) {
        *v = 1.0 / m as f64;
    }
    w
}

/// Noise-correction mode for stochastic steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseCorrection {
    Off,
    /// Replace the injected noise with the closed-form solution.
    Exact,
    /// Relax the injected noise toward the closed-form solution.
    Optimize { eta: f64, iters: usize },
}

/// Engine configuration for one inversion.
#[derive(Debug, Clone)]
pub struct RenoiseConfig {
    /// Number of renoising iterations; K = 0 degrades exactly to the plain
    /// first-order reversal.
    pub k: usize,
    pub weights: RenoiseWeights,
    pub edit_loss: Option<EditLossConfig>,
    pub noise_correction: NoiseCorrection,
    /// Cap on estimates retained per recorded series.
    pub max_estimate_history: usize,
}

impl RenoiseConfig {
    pub fn new(k: usize, weights: RenoiseWeights) -> Self {
        Self {
            k,
            weights,
            edit_loss: None,
            noise_correction: NoiseCorrection::Off,
            max_estimate_history: usize::MAX,
        }
    }

    /// Plain-reversal baseline: K = 0, no extras.
    pub fn baseline() -> Self {
        Self::new(0, RenoiseWeights::last_only(0))
    }

    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        if let NoiseCorrection::Optimize { eta, iters } = self.noise_correction {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(CoreError::InvalidEta(eta));
            }
            if iters == 0 {
                return Err(CoreError::InvalidConfig(
                    "noise correction iters must be >= 1".into(),
                ));
            }
        }
        if self.noise_correction != NoiseCorrection::Off && !sched.has_stochastic_step() {
            return Err(CoreError::InvalidConfig(
                "noise correction requires a schedule with rho > 0 somewhere".into(),
            ));
        }
        if let Some(edit) = &self.edit_loss {
            edit.validate()?;
        }
        Ok(())
    }
}

/// All estimates and predictor outputs of one inversion step.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSeries {
    /// `z^(1) ..= z^(K+1)`, possibly truncated to the newest entries.
    pub estimates: Vec<Latent>,
    /// The predictor outputs that produced each estimate.
    pub deltas: Vec<Latent>,
}

/// Output of [`renoise_step`].
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// The weighted estimate (or the last estimate if divergence was
    /// detected).
    pub z_next: Latent,
    pub series: EstimateSeries,
    /// Norms of consecutive estimate differences.
    pub delta_norms: Vec<f64>,
    pub diverged: bool,
}

/// One full renoising step from `z_prev` across `info`.
///
/// Runs K+1 inverse-step refinements, optionally regularizing each predictor
/// output whose pending weight is positive, then averages the estimates with
/// the band weights for this timestep. Three consecutive growths of the
/// estimate-difference norm raise the divergence flag, in which case the last
/// estimate is returned instead of the average.
#[allow(clippy::too_many_arguments)]
pub fn renoise_step(
    z_prev: &Latent,
    info: &StepInfo,
    predictor: &dyn NoisePredictor,
    p: &StepParams,
    eps: Option<&Latent>,
    cfg: &RenoiseConfig,
    reference_delta: Option<&Latent>,
    c: &ConditioningRef,
) -> Result<StepOutcome> {
    if p.rho > 0.0 && eps.is_none() {
        return Err(CoreError::MissingNoise);
    }
    let weights = cfg.weights.effective(info.index, cfg.k)?;

    let mut estimates: Vec<Latent> = Vec::with_capacity(cfg.k + 1);
    let mut deltas: Vec<Latent> = Vec::with_capacity(cfg.k + 1);
    let mut current = z_prev.clone();
    for (iter, &pending_weight) in weights.iter().enumerate() {
        // the first estimate evaluates at the source time, exactly as the
        // plain reversal does; refinements evaluate at the target time the
        // matching denoise step will use
        let t_eval = if iter == 0 { info.t_src } else { info.t_tgt };
        let mut delta = predictor.evaluate(&current, t_eval, c)?;
        if let Some(edit) = &cfg.edit_loss {
            if edit.is_active() && pending_weight > 0.0 {
                delta = enhance_edit(&delta, edit, reference_delta)?;
            }
        }
        let next = inverse_step(z_prev, &delta, eps, p)?;
        estimates.push(next.clone());
        deltas.push(delta);
        current = next;
    }

    let mut delta_norms = Vec::with_capacity(cfg.k);
    for pair in estimates.windows(2) {
        delta_norms.push(pair[1].sub(&pair[0])?.l2_norm());
    }
    let mut growth_run = 0usize;
    let mut diverged = false;
    for pair in delta_norms.windows(2) {
        if pair[1] > pair[0] {
            growth_run += 1;
            if growth_run >= 3 {
                diverged = true;
                break;
            }
        } else {
            growth_run = 0;
        }
    }

    let z_next = if diverged {
        estimates.last().expect("K+1 >= 1 estimates").clone()
    } else {
        weighted_average(&estimates, &weights)?
    };

    let mut series = EstimateSeries { estimates, deltas };
    truncate_series(&mut series, cfg.max_estimate_history);
    Ok(StepOutcome {
        z_next,
        series,
        delta_norms,
        diverged,
    })
}

/// Convex combination of the estimates. A single unit weight short-circuits
/// to a clone so degenerate configurations stay bit-identical to the
/// undecorated estimate.
fn weighted_average(estimates: &[Latent], weights: &[f64]) -> Result<Latent> {
    debug_assert_eq!(estimates.len(), weights.len());
    let mut sole = None;
    for (i, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            if w == 1.0 && sole.is_none() {
                sole = Some(i);
            } else {
                sole = None;
                break;
            }
        }
    }
    if let Some(i) = sole {
        return Ok(estimates[i].clone());
    }
    let mut acc: Option<Latent> = None;
    for (z, &w) in estimates.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        match &mut acc {
            None => acc = Some(z.scale(w)),
            Some(a) => a.axpy(z, w)?,
        }
    }
    acc.ok_or_else(|| CoreError::InvalidWeights("all weights zero".into()))
}

fn truncate_series(series: &mut EstimateSeries, keep: usize) {
    if series.estimates.len() > keep {
        let drop = series.estimates.len() - keep;
        series.estimates.drain(..drop);
        series.deltas.drain(..drop);
    }
}

/// Result of a full inversion.
#[derive(Debug, Clone)]
pub struct InversionResult {
    /// Averaged latents `z_0 ..= z_T` and the recorded injected noises
    /// (post-correction values).
    pub trajectory: Trajectory,
    pub per_step_series: Vec<EstimateSeries>,
    /// Exact number of predictor evaluations consumed.
    pub op_count: u64,
    pub report: ConvergenceReport,
}

impl InversionResult {
    pub fn z_terminal(&self) -> &Latent {
        self.trajectory.terminal()
    }

    pub fn noises(&self) -> &[Option<Latent>] {
        &self.trajectory.noises
    }
}

/// Runs the full inversion `z_0 -> z_T`.
///
/// For every step: sample the injected noise if the step is stochastic,
/// renoise, then apply the configured noise correction to the recorded
/// noise. The pre-correction noise stays in effect inside the renoising
/// loop; the corrected value is what the result carries.
pub fn renoise_inversion(
    z0: &Latent,
    predictor: &dyn NoisePredictor,
    sched: &Schedule,
    cfg: &RenoiseConfig,
    rng: &mut RngState,
    c: &ConditioningRef,
) -> Result<InversionResult> {
    if sched.is_empty() {
        return Err(CoreError::InvalidSchedule("empty schedule".into()));
    }
    cfg.validate(sched)?;
    let counting = CountingPredictor::new(predictor);
    let shape = z0.shape().to_vec();
    let t_count = sched.len();

    let mut latents = Vec::with_capacity(t_count + 1);
    latents.push(z0.clone());
    let mut noises: Vec<Option<Latent>> = Vec::with_capacity(t_count);
    let mut per_step_series = Vec::with_capacity(t_count);
    let mut delta_norms = Vec::with_capacity(t_count);
    let mut divergence = Vec::with_capacity(t_count);
    let mut corrections: Vec<Option<NoiseRecord>> = Vec::with_capacity(t_count);

    let mut z = z0.clone();
    for i in 0..t_count {
        let p = sched.step(i);
        let info = sched.step_info(i);

        let eps = if p.rho > 0.0 {
            Some(sample_gaussian(rng, &shape)?)
        } else {
            None
        };

        // reference prediction at a freshly noised input, for the patch-KL
        // regularizer
        let reference_delta = match &cfg.edit_loss {
            Some(edit) if edit.is_active() && edit.needs_reference() => {
                let fresh = sample_gaussian(rng, &shape)?;
                let z_t_prime = forward_noise(z0, info.index, sched, &fresh)?;
                Some(counting.evaluate(&z_t_prime, info.t_tgt, c)?)
            }
            _ => None,
        };

        let outcome = renoise_step(
            &z,
            &info,
            &counting,
            &p,
            eps.as_ref(),
            cfg,
            reference_delta.as_ref(),
            c,
        )?;
        if !outcome.z_next.is_finite() {
            return Err(CoreError::NonFinite { step: info.index });
        }

        let mut recorded_eps = eps.clone();
        let mut correction = None;
        if p.rho > 0.0 && cfg.noise_correction != NoiseCorrection::Off {
            let delta_at_avg = counting.evaluate(&outcome.z_next, info.t_tgt, c)?;
            let target = noise_correction_exact(&z, &outcome.z_next, &delta_at_avg, &p)?;
            let eps0 = eps.as_ref().expect("stochastic step sampled eps");
            let record = match cfg.noise_correction {
                NoiseCorrection::Exact => {
                    let residual_before = eps0.sub(&target)?.l2_norm();
                    NoiseRecord {
                        eps: target,
                        corrected: true,
                        residual_before,
                        residual_after: 0.0,
                    }
                }
                NoiseCorrection::Optimize { eta, iters } => {
                    noise_correction_optimize(eps0, &target, eta, iters)?
                }
                NoiseCorrection::Off => unreachable!(),
            };
            recorded_eps = Some(record.eps.clone());
            correction = Some(record);
        }

        latents.push(outcome.z_next.clone());
        noises.push(recorded_eps);
        per_step_series.push(outcome.series);
        delta_norms.push(outcome.delta_norms);
        divergence.push(outcome.diverged);
        corrections.push(correction);
        z = outcome.z_next;
    }

    Ok(InversionResult {
        trajectory: Trajectory::new(latents, noises)?,
        per_step_series,
        op_count: counting.evaluations(),
        report: ConvergenceReport {
            delta_norms,
            jacobian_norms: Vec::new(),
            divergence,
            corrections,
        },
    })
}

// --- operation-budget sweep ----------------------------------------------------

/// A family of schedules parameterized by step count, so inversion and
/// denoising legs of different lengths ride the same underlying process.
#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleFamily {
    /// Uniform Euler steps over `[start_time, start_time + total_time]`.
    EulerUniform { start_time: f64, total_time: f64 },
    /// DDIM over the cosine cumulative-signal profile.
    DdimCosine,
}

impl ScheduleFamily {
    pub fn build(&self, steps: usize) -> Result<Schedule> {
        match self {
            ScheduleFamily::EulerUniform {
                start_time,
                total_time,
            } => crate::schedule::build_euler_ode_schedule_uniform(*start_time, *total_time, steps),
            ScheduleFamily::DdimCosine => {
                crate::schedule::build_ddim_schedule(&crate::schedule::cosine_alpha_bar(steps))
            }
        }
    }
}

/// Weight policy applied uniformly across sweep rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightPolicy {
    /// The default two-band policy with the given threshold fraction.
    Banded { threshold_fraction: f64 },
    /// Full mass on the final estimate.
    LastOnly,
}

impl WeightPolicy {
    pub fn build(&self, k: usize, t_count: usize) -> Result<RenoiseWeights> {
        match self {
            WeightPolicy::Banded { threshold_fraction } => {
                RenoiseWeights::banded_default(k, t_count, *threshold_fraction)
            }
            WeightPolicy::LastOnly => Ok(RenoiseWeights::last_only(k)),
        }
    }
}

/// One row of the budget table.
#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub inversion_steps: usize,
    pub denoise_steps: usize,
    pub k: usize,
    pub inversion_ops: u64,
    pub denoise_ops: u64,
    /// Total predictor evaluations: inversion + denoising.
    pub op_count: u64,
    pub metrics: crate::diagnostics::ReconstructionMetrics,
}

/// Inverts and reconstructs `z0` once per `(inversion steps, denoise steps,
/// K)` row under a shared deterministic schedule family, reporting the exact
/// predictor-evaluation budget next to the reconstruction quality.
pub fn operation_budget_sweep(
    z0: &Latent,
    predictor: &dyn NoisePredictor,
    family: &ScheduleFamily,
    policy: WeightPolicy,
    rows: &[(usize, usize, usize)],
    c: &ConditioningRef,
) -> Result<Vec<SweepRecord>> {
    let mut out = Vec::with_capacity(rows.len());
    for &(inv_steps, den_steps, k) in rows {
        let inv_sched = family.build(inv_steps)?;
        let den_sched = family.build(den_steps)?;
        if inv_sched.has_stochastic_step() || den_sched.has_stochastic_step() {
            return Err(CoreError::InvalidConfig(
                "budget sweep requires a deterministic schedule family".into(),
            ));
        }
        let cfg = RenoiseConfig::new(k, policy.build(k, inv_steps)?);
        let mut rng = RngState::new(0);
        let inversion = renoise_inversion(z0, predictor, &inv_sched, &cfg, &mut rng, c)?;

        let counting = CountingPredictor::new(predictor);
        let reconstruction = denoise_trajectory(
            inversion.z_terminal(),
            &vec![None; den_steps],
            &counting,
            &den_sched,
            c,
        )?;
        let denoise_ops = counting.evaluations();
        let metrics =
            crate::diagnostics::reconstruction_metrics(z0, reconstruction.initial(), 1.0)?;
        out.push(SweepRecord {
            inversion_steps: inv_steps,
            denoise_steps: den_steps,
            k,
            inversion_ops: inversion.op_count,
            denoise_ops,
            op_count: inversion.op_count + denoise_ops,
            metrics,
        });
    }
    Ok(out)
}
