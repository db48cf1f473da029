//! Convergence measurements and reconstruction metrics.
//!
//! The contraction factor of the renoising map at a point is the scaled
//! Jacobian norm `|psi/phi| * ||d(pred)/dz||_2`; wherever it sits below 1 the
//! estimate differences decay geometrically. This module estimates it by
//! power iteration on the Gram operator (built from JVP/VJP calls only, so
//! black-box predictors work), tracks the estimate-difference norms the
//! decay shows up in, and scores reconstructions with L2/PSNR.

use crate::error::{CoreError, Result};
use crate::latent::Latent;
use crate::predictor::{default_fd_epsilon, ConditioningRef, NoisePredictor};
use crate::regularize::NoiseRecord;
use crate::renoise::{EstimateSeries, InversionResult};
use crate::rng::{sample_gaussian, RngState};
use crate::schedule::{Schedule, StepParams};

/// Per-inversion convergence record.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceReport {
    /// Per step: norms `||z^(k+1) - z^(k)||` for k = 1..=K.
    pub delta_norms: Vec<Vec<f64>>,
    /// Per step: scaled Jacobian norm estimates at `z^(k)` for k = 1..=K.
    /// Empty until a profile pass fills it.
    pub jacobian_norms: Vec<Vec<f64>>,
    /// Per step: whether the divergence guard fired.
    pub divergence: Vec<bool>,
    /// Per step: the noise-correction record, when one ran.
    pub corrections: Vec<Option<NoiseRecord>>,
}

/// Reconstruction quality of a single latent pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionMetrics {
    /// Mean squared error.
    pub l2: f64,
    /// 10 * log10(peak^2 / l2); +inf when l2 = 0.
    pub psnr: f64,
    pub peak: f64,
}

/// L2 norms of consecutive estimate differences.
pub fn consecutive_diffs(series: &EstimateSeries) -> Result<Vec<f64>> {
    if series.estimates.len() < 2 {
        return Err(CoreError::InvalidConfig(
            "series needs at least 2 estimates".into(),
        ));
    }
    series
        .estimates
        .windows(2)
        .map(|pair| Ok(pair[1].sub(&pair[0])?.l2_norm()))
        .collect()
}

/// Estimates `|psi/phi| * sigma_max(d(pred)/dz)` at `z` by power iteration
/// on the Gram operator `v -> J^T (J v)`.
///
/// Works for arbitrary (non-symmetric) Jacobians because it converges to the
/// top singular value rather than the spectral radius. A zero start vector
/// is resampled; a zero Gram image means the Jacobian vanishes and the norm
/// is exactly 0.
pub fn scaled_jacobian_norm(
    predictor: &dyn NoisePredictor,
    z: &Latent,
    t: f64,
    c: &ConditioningRef,
    p: &StepParams,
    power_iters: usize,
    rng: &mut RngState,
) -> Result<f64> {
    if power_iters == 0 {
        return Err(CoreError::InvalidConfig("power_iters must be >= 1".into()));
    }
    let fd_eps = default_fd_epsilon(z);
    let mut v = loop {
        let candidate = sample_gaussian(rng, z.shape())?;
        let norm = candidate.l2_norm();
        if norm > 0.0 {
            break candidate.scale(1.0 / norm);
        }
    };
    let mut sigma_sq = 0.0;
    for _ in 0..power_iters {
        let jv = predictor.jvp(z, t, c, &v, fd_eps)?;
        let gram_v = predictor.vjp(z, t, c, &jv, fd_eps)?;
        sigma_sq = v.dot(&gram_v)?;
        let norm = gram_v.l2_norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = gram_v.scale(1.0 / norm);
    }
    Ok(p.scale_ratio() * sigma_sq.max(0.0).sqrt())
}

/// Fills a per-(t, k) scaled-Jacobian-norm table for a finished inversion,
/// evaluating at every recorded estimate `z^(k)`, k = 1..=K.
pub fn estimate_jacobian_profile(
    predictor: &dyn NoisePredictor,
    result: &InversionResult,
    sched: &Schedule,
    c: &ConditioningRef,
    power_iters: usize,
    rng: &mut RngState,
) -> Result<Vec<Vec<f64>>> {
    let mut profile = Vec::with_capacity(result.per_step_series.len());
    for (i, series) in result.per_step_series.iter().enumerate() {
        let k_count = result.report.delta_norms[i].len();
        if series.estimates.len() != k_count + 1 {
            return Err(CoreError::InvalidConfig(
                "estimate history was truncated; cannot align jacobian profile".into(),
            ));
        }
        let info = sched.step_info(i);
        let p = sched.step(i);
        let mut row = Vec::with_capacity(k_count);
        for estimate in series.estimates.iter().take(k_count) {
            row.push(scaled_jacobian_norm(
                predictor,
                estimate,
                info.t_tgt,
                c,
                &p,
                power_iters,
                rng,
            )?);
        }
        profile.push(row);
    }
    Ok(profile)
}

/// Scaled-Jacobian-norm profile averaged over several seeded inversions,
/// mirroring how the per-(t, k) figure aggregates over a batch of inputs.
///
/// Runs `samples` inversions of seeded Gaussian latents of `shape` (seeds
/// `base_seed..base_seed + samples`), profiles each, and averages entrywise.
/// All sampled runs must share the (t, k) grid, which holds whenever the
/// engine config keeps the full estimate history.
#[allow(clippy::too_many_arguments)]
pub fn averaged_jacobian_profile(
    predictor: &dyn NoisePredictor,
    sched: &Schedule,
    cfg: &crate::renoise::RenoiseConfig,
    c: &ConditioningRef,
    power_iters: usize,
    samples: usize,
    base_seed: u64,
    shape: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if samples == 0 {
        return Err(CoreError::InvalidConfig("samples must be >= 1".into()));
    }
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for s in 0..samples {
        let mut rng = RngState::new(base_seed.wrapping_add(s as u64));
        let z0 = sample_gaussian(&mut rng, shape)?;
        let result = crate::renoise::renoise_inversion(&z0, predictor, sched, cfg, &mut rng, c)?;
        let profile = estimate_jacobian_profile(predictor, &result, sched, c, power_iters, &mut rng)?;
        match &mut acc {
            None => acc = Some(profile),
            Some(acc) => {
                for (row, p_row) in acc.iter_mut().zip(&profile) {
                    for (v, p) in row.iter_mut().zip(p_row) {
                        *v += p;
                    }
                }
            }
        }
    }
    let mut acc = acc.expect("samples >= 1");
    let inv = 1.0 / samples as f64;
    for row in &mut acc {
        for v in row {
            *v *= inv;
        }
    }
    Ok(acc)
}

/// L2 / PSNR pair for a reconstruction against its original.
pub fn reconstruction_metrics(
    original: &Latent,
    reconstructed: &Latent,
    peak: f64,
) -> Result<ReconstructionMetrics> {
    if !(peak > 0.0) {
        return Err(CoreError::InvalidConfig(format!(
            "peak must be positive, got {peak}"
        )));
    }
    let l2 = original.mean_squared_diff(reconstructed)?;
    let psnr = if l2 == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / l2).log10()
    };
    Ok(ReconstructionMetrics { l2, psnr, peak })
}

/// Deviation of the last-m uniform average from a known fixed point,
/// compared against the worst individual deviation in the same tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingPoint {
    pub m: usize,
    pub deviation: f64,
    pub max_tail_deviation: f64,
    pub ok: bool,
}

#[derive(Debug, Clone)]
pub struct AveragingReport {
    pub points: Vec<AveragingPoint>,
}

impl AveragingReport {
    pub fn all_ok(&self) -> bool {
        self.points.iter().all(|p| p.ok)
    }
}

/// Checks that averaging cannot leave the convex hull of the tail: for every
/// m, the last-m uniform average deviates from the fixed point by no more
/// than the worst estimate in that tail.
pub fn averaging_convergence_check(
    series: &EstimateSeries,
    fixed_point: &Latent,
) -> Result<AveragingReport> {
    if series.estimates.is_empty() {
        return Err(CoreError::InvalidConfig("empty estimate series".into()));
    }
    let n = series.estimates.len();
    let mut points = Vec::with_capacity(n);
    for m in 1..=n {
        let tail = &series.estimates[n - m..];
        let mut avg = Latent::zeros(fixed_point.shape().to_vec())?;
        for z in tail {
            avg.axpy(z, 1.0 / m as f64)?;
        }
        let deviation = avg.sub(fixed_point)?.l2_norm();
        let max_tail_deviation = tail
            .iter()
            .map(|z| z.sub(fixed_point).map(|d| d.l2_norm()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0f64, f64::max);
        let slack = 1e-12 * (1.0 + fixed_point.linf_norm());
        points.push(AveragingPoint {
            m,
            deviation,
            max_tail_deviation,
            ok: deviation <= max_tail_deviation + slack,
        });
    }
    Ok(AveragingReport { points })
}

// --- CSV emission ---------------------------------------------------------------

/// One row per (t, k): `t,k,delta_norm,scaled_jac_norm`. Missing Jacobian
/// entries render as `nan`.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from("t,k,delta_norm,scaled_jac_norm\n");
    for (i, norms) in report.delta_norms.iter().enumerate() {
        for (j, d) in norms.iter().enumerate() {
            let jac = report
                .jacobian_norms
                .get(i)
                .and_then(|row| row.get(j))
                .copied();
            match jac {
                Some(v) => out.push_str(&format!("{},{},{},{}\n", i + 1, j + 1, d, v)),
                None => out.push_str(&format!("{},{},{},nan\n", i + 1, j + 1, d)),
            }
        }
    }
    out
}

/// Single-row metrics document: `l2,psnr,peak,op_count`.
pub fn metrics_csv(metrics: &ReconstructionMetrics, op_count: u64) -> String {
    format!(
        "l2,psnr,peak,op_count\n{},{},{},{}\n",
        metrics.l2, metrics.psnr, metrics.peak, op_count
    )
}
