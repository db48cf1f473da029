//! Per-step sampler coefficients for the generic update
//! `z_prev = phi * z + psi * delta + rho * eps`.
//!
//! The three built-in kinds cover the Euler family: a deterministic
//! DDIM-style sampler, a plain forward-Euler ODE wrapper, and an ancestral
//! (stochastic) sampler. All of them are expressed through the same
//! [`StepParams`] triple so the inversion engine never branches on kind.
//!
//! Index convention: a schedule of length `T` connects the latents
//! `z_0 ..= z_T`, where `z_0` is the clean input. Storage step `i` moves
//! between `z_i` and `z_{i+1}`; its predictor evaluation times are
//! `t_src = timesteps[i]` (the time of `z_i`) and `t_tgt` (the time of
//! `z_{i+1}`). Inversion walks steps in order, denoising in reverse.

use crate::error::{CoreError, Result};

/// Coefficients of one sampler step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    /// Carry-over coefficient. Must be nonzero: the inverse step divides by it.
    pub phi: f64,
    /// Predicted-noise coefficient.
    pub psi: f64,
    /// Injected-noise coefficient; zero identifies a deterministic step.
    pub rho: f64,
}

impl StepParams {
    pub fn new(phi: f64, psi: f64, rho: f64) -> Result<Self> {
        if phi == 0.0 || !phi.is_finite() {
            return Err(CoreError::ZeroPhi);
        }
        if rho < 0.0 || !rho.is_finite() || !psi.is_finite() {
            return Err(CoreError::InvalidSchedule(format!(
                "invalid step coefficients phi={phi} psi={psi} rho={rho}"
            )));
        }
        Ok(Self { phi, psi, rho })
    }

    pub fn is_deterministic(&self) -> bool {
        self.rho == 0.0
    }

    /// Local contraction prefactor |psi/phi| of the renoising map.
    pub fn scale_ratio(&self) -> f64 {
        (self.psi / self.phi).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Ddim,
    EulerOde,
    Ancestral,
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Ddim => "ddim",
            ScheduleKind::EulerOde => "euler",
            ScheduleKind::Ancestral => "ancestral",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ddim" => Ok(ScheduleKind::Ddim),
            "euler" => Ok(ScheduleKind::EulerOde),
            "ancestral" => Ok(ScheduleKind::Ancestral),
            other => Err(CoreError::Parse(format!("unknown schedule kind `{other}`"))),
        }
    }

    /// Variance-preserving kinds carry meaningful forward-noising
    /// coefficients and are checked for alpha^2 + sigma^2 = 1.
    pub fn is_variance_preserving(&self) -> bool {
        !matches!(self, ScheduleKind::EulerOde)
    }
}

/// Evaluation times of one step, handed to the renoising loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// 1-based step index (the conceptual timestep t in 1..=T).
    pub index: usize,
    /// Time of the less-noisy endpoint z_{t-1}.
    pub t_src: f64,
    /// Time of the noisier endpoint z_t; denoising and renoising
    /// iterations evaluate the predictor here.
    pub t_tgt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    timesteps: Vec<f64>,
    steps: Vec<StepParams>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

const VP_TOLERANCE: f64 = 1e-9;

impl Schedule {
    pub fn from_parts(
        kind: ScheduleKind,
        timesteps: Vec<f64>,
        steps: Vec<StepParams>,
        alpha: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        let t = steps.len();
        if t == 0 {
            return Err(CoreError::InvalidSchedule("empty schedule".into()));
        }
        if timesteps.len() != t || alpha.len() != t || sigma.len() != t {
            return Err(CoreError::InvalidSchedule(format!(
                "length mismatch: {} steps, {} timesteps, {} alpha, {} sigma",
                t,
                timesteps.len(),
                alpha.len(),
                sigma.len()
            )));
        }
        let increasing = timesteps.windows(2).all(|w| w[1] > w[0]);
        let decreasing = timesteps.windows(2).all(|w| w[1] < w[0]);
        if t > 1 && !increasing && !decreasing {
            return Err(CoreError::InvalidSchedule(
                "timesteps must be strictly monotone".into(),
            ));
        }
        if kind.is_variance_preserving() {
            for (i, (a, s)) in alpha.iter().zip(&sigma).enumerate() {
                let v = a * a + s * s;
                if (v - 1.0).abs() > VP_TOLERANCE {
                    return Err(CoreError::InvalidSchedule(format!(
                        "alpha^2 + sigma^2 = {v} at step {i} breaks variance preservation"
                    )));
                }
            }
        }
        Ok(Self {
            kind,
            timesteps,
            steps,
            alpha,
            sigma,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timesteps(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn steps(&self) -> &[StepParams] {
        &self.steps
    }

    pub fn step(&self, i: usize) -> StepParams {
        self.steps[i]
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn has_stochastic_step(&self) -> bool {
        self.steps.iter().any(|p| p.rho > 0.0)
    }

    /// Evaluation times for storage step `i`.
    pub fn step_info(&self, i: usize) -> StepInfo {
        let t_src = self.timesteps[i];
        let t_tgt = if i + 1 < self.timesteps.len() {
            self.timesteps[i + 1]
        } else {
            match self.kind {
                // psi stores -h for the Euler wrapper, so the target time of
                // the last step is t_src + h.
                ScheduleKind::EulerOde => t_src - self.steps[i].psi,
                ScheduleKind::Ddim | ScheduleKind::Ancestral => t_src + 1.0,
            }
        };
        StepInfo {
            index: i + 1,
            t_src,
            t_tgt,
        }
    }
}

fn validate_alpha_bar(alpha_bar: &[f64]) -> Result<()> {
    if alpha_bar.is_empty() {
        return Err(CoreError::InvalidSchedule("empty alpha_bar".into()));
    }
    for (i, &a) in alpha_bar.iter().enumerate() {
        if !(a > 0.0 && a <= 1.0) || !a.is_finite() {
            return Err(CoreError::InvalidSchedule(format!(
                "alpha_bar[{i}] = {a} is outside (0, 1]"
            )));
        }
    }
    for (i, w) in alpha_bar.windows(2).enumerate() {
        if w[1] > w[0] {
            return Err(CoreError::InvalidSchedule(format!(
                "alpha_bar must be non-increasing, but alpha_bar[{}] = {} > alpha_bar[{}] = {}",
                i + 1,
                w[1],
                i,
                w[0]
            )));
        }
    }
    Ok(())
}

/// Deterministic DDIM-style schedule.
///
/// `alpha_bar[i]` is the cumulative signal level of noise level `i + 1`;
/// level 0 (the clean input) is implicitly 1. Step t then uses the pair
/// (abar_prev, abar_cur) = (alpha_bar of t-1, alpha_bar of t):
///
/// phi = sqrt(abar_prev / abar_cur)
/// psi = sqrt(1 - abar_prev) - phi * sqrt(1 - abar_cur)
/// rho = 0
pub fn build_ddim_schedule(alpha_bar: &[f64]) -> Result<Schedule> {
    validate_alpha_bar(alpha_bar)?;
    let t = alpha_bar.len();
    let mut steps = Vec::with_capacity(t);
    let mut alpha = Vec::with_capacity(t);
    let mut sigma = Vec::with_capacity(t);
    let mut prev = 1.0f64;
    for &cur in alpha_bar {
        let phi = (prev / cur).sqrt();
        let psi = (1.0 - prev).sqrt() - phi * (1.0 - cur).sqrt();
        steps.push(StepParams::new(phi, psi, 0.0)?);
        alpha.push(cur.sqrt());
        sigma.push((1.0 - cur).sqrt());
        prev = cur;
    }
    let timesteps = (0..t).map(|i| i as f64).collect();
    Schedule::from_parts(ScheduleKind::Ddim, timesteps, steps, alpha, sigma)
}

/// Plain forward-Euler ODE wrapper: the predictor plays the role of the ODE
/// right-hand side f.
///
/// Inverting step i advances the integration time from `timesteps[i]` by
/// `step_sizes[i]`, computing `z_next = z + h * f`; the matching denoise
/// step retraces it with `z - h * f`. In `StepParams` terms this stores
/// phi = 1, psi = -h, rho = 0, so that the shared inverse-step algebra
/// `(z_prev - psi * delta) / phi` produces `z_prev + h * delta`.
pub fn build_euler_ode_schedule(start_time: f64, step_sizes: &[f64]) -> Result<Schedule> {
    if step_sizes.is_empty() {
        return Err(CoreError::InvalidSchedule("empty step_sizes".into()));
    }
    if !start_time.is_finite() {
        return Err(CoreError::InvalidSchedule("non-finite start time".into()));
    }
    let t = step_sizes.len();
    let mut steps = Vec::with_capacity(t);
    let mut timesteps = Vec::with_capacity(t);
    let mut now = start_time;
    for (i, &h) in step_sizes.iter().enumerate() {
        if !(h > 0.0) || !h.is_finite() {
            return Err(CoreError::InvalidSchedule(format!(
                "step_sizes[{i}] = {h} must be positive"
            )));
        }
        steps.push(StepParams::new(1.0, -h, 0.0)?);
        timesteps.push(now);
        now += h;
    }
    let alpha = vec![1.0; t];
    let sigma = vec![0.0; t];
    Schedule::from_parts(ScheduleKind::EulerOde, timesteps, steps, alpha, sigma)
}

/// Uniform-step Euler schedule over `[start, start + total]`.
pub fn build_euler_ode_schedule_uniform(start_time: f64, total: f64, steps: usize) -> Result<Schedule> {
    if steps == 0 {
        return Err(CoreError::InvalidSchedule("steps must be >= 1".into()));
    }
    if !(total > 0.0) {
        return Err(CoreError::InvalidSchedule(format!(
            "total time {total} must be positive"
        )));
    }
    let h = total / steps as f64;
    build_euler_ode_schedule(start_time, &vec![h; steps])
}

/// Ancestral (stochastic) schedule with the classic posterior noise scale.
///
/// Same alpha_bar convention as [`build_ddim_schedule`]. With
/// a_t = abar_cur / abar_prev and b_t = 1 - a_t:
///
/// phi = 1 / sqrt(a_t)
/// psi = -b_t / (sqrt(a_t) * sqrt(1 - abar_cur))
/// rho = sqrt(b_t * (1 - abar_prev) / (1 - abar_cur))
///
/// The first step (abar_prev = 1) always gets rho = 0: the final denoising
/// step skips the random noise addition. Equal consecutive levels collapse
/// to identity steps.
pub fn build_ancestral_schedule(alpha_bar: &[f64]) -> Result<Schedule> {
    validate_alpha_bar(alpha_bar)?;
    let t = alpha_bar.len();
    let mut steps = Vec::with_capacity(t);
    let mut alpha = Vec::with_capacity(t);
    let mut sigma = Vec::with_capacity(t);
    let mut prev = 1.0f64;
    for &cur in alpha_bar {
        let a_t = cur / prev;
        let b_t = 1.0 - a_t;
        let params = if b_t == 0.0 {
            StepParams::new(1.0, 0.0, 0.0)?
        } else {
            let phi = 1.0 / a_t.sqrt();
            let psi = -b_t / (a_t.sqrt() * (1.0 - cur).sqrt());
            let rho = (b_t * (1.0 - prev) / (1.0 - cur)).sqrt();
            StepParams::new(phi, psi, rho)?
        };
        steps.push(params);
        alpha.push(cur.sqrt());
        sigma.push((1.0 - cur).sqrt());
        prev = cur;
    }
    let timesteps = (0..t).map(|i| i as f64).collect();
    Schedule::from_parts(ScheduleKind::Ancestral, timesteps, steps, alpha, sigma)
}

/// Cosine cumulative-signal profile sampled at `steps` noise levels, handy
/// for building DDIM/ancestral schedules of any length.
pub fn cosine_alpha_bar(steps: usize) -> Vec<f64> {
    let f = |u: f64| ((u + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    (1..=steps)
        .map(|i| (f(i as f64 / steps as f64) / f0).clamp(1e-6, 1.0))
        .collect()
}

// --- text serialization -----------------------------------------------------

/// Formats a real with 17 significant digits, enough to round-trip any f64.
fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_array(vs: &[f64]) -> String {
    let parts: Vec<String> = vs.iter().map(|&v| fmt_real(v)).collect();
    format!("[{}]", parts.join(", "))
}

impl Schedule {
    /// Serializes to a structured text document (JSON) with reals rendered
    /// at 17 significant digits so parsing reproduces every coefficient
    /// exactly.
    pub fn to_text(&self) -> String {
        let phi: Vec<f64> = self.steps.iter().map(|p| p.phi).collect();
        let psi: Vec<f64> = self.steps.iter().map(|p| p.psi).collect();
        let rho: Vec<f64> = self.steps.iter().map(|p| p.rho).collect();
        format!(
            "{{\n  \"kind\": \"{}\",\n  \"timesteps\": {},\n  \"phi\": {},\n  \"psi\": {},\n  \"rho\": {},\n  \"alpha\": {},\n  \"sigma\": {}\n}}\n",
            self.kind.name(),
            fmt_array(&self.timesteps),
            fmt_array(&phi),
            fmt_array(&psi),
            fmt_array(&rho),
            fmt_array(&self.alpha),
            fmt_array(&self.sigma),
        )
    }

    pub fn from_text(text: &str) -> Result<Schedule> {
        #[derive(serde::Deserialize)]
        struct Doc {
            kind: String,
            timesteps: Vec<f64>,
            phi: Vec<f64>,
            psi: Vec<f64>,
            rho: Vec<f64>,
            alpha: Vec<f64>,
            sigma: Vec<f64>,
        }
        let doc: Doc =
            serde_json::from_str(text).map_err(|e| CoreError::Parse(e.to_string()))?;
        let kind = ScheduleKind::from_name(&doc.kind)?;
        if doc.phi.len() != doc.psi.len() || doc.phi.len() != doc.rho.len() {
            return Err(CoreError::Parse(
                "phi, psi, rho arrays must share a length".into(),
            ));
        }
        let steps = doc
            .phi
            .iter()
            .zip(&doc.psi)
            .zip(&doc.rho)
            .map(|((&phi, &psi), &rho)| StepParams::new(phi, psi, rho))
            .collect::<Result<Vec<_>>>()?;
        Schedule::from_parts(kind, doc.timesteps, steps, doc.alpha, doc.sigma)
    }
}
