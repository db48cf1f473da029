//! Run configuration: a single TOML document, strict about unknown keys,
//! with dotted-path overrides from the command line.

use anyhow::{anyhow, bail, Context, Result};
use renoise_core::{
    build_ancestral_schedule, build_ddim_schedule, build_euler_ode_schedule,
    build_euler_ode_schedule_uniform, cosine_alpha_bar, EditLossConfig, Latent, LinearPredictor,
    LinearPredictorParams, NoiseCorrection, NoisePredictor, RenoiseConfig, RenoiseWeights,
    RngState, Schedule, ScheduleFamily, SeededNonlinear, SeededNonlinearParams,
    ToyShiftedGaussian, ToyShiftedGaussianParams, WeightBand, WeightPolicy,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub latent: LatentConfig,
    pub predictor: PredictorConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub renoise: RenoiseSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit: Option<EditSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nc: Option<NcSection>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub shape: Vec<usize>,
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

fn default_init() -> String {
    "gaussian".into()
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: String,
    // toy
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    // linear
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    // seeded_nonlinear
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bar: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_sizes: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RenoiseSection {
    #[serde(default)]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bands: Option<Vec<BandConfig>>,
    #[serde(default = "default_weight_policy")]
    pub weight_policy: String,
    #[serde(default = "default_threshold_fraction")]
    pub band_threshold_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_estimate_history: Option<usize>,
}

impl Default for RenoiseSection {
    fn default() -> Self {
        Self {
            k: 0,
            weight_bands: None,
            weight_policy: default_weight_policy(),
            band_threshold_fraction: default_threshold_fraction(),
            max_estimate_history: None,
        }
    }
}

fn default_weight_policy() -> String {
    "banded".into()
}

fn default_threshold_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub t_min: usize,
    pub t_max: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    #[serde(default)]
    pub lambda_pair: f64,
    #[serde(default)]
    pub lambda_patch_kl: f64,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_shifts")]
    pub shifts: Vec<[i64; 2]>,
}

fn default_patch_size() -> usize {
    4
}

fn default_step_size() -> f64 {
    0.1
}

fn default_shifts() -> Vec<[i64; 2]> {
    vec![[1, 0], [0, 1]]
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NcSection {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Power iterations per (t, k) Jacobian estimate; 0 skips the profile.
    #[serde(default)]
    pub jacobian_power_iters: usize,
    /// Seeded latents averaged into the Jacobian profile.
    #[serde(default = "default_jacobian_samples")]
    pub jacobian_samples: usize,
    #[serde(default = "default_peak")]
    pub peak: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            jacobian_power_iters: 0,
            jacobian_samples: default_jacobian_samples(),
            peak: default_peak(),
        }
    }
}

fn default_jacobian_samples() -> usize {
    32
}

fn default_peak() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Rows of (inversion steps, denoise steps, K).
    pub rows: Vec<[usize; 3]>,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default)]
    pub t0: f64,
    #[serde(default = "default_total_time")]
    pub total_time: f64,
}

fn default_family() -> String {
    "euler".into()
}

fn default_total_time() -> f64 {
    1.0
}

impl RunConfig {
    /// Parses the TOML text after applying `--set key=value` overrides.
    /// Unknown keys are rejected with their location.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| anyhow!("config parse error: {e}"))?;
        for (path, raw) in overrides {
            apply_override(&mut value, path, raw)
                .with_context(|| format!("cannot apply --set {path}={raw}"))?;
        }
        let text = toml::to_string(&value).context("re-serializing config")?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    fn validate(&self) -> Result<()> {
        if self.latent.shape.is_empty() || self.latent.shape.contains(&0) {
            bail!("latent.shape must be non-empty with positive entries");
        }
        match self.latent.init.as_str() {
            "gaussian" => {}
            "constant" => {
                if self.latent.value.is_none() {
                    bail!("latent.value is required when latent.init = \"constant\"");
                }
            }
            other => bail!("latent.init must be \"gaussian\" or \"constant\", got \"{other}\""),
        }
        self.validate_predictor()?;
        self.validate_schedule()?;
        match self.renoise.weight_policy.as_str() {
            "banded" | "last_only" => {}
            other => bail!(
                "renoise.weight_policy must be \"banded\" or \"last_only\", got \"{other}\""
            ),
        }
        if let Some(nc) = &self.nc {
            match nc.mode.as_str() {
                "off" => {}
                "exact" => {}
                "optimize" => {
                    if nc.eta.is_none() {
                        bail!("nc.eta is required when nc.mode = \"optimize\"");
                    }
                    if nc.iters.is_none() {
                        bail!("nc.iters is required when nc.mode = \"optimize\"");
                    }
                }
                other => bail!("nc.mode must be off|exact|optimize, got \"{other}\""),
            }
        }
        if let Some(sweep) = &self.sweep {
            match sweep.family.as_str() {
                "euler" | "ddim_cosine" => {}
                other => bail!("sweep.family must be euler|ddim_cosine, got \"{other}\""),
            }
            if sweep.rows.is_empty() {
                bail!("sweep.rows must not be empty");
            }
        }
        Ok(())
    }

    fn validate_predictor(&self) -> Result<()> {
        let p = &self.predictor;
        let forbid = |cond: bool, key: &str, kind: &str| -> Result<()> {
            if cond {
                bail!("predictor.{key} is not allowed for predictor.kind = \"{kind}\"");
            }
            Ok(())
        };
        match p.kind.as_str() {
            "toy" => {
                if p.a.is_none() {
                    bail!("predictor.a is required when predictor.kind = \"toy\"");
                }
                forbid(p.scale.is_some(), "scale", "toy")?;
                forbid(p.matrix.is_some(), "matrix", "toy")?;
                forbid(p.seed.is_some(), "seed", "toy")?;
                forbid(p.width.is_some(), "width", "toy")?;
                forbid(p.smoothness.is_some(), "smoothness", "toy")?;
            }
            "linear" => {
                if p.scale.is_none() && p.matrix.is_none() {
                    bail!("predictor.scale or predictor.matrix is required for kind \"linear\"");
                }
                if p.scale.is_some() && p.matrix.is_some() {
                    bail!("predictor.scale and predictor.matrix are mutually exclusive");
                }
                forbid(p.a.is_some(), "a", "linear")?;
                forbid(p.seed.is_some(), "seed", "linear")?;
                forbid(p.width.is_some(), "width", "linear")?;
                forbid(p.smoothness.is_some(), "smoothness", "linear")?;
            }
            "seeded_nonlinear" => {
                if p.seed.is_none() {
                    bail!("predictor.seed is required for kind \"seeded_nonlinear\"");
                }
                if p.width.is_none() {
                    bail!("predictor.width is required for kind \"seeded_nonlinear\"");
                }
                if p.smoothness.is_none() {
                    bail!("predictor.smoothness is required for kind \"seeded_nonlinear\"");
                }
                forbid(p.a.is_some(), "a", "seeded_nonlinear")?;
                forbid(p.scale.is_some(), "scale", "seeded_nonlinear")?;
                forbid(p.matrix.is_some(), "matrix", "seeded_nonlinear")?;
            }
            other => bail!(
                "predictor.kind must be toy|linear|seeded_nonlinear, got \"{other}\""
            ),
        }
        Ok(())
    }

    fn validate_schedule(&self) -> Result<()> {
        let s = &self.schedule;
        match s.kind.as_str() {
            "ddim" | "ancestral" => {
                if s.alpha_bar.is_none() && s.profile.is_none() {
                    bail!(
                        "schedule.alpha_bar or schedule.profile is required for kind \"{}\"",
                        s.kind
                    );
                }
                if s.profile.is_some() && s.steps.is_none() {
                    bail!("schedule.steps is required with schedule.profile");
                }
                if let Some(profile) = &s.profile {
                    if profile != "cosine" {
                        bail!("schedule.profile must be \"cosine\", got \"{profile}\"");
                    }
                }
            }
            "euler" => {
                if s.step_sizes.is_none() && !(s.steps.is_some() && s.total_time.is_some()) {
                    bail!(
                        "schedule.step_sizes, or schedule.steps with schedule.total_time, is required for kind \"euler\""
                    );
                }
            }
            other => bail!("schedule.kind must be ddim|euler|ancestral, got \"{other}\""),
        }
        Ok(())
    }

    pub fn build_predictor(&self) -> Result<Box<dyn NoisePredictor>> {
        let p = &self.predictor;
        Ok(match p.kind.as_str() {
            "toy" => Box::new(ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(
                p.a.expect("validated"),
            )?)),
            "linear" => {
                let dim: usize = self.latent.shape.iter().product();
                let params = match (&p.scale, &p.matrix) {
                    (Some(scale), None) => LinearPredictorParams::scaled_identity(dim, *scale)?,
                    (None, Some(rows)) => {
                        let params = LinearPredictorParams::from_rows(rows)?;
                        if params.dim() != dim {
                            bail!(
                                "predictor.matrix is {}x{} but latent.shape flattens to {dim}",
                                params.dim(),
                                params.dim()
                            );
                        }
                        params
                    }
                    _ => unreachable!("validated"),
                };
                Box::new(LinearPredictor::new(params))
            }
            "seeded_nonlinear" => Box::new(SeededNonlinear::new(SeededNonlinearParams::new(
                p.seed.expect("validated"),
                p.width.expect("validated"),
                p.smoothness.expect("validated"),
            )?)),
            _ => unreachable!("validated"),
        })
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        let s = &self.schedule;
        let sched = match s.kind.as_str() {
            "ddim" | "ancestral" => {
                let levels = match (&s.alpha_bar, &s.profile) {
                    (Some(levels), None) => levels.clone(),
                    (None, Some(_)) => cosine_alpha_bar(s.steps.expect("validated")),
                    (Some(_), Some(_)) => {
                        bail!("schedule.alpha_bar and schedule.profile are mutually exclusive")
                    }
                    _ => unreachable!("validated"),
                };
                if s.kind == "ddim" {
                    build_ddim_schedule(&levels)?
                } else {
                    build_ancestral_schedule(&levels)?
                }
            }
            "euler" => {
                let t0 = s.t0.unwrap_or(0.0);
                match &s.step_sizes {
                    Some(sizes) => build_euler_ode_schedule(t0, sizes)?,
                    None => build_euler_ode_schedule_uniform(
                        t0,
                        s.total_time.expect("validated"),
                        s.steps.expect("validated"),
                    )?,
                }
            }
            _ => unreachable!("validated"),
        };
        Ok(sched)
    }

    pub fn build_renoise_config(&self, t_count: usize) -> Result<RenoiseConfig> {
        let k = self.renoise.k;
        let weights = match &self.renoise.weight_bands {
            Some(bands) => RenoiseWeights::new(
                bands
                    .iter()
                    .map(|b| WeightBand::new(b.t_min, b.t_max, b.weights.clone()))
                    .collect::<renoise_core::Result<Vec<_>>>()?,
            )?,
            None => match self.renoise.weight_policy.as_str() {
                "last_only" => RenoiseWeights::last_only(k),
                _ => RenoiseWeights::banded_default(
                    k,
                    t_count,
                    self.renoise.band_threshold_fraction,
                )?,
            },
        };
        let mut cfg = RenoiseConfig::new(k, weights);
        if let Some(history) = self.renoise.max_estimate_history {
            cfg.max_estimate_history = history;
        }
        if let Some(edit) = &self.edit {
            cfg.edit_loss = Some(EditLossConfig {
                lambda_pair: edit.lambda_pair,
                lambda_patch_kl: edit.lambda_patch_kl,
                patch_size: edit.patch_size,
                shifts: edit.shifts.iter().map(|s| (s[0], s[1])).collect(),
                step_size: edit.step_size,
            });
        }
        if let Some(nc) = &self.nc {
            cfg.noise_correction = match nc.mode.as_str() {
                "off" => NoiseCorrection::Off,
                "exact" => NoiseCorrection::Exact,
                "optimize" => NoiseCorrection::Optimize {
                    eta: nc.eta.expect("validated"),
                    iters: nc.iters.expect("validated"),
                },
                _ => unreachable!("validated"),
            };
        }
        Ok(cfg)
    }

    /// Initial latent plus the RNG stream the run continues with.
    pub fn build_initial_latent(&self, seed: u64) -> Result<(Latent, RngState)> {
        let mut rng = RngState::new(seed);
        let z0 = match self.latent.init.as_str() {
            "gaussian" => renoise_core::sample_gaussian(&mut rng, &self.latent.shape)?,
            _ => Latent::splat(self.latent.shape.clone(), self.latent.value.expect("validated"))?,
        };
        Ok((z0, rng))
    }

    pub fn build_sweep_family(&self) -> Result<ScheduleFamily> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| anyhow!("config has no [sweep] section"))?;
        Ok(match sweep.family.as_str() {
            "euler" => ScheduleFamily::EulerUniform {
                start_time: sweep.t0,
                total_time: sweep.total_time,
            },
            _ => ScheduleFamily::DdimCosine,
        })
    }

    pub fn weight_policy(&self) -> WeightPolicy {
        match self.renoise.weight_policy.as_str() {
            "last_only" => WeightPolicy::LastOnly,
            _ => WeightPolicy::Banded {
                threshold_fraction: self.renoise.band_threshold_fraction,
            },
        }
    }
}

/// Sets `path` (dotted) in the TOML tree to `raw`, parsed as a TOML literal
/// when possible and as a string otherwise.
fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(table) => table["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("empty path segment in `{path}`");
    }
    for part in &parts[..parts.len() - 1] {
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{part}` is not a table"))?;
        cursor = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let last = parts.last().expect("non-empty path");
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| anyhow!("parent of `{last}` is not a table"))?;
    table.insert(last.to_string(), parsed);
    Ok(())
}
