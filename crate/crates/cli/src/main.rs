//! Command-line driver for the renoising inversion engine.

// `!(x > 0.0)` rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;
use renoise_core::{
    convergence_csv, denoise_step, denoise_trajectory, estimate_jacobian_profile, metrics_csv,
    operation_budget_sweep, reconstruction_metrics, renoise_inversion, ConditioningRef,
    CountingPredictor, InversionResult, Latent, NoisePredictor, RenoiseConfig, RenoiseWeights,
    RngState, Schedule, ToyShiftedGaussian, ToyShiftedGaussianParams,
};

#[derive(Parser)]
#[command(
    name = "renoise",
    about = "Inversion engine for iterative denoisers with fixed-point renoising",
    version
)]
struct Cli {
    /// Path to the run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config overrides, e.g. --set renoise.k=4
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the shifted-Gaussian inversion check and reports per-step
    /// pre-image errors.
    Toy {
        /// Euler step size.
        #[arg(long, default_value_t = 0.1)]
        delta_t: f64,
        /// Distribution shift; must be nonzero.
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        /// Initial scalar latent.
        #[arg(long, default_value_t = 2.0)]
        z0: f64,
        /// Number of inversion steps.
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Inverts the configured latent and writes the trajectory file.
    Invert,
    /// Inverts, denoises, and scores the reconstruction.
    Reconstruct,
    /// Runs the inversion with convergence diagnostics enabled.
    Diagnose,
    /// Executes the configured operation-budget sweep.
    Sweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Toy {
            delta_t,
            a,
            z0,
            steps,
        } => cmd_toy(*delta_t, *a, *z0, *steps),
        Command::Invert => cmd_invert(&load_config(&cli)?, &cli.out),
        Command::Reconstruct => cmd_reconstruct(&load_config(&cli)?, &cli.out),
        Command::Diagnose => cmd_diagnose(&load_config(&cli)?, &cli.out),
        Command::Sweep => cmd_sweep(&load_config(&cli)?, &cli.out),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow!("--config PATH is required for this command"))?;
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut overrides = Vec::new();
    for item in &cli.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{item}`"))?;
        overrides.push((key.to_string(), value.to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    RunConfig::from_toml(&text, &overrides)
}

const TOY_GATE: f64 = 1e-10;

fn cmd_toy(delta_t: f64, a: f64, z0: f64, steps: usize) -> Result<ExitCode> {
    if !(delta_t > 0.0) {
        bail!("delta_t must be positive, got {delta_t}");
    }
    if a == 0.0 {
        bail!("shift a must be nonzero");
    }
    if steps == 0 {
        bail!("steps must be >= 1");
    }
    let toy = ToyShiftedGaussian::new(ToyShiftedGaussianParams::new(a)?);
    let sched = renoise_core::build_euler_ode_schedule(0.0, &vec![delta_t; steps])?;
    let cfg = RenoiseConfig::new(1, RenoiseWeights::last_only(1));
    let mut rng = RngState::new(0);
    let c = ConditioningRef::Unconditioned;
    let start = Latent::scalar(z0);
    let result = renoise_inversion(&start, &toy, &sched, &cfg, &mut rng, &c)?;

    let mut max_err = 0.0f64;
    for i in 0..sched.len() {
        let info = sched.step_info(i);
        let z_t = &result.trajectory.latents[i + 1];
        let delta = toy.evaluate(z_t, info.t_tgt, &c)?;
        let back = denoise_step(z_t, &delta, None, &sched.step(i))?;
        let err = back.max_abs_diff(&result.trajectory.latents[i])?;
        max_err = max_err.max(err);
        println!("step {}: pre-image error {err:.3e}", info.index);
    }
    println!("max pre-image error: {max_err:.3e}");
    if max_err <= TOY_GATE {
        println!("toy inversion: PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("toy inversion: FAIL (gate {TOY_GATE:.0e})");
        Ok(ExitCode::from(2))
    }
}

struct PreparedRun {
    z0: Latent,
    rng: RngState,
    sched: Schedule,
    engine_cfg: RenoiseConfig,
    predictor: Box<dyn renoise_core::NoisePredictor>,
    c: ConditioningRef,
}

fn prepare(cfg: &RunConfig) -> Result<PreparedRun> {
    let sched = cfg.build_schedule()?;
    let engine_cfg = cfg.build_renoise_config(sched.len())?;
    let predictor = cfg.build_predictor()?;
    let (z0, rng) = cfg.build_initial_latent(cfg.seed)?;
    Ok(PreparedRun {
        z0,
        rng,
        sched,
        engine_cfg,
        predictor,
        c: ConditioningRef::Unconditioned,
    })
}

fn write_trajectory(result: &InversionResult, out: &Path) -> Result<()> {
    let path = out.join("trajectory.rnzt");
    let file = fs::File::create(&path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut writer = BufWriter::new(file);
    result.trajectory.write_to(&mut writer)?;
    Ok(())
}

/// Records the fully resolved configuration (including --set overrides) next
/// to the artifacts it produced.
fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn write_schedule(sched: &Schedule, out: &Path) -> Result<()> {
    fs::write(out.join("schedule.json"), sched.to_text())?;
    Ok(())
}

fn cmd_invert(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    fs::create_dir_all(out)?;
    write_resolved_config(cfg, out)?;
    let mut run = prepare(cfg)?;
    let result = renoise_inversion(
        &run.z0,
        run.predictor.as_ref(),
        &run.sched,
        &run.engine_cfg,
        &mut run.rng,
        &run.c,
    )?;
    write_trajectory(&result, out)?;
    write_schedule(&run.sched, out)?;
    let divergent = result.report.divergence.iter().filter(|&&d| d).count();
    let sidecar = format!(
        "steps,k,op_count,divergent_steps\n{},{},{},{}\n",
        run.sched.len(),
        run.engine_cfg.k,
        result.op_count,
        divergent
    );
    fs::write(out.join("inversion.csv"), sidecar)?;
    println!("op_count: {}", result.op_count);
    Ok(ExitCode::SUCCESS)
}

fn invert_and_reconstruct(
    cfg: &RunConfig,
) -> Result<(PreparedRun, InversionResult, Latent, u64)> {
    let mut run = prepare(cfg)?;
    let result = renoise_inversion(
        &run.z0,
        run.predictor.as_ref(),
        &run.sched,
        &run.engine_cfg,
        &mut run.rng,
        &run.c,
    )?;
    let counting = CountingPredictor::new(run.predictor.as_ref());
    let traj = denoise_trajectory(
        result.z_terminal(),
        result.noises(),
        &counting,
        &run.sched,
        &run.c,
    )?;
    let total_ops = result.op_count + counting.evaluations();
    let reconstructed = traj.initial().clone();
    Ok((run, result, reconstructed, total_ops))
}

fn cmd_reconstruct(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    fs::create_dir_all(out)?;
    write_resolved_config(cfg, out)?;
    let (run, result, reconstructed, total_ops) = invert_and_reconstruct(cfg)?;
    write_trajectory(&result, out)?;
    write_schedule(&run.sched, out)?;
    let metrics = reconstruction_metrics(&run.z0, &reconstructed, cfg.diagnostics.peak)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&metrics, total_ops))?;
    println!("op_count: {total_ops}");
    println!("l2: {}", metrics.l2);
    println!("psnr: {}", metrics.psnr);
    Ok(ExitCode::SUCCESS)
}

fn cmd_diagnose(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    fs::create_dir_all(out)?;
    write_resolved_config(cfg, out)?;
    let (run, mut result, reconstructed, total_ops) = invert_and_reconstruct(cfg)?;
    let mut rng = run.rng.clone();
    if cfg.diagnostics.jacobian_power_iters > 0 {
        result.report.jacobian_norms = if cfg.diagnostics.jacobian_samples > 1 {
            renoise_core::averaged_jacobian_profile(
                run.predictor.as_ref(),
                &run.sched,
                &run.engine_cfg,
                &run.c,
                cfg.diagnostics.jacobian_power_iters,
                cfg.diagnostics.jacobian_samples,
                cfg.seed,
                run.z0.shape(),
            )?
        } else {
            estimate_jacobian_profile(
                run.predictor.as_ref(),
                &result,
                &run.sched,
                &run.c,
                cfg.diagnostics.jacobian_power_iters,
                &mut rng,
            )?
        };
    }
    fs::write(out.join("convergence.csv"), convergence_csv(&result.report))?;
    let metrics = reconstruction_metrics(&run.z0, &reconstructed, cfg.diagnostics.peak)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&metrics, total_ops))?;
    println!("op_count: {total_ops}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<ExitCode> {
    fs::create_dir_all(out)?;
    write_resolved_config(cfg, out)?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [sweep] section"))?;

    let mut rows: Vec<(usize, usize, usize)> = Vec::new();
    for row in &sweep.rows {
        let tuple = (row[0], row[1], row[2]);
        if rows.contains(&tuple) {
            eprintln!(
                "warning: duplicate sweep row [{}, {}, {}] ignored",
                row[0], row[1], row[2]
            );
            continue;
        }
        rows.push(tuple);
    }

    let family = cfg.build_sweep_family()?;
    let run = prepare(cfg)?;
    let records = operation_budget_sweep(
        &run.z0,
        run.predictor.as_ref(),
        &family,
        cfg.weight_policy(),
        &rows,
        &run.c,
    )?;

    let mut csv = String::from("inv_steps,den_steps,k,op_count,l2,psnr\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.inversion_steps, r.denoise_steps, r.k, r.op_count, r.metrics.l2, r.metrics.psnr
        ));
    }
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}
