//! Command-line front end for the attention-steering laboratory.
//!
//! Subcommands: `pretrain` the toy decoder, `steer` one scenario with trace
//! and heatmap output, `roc` for the full referring-classification
//! benchmark, `gradcheck` for the finite-difference audit, and `heatmap` for
//! CSV-to-PGM rendering. Errors print one machine-readable JSON line on
//! stderr and exit nonzero.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use steerlab::config::{LabConfig, PromptKind};
use steerlab::gradcheck::{relative_error, top_gradient_coords};
use steerlab::geometry::VisualPrompt;
use steerlab::harness::{
    emit_heatmap, gen_scenario, pretrain_toy, run_roc, Method, PretrainConfig, RocOptions,
    Scenario,
};
use steerlab::model::{forward_with_attention, DecoderWeights, ModelConfig};
use steerlab::steering::{energy_at, steer, EnergyKind, SteeringConfig};
use steerlab::Tensor;

#[derive(Parser)]
#[command(name = "steerlab", about = "Attention steering laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the toy decoder on single-object scenes and save weights.
    Pretrain {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output weights file; a .sha256 sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
    },
    /// Steer one seeded scenario; write the energy trace and a heatmap.
    Steer {
        #[arg(long)]
        weights: PathBuf,
        /// Scenario seed.
        #[arg(long)]
        scenario: u64,
        /// Lab config TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// PGM output of the final context attention (CSV sidecar included).
        #[arg(long)]
        heatmap_out: Option<PathBuf>,
        /// Override the scenario's visual prompt with a JSON record, e.g.
        /// {"type":"box","coords":[0.1,0.1,0.5,0.5]}.
        #[arg(long)]
        prompt_json: Option<String>,
    },
    /// Referring Object Classification over a pinned scenario set.
    Roc {
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated subset of none,steer-hard,steer-soft,edit-att,color,blur.
        #[arg(long, default_value = "none,steer-hard,steer-soft,edit-att,color,blur")]
        methods: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Summary CSV path; per-scenario JSONL goes to the same path with a
        /// .jsonl extension unless --records-out is given.
        #[arg(long)]
        report_out: PathBuf,
        #[arg(long)]
        records_out: Option<PathBuf>,
        /// First scenario seed.
        #[arg(long, default_value_t = 1000)]
        seed_base: u64,
    },
    /// Finite-difference audit of the energy gradient on seeded configs.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Gradient coordinates checked per config (largest magnitudes).
        #[arg(long, default_value_t = 6)]
        coords: usize,
        /// Failure threshold on the max relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Render a CSV grid as an ASCII PGM heatmap.
    Heatmap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_lab_config(path: &Option<PathBuf>) -> Result<LabConfig> {
    match path {
        Some(p) => Ok(LabConfig::from_file(p)?),
        None => Ok(LabConfig::default()),
    }
}

/// The steering prompt for the configured energy, mirroring the harness
/// rules: hard energy wants a region (falling back to the ground-truth
/// mask), soft wants a scribble/point (falling back to the target center).
fn prompt_for_energy(scenario: &Scenario, energy: EnergyKind) -> VisualPrompt {
    let grid = scenario.target_region.grid();
    match energy {
        EnergyKind::Hard => {
            if scenario.prompt.is_region() {
                scenario.prompt.clone()
            } else {
                VisualPrompt::Mask {
                    height: grid.height,
                    width: grid.width,
                    bits: scenario.target_region.bits().to_vec(),
                }
            }
        }
        EnergyKind::Soft => {
            if !scenario.prompt.is_region() {
                scenario.prompt.clone()
            } else {
                let rect = scenario.target_rect;
                let (x, y) =
                    grid.cell_center(rect.row + rect.height / 2, rect.col + rect.width / 2);
                VisualPrompt::Point { x, y }
            }
        }
    }
}

fn cmd_pretrain(steps: usize, seed: u64, out: PathBuf, batch: usize, lr: f64) -> Result<()> {
    let config = PretrainConfig {
        steps,
        batch,
        lr,
        seed,
    };
    let start = Instant::now();
    let (weights, report) = pretrain_toy(ModelConfig::default(), &config)?;
    weights.save(&out)?;
    println!(
        "pretrained {} steps in {:.1?}: loss {:.4} -> {:.4}, single-object val accuracy {:.3}",
        steps, start.elapsed(), report.initial_loss, report.final_loss, report.val_accuracy
    );
    println!("weights -> {}", out.display());
    Ok(())
}

fn cmd_steer(
    weights: PathBuf,
    scenario_seed: u64,
    config: Option<PathBuf>,
    trace_out: Option<PathBuf>,
    heatmap_out: Option<PathBuf>,
    prompt_json: Option<String>,
) -> Result<()> {
    let weights = DecoderWeights::load(&weights)?;
    let lab = load_lab_config(&config)?;
    let steering: SteeringConfig = lab.steering()?;
    let scenario = gen_scenario(
        scenario_seed,
        weights.config.grid(),
        weights.config.classes,
        lab.prompt,
    )?;
    let prompt = match prompt_json {
        Some(json) => VisualPrompt::from_json(&json)?,
        None => prompt_for_energy(&scenario, steering.energy),
    };

    let state = steer(&weights, &scenario.image, &scenario.question, &prompt, &steering)?;

    let (base_logits, _) =
        forward_with_attention(&weights, &scenario.image, &scenario.question, None, None)?;
    let (steered_logits, _) = forward_with_attention(
        &weights,
        &scenario.image,
        &scenario.question,
        Some(state.effective_latent()),
        None,
    )?;
    let base_answer = steerlab::harness::answer_from_logits(
        &base_logits,
        scenario.class_first,
        scenario.class_second,
    );
    let steered_answer = steerlab::harness::answer_from_logits(
        &steered_logits,
        scenario.class_first,
        scenario.class_second,
    );

    let rows = state.trace.rows();
    println!(
        "scenario {scenario_seed}: energy {:.4} -> {:.4} over {} iterations ({}), in-region mass {:.4} -> {:.4}",
        state.trace.first_energy(),
        state.trace.last_energy(),
        rows.len().saturating_sub(1),
        state.trace.reason().as_str(),
        rows.first().map(|r| r.in_region_ratio).unwrap_or(0.0),
        rows.last().map(|r| r.in_region_ratio).unwrap_or(0.0),
    );
    println!(
        "answer: base class {} -> steered class {} (truth {})",
        base_answer, steered_answer, scenario.truth
    );

    if let Some(path) = trace_out {
        std::fs::write(&path, state.trace.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
        println!("trace -> {}", path.display());
    }
    if let Some(path) = heatmap_out {
        emit_heatmap(state.context.values(), weights.config.grid(), &path)?;
        println!("heatmap -> {} (+ .csv)", path.display());
    }
    Ok(())
}

fn cmd_roc(
    weights: PathBuf,
    methods: String,
    n: usize,
    config: Option<PathBuf>,
    report_out: PathBuf,
    records_out: Option<PathBuf>,
    seed_base: u64,
) -> Result<()> {
    let weights = DecoderWeights::load(&weights)?;
    let lab = load_lab_config(&config)?;
    let methods = methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Method::parse)
        .collect::<steerlab::Result<Vec<_>>>()?;
    let options = RocOptions {
        methods,
        n_scenarios: n,
        seed_base,
        lab,
    };
    let start = Instant::now();
    let report = run_roc(&weights, &options)?;
    std::fs::write(&report_out, report.to_csv())
        .with_context(|| format!("writing {}", report_out.display()))?;
    let records_path =
        records_out.unwrap_or_else(|| report_out.with_extension("jsonl"));
    std::fs::write(&records_path, report.records_jsonl())
        .with_context(|| format!("writing {}", records_path.display()))?;
    for s in &report.summaries {
        println!(
            "{:<11} accuracy {:.3}  in-region mass {:.4} -> {:.4}  relevancy {:.4}  (n={})",
            s.method, s.accuracy, s.mean_mass_before, s.mean_mass_after, s.mean_relevancy, s.n
        );
    }
    println!(
        "report -> {} ; records -> {}  ({:.1?})",
        report_out.display(),
        records_path.display(),
        start.elapsed()
    );
    Ok(())
}

fn cmd_gradcheck(n: usize, eps: f64, coords: usize, tolerance: f64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let config = ModelConfig::default();
    let pool: Vec<DecoderWeights> = (0..4u64)
        .map(|s| DecoderWeights::init(config, 1000 + s))
        .collect::<steerlab::Result<_>>()?;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..n as u64 {
        let weights = &pool[(seed % pool.len() as u64) as usize];
        let scenario = gen_scenario(seed, config.grid(), config.classes, PromptKind::Box)?;
        let energy = if seed % 2 == 0 {
            EnergyKind::Hard
        } else {
            EnergyKind::Soft
        };
        let prompt = prompt_for_energy(&scenario, energy);
        let steering = SteeringConfig {
            energy,
            ..Default::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (v, d) = (config.visual_tokens(), config.dim);
        let mut latent = Tensor::new(
            v,
            d,
            (0..v * d).map(|_| rng.random_range(-0.05..0.05)).collect(),
        )?;
        let (_, grad) = energy_at(
            weights,
            &scenario.image,
            &scenario.question,
            &prompt,
            &steering,
            &latent,
            true,
        )?;
        let grad = grad.expect("gradient requested");
        for &i in &top_gradient_coords(&grad, coords) {
            let orig = latent.data()[i];
            let mut eval = |value: f64| -> Result<f64> {
                latent.data_mut()[i] = value;
                let (e, _) = energy_at(
                    weights,
                    &scenario.image,
                    &scenario.question,
                    &prompt,
                    &steering,
                    &latent,
                    false,
                )?;
                Ok(e)
            };
            let plus = eval(orig + eps)?;
            let minus = eval(orig - eps)?;
            latent.data_mut()[i] = orig;
            let cd = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], cd));
        }
    }
    println!(
        "gradcheck: {n} configs x {coords} coords, eps {eps:.0e}: max relative error {worst:.3e} ({:.1?})",
        start.elapsed()
    );
    if worst >= tolerance {
        bail!("gradient check failed: {worst:.3e} >= {tolerance:.0e}");
    }
    Ok(())
}

fn cmd_heatmap(input: PathBuf, out: PathBuf) -> Result<()> {
    let text = std::fs::read_to_string(&input)
        .with_context(|| format!("reading {}", input.display()))?;
    let (height, width, values) = steerlab::io::parse_csv_grid(&text)?;
    let pgm = steerlab::io::write_pgm_scaled(&values, height, width)?;
    std::fs::write(&out, pgm).with_context(|| format!("writing {}", out.display()))?;
    println!("heatmap {}x{} -> {}", height, width, out.display());
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain {
            steps,
            seed,
            out,
            batch,
            lr,
        } => cmd_pretrain(steps, seed, out, batch, lr),
        Command::Steer {
            weights,
            scenario,
            config,
            trace_out,
            heatmap_out,
            prompt_json,
        } => cmd_steer(weights, scenario, config, trace_out, heatmap_out, prompt_json),
        Command::Roc {
            weights,
            methods,
            n,
            config,
            report_out,
            records_out,
            seed_base,
        } => cmd_roc(weights, methods, n, config, report_out, records_out, seed_base),
        Command::Gradcheck {
            n,
            eps,
            coords,
            tolerance,
        } => cmd_gradcheck(n, eps, coords, tolerance),
        Command::Heatmap { input, out } => cmd_heatmap(input, out),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": format!("{e:#}") })
            );
            ExitCode::FAILURE
        }
    }
}
