//! `resadapter`: train, adapt, sample, merge, inspect and evaluate desk-scale
//! diffusion models from the command line.
//!
//! Exit codes: 0 success, 1 usage, 2 validation or compatibility failure,
//! 3 numeric failure (NaN/divergence, or a gradient check over tolerance).

mod config;
mod image;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use resadapter_core::adapters::{attach_resadapter, merge, ResAdapterBundle};
use resadapter_core::diffusion::{ddim_sample, SamplerConfig};
use resadapter_core::evalbench::{ablation_grid, bench_latency, multires_eval, tile_count, EvalReport};
use resadapter_core::trainer::{train_adapter, train_base, Phase};
use resadapter_core::unet::{Denoiser, UNetModel};
use resadapter_core::{gradsuite, store, Error};

use config::RunConfig;

const CONFIG_HELP: &str = "\
RUN CONFIG (JSON; every key optional, unknown keys rejected):
  unet:     in_channels 1, base_channels 8, channel_mults [1,2],
            num_res_blocks_per_level 1, groups 4, attn_at_bottleneck true,
            time_embed_dim 32, num_classes 3, null_class_reserved true
  schedule: steps 50, beta_start 0.001, beta_end 0.05
  dataset:  generator \"checkers\"|\"discs\"|\"gradients\", num_classes 3,
            channels 1, p_uncond 0.1, supersample 4
  train:    resolutions [[8,8],[24,24],[32,32]], standard_resolution 16,
            steps 2000, batch_size 8, lr 1e-4, adam_beta1 0.95,
            adam_beta2 0.99, seed 0
  adapter:  rank 4, seed 0, alpha_r 1.0
  sampler:  steps 25, guidance_scale 7.5, eta 0.0, seed 0
  eval:     buckets [[8,8],[16,16],[24,24],[32,32]], n_batches 8,
            batch_size 8, seed 1000, ablation_alphas [0,0.5,1]
  paths:    trace (default: <out>.trace.tsv)
See docs/config.md for details.

EXIT CODES: 0 ok, 1 usage, 2 validation/compatibility, 3 numeric failure";

#[derive(Parser, Debug)]
#[command(name = "resadapter", version, about = "Resolution adapters for a miniature diffusion UNet", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a base model at the standard resolution.
    TrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach a resolution adapter to a frozen base model and train it.
    TrainAdapter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue training this bundle instead of a fresh one.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// DDIM-sample one image and write it as binary PGM (1 channel) or PPM (3).
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Adapter scale; defaults to the bundle's stored alpha_r.
        #[arg(long)]
        alpha: Option<f64>,
        /// Output size as HxW (rows x columns).
        #[arg(long, value_parser = parse_hw, default_value = "16x16")]
        size: (usize, usize),
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class label to condition on.
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Run config supplying the noise schedule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold an adapter into its base weights.
    Merge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe a checkpoint or adapter file.
    Inspect {
        #[arg(long)]
        file: PathBuf,
    },
    /// Finite-difference check of every primitive and the training loss.
    Gradcheck {
        /// First of five consecutive seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Held-out loss per bucket, plus the ablation grid when an adapter is given.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency of tiled generation relative to direct generation.
    BenchTiled {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, value_parser = parse_hw, default_value = "32x32")]
        target: (usize, usize),
        #[arg(long, value_parser = parse_hw, default_value = "16x16")]
        tile: (usize, usize),
        #[arg(long, default_value_t = 8)]
        overlap: usize,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

enum Failure {
    Usage(String),
    Invalid(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Diverged { .. } => Failure::Numeric(format!("numeric failure: {e}")),
            Error::Fingerprint { .. } => Failure::Invalid(format!("incompatible adapter: {e}")),
            Error::Format(_) | Error::Io { .. } => Failure::Invalid(format!("file error: {e}")),
            _ => Failure::Invalid(format!("invalid input: {e}")),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    config::parse(&text).map_err(|e| Failure::Invalid(format!("config {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Invalid(format!("cannot write {}: {e}", path.display())))
}

fn load_bundle_for(model: &UNetModel, path: &Path) -> Result<ResAdapterBundle, Failure> {
    let bundle = store::load_bundle(path)?;
    bundle.validate_against(model)?;
    Ok(bundle)
}

fn check_unet(cfg: &RunConfig, model: &UNetModel) -> Outcome {
    if cfg.unet != *model.config() {
        return Err(Failure::Invalid(
            "config unet section does not match the checkpoint's architecture".into(),
        ));
    }
    Ok(())
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::TrainBase { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let sched = cfg.schedule()?;
            let mut model = UNetModel::build(cfg.unet.clone(), cfg.train.seed)?;
            let trace = train_base(&mut model, &cfg.train.plan(Phase::Base), &cfg.dataset, &sched)?;
            store::save_model(&model, &out)?;
            let trace_path = cfg.paths.trace_for(&out);
            write(&trace_path, trace.to_lines().as_bytes())?;
            let n = trace.records.len();
            println!(
                "trained {} parameters for {n} steps; final loss {:.6} (mean of last {} steps {:.6})",
                model.param_count(),
                trace.records.last().map_or(f64::NAN, |r| r.loss),
                n.min(100),
                trace.mean_loss(n.saturating_sub(100)..n)
            );
            println!("wrote {} and {}", out.display(), trace_path.display());
        }
        Command::TrainAdapter {
            model,
            config,
            resume,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sched = cfg.schedule()?;
            let mut model = store::load_model(&model)?;
            check_unet(&cfg, &model)?;
            let mut bundle = match resume {
                Some(p) => load_bundle_for(&model, &p)?,
                None => attach_resadapter(&mut model, cfg.adapter.rank, cfg.adapter.seed)?.with_alpha(cfg.adapter.alpha_r)?,
            };
            let trace = train_adapter(&model, &mut bundle, &cfg.train.plan(Phase::Adapter), &cfg.dataset, &sched)?;
            for note in &trace.notes {
                eprintln!("{note}");
            }
            store::save_bundle(&bundle, &out)?;
            let trace_path = cfg.paths.trace_for(&out);
            write(&trace_path, trace.to_lines().as_bytes())?;
            println!(
                "trained {} adapter parameters ({:.2}% of {}) for {} steps; {} norm-delta updates",
                bundle.trainable_params(),
                100.0 * bundle.trainable_params() as f64 / model.param_count() as f64,
                model.param_count(),
                trace.records.len(),
                trace.norm_updates
            );
            println!("wrote {} and {}", out.display(), trace_path.display());
        }
        Command::Sample {
            model,
            adapter,
            alpha,
            size,
            steps,
            guidance,
            eta,
            seed,
            class,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sched = cfg.schedule()?;
            let model = store::load_model(&model)?;
            let sampler = SamplerConfig {
                steps,
                guidance_scale: guidance,
                eta,
                seed,
            };
            let bundle = match (&adapter, alpha) {
                (Some(p), a) => {
                    let b = load_bundle_for(&model, p)?;
                    Some(match a {
                        Some(a) => b.with_alpha(a)?,
                        None => b,
                    })
                }
                (None, Some(_)) => return Err(Failure::Usage("--alpha requires --adapter".into())),
                (None, None) => None,
            };
            let view = bundle.as_ref().map(|b| b.apply(&model)).transpose()?;
            let den: &dyn Denoiser = match &view {
                Some(v) => v,
                None => &model,
            };
            let shape = [1, model.config().in_channels, size.0, size.1];
            let img = ddim_sample(den, shape, &sampler, class, &sched)?;
            let bytes = image::encode(&img).map_err(Failure::Invalid)?;
            write(&out, &bytes)?;
            println!("wrote {}x{} sample to {}", size.0, size.1, out.display());
        }
        Command::Merge { model, adapter, out } => {
            let model = store::load_model(&model)?;
            let bundle = load_bundle_for(&model, &adapter)?;
            let merged = merge(&model, &bundle)?;
            store::save_model(&merged, &out)?;
            println!("wrote merged model to {}", out.display());
        }
        Command::Inspect { file } => {
            print!("{}", store::inspect(&file)?);
        }
        Command::Gradcheck { seed } => {
            let results = gradsuite::full_suite(seed..seed + 5)?;
            let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
            let mut order = Vec::new();
            for r in &results {
                let e = worst.entry(&r.name).or_insert_with(|| {
                    order.push(r.name.as_str());
                    0.0
                });
                *e = e.max(r.error);
            }
            let mut failed = 0;
            for name in order {
                let e = worst[name];
                let ok = e <= TOLERANCE;
                failed += usize::from(!ok);
                println!("{name:<40} {e:.3e} {}", if ok { "ok" } else { "FAIL" });
            }
            if failed > 0 {
                return Err(Failure::Numeric(format!(
                    "{failed} gradient checks exceed relative error {TOLERANCE:e}"
                )));
            }
            println!("all {} checks within {TOLERANCE:e}", results.len());
        }
        Command::Eval {
            model,
            adapter,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sched = cfg.schedule()?;
            let model = store::load_model(&model)?;
            check_unet(&cfg, &model)?;
            let spec = cfg.eval.spec();
            let bundle = adapter.map(|p| load_bundle_for(&model, &p)).transpose()?;
            let mut report = multires_eval(&model, bundle.as_ref(), &sched, &cfg.dataset, &spec)?;
            if let Some(b) = &bundle {
                let grid = ablation_grid(
                    &model,
                    b,
                    &cfg.eval.modes(),
                    &cfg.eval.ablation_alphas,
                    &sched,
                    &cfg.dataset,
                    &spec,
                )?;
                merge_reports(&mut report, grid);
            }
            write(&out, report.to_jsonl().as_bytes())?;
            print!("{}", report.to_table());
            println!("wrote {}", out.display());
        }
        Command::BenchTiled {
            model,
            adapter,
            target,
            tile,
            overlap,
            steps,
            guidance,
            seed,
            class,
            repeats,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let sched = cfg.schedule()?;
            let model = store::load_model(&model)?;
            let bundle = adapter.map(|p| load_bundle_for(&model, &p)).transpose()?;
            let view = bundle.as_ref().map(|b| b.apply(&model)).transpose()?;
            let den: &dyn Denoiser = match &view {
                Some(v) => v,
                None => &model,
            };
            let sampler = SamplerConfig {
                steps,
                guidance_scale: guidance,
                eta: 0.0,
                seed,
            };
            tile_count(target, tile, overlap)?;
            let r = bench_latency(den, &sched, target, tile, overlap, &sampler, class, repeats)?;
            println!(
                "target {}x{}, tile {}x{}, overlap {overlap}: {} tiles per step",
                target.0, target.1, tile.0, tile.1, r.tiles_per_step
            );
            println!("direct {:.3} ms, tiled {:.3} ms (median of {})", r.direct_ms, r.tiled_ms, r.repeats);
            println!("ratio {:.3}", r.ratio);
        }
    }
    Ok(())
}

const TOLERANCE: f64 = 1e-4;

/// Appends the rows of `extra` whose variant `report` does not already have.
fn merge_reports(report: &mut EvalReport, extra: EvalReport) {
    let known: Vec<String> = report.variants().iter().map(|v| v.to_string()).collect();
    report
        .rows
        .extend(extra.rows.into_iter().filter(|r| !known.contains(&r.variant)));
    report.meta.wall_clock_ms += extra.meta.wall_clock_ms;
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(m) | Failure::Invalid(m) | Failure::Numeric(m)) = &f;
            let kind = match f {
                Failure::Usage(_) => "usage error",
                Failure::Invalid(_) => "error",
                Failure::Numeric(_) => "numeric error",
            };
            eprintln!("resadapter: {kind}: {m}");
            ExitCode::from(f.code())
        }
    }
}
