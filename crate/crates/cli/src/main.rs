use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use himamba_cli::io::{list_pngs, load_png, save_png};
use himamba_cli::{run_eval, EvalOptions};
use himamba_core::data::make_pairs;
use himamba_core::grad::train::{save_loss_csv, TrainOptions};
use himamba_core::imaging::{mod_crop, self_ensemble};
use himamba_core::parallel::with_env_threads;
use himamba_core::{count_flops, count_params, grad, himamba_forward, verify, Error, HiMambaConfig, ModelWeights, Result};

#[derive(Parser)]
#[command(name = "himamba", version, about = "Hi-Mamba image super-resolution on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Super-resolve one PNG.
    Sr {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Average over the eight flips/rotations of the input.
        #[arg(long)]
        self_ensemble: bool,
    },
    /// Bicubic-degrade a folder of HR PNGs, super-resolve and report Y-channel PSNR/SSIM.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        self_ensemble: bool,
    },
    /// Train from a folder of HR PNGs.
    Train {
        /// Preset name (`tiny`, `mini`) or JSON file.
        #[arg(long)]
        config: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        lr_patch: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        /// Loss curve as `iteration,lr,loss` CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Report parameter and FLOP counts.
    Count {
        #[arg(long)]
        config: String,
        /// LR input size as `HxW`.
        #[arg(long, default_value = "64x64")]
        input_size: String,
    },
    /// Run the built-in oracle and invariant checks.
    Verify {
        #[arg(long)]
        filter: Option<String>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Input(format!("input size must look like 64x64, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Sr { weights, input, output, self_ensemble: ensemble } => {
            let w = ModelWeights::load(&weights)?;
            let img = load_png(&input)?;
            let sr = if ensemble { self_ensemble(&img, &w)? } else { himamba_forward(&img, &w)? };
            save_png(&sr, &output)?;
        }
        Command::Eval { weights, hr_dir, scale, csv, self_ensemble } => {
            let w = ModelWeights::load(&weights)?;
            if w.config.scale != scale {
                return Err(Error::Input(format!("weights are for x{}, asked for x{scale}", w.config.scale)));
            }
            let report = run_eval(&w, &hr_dir, scale, EvalOptions { self_ensemble })?;
            for warn in &report.warnings {
                eprintln!("warning: {warn}");
            }
            match csv {
                Some(path) => {
                    let mut f = std::fs::File::create(&path)?;
                    report.write_csv(&mut f)?;
                    println!("mean PSNR {:.4} dB, SSIM {:.6} ({} images)", report.mean_psnr(), report.mean_ssim(), report.rows.len());
                }
                None => report.write_csv(&mut std::io::stdout().lock())?,
            }
        }
        Command::Train { config, data, iters, seed, out, lr_patch, batch, lr, loss_csv } => {
            let cfg = HiMambaConfig::load(&config)?;
            let hr = list_pngs(&data)?
                .iter()
                .map(|p| mod_crop(&load_png(p)?, cfg.scale))
                .collect::<Result<Vec<_>>>()?;
            let pairs = make_pairs(&hr, cfg.scale)?;
            let opts = TrainOptions { iters, lr_patch, batch, base_lr: lr, seed, ..Default::default() };
            let outcome = grad::train(&cfg, &pairs, &opts)?;
            outcome.weights.save(&out)?;
            if let Some(path) = loss_csv {
                save_loss_csv(&outcome.curve, path)?;
            }
            if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
                println!("loss {:.6} -> {:.6} over {iters} iterations", first.loss, last.loss);
            }
        }
        Command::Count { config, input_size } => {
            let cfg = HiMambaConfig::load(&config)?;
            let (h, w) = parse_size(&input_size)?;
            println!("params {}", count_params(&cfg)?);
            println!("flops {} (input {h}x{w})", count_flops(&cfg, h, w)?);
        }
        Command::Verify { filter } => {
            let results = verify::run_checks(filter.as_deref());
            if results.is_empty() {
                return Err(Error::Input(format!("no check matches {:?}", filter.unwrap_or_default())));
            }
            let mut ok = true;
            for (name, r) in results {
                match r {
                    Ok(()) => println!("PASS {name}"),
                    Err(e) => {
                        ok = false;
                        println!("FAIL {name}: {e}");
                    }
                }
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match with_env_threads(|| run(cli.command)).and_then(|r| r) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
