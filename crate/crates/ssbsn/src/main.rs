//! Command-line interface: train, denoise, verify, bench, attnmap.
//!
//! Exit codes: 0 on success, 1 when a verification check fails, 2 on usage,
//! configuration, or I/O errors.

use clap::{Parser, Subcommand};
use ssbsn::analysis::{export_attention_overlay, flop_ratio_report};
use ssbsn::config::RunConfig;
use ssbsn::data::{psnr, read_ppm, ssim, write_ppm, MemDataset};
use ssbsn::net::{build_network, load_checkpoint, SsbsnModel};
use ssbsn::pd::{denoise_ensemble, denoise_pd};
use ssbsn::train::{train_loop, AdamState};
use ssbsn::verify::{render_results, run_verify};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ssbsn", about = "Self-similarity blind-spot network denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the dataset named in the config; writes checkpoints and logs.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Checkpoint to resume from (an epoch_NNN.ckpt from a prior run).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Global step to resume at; inferred from an epoch_NNN.ckpt name.
        #[arg(long)]
        start_step: Option<u64>,
        /// Emit a step log line every N steps.
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Denoise one PPM image with a trained checkpoint.
    Denoise {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Average over all eight dihedral symmetries.
        #[arg(long)]
        ensemble: bool,
        /// Override the test-time pixel-shuffle stride.
        #[arg(long)]
        pd_test: Option<usize>,
        /// Optional clean reference; prints PSNR/SSIM when given.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run the self-verification matrix.
    Verify {
        /// Raise trial counts (slower, tighter evidence).
        #[arg(long)]
        full: bool,
    },
    /// Print the closed-form complexity comparison table.
    Bench {
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Export an attention-map overlay for one query pixel.
    Attnmap {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Global module index (path * modules_per_path + position).
        #[arg(long)]
        layer: usize,
        /// Query pixel as X,Y.
        #[arg(long)]
        pixel: String,
        #[arg(long, default_value_t = 8)]
        topk: usize,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    // Advisory knob: this build is single-threaded; values other than 1 are
    // accepted and reported, not acted on.
    if let Ok(v) = std::env::var("SSBSN_THREADS") {
        if v.trim() != "1" {
            eprintln!("note: SSBSN_THREADS={v} requested; this build uses 1 thread");
        }
    }
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run() -> ssbsn::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            resume,
            start_step,
            log_every,
        } => {
            let cfg = RunConfig::load(&config)?;
            let data_dir = cfg.paths.data.clone().ok_or_else(|| {
                ssbsn::Error::Config("[paths] data = ... is required for training".into())
            })?;
            let out_dir = cfg.paths.out.clone().ok_or_else(|| {
                ssbsn::Error::Config("[paths] out = ... is required for training".into())
            })?;
            std::fs::create_dir_all(&out_dir)?;
            let dataset = MemDataset::<f32>::load_dir(&data_dir)?;
            let (mut model, start) = match &resume {
                Some(path) => {
                    let model = load_checkpoint::<f32>(path)?;
                    let start = start_step
                        .or_else(|| infer_resume_step(path, cfg.train.steps_per_epoch))
                        .ok_or_else(|| {
                            ssbsn::Error::Config(
                                "cannot infer resume step; pass --start-step".into(),
                            )
                        })?;
                    (model, start)
                }
                None => (build_network::<f32>(&cfg.network)?, 0),
            };
            let mut adam = AdamState::new();
            adam.t = start;
            let mut log = TeeLog::create(&out_dir.join("train.log"))?;
            train_loop(
                &mut model,
                &mut adam,
                &cfg.train,
                &dataset,
                Some(&dataset),
                &mut log,
                Some(&out_dir),
                start,
                log_every,
            )?;
            println!("training complete; checkpoints in {}", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Denoise {
            config,
            checkpoint,
            input,
            output,
            ensemble,
            pd_test,
            reference,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model: SsbsnModel<f32> = load_checkpoint(&checkpoint)?;
            let image = read_ppm::<f32>(&input)?;
            let s = pd_test.unwrap_or(cfg.train.pd.s_test);
            let den = if ensemble {
                denoise_ensemble(&model, &image, s)
            } else {
                denoise_pd(&model, &image, s)
            };
            write_ppm(&output, &den)?;
            if let Some(refpath) = reference {
                let clean = read_ppm::<f32>(&refpath)?;
                println!("psnr {:.4} dB  ssim {:.5}", psnr(&den, &clean), ssim(&den, &clean));
            }
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { full } => {
            let (pass, results) = run_verify(full);
            print!("{}", render_results(&results));
            if pass {
                println!("all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("CHECKS FAILED");
                Ok(ExitCode::from(1))
            }
        }
        Command::Bench { config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let report = flop_ratio_report(&cfg.bench.sizes, &cfg.bench.channels, &cfg.bench.d_hats);
            print!("{}", report.render());
            Ok(ExitCode::SUCCESS)
        }
        Command::Attnmap {
            config,
            checkpoint,
            layer,
            pixel,
            topk,
            input,
            output,
        } => {
            let cfg = RunConfig::load(&config)?;
            let model: SsbsnModel<f32> = match checkpoint {
                Some(p) => load_checkpoint(&p)?,
                None => build_network(&cfg.network)?,
            };
            let (px, py) = parse_pixel(&pixel)?;
            let image = read_ppm::<f32>(&input)?;
            // Pad/crop responsibilities sit with the caller here: attention
            // maps are taken on the raw image, so its size must already fit
            // the attention grids.
            let peers = export_attention_overlay(&model, &image, layer, (px, py), topk, &output)?;
            for p in &peers {
                println!("{} {} {:.6}", p.x, p.y, p.weight);
            }
            println!("wrote {} (+ .txt sidecar)", output.with_extension("ppm").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_pixel(s: &str) -> ssbsn::Result<(usize, usize)> {
    let (x, y) = s
        .split_once(',')
        .ok_or_else(|| ssbsn::Error::Config(format!("pixel must be X,Y, got {s:?}")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| ssbsn::Error::Config(format!("bad pixel coordinate {v:?}")))
    };
    Ok((p(x)?, p(y)?))
}

/// `epoch_NNN.ckpt` resumes at the first step of epoch NNN+1.
fn infer_resume_step(path: &std::path::Path, steps_per_epoch: usize) -> Option<u64> {
    let name = path.file_stem()?.to_str()?;
    let epoch: u64 = name.strip_prefix("epoch_")?.parse().ok()?;
    Some((epoch + 1) * steps_per_epoch as u64)
}

/// Writes log lines to a file and mirrors them to stdout.
struct TeeLog {
    file: std::fs::File,
}

impl TeeLog {
    fn create(path: &std::path::Path) -> std::io::Result<Self> {
        Ok(TeeLog {
            file: std::fs::File::create(path)?,
        })
    }
}

impl std::io::Write for TeeLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        print!("{}", String::from_utf8_lossy(buf));
        self.file.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.file.flush()
    }
}
