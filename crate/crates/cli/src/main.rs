//! `mwdcnn` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or checkpoint error, 2 data error,
//! 3 numerical failure (non-finite loss, failed gradient check).

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::settings::Overrides;

#[derive(Parser, Debug)]
#[command(name = "mwdcnn", version = manifest::VERSION, about = "Wavelet / dynamic-convolution image denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on clean images with synthetic Gaussian noise
    Train {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory for checkpoints, logs and the run manifest
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Denoise one image
    Denoise {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Output image (.png, .pgm or .ppm)
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Treat the input as clean: add noise of this level first and
        /// report PSNR before and after
        #[arg(long)]
        sigma: Option<f64>,
        /// Clean reference for a PSNR/SSIM report
        #[arg(long, value_name = "PATH")]
        clean: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-sigma PSNR/SSIM reports over a directory of clean images
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated noise levels
        #[arg(long, value_delimiter = ',', default_value = "15,25,50")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Finite-difference check of every primitive, block and a small network
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        base_channels: usize,
        /// Random draws per primitive
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Check every element instead of a sample
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write synthetic test images
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 96)]
        height: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "png", value_parser = ["png", "pgm", "ppm"])]
        format: String,
    },
    /// Parameter and FLOP accounting for a configuration
    Params {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value_t = 48)]
        size: usize,
        /// Print every layer
        #[arg(long)]
        layers: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { overrides, out } => commands::train(&overrides, &out),
        Command::Denoise { checkpoint, input, out, sigma, clean, seed } => {
            commands::denoise(&checkpoint, &input, &out, sigma, clean.as_deref(), seed)
        }
        Command::Eval { checkpoint, data, sigmas, seed, out } => {
            commands::eval(&checkpoint, &data, &sigmas, seed, &out)
        }
        Command::Gradcheck { base_channels, seeds, exhaustive, inject_fault } => {
            commands::gradcheck(base_channels, seeds, exhaustive, inject_fault)
        }
        Command::Synth { out, count, width, height, channels, seed, format } => {
            commands::synth(&out, count, width, height, channels, seed, &format)
        }
        Command::Params { overrides, size, layers } => commands::params(&overrides, size, layers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
