use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use mwdcnn::data::{self, add_awgn_seeded, ImageBuffer, PatchDataset};
use mwdcnn::gradsuite::{run_suite, SuiteOptions};
use mwdcnn::metrics::{psnr, ssim, QualityReport};
use mwdcnn::model::{
    dcb_stack, load_checkpoint, model_cost, peek_checkpoint, save_checkpoint, six_conv_stack, CheckpointError,
};
use mwdcnn::training::{train as run_training, AdamState, IterRecord, TrainError, TrainObserver, LOG_HEADER};
use mwdcnn::{Element, Mwdcnn, Precision};

use crate::manifest::{write_atomic, RunManifest};
use crate::settings::{Overrides, RunConfig};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type CmdResult = Result<(), Failure>;

fn fail(code: u8) -> impl FnOnce(anyhow::Error) -> Failure {
    move |error| Failure { code, error }
}

fn config_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    fail(1)(e.into())
}

fn data_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    fail(2)(e.into())
}

fn checkpoint_err(path: &Path) -> impl FnOnce(CheckpointError) -> Failure + '_ {
    move |e| {
        let code = e.code();
        config_err(anyhow!(e).context(format!("{} (checkpoint error {code})", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(data_err)
}

fn load_sources(dir: &Path, channels: usize) -> Result<Vec<(String, ImageBuffer)>, Failure> {
    let paths = data::list_images(dir).map_err(data_err)?;
    if paths.is_empty() {
        return Err(data_err(anyhow!("{}: no PNG/PGM/PPM images", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let img = data::load_image(p).and_then(|i| i.with_channels(channels)).map_err(data_err)?;
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, img))
        })
        .collect()
}

struct Recorder {
    log: BufWriter<File>,
    ckpt_dir: PathBuf,
    saved: Vec<PathBuf>,
}

impl<T: Element> TrainObserver<T> for Recorder {
    fn on_iteration(&mut self, r: &IterRecord) -> Result<(), TrainError> {
        writeln!(self.log, "{}", r.csv_row())?;
        if r.iter.is_multiple_of(10) || r.iter == 1 {
            println!("iter {:6}  epoch {:3}  lr {:.1e}  loss {:.6}", r.iter, r.epoch, r.lr, r.loss);
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &Mwdcnn<T>, adam: &AdamState<T>) -> Result<(), TrainError> {
        self.log.flush()?;
        let path = self.ckpt_dir.join(format!("epoch_{epoch:03}.ckpt"));
        save_checkpoint(&path, model, Some(adam)).map_err(|e| TrainError::Observer(e.to_string()))?;
        println!("epoch {epoch} done, saved {}", path.display());
        self.saved.push(path);
        Ok(())
    }
}

pub fn train(overrides: &Overrides, out: &Path) -> CmdResult {
    let config = RunConfig::resolve(overrides).map_err(|e| config_err(anyhow!(e)))?;
    let dir = config
        .data
        .train_dir
        .clone()
        .ok_or_else(|| config_err(anyhow!("no training images: pass --data DIR or set data.train_dir")))?;
    let sources = load_sources(&dir, config.model.in_channels)?;
    let dataset = PatchDataset::new(
        sources,
        config.data.patches_per_image,
        config.data.patch_size,
        config.train.noise,
        config.train.seed,
    )
    .map_err(data_err)?;
    match config.model.precision {
        Precision::F32 => train_as::<f32>(config, dataset, out),
        Precision::F64 => train_as::<f64>(config, dataset, out),
    }
}

fn train_as<T: Element>(config: RunConfig, dataset: PatchDataset, out: &Path) -> CmdResult {
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let manifest_path = out.join("manifest.json");
    let log_path = out.join("train_log.csv");
    let patches_path = out.join("patches.json");
    let config_path = out.join("config.toml");

    let mut manifest = RunManifest::start("train", &config);
    manifest.outputs =
        vec![manifest_path.clone(), config_path.clone(), patches_path.clone(), log_path.clone(), ckpt_dir.clone()];
    manifest.write(&manifest_path).context("writing run manifest").map_err(data_err)?;
    write_atomic(&config_path, config.to_toml().as_bytes()).context("writing config").map_err(data_err)?;
    write_atomic(&patches_path, dataset.manifest_json().as_bytes())
        .context("writing patch manifest")
        .map_err(data_err)?;

    let mut model = Mwdcnn::<T>::new(config.model.clone()).map_err(config_err)?;
    println!(
        "{} patches from {} images, {} parameters, {} bits",
        dataset.len(),
        config.data.train_dir.as_ref().map_or(String::new(), |d| d.display().to_string()),
        model.param_count(),
        T::BITS
    );
    let log = File::create(&log_path).with_context(|| format!("creating {}", log_path.display())).map_err(data_err)?;
    let mut rec = Recorder { log: BufWriter::new(log), ckpt_dir, saved: Vec::new() };
    writeln!(rec.log, "{LOG_HEADER}").map_err(data_err)?;

    let result = run_training(&config.train, &mut model, &dataset, None, &mut rec);
    let _ = rec.log.flush();
    let outcome = match result {
        Ok(summary) => {
            let final_path = out.join("model.ckpt");
            save_checkpoint(&final_path, &model, Some(&summary.adam)).map_err(checkpoint_err(&final_path))?;
            manifest.outputs.push(final_path);
            println!(
                "{} iterations; final loss {:.6}",
                summary.records.len(),
                summary.records.last().map_or(f64::NAN, |r| r.loss)
            );
            Ok(())
        }
        Err(e @ TrainError::NonFinite { .. }) => Err(fail(3)(e.into())),
        Err(e @ (TrainError::Plan(_) | TrainError::Tensor(_))) => Err(config_err(e)),
        Err(e) => Err(data_err(e)),
    };
    manifest.outputs.extend(rec.saved);
    manifest.finish(match &outcome {
        Ok(()) => "ok".to_string(),
        Err(f) => format!("{:#}", f.error),
    });
    manifest.write(&manifest_path).context("writing run manifest").map_err(data_err)?;
    outcome
}

pub fn denoise(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    sigma: Option<f64>,
    clean: Option<&Path>,
    seed: u64,
) -> CmdResult {
    let header = peek_checkpoint(checkpoint).map_err(checkpoint_err(checkpoint))?;
    match header.dtype.as_str() {
        "f64" => denoise_as::<f64>(checkpoint, input, out, sigma, clean, seed),
        _ => denoise_as::<f32>(checkpoint, input, out, sigma, clean, seed),
    }
}

fn denoise_as<T: Element>(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    sigma: Option<f64>,
    clean: Option<&Path>,
    seed: u64,
) -> CmdResult {
    let (model, _) = load_checkpoint::<T>(checkpoint).map_err(checkpoint_err(checkpoint))?;
    let channels = model.config().in_channels;
    let image = data::load_image(input).and_then(|i| i.with_channels(channels)).map_err(data_err)?;
    let (reference, noisy) = match sigma {
        Some(s) => (Some(image.clone()), add_awgn_seeded(&image.to_tensor::<T>(), s, seed, 0)),
        None => (None, image.to_tensor::<T>()),
    };
    let reference = match clean {
        Some(p) => Some(data::load_image(p).and_then(|i| i.with_channels(channels)).map_err(data_err)?),
        None => reference,
    };
    let restored = model.denoise_any(&noisy).map_err(config_err)?;
    let restored = ImageBuffer::from_tensor(&restored).map_err(data_err)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    data::save_image(out, &restored).map_err(data_err)?;
    println!("wrote {} ({}x{})", out.display(), restored.width, restored.height);
    if let Some(r) = reference {
        let noisy_img = ImageBuffer::from_tensor(&noisy).map_err(data_err)?;
        let report = |img: &ImageBuffer| -> Result<(f64, f64), Failure> {
            Ok((psnr(&r, img).map_err(data_err)?, ssim(&r, img).map_err(data_err)?))
        };
        let (np, ns) = report(&noisy_img)?;
        let (dp, ds) = report(&restored)?;
        println!("input    PSNR {np:.2} dB  SSIM {ns:.4}");
        println!("denoised PSNR {dp:.2} dB  SSIM {ds:.4}");
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, dir: &Path, sigmas: &[f64], seed: u64, out: &Path) -> CmdResult {
    let header = peek_checkpoint(checkpoint).map_err(checkpoint_err(checkpoint))?;
    match header.dtype.as_str() {
        "f64" => eval_as::<f64>(checkpoint, dir, sigmas, seed, out),
        _ => eval_as::<f32>(checkpoint, dir, sigmas, seed, out),
    }
}

fn sigma_label(s: f64) -> String {
    format!("{s}").replace('.', "_")
}

fn eval_as<T: Element>(checkpoint: &Path, dir: &Path, sigmas: &[f64], seed: u64, out: &Path) -> CmdResult {
    if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(config_err(anyhow!("sigma {bad} must be >= 0")));
    }
    let (model, _) = load_checkpoint::<T>(checkpoint).map_err(checkpoint_err(checkpoint))?;
    let sources = load_sources(dir, model.config().in_channels)?;
    create_dir(out)?;
    for &sigma in sigmas {
        let mut report = QualityReport::default();
        for (i, (name, clean)) in sources.iter().enumerate() {
            let noisy = add_awgn_seeded(&clean.to_tensor::<T>(), sigma, seed, i as u64);
            let restored = model.denoise_any(&noisy).map_err(config_err)?;
            let restored = ImageBuffer::from_tensor(&restored).map_err(data_err)?;
            report.evaluate(name.clone(), clean, &restored).map_err(data_err)?;
        }
        let path = out.join(format!("eval_sigma{}.csv", sigma_label(sigma)));
        write_atomic(&path, report.to_csv().as_bytes())
            .with_context(|| format!("writing {}", path.display()))
            .map_err(data_err)?;
        println!(
            "sigma {sigma:>5}: mean PSNR {:.2} dB, mean SSIM {:.4} -> {}",
            report.mean_psnr(),
            report.mean_ssim(),
            path.display()
        );
    }
    Ok(())
}

pub fn gradcheck(base_channels: usize, seeds: u64, exhaustive: bool, inject_fault: bool) -> CmdResult {
    let opts = SuiteOptions {
        base_channels,
        primitive_seeds: seeds,
        block_sample: if exhaustive { None } else { SuiteOptions::default().block_sample },
        inject_fault,
        ..SuiteOptions::default()
    };
    let reports = run_suite(&opts).map_err(config_err)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    for r in &reports {
        print!("{r}");
    }
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        return Err(fail(3)(anyhow!("{failed} gradient checks exceeded tolerance")));
    }
    Ok(())
}

pub fn synth(
    out: &Path,
    count: usize,
    width: usize,
    height: usize,
    channels: usize,
    seed: u64,
    format: &str,
) -> CmdResult {
    if !matches!(channels, 1 | 3) {
        return Err(config_err(anyhow!("channels must be 1 or 3")));
    }
    let format = match (format, channels) {
        ("pgm" | "ppm", 1) => "pgm",
        ("pgm" | "ppm", _) => "ppm",
        _ => "png",
    };
    create_dir(out)?;
    for i in 0..count {
        let img = data::synthetic_image(width, height, channels, seed + i as u64);
        let path = out.join(format!("synth_{i:03}.{format}"));
        data::save_image(&path, &img).map_err(data_err)?;
    }
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

pub fn params(overrides: &Overrides, size: usize, layers: bool) -> CmdResult {
    let config = RunConfig::resolve(overrides).map_err(|e| config_err(anyhow!(e)))?;
    if size == 0 || !size.is_multiple_of(2) {
        return Err(config_err(anyhow!("--size must be even")));
    }
    let cost = model_cost(&config.model, size, size);
    if layers {
        for l in &cost.layers {
            println!("{:<24} {:>10} params {:>14} MACs", l.name, l.params, l.macs);
        }
    }
    println!(
        "network: {} weight layers, {} parameters, {:.3} GFLOPs at {size}x{size}",
        cost.layers.len(),
        cost.params(),
        cost.flops() as f64 / 1e9
    );
    for (name, c) in [
        ("conv + dynamic conv + conv", dcb_stack(config.model.in_channels, size, size)),
        ("six stacked 3x3 convs", six_conv_stack(size, size)),
    ] {
        println!("{name:<28} {:>8} parameters, {:.3} GFLOPs", c.params(), c.flops() as f64 / 1e9);
    }
    Ok(())
}
