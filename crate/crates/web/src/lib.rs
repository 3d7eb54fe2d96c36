//! Browser demo: add noise, look at Haar subbands, train and run a small
//! denoiser. Images cross the boundary as RGBA bytes (canvas `ImageData`).
//!
//! The plain functions are usable (and tested) natively; the
//! `#[wasm_bindgen]` wrappers only adapt types.

use std::io::Cursor;

use mwdcnn::data::{add_awgn_seeded, synthetic_image, ImageBuffer, NoiseMode, PatchDataset};
use mwdcnn::metrics;
use mwdcnn::model::read_checkpoint;
use mwdcnn::training::{assemble_batch, loss_and_grads, AdamState, TrainPlan};
use mwdcnn::wavelet::dwt2d;
use mwdcnn::{ModelConfig, Mwdcnn};
use wasm_bindgen::prelude::*;

fn rgba_to_image(rgba: &[u8], width: usize, height: usize, channels: usize) -> Result<ImageBuffer, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes, got {}", width * height * 4, rgba.len()));
    }
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    let img = ImageBuffer::new(width, height, 3, rgb).map_err(|e| e.to_string())?;
    img.with_channels(channels).map_err(|e| e.to_string())
}

fn image_to_rgba(img: &ImageBuffer) -> Vec<u8> {
    let rgb = img.to_rgb();
    rgb.pixels.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

/// Adds seeded Gaussian noise (sigma on the 0..255 scale) to every colour
/// channel, clipped for display.
pub fn add_noise(rgba: &[u8], width: usize, height: usize, sigma: f64, seed: u64) -> Result<Vec<u8>, String> {
    let img = rgba_to_image(rgba, width, height, 3)?;
    let noisy = add_awgn_seeded(&img.to_tensor::<f32>(), sigma, seed, 0);
    Ok(image_to_rgba(&ImageBuffer::from_tensor(&noisy).map_err(|e| e.to_string())?))
}

/// PSNR in dB over the RGB channels.
pub fn psnr(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, String> {
    let (a, b) = (rgba_to_image(a, width, height, 3)?, rgba_to_image(b, width, height, 3)?);
    metrics::psnr(&a, &b).map_err(|e| e.to_string())
}

/// One-level Haar transform of the luma as a 2x2 mosaic: LL top-left, LH
/// top-right, HL bottom-left, HH bottom-right. Odd trailing rows/columns are
/// dropped. Detail bands are shown as 128 + 2x coefficient.
pub fn subband_mosaic(rgba: &[u8], width: usize, height: usize) -> Result<(Vec<u8>, usize, usize), String> {
    let (w, h) = (width & !1, height & !1);
    if w == 0 || h == 0 {
        return Err("image must be at least 2x2".into());
    }
    let gray = rgba_to_image(rgba, width, height, 1)?.crop(0, 0, w, h);
    let bands = dwt2d(&gray.to_tensor::<f32>()).map_err(|e| e.to_string())?;
    let (hw, hh) = (w / 2, h / 2);
    let mut out = vec![0u8; w * h * 4];
    for (b, band) in bands.data().chunks_exact(hw * hh).enumerate() {
        let (ox, oy) = ((b % 2) * hw, (b / 2) * hh);
        // LL of an orthonormal Haar is twice the local mean
        let shade = |v: f32| if b == 0 { v * 0.5 } else { 0.5 + 2.0 * v };
        for y in 0..hh {
            for x in 0..hw {
                let v = (shade(band[y * hw + x]).clamp(0.0, 1.0) * 255.0).round() as u8;
                let o = ((oy + y) * w + ox + x) * 4;
                out[o..o + 4].copy_from_slice(&[v, v, v, 255]);
            }
        }
    }
    Ok((out, w, h))
}

/// A small denoiser that can be trained a few steps at a time.
pub struct Trainer {
    model: Mwdcnn<f32>,
    adam: AdamState<f32>,
    dataset: PatchDataset,
    plan: TrainPlan,
    lr: f64,
    cursor: usize,
    pub steps: usize,
}

impl Trainer {
    /// Gray network with `base_channels`, trained on synthetic 64x64 images
    /// at the given noise level.
    pub fn new(base_channels: usize, sigma: f64, seed: u64) -> Result<Self, String> {
        let model = Mwdcnn::new(ModelConfig { seed, ..ModelConfig::toy(base_channels) }).map_err(|e| e.to_string())?;
        Self::with_model(model, sigma, seed)
    }

    pub fn from_checkpoint(bytes: &[u8], sigma: f64) -> Result<Self, String> {
        let (model, adam) = read_checkpoint::<f32, _>(Cursor::new(bytes)).map_err(|e| e.to_string())?;
        let seed = model.config().seed;
        let mut t = Self::with_model(model, sigma, seed)?;
        if let Some(a) = adam {
            t.adam = a;
        }
        Ok(t)
    }

    fn with_model(model: Mwdcnn<f32>, sigma: f64, seed: u64) -> Result<Self, String> {
        let c = model.config().in_channels;
        let sources = (0..6).map(|i| (format!("synth{i}"), synthetic_image(64, 64, c, seed.wrapping_add(i)))).collect();
        let dataset = PatchDataset::new(sources, 8, 32, NoiseMode::Fixed(sigma), seed).map_err(|e| e.to_string())?;
        let plan = TrainPlan { batch_size: 8, ..TrainPlan::default() };
        Ok(Self { adam: AdamState::new(model.params()), model, dataset, plan, lr: 1e-3, cursor: 0, steps: 0 })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Runs `n` Adam steps over consecutive batches and returns the last loss.
    pub fn train_steps(&mut self, n: usize) -> Result<f64, String> {
        let mut loss = f64::NAN;
        for _ in 0..n {
            let len = self.dataset.len();
            let idx: Vec<usize> = (0..self.plan.batch_size).map(|k| (self.cursor + k) % len).collect();
            self.cursor = (self.cursor + self.plan.batch_size) % len;
            let (clean, noisy) = assemble_batch::<f32>(&self.dataset, &idx).map_err(|e| e.to_string())?;
            let (l, grads) = loss_and_grads(&self.model, &self.plan, clean, noisy).map_err(|e| e.to_string())?;
            if !l.is_finite() {
                return Err(format!("loss became {l}"));
            }
            self.adam.step(self.model.params_mut().tensors_mut(), &grads, self.lr).map_err(|e| e.to_string())?;
            self.steps += 1;
            loss = l;
        }
        Ok(loss)
    }

    pub fn denoise(&self, rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>, String> {
        let img = rgba_to_image(rgba, width, height, self.model.config().in_channels)?;
        let out = self.model.denoise_any(&img.to_tensor::<f32>()).map_err(|e| e.to_string())?;
        Ok(image_to_rgba(&ImageBuffer::from_tensor(&out).map_err(|e| e.to_string())?))
    }

    pub fn model(&self) -> &Mwdcnn<f32> {
        &self.model
    }
}

fn js_err(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen(js_name = addNoise)]
pub fn add_noise_js(rgba: &[u8], width: usize, height: usize, sigma: f64, seed: u32) -> Result<Vec<u8>, JsError> {
    add_noise(rgba, width, height, sigma, seed as u64).map_err(js_err)
}

#[wasm_bindgen(js_name = psnr)]
pub fn psnr_js(a: &[u8], b: &[u8], width: usize, height: usize) -> Result<f64, JsError> {
    psnr(a, b, width, height).map_err(js_err)
}

/// Returns the mosaic as RGBA bytes; its size is the input size rounded
/// down to even.
#[wasm_bindgen(js_name = subbandMosaic)]
pub fn subband_mosaic_js(rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>, JsError> {
    subband_mosaic(rgba, width, height).map(|(px, _, _)| px).map_err(js_err)
}

#[wasm_bindgen]
pub struct Denoiser(Trainer);

#[wasm_bindgen]
impl Denoiser {
    #[wasm_bindgen(constructor)]
    pub fn new(base_channels: usize, sigma: f64, seed: u32) -> Result<Denoiser, JsError> {
        Trainer::new(base_channels, sigma, seed as u64).map(Denoiser).map_err(js_err)
    }

    #[wasm_bindgen(js_name = fromCheckpoint)]
    pub fn from_checkpoint(bytes: &[u8], sigma: f64) -> Result<Denoiser, JsError> {
        Trainer::from_checkpoint(bytes, sigma).map(Denoiser).map_err(js_err)
    }

    #[wasm_bindgen(js_name = setLearningRate)]
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.0.set_learning_rate(lr);
    }

    #[wasm_bindgen(js_name = trainSteps)]
    pub fn train_steps(&mut self, n: usize) -> Result<f64, JsError> {
        self.0.train_steps(n).map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn steps(&self) -> usize {
        self.0.steps
    }

    #[wasm_bindgen(getter, js_name = paramCount)]
    pub fn param_count(&self) -> usize {
        self.0.model().param_count()
    }

    pub fn denoise(&self, rgba: &[u8], width: usize, height: usize) -> Result<Vec<u8>, JsError> {
        self.0.denoise(rgba, width, height).map_err(js_err)
    }
}
