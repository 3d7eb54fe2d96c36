//! Image I/O, patch extraction, dihedral augmentation and Gaussian noise.
//!
//! Randomness comes from ChaCha8 streams: every random decision is a pure
//! function of `(seed, domain, index)` so any patch can be regenerated on its
//! own, in any order or on any thread.

use std::fs;
use std::io::{self, BufRead, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unsupported image format{}", .0.as_deref().map(|p| format!(" ({p})")).unwrap_or_default())]
    UnsupportedFormat(Option<String>),
    #[error("unsupported bit depth {0}; only 8-bit images are accepted")]
    BitDepth(u32),
    #[error("malformed image: {0}")]
    Malformed(String),
    #[error("image {width}x{height} is smaller than the {size}x{size} patch")]
    TooSmall { width: usize, height: usize, size: usize },
    #[error("augmentation mode {0} is outside 0..8")]
    AugmentMode(u8),
    #[error("channel mismatch: expected {expected}, got {got}")]
    Channels { expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// 8-bit image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(DataError::Invalid(format!("{channels} channels; expected 1 or 3")));
        }
        if pixels.len() != width * height * channels {
            return Err(DataError::Malformed(format!(
                "{width}x{height}x{channels} image with {} samples",
                pixels.len()
            )));
        }
        Ok(Self { width, height, channels, pixels })
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Samples divided by 255.
    pub fn normalized(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// 1 x C x H x W tensor in [0, 1].
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn([1, c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            T::lit(self.pixels[p * c + ch] as f64 / 255.0)
        })
    }

    /// Quantizes sample 0 of an N x C x H x W tensor: clamp to [0, 1], scale
    /// by 255 and round half away from zero.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let [_, c, h, w] = t.dims4("image").map_err(|e| DataError::Invalid(e.to_string()))?;
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                pixels[p * c + ch] = quantize(t.data()[ch * h * w + p].as_f64());
            }
        }
        Self::new(w, h, c, pixels)
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> ImageBuffer {
        let c = self.channels;
        let mut pixels = Vec::with_capacity(width * height * c);
        for row in y..y + height {
            let start = (row * self.width + x) * c;
            pixels.extend_from_slice(&self.pixels[start..start + width * c]);
        }
        ImageBuffer { width, height, channels: c, pixels }
    }

    /// ITU-R BT.601 luma, rounded to 8 bits.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = luminance(self).into_iter().map(|y| y.round().clamp(0.0, 255.0) as u8).collect();
        ImageBuffer { width: self.width, height: self.height, channels: 1, pixels }
    }

    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&p| [p, p, p]).collect(),
        }
    }

    pub fn with_channels(&self, channels: usize) -> Result<ImageBuffer> {
        match channels {
            1 => Ok(self.to_gray()),
            3 => Ok(self.to_rgb()),
            other => Err(DataError::Channels { expected: other, got: self.channels }),
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    // f64::round rounds half away from zero
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// BT.601 luma of every pixel, unrounded, on the 0..255 scale.
pub fn luminance(img: &ImageBuffer) -> Vec<f64> {
    if img.channels == 1 {
        return img.pixels.iter().map(|&p| p as f64).collect();
    }
    img.pixels.chunks_exact(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

// ---- file formats ---------------------------------------------------------

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    decode_image(&bytes)
}

/// Decodes PNG (8-bit gray / gray+alpha / RGB / RGBA / palette) or binary
/// PGM (P5) / PPM (P6). Alpha is discarded.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(bytes)
    } else {
        Err(DataError::UnsupportedFormat(None))
    }
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| DataError::Malformed(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(DataError::BitDepth(reader.info().bit_depth as u32));
    }
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader.next_frame(&mut buf).map_err(|e| DataError::Malformed(e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let buf = &buf[..frame.buffer_size()];
    let (pixels, channels) = match color {
        png::ColorType::Grayscale => (buf.to_vec(), 1),
        png::ColorType::GrayscaleAlpha => (buf.chunks_exact(2).map(|p| p[0]).collect(), 1),
        png::ColorType::Rgb => (buf.to_vec(), 3),
        png::ColorType::Rgba => (buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(), 3),
        png::ColorType::Indexed => return Err(DataError::UnsupportedFormat(Some("unexpanded palette".into()))),
    };
    ImageBuffer::new(w, h, channels, pixels)
}

fn pnm_token(r: &mut io::Cursor<&[u8]>) -> Result<String> {
    let mut tok = String::new();
    loop {
        let mut b = [0u8];
        if r.read(&mut b).map_err(|e| DataError::Malformed(e.to_string()))? == 0 {
            break;
        }
        match b[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip).ok();
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            c => tok.push(c as char),
        }
    }
    if tok.is_empty() {
        return Err(DataError::Malformed("truncated PNM header".into()));
    }
    Ok(tok)
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let mut r = io::Cursor::new(bytes);
    let magic = pnm_token(&mut r)?;
    let channels = if magic == "P5" { 1 } else { 3 };
    let mut num = |what: &str| -> Result<usize> {
        pnm_token(&mut r)?.parse().map_err(|_| DataError::Malformed(format!("bad PNM {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(DataError::BitDepth(if maxval > 255 { 16 } else { 0 }));
    }
    // the single whitespace byte after maxval was consumed by the tokenizer
    let start = r.position() as usize;
    let need = w * h * channels;
    let data = bytes
        .get(start..start + need)
        .ok_or_else(|| DataError::Malformed(format!("PNM payload shorter than {need} bytes")))?;
    ImageBuffer::new(w, h, channels, data.to_vec())
}

pub fn encode_pnm(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| DataError::Malformed(e.to_string()))?;
        w.write_image_data(&img.pixels).map_err(|e| DataError::Malformed(e.to_string()))?;
    }
    Ok(out)
}

/// Format chosen by extension: `.png`, `.pgm`, `.ppm` or `.pnm`.
pub fn save_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(img)?,
        Some("pgm") if img.channels == 1 => encode_pnm(img),
        Some("ppm") if img.channels == 3 => encode_pnm(img),
        Some("pnm") => encode_pnm(img),
        other => return Err(DataError::UnsupportedFormat(other.map(|e| format!(".{e}")))),
    };
    fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Image files (by extension) in `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let rd = fs::read_dir(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    out.sort();
    Ok(out)
}

// ---- randomness -------------------------------------------------------------

const DOMAIN_POSITIONS: u64 = 1;
const DOMAIN_AUGMENT: u64 = 2;
const DOMAIN_NOISE: u64 = 3;

/// Independent ChaCha8 stream for `(seed, domain, index)`.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Two independent standard normal samples.
pub fn box_muller<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    // u1 in (0, 1] keeps the log finite
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Adds i.i.d. N(0, (sigma/255)^2) noise to a [0, 1] tensor; no clipping.
pub fn add_awgn<T: Element, R: Rng + ?Sized>(clean: &Tensor<T>, sigma: f64, rng: &mut R) -> Tensor<T> {
    if sigma == 0.0 {
        return clean.clone();
    }
    let scale = sigma / 255.0;
    let mut out = clean.clone();
    let mut spare = None;
    for v in out.data_mut() {
        let z = match spare.take() {
            Some(z) => z,
            None => {
                let (a, b) = box_muller(rng);
                spare = Some(b);
                a
            }
        };
        *v = *v + T::lit(z * scale);
    }
    out
}

/// [`add_awgn`] with the noise stream selected by `(seed, index)`.
pub fn add_awgn_seeded<T: Element>(clean: &Tensor<T>, sigma: f64, seed: u64, index: u64) -> Tensor<T> {
    add_awgn(clean, sigma, &mut stream_rng(seed, DOMAIN_NOISE, index))
}

// ---- patches and augmentation ----------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub image: ImageBuffer,
}

fn patch_positions(img: &ImageBuffer, count: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    if img.width < size || img.height < size {
        return Err(DataError::TooSmall { width: img.width, height: img.height, size });
    }
    Ok((0..count).map(|_| (rng.random_range(0..=img.width - size), rng.random_range(0..=img.height - size))).collect())
}

/// `count` square crops at uniformly drawn top-left corners.
pub fn extract_patches(img: &ImageBuffer, count: usize, size: usize, seed: u64) -> Result<Vec<Patch>> {
    let mut rng = stream_rng(seed, DOMAIN_POSITIONS, 0);
    Ok(patch_positions(img, count, size, &mut rng)?
        .into_iter()
        .map(|(x, y)| Patch { x, y, image: img.crop(x, y, size, size) })
        .collect())
}

/// Source coordinate read by output pixel `(x, y)` of an `w x h` image under
/// dihedral mode `mode`. Modes 0-3 rotate counter-clockwise by 0/90/180/270
/// degrees; modes 4-7 apply the same rotation and then a horizontal flip.
fn dihedral_source(mode: u8, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
    let (out_w, _) = if mode % 2 == 1 { (h, w) } else { (w, h) };
    let x = if mode >= 4 { out_w - 1 - x } else { x };
    match mode % 4 {
        0 => (x, y),
        1 => (w - 1 - y, x),
        2 => (w - 1 - x, h - 1 - y),
        _ => (y, h - 1 - x),
    }
}

/// One of the eight symmetries of the square.
pub fn augment(img: &ImageBuffer, mode: u8) -> Result<ImageBuffer> {
    if mode >= 8 {
        return Err(DataError::AugmentMode(mode));
    }
    let (w, h, c) = (img.width, img.height, img.channels);
    let (ow, oh) = if mode % 2 == 1 { (h, w) } else { (w, h) };
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = dihedral_source(mode, x, y, w, h);
            let s = (sy * w + sx) * c;
            pixels.extend_from_slice(&img.pixels[s..s + c]);
        }
    }
    Ok(ImageBuffer { width: ow, height: oh, channels: c, pixels })
}

/// The mode that undoes `mode`.
pub fn inverse_mode(mode: u8) -> u8 {
    if mode >= 4 {
        mode
    } else {
        (4 - mode) % 4
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One sigma (0..255 scale) for every patch.
    Fixed(f64),
    /// Sigma drawn uniformly from `[min, max]` per patch.
    Blind { min: f64, max: f64 },
}

impl NoiseMode {
    pub const BLIND: NoiseMode = NoiseMode::Blind { min: 0.0, max: 55.0 };
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub source: usize,
    pub x: usize,
    pub y: usize,
    pub augmentation: u8,
}

/// A clean/noisy training pair, each 1 x C x S x S.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair<T> {
    pub clean: Tensor<T>,
    pub noisy: Tensor<T>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    sources: Vec<(String, ImageBuffer)>,
    entries: Vec<PatchEntry>,
    patch_size: usize,
    noise: NoiseMode,
    seed: u64,
}

#[derive(Serialize)]
struct ManifestRow<'a> {
    index: usize,
    source: &'a str,
    x: usize,
    y: usize,
    augmentation: u8,
    sigma: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    patch_size: usize,
    noise: NoiseMode,
    patches: Vec<ManifestRow<'a>>,
}

impl PatchDataset {
    /// Cuts `per_image` patches from every source and assigns each patch one
    /// random augmentation.
    pub fn new(
        sources: Vec<(String, ImageBuffer)>,
        per_image: usize,
        patch_size: usize,
        noise: NoiseMode,
        seed: u64,
    ) -> Result<Self> {
        let channels = sources.first().ok_or_else(|| DataError::Invalid("no source images".into()))?.1.channels;
        let mut entries = Vec::with_capacity(sources.len() * per_image);
        for (i, (_, img)) in sources.iter().enumerate() {
            if img.channels != channels {
                return Err(DataError::Channels { expected: channels, got: img.channels });
            }
            let mut rng = stream_rng(seed, DOMAIN_POSITIONS, i as u64);
            for (x, y) in patch_positions(img, per_image, patch_size, &mut rng)? {
                entries.push(PatchEntry { source: i, x, y, augmentation: 0 });
            }
        }
        for (k, e) in entries.iter_mut().enumerate() {
            e.augmentation = stream_rng(seed, DOMAIN_AUGMENT, k as u64).random_range(0..8);
        }
        Ok(Self { sources, entries, patch_size, noise, seed })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PatchEntry] {
        &self.entries
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    pub fn channels(&self) -> usize {
        self.sources[0].1.channels
    }

    pub fn sigma(&self, index: usize) -> f64 {
        match self.noise {
            NoiseMode::Fixed(s) => s,
            NoiseMode::Blind { min, max } => {
                let u: f64 = stream_rng(self.seed, DOMAIN_NOISE, index as u64).random();
                min + (max - min) * u
            }
        }
    }

    /// Patch `index` after augmentation, as an 8-bit image.
    pub fn clean_patch(&self, index: usize) -> ImageBuffer {
        let e = &self.entries[index];
        let crop = self.sources[e.source].1.crop(e.x, e.y, self.patch_size, self.patch_size);
        augment(&crop, e.augmentation).expect("mode < 8")
    }

    /// Deterministic in `(seed, index)`.
    pub fn pair<T: Element>(&self, index: usize) -> TrainingPair<T> {
        let clean = self.clean_patch(index).to_tensor::<T>();
        let sigma = self.sigma(index);
        let mut rng = stream_rng(self.seed, DOMAIN_NOISE, index as u64);
        if matches!(self.noise, NoiseMode::Blind { .. }) {
            // first draw of this stream picked sigma
            let _: f64 = rng.random();
        }
        let noisy = add_awgn(&clean, sigma, &mut rng);
        TrainingPair { clean, noisy, sigma }
    }

    pub fn manifest_json(&self) -> String {
        let m = Manifest {
            seed: self.seed,
            patch_size: self.patch_size,
            noise: self.noise,
            patches: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, e)| ManifestRow {
                    index: i,
                    source: &self.sources[e.source].0,
                    x: e.x,
                    y: e.y,
                    augmentation: e.augmentation,
                    sigma: self.sigma(i),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&m).expect("serializable")
    }
}

/// Piecewise-smooth procedural test image: a shaded background with a few
/// flat discs and rectangles and a soft sinusoidal texture.
pub fn synthetic_image(width: usize, height: usize, channels: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        let base: f64 = rng.random_range(0.1..0.9);
        if channels == 1 {
            [base; 3]
        } else {
            [base, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
        }
    };
    let (gx, gy) = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
    let bg = color(&mut rng);
    enum Shape {
        Disc { cx: f64, cy: f64, r: f64 },
        Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    }
    let shapes: Vec<(Shape, [f64; 3])> = (0..rng.random_range(4..9))
        .map(|_| {
            let s = if rng.random_bool(0.5) {
                Shape::Disc {
                    cx: rng.random_range(0.0..1.0),
                    cy: rng.random_range(0.0..1.0),
                    r: rng.random_range(0.08..0.3),
                }
            } else {
                let (x0, y0) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
                Shape::Rect { x0, y0, x1: x0 + rng.random_range(0.1..0.4), y1: y0 + rng.random_range(0.1..0.4) }
            };
            (s, color(&mut rng))
        })
        .collect();
    let (fx, fy, amp) = (rng.random_range(2.0..8.0), rng.random_range(2.0..8.0), rng.random_range(0.02..0.08));
    let mut pixels = Vec::with_capacity(width * height * channels);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
            let mut c = bg.map(|b| b + gx * (u - 0.5) + gy * (v - 0.5));
            for (s, col) in &shapes {
                let inside = match *s {
                    Shape::Disc { cx, cy, r } => (u - cx).powi(2) + (v - cy).powi(2) < r * r,
                    Shape::Rect { x0, y0, x1, y1 } => u >= x0 && u < x1 && v >= y0 && v < y1,
                };
                if inside {
                    c = *col;
                }
            }
            let tex = amp * (std::f64::consts::TAU * (fx * u + fy * v)).sin();
            for ch in c.iter().take(channels) {
                pixels.push(quantize(ch + tex));
            }
        }
    }
    ImageBuffer { width, height, channels, pixels }
}
