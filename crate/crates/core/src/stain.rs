//! Color deconvolution into hematoxylin / eosin / DAB optical densities, the
//! per-stain affine augmentation, and the generic view augmentation pipeline.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{PatchPixels, PatchRecord};
use crate::tiling::{refresh_stats, TissueThresholds};

/// Optical density offset: OD = -log10((v + 1) / 256), so white maps to 0 and
/// black stays finite.
const OD_OFFSET: f64 = 1.0;
const OD_SCALE: f64 = 256.0;

/// Stain vectors (rows: H, E, D; columns: R, G, B optical density) and the
/// inverse used for deconvolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    rgb_from_hed: [[f64; 3]; 3],
    hed_from_rgb: [[f64; 3]; 3],
}

impl StainMatrix {
    /// Ruifrok & Johnston H&E-DAB vectors.
    pub const RUIFROK_JOHNSTON: [[f64; 3]; 3] = [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ];

    /// Builds a matrix from raw stain vectors; rows are normalized to unit length.
    pub fn new(stain_vectors: [[f64; 3]; 3]) -> Result<Self> {
        let mut rows = stain_vectors;
        for row in rows.iter_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Parameter("stain vector must be non-zero".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let inv = invert3(&rows)
            .ok_or_else(|| Error::Parameter("stain vectors are linearly dependent".into()))?;
        Ok(StainMatrix {
            rgb_from_hed: rows,
            hed_from_rgb: inv,
        })
    }

    pub fn rgb_from_hed(&self) -> &[[f64; 3]; 3] {
        &self.rgb_from_hed
    }

    pub fn hed_from_rgb(&self) -> &[[f64; 3]; 3] {
        &self.hed_from_rgb
    }

    pub fn rgb_to_hed(&self, pixels: &PatchPixels) -> HedImage {
        let lut = od_lut();
        let m = &self.hed_from_rgb;
        let mut data = Vec::with_capacity(pixels.data().len());
        for px in pixels.data().chunks_exact(3) {
            let od = [lut[px[0] as usize], lut[px[1] as usize], lut[px[2] as usize]];
            for s in 0..3 {
                data.push(od[0] * m[0][s] + od[1] * m[1][s] + od[2] * m[2][s]);
            }
        }
        HedImage {
            side: pixels.side(),
            data,
        }
    }

    /// Real-valued RGB before clamping and quantization.
    pub fn hed_to_rgb_linear(&self, hed: &HedImage) -> Vec<f64> {
        let m = &self.rgb_from_hed;
        let mut out = Vec::with_capacity(hed.data.len());
        for s in hed.data.chunks_exact(3) {
            for c in 0..3 {
                let od = s[0] * m[0][c] + s[1] * m[1][c] + s[2] * m[2][c];
                out.push(od_to_value(od));
            }
        }
        out
    }

    pub fn hed_to_rgb(&self, hed: &HedImage) -> PatchPixels {
        let data = self
            .hed_to_rgb_linear(hed)
            .into_iter()
            .map(quantize)
            .collect();
        PatchPixels::new(hed.side, data).expect("same geometry as the HED image")
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        *default_matrix()
    }
}

fn default_matrix() -> &'static StainMatrix {
    static M: OnceLock<StainMatrix> = OnceLock::new();
    M.get_or_init(|| {
        StainMatrix::new(StainMatrix::RUIFROK_JOHNSTON).expect("reference stain vectors are independent")
    })
}

fn od_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut t = [0.0; 256];
        for (v, od) in t.iter_mut().enumerate() {
            *od = -((v as f64 + OD_OFFSET) / OD_SCALE).log10();
        }
        t
    })
}

/// Optical density of one 8-bit channel value.
pub fn optical_density(value: u8) -> f64 {
    od_lut()[value as usize]
}

fn od_to_value(od: f64) -> f64 {
    OD_SCALE * 10f64.powf(-od) - OD_OFFSET
}

fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if det.abs() < 1e-12 {
        return None;
    }
    let d = 1.0 / det;
    Some([
        [
            c00 * d,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * d,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * d,
        ],
        [
            c01 * d,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * d,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * d,
        ],
        [
            c02 * d,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * d,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * d,
        ],
    ])
}

/// Per-pixel stain concentrations, interleaved (H, E, D).
#[derive(Debug, Clone, PartialEq)]
pub struct HedImage {
    pub side: usize,
    pub data: Vec<f64>,
}

pub fn rgb_to_hed(pixels: &PatchPixels) -> HedImage {
    default_matrix().rgb_to_hed(pixels)
}

pub fn hed_to_rgb(hed: &HedImage) -> PatchPixels {
    default_matrix().hed_to_rgb(hed)
}

/// Multiplicative factor and additive bias per stain channel (H, E, D).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainParams {
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
}

impl StainParams {
    pub const IDENTITY: StainParams = StainParams {
        alpha: [1.0; 3],
        beta: [0.0; 3],
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StainMode {
    /// alpha and beta both uniform on [0, 1].
    UnitRange,
    /// alpha uniform on [0.95, 1.05], beta uniform on [-0.05, 0.05].
    Centered,
}

impl std::str::FromStr for StainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit-range" => Ok(StainMode::UnitRange),
            "centered" => Ok(StainMode::Centered),
            other => Err(Error::Config(format!("unknown stain mode `{other}`"))),
        }
    }
}

/// Settings of the generic view pipeline (flip, jitter, grayscale, blur).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Aug1Config {
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for Aug1Config {
    fn default() -> Self {
        Aug1Config {
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl Aug1Config {
    /// Every step disabled.
    pub fn off() -> Self {
        Aug1Config {
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub mode: StainMode,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
    pub aug1: Aug1Config,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig::for_mode(StainMode::Centered)
    }
}

impl AugmentationConfig {
    pub fn for_mode(mode: StainMode) -> Self {
        let (alpha_range, beta_range) = match mode {
            StainMode::UnitRange => ((0.0, 1.0), (0.0, 1.0)),
            StainMode::Centered => ((0.95, 1.05), (-0.05, 0.05)),
        };
        AugmentationConfig {
            mode,
            alpha_range,
            beta_range,
            aug1: Aug1Config::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let interval_ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !interval_ok(self.alpha_range) || !interval_ok(self.beta_range) {
            return Err(Error::Config("stain ranges must be finite, non-empty intervals".into()));
        }
        let a = &self.aug1;
        for (name, p) in [
            ("flip_prob", a.flip_prob),
            ("jitter_prob", a.jitter_prob),
            ("grayscale_prob", a.grayscale_prob),
            ("blur_prob", a.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        if a.brightness < 0.0 || a.contrast < 0.0 || a.saturation < 0.0 || !(0.0..=0.5).contains(&a.hue) {
            return Err(Error::Config("jitter strengths must be non-negative, hue <= 0.5".into()));
        }
        if !interval_ok(a.blur_sigma) || a.blur_sigma.0 <= 0.0 {
            return Err(Error::Config("blur sigma range must be positive".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws independent per-channel factors and biases from the configured ranges.
pub fn sample_stain_params<R: Rng + ?Sized>(rng: &mut R, config: &AugmentationConfig) -> StainParams {
    let mut p = StainParams::IDENTITY;
    for c in 0..3 {
        p.alpha[c] = uniform(rng, config.alpha_range);
        p.beta[c] = uniform(rng, config.beta_range);
    }
    p
}

/// Applies `h*a1+b1, e*a2+b2, d*a3+b3` in stain space and converts back to RGB.
pub fn stain_augment_pixels(pixels: &PatchPixels, params: &StainParams) -> PatchPixels {
    let m = default_matrix();
    let mut hed = m.rgb_to_hed(pixels);
    for s in hed.data.chunks_exact_mut(3) {
        for c in 0..3 {
            s[c] = s[c] * params.alpha[c] + params.beta[c];
        }
    }
    m.hed_to_rgb(&hed)
}

pub fn stain_augment(patch: &PatchRecord, params: &StainParams) -> PatchRecord {
    let mut out = patch.clone();
    out.pixels = stain_augment_pixels(&patch.pixels, params);
    refresh_stats(&mut out, &TissueThresholds::default());
    out
}

/// One view of the generic pipeline: flip, color jitter, grayscale, blur.
pub fn aug1_pixels<R: Rng + ?Sized>(pixels: &PatchPixels, rng: &mut R, config: &Aug1Config) -> PatchPixels {
    let side = pixels.side();
    let mut buf: Vec<f32> = pixels.data().iter().map(|&v| v as f32).collect();

    if rng.random::<f64>() < config.flip_prob {
        flip_horizontal(&mut buf, side);
    }
    if rng.random::<f64>() < config.jitter_prob {
        let b = uniform(rng, (1.0 - config.brightness, 1.0 + config.brightness)).max(0.0) as f32;
        let c = uniform(rng, (1.0 - config.contrast, 1.0 + config.contrast)).max(0.0) as f32;
        let s = uniform(rng, (1.0 - config.saturation, 1.0 + config.saturation)).max(0.0) as f32;
        let h = uniform(rng, (-config.hue, config.hue)) as f32;
        color_jitter(&mut buf, b, c, s, h);
    }
    if rng.random::<f64>() < config.grayscale_prob {
        for px in buf.chunks_exact_mut(3) {
            let g = luma(px);
            px.fill(g);
        }
    }
    if rng.random::<f64>() < config.blur_prob {
        let sigma = uniform(rng, config.blur_sigma);
        gaussian_blur(&mut buf, side, sigma as f32);
    }
    let data = buf.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    PatchPixels::new(side, data).expect("geometry preserved")
}

pub fn aug1_view<R: Rng + ?Sized>(patch: &PatchRecord, rng: &mut R, config: &AugmentationConfig) -> PatchRecord {
    let mut out = patch.clone();
    out.pixels = aug1_pixels(&patch.pixels, rng, &config.aug1);
    refresh_stats(&mut out, &TissueThresholds::default());
    out
}

/// Mirrors an interleaved RGB buffer left-right.
pub fn flip_horizontal<T: Copy>(buf: &mut [T], side: usize) {
    for row in buf.chunks_exact_mut(side * 3) {
        for x in 0..side / 2 {
            let (a, b) = (x * 3, (side - 1 - x) * 3);
            for c in 0..3 {
                row.swap(a + c, b + c);
            }
        }
    }
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn color_jitter(buf: &mut [f32], brightness: f32, contrast: f32, saturation: f32, hue: f32) {
    for v in buf.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 255.0);
    }
    let n = (buf.len() / 3) as f32;
    let mean_gray = buf.chunks_exact(3).map(luma).sum::<f32>() / n;
    for v in buf.iter_mut() {
        *v = ((*v - mean_gray) * contrast + mean_gray).clamp(0.0, 255.0);
    }
    for px in buf.chunks_exact_mut(3) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = ((*v - g) * saturation + g).clamp(0.0, 255.0);
        }
    }
    if hue != 0.0 {
        for px in buf.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0] / 255.0, px[1] / 255.0, px[2] / 255.0);
            let (r, g, b) = hsv_to_rgb((h + hue).rem_euclid(1.0), s, v);
            px[0] = r * 255.0;
            px[1] = g * 255.0;
            px[2] = b * 255.0;
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with clamped borders.
fn gaussian_blur(buf: &mut [f32], side: usize, sigma: f32) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let s = side as isize;
    let mut tmp = vec![0f32; buf.len()];
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, s - 1);
                    acc += w * buf[((y * s + xx) * 3) as usize + c];
                }
                tmp[((y * s + x) * 3) as usize + c] = acc;
            }
        }
    }
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, s - 1);
                    acc += w * tmp[((yy * s + x) * 3) as usize + c];
                }
                buf[((y * s + x) * 3) as usize + c] = acc;
            }
        }
    }
}
