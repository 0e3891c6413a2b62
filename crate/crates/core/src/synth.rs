//! Procedural H&E-like slide generator with planted Gleason regions.
//!
//! Slides are tiled into a grid of `cell_size` squares; each cell is rendered
//! with the texture of one class (benign, GG3, GG4, GG5) and recorded in a
//! per-pixel lesion mask, so every patch has an exact ground-truth class.
//! Textures are built in stain-concentration space and converted to RGB
//! through the stain matrix.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{isup_from_gleason, GleasonGrade, IsupGrade, ISUP_CLASSES};
use crate::record::{write_jsonl, PatchPixels, SlideEntry, SlideRecord};
use crate::stain::{HedImage, StainMatrix};
use crate::tiling::{extract_patches, SlideImage, TissueThresholds};

/// Shape parameters of one procedural texture class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Gland lumens per cell.
    pub lumens: usize,
    /// Lumen radius range in pixels.
    pub lumen_radius: (f64, f64),
    /// Maximum ratio between the long and short lumen axes.
    pub anisotropy: f64,
    /// Free-lying nuclei per cell, besides those lining lumens.
    pub nuclei: usize,
    pub nucleus_radius: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub slides_per_grade: usize,
    /// Side of the square slide in pixels; a multiple of `cell_size`.
    pub slide_size: usize,
    /// Side of the planted texture cells (normally the patch size).
    pub cell_size: usize,
    /// Textures for benign, GG3, GG4, GG5.
    pub textures: [TextureParams; 4],
    /// Share of cells given the primary pattern.
    pub primary_fraction: f64,
    /// Share of cells given the secondary pattern.
    pub secondary_fraction: f64,
    /// Per-slide multiplicative stain jitter, uniform in `[-j, j]`.
    pub tint_jitter: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            slides_per_grade: 10,
            slide_size: 1024,
            cell_size: 256,
            textures: [
                TextureParams {
                    lumens: 5,
                    lumen_radius: (22.0, 32.0),
                    anisotropy: 1.8,
                    nuclei: 40,
                    nucleus_radius: (2.5, 3.5),
                },
                TextureParams {
                    lumens: 16,
                    lumen_radius: (9.0, 13.0),
                    anisotropy: 1.3,
                    nuclei: 60,
                    nucleus_radius: (2.5, 3.5),
                },
                TextureParams {
                    lumens: 60,
                    lumen_radius: (3.0, 5.0),
                    anisotropy: 1.2,
                    nuclei: 120,
                    nucleus_radius: (2.5, 3.5),
                },
                TextureParams {
                    lumens: 0,
                    lumen_radius: (0.0, 0.0),
                    anisotropy: 1.0,
                    nuclei: 900,
                    nucleus_radius: (2.5, 4.0),
                },
            ],
            primary_fraction: 0.45,
            secondary_fraction: 0.25,
            tint_jitter: 0.05,
            seed: 7,
            id_prefix: "slide".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.cell_size == 0 || self.slide_size == 0 || self.slide_size % self.cell_size != 0 {
            return bad(format!(
                "slide size {} must be a positive multiple of cell size {}",
                self.slide_size, self.cell_size
            ));
        }
        let f = (self.primary_fraction, self.secondary_fraction);
        if !(f.0 > 0.0 && f.1 > 0.0 && f.0 + f.1 <= 1.0) {
            return bad(format!("lesion fractions {f:?} must be positive and sum to at most 1"));
        }
        let (np, ns) = self.lesion_cells();
        if np <= ns || ns == 0 {
            return bad(format!(
                "lesion fractions give {np} primary and {ns} secondary cells; need primary > secondary >= 1"
            ));
        }
        if !(0.0..1.0).contains(&self.tint_jitter) {
            return bad(format!("tint jitter {} must be in [0, 1)", self.tint_jitter));
        }
        for t in &self.textures {
            if t.nucleus_radius.0 <= 0.0 || t.nucleus_radius.1 < t.nucleus_radius.0 {
                return bad("nucleus radius range must be positive and ordered".into());
            }
            if t.lumens > 0 && (t.lumen_radius.0 <= 0.0 || t.lumen_radius.1 < t.lumen_radius.0 || t.anisotropy < 1.0) {
                return bad("lumen radius range must be positive and ordered, anisotropy >= 1".into());
            }
        }
        Ok(())
    }

    pub fn cells_per_side(&self) -> usize {
        self.slide_size / self.cell_size
    }

    /// Number of primary and secondary cells in a cancerous slide.
    pub fn lesion_cells(&self) -> (usize, usize) {
        let n = (self.cells_per_side() * self.cells_per_side()) as f64;
        (
            (self.primary_fraction * n).round() as usize,
            (self.secondary_fraction * n).round() as usize,
        )
    }
}

/// Gleason pairs used for a given ISUP grade, cycled over slides.
pub fn gleason_pairs_for(isup: u8) -> &'static [(GleasonGrade, GleasonGrade)] {
    use GleasonGrade::*;
    match isup {
        0 => &[(Benign, Benign)],
        1 => &[(G3, G3)],
        2 => &[(G3, G4)],
        3 => &[(G4, G3)],
        4 => &[(G4, G4), (G3, G5), (G5, G3)],
        _ => &[(G4, G5), (G5, G4), (G5, G5)],
    }
}

/// A generated slide with its labels and per-pixel lesion mask (Gleason value
/// 0, 3, 4 or 5 per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSlide {
    pub image: SlideImage,
    pub mask: Vec<u8>,
    pub primary_gg: GleasonGrade,
    pub secondary_gg: GleasonGrade,
    pub isup: IsupGrade,
}

impl SynthSlide {
    /// Tiles the slide into a labeled record.
    pub fn record(&self, patch_size: usize, thresholds: &TissueThresholds) -> Result<SlideRecord> {
        let patches = extract_patches(&self.image, patch_size, thresholds)?;
        SlideRecord::new(self.image.slide_id.clone(), self.primary_gg, self.secondary_gg, patches)
    }

    /// Majority mask class inside a square window (ties go to the lower class).
    pub fn region_class(&self, x: usize, y: usize, size: usize) -> GleasonGrade {
        let mut counts = [0usize; 4];
        let w = self.image.width;
        for yy in y..(y + size).min(self.image.height) {
            for xx in x..(x + size).min(w) {
                counts[class_of_mask_value(self.mask[yy * w + xx])] += 1;
            }
        }
        let best = (0..4).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
        GleasonGrade::ALL[best]
    }

    /// True when any lesion pixel lies inside the window.
    pub fn window_hits_lesion(&self, x: usize, y: usize, size: usize) -> bool {
        let w = self.image.width;
        (y..(y + size).min(self.image.height))
            .any(|yy| (x..(x + size).min(w)).any(|xx| self.mask[yy * w + xx] != 0))
    }
}

fn class_of_mask_value(v: u8) -> usize {
    match v {
        3 => 1,
        4 => 2,
        5 => 3,
        _ => 0,
    }
}

/// SplitMix64 step, used to derive independent per-slide seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `slides_per_grade` slides for every ISUP grade 0..=5, in
/// grade-major order.
pub fn generate_corpus(spec: &SynthSpec) -> Result<Vec<SynthSlide>> {
    spec.validate()?;
    let jobs: Vec<(u8, usize)> = (0..ISUP_CLASSES as u8)
        .flat_map(|g| (0..spec.slides_per_grade).map(move |i| (g, i)))
        .collect();
    jobs.par_iter()
        .enumerate()
        .map(|(n, &(grade, i))| {
            let pairs = gleason_pairs_for(grade);
            let (p, s) = pairs[i % pairs.len()];
            let id = format!("{}-{:03}", spec.id_prefix, n);
            generate_slide(spec, &id, p, s, mix_seed(spec.seed, n as u64))
        })
        .collect()
}

/// Renders one slide with the given Gleason pair.
pub fn generate_slide(
    spec: &SynthSpec,
    slide_id: &str,
    primary: GleasonGrade,
    secondary: GleasonGrade,
    seed: u64,
) -> Result<SynthSlide> {
    spec.validate()?;
    let isup = isup_from_gleason(primary, secondary)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cps = spec.cells_per_side();
    let n_cells = cps * cps;
    let mut cell_class = vec![GleasonGrade::Benign; n_cells];
    if isup.is_cancer() {
        let (np, ns) = spec.lesion_cells();
        let mut order: Vec<usize> = (0..n_cells).collect();
        order.shuffle(&mut rng);
        for &c in &order[..np] {
            cell_class[c] = primary;
        }
        for &c in &order[np..np + ns] {
            cell_class[c] = secondary;
        }
    }
    let side = spec.slide_size;
    let mut hed = vec![0.0f64; side * side * 3];
    let mut mask = vec![0u8; side * side];
    let tint = [
        1.0 + rng.random_range(-spec.tint_jitter..=spec.tint_jitter),
        1.0 + rng.random_range(-spec.tint_jitter..=spec.tint_jitter),
    ];
    for (c, class) in cell_class.iter().enumerate() {
        let (cx, cy) = ((c % cps) * spec.cell_size, (c / cps) * spec.cell_size);
        let mut cell = render_cell(&spec.textures[class.class_index()], spec.cell_size, &mut rng);
        for v in cell.chunks_exact_mut(3) {
            v[0] *= tint[0];
            v[1] *= tint[1];
        }
        for y in 0..spec.cell_size {
            let dst = ((cy + y) * side + cx) * 3;
            let src = y * spec.cell_size * 3;
            hed[dst..dst + spec.cell_size * 3].copy_from_slice(&cell[src..src + spec.cell_size * 3]);
            let m = (cy + y) * side + cx;
            mask[m..m + spec.cell_size].fill(class.value());
        }
    }
    let rgb = StainMatrix::default().hed_to_rgb(&HedImage { side, data: hed });
    Ok(SynthSlide {
        image: SlideImage::new(slide_id, side, side, rgb.data().to_vec())?,
        mask,
        primary_gg: primary,
        secondary_gg: secondary,
        isup,
    })
}

const STROMA_E: f64 = 0.32;
const STROMA_H: f64 = 0.06;
const NUCLEUS_H: f64 = 0.85;
const NUCLEUS_E: f64 = 0.10;

/// Interleaved (H, E, D) concentrations of one texture cell.
fn render_cell<R: Rng + ?Sized>(t: &TextureParams, size: usize, rng: &mut R) -> Vec<f64> {
    let mut hed = vec![0.0f64; size * size * 3];
    for v in hed.chunks_exact_mut(3) {
        v[0] = STROMA_H + rng.random_range(-0.02..0.02);
        v[1] = STROMA_E + rng.random_range(-0.05..0.05);
    }
    let nucleus = |hed: &mut [f64], x: f64, y: f64, r: f64| {
        paint_ellipse(hed, size, x, y, r, r, 0.0, |v| {
            v[0] = NUCLEUS_H;
            v[1] = NUCLEUS_E;
        })
    };
    for _ in 0..t.nuclei {
        let r = rng.random_range(t.nucleus_radius.0..=t.nucleus_radius.1);
        let (x, y) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        nucleus(&mut hed, x, y, r);
    }
    // lumens: rejection-sampled so rims do not touch, then lined with nuclei
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < t.lumens && attempts < t.lumens * 400 {
        attempts += 1;
        let r = rng.random_range(t.lumen_radius.0..=t.lumen_radius.1);
        let margin = r + 4.0;
        if 2.0 * margin >= size as f64 {
            break;
        }
        let x = rng.random_range(margin..size as f64 - margin);
        let y = rng.random_range(margin..size as f64 - margin);
        let aniso = rng.random_range(1.0..=t.anisotropy);
        let reach = r * aniso.sqrt();
        if placed
            .iter()
            .any(|&(px, py, pr)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() < reach + pr + 7.0)
        {
            continue;
        }
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (a, b) = (r * aniso.sqrt(), r / aniso.sqrt());
        paint_ellipse(&mut hed, size, x, y, a, b, angle, |v| {
            v[0] = 0.0;
            v[1] = 0.0;
        });
        let ring = ((2.0 * std::f64::consts::PI * (a + b) / 2.0) / 6.0).ceil().max(4.0) as usize;
        for k in 0..ring {
            let th = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
            let (ex, ey) = ((a + 3.0) * th.cos(), (b + 3.0) * th.sin());
            let (nx, ny) = (x + ex * angle.cos() - ey * angle.sin(), y + ex * angle.sin() + ey * angle.cos());
            nucleus(&mut hed, nx, ny, 2.2);
        }
        placed.push((x, y, reach));
    }
    hed
}

#[allow(clippy::too_many_arguments)]
fn paint_ellipse(
    hed: &mut [f64],
    size: usize,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    mut paint: impl FnMut(&mut [f64]),
) {
    let reach = a.max(b);
    let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(size - 1));
    let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(size - 1));
    if cx + reach < 0.0 || cy + reach < 0.0 {
        return;
    }
    let (c, s) = (angle.cos(), angle.sin());
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                let o = (y * size + x) * 3;
                paint(&mut hed[o..o + 3]);
            }
        }
    }
}

/// Number of lumen-like blobs: 4-connected near-white components of at least
/// `min_area` pixels. A deliberately simple hand-crafted texture feature.
pub fn lumen_count(pixels: &PatchPixels, min_area: usize) -> usize {
    let side = pixels.side();
    let data = pixels.data();
    let white: Vec<bool> = data.chunks_exact(3).map(|p| p.iter().all(|&v| v >= 215)).collect();
    let mut seen = vec![false; side * side];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..side * side {
        if !white[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i % side, i / side);
            let mut visit = |j: usize| {
                if white[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < side {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - side);
            }
            if y + 1 < side {
                visit(i + side);
            }
        }
        if area >= min_area {
            count += 1;
        }
    }
    count
}

/// Texture class guessed from [`lumen_count`] alone.
pub fn classify_by_lumens(pixels: &PatchPixels) -> GleasonGrade {
    match lumen_count(pixels, 6) {
        0..=1 => GleasonGrade::G5,
        2..=9 => GleasonGrade::Benign,
        10..=32 => GleasonGrade::G3,
        _ => GleasonGrade::G4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Slides per ISUP grade 0..=5.
    pub grade_counts: [usize; ISUP_CLASSES],
    /// Planted patches per class (benign, GG3, GG4, GG5), by mask majority.
    pub patch_counts: [usize; 4],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn corpus_stats(slides: &[SynthSlide], patch_size: usize) -> Result<CorpusStats> {
    if slides.is_empty() {
        return Err(Error::Parameter("corpus is empty".into()));
    }
    if patch_size == 0 {
        return Err(Error::Parameter("patch size must be >= 1".into()));
    }
    let mut grade_counts = [0; ISUP_CLASSES];
    let mut patch_counts = [0; 4];
    for s in slides {
        grade_counts[s.isup.index()] += 1;
        for y in (0..s.image.height).step_by(patch_size) {
            for x in (0..s.image.width).step_by(patch_size) {
                patch_counts[s.region_class(x, y, patch_size).class_index()] += 1;
            }
        }
    }
    let warnings: Vec<String> = (0..ISUP_CLASSES)
        .filter(|&g| grade_counts[g] == 0)
        .map(|g| format!("no slides of ISUP grade {g}"))
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CorpusStats {
        grade_counts,
        patch_counts,
        warnings,
    })
}

pub const LABELS_MANIFEST: &str = "corpus.jsonl";

/// Writes `slides/`, `masks/` and a `corpus.jsonl` manifest (slide labels and
/// image paths, no patches) under `dir`; returns the manifest path.
pub fn write_slides(dir: &Path, slides: &[SynthSlide]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(slides.len());
    for s in slides {
        let id = &s.image.slide_id;
        let image = PathBuf::from("slides").join(format!("{id}.png"));
        let mask = PathBuf::from("masks").join(format!("{id}.png"));
        let path = dir.join(&image);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        s.image.save_png(&path)?;
        save_mask(&dir.join(&mask), s)?;
        entries.push(SlideEntry {
            slide_id: id.clone(),
            primary_gg: s.primary_gg,
            secondary_gg: s.secondary_gg,
            isup: s.isup,
            image: Some(image),
            mask: Some(mask),
            width: s.image.width as u32,
            height: s.image.height as u32,
            patches: Vec::new(),
            bag: Vec::new(),
        });
    }
    let manifest = dir.join(LABELS_MANIFEST);
    write_jsonl(&manifest, &entries)?;
    Ok(manifest)
}

/// [`write_slides`] followed by tiling into the same directory; returns the
/// tile manifest path.
pub fn write_corpus(dir: &Path, slides: &[SynthSlide], patch_size: usize, thresholds: &TissueThresholds) -> Result<PathBuf> {
    let labels = write_slides(dir, slides)?;
    crate::tiling::tile_manifest(&labels, dir, patch_size, crate::tiling::DEFAULT_BAG_SIZE, thresholds)
}

fn save_mask(path: &Path, s: &SynthSlide) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::GrayImage::from_raw(s.image.width as u32, s.image.height as u32, s.mask.clone())
        .expect("mask size matches slide")
        .save(path)
        .map_err(|e| Error::image(path, e))
}

/// Reads a lesion mask written by [`write_corpus`].
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}
