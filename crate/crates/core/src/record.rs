//! Slide and patch records plus their JSON-lines manifest form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{isup_from_gleason, GleasonGrade, IsupGrade};

/// Square RGB patch, row-major, 3 bytes per pixel. Shared so bags can repeat
/// a patch without copying pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPixels {
    side: usize,
    data: Arc<Vec<u8>>,
}

impl PatchPixels {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self> {
        if side == 0 || data.len() != side * side * 3 {
            return Err(Error::Shape(format!(
                "patch of side {side} needs {} bytes, got {}",
                side * side * 3,
                data.len()
            )));
        }
        Ok(PatchPixels {
            side,
            data: Arc::new(data),
        })
    }

    pub fn filled(side: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(side * side * 3).collect();
        PatchPixels {
            side,
            data: Arc::new(data),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Box-averages `factor x factor` blocks, rounding to the nearest value.
    pub fn downsample(&self, factor: usize) -> Result<PatchPixels> {
        if factor == 0 || self.side % factor != 0 {
            return Err(Error::Shape(format!("cannot pool side {} by {factor}", self.side)));
        }
        let s = self.side / factor;
        let area = (factor * factor) as u32;
        let mut data = Vec::with_capacity(s * s * 3);
        for y in 0..s {
            for x in 0..s {
                let mut acc = [0u32; 3];
                for dy in 0..factor {
                    let row = (y * factor + dy) * self.side;
                    for dx in 0..factor {
                        let o = (row + x * factor + dx) * 3;
                        for c in 0..3 {
                            acc[c] += self.data[o + c] as u32;
                        }
                    }
                }
                data.extend(acc.iter().map(|&a| ((a + area / 2) / area) as u8));
            }
        }
        PatchPixels::new(s, data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.side + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.side as u32, self.side as u32, self.data.to_vec())
            .expect("patch buffer length is validated on construction")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::image(path, e))?
            .to_rgb8();
        if img.width() != img.height() {
            return Err(Error::Shape(format!(
                "patch {} is {}x{}, expected square",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        PatchPixels::new(img.width() as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_image()
            .save(path)
            .map_err(|e| Error::image(path, e))
    }
}

/// One patch cut from a slide, with its cached statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub slide_id: String,
    pub index: usize,
    /// Top-left corner in slide pixel coordinates.
    pub x: u32,
    pub y: u32,
    pub pixels: PatchPixels,
    pub tissue_fraction: f64,
    pub mean_intensity: f64,
    pub pseudo_label: Option<GleasonGrade>,
    pub pseudo_confidence: Option<f64>,
}

/// One biopsy slide with its labels and ordered patches.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub slide_id: String,
    pub primary_gg: GleasonGrade,
    pub secondary_gg: GleasonGrade,
    pub isup: IsupGrade,
    pub patches: Vec<PatchRecord>,
}

impl SlideRecord {
    pub fn new(
        slide_id: impl Into<String>,
        primary_gg: GleasonGrade,
        secondary_gg: GleasonGrade,
        patches: Vec<PatchRecord>,
    ) -> Result<Self> {
        let isup = isup_from_gleason(primary_gg, secondary_gg)?;
        Ok(SlideRecord {
            slide_id: slide_id.into(),
            primary_gg,
            secondary_gg,
            isup,
            patches,
        })
    }

    /// Checks the stored ISUP grade against the Gleason pair.
    pub fn validate(&self) -> Result<()> {
        let expected = isup_from_gleason(self.primary_gg, self.secondary_gg)?;
        if expected != self.isup {
            return Err(Error::InvalidLabel(format!(
                "slide {}: ISUP {} inconsistent with Gleason {}+{} (expected {})",
                self.slide_id, self.isup, self.primary_gg, self.secondary_gg, expected
            )));
        }
        Ok(())
    }
}

/// Patch line of a slide manifest; pixels live in the PNG at `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub index: usize,
    pub path: PathBuf,
    pub x: u32,
    pub y: u32,
    pub tissue_fraction: f64,
    pub mean_intensity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_label: Option<GleasonGrade>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_confidence: Option<f64>,
}

/// One line of a slide manifest (`*.jsonl`). Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub primary_gg: GleasonGrade,
    pub secondary_gg: GleasonGrade,
    pub isup: IsupGrade,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    #[serde(default)]
    pub patches: Vec<PatchEntry>,
    /// Patch indices of the slide's bag, in bag order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bag: Vec<usize>,
}

impl SlideEntry {
    /// Loads every patch PNG and returns the in-memory slide.
    pub fn load(&self, base: &Path) -> Result<SlideRecord> {
        let patches = self
            .patches
            .iter()
            .map(|p| {
                let pixels = PatchPixels::load_png(&base.join(&p.path))?;
                Ok(PatchRecord {
                    slide_id: self.slide_id.clone(),
                    index: p.index,
                    x: p.x,
                    y: p.y,
                    pixels,
                    tissue_fraction: p.tissue_fraction,
                    mean_intensity: p.mean_intensity,
                    pseudo_label: p.pseudo_label,
                    pseudo_confidence: p.pseudo_confidence,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let slide = SlideRecord {
            slide_id: self.slide_id.clone(),
            primary_gg: self.primary_gg,
            secondary_gg: self.secondary_gg,
            isup: self.isup,
            patches,
        };
        slide.validate()?;
        Ok(slide)
    }
}

/// Pseudo-label line (`pseudo_labels.jsonl`, `ssl_corpus.jsonl`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPatchEntry {
    pub slide_id: String,
    pub index: usize,
    pub path: PathBuf,
    pub label: GleasonGrade,
    pub confidence: f64,
    pub tissue_fraction: f64,
}

impl LabeledPatchEntry {
    pub fn from_record(patch: &PatchRecord, path: PathBuf) -> Result<Self> {
        match (patch.pseudo_label, patch.pseudo_confidence) {
            (Some(label), Some(confidence)) => Ok(LabeledPatchEntry {
                slide_id: patch.slide_id.clone(),
                index: patch.index,
                path,
                label,
                confidence,
                tissue_fraction: patch.tissue_fraction,
            }),
            _ => Err(Error::InvalidLabel(format!(
                "patch {}#{} has no pseudo-label",
                patch.slide_id, patch.index
            ))),
        }
    }

    pub fn load(&self, base: &Path) -> Result<PatchRecord> {
        let pixels = PatchPixels::load_png(&base.join(&self.path))?;
        let mean_intensity = crate::tiling::mean_intensity(&pixels);
        Ok(PatchRecord {
            slide_id: self.slide_id.clone(),
            index: self.index,
            x: 0,
            y: 0,
            pixels,
            tissue_fraction: self.tissue_fraction,
            mean_intensity,
            pseudo_label: Some(self.label),
            pseudo_confidence: Some(self.confidence),
        })
    }
}

/// `path` expressed relative to the directory `base`; both are made absolute
/// first. Falls back to the absolute path when they share no prefix.
pub fn relative_path(path: &Path, base: &Path) -> PathBuf {
    let (Ok(path), Ok(base)) = (std::path::absolute(path), std::path::absolute(base)) else {
        return path.to_path_buf();
    };
    let p: Vec<_> = path.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return path;
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c);
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Reads a slide manifest and loads all patches it references.
pub fn load_slides(manifest: &Path) -> Result<Vec<SlideRecord>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_jsonl::<SlideEntry>(manifest)?
        .iter()
        .map(|e| e.load(base))
        .collect()
}

/// Reads a labeled-patch manifest and loads the pixels.
pub fn load_labeled_patches(manifest: &Path) -> Result<Vec<PatchRecord>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_jsonl::<LabeledPatchEntry>(manifest)?
        .iter()
        .map(|e| e.load(base))
        .collect()
}
