//! Prediction export, evaluation metrics and explainability reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{IsupGrade, ISUP_CLASSES};
use crate::grader::{Grader, SlidePrediction};
use crate::metrics::{detection_metrics, grading_report, ConfusionMatrix, DetectionMetrics, GradingReport};
use crate::nn::ParamSet;
use crate::record::{read_jsonl, write_jsonl, SlideEntry, SlideRecord};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const CONFUSION_PNG: &str = "confusion.png";
pub const EXPLAIN_FILE: &str = "explainability.json";
/// Patches exported per slide in the explainability report.
pub const TOP_PATCHES: usize = 3;

/// A slide manifest loaded into memory, with the directory its paths are
/// relative to.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub base: PathBuf,
    pub entries: Vec<SlideEntry>,
    pub slides: Vec<SlideRecord>,
}

impl LoadedManifest {
    pub fn open(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let entries: Vec<SlideEntry> = read_jsonl(path)?;
        let slides = entries.iter().map(|e| e.load(&base)).collect::<Result<Vec<_>>>()?;
        Ok(LoadedManifest { base, entries, slides })
    }
}

/// One ranked patch of the explainability report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionPatch {
    pub rank: usize,
    pub patch_index: usize,
    pub x: u32,
    pub y: u32,
    /// Attention summed over the bag slots holding this patch.
    pub attention: f64,
    /// Whether the patch window contains planted lesion pixels; absent
    /// without a mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_overlap: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideExplanation {
    pub slide_id: String,
    pub isup: IsupGrade,
    pub predicted: IsupGrade,
    pub top: Vec<AttentionPatch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplainabilitySummary {
    pub cancer_slides: usize,
    /// Cancerous slides that have a lesion mask.
    pub with_mask: usize,
    /// Slides whose top-attention patch overlaps the lesion mask.
    pub hits: usize,
    pub hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_slides: usize,
    pub grading: GradingReport,
    /// `None` when every slide has the same detection label.
    pub detection: Option<DetectionMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub explainability: ExplainabilitySummary,
}

/// Grades every slide of a manifest.
pub fn predict_manifest(model: &Grader, params: &ParamSet<f32>, manifest: &LoadedManifest, bag_size: usize) -> Result<Vec<SlidePrediction>> {
    crate::grader::predict_slides(model, params, &manifest.slides, bag_size)
}

fn lesion_mask(entry: &SlideEntry, base: &Path) -> Result<Option<(usize, usize, Vec<u8>)>> {
    entry.mask.as_ref().map(|m| crate::synth::load_mask(&base.join(m))).transpose()
}

fn window_has_lesion(mask: &(usize, usize, Vec<u8>), x: usize, y: usize, size: usize) -> bool {
    let (w, h, data) = mask;
    (y..(y + size).min(*h)).any(|yy| (x..(x + size).min(*w)).any(|xx| data[yy * w + xx] != 0))
}

/// Top-attention patches of every slide, with lesion overlap where the
/// manifest provides masks.
pub fn explain(manifest: &LoadedManifest, predictions: &[SlidePrediction]) -> Result<Vec<SlideExplanation>> {
    let by_id: BTreeMap<&str, usize> = manifest
        .slides
        .iter()
        .enumerate()
        .map(|(i, s)| (s.slide_id.as_str(), i))
        .collect();
    predictions
        .iter()
        .map(|p| {
            let i = *by_id
                .get(p.slide_id.as_str())
                .ok_or_else(|| Error::Parameter(format!("prediction for unknown slide {}", p.slide_id)))?;
            let slide = &manifest.slides[i];
            let mask = lesion_mask(&manifest.entries[i], &manifest.base)?;
            let top = p
                .ranked_patches()
                .into_iter()
                .take(TOP_PATCHES)
                .enumerate()
                .map(|(rank, (pos, attention))| {
                    let patch = slide.patches.get(pos).ok_or_else(|| {
                        Error::Shape(format!("slide {} has no patch at position {pos}", slide.slide_id))
                    })?;
                    Ok(AttentionPatch {
                        rank: rank + 1,
                        patch_index: patch.index,
                        x: patch.x,
                        y: patch.y,
                        attention,
                        lesion_overlap: mask
                            .as_ref()
                            .map(|m| window_has_lesion(m, patch.x as usize, patch.y as usize, patch.pixels.side())),
                        image: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SlideExplanation {
                slide_id: p.slide_id.clone(),
                isup: slide.isup,
                predicted: p.grade,
                top,
            })
        })
        .collect()
}

pub fn summarize_explanations(explanations: &[SlideExplanation]) -> ExplainabilitySummary {
    let cancer: Vec<&SlideExplanation> = explanations.iter().filter(|e| e.isup.is_cancer()).collect();
    let judged: Vec<bool> = cancer
        .iter()
        .filter_map(|e| e.top.first().and_then(|t| t.lesion_overlap))
        .collect();
    let hits = judged.iter().filter(|&&h| h).count();
    ExplainabilitySummary {
        cancer_slides: cancer.len(),
        with_mask: judged.len(),
        hits,
        hit_rate: (!judged.is_empty()).then(|| hits as f64 / judged.len() as f64),
    }
}

/// Metrics of `predictions` against the manifest labels.
pub fn evaluate(manifest: &LoadedManifest, predictions: &[SlidePrediction]) -> Result<(EvaluationReport, Vec<SlideExplanation>)> {
    if predictions.is_empty() {
        return Err(Error::Parameter("no predictions to evaluate".into()));
    }
    let labels: BTreeMap<&str, IsupGrade> = manifest.slides.iter().map(|s| (s.slide_id.as_str(), s.isup)).collect();
    let truth = predictions
        .iter()
        .map(|p| {
            labels
                .get(p.slide_id.as_str())
                .copied()
                .ok_or_else(|| Error::Parameter(format!("prediction for unknown slide {}", p.slide_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<IsupGrade> = predictions.iter().map(|p| p.grade).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.malignancy).collect();
    let grading = grading_report(&truth, &predicted)?;
    let mut warnings = Vec::new();
    let detection = match detection_metrics(&truth, &scores) {
        Ok(d) => Some(d),
        Err(e @ Error::UndefinedMetric(_)) => {
            warnings.push(e.to_string());
            None
        }
        Err(e) => return Err(e),
    };
    let explanations = explain(manifest, predictions)?;
    let report = EvaluationReport {
        n_slides: predictions.len(),
        grading,
        detection,
        warnings,
        explainability: summarize_explanations(&explanations),
    };
    Ok((report, explanations))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })
}

/// Writes `predictions.jsonl` plus one `slides/<id>.json` per slide.
pub fn write_predictions(dir: &Path, predictions: &[SlidePrediction]) -> Result<()> {
    write_jsonl(&dir.join(PREDICTIONS_FILE), predictions)?;
    for p in predictions {
        write_json(&dir.join("slides").join(format!("{}.json", p.slide_id)), p)?;
    }
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<SlidePrediction>> {
    read_jsonl(path)
}

/// Confusion matrix heat map: one square per cell, darker for a larger
/// share of its true-grade row.
pub fn render_confusion(cm: &ConfusionMatrix, cell: u32) -> image::RgbImage {
    let rows = cm.row_totals();
    let side = cell * ISUP_CLASSES as u32;
    image::RgbImage::from_fn(side, side, |x, y| {
        let (i, j) = ((y / cell) as usize, (x / cell) as usize);
        if x % cell == 0 || y % cell == 0 {
            return image::Rgb([160, 160, 160]);
        }
        let share = if rows[i] == 0 { 0.0 } else { cm.counts[i][j] as f64 / rows[i] as f64 };
        let fade = |full: f64| (255.0 - share * (255.0 - full)).round() as u8;
        image::Rgb([fade(8.0), fade(48.0), fade(107.0)])
    })
}

/// Writes metrics, the confusion matrix and the explainability report (with
/// the top patches saved as PNG) into `dir`.
pub fn write_report(
    dir: &Path,
    report: &EvaluationReport,
    explanations: &[SlideExplanation],
    manifest: &LoadedManifest,
    render_png: bool,
) -> Result<()> {
    write_json(&dir.join(METRICS_FILE), report)?;
    let csv_path = dir.join(CONFUSION_CSV);
    std::fs::write(&csv_path, report.grading.confusion.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
    if render_png {
        let png = dir.join(CONFUSION_PNG);
        render_confusion(&report.grading.confusion, 40)
            .save(&png)
            .map_err(|e| Error::image(&png, e))?;
    }
    let by_id: BTreeMap<&str, &SlideRecord> = manifest.slides.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let mut exported = explanations.to_vec();
    for e in &mut exported {
        let slide = by_id[e.slide_id.as_str()];
        for t in &mut e.top {
            let rel = PathBuf::from("explainability")
                .join(&e.slide_id)
                .join(format!("rank{}_patch{:04}.png", t.rank, t.patch_index));
            let patch = slide
                .patches
                .iter()
                .find(|p| p.index == t.patch_index)
                .expect("explained patch belongs to the slide");
            patch.pixels.save_png(&dir.join(&rel))?;
            t.image = Some(rel);
        }
    }
    write_json(&dir.join(EXPLAIN_FILE), &exported)
}

pub fn read_report(dir: &Path) -> Result<EvaluationReport> {
    read_json(&dir.join(METRICS_FILE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade::GleasonGrade;
    use crate::record::{PatchPixels, PatchRecord};

    fn grade(v: u8) -> IsupGrade {
        IsupGrade::new(v).unwrap()
    }

    fn manifest_with_mask(dir: &Path) -> LoadedManifest {
        let patch = |index: usize, x: u32| PatchRecord {
            slide_id: "s".into(),
            index,
            x,
            y: 0,
            pixels: PatchPixels::filled(4, [index as u8; 3]),
            tissue_fraction: 1.0,
            mean_intensity: 0.0,
            pseudo_label: None,
            pseudo_confidence: None,
        };
        let slide = SlideRecord::new("s", GleasonGrade::G3, GleasonGrade::G3, vec![patch(0, 0), patch(1, 4)]).unwrap();
        let mut mask = image::GrayImage::new(8, 4);
        mask.put_pixel(6, 2, image::Luma([3]));
        mask.save(dir.join("mask.png")).unwrap();
        let entry = SlideEntry {
            slide_id: "s".into(),
            primary_gg: GleasonGrade::G3,
            secondary_gg: GleasonGrade::G3,
            isup: slide.isup,
            image: None,
            mask: Some("mask.png".into()),
            width: 8,
            height: 4,
            patches: vec![],
            bag: vec![],
        };
        LoadedManifest {
            base: dir.to_path_buf(),
            entries: vec![entry],
            slides: vec![slide],
        }
    }

    #[test]
    fn lesion_window_test() {
        let mut data = vec![0u8; 8 * 4];
        data[2 * 8 + 6] = 3;
        let mask = (8, 4, data);
        assert!(!window_has_lesion(&mask, 0, 0, 4));
        assert!(window_has_lesion(&mask, 4, 0, 4));
    }

    #[test]
    fn summary_counts_only_cancer_with_masks() {
        let mk = |id: &str, isup: u8, hit: Option<bool>| SlideExplanation {
            slide_id: id.into(),
            isup: grade(isup),
            predicted: grade(isup),
            top: vec![AttentionPatch {
                rank: 1,
                patch_index: 0,
                x: 0,
                y: 0,
                attention: 1.0,
                lesion_overlap: hit,
                image: None,
            }],
        };
        let s = summarize_explanations(&[
            mk("a", 0, Some(false)),
            mk("b", 2, Some(true)),
            mk("c", 3, Some(false)),
            mk("d", 4, None),
        ]);
        assert_eq!((s.cancer_slides, s.with_mask, s.hits), (3, 2, 1));
        assert_eq!(s.hit_rate, Some(0.5));
    }

    #[test]
    fn explain_ranks_merged_attention() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with_mask(dir.path());
        let pred = SlidePrediction {
            slide_id: "s".into(),
            grade: grade(1),
            probs: vec![0.9, 0.1, 0.1, 0.1, 0.1],
            malignancy: 0.9,
            attention: vec![0.4, 0.35, 0.25],
            patch_indices: vec![0, 1, 1],
        };
        let e = explain(&m, &[pred]).unwrap();
        assert_eq!(e[0].top.len(), 2);
        assert_eq!(e[0].top[0].patch_index, 1);
        assert!((e[0].top[0].attention - 0.6).abs() < 1e-12);
        assert_eq!(e[0].top[0].lesion_overlap, Some(true));
        assert_eq!(e[0].top[1].lesion_overlap, Some(false));
    }

    #[test]
    fn evaluate_and_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_with_mask(dir.path());
        let pred = SlidePrediction {
            slide_id: "s".into(),
            grade: grade(1),
            probs: vec![0.9, 0.1, 0.1, 0.1, 0.1],
            malignancy: 0.9,
            attention: vec![1.0],
            patch_indices: vec![0],
        };
        let (report, ex) = evaluate(&m, std::slice::from_ref(&pred)).unwrap();
        assert!(report.detection.is_none());
        assert_eq!(report.grading.severe_errors, 0);
        assert_eq!(report.explainability.hits, 0);
        write_predictions(dir.path(), &[pred.clone()]).unwrap();
        write_report(dir.path(), &report, &ex, &m, true).unwrap();
        assert_eq!(read_predictions(&dir.path().join(PREDICTIONS_FILE)).unwrap(), vec![pred]);
        assert_eq!(read_report(dir.path()).unwrap(), report);
        assert!(dir.path().join(CONFUSION_PNG).exists());
        assert!(dir.path().join("explainability/s/rank1_patch0000.png").exists());
        assert!(dir.path().join("slides/s.json").exists());
    }
}
