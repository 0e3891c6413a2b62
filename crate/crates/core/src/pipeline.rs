//! Stage functions and the resumable end-to-end run.
//!
//! Every stage writes into its own directory of the run directory. The run's
//! `manifest.json` records, per stage, a fingerprint of its configuration and
//! upstream outputs together with the SHA-256 of every file it wrote. A stage
//! whose fingerprint and files are unchanged is skipped on the next run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grade::GleasonGrade;
use crate::grader::{finetune, Grader, GraderConfig, HeadKind};
use crate::mil::{build_balanced_dataset, pseudo_label, train_module1, InstanceClassifier, MilConfig};
use crate::nn::{Checkpoint, EncoderSpec, ParamSet};
use crate::record::{load_labeled_patches, load_slides, read_jsonl, relative_path, write_jsonl, LabeledPatchEntry, PatchPixels, SlideEntry};
use crate::report::{self, write_json, EvaluationReport, LoadedManifest};
use crate::ssl::{pretrain, SslConfig, SslModel};
use crate::synth::{generate_corpus, mix_seed, write_slides, SynthSpec, LABELS_MANIFEST};
use crate::tiling::{tile_manifest, TissueThresholds, DEFAULT_BAG_SIZE, DEFAULT_PATCH_SIZE};

pub const RUN_MANIFEST: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RUN_ROOT_ENV: &str = "ISUP_RUN_ROOT";

pub const MIL_CHECKPOINT: &str = "instance_classifier.ckpt";
pub const SSL_CHECKPOINT: &str = "teacher_student.ckpt";
pub const GRADER_CHECKPOINT: &str = "grader.ckpt";
pub const TRACE_FILE: &str = "trace.json";
pub const PSEUDO_LABELS: &str = "pseudo_labels.jsonl";
pub const SSL_CORPUS: &str = "ssl_corpus.jsonl";
pub const DATASET_FILE: &str = "dataset.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding timestamped run directories.
    pub root: PathBuf,
    pub name: String,
    /// Applied to every stage, replacing the per-module seeds.
    pub seed: u64,
    pub render_png: bool,
    /// Label manifest of existing slides (`slide_id`, Gleason pair, `image`,
    /// optional `mask`); replaces the synthetic corpus.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            root: PathBuf::from("runs"),
            name: "isup".into(),
            seed: 7,
            render_png: true,
            input: None,
        }
    }
}

/// Slide-level split, stratified by ISUP grade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            val_fraction: 0.1875,
            test_fraction: 0.1875,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub patch_size: usize,
    /// Bag size shared by bag training and grading.
    pub bag_size: usize,
    pub thresholds: TissueThresholds,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            bag_size: DEFAULT_BAG_SIZE,
            thresholds: TissueThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub per_class: usize,
    pub min_confidence: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            per_class: 4000,
            min_confidence: 0.0,
        }
    }
}

/// Extra grader variants trained and evaluated next to the full model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// One-hot labels with a 6-way cross-entropy head.
    pub no_or: bool,
    /// Randomly initialized backbone.
    pub no_ssl: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub synth: SynthSpec,
    pub split: SplitConfig,
    pub tiling: TilingConfig,
    pub mil: MilConfig,
    pub dataset: DatasetConfig,
    pub ssl: SslConfig,
    pub grader: GraderConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or full)"))),
        }
    }
}

impl PipelineConfig {
    /// Training schedule of the full-size setting: 35/50/30 epochs, batch
    /// sizes 8/40/8, learning rate 3e-4, with a five-block encoder at
    /// 128-pixel working resolution.
    pub fn full() -> Self {
        let encoder = EncoderSpec::stride2(256, 2, &[16, 32, 64, 128, 256]);
        PipelineConfig {
            run: RunConfig::default(),
            synth: SynthSpec {
                slides_per_grade: 160,
                ..SynthSpec::default()
            },
            split: SplitConfig::default(),
            tiling: TilingConfig::default(),
            mil: MilConfig {
                encoder: encoder.clone(),
                ..MilConfig::default()
            },
            dataset: DatasetConfig::default(),
            ssl: SslConfig {
                model: crate::ssl::SslSpec {
                    encoder: encoder.clone(),
                    ..Default::default()
                },
                ..SslConfig::default()
            },
            grader: GraderConfig {
                model: crate::grader::GraderSpec {
                    encoder,
                    ..Default::default()
                },
                ..GraderConfig::default()
            },
            ablation: AblationConfig::default(),
        }
    }

    /// 96 slides of 1024x1024 (60/18/18) with small encoders and short
    /// schedules; runs end to end in a few CPU minutes.
    pub fn desk() -> Self {
        let mut c = PipelineConfig::full();
        c.synth.slides_per_grade = 16;
        c.mil = MilConfig {
            encoder: EncoderSpec::stride2(256, 4, &[8, 16, 32, 64]),
            epochs: 30,
            batch_size: 2,
            lr: 2e-3,
            min_lr: 2e-5,
            restarts: 4,
            ..MilConfig::default()
        };
        c.dataset.per_class = 64;
        c.ssl.model.encoder = EncoderSpec::default();
        c.ssl.epochs = 20;
        c.ssl.lr = 1e-3;
        c.ssl.min_lr = 1e-5;
        c.grader.model.encoder = EncoderSpec::default();
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => PipelineConfig::desk(),
            Preset::Full => PipelineConfig::full(),
        }
    }

    /// Copies the run seed and the tiling bag size into the module configs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = c.run.seed;
        c.synth.seed = s;
        c.mil.seed = s;
        c.ssl.seed = s;
        c.grader.seed = s;
        c.mil.bag_size = c.tiling.bag_size;
        c.grader.bag_size = c.tiling.bag_size;
        c
    }

    /// Checks the resolved configuration; run before any stage does work.
    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        if c.run.input.is_none() {
            c.synth.validate()?;
            if c.synth.slide_size < c.tiling.patch_size {
                return Err(Error::Config(format!(
                    "slide size {} is smaller than the patch size {}",
                    c.synth.slide_size, c.tiling.patch_size
                )));
            }
        }
        if c.tiling.patch_size == 0 || c.tiling.bag_size == 0 {
            return Err(Error::Config("patch size and bag size must be positive".into()));
        }
        let s = c.split;
        let frac_ok = |f: f64| (0.0..1.0).contains(&f);
        if !(frac_ok(s.val_fraction) && frac_ok(s.test_fraction) && s.val_fraction + s.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split fractions must be in [0, 1) with a positive train share (val {}, test {})",
                s.val_fraction, s.test_fraction
            )));
        }
        if s.test_fraction == 0.0 {
            return Err(Error::Config("the test split is empty; set split.test_fraction > 0".into()));
        }
        c.mil.validate()?;
        c.ssl.validate()?;
        c.grader.validate()?;
        if c.dataset.per_class == 0 || !(0.0..=1.0).contains(&c.dataset.min_confidence) {
            return Err(Error::Config("dataset.per_class must be >= 1 and min_confidence in [0, 1]".into()));
        }
        for (name, enc) in [
            ("mil", &c.mil.encoder),
            ("ssl", &c.ssl.model.encoder),
            ("grader", &c.grader.model.encoder),
        ] {
            if enc.input_size != c.tiling.patch_size {
                return Err(Error::Config(format!(
                    "{name} encoder expects {}-pixel patches, tiling produces {}",
                    enc.input_size, c.tiling.patch_size
                )));
            }
        }
        if c.ssl.model.encoder != c.grader.model.encoder {
            return Err(Error::Config(
                "ssl.model.encoder and grader.model.encoder must match for the pre-trained backbone to load".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a `dotted.key=value` override; the value is read as TOML and
/// falls back to a plain string.
pub fn parse_override(assignment: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

/// Preset, then the TOML file, then `key=value` overrides, each layer
/// replacing only the keys it names.
pub fn load_config(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut value = toml::Value::try_from(PipelineConfig::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge_toml(&mut value, toml::Value::Table(table));
    }
    for o in overrides {
        let (path, v) = parse_override(o)?;
        let mut nested = v;
        for key in path.iter().rev() {
            let mut t = toml::Table::new();
            t.insert(key.clone(), nested);
            nested = toml::Value::Table(t);
        }
        merge_toml(&mut value, nested);
    }
    value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn stage_err(stage: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |source| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(source),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the synthetic corpus into `out_dir`; returns the label manifest.
pub fn run_synth(spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    let slides = generate_corpus(spec)?;
    let stats = crate::synth::corpus_stats(&slides, spec.cell_size)?;
    for w in &stats.warnings {
        log::warn!("{w}");
    }
    let manifest = write_slides(out_dir, &slides)?;
    write_json(&out_dir.join("stats.json"), &stats)?;
    Ok(manifest)
}

/// Stratified slide split: within each grade the slides are shuffled with
/// `seed`, the first share goes to test, the next to validation. Each split
/// keeps the manifest order.
pub fn split_entries(entries: &[SlideEntry], split: &SplitConfig, seed: u64) -> [Vec<SlideEntry>; 3] {
    let mut by_grade: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_grade.entry(e.isup.value()).or_default().push(i);
    }
    let mut assign = vec![0usize; entries.len()];
    for (grade, mut idx) in by_grade {
        idx.sort_by(|&a, &b| entries[a].slide_id.cmp(&entries[b].slide_id));
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, grade as u64)));
        let n = idx.len() as f64;
        let n_test = (n * split.test_fraction).round() as usize;
        let n_val = (n * split.val_fraction).round() as usize;
        for (k, &i) in idx.iter().enumerate() {
            assign[i] = if k < n_test {
                2
            } else if k < n_test + n_val {
                1
            } else {
                0
            };
        }
    }
    let mut out: [Vec<SlideEntry>; 3] = Default::default();
    for (e, &a) in entries.iter().zip(&assign) {
        out[a].push(e.clone());
    }
    out
}

/// Tiles the slides of `labels` into `out_dir` and writes the
/// `train/val/test.jsonl` split manifests next to the full one.
pub fn run_tile(labels: &Path, out_dir: &Path, tiling: &TilingConfig, split: &SplitConfig, seed: u64) -> Result<PathBuf> {
    let manifest = tile_manifest(labels, out_dir, tiling.patch_size, tiling.bag_size, &tiling.thresholds)?;
    let entries: Vec<SlideEntry> = read_jsonl(&manifest)?;
    for (name, part) in SPLITS.iter().zip(split_entries(&entries, split, seed)) {
        log::info!("{name} split: {} slides", part.len());
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), &part)?;
    }
    Ok(manifest)
}

/// Trains the instance classifier; writes its checkpoint and trace.
pub fn run_train_mil(train: &Path, val: Option<&Path>, config: &MilConfig, out_dir: &Path) -> Result<PathBuf> {
    let train = load_slides(train)?;
    let val = val.map(load_slides).transpose()?.unwrap_or_default();
    let out = train_module1(&train, &val, config)?;
    create_dir(out_dir)?;
    let ckpt = out_dir.join(MIL_CHECKPOINT);
    out.model.checkpoint(&out.params).save(&ckpt)?;
    write_json(
        &out_dir.join(TRACE_FILE),
        &json!({
            "loss": out.loss_trace,
            "val_score": out.val_trace,
            "selected_epoch": out.selected_epoch,
            "selected_attempt": out.selected_attempt,
            "attempts": out.attempts,
        }),
    )?;
    Ok(ckpt)
}

fn majority_mask_class(mask: &(usize, usize, Vec<u8>), x: usize, y: usize, size: usize) -> GleasonGrade {
    let (w, h, data) = mask;
    let mut counts = [0usize; 4];
    for yy in y..(y + size).min(*h) {
        for xx in x..(x + size).min(*w) {
            let c = match data[yy * w + xx] {
                3 => 1,
                4 => 2,
                5 => 3,
                _ => 0,
            };
            counts[c] += 1;
        }
    }
    let best = (0..4).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
    GleasonGrade::ALL[best]
}

/// Pseudo-labels every patch of `slides`, then selects the balanced
/// pre-training corpus. Writes `pseudo_labels.jsonl`, `ssl_corpus.jsonl` and
/// `dataset.json` (class counts, warnings, and pseudo-label agreement with
/// lesion masks when the slides have them).
pub fn run_build_ssl_dataset(checkpoint: &Path, slides: &Path, config: &DatasetConfig, out_dir: &Path) -> Result<PathBuf> {
    let (model, params) = InstanceClassifier::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let manifest = LoadedManifest::open(slides)?;
    let mut paths = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (entry, slide) in manifest.entries.iter().zip(&manifest.slides) {
        let mask = entry
            .mask
            .as_ref()
            .map(|m| crate::synth::load_mask(&manifest.base.join(m)))
            .transpose()?;
        for (pe, p) in entry.patches.iter().zip(&slide.patches) {
            let key = (slide.slide_id.clone(), p.index);
            paths.insert(key.clone(), relative_path(&manifest.base.join(&pe.path), out_dir));
            if let Some(m) = &mask {
                truth.insert(key, majority_mask_class(m, p.x as usize, p.y as usize, p.pixels.side()));
            }
        }
    }
    let patches: Vec<_> = manifest.slides.iter().flat_map(|s| s.patches.iter().cloned()).collect();
    let labeled = pseudo_label(&model, &params, &patches)?;
    let dataset = build_balanced_dataset(&labeled, config.per_class, config.min_confidence)?;
    for w in &dataset.warnings {
        log::warn!("{w}");
    }
    let entries = |ps: &[crate::record::PatchRecord]| -> Result<Vec<LabeledPatchEntry>> {
        ps.iter()
            .map(|p| LabeledPatchEntry::from_record(p, paths[&(p.slide_id.clone(), p.index)].clone()))
            .collect()
    };
    write_jsonl(&out_dir.join(PSEUDO_LABELS), &entries(&labeled)?)?;
    let corpus = out_dir.join(SSL_CORPUS);
    write_jsonl(&corpus, &entries(&dataset.patches)?)?;
    let agreement = |ps: &[crate::record::PatchRecord]| -> Option<f64> {
        let judged: Vec<bool> = ps
            .iter()
            .filter_map(|p| truth.get(&(p.slide_id.clone(), p.index)).map(|t| Some(*t) == p.pseudo_label))
            .collect();
        (!judged.is_empty()).then(|| judged.iter().filter(|&&b| b).count() as f64 / judged.len() as f64)
    };
    write_json(
        &out_dir.join(DATASET_FILE),
        &json!({
            "labeled_patches": labeled.len(),
            "class_counts": dataset.counts,
            "warnings": dataset.warnings,
            "pseudo_label_agreement": agreement(&labeled),
            "corpus_label_agreement": agreement(&dataset.patches),
        }),
    )?;
    Ok(corpus)
}

/// Teacher-student pre-training on a labeled patch corpus.
pub fn run_pretrain(corpus: &Path, config: &SslConfig, out_dir: &Path) -> Result<PathBuf> {
    let patches = load_labeled_patches(corpus)?;
    let pixels: Vec<&PatchPixels> = patches.iter().map(|p| &p.pixels).collect();
    let out = pretrain(&pixels, config)?;
    create_dir(out_dir)?;
    let ckpt = out_dir.join(SSL_CHECKPOINT);
    out.model.checkpoint(&out.state).save(&ckpt)?;
    write_json(
        &out_dir.join(TRACE_FILE),
        &json!({
            "loss": out.loss_trace,
            "val_loss": out.val_trace,
            "selected_epoch": out.selected_epoch,
        }),
    )?;
    Ok(ckpt)
}

/// Backbone weights of a teacher-student checkpoint.
pub fn load_backbone(path: &Path) -> Result<ParamSet<f32>> {
    let (model, state) = SslModel::from_checkpoint(&Checkpoint::load(path)?)?;
    Ok(model.backbone(&state))
}

/// Trains the grader, optionally starting from a pre-trained backbone.
pub fn run_finetune(train: &Path, val: Option<&Path>, backbone: Option<&Path>, config: &GraderConfig, out_dir: &Path) -> Result<PathBuf> {
    let train = load_slides(train)?;
    let val = val.map(load_slides).transpose()?.unwrap_or_default();
    let backbone = backbone.map(load_backbone).transpose()?;
    let out = finetune(&train, &val, backbone.as_ref(), config)?;
    create_dir(out_dir)?;
    let ckpt = out_dir.join(GRADER_CHECKPOINT);
    out.model.checkpoint(&out.params).save(&ckpt)?;
    write_json(
        &out_dir.join(TRACE_FILE),
        &json!({
            "loss": out.loss_trace,
            "val_kappa": out.val_kappa_trace,
            "selected_epoch": out.selected_epoch,
        }),
    )?;
    Ok(ckpt)
}

/// Grades the slides of `manifest` and writes predictions, metrics,
/// confusion matrix and explainability report into `report_dir`.
pub fn run_predict(checkpoint: &Path, manifest: &Path, report_dir: &Path, bag_size: usize, render_png: bool) -> Result<EvaluationReport> {
    let (model, params) = Grader::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let slides = LoadedManifest::open(manifest)?;
    let predictions = report::predict_manifest(&model, &params, &slides, bag_size)?;
    report::write_predictions(report_dir, &predictions)?;
    let (metrics, explanations) = report::evaluate(&slides, &predictions)?;
    report::write_report(report_dir, &metrics, &explanations, &slides, render_png)?;
    Ok(metrics)
}

/// Recomputes the report from an existing `predictions.jsonl`.
pub fn run_evaluate(predictions: &Path, manifest: &Path, report_dir: &Path, render_png: bool) -> Result<EvaluationReport> {
    let predictions = report::read_predictions(predictions)?;
    let slides = LoadedManifest::open(manifest)?;
    let (metrics, explanations) = report::evaluate(&slides, &predictions)?;
    report::write_report(report_dir, &metrics, &explanations, &slides, render_png)?;
    Ok(metrics)
}

/// Record of one completed stage in `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub fingerprint: String,
    /// SHA-256 of every file the stage wrote, keyed by path relative to the
    /// stage directory.
    pub outputs: BTreeMap<String, String>,
    /// Hash over `outputs`.
    pub digest: String,
    pub seconds: f64,
    pub completed_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub created_at: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, base, out)?;
        } else {
            out.push(p.strip_prefix(base).expect("inside base").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 of every file below `dir`, keyed by `/`-separated relative path.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    if dir.is_dir() {
        collect_files(dir, dir, &mut files)?;
    }
    files
        .into_iter()
        .map(|rel| {
            let path = dir.join(&rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok((key, sha256_hex(&bytes)))
        })
        .collect()
}

fn digest_of(outputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in outputs {
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

/// Outcome of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    /// Evaluation report per grader variant (`full`, `no-or`, `no-ssl`).
    pub reports: BTreeMap<String, EvaluationReport>,
}

struct Runner {
    dir: PathBuf,
    manifest: RunManifest,
    executed: Vec<String>,
    skipped: Vec<String>,
}

impl Runner {
    fn save(&self) -> Result<()> {
        write_json(&self.dir.join(RUN_MANIFEST), &self.manifest)
    }

    fn digest(&self, stage: &str) -> String {
        self.manifest.stage(stage).map(|s| s.digest.clone()).unwrap_or_default()
    }

    /// Runs `body` in `<run>/<name>` unless a record with the same
    /// fingerprint exists and the directory still matches its hashes.
    fn stage(&mut self, name: &str, config: Value, upstream: &[&str], body: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let inputs: BTreeMap<&str, String> = upstream.iter().map(|&u| (u, self.digest(u))).collect();
        let fingerprint = sha256_hex(
            serde_json::to_string(&json!({ "stage": name, "config": config, "inputs": inputs }))
                .expect("json value serializes")
                .as_bytes(),
        );
        let dir = self.dir.join(name);
        if let Some(rec) = self.manifest.stage(name) {
            if rec.fingerprint == fingerprint && hash_tree(&dir).map_err(stage_err(name))? == rec.outputs {
                log::info!("stage {name}: up to date, skipping");
                self.skipped.push(name.to_string());
                return Ok(());
            }
        }
        if dir.exists() {
            log::info!("stage {name}: discarding stale outputs in {}", dir.display());
            std::fs::remove_dir_all(&dir).map_err(|e| stage_err(name)(Error::io(&dir, e)))?;
        }
        create_dir(&dir).map_err(stage_err(name))?;
        log::info!("stage {name}: running");
        let start = Instant::now();
        body(&dir).map_err(stage_err(name))?;
        let outputs = hash_tree(&dir).map_err(stage_err(name))?;
        let record = StageRecord {
            name: name.to_string(),
            fingerprint,
            digest: digest_of(&outputs),
            outputs,
            seconds: start.elapsed().as_secs_f64(),
            completed_at: chrono::Local::now().to_rfc3339(),
        };
        log::info!("stage {name}: done in {:.1} s", record.seconds);
        self.manifest.stages.retain(|s| s.name != name);
        self.manifest.stages.push(record);
        self.executed.push(name.to_string());
        self.save().map_err(stage_err(name))
    }
}

/// Fresh timestamped directory `<root>/<name>-<YYYYmmdd-HHMMSS>`.
pub fn new_run_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let mut dir = root.join(format!("{name}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{name}-{stamp}-{n}"));
    }
    create_dir(&dir)?;
    Ok(dir)
}

/// Grader variants of a run: directory suffix, head, and whether the
/// pre-trained backbone is loaded.
pub fn variants(ablation: &AblationConfig) -> Vec<(&'static str, HeadKind, bool)> {
    let mut v = vec![("full", HeadKind::Ordinal, true)];
    if ablation.no_or {
        v.push(("no-or", HeadKind::Categorical, true));
    }
    if ablation.no_ssl {
        v.push(("no-ssl", HeadKind::Ordinal, false));
    }
    v
}

fn variant_stage(base: &str, variant: &str) -> String {
    if variant == "full" {
        base.to_string()
    } else {
        format!("{base}-{variant}")
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Runs every stage into `run_dir` (a new timestamped directory under
/// `run.root` when `None`). Stages already completed with the same inputs
/// are skipped.
pub fn run_pipeline(config: &PipelineConfig, run_dir: Option<&Path>) -> Result<RunOutcome> {
    config.validate()?;
    let c = config.resolved();
    let dir = match run_dir {
        Some(d) => {
            create_dir(d)?;
            d.to_path_buf()
        }
        None => new_run_dir(&c.run.root, &c.run.name)?,
    };
    let manifest_path = dir.join(RUN_MANIFEST);
    let previous: Option<RunManifest> = manifest_path.exists().then(|| report::read_json(&manifest_path)).transpose()?;
    let manifest = RunManifest {
        version: 1,
        created_at: previous
            .as_ref()
            .map(|m| m.created_at.clone())
            .unwrap_or_else(|| chrono::Local::now().to_rfc3339()),
        config: c.clone(),
        stages: previous.map(|m| m.stages).unwrap_or_default(),
    };
    let mut r = Runner {
        dir: dir.clone(),
        manifest,
        executed: Vec::new(),
        skipped: Vec::new(),
    };
    r.save()?;
    log::info!("run directory {}", dir.display());

    let labels = match &c.run.input {
        None => {
            r.stage("synth", to_value(&c.synth), &[], |out| run_synth(&c.synth, out).map(|_| ()))?;
            dir.join("synth").join(LABELS_MANIFEST)
        }
        Some(input) => {
            let input = std::path::absolute(input).map_err(|e| Error::io(input, e))?;
            let bytes = std::fs::read(&input).map_err(|e| stage_err("synth")(Error::io(&input, e)))?;
            let source = json!({ "input": input, "sha256": sha256_hex(&bytes) });
            r.stage("synth", source.clone(), &[], |out| write_json(&out.join("source.json"), &source))?;
            input
        }
    };
    let tiles = dir.join("tile");
    r.stage("tile", json!({ "tiling": c.tiling, "split": c.split, "seed": c.run.seed }), &["synth"], |out| {
        run_tile(&labels, out, &c.tiling, &c.split, c.run.seed).map(|_| ())
    })?;
    let split = |name: &str| tiles.join(format!("{name}.jsonl"));
    r.stage("train-mil", to_value(&c.mil), &["tile"], |out| {
        run_train_mil(&split("train"), Some(&split("val")), &c.mil, out).map(|_| ())
    })?;
    r.stage("build-ssl-dataset", to_value(&c.dataset), &["tile", "train-mil"], |out| {
        run_build_ssl_dataset(&dir.join("train-mil").join(MIL_CHECKPOINT), &split("train"), &c.dataset, out).map(|_| ())
    })?;
    r.stage("pretrain", to_value(&c.ssl), &["build-ssl-dataset"], |out| {
        run_pretrain(&dir.join("build-ssl-dataset").join(SSL_CORPUS), &c.ssl, out).map(|_| ())
    })?;

    let mut reports = BTreeMap::new();
    for (variant, head, use_ssl) in variants(&c.ablation) {
        let mut g = c.grader.clone();
        g.model.head = head;
        let ft = variant_stage("finetune", variant);
        let upstream: &[&str] = if use_ssl { &["tile", "pretrain"] } else { &["tile"] };
        let backbone = use_ssl.then(|| dir.join("pretrain").join(SSL_CHECKPOINT));
        r.stage(&ft, json!({ "grader": g, "pretrained": use_ssl }), upstream, |out| {
            run_finetune(&split("train"), Some(&split("val")), backbone.as_deref(), &g, out).map(|_| ())
        })?;
        let ev = variant_stage("evaluate", variant);
        let ckpt = dir.join(&ft).join(GRADER_CHECKPOINT);
        r.stage(
            &ev,
            json!({ "bag_size": g.bag_size, "render_png": c.run.render_png }),
            &["tile", ft.as_str()],
            |out| run_predict(&ckpt, &split("test"), out, g.bag_size, c.run.render_png).map(|_| ()),
        )?;
        reports.insert(variant.to_string(), report::read_report(&dir.join(&ev)).map_err(stage_err(&ev))?);
    }
    write_json(&dir.join(SUMMARY_FILE), &summarize(&reports))?;
    Ok(RunOutcome {
        dir,
        executed: r.executed,
        skipped: r.skipped,
        reports,
    })
}

/// Headline numbers per variant.
pub fn summarize(reports: &BTreeMap<String, EvaluationReport>) -> Value {
    let rows: serde_json::Map<String, Value> = reports
        .iter()
        .map(|(k, r)| {
            (
                k.clone(),
                json!({
                    "slides": r.n_slides,
                    "kappa": r.grading.kappa,
                    "accuracy": r.grading.accuracy,
                    "macro_f1": r.grading.macro_f1,
                    "mean_abs_error": r.grading.mean_abs_error,
                    "severe_errors": r.grading.severe_errors,
                    "detection_accuracy": r.detection.map(|d| d.accuracy),
                    "detection_f1": r.detection.map(|d| d.f1),
                    "detection_auc": r.detection.map(|d| d.auc),
                    "top_attention_lesion_rate": r.explainability.hit_rate,
                }),
            )
        })
        .collect();
    Value::Object(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade::IsupGrade;

    #[test]
    fn presets_validate_and_share_backbone() {
        PipelineConfig::desk().validate().unwrap();
        PipelineConfig::full().validate().unwrap();
        let p = PipelineConfig::full();
        assert_eq!((p.mil.epochs, p.ssl.epochs, p.grader.epochs), (35, 50, 30));
        assert_eq!((p.mil.batch_size, p.ssl.batch_size, p.grader.batch_size), (8, 40, 8));
        assert_eq!((p.mil.lr, p.ssl.lr, p.grader.lr), (3e-4, 3e-4, 3e-4));
        assert_eq!((p.ssl.lambda, p.ssl.momentum), (0.02, 0.99));
    }

    #[test]
    fn validation_rejects_mismatched_encoders() {
        let mut c = PipelineConfig::desk();
        c.grader.model.encoder = EncoderSpec::stride2(256, 4, &[8, 16, 32, 64]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = PipelineConfig::desk();
        c.split.val_fraction = 0.6;
        c.split.test_fraction = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_layers_override_only_named_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[mil]\nepochs = 3\n[run]\nname = \"x\"\n").unwrap();
        let c = load_config(
            Preset::Desk,
            Some(&file),
            &["grader.lr=0.01".into(), "ablation.no_or=true".into(), "run.root=/tmp/r".into()],
        )
        .unwrap();
        let desk = PipelineConfig::desk();
        assert_eq!(c.mil.epochs, 3);
        assert_eq!(c.mil.lr, desk.mil.lr);
        assert_eq!(c.run.name, "x");
        assert_eq!(c.grader.lr, 0.01);
        assert!(c.ablation.no_or);
        assert_eq!(c.run.root, PathBuf::from("/tmp/r"));
        assert_eq!(c.ssl, desk.ssl);
        let round: PipelineConfig = toml::from_str(&desk.to_toml().unwrap()).unwrap();
        assert_eq!(round, desk);
        assert!(load_config(Preset::Desk, None, &["mil.nope=1".into()]).is_err());
        assert!(load_config(Preset::Desk, None, &["novalue".into()]).is_err());
    }

    #[test]
    fn stratified_split_sizes_and_determinism() {
        let entries: Vec<SlideEntry> = (0..96)
            .map(|i| {
                let g = (i / 16) as u8;
                let (p, s) = crate::synth::gleason_pairs_for(g)[0];
                SlideEntry {
                    slide_id: format!("s{i:03}"),
                    primary_gg: p,
                    secondary_gg: s,
                    isup: IsupGrade::new(g).unwrap(),
                    image: None,
                    mask: None,
                    width: 0,
                    height: 0,
                    patches: vec![],
                    bag: vec![],
                }
            })
            .collect();
        let a = split_entries(&entries, &SplitConfig::default(), 3);
        assert_eq!([a[0].len(), a[1].len(), a[2].len()], [60, 18, 18]);
        for part in &a {
            for g in 0..6u8 {
                let n = part.iter().filter(|e| e.isup.value() == g).count();
                assert_eq!(n * 96, part.len() * 16);
            }
        }
        assert_eq!(a, split_entries(&entries, &SplitConfig::default(), 3));
        assert_ne!(a, split_entries(&entries, &SplitConfig::default(), 4));
    }

    #[test]
    fn hash_tree_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.txt"), "1").unwrap();
        std::fs::write(dir.path().join("y.txt"), "2").unwrap();
        let h = hash_tree(dir.path()).unwrap();
        assert_eq!(h.keys().cloned().collect::<Vec<_>>(), vec!["a/x.txt", "y.txt"]);
        std::fs::write(dir.path().join("y.txt"), "3").unwrap();
        assert_ne!(hash_tree(dir.path()).unwrap(), h);
    }

    #[test]
    fn majority_class_from_mask() {
        let mut data = vec![0u8; 16];
        data[..10].fill(4);
        assert_eq!(majority_mask_class(&(4, 4, data), 0, 0, 4), GleasonGrade::G4);
    }
}
