//! Hybrid instance/bag multiple-instance learning: a patch classifier trained
//! from slide-level Gleason grades through top-k bag pooling, then used to
//! pseudo-label patches and assemble a class-balanced patch corpus.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::GleasonGrade;
use crate::nn::bank::gather_from;
use crate::nn::encoder::EncoderCache;
use crate::nn::loss::{bce_mean, bce_mean_grad, softmax_rows, softmax_rows_backward};
use crate::nn::{
    AdamConfig, Checkpoint, CosineSchedule, Encoder, EncoderSpec, InputBank, Linear, OptimizerState, Param, ParamSet,
    Real,
};
use crate::record::{PatchPixels, PatchRecord, SlideRecord};
use crate::synth::mix_seed;
use crate::tiling::{dedup_bag, select_bag_indices, DEFAULT_BAG_SIZE};

/// Grades pooled at bag level, in column order 1..=3 of the instance output.
pub const BAG_GRADES: [GleasonGrade; 3] = [GleasonGrade::G3, GleasonGrade::G4, GleasonGrade::G5];
/// Instance classes: benign, GG3, GG4, GG5.
pub const INSTANCE_CLASSES: usize = 4;
pub const BCE_EPS: f64 = 1e-7;
pub const CHECKPOINT_KIND: &str = "instance-classifier";

/// Per-grade bag probabilities for GG3, GG4, GG5.
pub type BagProbs<T = f64> = [T; 3];

/// Presence of GG3, GG4, GG5 in a slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagTarget {
    pub y: [u8; 3],
}

impl BagTarget {
    pub fn as_real<T: Real>(&self) -> [T; 3] {
        self.y.map(|v| T::from_f64_lossy(v as f64))
    }
}

/// Mean of the `k` largest probabilities of each cancer column of an `l x 4`
/// instance-probability matrix.
pub fn topk_bag_pool<T: Real>(instance_probs: ArrayView2<T>, k: usize) -> Result<BagProbs<T>> {
    Ok(topk_with_rows(instance_probs, k)?.0)
}

/// Pooled values plus, per grade, the rows that were averaged.
fn topk_with_rows<T: Real>(probs: ArrayView2<T>, k: usize) -> Result<(BagProbs<T>, [Vec<usize>; 3])> {
    let l = probs.nrows();
    if probs.ncols() != INSTANCE_CLASSES {
        return Err(Error::Shape(format!(
            "instance probabilities need {INSTANCE_CLASSES} columns, got {}",
            probs.ncols()
        )));
    }
    if k == 0 || k > l {
        return Err(Error::Parameter(format!("top-k pooling needs 1 <= k <= {l}, got k = {k}")));
    }
    let mut pooled = [T::zero(); 3];
    let mut rows: [Vec<usize>; 3] = Default::default();
    for j in 0..3 {
        let col = probs.column(j + 1);
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by(|&a, &b| col[b].to_f64_lossy().total_cmp(&col[a].to_f64_lossy()).then(a.cmp(&b)));
        order.truncate(k);
        let sum: T = order.iter().map(|&i| col[i]).sum();
        pooled[j] = sum / T::from_f64_lossy(k as f64);
        rows[j] = order;
    }
    Ok((pooled, rows))
}

/// Mean binary cross entropy over the three grades.
pub fn bag_loss<T: Real>(b: &BagProbs<T>, y: &BagTarget) -> T {
    bce_mean(b, &y.as_real::<T>(), BCE_EPS)
}

pub fn bag_target_from_slide(slide: &SlideRecord) -> Result<BagTarget> {
    if !slide.isup.is_cancer() {
        return Err(Error::ExcludedSlide(format!(
            "slide {} is benign and takes no part in bag-level training",
            slide.slide_id
        )));
    }
    let mut y = [0u8; 3];
    for (j, g) in BAG_GRADES.iter().enumerate() {
        if *g == slide.primary_gg || *g == slide.secondary_gg {
            y[j] = 1;
        }
    }
    Ok(BagTarget { y })
}

/// Argmax label (lowest class wins ties) and its probability.
pub fn label_from_probs(probs: &[f64]) -> (GleasonGrade, f64) {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    (GleasonGrade::from_class_index(best).expect("four classes"), probs[best])
}

/// Patch encoder followed by a linear layer and a 4-way softmax.
#[derive(Debug, Clone)]
pub struct InstanceClassifier {
    encoder: Encoder,
    head: Linear,
}

/// Forward state kept for [`InstanceClassifier::backward`].
pub struct InstanceCache<T> {
    encoder: EncoderCache<T>,
    embeddings: Array2<T>,
    probs: Array2<T>,
}

impl InstanceCache<f32> {
    pub fn probs(&self) -> &Array2<f32> {
        &self.probs
    }
}

impl InstanceClassifier {
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        let encoder = Encoder::new(spec)?;
        let head = Linear::new(encoder.embedding_dim(), INSTANCE_CLASSES);
        Ok(InstanceClassifier { encoder, head })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + Linear::N_PARAMS
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        self.init_with_prior(rng, 0.0)
    }

    /// Like [`init`](Self::init) with the benign output bias set to
    /// `benign_logit`, so patches start out benign until bag pooling pushes
    /// them toward a cancer grade.
    pub fn init_with_prior<T: Real, R: Rng + ?Sized>(&self, rng: &mut R, benign_logit: f64) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.extend_prefixed("encoder", self.encoder.init(rng));
        let mut head = self.head.init::<T, R>(rng, 1.0);
        head.params_mut()[1].value[[0]] = T::from_f64_lossy(benign_logit);
        p.extend_prefixed("head", head);
        p
    }

    fn check(&self, params: &[Param<impl Real>]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "instance classifier expects {} parameter arrays, got {}",
                self.n_params(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Class probabilities (`B x 4`) for a prepared batch.
    pub fn forward<T: Real>(&self, params: &[Param<T>], input: &Array4<T>) -> Result<(Array2<T>, InstanceCache<T>)> {
        self.check(params)?;
        let ne = self.encoder.n_params();
        let (embeddings, encoder) = self.encoder.forward(&params[..ne], input)?;
        let logits = self.head.forward(&params[ne..], embeddings.view())?;
        let probs = softmax_rows(logits.view());
        Ok((
            probs.clone(),
            InstanceCache {
                encoder,
                embeddings,
                probs,
            },
        ))
    }

    /// Parameter gradients given `dL/d(probs)`.
    pub fn backward<T: Real>(&self, params: &[Param<T>], cache: &InstanceCache<T>, d_probs: ArrayView2<T>) -> Result<ParamSet<T>> {
        self.check(params)?;
        let ne = self.encoder.n_params();
        let d_logits = softmax_rows_backward(cache.probs.view(), d_probs);
        let (d_emb, head_grads) = self.head.backward(&params[ne..], cache.embeddings.view(), d_logits.view(), true)?;
        let mut grads = self
            .encoder
            .backward(&params[..ne], &cache.encoder, d_emb.expect("requested").view())?
            .into_params();
        for (p, g) in params[ne..].iter().zip(head_grads) {
            grads.push(Param {
                name: p.name.clone(),
                value: g,
            });
        }
        Ok(ParamSet::from_params(grads))
    }

    /// Loss of one bag and the parameter gradients. `input` holds the distinct
    /// patches; `rows[i]` names the input sample sitting at bag position `i`.
    pub fn bag_loss_and_grad<T: Real>(
        &self,
        params: &ParamSet<T>,
        input: &Array4<T>,
        rows: &[usize],
        target: &BagTarget,
        k: usize,
    ) -> Result<(T, ParamSet<T>)> {
        let (probs, cache) = self.forward(params.params(), input)?;
        let mut d_probs = Array2::zeros(probs.dim());
        let loss = accumulate_bag_grad(probs.view(), rows, target, k, &mut d_probs)?;
        let grads = self.backward(params.params(), &cache, d_probs.view())?;
        Ok((loss, grads))
    }

    /// Class probabilities for raw patches, evaluated in chunks.
    pub fn predict_probs(&self, params: &ParamSet<f32>, patches: &[&PatchPixels]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((patches.len(), INSTANCE_CLASSES));
        for (ci, chunk) in patches.chunks(64).enumerate() {
            let input = self.encoder.prepare_input::<f32>(chunk)?;
            let (p, _) = self.forward(params.params(), &input)?;
            for (r, row) in p.axis_iter(Axis(0)).enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    out[[ci * 64 + r, c]] = v as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self, params: &ParamSet<f32>) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, spec_json(self.encoder.spec())).with_group("classifier", params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamSet<f32>)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected `{CHECKPOINT_KIND}`, found `{}`", ckpt.kind)));
        }
        let spec: EncoderSpec = serde_json::from_value(ckpt.spec.clone())
            .map_err(|e| Error::Checkpoint(format!("bad encoder spec: {e}")))?;
        let model = InstanceClassifier::new(spec)?;
        let params = ckpt.group("classifier")?.clone();
        let reference: ParamSet<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        reference.check_layout(params.params())?;
        Ok((model, params))
    }
}

pub(crate) fn spec_json<S: Serialize>(spec: &S) -> serde_json::Value {
    serde_json::to_value(spec).expect("spec serializes")
}

/// Adds the gradient of one bag's loss (w.r.t. the distinct-patch probability
/// rows) into `d_probs` and returns the loss.
fn accumulate_bag_grad<T: Real>(
    probs: ArrayView2<T>,
    rows: &[usize],
    target: &BagTarget,
    k: usize,
    d_probs: &mut Array2<T>,
) -> Result<T> {
    let bag = probs.select(Axis(0), rows);
    let (b, top) = topk_with_rows(bag.view(), k)?;
    let loss = bag_loss(&b, target);
    let db = bce_mean_grad(&b, &target.as_real::<T>(), BCE_EPS);
    let kf = T::from_f64_lossy(k as f64);
    for j in 0..3 {
        for &pos in &top[j] {
            d_probs[[rows[pos], j + 1]] += db[j] / kf;
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MilConfig {
    pub encoder: EncoderSpec,
    /// Patches averaged per grade by the bag pooling.
    pub k: usize,
    pub bag_size: usize,
    pub epochs: usize,
    /// Bags per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    /// Random flips and transposes of training patches.
    pub augment: bool,
    /// Initial bias of the benign output.
    pub benign_logit_init: f64,
    /// Independent training runs at most; stops early once one labels every
    /// validation bag correctly, otherwise keeps the best on validation.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            encoder: EncoderSpec::stride2(256, 4, &[8, 16, 32, 64]),
            k: 4,
            bag_size: DEFAULT_BAG_SIZE,
            epochs: 35,
            batch_size: 8,
            lr: 3e-4,
            min_lr: 3e-6,
            augment: true,
            benign_logit_init: 2.0,
            restarts: 1,
            seed: 0,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.k == 0 || self.k > self.bag_size {
            return Err(Error::Config(format!(
                "mil.k must be in 1..={}, got {}",
                self.bag_size, self.k
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.restarts == 0 {
            return Err(Error::Config("mil epochs, batch size and restarts must be positive".into()));
        }
        if !(self.lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::Config(format!(
                "mil learning rates must satisfy 0 <= min_lr <= lr, lr > 0 (got {}, {})",
                self.min_lr, self.lr
            )));
        }
        Ok(())
    }
}

/// A slide prepared for bag training: pooled distinct patches plus the
/// bag-position-to-patch map.
struct PreparedBag {
    bank: InputBank,
    rows: Vec<usize>,
    target: BagTarget,
}

fn prepare_bags(model: &InstanceClassifier, slides: &[&SlideRecord], bag_size: usize) -> Result<Vec<PreparedBag>> {
    slides
        .iter()
        .map(|s| {
            let (unique, rows) = dedup_bag(&select_bag_indices(&s.patches, bag_size)?);
            let pixels: Vec<&PatchPixels> = unique.iter().map(|&i| &s.patches[i].pixels).collect();
            Ok(PreparedBag {
                bank: InputBank::build(model.encoder(), &pixels)?,
                rows,
                target: bag_target_from_slide(s)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MilTraining {
    pub model: InstanceClassifier,
    pub params: ParamSet<f32>,
    /// Mean training bag loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Validation selection score (mean of label accuracy and F1) per epoch.
    pub val_trace: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    /// Zero-based restart whose parameters were kept; traces belong to it.
    pub selected_attempt: usize,
    pub attempts: usize,
}

/// Bag-level accuracy and micro F1 of grade-presence calls (`b > 0.5`).
pub fn bag_presence_scores(pred: &[BagProbs], targets: &[BagTarget]) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_, mut correct, mut n) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (b, t) in pred.iter().zip(targets) {
        for j in 0..3 {
            let p = b[j] > 0.5;
            let y = t.y[j] == 1;
            match (p, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
            correct += (p == y) as usize;
            n += 1;
        }
    }
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (acc, f1)
}

/// Selection score (mean of accuracy and F1) and mean bag loss.
fn evaluate_bags(model: &InstanceClassifier, params: &ParamSet<f32>, bags: &[PreparedBag], k: usize) -> Result<(f64, f64)> {
    let mut pred = Vec::with_capacity(bags.len());
    let mut loss = 0.0;
    for bag in bags {
        let picks: Vec<usize> = (0..bag.bank.len()).collect();
        let input = bag.bank.gather::<f32>(&picks, None);
        let (probs, _) = model.forward(params.params(), &input)?;
        let b = topk_bag_pool(probs.select(Axis(0), &bag.rows).view(), k)?.map(|v| v as f64);
        loss += bag_loss(&b, &bag.target);
        pred.push(b);
    }
    let targets: Vec<BagTarget> = bags.iter().map(|b| b.target).collect();
    let (acc, f1) = bag_presence_scores(&pred, &targets);
    Ok(((acc + f1) / 2.0, loss / bags.len().max(1) as f64))
}

/// Trains the instance classifier end to end from slide-level grades.
/// Benign slides are skipped. With validation slides, the epoch with the best
/// mean of bag-label accuracy and F1 is kept (lower validation loss breaks
/// ties); otherwise the last epoch of the first attempt.
pub fn train_module1(train: &[SlideRecord], val: &[SlideRecord], config: &MilConfig) -> Result<MilTraining> {
    config.validate()?;
    let cancer: Vec<&SlideRecord> = train.iter().filter(|s| s.isup.is_cancer()).collect();
    if cancer.is_empty() {
        return Err(Error::Parameter("no cancerous training slides for bag-level training".into()));
    }
    if cancer.len() < train.len() {
        log::info!("bag training skips {} benign slides", train.len() - cancer.len());
    }
    let model = InstanceClassifier::new(config.encoder.clone())?;
    let bags = prepare_bags(&model, &cancer, config.bag_size)?;
    let val_cancer: Vec<&SlideRecord> = val.iter().filter(|s| s.isup.is_cancer()).collect();
    let val_bags = prepare_bags(&model, &val_cancer, config.bag_size)?;

    let mut chosen: Option<Candidate> = None;
    let mut attempts = 0;
    for attempt in 0..config.restarts {
        let seed = if attempt == 0 { config.seed } else { mix_seed(config.seed, attempt as u64) };
        let c = train_candidate(&model, &bags, &val_bags, config, seed)?;
        attempts += 1;
        log::info!(
            "mil attempt {}: val score {:.4}, val loss {:.4}",
            attempt + 1,
            c.score.0,
            c.score.1
        );
        let solved = !val_bags.is_empty() && c.score.0 >= 1.0;
        let better = chosen
            .as_ref()
            .map(|b| c.score.0 > b.score.0 || (c.score.0 == b.score.0 && c.score.1 < b.score.1))
            .unwrap_or(true);
        if better {
            chosen = Some(Candidate { attempt, ..c });
        }
        if solved || val_bags.is_empty() {
            break;
        }
    }
    let c = chosen.expect("restarts >= 1");
    Ok(MilTraining {
        model,
        params: c.params,
        loss_trace: c.loss_trace,
        val_trace: c.val_trace,
        selected_epoch: c.selected_epoch,
        selected_attempt: c.attempt,
        attempts,
    })
}

struct Candidate {
    params: ParamSet<f32>,
    loss_trace: Vec<f64>,
    val_trace: Vec<f64>,
    selected_epoch: usize,
    attempt: usize,
    /// Validation (score, loss) of the kept epoch.
    score: (f64, f64),
}

fn train_candidate(
    model: &InstanceClassifier,
    bags: &[PreparedBag],
    val_bags: &[PreparedBag],
    config: &MilConfig,
    seed: u64,
) -> Result<Candidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: ParamSet<f32> = model.init_with_prior(&mut rng, config.benign_logit_init);

    let steps_per_epoch = bags.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(config.lr, config.min_lr, (steps_per_epoch * config.epochs) as u64);
    let mut opt = OptimizerState::new(&params, AdamConfig::default(), schedule);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut val_trace = Vec::new();
    let mut best: Option<((f64, f64), usize, ParamSet<f32>)> = None;
    let mut order: Vec<usize> = (0..bags.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut picks = Vec::new();
            let mut offsets = Vec::with_capacity(batch.len());
            for (bi, &slide) in batch.iter().enumerate() {
                offsets.push(picks.len());
                picks.extend((0..bags[slide].bank.len()).map(|p| (bi, p)));
            }
            let codes: Option<Vec<u8>> = config
                .augment
                .then(|| picks.iter().map(|_| rng.random_range(0..8u8)).collect());
            let banks: Vec<&InputBank> = batch.iter().map(|&s| &bags[s].bank).collect();
            let input: Array4<f32> = gather_from(&banks, &picks, codes.as_deref()).expect("non-empty batch");
            let (probs, cache) = model.forward(params.params(), &input)?;
            let mut d_probs = Array2::<f32>::zeros(probs.dim());
            for (bi, &slide) in batch.iter().enumerate() {
                let rows: Vec<usize> = bags[slide].rows.iter().map(|r| r + offsets[bi]).collect();
                let loss = accumulate_bag_grad(probs.view(), &rows, &bags[slide].target, config.k, &mut d_probs)?;
                epoch_loss += loss as f64;
            }
            d_probs.mapv_inplace(|v| v / batch.len() as f32);
            let grads = model.backward(params.params(), &cache, d_probs.view())?;
            opt.update(&mut params, &grads)?;
        }
        let mean = epoch_loss / bags.len() as f64;
        loss_trace.push(mean);
        if !val_bags.is_empty() {
            let (score, val_loss) = evaluate_bags(model, &params, val_bags, config.k)?;
            log::info!(
                "mil epoch {}: loss {mean:.4}, val score {score:.4}, val loss {val_loss:.4}",
                epoch + 1
            );
            val_trace.push(score);
            let better = best
                .as_ref()
                .map(|((s, l), _, _)| score > *s || (score == *s && val_loss < *l))
                .unwrap_or(true);
            if better {
                best = Some(((score, val_loss), epoch, params.clone()));
            }
        } else {
            log::info!("mil epoch {}: loss {mean:.4}", epoch + 1);
        }
    }
    let (score, selected_epoch, params) = match best {
        Some((s, e, p)) => (s, e, p),
        None => ((f64::NAN, f64::NAN), config.epochs - 1, params),
    };
    Ok(Candidate {
        params,
        loss_trace,
        val_trace,
        selected_epoch,
        attempt: 0,
        score,
    })
}

/// Annotates every patch with the argmax class and its probability.
pub fn pseudo_label(model: &InstanceClassifier, params: &ParamSet<f32>, patches: &[PatchRecord]) -> Result<Vec<PatchRecord>> {
    let pixels: Vec<&PatchPixels> = patches.iter().map(|p| &p.pixels).collect();
    let probs = model.predict_probs(params, &pixels)?;
    Ok(patches
        .iter()
        .zip(probs.axis_iter(Axis(0)))
        .map(|(p, row)| {
            let (label, conf) = label_from_probs(row.as_slice().expect("row-major"));
            let mut p = p.clone();
            p.pseudo_label = Some(label);
            p.pseudo_confidence = Some(conf);
            p
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancedDataset {
    pub patches: Vec<PatchRecord>,
    /// Selected patches per class (benign, GG3, GG4, GG5).
    pub counts: [usize; 4],
    pub warnings: Vec<String>,
}

/// Per class, keeps the `per_class` patches with the highest tissue fraction
/// among those whose pseudo-label confidence reaches `min_confidence`.
/// Ties fall back to (slide id, patch index) so the output is deterministic.
pub fn build_balanced_dataset(labeled: &[PatchRecord], per_class: usize, min_confidence: f64) -> Result<BalancedDataset> {
    if per_class == 0 {
        return Err(Error::Parameter("per_class must be >= 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<&PatchRecord>> = BTreeMap::new();
    for p in labeled {
        let (Some(label), Some(conf)) = (p.pseudo_label, p.pseudo_confidence) else {
            return Err(Error::InvalidLabel(format!(
                "patch {}#{} has no pseudo-label",
                p.slide_id, p.index
            )));
        };
        if conf >= min_confidence {
            by_class.entry(label.class_index()).or_default().push(p);
        }
    }
    let mut out = Vec::new();
    let mut counts = [0usize; 4];
    let mut warnings = Vec::new();
    for (c, grade) in GleasonGrade::ALL.iter().enumerate() {
        let mut members = by_class.remove(&c).unwrap_or_default();
        if members.is_empty() {
            warnings.push(format!("class {grade} has no labeled patches"));
            continue;
        }
        if members.len() < per_class {
            warnings.push(format!(
                "class {grade} has only {} patches (requested {per_class})",
                members.len()
            ));
        }
        members.sort_by(|a, b| {
            b.tissue_fraction
                .total_cmp(&a.tissue_fraction)
                .then_with(|| a.slide_id.cmp(&b.slide_id))
                .then(a.index.cmp(&b.index))
        });
        members.truncate(per_class);
        counts[c] = members.len();
        out.extend(members.into_iter().cloned());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(BalancedDataset {
        patches: out,
        counts,
        warnings,
    })
}
