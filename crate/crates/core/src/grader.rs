//! Slide-level ISUP grading: attention-MIL pooling of patch embeddings and a
//! cumulative ordinal output head.
//!
//! Patch embeddings `e_i` from the backbone are pooled as `z = Σ a_i e_i` with
//! `a = softmax_i(wᵀ tanh(V e_i + b))`, and `o = FC(z)` gives one logit per
//! ordinal bit. The categorical variant replaces the five ordinal logits by six
//! class logits trained with cross entropy.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{decode_ordinal, encode_ordinal, IsupGrade, ISUP_CLASSES, ORDINAL_BITS};
use crate::metrics::{quadratic_kappa, ConfusionMatrix};
use crate::nn::bank::gather_from;
use crate::nn::layers::{gaussian_init, view1, view2};
use crate::nn::loss::{bce_mean, bce_mean_grad, softmax_rows};
use crate::nn::{
    sigmoid, AdamConfig, Checkpoint, CosineSchedule, Encoder, EncoderSpec, InputBank, Linear, OptimizerState, Param,
    ParamSet, Real,
};
use crate::record::{PatchPixels, SlideRecord};
use crate::tiling::{dedup_bag, select_bag_indices, DEFAULT_BAG_SIZE};

pub const OR_EPS: f64 = 1e-7;
pub const CHECKPOINT_KIND: &str = "grader";

/// Output head flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Five cumulative bits with binary cross entropy.
    Ordinal,
    /// Six classes with softmax cross entropy and argmax decoding.
    Categorical,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Ordinal => ORDINAL_BITS,
            HeadKind::Categorical => ISUP_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraderSpec {
    pub encoder: EncoderSpec,
    pub attention_dim: usize,
    pub head: HeadKind,
}

impl Default for GraderSpec {
    fn default() -> Self {
        GraderSpec {
            encoder: EncoderSpec::default(),
            attention_dim: 64,
            head: HeadKind::Ordinal,
        }
    }
}

/// Attention pooling weights: `V` (`A x E`) with bias and `w` (`1 x A`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionHead {
    pub embedding_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    hidden: Array2<T>,
    weights: Array1<T>,
}

impl AttentionHead {
    pub const N_PARAMS: usize = 3;

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.push("v.weight", gaussian_init(rng, &[self.hidden, self.embedding_dim], self.embedding_dim, 1.0));
        p.push("v.bias", ArrayD::zeros(vec![self.hidden]));
        p.push("w", gaussian_init(rng, &[1, self.hidden], self.hidden, 1.0));
        p
    }

    /// Pre-softmax scores `wᵀ tanh(V e_i + b)` and the tanh activations.
    pub fn logits<T: Real>(&self, params: &[Param<T>], emb: ArrayView2<T>) -> Result<(Array1<T>, Array2<T>)> {
        let v = view2(&params[0])?;
        let b = view1(&params[1])?;
        let w = view2(&params[2])?;
        if emb.ncols() != self.embedding_dim || v.dim() != (self.hidden, self.embedding_dim) || w.dim() != (1, self.hidden) {
            return Err(Error::Shape(format!(
                "attention over {}-dim embeddings got input width {}",
                self.embedding_dim,
                emb.ncols()
            )));
        }
        if emb.nrows() == 0 {
            return Err(Error::EmptySlide("attention over an empty bag".into()));
        }
        let mut hidden = emb.dot(&v.t()) + &b;
        hidden.mapv_inplace(|x| x.tanh());
        let scores = hidden.dot(&w.row(0));
        Ok((scores, hidden))
    }

    pub fn forward<T: Real>(&self, params: &[Param<T>], emb: ArrayView2<T>) -> Result<AttentionCache<T>> {
        let (scores, hidden) = self.logits(params, emb)?;
        let weights = softmax_vector(scores.view());
        Ok(AttentionCache { hidden, weights })
    }

    /// Returns `(d_emb, [dV, db, dw])` given `dL/da`.
    pub fn backward<T: Real>(
        &self,
        params: &[Param<T>],
        emb: ArrayView2<T>,
        cache: &AttentionCache<T>,
        d_weights: ArrayView1<T>,
    ) -> Result<(Array2<T>, Vec<ArrayD<T>>)> {
        let v = view2(&params[0])?;
        let w = view2(&params[2])?;
        let a = &cache.weights;
        let dot: T = a.iter().zip(d_weights.iter()).map(|(&x, &y)| x * y).sum();
        let d_scores: Array1<T> = Zip::from(a).and(&d_weights).map_collect(|&ai, &di| ai * (di - dot));
        let dw = d_scores.view().insert_axis(Axis(0)).dot(&cache.hidden);
        let mut d_pre = d_scores.view().insert_axis(Axis(1)).dot(&w);
        Zip::from(&mut d_pre)
            .and(&cache.hidden)
            .for_each(|d, &h| *d = *d * (T::one() - h * h));
        let dv = d_pre.t().dot(&emb);
        let db = d_pre.sum_axis(Axis(0));
        let d_emb = d_pre.dot(&v);
        Ok((d_emb, vec![dv.into_dyn(), db.into_dyn(), dw.into_dyn()]))
    }
}

/// Attention weights over a bag of embeddings.
pub fn attention_weights<T: Real>(head: &AttentionHead, params: &[Param<T>], emb: ArrayView2<T>) -> Result<Array1<T>> {
    Ok(head.forward(params, emb)?.weights)
}

fn softmax_vector<T: Real>(x: ArrayView1<T>) -> Array1<T> {
    softmax_rows(x.insert_axis(Axis(0))).index_axis_move(Axis(0), 0)
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    attention: AttentionCache<T>,
    pooled: Array2<T>,
}

impl<T> HeadCache<T> {
    pub fn attention(&self) -> &Array1<T> {
        &self.attention.weights
    }
}

/// Mean binary cross entropy of the five sigmoid outputs against the
/// cumulative code of `grade`, with outputs clamped to `[eps, 1 - eps]`.
pub fn or_loss(sigmoid_outputs: &[f64; ORDINAL_BITS], grade: IsupGrade) -> f64 {
    bce_mean(sigmoid_outputs, &encode_ordinal(grade).as_f64(), OR_EPS)
}

/// Loss of one slide from the raw head outputs and its gradient with respect
/// to them.
pub fn slide_loss<T: Real>(kind: HeadKind, raw: &[T], grade: IsupGrade) -> (T, Vec<T>) {
    match kind {
        HeadKind::Ordinal => {
            let p: Vec<T> = raw.iter().map(|&o| sigmoid(o)).collect();
            let y: Vec<T> = encode_ordinal(grade).as_f64().iter().map(|&b| T::from_f64_lossy(b)).collect();
            let loss = bce_mean(&p, &y, OR_EPS);
            let dp = bce_mean_grad(&p, &y, OR_EPS);
            let d = p.iter().zip(dp).map(|(&p, g)| g * p * (T::one() - p)).collect();
            (loss, d)
        }
        HeadKind::Categorical => {
            let z = Array1::from(raw.to_vec());
            let p = softmax_vector(z.view());
            let loss = -p[grade.index()].max(T::from_f64_lossy(1e-30)).ln();
            let mut d: Vec<T> = p.to_vec();
            d[grade.index()] -= T::one();
            (loss, d)
        }
    }
}

/// Backbone plus attention pooling and output layer. Parameters are laid out
/// `[backbone.., attention.v.weight, attention.v.bias, attention.w, fc.weight, fc.bias]`.
#[derive(Debug, Clone)]
pub struct Grader {
    spec: GraderSpec,
    encoder: Encoder,
    attention: AttentionHead,
    fc: Linear,
}

impl Grader {
    pub fn new(spec: GraderSpec) -> Result<Self> {
        if spec.attention_dim == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        let encoder = Encoder::new(spec.encoder.clone())?;
        let e = encoder.embedding_dim();
        Ok(Grader {
            attention: AttentionHead {
                embedding_dim: e,
                hidden: spec.attention_dim,
            },
            fc: Linear::new(e, spec.head.outputs()),
            encoder,
            spec,
        })
    }

    pub fn spec(&self) -> &GraderSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn attention(&self) -> &AttentionHead {
        &self.attention
    }

    pub fn head_kind(&self) -> HeadKind {
        self.spec.head
    }

    pub fn n_backbone(&self) -> usize {
        self.encoder.n_params()
    }

    pub fn n_params(&self) -> usize {
        self.n_backbone() + AttentionHead::N_PARAMS + Linear::N_PARAMS
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.extend_prefixed("backbone", self.encoder.init(rng));
        p.extend_prefixed("attention", self.attention.init(rng));
        p.extend_prefixed("fc", self.fc.init(rng, 1.0));
        p
    }

    /// Replaces the backbone part of `params` with `backbone`.
    pub fn load_backbone(&self, params: &mut ParamSet<f32>, backbone: &ParamSet<f32>) -> Result<()> {
        let nb = self.n_backbone();
        if backbone.len() != nb {
            return Err(Error::Shape(format!(
                "backbone has {} arrays, grader expects {nb}",
                backbone.len()
            )));
        }
        for (dst, src) in params.params_mut()[..nb].iter_mut().zip(backbone.params()) {
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Shape(format!(
                    "backbone array {} has shape {:?}, expected {:?}",
                    src.name,
                    src.value.shape(),
                    dst.value.shape()
                )));
            }
            dst.value.assign(&src.value);
        }
        Ok(())
    }

    fn check(&self, params: &[Param<impl Real>]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "grader expects {} parameter arrays, got {}",
                self.n_params(),
                params.len()
            )));
        }
        Ok(())
    }

    /// Head parameters (attention then fc) of a full parameter list.
    pub fn head_params<'a, T>(&self, params: &'a [Param<T>]) -> &'a [Param<T>] {
        &params[self.n_backbone()..]
    }

    /// Raw outputs for one bag of embeddings (`l x E`).
    pub fn head_forward<T: Real>(&self, head: &[Param<T>], emb: ArrayView2<T>) -> Result<(Array1<T>, HeadCache<T>)> {
        let attention = self.attention.forward(&head[..AttentionHead::N_PARAMS], emb)?;
        let pooled = attention.weights.view().insert_axis(Axis(0)).dot(&emb);
        let out = self.fc.forward(&head[AttentionHead::N_PARAMS..], pooled.view())?;
        Ok((out.index_axis_move(Axis(0), 0), HeadCache { attention, pooled }))
    }

    /// Returns `(d_emb, head gradients)` given `dL/d(raw outputs)`.
    pub fn head_backward<T: Real>(
        &self,
        head: &[Param<T>],
        emb: ArrayView2<T>,
        cache: &HeadCache<T>,
        d_out: ArrayView1<T>,
    ) -> Result<(Array2<T>, Vec<ArrayD<T>>)> {
        let na = AttentionHead::N_PARAMS;
        let (dz, fc_grads) = self
            .fc
            .backward(&head[na..], cache.pooled.view(), d_out.insert_axis(Axis(0)), true)?;
        let dz = dz.expect("requested").index_axis_move(Axis(0), 0);
        let d_weights = emb.dot(&dz);
        let (mut d_emb, mut grads) = self
            .attention
            .backward(&head[..na], emb, &cache.attention, d_weights.view())?;
        for (mut row, &a) in d_emb.axis_iter_mut(Axis(0)).zip(&cache.attention.weights) {
            row.scaled_add(a, &dz);
        }
        grads.extend(fc_grads);
        Ok((d_emb, grads))
    }

    /// Raw outputs for a prepared bag (`(3, l, s, s)` input).
    pub fn grade_forward<T: Real>(&self, params: &[Param<T>], input: &Array4<T>) -> Result<(Array1<T>, HeadCache<T>)> {
        self.check(params)?;
        let (emb, _) = self.encoder.forward(&params[..self.n_backbone()], input)?;
        self.head_forward(self.head_params(params), emb.view())
    }

    /// Loss of one prepared bag and the gradient of every parameter.
    pub fn bag_loss_and_grad<T: Real>(&self, params: &ParamSet<T>, input: &Array4<T>, grade: IsupGrade) -> Result<(T, ParamSet<T>)> {
        let p = params.params();
        self.check(p)?;
        let nb = self.n_backbone();
        let (emb, enc_cache) = self.encoder.forward(&p[..nb], input)?;
        let (out, cache) = self.head_forward(&p[nb..], emb.view())?;
        let (loss, d_out) = slide_loss(self.spec.head, out.as_slice().expect("contiguous"), grade);
        let (d_emb, head_grads) = self.head_backward(&p[nb..], emb.view(), &cache, Array1::from(d_out).view())?;
        let mut grads = self.encoder.backward(&p[..nb], &enc_cache, d_emb.view())?.into_params();
        for (param, g) in p[nb..].iter().zip(head_grads) {
            grads.push(Param {
                name: param.name.clone(),
                value: g,
            });
        }
        Ok((loss, ParamSet::from_params(grads)))
    }

    /// Grade, output probabilities and attention for raw outputs.
    pub fn decode(&self, raw: &[f64]) -> Result<(IsupGrade, Vec<f64>, f64)> {
        match self.spec.head {
            HeadKind::Ordinal => {
                let p: [f64; ORDINAL_BITS] = std::array::from_fn(|i| sigmoid(raw[i]));
                Ok((decode_ordinal(&p, 0.5)?, p.to_vec(), p[0]))
            }
            HeadKind::Categorical => {
                let p = softmax_vector(Array1::from(raw.to_vec()).view());
                let best = (0..ISUP_CLASSES).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                Ok((IsupGrade::new(best as u8)?, p.to_vec(), 1.0 - p[0]))
            }
        }
    }

    /// Grades one slide from its bag of `bag_size` patches.
    pub fn predict_slide(&self, params: &ParamSet<f32>, slide: &SlideRecord, bag_size: usize) -> Result<SlidePrediction> {
        let picks = select_bag_indices(&slide.patches, bag_size)?;
        let pixels: Vec<&PatchPixels> = picks.iter().map(|&i| &slide.patches[i].pixels).collect();
        let input = self.encoder.prepare_input::<f32>(&pixels)?;
        self.predict_prepared(params, &slide.slide_id, &input, picks)
    }

    fn predict_prepared(&self, params: &ParamSet<f32>, slide_id: &str, input: &Array4<f32>, picks: Vec<usize>) -> Result<SlidePrediction> {
        let (out, cache) = self.grade_forward(params.params(), input)?;
        let raw: Vec<f64> = out.iter().map(|&v| v as f64).collect();
        let (grade, probs, malignancy) = self.decode(&raw)?;
        Ok(SlidePrediction {
            slide_id: slide_id.to_string(),
            grade,
            probs,
            malignancy,
            attention: cache.attention().iter().map(|&a| a as f64).collect(),
            patch_indices: picks,
        })
    }

    pub fn checkpoint(&self, params: &ParamSet<f32>) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, crate::mil::spec_json(&self.spec)).with_group("grader", params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, ParamSet<f32>)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected `{CHECKPOINT_KIND}`, found `{}`", ckpt.kind)));
        }
        let spec: GraderSpec = serde_json::from_value(ckpt.spec.clone())
            .map_err(|e| Error::Checkpoint(format!("bad grader spec: {e}")))?;
        let model = Grader::new(spec)?;
        let params = ckpt.group("grader")?.clone();
        let reference: ParamSet<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(0));
        reference.check_layout(params.params())?;
        Ok((model, params))
    }
}

/// Prediction for one slide. `attention[i]` belongs to bag slot `i`, which
/// holds patch `patch_indices[i]` of the slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub grade: IsupGrade,
    /// Sigmoid outputs of the ordinal head, or class probabilities.
    pub probs: Vec<f64>,
    /// Probability that the slide is not benign.
    pub malignancy: f64,
    pub attention: Vec<f64>,
    pub patch_indices: Vec<usize>,
}

impl SlidePrediction {
    /// Distinct patches ranked by summed attention (higher first, lower index
    /// on ties).
    pub fn ranked_patches(&self) -> Vec<(usize, f64)> {
        let mut acc: Vec<(usize, f64)> = Vec::new();
        for (&p, &a) in self.patch_indices.iter().zip(&self.attention) {
            match acc.iter_mut().find(|(q, _)| *q == p) {
                Some(entry) => entry.1 += a,
                None => acc.push((p, a)),
            }
        }
        acc.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraderConfig {
    pub model: GraderSpec,
    pub bag_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub freeze_backbone: bool,
    /// Random dihedral transforms of training patches.
    pub augment: bool,
    pub seed: u64,
}

impl Default for GraderConfig {
    fn default() -> Self {
        GraderConfig {
            model: GraderSpec::default(),
            bag_size: DEFAULT_BAG_SIZE,
            epochs: 30,
            batch_size: 8,
            lr: 3e-4,
            min_lr: 3e-6,
            freeze_backbone: false,
            augment: true,
            seed: 0,
        }
    }
}

impl GraderConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if self.model.attention_dim == 0 {
            return Err(Error::Config("attention dimension must be positive".into()));
        }
        if self.bag_size == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("grader bag size, epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config("grader learning rates must satisfy 0 <= min_lr <= lr, lr > 0".into()));
        }
        Ok(())
    }
}

struct GraderBag {
    bank: InputBank,
    rows: Vec<usize>,
    grade: IsupGrade,
}

fn prepare_bags(model: &Grader, slides: &[SlideRecord], bag_size: usize) -> Result<Vec<GraderBag>> {
    slides
        .iter()
        .map(|s| {
            let (unique, rows) = dedup_bag(&select_bag_indices(&s.patches, bag_size)?);
            let pixels: Vec<&PatchPixels> = unique.iter().map(|&i| &s.patches[i].pixels).collect();
            Ok(GraderBag {
                bank: InputBank::build(model.encoder(), &pixels)?,
                rows,
                grade: s.isup,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GraderTraining {
    pub model: Grader,
    pub params: ParamSet<f32>,
    pub loss_trace: Vec<f64>,
    /// Validation quadratic kappa per epoch (`None` where undefined).
    pub val_kappa_trace: Vec<Option<f64>>,
    pub selected_epoch: usize,
}

/// Trains the grader on slide-level ISUP grades. `backbone` seeds the
/// encoder (random initialization when absent). With validation slides the
/// epoch with the highest validation kappa is kept, lower validation loss
/// breaking ties; otherwise the last epoch.
pub fn finetune(
    train: &[SlideRecord],
    val: &[SlideRecord],
    backbone: Option<&ParamSet<f32>>,
    config: &GraderConfig,
) -> Result<GraderTraining> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("no training slides for the grader".into()));
    }
    let model = Grader::new(config.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params: ParamSet<f32> = model.init(&mut rng);
    if let Some(b) = backbone {
        model.load_backbone(&mut params, b)?;
    }
    let bags = prepare_bags(&model, train, config.bag_size)?;
    let val_bags = prepare_bags(&model, val, config.bag_size)?;
    let nb = model.n_backbone();

    let frozen_embeddings: Option<Vec<Array2<f32>>> = if config.freeze_backbone {
        Some(
            bags.iter()
                .map(|b| {
                    let all: Vec<usize> = (0..b.bank.len()).collect();
                    let input = b.bank.gather::<f32>(&all, None);
                    Ok(model.encoder.forward(&params.params()[..nb], &input)?.0)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let steps_per_epoch = bags.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(config.lr, config.min_lr, (steps_per_epoch * config.epochs) as u64);
    let mut opt = OptimizerState::new(&params, AdamConfig::default(), schedule);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut val_kappa_trace = Vec::new();
    let mut best: Option<((f64, f64), usize, ParamSet<f32>)> = None;
    let mut order: Vec<usize> = (0..bags.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let p = params.params();
            let mut offsets = Vec::with_capacity(batch.len());
            let (emb_all, enc_cache) = match &frozen_embeddings {
                Some(frozen) => {
                    let parts: Vec<ArrayView2<f32>> = batch.iter().map(|&i| frozen[i].view()).collect();
                    let mut off = 0;
                    for &i in batch {
                        offsets.push(off);
                        off += frozen[i].nrows();
                    }
                    (ndarray::concatenate(Axis(0), &parts).map_err(|e| Error::Shape(e.to_string()))?, None)
                }
                None => {
                    let mut picks = Vec::new();
                    for (bi, &i) in batch.iter().enumerate() {
                        offsets.push(picks.len());
                        picks.extend((0..bags[i].bank.len()).map(|s| (bi, s)));
                    }
                    let codes: Option<Vec<u8>> = config
                        .augment
                        .then(|| picks.iter().map(|_| rng.random_range(0..8u8)).collect());
                    let banks: Vec<&InputBank> = batch.iter().map(|&i| &bags[i].bank).collect();
                    let input: Array4<f32> = gather_from(&banks, &picks, codes.as_deref()).expect("non-empty batch");
                    let (e, c) = model.encoder.forward(&p[..nb], &input)?;
                    (e, Some(c))
                }
            };
            let mut d_emb_all = Array2::<f32>::zeros(emb_all.dim());
            let mut head_grads: Vec<ArrayD<f32>> = p[nb..].iter().map(|q| ArrayD::zeros(q.value.shape())).collect();
            for (bi, &i) in batch.iter().enumerate() {
                let rows: Vec<usize> = bags[i].rows.iter().map(|r| r + offsets[bi]).collect();
                let emb = emb_all.select(Axis(0), &rows);
                let (out, cache) = model.head_forward(&p[nb..], emb.view())?;
                let (loss, d_out) = slide_loss(model.spec.head, out.as_slice().expect("contiguous"), bags[i].grade);
                epoch_loss += loss as f64;
                let d_out: Array1<f32> = Array1::from(d_out) * scale;
                let (d_emb, g) = model.head_backward(&p[nb..], emb.view(), &cache, d_out.view())?;
                for (r, row) in rows.iter().zip(d_emb.axis_iter(Axis(0))) {
                    d_emb_all.row_mut(*r).scaled_add(1.0, &row);
                }
                for (acc, g) in head_grads.iter_mut().zip(g) {
                    *acc += &g;
                }
            }
            let backbone_grads: Vec<ArrayD<f32>> = match &enc_cache {
                Some(c) => model
                    .encoder
                    .backward(&p[..nb], c, d_emb_all.view())?
                    .into_params()
                    .into_iter()
                    .map(|q| q.value)
                    .collect(),
                None => p[..nb].iter().map(|q| ArrayD::zeros(q.value.shape())).collect(),
            };
            let grads = ParamSet::from_params(
                p.iter()
                    .zip(backbone_grads.into_iter().chain(head_grads))
                    .map(|(q, value)| Param {
                        name: q.name.clone(),
                        value,
                    })
                    .collect(),
            );
            opt.update(&mut params, &grads)?;
        }
        let mean = epoch_loss / bags.len() as f64;
        loss_trace.push(mean);
        if val_bags.is_empty() {
            log::info!("grader epoch {}: loss {mean:.4}", epoch + 1);
            continue;
        }
        let (kappa, val_loss) = evaluate_bags(&model, &params, &val_bags)?;
        log::info!(
            "grader epoch {}: loss {mean:.4}, val kappa {}, val loss {val_loss:.4}",
            epoch + 1,
            kappa.map(|k| format!("{k:.4}")).unwrap_or_else(|| "undefined".into())
        );
        val_kappa_trace.push(kappa);
        let score = kappa.unwrap_or(f64::NEG_INFINITY);
        let better = best
            .as_ref()
            .map(|((s, l), _, _)| score > *s || (score == *s && val_loss < *l))
            .unwrap_or(true);
        if better {
            best = Some(((score, val_loss), epoch, params.clone()));
        }
    }
    let (selected_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (config.epochs - 1, params),
    };
    Ok(GraderTraining {
        model,
        params,
        loss_trace,
        val_kappa_trace,
        selected_epoch,
    })
}

fn bag_input(bag: &GraderBag) -> Array4<f32> {
    let all: Vec<usize> = (0..bag.bank.len()).collect();
    let unique = bag.bank.gather::<f32>(&all, None);
    unique.select(Axis(1), &bag.rows)
}

fn evaluate_bags(model: &Grader, params: &ParamSet<f32>, bags: &[GraderBag]) -> Result<(Option<f64>, f64)> {
    let mut truth = Vec::with_capacity(bags.len());
    let mut pred = Vec::with_capacity(bags.len());
    let mut loss = 0.0;
    for bag in bags {
        let (out, _) = model.grade_forward(params.params(), &bag_input(bag))?;
        let raw = out.as_slice().expect("contiguous");
        loss += slide_loss(model.spec.head, raw, bag.grade).0 as f64;
        let raw: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        truth.push(bag.grade);
        pred.push(model.decode(&raw)?.0);
    }
    let kappa = quadratic_kappa(&ConfusionMatrix::from_pairs(&truth, &pred)?).ok();
    Ok((kappa, loss / bags.len().max(1) as f64))
}

/// Predictions for many slides.
pub fn predict_slides(model: &Grader, params: &ParamSet<f32>, slides: &[SlideRecord], bag_size: usize) -> Result<Vec<SlidePrediction>> {
    slides.iter().map(|s| model.predict_slide(params, s, bag_size)).collect()
}
