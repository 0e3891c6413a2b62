//! Stain-agnostic teacher-student pre-training of the patch encoder.
//!
//! The student is `shead ∘ fhead ∘ backbone`; the teacher is `fhead ∘ backbone`
//! with weights tracking the student by exponential moving average. Each
//! step sees two generic views `d1, d2` and two stain-perturbed views
//! `sd1, sd2` of the same patches and minimizes the crossed MSE between
//! L2-normalized student and teacher predictions.

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::{l2_normalize_rows, l2_normalize_rows_backward, mse, mse_grad, softmax_rows};
use crate::nn::params::ema_update_in_place;
use crate::nn::{
    Activation, AdamConfig, Checkpoint, CosineSchedule, Encoder, EncoderCache, EncoderSpec, Mlp, MlpCache, MlpSpec,
    OptimizerState, Param, ParamSet, Real,
};
use crate::record::PatchPixels;
use crate::stain::{aug1_pixels, sample_stain_params, stain_augment_pixels, Aug1Config, AugmentationConfig};
use crate::synth::mix_seed;

pub const NORM_EPS: f64 = 1e-12;
pub const CHECKPOINT_KIND: &str = "teacher-student";

/// Architecture of the backbone and both heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslSpec {
    pub encoder: EncoderSpec,
    pub fhead_hidden: usize,
    pub projection_dim: usize,
    pub shead_hidden: usize,
}

impl Default for SslSpec {
    fn default() -> Self {
        SslSpec {
            encoder: EncoderSpec::default(),
            fhead_hidden: 256,
            projection_dim: 128,
            shead_hidden: 128,
        }
    }
}

/// Student and teacher weights. The student holds
/// `[backbone.., fhead.., shead..]`, the teacher the leading
/// `[backbone.., fhead..]` part of that layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudentState<T = f32> {
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub momentum: f64,
    pub lambda: f64,
    pub step: u64,
}

/// The four views of one batch, each a prepared `(3, B, s, s)` tensor.
#[derive(Debug, Clone)]
pub struct ViewBatch<T> {
    pub d1: Array4<T>,
    pub d2: Array4<T>,
    pub sd1: Array4<T>,
    pub sd2: Array4<T>,
}

impl<T: Real> ViewBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.d1.dim().1
    }

    fn stacked(&self) -> Result<Array4<T>> {
        let d = self.d1.dim();
        for v in [&self.d2, &self.sd1, &self.sd2] {
            if v.dim() != d {
                return Err(Error::Shape(format!("views disagree in shape: {:?} vs {:?}", d, v.dim())));
            }
        }
        concatenate(Axis(1), &[self.d1.view(), self.d2.view(), self.sd1.view(), self.sd2.view()])
            .map_err(|e| Error::Shape(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub aug1: f64,
    pub aug2: f64,
    pub total: f64,
}

pub struct StudentCache<T> {
    encoder: EncoderCache<T>,
    fhead: MlpCache<T>,
    shead: MlpCache<T>,
}

#[derive(Debug, Clone)]
pub struct SslModel {
    spec: SslSpec,
    encoder: Encoder,
    fhead: Mlp,
    shead: Mlp,
}

impl SslModel {
    pub fn new(spec: SslSpec) -> Result<Self> {
        let encoder = Encoder::new(spec.encoder.clone())?;
        let e = encoder.embedding_dim();
        let fhead = Mlp::new(MlpSpec::new(
            vec![e, spec.fhead_hidden, spec.projection_dim],
            Activation::Relu,
        ))?;
        let shead = Mlp::new(MlpSpec::new(
            vec![spec.projection_dim, spec.shead_hidden, spec.projection_dim],
            Activation::Relu,
        ))?;
        Ok(SslModel {
            spec,
            encoder,
            fhead,
            shead,
        })
    }

    pub fn spec(&self) -> &SslSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Number of parameter arrays shared by student and teacher.
    pub fn n_shared(&self) -> usize {
        self.encoder.n_params() + self.fhead.n_params()
    }

    pub fn n_student(&self) -> usize {
        self.n_shared() + self.shead.n_params()
    }

    /// Fresh student weights with the teacher starting as a copy of the
    /// student's shared part.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R, momentum: f64, lambda: f64) -> TeacherStudentState<T> {
        let mut student = ParamSet::new();
        student.extend_prefixed("backbone", self.encoder.init(rng));
        student.extend_prefixed("fhead", self.fhead.init(rng));
        let teacher = student.clone();
        student.extend_prefixed("shead", self.shead.init(rng));
        TeacherStudentState {
            student,
            teacher,
            momentum,
            lambda,
            step: 0,
        }
    }

    fn check(&self, params: &[Param<impl Real>], expected: usize, who: &str) -> Result<()> {
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "{who} expects {expected} parameter arrays, got {}",
                params.len()
            )));
        }
        Ok(())
    }

    pub fn student_forward<T: Real>(&self, params: &[Param<T>], input: &Array4<T>) -> Result<(Array2<T>, StudentCache<T>)> {
        self.check(params, self.n_student(), "student")?;
        let ne = self.encoder.n_params();
        let ns = self.n_shared();
        let (emb, encoder) = self.encoder.forward(&params[..ne], input)?;
        let (h, fhead) = self.fhead.forward(&params[ne..ns], emb.view())?;
        let (out, shead) = self.shead.forward(&params[ns..], h.view())?;
        Ok((out, StudentCache { encoder, fhead, shead }))
    }

    pub fn student_backward<T: Real>(
        &self,
        params: &[Param<T>],
        cache: &StudentCache<T>,
        d_out: ArrayView2<T>,
    ) -> Result<ParamSet<T>> {
        self.check(params, self.n_student(), "student")?;
        let ne = self.encoder.n_params();
        let ns = self.n_shared();
        let (dh, g_s) = self.shead.backward(&params[ns..], &cache.shead, d_out, true)?;
        let (demb, g_f) = self
            .fhead
            .backward(&params[ne..ns], &cache.fhead, dh.expect("requested").view(), true)?;
        let mut grads = self
            .encoder
            .backward(&params[..ne], &cache.encoder, demb.expect("requested").view())?
            .into_params();
        for (p, g) in params[ne..].iter().zip(g_f.into_iter().chain(g_s)) {
            grads.push(Param {
                name: p.name.clone(),
                value: g,
            });
        }
        Ok(ParamSet::from_params(grads))
    }

    /// `shead(fhead(backbone(x)))`.
    pub fn student_predict<T: Real>(&self, state: &TeacherStudentState<T>, input: &Array4<T>) -> Result<Array2<T>> {
        Ok(self.student_forward(state.student.params(), input)?.0)
    }

    /// `fhead(backbone(x))` with the teacher weights; no cache is kept.
    pub fn teacher_predict<T: Real>(&self, state: &TeacherStudentState<T>, input: &Array4<T>) -> Result<Array2<T>> {
        let params = state.teacher.params();
        self.check(params, self.n_shared(), "teacher")?;
        let ne = self.encoder.n_params();
        let (emb, _) = self.encoder.forward(&params[..ne], input)?;
        Ok(self.fhead.forward(&params[ne..], emb.view())?.0)
    }

    /// Crossed, symmetric loss of one view pair.
    pub fn loss_aug<T: Real>(&self, state: &TeacherStudentState<T>, a: &Array4<T>, b: &Array4<T>) -> Result<T> {
        let sa = self.student_predict(state, a)?;
        let sb = self.student_predict(state, b)?;
        let ta = self.teacher_predict(state, a)?;
        let tb = self.teacher_predict(state, b)?;
        Ok(loss_aug_from_predictions(sa.view(), sb.view(), ta.view(), tb.view()))
    }

    /// `L_aug1 + lambda * L_aug2`.
    pub fn total_loss<T: Real>(&self, state: &TeacherStudentState<T>, views: &ViewBatch<T>) -> Result<LossParts> {
        let aug1 = self.loss_aug(state, &views.d1, &views.d2)?.to_f64_lossy();
        let aug2 = self.loss_aug(state, &views.sd1, &views.sd2)?.to_f64_lossy();
        Ok(LossParts {
            aug1,
            aug2,
            total: combine_losses(aug1, aug2, state.lambda),
        })
    }

    /// Loss parts and the student gradient, all four views in one pass.
    pub fn loss_and_grad<T: Real>(
        &self,
        state: &TeacherStudentState<T>,
        views: &ViewBatch<T>,
    ) -> Result<(LossParts, ParamSet<T>)> {
        let b = views.batch_size();
        let stacked = views.stacked()?;
        let (s_out, cache) = self.student_forward(state.student.params(), &stacked)?;
        let t_out = self.teacher_predict(state, &stacked)?;
        let (ns, divisors) = l2_normalize_rows(s_out.view(), NORM_EPS);
        let (nt, _) = l2_normalize_rows(t_out.view(), NORM_EPS);
        let block = |m: &Array2<T>, i: usize| m.slice(s![i * b..(i + 1) * b, ..]).to_owned();
        let half = T::from_f64_lossy(0.5);
        let lambda = T::from_f64_lossy(state.lambda);

        let mut d_ns = Array2::<T>::zeros(ns.dim());
        let mut parts = [T::zero(); 2];
        for (pair, weight) in [(0usize, T::one()), (1, lambda)] {
            let (a, bb) = (2 * pair, 2 * pair + 1);
            let (sa, sb, ta, tb) = (block(&ns, a), block(&ns, bb), block(&nt, a), block(&nt, bb));
            parts[pair] = half * (mse(sa.view(), tb.view()) + mse(sb.view(), ta.view()));
            let c = half * weight;
            d_ns.slice_mut(s![a * b..(a + 1) * b, ..])
                .assign(&(mse_grad(sa.view(), tb.view()) * c));
            d_ns.slice_mut(s![bb * b..(bb + 1) * b, ..])
                .assign(&(mse_grad(sb.view(), ta.view()) * c));
        }
        let d_out = l2_normalize_rows_backward(ns.view(), &divisors, d_ns.view(), NORM_EPS);
        let grads = self.student_backward(state.student.params(), &cache, d_out.view())?;
        let (aug1, aug2) = (parts[0].to_f64_lossy(), parts[1].to_f64_lossy());
        Ok((
            LossParts {
                aug1,
                aug2,
                total: combine_losses(aug1, aug2, state.lambda),
            },
            grads,
        ))
    }

    /// One optimization step: Adam on the student, then EMA of the teacher
    /// towards the student's shared part.
    pub fn train_step<T: Real>(
        &self,
        state: &mut TeacherStudentState<T>,
        opt: &mut OptimizerState<T>,
        views: &ViewBatch<T>,
    ) -> Result<LossParts> {
        let (parts, grads) = self.loss_and_grad(state, views)?;
        opt.update(&mut state.student, &grads)?;
        let n = self.n_shared();
        ema_update_in_place(
            &mut state.teacher,
            &state.student.params()[..n],
            T::from_f64_lossy(state.momentum),
        )?;
        state.step += 1;
        Ok(parts)
    }

    /// Backbone weights of the student, named as a bare encoder.
    pub fn backbone(&self, state: &TeacherStudentState<f32>) -> ParamSet<f32> {
        ParamSet::from_params(
            state.student.params()[..self.encoder.n_params()]
                .iter()
                .map(|p| Param {
                    name: p.name.trim_start_matches("backbone.").to_string(),
                    value: p.value.clone(),
                })
                .collect(),
        )
    }

    pub fn checkpoint(&self, state: &TeacherStudentState<f32>) -> Checkpoint {
        let mut ckpt = Checkpoint::new(CHECKPOINT_KIND, crate::mil::spec_json(&self.spec))
            .with_group("student", state.student.clone())
            .with_group("teacher", state.teacher.clone());
        ckpt.step = state.step;
        ckpt.meta = serde_json::json!({ "lambda": state.lambda, "momentum": state.momentum });
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TeacherStudentState<f32>)> {
        if ckpt.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected `{CHECKPOINT_KIND}`, found `{}`", ckpt.kind)));
        }
        let spec: SslSpec = serde_json::from_value(ckpt.spec.clone())
            .map_err(|e| Error::Checkpoint(format!("bad teacher-student spec: {e}")))?;
        let model = SslModel::new(spec)?;
        let reference: TeacherStudentState<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(0), 0.0, 0.0);
        let student = ckpt.group("student")?.clone();
        let teacher = ckpt.group("teacher")?.clone();
        reference.student.check_layout(student.params())?;
        reference.teacher.check_layout(teacher.params())?;
        let meta = |k: &str| {
            ckpt.meta
                .get(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks `{k}`")))
        };
        Ok((
            model,
            TeacherStudentState {
                student,
                teacher,
                momentum: meta("momentum")?,
                lambda: meta("lambda")?,
                step: ckpt.step,
            },
        ))
    }
}

/// `½·[MSE(n(sa), n(tb)) + MSE(n(sb), n(ta))]` on raw predictions.
pub fn loss_aug_from_predictions<T: Real>(sa: ArrayView2<T>, sb: ArrayView2<T>, ta: ArrayView2<T>, tb: ArrayView2<T>) -> T {
    let n = |x: ArrayView2<T>| l2_normalize_rows(x, NORM_EPS).0;
    let first = mse(n(sa).view(), n(tb).view());
    let second = mse(n(sb).view(), n(ta).view());
    T::from_f64_lossy(0.5) * (first + second)
}

pub fn combine_losses(aug1: f64, aug2: f64, lambda: f64) -> f64 {
    aug1 + lambda * aug2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub model: SslSpec,
    pub lambda: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub augmentation: AugmentationConfig,
    /// Generate views on patches already pooled to the encoder's working
    /// resolution; blur sigmas are scaled by the pooling factor.
    pub pooled_views: bool,
    /// Share of the corpus held out for model selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            model: SslSpec::default(),
            lambda: 0.02,
            momentum: 0.99,
            epochs: 50,
            batch_size: 40,
            lr: 3e-4,
            min_lr: 3e-6,
            augmentation: AugmentationConfig::default(),
            pooled_views: true,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.augmentation.validate()?;
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("EMA momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config("ssl val_fraction must lie in [0, 0.5)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || self.min_lr < 0.0 {
            return Err(Error::Config("ssl epochs, batch size and learning rate must be positive".into()));
        }
        if self.model.fhead_hidden == 0 || self.model.projection_dim == 0 || self.model.shead_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Builds the four views of each patch from a per-patch seed.
pub struct ViewGenerator<'a> {
    encoder: &'a Encoder,
    augmentation: AugmentationConfig,
    aug1: Aug1Config,
}

impl<'a> ViewGenerator<'a> {
    /// `pooled` selects whether incoming patches are already at the
    /// encoder's working resolution.
    pub fn new(encoder: &'a Encoder, augmentation: &AugmentationConfig, pooled: bool) -> Self {
        let mut aug1 = augmentation.aug1;
        if pooled {
            let f = encoder.spec().input_pool as f64;
            aug1.blur_sigma = (aug1.blur_sigma.0 / f, aug1.blur_sigma.1 / f);
        }
        ViewGenerator {
            encoder,
            augmentation: *augmentation,
            aug1,
        }
    }

    pub fn views<T: Real>(&self, patches: &[&PatchPixels], seeds: &[u64]) -> Result<ViewBatch<T>> {
        let generated: Vec<[PatchPixels; 4]> = patches
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(p, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d1 = aug1_pixels(p, &mut rng, &self.aug1);
                let d2 = aug1_pixels(p, &mut rng, &self.aug1);
                let sd1 = stain_augment_pixels(p, &sample_stain_params(&mut rng, &self.augmentation));
                let sd2 = stain_augment_pixels(p, &sample_stain_params(&mut rng, &self.augmentation));
                [d1, d2, sd1, sd2]
            })
            .collect();
        let prep = |k: usize| -> Result<Array4<T>> {
            let v: Vec<&PatchPixels> = generated.iter().map(|g| &g[k]).collect();
            self.encoder.prepare_input(&v)
        };
        Ok(ViewBatch {
            d1: prep(0)?,
            d2: prep(1)?,
            sd1: prep(2)?,
            sd2: prep(3)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SslTraining {
    pub model: SslModel,
    pub state: TeacherStudentState<f32>,
    /// Epoch means of the training loss parts.
    pub loss_trace: Vec<LossParts>,
    /// Validation total loss per epoch (empty without a validation split).
    pub val_trace: Vec<f64>,
    pub selected_epoch: usize,
}

/// Teacher-student pre-training over a patch corpus. A `val_fraction` share
/// of the corpus is held out with fixed views; the state with the lowest
/// validation loss is returned (the last state without a split).
pub fn pretrain(corpus: &[&PatchPixels], config: &SslConfig) -> Result<SslTraining> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Parameter("pre-training corpus is empty".into()));
    }
    let model = SslModel::new(config.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state: TeacherStudentState<f32> = model.init(&mut rng, config.momentum, config.lambda);

    let pool = model.encoder.spec().input_pool;
    let source: Vec<PatchPixels> = if config.pooled_views && pool > 1 {
        corpus
            .par_iter()
            .map(|p| {
                if p.side() == model.encoder.spec().input_size {
                    p.downsample(pool)
                } else {
                    Ok((*p).clone())
                }
            })
            .collect::<Result<_>>()?
    } else {
        corpus.iter().map(|&p| p.clone()).collect()
    };
    let generator = ViewGenerator::new(&model.encoder, &config.augmentation, config.pooled_views);

    let mut order: Vec<usize> = (0..source.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((source.len() as f64) * config.val_fraction).floor() as usize;
    let n_val = n_val.min(source.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_views: Vec<ViewBatch<f32>> = val_idx
        .chunks(config.batch_size)
        .enumerate()
        .map(|(c, chunk)| {
            let pix: Vec<&PatchPixels> = chunk.iter().map(|&i| &source[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| mix_seed(config.seed ^ 0x5a5a, (c as u64) << 32 | i as u64)).collect();
            generator.views(&pix, &seeds)
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let schedule = CosineSchedule::new(config.lr, config.min_lr, (steps_per_epoch * config.epochs) as u64);
    let mut opt = OptimizerState::new(&state.student, AdamConfig::default(), schedule);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut val_trace = Vec::new();
    let mut best: Option<(f64, usize, TeacherStudentState<f32>)> = None;

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for batch in train_idx.chunks(config.batch_size) {
            let pix: Vec<&PatchPixels> = batch.iter().map(|&i| &source[i]).collect();
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let views = generator.views::<f32>(&pix, &seeds)?;
            let parts = model.train_step(&mut state, &mut opt, &views)?;
            let w = batch.len() as f64;
            sums[0] += parts.aug1 * w;
            sums[1] += parts.aug2 * w;
            sums[2] += parts.total * w;
        }
        let n = train_idx.len() as f64;
        let mean = LossParts {
            aug1: sums[0] / n,
            aug2: sums[1] / n,
            total: sums[2] / n,
        };
        loss_trace.push(mean);
        if val_views.is_empty() {
            log::info!("ssl epoch {}: loss {:.5}", epoch + 1, mean.total);
            continue;
        }
        let mut val = 0.0;
        let mut count = 0usize;
        for v in &val_views {
            val += model.total_loss(&state, v)?.total * v.batch_size() as f64;
            count += v.batch_size();
        }
        let val = val / count as f64;
        log::info!("ssl epoch {}: loss {:.5}, val loss {val:.5}", epoch + 1, mean.total);
        val_trace.push(val);
        if best.as_ref().map(|(b, _, _)| val < *b).unwrap_or(true) {
            best = Some((val, epoch, state.clone()));
        }
    }
    let (selected_epoch, state) = match best {
        Some((_, e, s)) => (e, s),
        None => (config.epochs - 1, state),
    };
    Ok(SslTraining {
        model,
        state,
        loss_trace,
        val_trace,
        selected_epoch,
    })
}

/// Multinomial logistic regression on frozen features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Test accuracy of a softmax classifier fit on standardized training
/// features by full-batch gradient descent.
pub fn linear_probe_accuracy(
    train_x: &Array2<f64>,
    train_y: &[usize],
    test_x: &Array2<f64>,
    test_y: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<f64> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() || train_y.is_empty() || test_y.is_empty() {
        return Err(Error::Shape("probe features and labels disagree or are empty".into()));
    }
    if let Some(&bad) = train_y.iter().chain(test_y).find(|&&y| y >= classes) {
        return Err(Error::InvalidLabel(format!("probe label {bad} with {classes} classes")));
    }
    let mean = train_x.mean_axis(Axis(0)).expect("non-empty");
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|v| v.max(1e-8));
    let standardize = |x: &Array2<f64>| (x - &mean) / &std;
    let xs = standardize(train_x);
    let n = xs.nrows() as f64;
    let mut w = Array2::<f64>::zeros((xs.ncols(), classes));
    let mut b = ndarray::Array1::<f64>::zeros(classes);
    let mut onehot = Array2::<f64>::zeros((xs.nrows(), classes));
    for (i, &y) in train_y.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..config.iterations {
        let p = softmax_rows((xs.dot(&w) + &b).view());
        let d = (p - &onehot) / n;
        let gw = xs.t().dot(&d) + &(&w * config.l2);
        let gb = d.sum_axis(Axis(0));
        w.scaled_add(-config.lr, &gw);
        b.scaled_add(-config.lr, &gb);
    }
    let logits = standardize(test_x).dot(&w) + &b;
    let correct = logits
        .axis_iter(Axis(0))
        .zip(test_y)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best == y
        })
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_model() -> SslModel {
        SslModel::new(SslSpec {
            encoder: EncoderSpec::stride2(8, 2, &[3]),
            fhead_hidden: 4,
            projection_dim: 3,
            shead_hidden: 4,
        })
        .unwrap()
    }

    fn toy_views(rng: &mut ChaCha8Rng, b: usize) -> ViewBatch<f64> {
        let mut v = || Array4::from_shape_fn((3, b, 4, 4), |_| rng.random_range(-2.0..2.0));
        ViewBatch {
            d1: v(),
            d2: v(),
            sd1: v(),
            sd2: v(),
        }
    }

    #[test]
    fn hand_case_is_one_half() {
        let sa = array![[1.0f64, 0.0]];
        let tb = array![[0.0, 1.0]];
        let sb = array![[1.0, 0.0]];
        let ta = array![[1.0, 0.0]];
        let v = loss_aug_from_predictions(sa.view(), sb.view(), ta.view(), tb.view());
        assert_eq!(v, 0.5 * (1.0 + 0.0));
        let same = loss_aug_from_predictions(sa.view(), sa.view(), sa.view(), sa.view());
        assert_eq!(same, 0.0);
    }

    #[test]
    fn combine_examples() {
        assert!((combine_losses(0.4, 0.1, 0.02) - 0.402).abs() < 1e-15);
        assert_eq!(combine_losses(0.4, 0.1, 0.0), 0.4);
        assert_eq!(combine_losses(0.0, 0.0, 0.02), 0.0);
    }

    #[test]
    fn shapes_and_teacher_untouched_by_evaluation() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state: TeacherStudentState<f64> = model.init(&mut rng, 0.99, 0.02);
        assert_eq!(state.teacher.len(), model.n_shared());
        let views = toy_views(&mut rng, 1);
        assert_eq!(model.student_predict(&state, &views.d1).unwrap().dim(), (1, 3));
        assert_eq!(model.teacher_predict(&state, &views.d1).unwrap().dim(), (1, 3));
        let before = state.teacher.clone();
        for _ in 0..3 {
            model.total_loss(&state, &views).unwrap();
            model.loss_and_grad(&state, &views).unwrap();
        }
        assert_eq!(state.teacher, before);
    }

    #[test]
    fn batched_loss_matches_separate_evaluation() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state: TeacherStudentState<f64> = model.init(&mut rng, 0.99, 0.03);
        let views = toy_views(&mut rng, 3);
        let direct = model.total_loss(&state, &views).unwrap();
        let (batched, _) = model.loss_and_grad(&state, &views).unwrap();
        assert!((direct.total - batched.total).abs() < 1e-12);
        assert!((direct.aug1 - batched.aug1).abs() < 1e-12);
    }

    /// Worst relative error between the analytic student gradient and
    /// central differences with step `h`.
    fn student_gradient_error(seed: u64, h: f64) -> f64 {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state: TeacherStudentState<f64> = model.init(&mut rng, 0.9, 0.5);
        for p in state.student.params_mut() {
            p.value.mapv_inplace(|v| v + 0.1 * rng.random_range(-1.0..1.0));
        }
        let views = toy_views(&mut rng, 2);
        let (_, grads) = model.loss_and_grad(&state, &views).unwrap();
        let g = grads.flatten();
        let mut worst: f64 = 0.0;
        for k in 0..state.student.num_scalars() {
            let mut plus = state.clone();
            *plus.student.scalar_mut(k).unwrap() += h;
            let mut minus = state.clone();
            *minus.student.scalar_mut(k).unwrap() -= h;
            let num = (model.total_loss(&plus, &views).unwrap().total - model.total_loss(&minus, &views).unwrap().total) / (2.0 * h);
            worst = worst.max((num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn student_gradient_matches_finite_differences() {
        for seed in 10..16 {
            let worst = student_gradient_error(seed, 1e-5);
            assert!(worst < 1e-4, "seed {seed}: worst relative error {worst}");
        }
    }

    #[test]
    fn teacher_follows_ema_recurrence() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut state: TeacherStudentState<f64> = model.init(&mut rng, 0.9, 0.02);
        let mut opt = OptimizerState::new(&state.student, AdamConfig::default(), CosineSchedule::new(1e-2, 1e-3, 3));
        let mut oracle: Vec<Vec<f64>> = state.teacher.params().iter().map(|p| p.value.iter().copied().collect()).collect();
        for _ in 0..3 {
            let views = toy_views(&mut rng, 2);
            model.train_step(&mut state, &mut opt, &views).unwrap();
            for (t, s) in oracle.iter_mut().zip(state.student.params()) {
                for (tv, &sv) in t.iter_mut().zip(s.value.iter()) {
                    *tv = 0.9 * *tv + (1.0 - 0.9) * sv;
                }
            }
        }
        for (t, o) in state.teacher.params().iter().zip(&oracle) {
            assert_eq!(t.value.iter().copied().collect::<Vec<_>>(), *o, "{}", t.name);
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn momentum_zero_copies_student_into_teacher() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state: TeacherStudentState<f64> = model.init(&mut rng, 0.0, 0.02);
        let mut opt = OptimizerState::new(&state.student, AdamConfig::default(), CosineSchedule::new(1e-2, 1e-3, 1));
        let views = toy_views(&mut rng, 2);
        model.train_step(&mut state, &mut opt, &views).unwrap();
        let n = model.n_shared();
        for (t, s) in state.teacher.params().iter().zip(&state.student.params()[..n]) {
            assert_eq!(t.value, s.value);
        }
        let ne = model.encoder.n_params();
        let (emb, _) = model.encoder.forward(&state.student.params()[..ne], &views.d1).unwrap();
        let (via_student, _) = model.fhead.forward(&state.student.params()[ne..n], emb.view()).unwrap();
        assert_eq!(model.teacher_predict(&state, &views.d1).unwrap(), via_student);
    }

    #[test]
    fn probe_separates_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut make = |n: usize| {
            let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let x = Array2::from_shape_fn((n, 4), |(i, j)| if j == y[i] { 3.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
            (x, y)
        };
        let (xtr, ytr) = make(60);
        let (xte, yte) = make(30);
        let acc = linear_probe_accuracy(&xtr, &ytr, &xte, &yte, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = toy_model();
        let state: TeacherStudentState<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(7), 0.99, 0.02);
        let ckpt = model.checkpoint(&state);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let (m2, s2) = SslModel::from_checkpoint(&back).unwrap();
        assert_eq!(m2.spec(), model.spec());
        assert_eq!(s2, state);
    }
}
