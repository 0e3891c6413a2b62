//! Convolutional patch encoder: input average pooling, stride-2 conv blocks via
//! im2col + GEMM, and a global pool producing one embedding row per patch.
//!
//! Activations are stored channel-major as `(C, B, H, W)` so each conv layer is
//! a single `(O, C*k*k) x (C*k*k, B*H*W)` product.

use ndarray::{Array2, Array4, ArrayD, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{gaussian_init, Activation};
use super::params::{Param, ParamSet};
use super::Real;
use crate::error::{Error, Result};
use crate::record::PatchPixels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalPool {
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Side of the square input patch in pixels.
    pub input_size: usize,
    /// Average-pooling factor applied to the patch before the first conv.
    pub input_pool: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub pool: GlobalPool,
    pub activation: Activation,
    /// Must equal the channel count of the last block.
    pub embedding_dim: usize,
}

impl Default for EncoderSpec {
    /// Four stride-2 3x3 blocks (16/32/64/128) on a 4x average-pooled 256 patch.
    fn default() -> Self {
        EncoderSpec::stride2(256, 4, &[16, 32, 64, 128])
    }
}

impl EncoderSpec {
    pub fn stride2(input_size: usize, input_pool: usize, channels: &[usize]) -> Self {
        EncoderSpec {
            input_size,
            input_pool,
            blocks: channels
                .iter()
                .map(|&c| ConvBlockSpec {
                    channels: c,
                    kernel: 3,
                    stride: 2,
                })
                .collect(),
            pool: GlobalPool::Average,
            activation: Activation::Relu,
            embedding_dim: channels.last().copied().unwrap_or(0),
        }
    }

    /// Production constraints on top of structural consistency.
    pub fn validate(&self) -> Result<()> {
        Encoder::new(self.clone())?;
        if self.embedding_dim < 8 {
            return Err(Error::Config(format!(
                "embedding dim must be >= 8, got {}",
                self.embedding_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    in_hw: usize,
    out_hw: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    geoms: Vec<ConvGeom>,
    base_hw: usize,
}

/// Forward activations needed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    batch: usize,
    cols: Vec<Array2<T>>,
    outputs: Vec<Array4<T>>,
}

impl Encoder {
    /// Checks that the spec describes a computable network.
    pub fn new(spec: EncoderSpec) -> Result<Self> {
        if spec.blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one conv block".into()));
        }
        if spec.input_pool == 0 || spec.input_size % spec.input_pool != 0 {
            return Err(Error::Config(format!(
                "input pool {} must divide input size {}",
                spec.input_pool, spec.input_size
            )));
        }
        let base_hw = spec.input_size / spec.input_pool;
        let mut geoms = Vec::with_capacity(spec.blocks.len());
        let (mut c, mut hw) = (3usize, base_hw);
        for (i, b) in spec.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::Config(format!("block {i} has a zero dimension")));
            }
            let pad = b.kernel / 2;
            if hw + 2 * pad < b.kernel {
                return Err(Error::Config(format!("block {i}: input {hw} smaller than kernel")));
            }
            let out_hw = (hw + 2 * pad - b.kernel) / b.stride + 1;
            geoms.push(ConvGeom {
                in_c: c,
                out_c: b.channels,
                k: b.kernel,
                stride: b.stride,
                pad,
                in_hw: hw,
                out_hw,
            });
            c = b.channels;
            hw = out_hw;
        }
        if spec.embedding_dim != c {
            return Err(Error::Config(format!(
                "embedding dim {} must equal last block channels {c}",
                spec.embedding_dim
            )));
        }
        Ok(Encoder { spec, geoms, base_hw })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    /// Side of the tensor entering the first conv.
    pub fn base_size(&self) -> usize {
        self.base_hw
    }

    pub fn n_params(&self) -> usize {
        self.geoms.len() * 2
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let gain = match self.spec.activation {
            Activation::Relu => 2.0,
            _ => 1.0,
        };
        let mut p = ParamSet::new();
        for (i, g) in self.geoms.iter().enumerate() {
            let fan_in = g.in_c * g.k * g.k;
            p.push(format!("conv{i}.weight"), gaussian_init(rng, &[g.out_c, g.in_c, g.k, g.k], fan_in, gain));
            p.push(format!("conv{i}.bias"), ArrayD::zeros(vec![g.out_c]));
        }
        p
    }

    /// Average-pools patches and maps intensities to `(v / 255 - 0.5) * 4`,
    /// giving a `(3, B, s, s)` tensor in `[-2, 2]`. Patches already at the
    /// pooled side `s` are taken as they are.
    pub fn prepare_input<T: Real>(&self, patches: &[&PatchPixels]) -> Result<Array4<T>> {
        let s = self.base_hw;
        let b = patches.len();
        let mut out = Array4::<T>::zeros((3, b, s, s));
        for (bi, p) in patches.iter().enumerate() {
            let f = if p.side() == self.spec.input_size {
                self.spec.input_pool
            } else if p.side() == s {
                1
            } else {
                return Err(Error::Shape(format!(
                    "encoder expects {0}x{0} (or pre-pooled {2}x{2}) patches, got {1}x{1}",
                    self.spec.input_size,
                    p.side(),
                    s
                )));
            };
            let scale = 4.0 / (255.0 * (f * f) as f64);
            let data = p.data();
            let side = p.side();
            for y in 0..s {
                for x in 0..s {
                    let mut acc = [0u32; 3];
                    for dy in 0..f {
                        let row = (y * f + dy) * side;
                        for dx in 0..f {
                            let o = (row + x * f + dx) * 3;
                            acc[0] += data[o] as u32;
                            acc[1] += data[o + 1] as u32;
                            acc[2] += data[o + 2] as u32;
                        }
                    }
                    for c in 0..3 {
                        out[[c, bi, y, x]] = T::from_f64_lossy(acc[c] as f64 * scale - 2.0);
                    }
                }
            }
        }
        Ok(out)
    }

    fn check_params<T: Real>(&self, params: &[Param<T>]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "encoder expects {} parameter arrays, got {}",
                self.n_params(),
                params.len()
            )));
        }
        for (i, g) in self.geoms.iter().enumerate() {
            if params[2 * i].value.shape() != [g.out_c, g.in_c, g.k, g.k] || params[2 * i + 1].value.shape() != [g.out_c] {
                return Err(Error::Shape(format!("conv{i} parameters have the wrong shape")));
            }
        }
        Ok(())
    }

    /// Embeds a prepared `(3, B, s, s)` batch into a `B x E` matrix.
    pub fn forward<T: Real>(&self, params: &[Param<T>], input: &Array4<T>) -> Result<(Array2<T>, EncoderCache<T>)> {
        self.check_params(params)?;
        let (c, b, h, w) = input.dim();
        if c != 3 || h != self.base_hw || w != self.base_hw {
            return Err(Error::Shape(format!(
                "encoder input should be (3, B, {0}, {0}), got {1:?}",
                self.base_hw,
                input.dim()
            )));
        }
        let input = &input.as_standard_layout();
        let act = self.spec.activation;
        let mut cols = Vec::with_capacity(self.geoms.len());
        let mut outputs: Vec<Array4<T>> = Vec::with_capacity(self.geoms.len());
        for (i, g) in self.geoms.iter().enumerate() {
            let x = if i == 0 { input.as_slice() } else { outputs[i - 1].as_slice() };
            let col = im2col(x.expect("standard layout"), g, b);
            let wm = weight_matrix(&params[2 * i], g);
            let bias = params[2 * i + 1].value.as_slice().expect("contiguous bias");
            let mut y = wm.dot(&col);
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias) {
                row.mapv_inplace(|v| act.apply(v + bv));
            }
            let y = y
                .into_shape_with_order((g.out_c, b, g.out_hw, g.out_hw))
                .expect("gemm output is contiguous");
            cols.push(col);
            outputs.push(y);
        }
        let last = outputs.last().expect("at least one block");
        let emb = global_pool(last, self.spec.pool);
        Ok((emb, EncoderCache { batch: b, cols, outputs }))
    }

    /// Gradients of the parameters given `d_embed = dL/d(embeddings)`.
    pub fn backward<T: Real>(
        &self,
        params: &[Param<T>],
        cache: &EncoderCache<T>,
        d_embed: ArrayView2<T>,
    ) -> Result<ParamSet<T>> {
        self.check_params(params)?;
        let b = cache.batch;
        if d_embed.dim() != (b, self.spec.embedding_dim) {
            return Err(Error::Shape(format!(
                "embedding gradient should be ({b}, {}), got {:?}",
                self.spec.embedding_dim,
                d_embed.dim()
            )));
        }
        let act = self.spec.activation;
        let mut grads: Vec<ArrayD<T>> = vec![ArrayD::zeros(vec![0]); self.n_params()];
        let mut d = global_pool_backward(cache.outputs.last().expect("cached"), d_embed, self.spec.pool);
        for i in (0..self.geoms.len()).rev() {
            let g = &self.geoms[i];
            let y = &cache.outputs[i];
            ndarray::Zip::from(&mut d).and(y).for_each(|dv, &yv| *dv *= act.grad_from_output(yv));
            let n = b * g.out_hw * g.out_hw;
            let dz = d.view().into_shape_with_order((g.out_c, n)).expect("contiguous grad");
            let col = &cache.cols[i];
            let dw = dz.dot(&col.t());
            let db = dz.sum_axis(Axis(1));
            grads[2 * i] = dw
                .into_shape_with_order(vec![g.out_c, g.in_c, g.k, g.k])
                .expect("weight gradient reshape");
            grads[2 * i + 1] = db.into_dyn();
            if i > 0 {
                let wm = weight_matrix(&params[2 * i], g);
                let dcol = wm.t().dot(&dz);
                d = col2im(&dcol, g, b);
            }
        }
        Ok(ParamSet::from_params(
            params
                .iter()
                .zip(grads)
                .map(|(p, value)| Param {
                    name: p.name.clone(),
                    value,
                })
                .collect(),
        ))
    }

    /// Forward pass from raw patches.
    pub fn embed<T: Real>(&self, params: &[Param<T>], patches: &[&PatchPixels]) -> Result<Array2<T>> {
        let input = self.prepare_input(patches)?;
        Ok(self.forward(params, &input)?.0)
    }

    /// [`embed`](Self::embed) in chunks of `chunk` patches, to bound memory.
    pub fn embed_chunked<T: Real>(&self, params: &[Param<T>], patches: &[&PatchPixels], chunk: usize) -> Result<Array2<T>> {
        let mut out = Array2::zeros((patches.len(), self.spec.embedding_dim));
        for (ci, part) in patches.chunks(chunk.max(1)).enumerate() {
            let e = self.embed(params, part)?;
            let start = ci * chunk.max(1);
            out.slice_mut(ndarray::s![start..start + part.len(), ..]).assign(&e);
        }
        Ok(out)
    }
}

fn weight_matrix<'a, T: Real>(p: &'a Param<T>, g: &ConvGeom) -> ArrayView2<'a, T> {
    ArrayView2::from_shape(
        (g.out_c, g.in_c * g.k * g.k),
        p.value.as_slice().expect("contiguous conv weight"),
    )
    .expect("validated weight shape")
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, b: usize) -> Array2<T> {
    let (hw, ohw, k) = (g.in_hw, g.out_hw, g.k);
    let n = b * ohw * ohw;
    let mut cols = vec![T::zero(); g.in_c * k * k * n];
    for ci in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &x[(ci * b + bi) * hw * hw..(ci * b + bi + 1) * hw * hw];
                    for oy in 0..ohw {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= hw as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * hw..(iy as usize + 1) * hw];
                        let dst_row = &mut dst[(bi * ohw + oy) * ohw..(bi * ohw + oy + 1) * ohw];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < hw as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.in_c * k * k, n), cols).expect("im2col shape")
}

fn col2im<T: Real>(dcol: &Array2<T>, g: &ConvGeom, b: usize) -> Array4<T> {
    let (hw, ohw, k) = (g.in_hw, g.out_hw, g.k);
    let n = b * ohw * ohw;
    let mut dx = vec![T::zero(); g.in_c * b * hw * hw];
    let cols = dcol.as_slice().expect("gemm output is contiguous");
    for ci in 0..g.in_c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut dx[(ci * b + bi) * hw * hw..(ci * b + bi + 1) * hw * hw];
                    for oy in 0..ohw {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= hw as isize {
                            continue;
                        }
                        let src_row = &src[(bi * ohw + oy) * ohw..(bi * ohw + oy + 1) * ohw];
                        let dst_row = &mut dst[iy as usize * hw..(iy as usize + 1) * hw];
                        for (ox, &v) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < hw as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((g.in_c, b, hw, hw), dx).expect("col2im shape")
}

fn global_pool<T: Real>(x: &Array4<T>, pool: GlobalPool) -> Array2<T> {
    let (c, b, h, w) = x.dim();
    let area = T::from_f64_lossy((h * w) as f64);
    let mut out = Array2::zeros((b, c));
    for ci in 0..c {
        for bi in 0..b {
            let plane = x.slice(ndarray::s![ci, bi, .., ..]);
            out[[bi, ci]] = match pool {
                GlobalPool::Average => plane.sum() / area,
                GlobalPool::Max => plane.iter().copied().fold(T::neg_infinity(), T::max),
            };
        }
    }
    out
}

fn global_pool_backward<T: Real>(x: &Array4<T>, d_embed: ArrayView2<T>, pool: GlobalPool) -> Array4<T> {
    let (c, b, h, w) = x.dim();
    let mut d = Array4::zeros((c, b, h, w));
    let area = T::from_f64_lossy((h * w) as f64);
    for ci in 0..c {
        for bi in 0..b {
            let g = d_embed[[bi, ci]];
            match pool {
                GlobalPool::Average => d.slice_mut(ndarray::s![ci, bi, .., ..]).fill(g / area),
                GlobalPool::Max => {
                    let plane = x.slice(ndarray::s![ci, bi, .., ..]);
                    // first maximal position receives the gradient
                    let mut best = (0, 0);
                    let mut best_v = T::neg_infinity();
                    for ((y, xx), &v) in plane.indexed_iter() {
                        if v > best_v {
                            best_v = v;
                            best = (y, xx);
                        }
                    }
                    d[[ci, bi, best.0, best.1]] = g;
                }
            }
        }
    }
    d
}

/// Applies one of the eight square symmetries (bit 0: flip x, bit 1: flip y,
/// bit 2: transpose) to sample `b` of a `(C, B, s, s)` tensor.
pub fn dihedral_in_place<T: Real>(x: &mut Array4<T>, b: usize, code: u8) {
    if code & 7 == 0 {
        return;
    }
    let (c, _, s, _) = x.dim();
    for ci in 0..c {
        let plane = x.slice(ndarray::s![ci, b, .., ..]).to_owned();
        let mut dst = x.slice_mut(ndarray::s![ci, b, .., ..]);
        for y in 0..s {
            for xx in 0..s {
                let (mut sy, mut sx) = (y, xx);
                if code & 4 != 0 {
                    std::mem::swap(&mut sy, &mut sx);
                }
                if code & 1 != 0 {
                    sx = s - 1 - sx;
                }
                if code & 2 != 0 {
                    sy = s - 1 - sy;
                }
                dst[[y, xx]] = plane[[sy, sx]];
            }
        }
    }
}
