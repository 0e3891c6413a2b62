use ndarray::{Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{array, Param, ParamSet};
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => 2.0,
            Activation::Tanh | Activation::Identity => 1.0,
        }
    }
}

pub(crate) fn gaussian_init<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> ArrayD<T> {
    let std = (gain / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    array(shape, (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect())
}

pub(crate) fn view2<'a, T: Real>(p: &'a Param<T>) -> Result<ArrayView2<'a, T>> {
    p.value
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Shape(format!("{} should be 2-D, is {:?}", p.name, p.value.shape())))
}

pub(crate) fn view1<'a, T: Real>(p: &'a Param<T>) -> Result<ArrayView1<'a, T>> {
    p.value
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::Shape(format!("{} should be 1-D, is {:?}", p.name, p.value.shape())))
}

/// Fully connected layer `y = x W^T + b`, weight shape `(outputs, inputs)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub const N_PARAMS: usize = 2;

    pub fn new(inputs: usize, outputs: usize) -> Self {
        Linear { inputs, outputs }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R, gain: f64) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.push("weight", gaussian_init(rng, &[self.outputs, self.inputs], self.inputs, gain));
        p.push("bias", ArrayD::zeros(vec![self.outputs]));
        p
    }

    pub fn forward<T: Real>(&self, params: &[Param<T>], x: ArrayView2<T>) -> Result<Array2<T>> {
        let w = view2(&params[0])?;
        let b = view1(&params[1])?;
        if x.ncols() != self.inputs || w.dim() != (self.outputs, self.inputs) {
            return Err(Error::Shape(format!(
                "linear {}->{} got input width {} and weight {:?}",
                self.inputs,
                self.outputs,
                x.ncols(),
                w.dim()
            )));
        }
        Ok(x.dot(&w.t()) + &b)
    }

    /// Returns `(dx, [dW, db])`; `dx` is skipped when not needed.
    pub fn backward<T: Real>(
        &self,
        params: &[Param<T>],
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Result<(Option<Array2<T>>, Vec<ArrayD<T>>)> {
        let w = view2(&params[0])?;
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        let dx = need_dx.then(|| dy.dot(&w));
        Ok((dx, vec![dw.into_dyn(), db.into_dyn()]))
    }
}

/// Layer widths `[in, hidden..., out]` with an activation between layers
/// (none after the last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Self {
        MlpSpec { widths, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!(
                "MLP needs at least input and output widths, all positive: {:?}",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    /// Input of every linear layer.
    inputs: Vec<Array2<T>>,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.widths.windows(2).map(|w| Linear::new(w[0], w[1])).collect();
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.layers.len() * Linear::N_PARAMS
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet<T> {
        let mut out = ParamSet::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let gain = if i == last { 1.0 } else { self.spec.activation.init_gain() };
            out.extend_prefixed(&format!("fc{i}"), layer.init(rng, gain));
        }
        out
    }

    pub fn forward<T: Real>(&self, params: &[Param<T>], x: ArrayView2<T>) -> Result<(Array2<T>, MlpCache<T>)> {
        if params.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "MLP expects {} parameter arrays, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = &params[i * 2..i * 2 + 2];
            let mut z = layer.forward(p, h.view())?;
            if i != last {
                let act = self.spec.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            inputs.push(h);
            h = z;
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Returns `(dx, grads)` with grads laid out like the parameters.
    pub fn backward<T: Real>(
        &self,
        params: &[Param<T>],
        cache: &MlpCache<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Result<(Option<Array2<T>>, Vec<ArrayD<T>>)> {
        let n = self.layers.len();
        let mut grads: Vec<ArrayD<T>> = vec![ArrayD::zeros(vec![0]); n * 2];
        let mut d = dy.to_owned();
        for i in (0..n).rev() {
            let p = &params[i * 2..i * 2 + 2];
            let want_dx = i > 0 || need_dx;
            let (dx, g) = self.layers[i].backward(p, cache.inputs[i].view(), d.view(), want_dx)?;
            let [dw, db]: [ArrayD<T>; 2] = g.try_into().expect("linear yields two grads");
            grads[i * 2] = dw;
            grads[i * 2 + 1] = db;
            match dx {
                Some(mut dx) if i > 0 => {
                    // cache.inputs[i] is the activation output of layer i-1
                    let act = self.spec.activation;
                    ndarray::Zip::from(&mut dx)
                        .and(&cache.inputs[i])
                        .for_each(|g, &y| *g *= act.grad_from_output(y));
                    d = dx;
                }
                Some(dx) => return Ok((Some(dx), grads)),
                None => return Ok((None, grads)),
            }
        }
        unreachable!("loop returns at layer 0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(MlpSpec::new(vec![3, 5, 4, 2], Activation::Tanh)).unwrap();
        let mut params: ParamSet<f64> = mlp.init(&mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let r = Array2::from_shape_fn((4, 2), |(i, j)| ((i + 2 * j) as f64 * 0.91).cos());
        let loss = |ps: &ParamSet<f64>| -> f64 {
            let (y, _) = mlp.forward(ps.params(), x.view()).unwrap();
            (&y * &r).sum()
        };
        let (_, cache) = mlp.forward(params.params(), x.view()).unwrap();
        let (_, grads) = mlp.backward(params.params(), &cache, r.view(), false).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
        let h = 1e-3;
        for k in 0..params.num_scalars() {
            let orig = *params.scalar_mut(k).unwrap();
            *params.scalar_mut(k).unwrap() = orig + h;
            let lp = loss(&params);
            *params.scalar_mut(k).unwrap() = orig - h;
            let lm = loss(&params);
            *params.scalar_mut(k).unwrap() = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {k}: {numeric} vs {}", analytic[k]);
        }
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let l = Linear::new(3, 2);
        let p: ParamSet<f64> = l.init(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        assert!(l.forward(p.params(), Array2::zeros((1, 4)).view()).is_err());
    }
}
