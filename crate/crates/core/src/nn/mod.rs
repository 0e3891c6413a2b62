//! Small trainable building blocks with explicit forward/backward passes.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while
//! gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub mod bank;
pub mod checkpoint;
pub mod encoder;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

pub use bank::InputBank;
pub use checkpoint::Checkpoint;
pub use encoder::{ConvBlockSpec, Encoder, EncoderCache, EncoderSpec, GlobalPool};
pub use layers::{Activation, Linear, Mlp, MlpCache, MlpSpec};
pub use optim::{adam_step, AdamConfig, CosineSchedule, OptimizerState};
pub use params::{ema_update, Param, ParamSet};

pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Numerically stable logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
