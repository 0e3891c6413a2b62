use ndarray::{ArrayD, IxDyn, Zip};

use super::Real;
use crate::error::{Error, Result};

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Flat, ordered collection of named parameter arrays. Models address their
/// parameters by position, so two sets built from the same spec line up.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn from_params(params: Vec<Param<T>>) -> Self {
        ParamSet { params }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.params.push(Param {
            name: name.into(),
            value,
        });
    }

    /// Appends every parameter of `other`, prefixing names with `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet<T>) {
        for p in other.params {
            self.params.push(Param {
                name: format!("{prefix}.{}", p.name),
                value: p.value,
            });
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// First `n` parameters as their own set.
    pub fn head(&self, n: usize) -> ParamSet<T> {
        ParamSet {
            params: self.params[..n.min(self.params.len())].to_vec(),
        }
    }

    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: ArrayD::zeros(p.value.raw_dim()),
                })
                .collect(),
        }
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_layout(&self, other: &[Param<T>]) -> Result<()> {
        if self.params.len() != other.len() {
            return Err(Error::Shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(other) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!(
                    "{}: {:?} vs {}: {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: T) {
        for p in &mut self.params {
            p.value.mapv_inplace(|v| v * c);
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &ParamSet<T>, c: T) -> Result<()> {
        self.check_layout(&other.params)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            Zip::from(&mut a.value).and(&b.value).for_each(|x, &y| *x += c * y);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.mapv(|v| U::from_f64_lossy(v.to_f64_lossy())),
                })
                .collect(),
        }
    }

    /// All scalars in order, flattened.
    pub fn flatten(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    /// Name of the first parameter holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| p.value.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }

    /// Mutable access to scalar `k` of the flattened set.
    pub fn scalar_mut(&mut self, mut k: usize) -> Option<&mut T> {
        for p in &mut self.params {
            if k < p.value.len() {
                return p.value.as_slice_mut().map(|s| &mut s[k]);
            }
            k -= p.value.len();
        }
        None
    }

    pub fn into_params(self) -> Vec<Param<T>> {
        self.params
    }
}

pub(crate) fn array<T: Real>(shape: &[usize], data: Vec<T>) -> ArrayD<T> {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape and data length agree")
}

/// In-place EMA over the leading parameters shared with `student`:
/// `teacher = momentum * teacher + (1 - momentum) * student`.
pub fn ema_update_in_place<T: Real>(
    teacher: &mut ParamSet<T>,
    student: &[Param<T>],
    momentum: T,
) -> Result<()> {
    if !(momentum >= T::zero() && momentum <= T::one()) {
        return Err(Error::Parameter(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    let n = teacher.len();
    if student.len() < n {
        return Err(Error::Shape(format!(
            "student has {} parameters, teacher needs {n}",
            student.len()
        )));
    }
    teacher.check_layout(&student[..n])?;
    let rest = T::one() - momentum;
    for (t, s) in teacher.params.iter_mut().zip(student) {
        Zip::from(&mut t.value)
            .and(&s.value)
            .for_each(|t, &s| *t = momentum * *t + rest * s);
    }
    Ok(())
}

/// `teacher' = momentum * teacher + (1 - momentum) * student`, elementwise.
pub fn ema_update<T: Real>(teacher: &ParamSet<T>, student: &ParamSet<T>, momentum: T) -> Result<ParamSet<T>> {
    teacher.check_layout(&student.params)?;
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, &student.params, momentum)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", array(&[1], vec![v]));
        p
    }

    #[test]
    fn ema_examples() {
        let t = scalar(1.0);
        let s = scalar(0.0);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        let v = ema_update(&t, &s, 0.99).unwrap().flatten()[0];
        assert!((v - 0.99).abs() < 1e-15);
        assert!(ema_update(&t, &s, 1.5).is_err());
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut other = ParamSet::<f64>::new();
        other.push("w", array(&[2], vec![0.0, 1.0]));
        assert!(matches!(ema_update(&scalar(1.0), &other, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_indexing_walks_params() {
        let mut p = ParamSet::<f64>::new();
        p.push("a", array(&[2], vec![1.0, 2.0]));
        p.push("b", array(&[1, 2], vec![3.0, 4.0]));
        *p.scalar_mut(2).unwrap() = 9.0;
        assert_eq!(p.flatten(), vec![1.0, 2.0, 9.0, 4.0]);
        assert!(p.scalar_mut(4).is_none());
    }

    proptest! {
        #[test]
        fn ema_is_affine(t in proptest::collection::vec(-5.0f64..5.0, 3),
                         s in proptest::collection::vec(-5.0f64..5.0, 3),
                         m in 0.0f64..=1.0, c in -3.0f64..3.0) {
            let mk = |v: &Vec<f64>| { let mut p = ParamSet::new(); p.push("x", array(&[3], v.clone())); p };
            let (tp, sp) = (mk(&t), mk(&s));
            let mut scaled_t = tp.clone(); scaled_t.scale(c);
            let mut scaled_s = sp.clone(); scaled_s.scale(c);
            let lhs = ema_update(&scaled_t, &scaled_s, m).unwrap().flatten();
            let mut rhs = ema_update(&tp, &sp, m).unwrap(); rhs.scale(c);
            for (a, b) in lhs.iter().zip(rhs.flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
