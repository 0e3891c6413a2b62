//! Loss functions and row-wise normalizations with hand-written gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::Real;

/// Mean binary cross entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_mean<T: Real>(p: &[T], y: &[T], eps: f64) -> T {
    debug_assert_eq!(p.len(), y.len());
    let lo = T::from_f64_lossy(eps);
    let hi = T::one() - lo;
    let sum: T = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    sum / T::from_f64_lossy(p.len() as f64)
}

/// Gradient of [`bce_mean`] with respect to `p`; zero where the clamp is active.
pub fn bce_mean_grad<T: Real>(p: &[T], y: &[T], eps: f64) -> Vec<T> {
    let lo = T::from_f64_lossy(eps);
    let hi = T::one() - lo;
    let n = T::from_f64_lossy(p.len() as f64);
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                T::zero()
            } else {
                (-y / p + (T::one() - y) / (T::one() - p)) / n
            }
        })
        .collect()
}

pub fn softmax_rows<T: Real>(z: ArrayView2<T>) -> Array2<T> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Back-propagates `dp` through a row softmax with outputs `p`.
pub fn softmax_rows_backward<T: Real>(p: ArrayView2<T>, dp: ArrayView2<T>) -> Array2<T> {
    let dot = (&p * &dp).sum_axis(Axis(1));
    let mut dz = dp.to_owned();
    for ((mut row, prow), &d) in dz.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(&dot) {
        Zip::from(&mut row).and(&prow).for_each(|g, &pv| *g = pv * (*g - d));
    }
    dz
}

/// Scales each row to unit L2 norm, dividing by `max(norm, eps)`.
/// Returns the normalized rows and the divisors used.
pub fn l2_normalize_rows<T: Real>(x: ArrayView2<T>, eps: f64) -> (Array2<T>, Array1<T>) {
    let eps = T::from_f64_lossy(eps);
    let norms: Array1<T> = x
        .axis_iter(Axis(0))
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
        .collect();
    let mut y = x.to_owned();
    for (mut row, &n) in y.axis_iter_mut(Axis(0)).zip(&norms) {
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward<T: Real>(
    y: ArrayView2<T>,
    divisors: &Array1<T>,
    dy: ArrayView2<T>,
    eps: f64,
) -> Array2<T> {
    let eps = T::from_f64_lossy(eps);
    let mut dx = dy.to_owned();
    for ((mut drow, yrow), &n) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(divisors) {
        if n > eps {
            let d: T = drow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
            Zip::from(&mut drow).and(&yrow).for_each(|g, &yv| *g = (*g - yv * d) / n);
        } else {
            drow.mapv_inplace(|g| g / n);
        }
    }
    dx
}

/// Mean squared error over all elements.
pub fn mse<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> T {
    let n = T::from_f64_lossy(a.len().max(1) as f64);
    Zip::from(&a).and(&b).fold(T::zero(), |acc, &x, &y| acc + (x - y) * (x - y)) / n
}

/// Gradient of [`mse`] with respect to `a`.
pub fn mse_grad<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let c = T::from_f64_lossy(2.0 / a.len().max(1) as f64);
    Zip::from(&a).and(&b).map_collect(|&x, &y| c * (x - y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-5;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((num - a).abs() <= 1e-6 * num.abs().max(1.0), "{idx}: {num} vs {a}");
        }
    }

    #[test]
    fn bce_values() {
        let v: f64 = bce_mean(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0], 1e-7);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect: f64 = bce_mean(&[1.0, 0.0], &[1.0, 0.0], 1e-7);
        assert!(perfect >= 0.0 && perfect < 1e-6);
        let g = bce_mean_grad(&[0.0f64, 0.5], &[1.0, 1.0], 1e-7);
        assert_eq!(g[0], 0.0);
        assert!((g[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient() {
        let z: Array2<f64> = array![[0.3, -1.2, 2.0, 0.1], [1.0, 1.0, 1.0, -3.0]];
        let w = array![[0.5, -0.1, 0.7, 0.2], [-0.3, 0.9, 0.4, 0.6]];
        let f = |z: &Array2<f64>| (softmax_rows(z.view()) * &w).sum();
        let p = softmax_rows(z.view());
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        fd_check(f, &z, &softmax_rows_backward(p.view(), w.view()));
    }

    #[test]
    fn normalize_gradient_and_norms() {
        let x: Array2<f64> = array![[0.3, -1.2, 2.0], [1e-3, 4.0, -0.5]];
        let w = array![[0.5, -0.1, 0.7], [-0.3, 0.9, 0.4]];
        let f = |x: &Array2<f64>| (l2_normalize_rows(x.view(), 1e-12).0 * &w).sum();
        let (y, n) = l2_normalize_rows(x.view(), 1e-12);
        for row in y.axis_iter(Axis(0)) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        fd_check(f, &x, &l2_normalize_rows_backward(y.view(), &n, w.view(), 1e-12));
        let (z, _) = l2_normalize_rows(Array2::<f64>::zeros((1, 3)).view(), 1e-12);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mse_gradient() {
        let a = array![[0.3, -1.2], [2.0, 0.0]];
        let b = array![[0.1, 0.2], [-1.0, 0.5]];
        fd_check(|a| mse(a.view(), b.view()), &a, &mse_grad(a.view(), b.view()));
    }
}
