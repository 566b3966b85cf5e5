//! Central finite-difference gradient checking.
//!
//! The analytic side runs at the precision under test; the finite
//! differences always run in `f64` so that the reference stays meaningful
//! when checking `f32` gradients.

use super::{no_grad, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scalar-valued function of a parameter list, evaluable at either precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, params: &[Tensor<T>]) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − fd| / max(|analytic| + |fd|, floor)
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries: usize,
}

fn eval_f64<F: ScalarFn>(f: &F, params: &[Tensor<f64>]) -> Result<f64> {
    let v = no_grad(|| f.eval(params))?.item()?;
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("function value is {v}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Entries checked per parameter tensor, drawn without replacement; all when `None`.
    pub per_param: Option<usize>,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            per_param: None,
            floor: 1e-12,
            seed: 0,
        }
    }
}

/// Compares `T`-precision analytic gradients with central differences of
/// step `eps` at `params`, over every entry.
pub fn check_gradients<T: Scalar, F: ScalarFn>(
    f: &F,
    params: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport> {
    check_gradients_with::<T, F>(
        f,
        params,
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

pub fn check_gradients_with<T: Scalar, F: ScalarFn>(
    f: &F,
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let eps = opts.eps;
    let leaves: Vec<Tensor<T>> = params.iter().map(|p| p.cast::<T>().into_param()).collect();
    let loss = f.eval(&leaves)?;
    let value = loss.item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("function value is {value}")));
    }
    let grads = loss.backward()?;

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport::default();
    let base: Vec<Tensor<f64>> = params.iter().map(|p| p.detach()).collect();
    for (pi, p) in params.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(&leaves[pi]) {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; p.numel()],
        };
        let mut entries: Vec<usize> = (0..p.numel()).collect();
        if let Some(k) = opts.per_param {
            if k < entries.len() {
                rng.shuffle(&mut entries);
                entries.truncate(k);
                entries.sort_unstable();
            }
        }
        for ei in entries {
            let a = analytic[ei];
            let mut shifted = base.clone();
            let mut data = p.to_vec();
            data[ei] += eps;
            shifted[pi] = Tensor::new(data.clone(), p.shape())?;
            let plus = eval_f64(f, &shifted)?;
            data[ei] -= 2.0 * eps;
            shifted[pi] = Tensor::new(data, p.shape())?;
            let minus = eval_f64(f, &shifted)?;
            let fd = (plus - minus) / (2.0 * eps);
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(opts.floor);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, ei));
                report.worst_analytic = a;
                report.worst_numeric = fd;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Cube;

    impl ScalarFn for Cube {
        fn eval<T: Scalar>(&self, p: &[Tensor<T>]) -> Result<Tensor<T>> {
            Ok(p[0].mul(&p[0])?.mul(&p[0])?.sum_all())
        }
    }

    struct Zero;

    impl ScalarFn for Zero {
        fn eval<T: Scalar>(&self, p: &[Tensor<T>]) -> Result<Tensor<T>> {
            Ok(p[0].scale(0.0).sum_all())
        }
    }

    struct Blowup;

    impl ScalarFn for Blowup {
        fn eval<T: Scalar>(&self, p: &[Tensor<T>]) -> Result<Tensor<T>> {
            Ok(p[0].ln().sum_all())
        }
    }

    #[test]
    fn cube_at_two() {
        let x = Tensor::from_f64(&[2.0], &[1]).unwrap();
        let r = check_gradients::<f64, _>(&Cube, &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert!((r.worst_analytic - 12.0).abs() < 1e-12);
    }

    #[test]
    fn zero_function_has_zero_error() {
        let x = Tensor::from_f64(&[0.3, -1.0, 4.0], &[3]).unwrap();
        let r = check_gradients::<f64, _>(&Zero, &[x], 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.entries, 3);
    }

    #[test]
    fn non_finite_value_is_an_evaluation_error() {
        let x = Tensor::from_f64(&[-1.0], &[1]).unwrap();
        let err = check_gradients::<f64, _>(&Blowup, &[x], 1e-5).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)), "{err}");
    }
}
