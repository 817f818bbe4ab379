//! Central-difference gradient oracle.

use super::{backward, Element, Tensor};
use crate::error::{Error, Result};

/// Smallest denominator used for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct CheckOptions {
    /// Coordinates to probe; all of them when `None`.
    pub coords: Option<Vec<usize>>,
    /// Multiplies the analytic gradient before comparison. Only used to
    /// confirm that the oracle catches a wrong gradient.
    pub corrupt_scale: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Max relative error between the backward-pass gradient of scalar `f` at `x`
/// and central differences with step `epsilon`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, epsilon: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    finite_diff_check_with(f, x, epsilon, &CheckOptions::default()).map(|r| r.max_rel_error)
}

pub fn finite_diff_check_with<T, F>(f: F, x: &Tensor<T>, epsilon: f64, opts: &CheckOptions) -> Result<CheckReport>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    finite_diff_check_pair(&f, &f, x, epsilon, opts)
}

/// Like [`finite_diff_check_with`], but the analytic gradient comes from
/// `analytic` while central differences are taken on `numeric`. The two must
/// agree in value at `x`. Used where the backward rule is not the derivative
/// of the forward function (gradient reversal), with `numeric` an explicit
/// re-parameterization whose true derivative is the intended gradient.
pub fn finite_diff_check_pair<T, A, N>(
    analytic: A,
    numeric: N,
    x: &Tensor<T>,
    epsilon: f64,
    opts: &CheckOptions,
) -> Result<CheckReport>
where
    T: Element,
    A: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    N: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    let f = numeric;
    if !(1e-6..=1e-2).contains(&epsilon) {
        return Err(Error::Config(format!("finite-difference step {epsilon} outside [1e-6, 1e-2]")));
    }
    let leaf = x.to_param();
    let y = analytic(&leaf)?;
    if y.numel() != 1 {
        return Err(Error::Contract(format!("gradient oracle needs a scalar function, got {:?}", y.shape())));
    }
    backward(&y)?;
    let full = leaf.grad().unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let again = analytic(&x.detach())?;
    if again.item().to_bits_u64() != y.item().to_bits_u64() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {} vs {}",
            y.item(),
            again.item()
        )));
    }
    let mirrored = f(&x.detach())?.item().as_f64();
    let base = y.item().as_f64();
    if (mirrored - base).abs() > 1e-9 * base.abs().max(1.0) {
        return Err(Error::OracleInvalid(format!(
            "numeric and analytic functions disagree at the base point: {mirrored} vs {base}"
        )));
    }

    let coords: Vec<usize> = match &opts.coords {
        Some(c) => c.clone(),
        None => (0..x.numel()).collect(),
    };
    let scale = opts.corrupt_scale.unwrap_or(1.0);
    let base = x.to_vec();
    let mut report = CheckReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(coords.len()),
        numeric: Vec::with_capacity(coords.len()),
    };
    for &i in &coords {
        if i >= base.len() {
            return Err(Error::Contract(format!("coordinate {i} out of range for {} values", base.len())));
        }
        let eval = |delta: f64| -> Result<(f64, f64)> {
            let mut data = base.clone();
            data[i] = T::from_f64(base[i].as_f64() + delta);
            let at = data[i].as_f64();
            let v = f(&Tensor::new(x.shape(), data)?)?;
            Ok((at, v.item().as_f64()))
        };
        let (xp, fp) = eval(epsilon)?;
        let (xm, fm) = eval(-epsilon)?;
        let numeric = (fp - fm) / (xp - xm);
        let analytic = full[i].as_f64() * scale;
        let rel = (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst_coord = i;
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
