//! Central-difference gradient checking.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step in 64-bit.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every coordinate
/// of every input of a scalar-valued closure.
///
/// The closure receives a fresh tape and one tracked leaf per input and must
/// return a single-element node.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    finite_difference_check_at(f, inputs, eps, &all)
}

/// As [`finite_difference_check`], restricted to the listed coordinates of
/// each input (`coords[i]` indexes into `inputs[i]`).
pub fn finite_difference_check_at<F>(f: F, inputs: &[Tensor<f64>], eps: f64, coords: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if coords.len() != inputs.len() {
        return Err(Error::dim(
            "finite_difference_check",
            "coords",
            inputs.len(),
            coords.len(),
        ));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::shape("finite_difference_check", "closure must return a scalar"));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        for &j in idxs {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite derivative at input {i}, coordinate {j}: analytic {a}, numeric {numeric}"
                )));
            }
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}
