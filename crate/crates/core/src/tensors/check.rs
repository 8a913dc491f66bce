//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::Result;
use crate::tensors::Tensor;

/// Largest relative discrepancy between the tape gradient and a central
/// finite difference, over every element of every input.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, floor)`,
/// where `floor` keeps near-zero gradients from dominating.
pub fn max_relative_error<F>(inputs: &[(Vec<usize>, Vec<f64>)], step: f64, floor: f64, f: F) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let params = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    f(&params)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let consts = inputs
            .iter()
            .enumerate()
            .map(|(k, (s, d))| {
                let mut d = d.clone();
                if k == which {
                    d[at] += delta;
                }
                Tensor::from_vec(s, d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&consts)?.item())
    };

    let mut worst: f64 = 0.0;
    for (k, (_, d)) in inputs.iter().enumerate() {
        for i in 0..d.len() {
            let numeric = (eval(k, i, step)? - eval(k, i, -step)?) / (2.0 * step);
            let a = analytic[k][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
