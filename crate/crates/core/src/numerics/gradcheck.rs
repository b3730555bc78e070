use super::{Matrix, Parameters};
use crate::error::{Error, Result};

/// Central-difference gradient `(f(θ+ε) − f(θ−ε)) / 2ε` of `loss` at `params`,
/// one coordinate at a time. Returns one matrix per parameter tensor.
pub fn finite_diff_grad<P, F>(params: &P, epsilon: f64, mut loss: F) -> Result<Vec<Matrix>>
where
    P: Parameters + Clone,
    F: FnMut(&P) -> f64,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut probe = params.clone();
    let shapes = params.shapes();
    let mut out: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
    for (t, grad) in out.iter_mut().enumerate() {
        for i in 0..grad.len() {
            let orig = probe.tensors()[t].as_slice()[i];
            probe.tensors_mut()[t].as_mut_slice()[i] = orig + epsilon;
            let plus = loss(&probe);
            probe.tensors_mut()[t].as_mut_slice()[i] = orig - epsilon;
            let minus = loss(&probe);
            probe.tensors_mut()[t].as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteProbe {
                    tensor: t,
                    coordinate: i,
                });
            }
            grad.as_mut_slice()[i] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(out)
}

/// `|a − b| / max(|a|, |b|, 1e-7)`. The floor keeps exact zeros (dead ReLU
/// units, saturated hinges) from dividing finite-difference noise by zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Largest [`relative_error`] over matching entries of two tensor lists.
pub fn max_relative_error(a: &[Matrix], b: &[&Matrix]) -> f64 {
    assert_eq!(a.len(), b.len(), "tensor count mismatch");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.shape(), y.shape(), "tensor shape mismatch");
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(&p, &q)| relative_error(p, q))
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
