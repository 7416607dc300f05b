//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst relative error over all inputs, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_input: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
///
/// Non-scalar outputs are reduced with a fixed random projection drawn from `seed`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let y = f(&leaves)?;
    let shape = y.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let proj = Tensor::new(shape.clone(), w)?;
    let loss = y.mul(&tape.leaf(proj.clone()))?.sum();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| grads.get_or_zeros(l).to_f64()).collect();

    let objective = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let leaves: Vec<Var<'_, f64>> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let y = f(&leaves)?;
        if y.shape() != shape {
            return Err(Error::Shape("output shape changed under perturbation".into()));
        }
        Ok(y.value().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let mut worst = GradCheck { max_rel_error: 0.0, worst_input: 0 };
    let mut values = inputs.to_vec();
    for (k, g) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(g.len());
        for i in 0..values[k].len() {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + h;
            let up = objective(&values)?;
            values[k].data_mut()[i] = orig - h;
            let down = objective(&values)?;
            values[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let err = relative_error(g, &numeric);
        if err > worst.max_rel_error || err.is_nan() {
            worst = GradCheck { max_rel_error: err, worst_input: k };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_passes() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = check_gradients(&[x], 1e-5, 1, |v| v[0].mul(&v[0])?.mul(&v[0])).unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }
}
