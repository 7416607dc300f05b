//! Dense tensors with tape-based reverse-mode differentiation.

mod check;
mod ops;
mod tape;
mod tensor;

pub use check::{check_gradients, relative_error, GradCheck};
pub use ops::{concat, gelu_value, layer_norm_values, softmax_masked_values, PROB_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn softmax_uniform_logits() {
        let p = softmax_masked_values(&v(&[0.0, 0.0, 0.0]), &[true; 3], false).unwrap();
        for &x in p.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_valid_key_gets_all_mass() {
        let p = softmax_masked_values(&v(&[5.0, 99.0]), &[true, false], false).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_two_logits() {
        let p = softmax_masked_values(&v(&[1.0, 2.0]), &[true, true], false).unwrap();
        assert!((p.data()[0] - 0.26894).abs() < 1e-5);
        assert!((p.data()[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_all_masked() {
        let x = v(&[1.0, 2.0]);
        assert!(matches!(softmax_masked_values(&x, &[false, false], false), Err(Error::AllMaskedRow { row: 0 })));
        let p = softmax_masked_values(&x, &[false, false], true).unwrap();
        assert_eq!(p.data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_block_mask_layout() {
        // two batch elements, two rows each, one mask block per batch element
        let x = Tensor::new(vec![2, 2, 3], vec![0.0; 12]).unwrap();
        let mask = [true, true, false, false, true, true];
        let p = softmax_masked_values(&x, &mask, false).unwrap();
        assert_eq!(&p.data()[0..3], &[0.5, 0.5, 0.0]);
        assert_eq!(&p.data()[3..6], &[0.5, 0.5, 0.0]);
        assert_eq!(&p.data()[6..9], &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm_values(&v(&[1.0, -1.0]), &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
        let y = layer_norm_values(&v(&[4.0, 4.0, 4.0]), &[1.0; 3], &[0.5; 3], LN_EPS).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5]);
        let y = layer_norm_values(&v(&[1.0, 2.0, 3.0]), &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        let expect = [-1.22474, 0.0, 1.22474];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_square() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(v(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let bvals = vec![0.5, -1.0, 2.0, 0.25, -3.0, 1.5];
        let b = tape.leaf(Tensor::new(vec![3, 2], bvals.clone()).unwrap());
        let s = a.matmul(&b).unwrap().sum();
        let g = tape.backward(s).unwrap();
        // ones[2x2] · Bᵀ: each row of dA is the row sums of B
        let row_sums: Vec<f64> = bvals.chunks(2).map(|r| r[0] + r[1]).collect();
        let da = g.get(a).unwrap().data().to_vec();
        assert_eq!(&da[0..3], row_sums.as_slice());
        assert_eq!(&da[3..6], row_sums.as_slice());
    }

    #[test]
    fn inference_tape_refuses_backward() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = x.scale(2.0);
        assert_eq!(y.value().item(), 2.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let z = tape.leaf(Tensor::scalar(2.0));
        let g = tape.backward(x.scale(3.0)).unwrap();
        assert!(g.get(z).is_none());
        assert_eq!(g.get_or_zeros(z).item(), 0.0);
    }

    #[test]
    fn works_in_f32() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f32, 2.0]));
        let p = x.softmax().unwrap();
        let loss = p.select_last(1);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data()[1] > 0.0);
    }

    impl<'t> Var<'t, f32> {
        fn select_last(&self, j: usize) -> Var<'t, f32> {
            let n = self.value().len();
            let mut w = vec![0.0f32; n];
            w[j] = 1.0;
            let wv = self.tape().leaf(Tensor::vector(w));
            self.mul(&wv).unwrap().sum()
        }
    }
}
