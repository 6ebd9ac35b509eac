// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters enter as leaf
//! tensors flagged with [`Tensor::with_grad`]; after [`Graph::backward`] each
//! of them carries `d loss / d param` in its grad slot. Ops never broadcast
//! except [`Graph::add_bias`], which adds a vector over all leading
//! dimensions.
//!
//! ```
//! use aulab::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::scalar(3.0).unwrap().with_grad());
//! let sq = g.sum_squares(w).unwrap();
//! g.backward(sq).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &[6.0]);
//! ```

mod graph;
mod optim;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

/// Layer-norm epsilon used by the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let a = g.leaf(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = g.leaf(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let left = g.matmul(i, a).unwrap();
        let right = g.matmul(a, i).unwrap();
        assert_eq!(g.value(left).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(right).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.leaf(mat(&[vec![1.0, 2.0]]));
        let c = g.leaf(mat(&[vec![3.0], vec![4.0]]));
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1]);
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let c = 0.37;
        let x = g.leaf(mat(&[
            vec![0.0, 0.0, 0.0],
            vec![c, c + 2f64.ln(), -1e9],
            vec![1000.0, 0.0, -1000.0],
        ]));
        let y = g.softmax_rows(x).unwrap();
        let y = g.value(y).data();
        for v in &y[0..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((y[3] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y[4] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(y[5], 0.0);
        assert_eq!(y[6], 1.0);
        assert_eq!(y[7], 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![2.5, 2.5, 2.5], vec![1.0, -1.0, 0.0]]));
        let one = g.leaf(Tensor::full(vec![3], 1.0));
        let zero = g.leaf(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, one, zero, LAYER_NORM_EPS).unwrap();
        let y = g.value(y).data();
        assert!(y[..3].iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![1.0, -1.0]]));
        let one = g.leaf(Tensor::full(vec![2], 1.0));
        let zero = g.leaf(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, one, zero, 1e-14).unwrap();
        let y = g.value(y).data();
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);

        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![4.0, -7.0, 0.5, 9.0]]));
        let gain = g.leaf(Tensor::zeros(vec![4]));
        let bias = g.leaf(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![3.0, -1.0, 4.0, 1.0, -5.0, 9.0]]));
        let one = g.leaf(Tensor::full(vec![6], 1.0));
        let zero = g.leaf(Tensor::zeros(vec![6]));
        let y = g.layer_norm(x, one, zero, LAYER_NORM_EPS).unwrap();
        let y = g.value(y).data();
        let mean = y.iter().sum::<f64>() / 6.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-9);
        // eps = 1e-5 against variance ~19.6 shrinks the unit variance by ~5e-7
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[vec![0.3; 4]]));
        let l = g.cross_entropy_logits(x, &[2]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let x = g.leaf(mat(&[vec![0.0, 50.0, 0.0]]));
        let l = g.cross_entropy_logits(x, &[1]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-20);

        let x = g.leaf(mat(&[vec![1.0, 0.0]]));
        let l = g.cross_entropy_logits(x, &[0]).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.313262).abs() < 1e-6);

        let x = g.leaf(mat(&[vec![1.0, 0.0]]));
        assert!(matches!(g.cross_entropy_logits(x, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_closed_forms() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(3.0).unwrap().with_grad());
        let w2 = g.mul(w, w).unwrap();
        g.backward(w2).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(0.0).unwrap().with_grad());
        let s = g.sigmoid(w).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(vec![2]).with_grad());
        let s = g.sigmoid(w).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_parameter_gets_exact_zero_grad() {
        let mut g = Graph::new();
        let used = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let unused = g.leaf(Tensor::vector(vec![5.0, 6.0]).unwrap().with_grad());
        let _noise = g.scale(unused, 3.0).unwrap();
        let l = g.sum_squares(used).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(used).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn graph_is_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 2]).with_grad());
        let b = g.matmul(a, a).unwrap();
        let c = g.relu(b).unwrap();
        let _ = g.sum(c).unwrap();
        for (id, ins) in g.edges().iter().enumerate() {
            assert!(ins.iter().all(|&i| i < id));
        }
    }
}
