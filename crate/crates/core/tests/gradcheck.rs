// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use aulab::autodiff::{Graph, Tensor};
use common::gradcheck::{max_rel_error, random_case, Case, PRIMITIVES};

#[test]
fn every_primitive_matches_finite_differences() {
    for i in 0..PRIMITIVES.len() * 4 {
        let case = random_case(i, 1000 + i as u64);
        let err = max_rel_error(&case);
        assert!(err < 1e-4, "{} (case {i}): rel err {err:e}", case.name);
    }
}

#[test]
fn composite_chain_matches_finite_differences() {
    // embedding -> layer norm -> attention -> mlp -> cross-entropy
    let case = Case {
        name: "block",
        inputs: vec![
            Tensor::new(vec![5, 4], (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect()).unwrap(),
            Tensor::new(vec![4, 4], (0..16).map(|i| ((i * 5 % 9) as f64 - 4.0) / 5.0).collect()).unwrap(),
            Tensor::new(vec![4, 5], (0..20).map(|i| ((i * 3 % 7) as f64 - 3.0) / 6.0).collect()).unwrap(),
        ],
        build: Box::new(|g: &mut Graph, v| {
            let x = g.embedding(v[0], &[0, 3, 1, 4, 2, 2])?;
            let one = g.constant(Tensor::full(vec![4], 1.0));
            let zero = g.constant(Tensor::zeros(vec![4]));
            let h = g.layer_norm(x, one, zero, 1e-5)?;
            let q = g.matmul(h, v[1])?;
            let a = g.causal_attention(q, h, h, 3, 2, None)?;
            let r = g.add(a, x)?;
            let s = g.sigmoid(r)?;
            let logits = g.matmul(s, v[2])?;
            g.masked_cross_entropy(logits, &[Some(1), None, Some(4), Some(0), Some(2), None])
        }),
    };
    let err = max_rel_error(&case);
    assert!(err < 1e-4, "rel err {err:e}");
}
