// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference oracle for autodiff primitives. Independent of
//! the backward implementation: it only ever evaluates forward values.

use aulab::autodiff::{Graph, Tensor, Var};
use aulab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

pub type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

/// Reduces an op output to a scalar through a fixed random projection so
/// the whole Jacobian is exercised.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let v = g.value(out);
    if v.len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rt = g.constant(Tensor::new(v.shape().to_vec(), r)?);
    let prod = g.mul(out, rt)?;
    g.sum(prod)
}

fn loss_value(case: &Case, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars).expect("forward");
    let l = project(&mut g, out, 99).expect("projection");
    g.value(l).item().unwrap()
}

/// Returns the worst relative error between backward and central
/// differences over every input element.
pub fn max_rel_error(case: &Case) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = (case.build)(&mut g, &vars).expect("forward");
    let l = project(&mut g, out, 99).expect("projection");
    g.backward(l).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap().to_vec();
        for i in 0..case.inputs[k].len() {
            let mut plus = case.inputs.clone();
            let mut minus = case.inputs.clone();
            plus[k].data_mut()[i] += FD_STEP;
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (loss_value(case, &plus) - loss_value(case, &minus)) / (2.0 * FD_STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    // keep away from the relu kink so +-h never straddles it
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-1.5..1.5);
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub const PRIMITIVES: [&str; 23] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "mul_const",
    "relu",
    "sigmoid",
    "softplus",
    "softmax_rows",
    "layer_norm",
    "embedding",
    "gather_rows",
    "causal_attention",
    "causal_attention_masked",
    "cross_entropy",
    "pick_log_prob",
    "segment_sum",
    "bce_with_logits",
    "sum",
    "mean",
    "sum_squares",
];

/// Random small case (<= 64 elements per input) for the `i`-th primitive.
pub fn random_case(i: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = PRIMITIVES[i % PRIMITIVES.len()];
    let m = rng.random_range(1..=4usize);
    let n = rng.random_range(2..=5usize);
    let k = rng.random_range(1..=4usize);
    let t = |rng: &mut ChaCha8Rng, s: Vec<usize>| rand_tensor(rng, s);
    match name {
        "matmul" => Case {
            name,
            inputs: vec![t(&mut rng, vec![m, k]), t(&mut rng, vec![k, n])],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        },
        "add" | "sub" | "mul" => {
            let inputs = vec![t(&mut rng, vec![m, n]), t(&mut rng, vec![m, n])];
            let build: Builder = match name {
                "add" => Box::new(|g, v| g.add(v[0], v[1])),
                "sub" => Box::new(|g, v| g.sub(v[0], v[1])),
                _ => Box::new(|g, v| g.mul(v[0], v[1])),
            };
            Case { name, inputs, build }
        }
        "add_bias" => Case {
            name,
            inputs: vec![t(&mut rng, vec![m, n]), t(&mut rng, vec![n])],
            build: Box::new(|g, v| g.add_bias(v[0], v[1])),
        },
        "scale" => {
            let c: f64 = rng.random_range(-2.0..2.0);
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m, n])],
                build: Box::new(move |g, v| g.scale(v[0], c)),
            }
        }
        "mul_const" => {
            let mask: Vec<f64> = (0..m * n)
                .map(|_| if rng.random_bool(0.7) { 1.0 / 0.7 } else { 0.0 })
                .collect();
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m, n])],
                build: Box::new(move |g, v| g.mul_const(v[0], mask.clone())),
            }
        }
        "relu" | "sigmoid" | "softplus" | "softmax_rows" => {
            let build: Builder = match name {
                "relu" => Box::new(|g, v| g.relu(v[0])),
                "sigmoid" => Box::new(|g, v| g.sigmoid(v[0])),
                "softplus" => Box::new(|g, v| g.softplus(v[0])),
                _ => Box::new(|g, v| g.softmax_rows(v[0])),
            };
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m, n])],
                build,
            }
        }
        "layer_norm" => Case {
            name,
            inputs: vec![t(&mut rng, vec![m, n]), t(&mut rng, vec![n]), t(&mut rng, vec![n])],
            build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        },
        "embedding" => {
            let vocab = rng.random_range(2..=6usize);
            let ids: Vec<usize> = (0..m + 2).map(|_| rng.random_range(0..vocab)).collect();
            Case {
                name,
                inputs: vec![t(&mut rng, vec![vocab, n])],
                build: Box::new(move |g, v| g.embedding(v[0], &ids)),
            }
        }
        "gather_rows" => {
            let rows: Vec<usize> = (0..3).map(|_| rng.random_range(0..m)).collect();
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m, n])],
                build: Box::new(move |g, v| g.gather_rows(v[0], &rows)),
            }
        }
        "causal_attention" | "causal_attention_masked" => {
            let seq_len = rng.random_range(1..=3usize);
            let n_seq = rng.random_range(1..=2usize);
            let heads = rng.random_range(1..=2usize);
            let d = heads * rng.random_range(1..=3usize);
            let rows = seq_len * n_seq;
            let mask = (name == "causal_attention_masked").then(|| {
                (0..n_seq * heads * seq_len * seq_len)
                    .map(|_| if rng.random_bool(0.6) { 1.0 / 0.6 } else { 0.0 })
                    .collect::<Vec<f64>>()
            });
            Case {
                name,
                inputs: vec![
                    t(&mut rng, vec![rows, d]),
                    t(&mut rng, vec![rows, d]),
                    t(&mut rng, vec![rows, d]),
                ],
                build: Box::new(move |g, v| g.causal_attention(v[0], v[1], v[2], seq_len, heads, mask.clone())),
            }
        }
        "cross_entropy" => {
            let mut targets: Vec<Option<usize>> = (0..m)
                .map(|_| rng.random_bool(0.75).then(|| rng.random_range(0..n)))
                .collect();
            targets[0] = Some(rng.random_range(0..n));
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m, n])],
                build: Box::new(move |g, v| g.masked_cross_entropy(v[0], &targets)),
            }
        }
        "pick_log_prob" => {
            let picks: Vec<(usize, usize)> = (0..4)
                .map(|_| (rng.random_range(0..m), rng.random_range(0..n)))
                .collect();
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m, n])],
                build: Box::new(move |g, v| g.pick_log_prob(v[0], &picks)),
            }
        }
        "segment_sum" => {
            let len = m * n;
            let segs: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
            Case {
                name,
                inputs: vec![t(&mut rng, vec![len])],
                build: Box::new(move |g, v| g.segment_sum(v[0], &segs, 3)),
            }
        }
        "bce_with_logits" => {
            let ys: Vec<f64> = (0..m * n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m * n])],
                build: Box::new(move |g, v| g.bce_with_logits(v[0], &ys)),
            }
        }
        "sum" | "mean" | "sum_squares" => {
            let build: Builder = match name {
                "sum" => Box::new(|g, v| g.sum(v[0])),
                "mean" => Box::new(|g, v| g.mean(v[0])),
                _ => Box::new(|g, v| g.sum_squares(v[0])),
            };
            Case {
                name,
                inputs: vec![t(&mut rng, vec![m, n])],
                build,
            }
        }
        other => unreachable!("unknown primitive {other}"),
    }
}
