//! Central finite-difference gradient checking, plus a fixed case for every
//! differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Builds a scalar output from leaf variables holding the inputs.
pub type Build<T> = dyn Fn(&mut Graph<T>, &[Var]) -> Var;

/// Gradients of `build` with respect to every input, by reverse mode.
pub fn analytic_grads<T: Scalar>(inputs: &[Tensor<T>], build: &dyn Fn(&mut Graph<T>, &[Var]) -> Var) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let mut grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Central differences `(f(x+h) − f(x−h)) / (x+h − (x−h))`, element by
/// element, with the step measured after rounding to `T`.
pub fn numeric_grads<T: Scalar>(inputs: &[Tensor<T>], build: &dyn Fn(&mut Graph<T>, &[Var]) -> Var, h: f64) -> Vec<Vec<f64>> {
    let eval = |perturbed: &[Tensor<T>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars);
        g.value(out).item().to_f64_lossy()
    };
    let mut work = inputs.to_vec();
    inputs
        .iter()
        .enumerate()
        .map(|(i, input)| {
            (0..input.numel())
                .map(|j| {
                    let x = input.data()[j];
                    let xf = x.to_f64_lossy();
                    work[i].data_mut()[j] = T::from_f64_lossy(xf + h);
                    let hi = work[i].data()[j].to_f64_lossy();
                    let f_plus = eval(&work);
                    work[i].data_mut()[j] = T::from_f64_lossy(xf - h);
                    let lo = work[i].data()[j].to_f64_lossy();
                    let f_minus = eval(&work);
                    work[i].data_mut()[j] = x;
                    (f_plus - f_minus) / (hi - lo)
                })
                .collect()
        })
        .collect()
}

/// `max |a − n| / max(|a|, |n|, floor)` over paired elements.
pub fn max_rel_diff(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients over every element of every input.
pub fn max_rel_error<T: Scalar>(inputs: &[Tensor<T>], build: &dyn Fn(&mut Graph<T>, &[Var]) -> Var, h: f64, floor: f64) -> Result<f64> {
    let analytic = analytic_grads(inputs, build)?;
    let numeric = numeric_grads(inputs, build, h);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            let a: Vec<f64> = a.data().iter().map(|v| v.to_f64_lossy()).collect();
            max_rel_diff(&a, n, floor)
        })
        .fold(0.0, f64::max))
}

pub fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-scale..scale)))
}

/// Values at least `gap` away from each other and from zero, so that
/// ReLU and max-pool kinks are never crossed by the perturbation.
pub fn spread<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap)
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape.to_vec(), vals.into_iter().map(T::from_f64_lossy).collect()).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
pub fn probe<T: Scalar>(g: &mut Graph<T>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = random(&mut rng, &shape, 1.0);
    g.weighted_sum(y, &w).unwrap()
}

/// One op under test with its inputs.
pub struct OpCase<T: Scalar> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<T>>,
    pub build: Box<Build<T>>,
}

/// A small fixed case for every differentiable op, plus a chain of all of them.
pub fn op_cases<T: Scalar>() -> Vec<OpCase<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    vec![
        OpCase {
            name: "conv2d 3x3 pad1 + bias",
            inputs: vec![
                random(&mut rng, &[2, 2, 5, 4], 1.0),
                random(&mut rng, &[3, 2, 3, 3], 1.0),
                random(&mut rng, &[3], 1.0),
            ],
            build: Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::SAME3).unwrap();
                probe(g, y, 1)
            }),
        },
        OpCase {
            name: "conv2d 3x3 stride2",
            inputs: vec![random(&mut rng, &[1, 2, 7, 6], 1.0), random(&mut rng, &[2, 2, 3, 3], 1.0)],
            build: Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], None, Conv2dSpec { stride: 2, padding: 1 }).unwrap();
                probe(g, y, 2)
            }),
        },
        OpCase {
            name: "conv2d 1x1",
            inputs: vec![
                random(&mut rng, &[2, 3, 3, 3], 1.0),
                random(&mut rng, &[2, 3, 1, 1], 1.0),
                random(&mut rng, &[2], 1.0),
            ],
            build: Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::POINTWISE).unwrap();
                probe(g, y, 3)
            }),
        },
        OpCase {
            name: "relu",
            inputs: vec![spread(&mut rng, &[1, 2, 3, 3], 0.1)],
            build: Box::new(|g, v| {
                let y = g.relu(v[0]);
                probe(g, y, 4)
            }),
        },
        OpCase {
            name: "max_pool2",
            inputs: vec![spread(&mut rng, &[2, 2, 4, 5], 0.1)],
            build: Box::new(|g, v| {
                let y = g.max_pool2(v[0]).unwrap();
                probe(g, y, 5)
            }),
        },
        OpCase {
            name: "upsample2",
            inputs: vec![random(&mut rng, &[2, 2, 2, 3], 1.0)],
            build: Box::new(|g, v| {
                let y = g.upsample2(v[0]).unwrap();
                probe(g, y, 6)
            }),
        },
        OpCase {
            name: "concat_channels",
            inputs: vec![random(&mut rng, &[2, 1, 2, 2], 1.0), random(&mut rng, &[2, 3, 2, 2], 1.0)],
            build: Box::new(|g, v| {
                let y = g.concat_channels(v[0], v[1]).unwrap();
                probe(g, y, 7)
            }),
        },
        OpCase {
            name: "group_norm groups=1",
            inputs: vec![
                random(&mut rng, &[2, 3, 3, 3], 2.0),
                random(&mut rng, &[3], 1.5),
                random(&mut rng, &[3], 1.0),
            ],
            build: Box::new(|g, v| {
                let y = g.group_norm(v[0], v[1], v[2], 1).unwrap();
                probe(g, y, 8)
            }),
        },
        OpCase {
            name: "group_norm groups=2",
            inputs: vec![
                random(&mut rng, &[1, 4, 2, 3], 2.0),
                random(&mut rng, &[4], 1.5),
                random(&mut rng, &[4], 1.0),
            ],
            build: Box::new(|g, v| {
                let y = g.group_norm(v[0], v[1], v[2], 2).unwrap();
                probe(g, y, 9)
            }),
        },
        OpCase {
            name: "cross_entropy",
            inputs: vec![random(&mut rng, &[2, 2, 3, 3], 3.0)],
            build: Box::new(|g, v| {
                let target: Vec<u8> = (0..18).map(|i| ((i * 5) % 3 == 0) as u8).collect();
                g.cross_entropy(v[0], &target).unwrap()
            }),
        },
        OpCase {
            name: "conv-norm-relu-pool-up-concat-ce chain",
            inputs: vec![
                random(&mut rng, &[2, 2, 4, 4], 1.0),
                random(&mut rng, &[3, 2, 3, 3], 1.0),
                random(&mut rng, &[3], 0.5),
                random(&mut rng, &[3], 1.0),
                random(&mut rng, &[3], 0.5),
                random(&mut rng, &[2, 5, 1, 1], 1.0),
            ],
            build: Box::new(|g, v| {
                let c = g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::SAME3).unwrap();
                let n = g.group_norm(c, v[3], v[4], 1).unwrap();
                let r = g.relu(n);
                let p = g.max_pool2(r).unwrap();
                let u = g.upsample2(p).unwrap();
                let cat = g.concat_channels(u, v[0]).unwrap();
                let logits = g.conv2d(cat, v[5], None, Conv2dSpec::POINTWISE).unwrap();
                let target: Vec<u8> = (0..32).map(|i| (i % 3 == 1) as u8).collect();
                g.cross_entropy(logits, &target).unwrap()
            }),
        },
    ]
}
