#![allow(dead_code)]

use dendrite_core::nn::{Shape, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values at least `gap` apart in magnitude from zero, random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, gap: f64) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Distinct values (pairwise gaps ≥ 1e-3) in random order, so pooling argmaxes are stable.
pub fn distinct_values(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let n = shape.numel();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    for v in &mut vals {
        *v += rng.gen_range(0.0..0.004);
    }
    Tensor::from_vec(shape, vals).unwrap()
}

fn eval(build: &Builder, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    if tape.shape(out).numel() == 1 && proj.numel() == 1 {
        return tape.value(out).item().unwrap() * proj.data()[0];
    }
    tape.value(out)
        .data()
        .iter()
        .zip(proj.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Norm-wise relative error between analytic and central-difference gradients of
/// `Σ proj ⊙ build(inputs)` with respect to every input, worst over inputs.
pub fn gradient_check(
    build: &Builder,
    inputs: &[Tensor<f64>],
    rng: &mut ChaCha8Rng,
    step: f64,
) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = build(&mut tape, &vars);
    let proj = rand_tensor(rng, tape.shape(out));
    let loss = tape.weighted_sum(out, &proj).unwrap();
    tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("gradient for input");
        let mut numeric = vec![0.0; inputs[k].numel()];
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            numeric[i] = (eval(build, &plus, &proj) - eval(build, &minus, &proj)) / (2.0 * step);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = (na + nn).max(1e-12);
        worst = worst.max(diff / denom);
    }
    worst
}

/// One named differentiable operation with its random-input generator.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    pub build: Box<Builder>,
}

pub fn gradient_cases() -> Vec<GradCase> {
    use dendrite_core::nn::Padding;
    let s = |n, c, h, w| Shape::new(n, c, h, w);
    vec![
        GradCase {
            name: "conv2d 3x3 same stride 1",
            inputs: Box::new(move |r| {
                vec![
                    rand_tensor(r, s(1, 4, 8, 8)),
                    rand_tensor(r, s(3, 4, 3, 3)),
                    rand_tensor(r, s(1, 3, 1, 1)),
                ]
            }),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same).unwrap()),
        },
        GradCase {
            name: "conv2d 3x3 same stride 2",
            inputs: Box::new(move |r| {
                vec![
                    rand_tensor(r, s(1, 2, 8, 8)),
                    rand_tensor(r, s(2, 2, 3, 3)),
                    rand_tensor(r, s(1, 2, 1, 1)),
                ]
            }),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same).unwrap()),
        },
        GradCase {
            name: "conv2d 1x1",
            inputs: Box::new(move |r| {
                vec![
                    rand_tensor(r, s(1, 4, 8, 8)),
                    rand_tensor(r, s(2, 4, 1, 1)),
                    rand_tensor(r, s(1, 2, 1, 1)),
                ]
            }),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same).unwrap()),
        },
        GradCase {
            name: "conv2d 3x3 valid",
            inputs: Box::new(move |r| {
                vec![rand_tensor(r, s(1, 2, 6, 6)), rand_tensor(r, s(2, 2, 3, 3))]
            }),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, Padding::Valid).unwrap()),
        },
        GradCase {
            name: "relu",
            inputs: Box::new(move |r| vec![away_from_zero(r, s(1, 4, 8, 8), 1e-3)]),
            build: Box::new(|t, v| t.relu(v[0])),
        },
        GradCase {
            name: "max_pool_2x2",
            inputs: Box::new(move |r| vec![distinct_values(r, s(1, 4, 8, 8))]),
            build: Box::new(|t, v| t.max_pool_2x2(v[0]).unwrap()),
        },
        GradCase {
            name: "upsample_2x_nearest",
            inputs: Box::new(move |r| vec![rand_tensor(r, s(1, 4, 4, 4))]),
            build: Box::new(|t, v| t.upsample_2x_nearest(v[0])),
        },
        GradCase {
            name: "group_norm",
            inputs: Box::new(move |r| {
                vec![
                    rand_tensor(r, s(1, 4, 8, 8)),
                    rand_tensor(r, s(1, 4, 1, 1)),
                    rand_tensor(r, s(1, 4, 1, 1)),
                ]
            }),
            build: Box::new(|t, v| t.group_norm(v[0], 2, v[1], v[2], 1e-5).unwrap()),
        },
        GradCase {
            name: "concat_channels",
            inputs: Box::new(move |r| {
                vec![rand_tensor(r, s(1, 2, 8, 8)), rand_tensor(r, s(1, 2, 8, 8))]
            }),
            build: Box::new(|t, v| t.concat_channels(v[0], v[1]).unwrap()),
        },
        GradCase {
            name: "residual_add",
            inputs: Box::new(move |r| {
                vec![rand_tensor(r, s(1, 4, 8, 8)), rand_tensor(r, s(1, 4, 8, 8))]
            }),
            build: Box::new(|t, v| t.residual_add(v[0], v[1]).unwrap()),
        },
        GradCase {
            name: "dense",
            inputs: Box::new(move |r| {
                vec![
                    rand_tensor(r, s(2, 2, 4, 4)),
                    rand_tensor(r, s(1, 1, 3, 32)),
                    rand_tensor(r, s(1, 3, 1, 1)),
                ]
            }),
            build: Box::new(|t, v| t.dense(v[0], v[1], v[2]).unwrap()),
        },
        GradCase {
            name: "l2_loss",
            inputs: Box::new(move |r| {
                vec![rand_tensor(r, s(1, 1, 8, 8)), rand_tensor(r, s(1, 1, 8, 8))]
            }),
            build: Box::new(|t, v| t.l2_loss(v[0], v[1], 0.5).unwrap()),
        },
        GradCase {
            name: "l2_loss_per_sample",
            inputs: Box::new(move |r| {
                vec![rand_tensor(r, s(3, 1, 4, 4)), rand_tensor(r, s(3, 1, 4, 4))]
            }),
            build: Box::new(|t, v| t.l2_loss_per_sample(v[0], v[1], 0.5).unwrap()),
        },
        GradCase {
            name: "bce_loss",
            inputs: Box::new(move |r| vec![Tensor::uniform(s(4, 1, 1, 1), -4.0, 4.0, r)]),
            build: Box::new(|t, v| t.bce_loss(v[0], &[1, 0, 1, 0]).unwrap()),
        },
        GradCase {
            name: "bottleneck chain",
            inputs: Box::new(move |r| {
                vec![
                    rand_tensor(r, s(1, 4, 8, 8)),
                    rand_tensor(r, s(4, 4, 3, 3)),
                    Tensor::uniform(s(1, 4, 1, 1), 0.5, 1.5, r),
                    rand_tensor(r, s(1, 4, 1, 1)),
                ]
            }),
            build: Box::new(|t, v| {
                let g = t.group_norm(v[0], 2, v[2], v[3], 1e-5).unwrap();
                let c = t.conv2d(g, v[1], None, 1, Padding::Same).unwrap();
                let r = t.residual_add(v[0], c).unwrap();
                let u = t.upsample_2x_nearest(r);
                t.max_pool_2x2(u).unwrap()
            }),
        },
    ]
}
