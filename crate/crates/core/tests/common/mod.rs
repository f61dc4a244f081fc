//! Central finite-difference gradient checks in f64, shared by the gradient
//! suite and the acceptance run.
#![allow(dead_code)]

use hepalesion::blocks::{build_block, factorized_conv_nxn, residual_wrap, AuxClassifier, BlockConfig};
use hepalesion::nn::{ConvUnit, Dense, Dropout, GlobalAvgPool, Initializer, Layer, Pool, Relu, TrainCtx};
use hepalesion::tensor::{
    add_residual, add_residual_backward, batch_norm, batch_norm_backward, concat_backward, concat_channels, conv2d,
    conv2d_backward, dense, dense_backward, dropout, dropout_backward, global_avg_pool, global_avg_pool_backward,
    pool2d, pool2d_backward, relu, relu_backward, smoothed_cross_entropy, BatchNormParams, ConvSpec, Mode, Padding,
    PoolKind, PoolSpec, RunningStats, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-3;
const COORDS_PER_TENSOR: usize = 10;

pub struct GradCase {
    pub name: String,
    pub rel_error: f64,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        // sum of uniforms, roughly unit normal
        (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0
    })
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let an = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = an.max(nn);
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

fn coords(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        (0..COORDS_PER_TENSOR).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Checks analytic gradients of `f(inputs)·probe` against central differences.
///
/// `forward` maps the inputs to an output tensor; `backward` maps the inputs
/// and the probe (upstream gradient) to one gradient per input.
fn check_fn(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor<f64>>,
    forward: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    backward: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
) -> f64 {
    let out = forward(&inputs);
    let probe = randn(rng, out.shape());
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        forward(xs).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let grads = backward(&inputs, &probe);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut xs = inputs.clone();
    for (i, g) in grads.iter().enumerate() {
        assert_eq!(g.shape(), inputs[i].shape(), "gradient {i} shape");
        for c in coords(rng, g.len()) {
            let orig = xs[i].data()[c];
            xs[i].data_mut()[c] = orig + STEP;
            let plus = objective(&xs);
            xs[i].data_mut()[c] = orig - STEP;
            let minus = objective(&xs);
            xs[i].data_mut()[c] = orig;
            analytic.push(g.data()[c]);
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

/// Checks a stateful layer in training mode: input gradient and every
/// trainable parameter gradient. Dropout masks repeat because each forward
/// uses a fresh context with the same seed.
pub fn check_layer(rng: &mut ChaCha8Rng, layer: &mut dyn Layer<f64>, x: &Tensor<f64>) -> f64 {
    let seed = rng.random::<u64>();
    let out = layer.forward(x, &mut TrainCtx::new(seed)).expect("forward");
    let probe = randn(rng, out.shape());
    let gx = layer.backward(&probe).expect("backward");
    let objective = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| -> f64 {
        let y = layer.forward(x, &mut TrainCtx::new(seed)).expect("forward");
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut xp = x.clone();
    for c in coords(rng, x.len()) {
        let orig = xp.data()[c];
        xp.data_mut()[c] = orig + STEP;
        let plus = objective(layer, &xp);
        xp.data_mut()[c] = orig - STEP;
        let minus = objective(layer, &xp);
        xp.data_mut()[c] = orig;
        analytic.push(gx.data()[c]);
        numeric.push((plus - minus) / (2.0 * STEP));
    }

    let count = {
        let mut ps = Vec::new();
        layer.params(&mut ps);
        ps.len()
    };
    for pi in 0..count {
        let (trainable, grad) = {
            let mut ps = Vec::new();
            layer.params(&mut ps);
            (ps[pi].trainable, ps[pi].grad.clone())
        };
        if !trainable {
            continue;
        }
        for c in coords(rng, grad.len()) {
            let bump = |layer: &mut dyn Layer<f64>, delta: f64| {
                let mut ps = Vec::new();
                layer.params_mut(&mut ps);
                ps[pi].value.data_mut()[c] += delta;
            };
            bump(layer, STEP);
            let plus = objective(layer, x);
            bump(layer, -2.0 * STEP);
            let minus = objective(layer, x);
            bump(layer, STEP);
            analytic.push(grad.data()[c]);
            numeric.push((plus - minus) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Every differentiable tensor kernel over randomized small shapes.
pub fn kernel_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    for _ in 0..8 {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let h = rng.random_range(3..=6);
        let w = rng.random_range(3..=6);
        let kh = rng.random_range(1..=3);
        let kw = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = pick(&mut rng, &[Padding::Valid, Padding::Same]);
        let spec = ConvSpec::new(kh, kw, stride, padding, cin, cout).unwrap();
        let inputs = vec![
            randn(&mut rng, &[n, cin, h, w]),
            randn(&mut rng, &spec.weight_shape()),
            randn(&mut rng, &[cout]),
        ];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| conv2d(&xs[0], &xs[1], Some(&xs[2]), &spec).unwrap(),
            |xs, g| {
                let gr = conv2d_backward(&xs[0], &xs[1], g, &spec).unwrap();
                vec![gr.input, gr.weights, gr.bias]
            },
        );
        cases.push(GradCase {
            name: format!("conv2d {n}x{cin}x{h}x{w} k{kh}x{kw} s{stride} {padding:?}"),
            rel_error: e,
        });
    }

    for _ in 0..6 {
        let kind = pick(&mut rng, &[PoolKind::Max, PoolKind::Avg]);
        let window = rng.random_range(2..=3);
        let stride = rng.random_range(1..=2);
        let padding = pick(&mut rng, &[Padding::Valid, Padding::Same]);
        let (c, h, w) = (rng.random_range(1..=3), rng.random_range(3..=6), rng.random_range(3..=6));
        let spec = PoolSpec::new(kind, window, stride, padding);
        let shape = [2, c, h, w];
        let inputs = vec![randn(&mut rng, &shape)];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| pool2d(&xs[0], &spec).unwrap().0,
            |xs, g| {
                let (_, arg) = pool2d(&xs[0], &spec).unwrap();
                vec![pool2d_backward(xs[0].shape(), g, &spec, &arg).unwrap()]
            },
        );
        cases.push(GradCase {
            name: format!("pool2d {kind:?} w{window} s{stride} {padding:?} {c}x{h}x{w}"),
            rel_error: e,
        });
    }

    for _ in 0..2 {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let inputs = vec![randn(&mut rng, &shape)];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| global_avg_pool(&xs[0]).unwrap(),
            |xs, g| vec![global_avg_pool_backward(xs[0].shape(), g).unwrap()],
        );
        cases.push(GradCase {
            name: format!("global_avg_pool {shape:?}"),
            rel_error: e,
        });
    }

    for _ in 0..3 {
        let (n, d, m) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
        let inputs = vec![randn(&mut rng, &[n, d]), randn(&mut rng, &[d, m]), randn(&mut rng, &[m])];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| dense(&xs[0], &xs[1], &xs[2]).unwrap(),
            |xs, g| {
                let gr = dense_backward(&xs[0], &xs[1], g).unwrap();
                vec![gr.input, gr.weights, gr.bias]
            },
        );
        cases.push(GradCase {
            name: format!("dense {n}x{d} -> {m}"),
            rel_error: e,
        });
    }

    {
        let shape = [2, 3, 4, 4];
        let inputs = vec![randn(&mut rng, &shape)];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| relu(&xs[0]),
            |xs, g| vec![relu_backward(&relu(&xs[0]), g).unwrap()],
        );
        cases.push(GradCase {
            name: "relu 2x3x4x4".into(),
            rel_error: e,
        });
    }

    for shape in [vec![5, 3], vec![3, 2, 3, 2]] {
        let c = shape[1];
        let running = RunningStats::<f64>::new(c);
        let params = BatchNormParams::default();
        let inputs = vec![randn(&mut rng, &shape), randn(&mut rng, &[c]), randn(&mut rng, &[c])];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| batch_norm(&xs[0], &xs[1], &xs[2], &running, &params, Mode::Train).unwrap().0,
            |xs, g| {
                let (_, cache) = batch_norm(&xs[0], &xs[1], &xs[2], &running, &params, Mode::Train).unwrap();
                let (gx, gg, gb) = batch_norm_backward(g, &xs[1], &cache).unwrap();
                vec![gx, gg, gb]
            },
        );
        cases.push(GradCase {
            name: format!("batch_norm {shape:?}"),
            rel_error: e,
        });
    }

    {
        let seed = rng.random::<u64>();
        let inputs = vec![randn(&mut rng, &[4, 6])];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| dropout(&xs[0], 0.4, Mode::Train, seed).unwrap().0,
            |xs, g| {
                let (_, mask) = dropout(&xs[0], 0.4, Mode::Train, seed).unwrap();
                vec![dropout_backward(g, mask.as_ref()).unwrap()]
            },
        );
        cases.push(GradCase {
            name: "dropout 4x6 rate 0.4".into(),
            rel_error: e,
        });
    }

    {
        let inputs = vec![randn(&mut rng, &[2, 1, 3, 3]), randn(&mut rng, &[2, 3, 3, 3])];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| concat_channels(&[&xs[0], &xs[1]]).unwrap(),
            |_, g| concat_backward(g, &[1, 3]).unwrap(),
        );
        cases.push(GradCase {
            name: "concat_channels 1+3".into(),
            rel_error: e,
        });
    }

    {
        let inputs = vec![randn(&mut rng, &[2, 2, 3, 3]), randn(&mut rng, &[2, 2, 3, 3])];
        let e = check_fn(
            &mut rng,
            inputs,
            |xs| add_residual(&xs[0], &xs[1], 0.2).unwrap(),
            |_, g| {
                let (a, b) = add_residual_backward(g, 0.2);
                vec![a, b]
            },
        );
        cases.push(GradCase {
            name: "add_residual scale 0.2".into(),
            rel_error: e,
        });
    }

    for eps in [0.0, 0.1] {
        let n = rng.random_range(1..=5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let logits = randn(&mut rng, &[n, 2]);
        // the loss is a scalar: compare d loss / d logits directly
        let out = smoothed_cross_entropy(&logits, &labels, eps).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let mut x = logits.clone();
        for c in 0..x.len() {
            let orig = x.data()[c];
            x.data_mut()[c] = orig + STEP;
            let plus = smoothed_cross_entropy(&x, &labels, eps).unwrap().loss;
            x.data_mut()[c] = orig - STEP;
            let minus = smoothed_cross_entropy(&x, &labels, eps).unwrap().loss;
            x.data_mut()[c] = orig;
            analytic.push(out.grad.data()[c]);
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        cases.push(GradCase {
            name: format!("smoothed_cross_entropy n{n} eps {eps}"),
            rel_error: rel_error(&analytic, &numeric),
        });
    }
    cases
}

/// Layers and every inception block variant over randomized small inputs.
pub fn block_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(seed ^ 0x5eed);
    let mut cases = Vec::new();
    let mut run = |rng: &mut ChaCha8Rng, name: String, layer: &mut dyn Layer<f64>, shape: &[usize]| {
        let x = randn(rng, shape);
        let e = check_layer(rng, layer, &x);
        cases.push(GradCase { name, rel_error: e });
    };

    {
        let spec = ConvSpec::square(3, 1, Padding::Same, 2, 3).unwrap();
        let mut unit = ConvUnit::<f64>::conv_bn_relu("unit", spec, &mut init).unwrap();
        run(&mut rng, "conv_bn_relu 2->3".into(), &mut unit, &[3, 2, 4, 4]);
        let mut biased = ConvUnit::<f64>::new("biased", spec, false, false, true, &mut init).unwrap();
        run(&mut rng, "conv with bias".into(), &mut biased, &[2, 2, 4, 4]);
        let mut pool = Pool::new(PoolSpec::new(PoolKind::Max, 2, 2, Padding::Valid));
        run(&mut rng, "max pool layer".into(), &mut pool, &[2, 2, 4, 4]);
        let mut gap = GlobalAvgPool::default();
        run(&mut rng, "global avg pool layer".into(), &mut gap, &[2, 3, 3, 3]);
        let mut fc = Dense::<f64>::new("fc", 5, 4, 1.0, &mut init);
        run(&mut rng, "dense layer".into(), &mut fc, &[3, 5]);
        let mut r = Relu::default();
        run(&mut rng, "relu layer".into(), &mut r, &[3, 5]);
        let mut d = Dropout::new(0.4).unwrap();
        run(&mut rng, "dropout layer".into(), &mut d, &[3, 8]);
    }

    let m = 0.25;
    let variants = [
        ("module_a", BlockConfig::module_a(m)),
        ("factorized n=3", BlockConfig::factorized(3, m)),
        ("factorized n=5", BlockConfig::factorized(5, m)),
        ("expanded_filter_bank", BlockConfig::expanded_filter_bank(m)),
        ("grid_reduction", BlockConfig::grid_reduction(m)),
    ];
    for (name, cfg) in variants {
        let c = rng.random_range(2..=5);
        let h = rng.random_range(4..=7);
        let w = rng.random_range(4..=7);
        let input = [c, h, w];
        let mut block = build_block::<f64>(name, &cfg, &input, &mut init).unwrap();
        run(&mut rng, format!("{name} plain {c}x{h}x{w}"), block.as_mut(), &[2, c, h, w]);
        if name != "grid_reduction" {
            let res_cfg = cfg.clone().residual(0.2);
            let mut block = build_block::<f64>(name, &res_cfg, &input, &mut init).unwrap();
            run(&mut rng, format!("{name} residual {c}x{h}x{w}"), block.as_mut(), &[2, c, h, w]);
        }
    }

    {
        let input = [3, 5, 5];
        let body = factorized_conv_nxn::<f64>("fact", 3, 3, 3, &mut init).unwrap();
        let mut res = residual_wrap("wrap", Box::new(body), &input, 0.2, &mut init).unwrap();
        run(&mut rng, "factorized nxn residual identity".into(), &mut res, &[2, 3, 5, 5]);
        let mut aux = AuxClassifier::<f64>::new("aux", &[4, 4, 4], 3, 2, &mut init).unwrap();
        run(&mut rng, "auxiliary classifier".into(), &mut aux, &[2, 4, 4, 4]);
    }
    cases
}

pub fn all_cases(seed: u64) -> Vec<GradCase> {
    let mut cases = kernel_cases(seed);
    cases.extend(block_cases(seed.wrapping_add(1)));
    cases
}
