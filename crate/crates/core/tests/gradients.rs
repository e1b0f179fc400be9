//! Finite-difference verification of every differentiable operation and
//! layer, in f64, across multiple seeds.

use gaze_core::model::{build_model, ModelConfig};
use gaze_core::nn;
use gaze_core::tensor::{grad_check, no_grad, RngStream, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

/// Checks d(loss)/d(param) for a parameter owned by a module: analytic
/// gradient from one backward pass against central differences obtained by
/// perturbing the parameter in place.
fn param_grad_check<F>(forward: F, param: &Tensor<f64>, eps: f64) -> f64
where
    F: Fn() -> Tensor<f64>,
{
    param.zero_grad();
    let loss = forward();
    assert_eq!(loss.numel(), 1);
    loss.backward().unwrap();
    let analytic = param.grad().expect("parameter missing from graph");

    let base = param.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + eps;
        param.copy_from_slice(&probe);
        let p = no_grad(&forward).item();
        probe[i] = base[i] - eps;
        param.copy_from_slice(&probe);
        let m = no_grad(&forward).item();
        param.copy_from_slice(&base);
        let fd = (p - m) / (2.0 * eps);
        let denom = analytic[i].abs().max(fd.abs()).max(1.0);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    param.zero_grad();
    worst
}

fn check<F>(name: &str, seed: u64, x: &Tensor<f64>, f: F)
where
    F: Fn(&Tensor<f64>) -> gaze_core::tensor::Result<Tensor<f64>>,
{
    let err = grad_check(f, x, EPS).unwrap();
    assert!(err < TOL, "{name} seed {seed}: max relative error {err}");
}

#[test]
fn gradcheck_polynomial_is_near_exact() {
    let x = Tensor::scalar(3.0f64);
    let err = grad_check(|x| x.mul(x), &x, EPS).unwrap();
    assert!(err < 1e-8, "x^2 error {err}");
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let x = Tensor::scalar(1.0f64);
    assert!(grad_check(|x| x.mul(x), &x, 0.0).is_err());
    assert!(grad_check(|x| x.mul(x), &x, -1.0).is_err());
}

#[test]
fn gradcheck_elementwise_ops() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(seed);
        let x = rng.uniform_tensor::<f64>(vec![3, 4], -2.0, 2.0);
        let y = rng.uniform_tensor::<f64>(vec![3, 4], 0.5, 2.5);
        let bias = rng.uniform_tensor::<f64>(vec![4], -1.0, 1.0);

        check("add", seed, &x, |x| x.add(&y)?.mul(&y)?.sum_all());
        check("add-broadcast", seed, &x, |x| x.add(&bias)?.mul(&y)?.sum_all());
        check("sub", seed, &x, |x| x.sub(&y)?.mul(&x)?.sum_all());
        check("mul", seed, &x, |x| x.mul(&y)?.sum_all());
        check("div", seed, &x, |x| x.div(&y)?.sum_all());
        check("div-rhs", seed, &y, |y| x.div(y)?.sum_all());
        check("gelu", seed, &x, |x| x.gelu()?.sum_all());
        check("exp", seed, &x, |x| x.exp()?.sum_all());
        check("sqrt", seed, &y, |y| y.sqrt()?.sum_all());
        check("mul_scalar", seed, &x, |x| x.mul_scalar(1.7)?.sum_all());
        check("add_scalar", seed, &x, |x| x.add_scalar(-0.3)?.mul(&x)?.sum_all());
        check("neg", seed, &x, |x| x.neg()?.mul(&y)?.sum_all());

        // keep relu inputs away from the kink
        let off = rng.uniform_tensor::<f64>(vec![10], 0.1, 1.0);
        let signs = Tensor::from_vec(
            vec![10],
            (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap();
        let shifted = off.mul(&signs).unwrap();
        check("relu", seed, &shifted, |x| x.relu()?.mul(&off)?.sum_all());
    }
}

#[test]
fn gradcheck_softmax_and_reductions() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(100 + seed);
        let x = rng.uniform_tensor::<f64>(vec![2, 3, 4], -2.0, 2.0);
        let w = rng.uniform_tensor::<f64>(vec![2, 3, 4], -1.0, 1.0);
        for axis in 0..3 {
            check("softmax", seed, &x, |x| x.softmax(axis)?.mul(&w)?.sum_all());
        }
        check("sum", seed, &x, |x| x.reduce_sum(&[1], false)?.mul(&x.reduce_sum(&[1], false)?)?.sum_all());
        check("mean", seed, &x, |x| x.reduce_mean(&[0, 2], false)?.mul_scalar(2.0)?.sum_all());
        check("mean-keepdims", seed, &x, |x| {
            x.reduce_mean(&[2], true)?.mul(&x.reduce_mean(&[2], true)?)?.sum_all()
        });
        // max needs distinct values so the argmax is stable under eps
        let distinct = Tensor::from_vec(
            vec![2, 5],
            (0..10).map(|i| i as f64 * 0.37 - 2.0).collect(),
        )
        .unwrap();
        check("max", seed, &distinct, |x| x.reduce_max(&[1], false)?.sum_all());
    }
}

#[test]
fn gradcheck_matmul_family() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(200 + seed);
        let a = rng.uniform_tensor::<f64>(vec![3, 4], -1.0, 1.0);
        let b = rng.uniform_tensor::<f64>(vec![4, 2], -1.0, 1.0);
        check("matmul-lhs", seed, &a, |a| a.matmul(&b)?.sum_all());
        check("matmul-rhs", seed, &b, |b| a.matmul(b)?.mul(&a.matmul(b)?)?.sum_all());

        let ab = rng.uniform_tensor::<f64>(vec![2, 2, 3, 4], -1.0, 1.0);
        let bb = rng.uniform_tensor::<f64>(vec![2, 2, 4, 2], -1.0, 1.0);
        check("bmm-lhs", seed, &ab, |a| a.matmul(&bb)?.sum_all());
        check("bmm-rhs", seed, &bb, |b| ab.matmul(b)?.mul_scalar(0.5)?.sum_all());
    }
}

#[test]
fn gradcheck_shape_ops() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(300 + seed);
        let x = rng.uniform_tensor::<f64>(vec![2, 3, 4], -1.0, 1.0);
        let w = rng.uniform_tensor::<f64>(vec![4, 3, 2], -1.0, 1.0);
        check("permute", seed, &x, |x| x.permute(&[2, 1, 0])?.mul(&w)?.sum_all());
        check("reshape", seed, &x, |x| x.reshape(vec![6, 4])?.mul(&x.reshape(vec![6, 4])?)?.sum_all());
        check("narrow", seed, &x, |x| x.narrow(1, 1, 2)?.mul_scalar(3.0)?.mul(&x.narrow(1, 0, 2)?)?.sum_all());
        check("pad", seed, &x, |x| {
            let p = x.pad_zero(2, 1, 2)?;
            p.mul(&p)?.sum_all()
        });
        check("broadcast_to", seed, &x.narrow(0, 0, 1).unwrap(), |x| {
            x.broadcast_to(&[2, 3, 4])?.mul(&w.permute(&[2, 1, 0])?)?.sum_all()
        });
        let parts = rng.uniform_tensor::<f64>(vec![2, 2, 4], -1.0, 1.0);
        check("concat", seed, &x, |x| {
            let c = Tensor::concat(&[x.clone(), parts.clone()], 1)?;
            c.mul(&c)?.sum_all()
        });
    }
}

#[test]
fn gradcheck_conv_paths() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(400 + seed);
        // ungrouped, stride + padding
        let x = rng.uniform_tensor::<f64>(vec![2, 2, 5, 6], -1.0, 1.0);
        let k = rng.uniform_tensor::<f64>(vec![3, 2, 2, 3], -1.0, 1.0);
        check("conv-input", seed, &x, |x| {
            let y = x.conv2d(&k, (2, 1), (1, 1), 1)?;
            y.mul(&y)?.sum_all()
        });
        check("conv-kernel", seed, &k, |k| {
            let y = x.conv2d(k, (2, 1), (1, 1), 1)?;
            y.mul(&y)?.sum_all()
        });

        // depth-wise with channel multiplier
        let xd = rng.uniform_tensor::<f64>(vec![2, 4, 6, 5], -1.0, 1.0);
        let kd = rng.uniform_tensor::<f64>(vec![8, 1, 3, 1], -1.0, 1.0);
        check("depthwise-input", seed, &xd, |x| {
            let y = x.conv2d(&kd, (1, 1), (1, 0), 4)?;
            y.mul(&y)?.sum_all()
        });
        check("depthwise-kernel", seed, &kd, |k| {
            let y = xd.conv2d(k, (1, 1), (1, 0), 4)?;
            y.mul(&y)?.sum_all()
        });
    }
}

#[test]
fn gradcheck_conv_gelu_composite() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(500 + seed);
        let x = rng.uniform_tensor::<f64>(vec![1, 1, 4, 4], -1.0, 1.0);
        let k = rng.uniform_tensor::<f64>(vec![2, 1, 2, 2], -1.0, 1.0);
        check("conv-gelu-sum", seed, &x, |x| {
            x.conv2d(&k, (1, 1), (0, 0), 1)?.gelu()?.sum_all()
        });
    }
}

#[test]
fn gradcheck_linear_layer() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(600 + seed);
        let layer = nn::Linear::<f64>::new(4, 3, nn::Init::TruncNormal { std: 0.5 }, &mut rng);
        let x = rng.uniform_tensor::<f64>(vec![5, 4], -1.0, 1.0);
        check("linear-input", seed, &x, |x| {
            let y = layer.forward(x)?;
            y.mul(&y)?.sum_all()
        });
        for (name, p) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            let err = param_grad_check(
                || {
                    let y = layer.forward(&x).unwrap();
                    y.mul(&y).unwrap().sum_all().unwrap()
                },
                p,
                EPS,
            );
            assert!(err < TOL, "linear {name} seed {seed}: {err}");
        }
    }
}

#[test]
fn gradcheck_norm_layers() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(700 + seed);

        let bn = nn::BatchNorm2d::<f64>::new(3, 0.1, 1e-5);
        bn.gamma.copy_from_slice(&[1.1, 0.7, 1.4]);
        bn.beta.copy_from_slice(&[0.2, -0.3, 0.05]);
        let x = rng.uniform_tensor::<f64>(vec![2, 3, 3, 4], -1.0, 1.0);
        check("batchnorm-train-input", seed, &x, |x| {
            let y = bn.forward(x, true)?;
            y.mul(&y)?.sum_all()
        });
        check("batchnorm-eval-input", seed, &x, |x| {
            let y = bn.forward(x, false)?;
            y.mul(&y)?.sum_all()
        });
        for (name, p) in [("gamma", &bn.gamma), ("beta", &bn.beta)] {
            let err = param_grad_check(
                || {
                    let y = bn.forward(&x, true).unwrap();
                    y.mul(&y).unwrap().sum_all().unwrap()
                },
                p,
                EPS,
            );
            assert!(err < TOL, "batchnorm {name} seed {seed}: {err}");
        }

        let ln = nn::LayerNorm::<f64>::new(6, 1e-6);
        ln.gamma.copy_from_slice(&[1.0, 1.2, 0.8, 1.1, 0.9, 1.05]);
        let t = rng.uniform_tensor::<f64>(vec![4, 6], -1.0, 1.0);
        check("layernorm-input", seed, &t, |t| {
            let y = ln.forward(t)?;
            y.mul(&y)?.sum_all()
        });
        for (name, p) in [("gamma", &ln.gamma), ("beta", &ln.beta)] {
            let err = param_grad_check(
                || {
                    let y = ln.forward(&t).unwrap();
                    y.mul(&y).unwrap().sum_all().unwrap()
                },
                p,
                EPS,
            );
            assert!(err < TOL, "layernorm {name} seed {seed}: {err}");
        }
    }
}

#[test]
fn gradcheck_attention_and_block() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(800 + seed);
        let attn =
            nn::MultiHeadAttention::<f64>::new(6, 2, nn::Init::TruncNormal { std: 0.3 }, &mut rng)
                .unwrap();
        let x = rng.uniform_tensor::<f64>(vec![2, 4, 6], -1.0, 1.0);
        check("attention-input", seed, &x, |x| {
            let y = attn.forward(x)?;
            y.mul(&y)?.sum_all()
        });
        let err = param_grad_check(
            || {
                let y = attn.forward(&x).unwrap();
                y.mul(&y).unwrap().sum_all().unwrap()
            },
            &attn.wq.weight,
            EPS,
        );
        assert!(err < TOL, "attention wq seed {seed}: {err}");

        let block = nn::TransformerBlock::<f64>::new(
            6,
            2,
            12,
            0.0, // dropout off: finite differences need a fixed function
            1e-6,
            nn::Init::TruncNormal { std: 0.3 },
            &mut rng,
        )
        .unwrap();
        check("transformer-block-input", seed, &x, |x| {
            let mut r = RngStream::new(0);
            let y = block.forward(x, false, &mut r)?;
            y.mul(&y)?.sum_all()
        });
        let err = param_grad_check(
            || {
                let mut r = RngStream::new(0);
                let y = block.forward(&x, false, &mut r).unwrap();
                y.mul(&y).unwrap().sum_all().unwrap()
            },
            &block.fc1.weight,
            EPS,
        );
        assert!(err < TOL, "block fc1 seed {seed}: {err}");
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: 4,
        timepoints: 32,
        padded_timepoints: 32,
        temporal_filters: 4,
        temporal_kernel: 8,
        temporal_stride: 8,
        spatial_kernel_height: 4,
        spatial_out: 8,
        embed_dim: 8,
        vit_depth: 1,
        vit_heads: 2,
        vit_mlp_dim: 16,
        head_hidden: (8, 10),
        dropout_p: 0.0,
        output_dim: 2,
    }
}

#[test]
fn full_model_parameter_grads_are_finite_and_shaped() {
    let mut rng = RngStream::new(1);
    let model = build_model::<f64>(&tiny_model_config(), &mut rng).unwrap();
    let x = rng.uniform_tensor::<f64>(vec![2, 1, 4, 32], -1.0, 1.0);
    model.set_training(true);
    model.reseed_dropout(0);
    let out = model.forward(&x).unwrap();
    let loss = out.mul(&out).unwrap().sum_all().unwrap();
    model.zero_grads();
    loss.backward().unwrap();
    for (name, p) in model.parameters() {
        let g = p.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert_eq!(g.len(), p.numel(), "{name}");
        assert!(g.iter().all(|v| v.is_finite()), "{name} has non-finite grads");
    }
}

#[test]
fn gradcheck_full_model_end_to_end() {
    for seed in 0..SEEDS {
        let mut rng = RngStream::new(900 + seed);
        let model = build_model::<f64>(&tiny_model_config(), &mut rng).unwrap();
        model.set_training(false);
        let x = rng.uniform_tensor::<f64>(vec![2, 1, 4, 32], -0.5, 0.5);

        // input gradient through the whole network
        check("model-input", seed, &x, |x| {
            let y = model.forward(x)?;
            y.mul(&y)?.sum_all()
        });

        // every parameter, eval mode (batch-norm running stats fixed)
        for (name, p) in model.parameters() {
            let err = param_grad_check(
                || {
                    let y = model.forward(&x).unwrap();
                    y.mul(&y).unwrap().sum_all().unwrap()
                },
                &p,
                EPS,
            );
            assert!(err < TOL, "model param {name} seed {seed}: {err}");
        }
    }
}

#[test]
fn gradcheck_full_model_training_mode_batchnorm() {
    // train-mode batch statistics are part of the graph; dropout stays off so
    // finite differences see a fixed function
    for seed in 0..3 {
        let mut rng = RngStream::new(950 + seed);
        let model = build_model::<f64>(&tiny_model_config(), &mut rng).unwrap();
        model.set_training(true);
        model.reseed_dropout(0);
        let x = rng.uniform_tensor::<f64>(vec![2, 1, 4, 32], -0.5, 0.5);
        check("model-train-input", seed, &x, |x| {
            let y = model.forward(x)?;
            y.mul(&y)?.sum_all()
        });
    }
}
