use nasproxy::tensor::kernels::{self, ConvGeometry};
use nasproxy::tensor::{Graph, ParamRole, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Seven nested loops, zero padding.
fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut y = vec![0.0; g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel {
                            for kj in 0..g.kernel {
                                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize;
                                let wi = ((o * g.in_channels + c) * g.kernel + ki) * g.kernel + kj;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    y[((n * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

fn geometries() -> Vec<ConvGeometry> {
    let mut out = Vec::new();
    for (kernel, stride, padding) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 1, 0), (1, 2, 0), (3, 2, 0)] {
        for (h, w) in [(8, 8), (5, 7), (4, 4)] {
            out.push(ConvGeometry {
                batch: 3,
                in_channels: 2,
                height: h,
                width: w,
                out_channels: 4,
                kernel,
                stride,
                padding,
            });
        }
    }
    out
}

#[test]
fn conv_forward_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for g in geometries() {
        let x = random_vec(&mut rng, g.batch * g.in_channels * g.height * g.width);
        let w = random_vec(&mut rng, g.out_channels * g.in_channels * g.kernel * g.kernel);
        let fast = kernels::conv2d_forward(&g, &x, &w);
        let slow = naive_conv(&g, &x, &w);
        assert_eq!(fast.len(), slow.len(), "{g:?}");
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-6, "{g:?}: {a} vs {b}");
        }
    }
}

/// `<dy, conv(x)>` is linear in `x` and `w`, so its gradients are exact
/// adjoints of the forward pass.
#[test]
fn conv_backward_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in geometries() {
        let x = random_vec(&mut rng, g.batch * g.in_channels * g.height * g.width);
        let w = random_vec(&mut rng, g.out_channels * g.in_channels * g.kernel * g.kernel);
        let dy = random_vec(&mut rng, g.batch * g.out_channels * g.out_height() * g.out_width());
        let (dx, dw) = kernels::conv2d_backward(&g, &x, &w, &dy);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        for _ in 0..3 {
            let u = random_vec(&mut rng, x.len());
            let lhs = dot(&dy, &naive_conv(&g, &u, &w));
            assert!((lhs - dot(&dx, &u)).abs() < 1e-9, "{g:?} dx");
            let v = random_vec(&mut rng, w.len());
            let lhs = dot(&dy, &naive_conv(&g, &x, &v));
            assert!((lhs - dot(&dw, &v)).abs() < 1e-9, "{g:?} dw");
        }
    }
}

#[test]
fn batchnorm_normalizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [4, 3, 5, 5];
    let x: Vec<f64> = (0..dims.iter().product())
        .map(|_| rng.random_range(-3.0..7.0))
        .collect();
    let gamma = [1.0, 2.0, 0.5];
    let beta = [0.0, -1.0, 3.0];
    let (y, _) = kernels::batchnorm_forward(dims, &x, &gamma, &beta, 1e-5);
    let plane = 25;
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y[(n * 3 + c) * plane..(n * 3 + c + 1) * plane].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((mean - beta[c]).abs() < 1e-10, "channel {c} mean {mean}");
        assert!((var.sqrt() - gamma[c]).abs() < 1e-4, "channel {c} std {}", var.sqrt());
    }
}

#[test]
fn constant_channel_maps_to_beta() {
    let dims = [2, 1, 2, 2];
    let (y, _) = kernels::batchnorm_forward(dims, &[4.0; 8], &[3.0], &[0.25], 1e-5);
    assert!(y.iter().all(|&v| v == 0.25));
}

/// Central differences on a small graph that uses every op.
#[test]
fn graph_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let shapes: [(&str, Vec<usize>, ParamRole); 6] = [
        ("conv", vec![3, 2, 3, 3], ParamRole::Feature),
        ("gamma", vec![3], ParamRole::Feature),
        ("beta", vec![3], ParamRole::Feature),
        ("down", vec![3, 3, 1, 1], ParamRole::Feature),
        ("fc_w", vec![4, 3], ParamRole::PredictionWeight),
        ("fc_b", vec![4], ParamRole::PredictionBias),
    ];
    for (name, shape, role) in shapes {
        let n = shape.iter().product();
        store.insert(name, Tensor::new(shape, random_vec(&mut rng, n)).unwrap(), role);
    }
    let x = Tensor::new(vec![3, 2, 6, 6], random_vec(&mut rng, 216)).unwrap();
    let labels = [1, 3, 0];

    let build = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let xi = g.input(x.clone(), "x");
        let p: Vec<_> = (0..store.len()).map(|i| g.param(store, i)).collect();
        let c = g.conv2d(xi, p[0], 1, 1, "conv").unwrap();
        let b = g.batchnorm(c, p[1], p[2], 1e-5, "bn").unwrap();
        let r = g.relu(b, "relu").unwrap();
        let a = g.avgpool3(r, "pool3").unwrap();
        let d = g.conv2d(a, p[3], 2, 0, "down").unwrap();
        let s = g.avgpool2(r, "pool2").unwrap();
        let sum = g.add(&[d, s], "add").unwrap();
        let m = g.mul(sum, sum, "square").unwrap();
        let gap = g.global_avg_pool(m, "gap").unwrap();
        let logits = g.linear(gap, p[4], p[5], "fc").unwrap();
        let loss = g.cross_entropy(logits, &labels, "loss").unwrap();
        (g, loss)
    };

    let (g, loss) = build(&store);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    for p in 0..store.len() {
        let analytic = grads.param(p).unwrap();
        for j in 0..analytic.len() {
            let orig = store.get(p).value.data()[j];
            store.get_mut(p).value.data_mut()[j] = orig + h;
            let (gp, lp) = build(&store);
            store.get_mut(p).value.data_mut()[j] = orig - h;
            let (gm, lm) = build(&store);
            store.get_mut(p).value.data_mut()[j] = orig;
            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{}[{j}]: {a} vs {numeric}", store.get(p).name);
        }
    }
}

proptest! {
    #[test]
    fn pooling_backward_is_the_adjoint(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [2, 2, 2 * h, 2 * w];
        let len = dims.iter().product();
        let x = random_vec(&mut rng, len);
        let dy = random_vec(&mut rng, len);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&dy, &kernels::avgpool3_forward(dims, &x));
        prop_assert!((lhs - dot(&kernels::avgpool3_backward(dims, &dy), &x)).abs() < 1e-9);
        let dy2 = random_vec(&mut rng, len / 4);
        let lhs = dot(&dy2, &kernels::avgpool2_forward(dims, &x));
        prop_assert!((lhs - dot(&kernels::avgpool2_backward(dims, &dy2), &x)).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_softmax_sums_to_one(
        logits in proptest::collection::vec(-20.0f64..20.0, 12),
        label in 0usize..4,
    ) {
        let (loss, probs) = kernels::softmax_cross_entropy(3, 4, &logits, &[label, 0, 3]);
        prop_assert!(loss >= 0.0);
        for row in probs.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
