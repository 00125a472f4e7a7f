use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::{numerical_gradient, relative_error};
use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `loss = Σ w ⊙ f(x)` for a fixed random weighting `w`, returning the
/// loss value and the analytic gradient with respect to the probed input.
fn probe(
    inputs: &[Tensor],
    which: usize,
    weights_seed: u64,
    build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
) -> (f64, Tensor) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let w = random(g.value(out).shape(), weights_seed);
    let loss = weighted(&mut g, out, &w);
    let grads = g.backward(loss).unwrap();
    (g.value(loss).item(), grads.get(ids[which]).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].shape())))
}

fn weighted(g: &mut Graph, out: NodeId, w: &Tensor) -> NodeId {
    // Σ w·y = (‖y + w‖² − ‖y‖² − ‖w‖²) / 2 keeps the check inside the op set.
    let zero = Tensor::zeros(w.shape());
    let neg_w = w.map(|v| -v);
    let a = g.squared_error(out, &neg_w).unwrap();
    let b = g.squared_error(out, &zero).unwrap();
    g.weighted_sum(&[(a, 0.5), (b, -0.5)]).unwrap()
}

fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        let (_, analytic) = probe(inputs, which, 99, build);
        let numeric = numerical_gradient(
            |t| {
                let mut ins = inputs.to_vec();
                ins[which] = t.clone();
                probe(&ins, which, 99, build).0
            },
            &inputs[which],
            1e-5,
        );
        worst = worst.max(relative_error(analytic.data(), numeric.data()));
    }
    worst
}

#[test]
fn conv_unit_kernel_is_identity() {
    let mut g = Graph::new();
    let x = random(&[2, 1, 5, 4], 1);
    let xi = g.leaf(x.clone());
    let k = g.leaf(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xi, k, None, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_zero_input_gives_zero_output() {
    let mut g = Graph::new();
    let xi = g.leaf(Tensor::zeros(&[1, 3, 8, 8]));
    let k = g.leaf(random(&[4, 3, 5, 5], 2));
    let y = g.conv2d(xi, k, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 4, 4, 4]);
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let x = random(&[1, 1, 8, 8], 3);
    let k = random(&[2, 1, 3, 3], 4);
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let ki = g.leaf(k.clone());
    let y = g.conv2d(xi, ki, None, 1).unwrap();
    let out = g.value(y);
    for co in 0..2 {
        for oy in 0..8 {
            for ox in 0..8 {
                let mut acc = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (yy, xx) = (oy as isize + dy as isize - 1, ox as isize + dx as isize - 1);
                        if (0..8).contains(&yy) && (0..8).contains(&xx) {
                            acc += k.data()[co * 9 + dy * 3 + dx] * x.data()[yy as usize * 8 + xx as usize];
                        }
                    }
                }
                let got = out.data()[(co * 8 + oy) * 8 + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch_and_even_kernels() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.leaf(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, k, None, 1), Err(AutodiffError::Shape { .. })));
    let k = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
    assert_eq!(g.conv2d(x, k, None, 1), Err(AutodiffError::EvenKernel(2, 2)));
    let k = g.leaf(Tensor::zeros(&[1, 2, 3, 3]));
    assert_eq!(g.conv2d(x, k, None, 3), Err(AutodiffError::UnsupportedStride(3)));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let inputs = [random(&[2, 2, 6, 5], 5), random(&[3, 2, 3, 3], 6), random(&[3], 7)];
    for stride in [1, 2, 4] {
        let err = fd_check(&inputs, &|g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), stride).unwrap());
        assert!(err < 1e-6, "stride {stride}: {err}");
    }
}

#[test]
fn upsample_replicates_blocks() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.upsample(x, 2).unwrap();
    let expect = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    assert_eq!(g.value(y).data(), &expect);
}

#[test]
fn upsample_rejects_unit_factor() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 1, 2, 2]));
    assert_eq!(g.upsample(x, 1), Err(AutodiffError::UnsupportedFactor(1)));
}

#[test]
fn upsample_sum_gradient_is_factor_squared() {
    for f in [2usize, 4] {
        let x = random(&[1, 2, 3, 2], 8);
        let build = |g: &mut Graph, x: &Tensor| {
            let xi = g.leaf(x.clone());
            let u = g.upsample(xi, f).unwrap();
            (xi, g.sum(u))
        };
        let mut g = Graph::new();
        let (xi, loss) = build(&mut g, &x);
        let grad = g.backward(loss).unwrap().get(xi).unwrap().clone();
        let numeric = numerical_gradient(
            |t| {
                let mut g = Graph::new();
                let (_, l) = build(&mut g, t);
                g.value(l).item()
            },
            &x,
            1e-5,
        );
        for (a, n) in grad.data().iter().zip(numeric.data()) {
            assert_eq!(*a, (f * f) as f64);
            assert!((n - (f * f) as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn upsample_conv_equals_upsample_then_conv() {
    let x = random(&[2, 3, 2, 3], 9);
    let k = random(&[2, 3, 5, 5], 10);
    let b = random(&[2], 11);
    let mut g = Graph::new();
    let (xi, ki, bi) = (g.leaf(x), g.leaf(k), g.leaf(b));
    let fused = g.upsample_conv2d(xi, ki, Some(bi), 2).unwrap();
    let up = g.upsample(xi, 2).unwrap();
    let plain = g.conv2d(up, ki, Some(bi), 1).unwrap();
    let err = relative_error(g.value(fused).data(), g.value(plain).data());
    assert!(err < 1e-13, "{err}");
}

#[test]
fn upsample_conv_gradients_match_finite_differences() {
    let inputs = [random(&[2, 2, 2, 3], 12), random(&[3, 2, 5, 5], 13), random(&[3], 14)];
    for f in [2, 4] {
        let err = fd_check(&inputs, &|g, ids| g.upsample_conv2d(ids[0], ids[1], Some(ids[2]), f).unwrap());
        assert!(err < 1e-6, "factor {f}: {err}");
    }
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    let inputs = [random(&[2, 3, 2, 2], 15), random(&[3, 2, 5, 5], 16), random(&[2], 17)];
    for f in [2, 4] {
        let err = fd_check(&inputs, &|g, ids| {
            let y = g.conv_transpose2d(ids[0], ids[1], Some(ids[2]), f).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 2, 2 * f, 2 * f]);
            y
        });
        assert!(err < 1e-6, "factor {f}: {err}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    // <conv(u), v> == <u, convT(v)> with the same kernel
    let u = random(&[1, 2, 8, 8], 18);
    let v = random(&[1, 3, 4, 4], 19);
    let k = random(&[3, 2, 3, 3], 20);
    let mut g = Graph::new();
    let (ui, vi, ki) = (g.leaf(u.clone()), g.leaf(v.clone()), g.leaf(k));
    let cu = g.conv2d(ui, ki, None, 2).unwrap();
    let tv = g.conv_transpose2d(vi, ki, None, 2).unwrap();
    let lhs: f64 = g.value(cu).data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = u.data().iter().zip(g.value(tv).data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn prelu_limits() {
    let x = Tensor::new(&[1, 2, 1, 2], vec![-2.0, 3.0, -1.0, 0.5]).unwrap();
    let mut g = Graph::new();
    let xi = g.leaf(x.clone());
    let zero = g.leaf(Tensor::zeros(&[2]));
    let one = g.leaf(Tensor::full(&[2], 1.0));
    let relu = g.prelu(xi, zero).unwrap();
    let ident = g.prelu(xi, one).unwrap();
    assert_eq!(g.value(relu).data(), &[0.0, 3.0, 0.0, 0.5]);
    assert_eq!(g.value(ident), &x);
}

#[test]
fn prelu_gradients_match_finite_differences() {
    let inputs = [random(&[2, 3, 4, 4], 21), Tensor::full(&[3], 0.25)];
    let err = fd_check(&inputs, &|g, ids| g.prelu(ids[0], ids[1]).unwrap());
    assert!(err < 1e-6, "{err}");
}

#[test]
fn batch_norm_standardizes_in_training_mode() {
    let x = random(&[4, 3, 5, 5], 22).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let xi = g.leaf(x);
    let gamma = g.leaf(Tensor::full(&[3], 1.0));
    let beta = g.leaf(Tensor::zeros(&[3]));
    let mut stats = BatchNormStats::new(3);
    let y = g.batch_norm(xi, gamma, beta, &mut stats, true).unwrap();
    let out = g.value(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| out.outer(n)[ch * 25..(ch + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        // eps = 1e-5 shrinks the variance slightly below one
        assert!((var - 1.0).abs() < 1e-5 * 2.0, "{var}");
    }
    assert!(stats.mean.iter().all(|m| *m != 0.0));
}

#[test]
fn batch_norm_constant_channel_yields_beta() {
    let mut g = Graph::new();
    let xi = g.leaf(Tensor::full(&[3, 2, 2, 2], 7.0));
    let gamma = g.leaf(Tensor::full(&[2], 2.0));
    let beta = g.leaf(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
    let y = g.batch_norm(xi, gamma, beta, &mut BatchNormStats::new(2), true).unwrap();
    for n in 0..3 {
        assert!(g.value(y).outer(n)[..4].iter().all(|v| (*v - 0.5).abs() < 1e-12));
        assert!(g.value(y).outer(n)[4..].iter().all(|v| (*v + 1.0).abs() < 1e-12));
    }
}

#[test]
fn batch_norm_rejects_single_sample_training() {
    let mut g = Graph::new();
    let xi = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
    let gamma = g.leaf(Tensor::full(&[2], 1.0));
    let beta = g.leaf(Tensor::zeros(&[2]));
    let mut stats = BatchNormStats::new(2);
    assert_eq!(g.batch_norm(xi, gamma, beta, &mut stats, true), Err(AutodiffError::BatchTooSmall(1)));
    assert!(g.batch_norm(xi, gamma, beta, &mut stats, false).is_ok());
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let inputs = [random(&[2, 3, 4, 4], 23), random(&[3], 24).map(|v| v + 1.5), random(&[3], 25)];
    for train in [true, false] {
        let err = fd_check(&inputs, &|g, ids| {
            let mut stats = BatchNormStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.3];
            stats.var = vec![0.5, 1.5, 2.0];
            g.batch_norm(ids[0], ids[1], ids[2], &mut stats, train).unwrap()
        });
        assert!(err < 1e-5, "train={train}: {err}");
    }
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::new();
    let x = g.leaf(random(&[3, 4], 26));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));
}

#[test]
fn backward_of_squared_norm_is_twice_input() {
    let xv = random(&[5], 27);
    let mut g = Graph::new();
    let x = g.leaf(xv.clone());
    let l = g.squared_error(x, &Tensor::zeros(&[5])).unwrap();
    let grads = g.backward(l).unwrap();
    for (gv, v) in grads.get(x).unwrap().data().iter().zip(xv.data()) {
        assert_eq!(*gv, 2.0 * v);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]));
    assert_eq!(g.backward(x).err(), Some(AutodiffError::NonScalarLoss(vec![2, 2])));
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[2], 1.0));
    let c = g.constant(Tensor::full(&[2], 3.0));
    let y = g.add(x, c).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert!(grads.get(x).is_some());
}

#[test]
fn stride_then_upsample_preserves_extent() {
    for s in [2usize, 4] {
        let mut g = Graph::new();
        let x = g.leaf(random(&[1, 1, 4 * s, 2 * s], 28));
        let k = g.leaf(random(&[1, 1, 3, 3], 29));
        let y = g.conv2d(x, k, None, s).unwrap();
        let u = g.upsample(y, s).unwrap();
        assert_eq!(g.value(u).shape(), g.value(x).shape());
    }
}
