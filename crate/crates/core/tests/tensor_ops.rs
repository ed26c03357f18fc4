use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackpool::tensor::{
    add, bilinear_resize, conv2d, elementwise_mean, io, mse_loss, relu, reshape, scale, sum, Padding,
};
use stackpool::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop convolution with zero "same" padding (top/left offset
/// `(k-1)/2`).
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let p = ((k - 1) / 2) as isize;
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; n * o * h * wd];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bd[oi];
                    for ci in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = y as isize + i as isize - p;
                                let ix = xx as isize + j as isize - p;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((oi * c + ci) * k + i) * k + j];
                            }
                        }
                    }
                    out[((ni * o + oi) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Central differences of a scalar function of one tensor's values.
fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.numel())
        .map(|i| {
            let mut plus = x.data().to_vec();
            let mut minus = x.data().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fp = f(&Tensor::from_vec(x.shape(), plus).unwrap());
            let fm = f(&Tensor::from_vec(x.shape(), minus).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// A fixed non-uniform weighting turns any map into a scalar loss with a
/// non-trivial upstream gradient.
fn weighted_sum(t: &Tensor) -> Tensor {
    let weights: Vec<f64> = (0..t.numel()).map(|i| 0.5 + ((i * 37) % 11) as f64 / 7.0).collect();
    let wt = Tensor::from_vec(t.shape(), weights).unwrap();
    sum(&mul_const(t, &wt))
}

/// Element-wise product with a constant tensor: each element becomes its own
/// channel and a diagonal 1×1 convolution scales it.
fn mul_const(t: &Tensor, w: &Tensor) -> Tensor {
    let n = t.numel();
    let x = reshape(t, &[1, n, 1, 1]).unwrap();
    let mut diag = vec![0.0; n * n];
    for i in 0..n {
        diag[i * n + i] = w.data()[i];
    }
    let kernel = Tensor::from_vec(&[n, n, 1, 1], diag).unwrap();
    let bias = Tensor::zeros(&[n]).unwrap();
    let y = conv2d(&x, &kernel, &bias, Padding::Same).unwrap();
    reshape(&y, t.shape()).unwrap()
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let y = conv2d(&x, &w, &b, Padding::Same).unwrap();
    assert_eq!(y.shape(), &[1, 3, 5, 5]);
    assert!(max_diff(y.data(), &conv_oracle(&x, &w, &b)) < 1e-12);
}

#[test]
fn conv_oracle_agreement_across_kernel_sizes_and_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in [1, 3, 5, 7, 9] {
        let x = random(&[2, 3, 11, 8], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        let y = conv2d(&x, &w, &b, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[2, 4, 11, 8], "same padding keeps extents for k={k}");
        assert!(max_diff(y.data(), &conv_oracle(&x, &w, &b)) < 1e-12, "k={k}");
    }
}

#[test]
fn conv_shape_errors() {
    let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]).unwrap();
    let w = Tensor::<f64>::zeros(&[3, 3, 3, 3]).unwrap();
    let b = Tensor::<f64>::zeros(&[3]).unwrap();
    let err = conv2d(&x, &w, &b, Padding::Same).unwrap_err().to_string();
    assert!(err.contains("channel"), "{err}");
    let w = Tensor::<f64>::zeros(&[3, 2, 3, 3]).unwrap();
    assert!(conv2d(&x, &w, &Tensor::zeros(&[2]).unwrap(), Padding::Same).is_err());
}

#[test]
fn conv_mse_gradients_match_central_differences_for_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let t = random(&[1, 3, 5, 5], &mut rng);
    let loss_of = |x: &Tensor, w: &Tensor, b: &Tensor| {
        mse_loss(&conv2d(x, w, b, Padding::Same).unwrap(), &t).unwrap().data()[0]
    };
    let (xl, wl, bl) = (x.with_requires_grad(true), w.with_requires_grad(true), b.with_requires_grad(true));
    let grads = mse_loss(&conv2d(&xl, &wl, &bl, Padding::Same).unwrap(), &t)
        .unwrap()
        .backward()
        .unwrap();
    let checks = [
        (grads.get(&xl).unwrap().to_vec(), numeric_grad(&x, |v| loss_of(v, &w, &b))),
        (grads.get(&wl).unwrap().to_vec(), numeric_grad(&w, |v| loss_of(&x, v, &b))),
        (grads.get(&bl).unwrap().to_vec(), numeric_grad(&b, |v| loss_of(&x, &w, v))),
    ];
    for (analytic, numeric) in checks {
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel(*a, *n) < 1e-5, "analytic {a} vs numeric {n}");
        }
    }
}

#[test]
fn relu_examples() {
    let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
    assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap().with_requires_grad(true);
    let g = sum(&relu(&x)).backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[0.0, 0.0, 1.0], "gradient at exactly 0 is 0");

    let neg = Tensor::from_vec(&[4], vec![-0.5, -1.0, -2.0, -3.0]).unwrap().with_requires_grad(true);
    let y = relu(&neg);
    assert!(y.data().iter().all(|v| *v == 0.0));
    let g = sum(&y).backward().unwrap();
    assert!(g.get(&neg).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn relu_gradient_matches_finite_differences_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[1, 2, 4, 4], &mut rng);
    let leaf = x.with_requires_grad(true);
    let g = weighted_sum(&relu(&leaf)).backward().unwrap();
    let numeric = numeric_grad(&x, |v| weighted_sum(&relu(v)).data()[0]);
    for ((a, n), v) in g.get(&leaf).unwrap().iter().zip(&numeric).zip(x.data()) {
        if v.abs() < 1e-4 {
            continue;
        }
        assert!(rel(*a, *n) < 1e-6, "{a} vs {n}");
    }
}

#[test]
fn elementwise_mean_examples() {
    let a = Tensor::from_vec(&[1, 2], vec![0.0, 2.0]).unwrap();
    let b = Tensor::from_vec(&[1, 2], vec![4.0, 6.0]).unwrap();
    assert_eq!(elementwise_mean(&[a.clone(), b]).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(elementwise_mean(std::slice::from_ref(&a)).unwrap().data(), a.data());
    assert!(elementwise_mean::<f64>(&[]).is_err());
    assert!(elementwise_mean(&[a, Tensor::zeros(&[2, 1]).unwrap()]).is_err());
}

#[test]
fn mean_of_three_passes_exactly_a_third() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<Tensor> = (0..3).map(|_| random(&[1, 1, 3, 3], &mut rng).with_requires_grad(true)).collect();
    let upstream = random(&[1, 1, 3, 3], &mut rng);
    let g = elementwise_mean(&inputs).unwrap().backward_with(&upstream).unwrap();
    for x in &inputs {
        for (gi, u) in g.get(x).unwrap().iter().zip(upstream.data()) {
            assert_eq!(*gi, u / 3.0);
        }
    }
    // Numerical cross-check of the same rule.
    let base: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
    let numeric = numeric_grad(&base[1], |v| {
        weighted_sum(&elementwise_mean(&[base[0].clone(), v.clone(), base[2].clone()]).unwrap()).data()[0]
    });
    let leaf = base[1].with_requires_grad(true);
    let g = weighted_sum(&elementwise_mean(&[base[0].clone(), leaf.clone(), base[2].clone()]).unwrap())
        .backward()
        .unwrap();
    for (a, n) in g.get(&leaf).unwrap().iter().zip(&numeric) {
        assert!(rel(*a, *n) < 1e-6);
    }
}

#[test]
fn mse_examples_and_gradient() {
    let p = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
    let t = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
    assert_eq!(mse_loss(&p, &t).unwrap().data(), &[5.0]);
    assert_eq!(mse_loss(&t, &t).unwrap().data(), &[0.0]);
    assert!(mse_loss(&p, &Tensor::zeros(&[3]).unwrap()).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random(&[1, 1, 4, 4], &mut rng);
    let t = random(&[1, 1, 4, 4], &mut rng);
    let leaf = p.with_requires_grad(true);
    let g = mse_loss(&leaf, &t).unwrap().backward().unwrap();
    let numeric = numeric_grad(&p, |v| mse_loss(v, &t).unwrap().data()[0]);
    for (((a, n), pv), tv) in g.get(&leaf).unwrap().iter().zip(&numeric).zip(p.data()).zip(t.data()) {
        assert!((a - 2.0 * (pv - tv) / 16.0).abs() < 1e-15);
        assert!(rel(*a, *n) < 1e-6);
    }
}

#[test]
fn bilinear_examples() {
    let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = bilinear_resize(&x, 3, 3).unwrap();
    assert_eq!(y.data()[4], 1.5);
    assert_eq!(y.data()[0], 0.0);
    assert_eq!(y.data()[8], 3.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = random(&[1, 2, 5, 7], &mut rng);
    assert!(max_diff(bilinear_resize(&r, 5, 7).unwrap().data(), r.data()) <= 1e-12);

    let c = Tensor::full(&[1, 1, 6, 4], 0.37).unwrap();
    for (h, w) in [(1, 1), (3, 9), (13, 5), (12, 8)] {
        assert!(bilinear_resize(&c, h, w).unwrap().data().iter().all(|v| *v == 0.37));
    }
    assert!(bilinear_resize(&c, 0, 3).is_err());
}

#[test]
fn bilinear_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[1, 2, 4, 5], &mut rng);
    for (h, w) in [(7, 3), (2, 9), (8, 10)] {
        let leaf = x.with_requires_grad(true);
        let g = weighted_sum(&bilinear_resize(&leaf, h, w).unwrap()).backward().unwrap();
        let numeric = numeric_grad(&x, |v| weighted_sum(&bilinear_resize(v, h, w).unwrap()).data()[0]);
        for (a, n) in g.get(&leaf).unwrap().iter().zip(&numeric) {
            assert!(rel(*a, *n) < 1e-6, "{h}x{w}: {a} vs {n}");
        }
    }
}

#[test]
fn backward_sum_and_fan_out() {
    let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap().with_requires_grad(true);
    let g = sum(&x).backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[1.0; 4]);

    let y = add(&x, &x).unwrap();
    let up = Tensor::from_vec(&[2, 2], vec![0.5, 1.0, -1.0, 2.0]).unwrap();
    let g = y.backward_with(&up).unwrap();
    assert_eq!(g.get(&x).unwrap(), &[1.0, 2.0, -2.0, 4.0]);
}

#[test]
fn gradient_is_the_sum_over_all_paths() {
    // z = 3x + 2(x + x) + relu(x) summed, for positive x: dz/dx = 3 + 4 + 1.
    let x = Tensor::from_vec(&[3], vec![0.5, 1.0, 2.0]).unwrap().with_requires_grad(true);
    let a = scale(&x, 3.0);
    let b = scale(&add(&x, &x).unwrap(), 2.0);
    let c = relu(&x);
    let z = sum(&add(&add(&a, &b).unwrap(), &c).unwrap());
    let g = z.backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[8.0, 8.0, 8.0]);

    // Diamond with a shared intermediate: u = x + x, v = u + 2u → 6.
    let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
    let u = add(&x, &x).unwrap();
    let v = add(&u, &scale(&u, 2.0)).unwrap();
    let g = sum(&v).backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[6.0, 6.0]);
}

#[test]
fn backward_twice_and_non_scalar_root_are_errors() {
    let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
    let loss = sum(&x);
    loss.backward().unwrap();
    assert!(loss.backward().is_err());
    assert!(relu(&x).backward().is_err());
}

#[test]
fn constant_extents_rejected() {
    assert!(Tensor::<f64>::zeros(&[2, 0, 3]).is_err());
    assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pstn_round_trip(shape in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len: usize = shape.iter().product();
        let t = Tensor::from_vec(&shape, (0..len).map(|_| rng.random::<f64>() * 1e3 - 5e2).collect()).unwrap();
        let back: Tensor = io::decode(&io::encode(&t)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
        let single: Tensor<f32> = t.cast();
        let widened: Tensor = io::decode(&io::encode(&single)).unwrap();
        let expected: Tensor = single.cast();
        prop_assert_eq!(widened.data(), expected.data());
    }

    #[test]
    fn conv_agrees_with_oracle(
        c in 1usize..4, o in 1usize..4, h in 1usize..9, w in 1usize..9,
        k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[1, c, h, w], &mut rng);
        let wt = random(&[o, c, k, k], &mut rng);
        let b = random(&[o], &mut rng);
        let y = conv2d(&x, &wt, &b, Padding::Same).unwrap();
        prop_assert!(max_diff(y.data(), &conv_oracle(&x, &wt, &b)) < 1e-12);
    }
}
