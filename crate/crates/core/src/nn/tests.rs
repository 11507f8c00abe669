use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Weighted sum of outputs, so every output element gets a distinct weight.
fn objective(y: &Tensor<f64>, w: &[f64]) -> f64 {
    y.as_slice().iter().zip(w).map(|(a, b)| a * b).sum()
}

fn small_net(rng: &mut ChaCha8Rng) -> Network<f64> {
    let mut b = Builder::<f64, _>::new(rng, Init::Normal(0.5));
    let c0 = b.conv(2, 3, 3, 1, 1, Padding::Reflect);
    let c1 = b.conv(3, 4, 3, 2, 1, Padding::Zero);
    let r0 = b.conv(4, 4, 3, 1, 1, Padding::Reflect);
    let c2 = b.conv(4, 2, 3, 1, 1, Padding::Reflect);
    let layers = vec![
        c0,
        Layer::InstanceNorm,
        Layer::LeakyRelu(0.2),
        c1,
        Layer::Relu,
        Layer::Residual(vec![r0, Layer::InstanceNorm]),
        Layer::Upsample2x,
        c2,
        Layer::Sigmoid,
    ];
    b.finish(layers)
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = small_net(&mut rng);
    let x_vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.3).collect();
    let x = Tensor::new([2, 2, 6, 6], x_vals).unwrap();
    let y0 = net.forward(&x);
    assert_eq!(y0.shape(), [2, 2, 6, 6]);
    let w: Vec<f64> = (0..y0.as_slice().len()).map(|i| ((i * 53 % 17) as f64 - 8.0) / 8.0).collect();

    let (y, trace) = net.forward_train(&x);
    assert_eq!(y, y0);
    let dy = Tensor::new(y.shape(), w.clone()).unwrap();
    let mut grads = net.params().zeros_like();
    let dx = net.backward(trace, dy, Some(&mut grads));

    let h = 1e-5;
    let check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        assert!((analytic - numeric).abs() / denom < 1e-4, "analytic {analytic} numeric {numeric}");
    };
    for i in (0..x.as_slice().len()).step_by(7) {
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += h;
        let mut xm = x.clone();
        xm.as_mut_slice()[i] -= h;
        let num = (objective(&net.forward(&xp), &w) - objective(&net.forward(&xm), &w)) / (2.0 * h);
        check(dx.as_slice()[i], num);
    }
    for t in 0..net.params().len() {
        for j in (0..net.params().values(t).len()).step_by(5) {
            let orig = net.params().values(t)[j];
            net.params_mut().values_mut(t)[j] = orig + h;
            let fp = objective(&net.forward(&x), &w);
            net.params_mut().values_mut(t)[j] = orig - h;
            let fm = objective(&net.forward(&x), &w);
            net.params_mut().values_mut(t)[j] = orig;
            check(grads.get(t)[j], (fp - fm) / (2.0 * h));
        }
    }
}

#[test]
fn strided_conv_output_size() {
    let conv = Conv2d { weight: 0, bias: 1, in_channels: 1, out_channels: 1, kernel: 4, stride: 2, pad: 1, padding: Padding::Zero };
    assert_eq!(conv.output_size(64, 64), Some((32, 32)));
    assert_eq!(conv.output_size(2, 2), Some((1, 1)));
    assert_eq!(conv.output_size(1, 1), None);
}

#[test]
fn adam_with_zero_lr_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = small_net(&mut rng);
    let before = net.params().clone();
    let mut opt = Adam::new(net.params(), 0.0, 0.5, 0.999);
    let mut g = net.params().zeros_like();
    g.tensors.iter_mut().flatten().for_each(|v| *v = 0.3);
    opt.step(net.params_mut(), &g);
    assert_eq!(net.params(), &before);
}

#[test]
fn adam_descends_a_quadratic() {
    let mut p = ParamSet::<f64>::new();
    p.push("x", vec![2], vec![3.0, -2.0]);
    let mut opt = Adam::new(&p, 0.05, 0.9, 0.999);
    for _ in 0..500 {
        let mut g = p.zeros_like();
        g.tensors[0] = p.values(0).iter().map(|v| 2.0 * v).collect();
        opt.step(&mut p, &g);
    }
    assert!(p.values(0).iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn param_records_round_trip_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = small_net(&mut rng);
    let rec = net.params().to_record();
    let mut other = small_net(&mut ChaCha8Rng::seed_from_u64(4));
    assert_ne!(other.params(), net.params());
    other.params_mut().load_record(&rec).unwrap();
    assert_eq!(other.params(), net.params());

    let mut bad = rec.clone();
    bad[0].shape = vec![1];
    assert!(other.params_mut().load_record(&bad).is_err());
    let mut bad = rec;
    bad[1].data = "AAAA".into();
    assert!(other.params_mut().load_record(&bad).is_err());
}

#[test]
fn adam_state_round_trip() {
    let mut p = ParamSet::<f32>::new();
    p.push("x", vec![3], vec![1.0, 2.0, 3.0]);
    let mut opt = Adam::new(&p, 0.1, 0.5, 0.999);
    let mut g = p.zeros_like();
    g.tensors[0] = vec![0.1, -0.2, 0.3];
    opt.step(&mut p, &g);
    let restored = Adam::restore(&p, &opt.state()).unwrap();
    assert_eq!(restored, opt);
}

/// Direct convolution, one output at a time.
fn naive_conv(conv: &Conv2d, params: &ParamSet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = conv.output_size(h, w).unwrap();
    let k = conv.kernel;
    let wt = params.values(conv.weight);
    let bias = params.values(conv.bias);
    let src = |i: isize, len: usize| -> Option<usize> {
        let len = len as isize;
        if (0..len).contains(&i) {
            return Some(i as usize);
        }
        match conv.padding {
            Padding::Zero => None,
            Padding::Reflect => {
                let r = if i < 0 { -i } else { 2 * (len - 1) - i };
                Some(r as usize)
            }
        }
    };
    let mut out = Tensor::zeros([n, conv.out_channels, oh, ow]);
    for b in 0..n {
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if let (Some(iy), Some(ix)) = (src(iy, h), src(ix, w)) {
                                    acc += wt[((o * c + ci) * k + ky) * k + kx] * x.sample(b)[(ci * h + iy) * w + ix];
                                }
                            }
                        }
                    }
                    out.sample_mut(b)[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, stride, pad, padding, size) in [
        (3, 1, 1, Padding::Reflect, 7),
        (3, 2, 1, Padding::Zero, 8),
        (7, 1, 3, Padding::Reflect, 9),
        (7, 1, 3, Padding::Zero, 5),
        (1, 1, 0, Padding::Zero, 4),
        (3, 2, 1, Padding::Reflect, 7),
        (4, 2, 1, Padding::Zero, 8),
    ] {
        let mut b = Builder::<f64, _>::new(&mut rng, Init::Normal(0.5));
        let layer = b.conv(2, 3, k, stride, pad, padding);
        let net = b.finish(vec![layer.clone()]);
        let Layer::Conv(conv) = &layer else { unreachable!() };
        let x_vals: Vec<f64> = (0..2 * 2 * size * size).map(|i| ((i * 29 % 97) as f64 / 97.0) - 0.5).collect();
        let x = Tensor::new([2, 2, size, size], x_vals).unwrap();
        let got = net.forward(&x);
        let want = naive_conv(conv, net.params(), &x);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12, "k{k} s{stride} p{pad} {padding:?}: {a} vs {b}");
        }
        // input gradient is the adjoint: <conv(x) - b, dy> = <x, conv^T dy>
        let (y, trace) = net.forward_train(&x);
        let dy_vals: Vec<f64> = (0..y.as_slice().len()).map(|i| ((i * 13 % 31) as f64 / 31.0) - 0.4).collect();
        let dy = Tensor::new(y.shape(), dy_vals.clone()).unwrap();
        let dx = net.backward(trace, dy, None);
        let zero = Tensor::zeros(x.shape());
        let y0 = net.forward(&zero);
        let lhs: f64 = y.as_slice().iter().zip(y0.as_slice()).zip(&dy_vals).map(|((a, b), d)| (a - b) * d).sum();
        let rhs: f64 = x.as_slice().iter().zip(dx.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch {lhs} vs {rhs}");
    }
}

#[test]
fn parameter_only_backward_matches_full_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = small_net(&mut rng);
    let x_vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| ((i * 41 % 89) as f64 / 89.0) - 0.5).collect();
    let x = Tensor::new([2, 2, 6, 6], x_vals).unwrap();
    let (y, trace) = net.forward_train(&x);
    let dy = Tensor::new(y.shape(), (0..y.as_slice().len()).map(|i| (i % 7) as f64 - 3.0).collect()).unwrap();
    let mut full = net.params().zeros_like();
    net.backward(trace, dy.clone(), Some(&mut full));
    let (_, trace) = net.forward_train(&x);
    let mut only = net.params().zeros_like();
    net.backward_params(trace, dy, &mut only);
    assert_eq!(full, only);
}
