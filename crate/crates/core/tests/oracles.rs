use esnet_core::blocks::{Block, BlockSpec};
use esnet_core::gradcheck::suite::{random_tensor, randomize_block, rng};
use esnet_core::gradcheck::{grad_check, GradCheckOptions};
use esnet_core::tensor::*;

/// Direct seven-loop cross-correlation with zero padding.
fn brute_conv(x: &Tensor4<f64>, p: &ConvParams<f64>) -> Tensor4<f64> {
    let s = x.shape();
    let [co, ci, kh, kw] = p.weight.shape().to_array();
    let (sh, sw) = p.stride;
    let (dh, dw) = p.dilation;
    let (ph, pw) = p.padding;
    let oh = (s.h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let ow = (s.w + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
    let mut y = Tensor4::zeros([s.n, co, oh, ow]);
    for n in 0..s.n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = p.bias.as_ref().map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for a in 0..kh {
                            for b in 0..kw {
                                let r = (i * sh + a * dh) as isize - ph as isize;
                                let q = (j * sw + b * dw) as isize - pw as isize;
                                if r >= 0 && q >= 0 && (r as usize) < s.h && (q as usize) < s.w {
                                    acc += p.weight.get(o, c, a, b)
                                        * x.get(n, c, r as usize, q as usize);
                                }
                            }
                        }
                    }
                    y.set(n, o, i, j, acc);
                }
            }
        }
    }
    y
}

#[test]
fn conv_matches_brute_force() {
    let cases = [
        ([2, 3, 9, 8], [4, 3, 3, 3], (1, 1), (1, 1), (1, 1)),
        ([1, 2, 7, 7], [3, 2, 3, 1], (1, 1), (1, 1), (1, 0)),
        ([1, 2, 6, 9], [2, 2, 1, 5], (1, 1), (1, 1), (0, 2)),
        ([2, 3, 8, 6], [5, 3, 3, 3], (2, 2), (1, 1), (1, 1)),
        ([1, 2, 11, 10], [2, 2, 3, 3], (1, 1), (2, 3), (2, 3)),
        ([1, 1, 5, 5], [1, 1, 2, 2], (1, 2), (1, 1), (0, 0)),
    ];
    for (i, (xs, ws, stride, dil, pad)) in cases.into_iter().enumerate() {
        let x = random_tensor(xs, 100 + i as u64);
        let p = ConvParams::new(random_tensor(ws, 200 + i as u64))
            .with_bias(random_tensor([1, 1, 1, ws[0]], 300 + i as u64).into_vec())
            .with_stride(stride.0, stride.1)
            .with_dilation(dil.0, dil.1)
            .with_padding(pad.0, pad.1);
        let fast = conv2d(&x, &p).unwrap();
        let slow = brute_conv(&x, &p);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) <= 1e-12, "case {i}");
    }
}

#[test]
fn rank_one_kernel_equals_factorized_pair() {
    for (k, d) in [(3, 1), (5, 1), (3, 2), (3, 9)] {
        let u = random_tensor([1, 1, k, 1], k as u64);
        let v = random_tensor([1, 1, 1, k], 10 + k as u64);
        let full = Tensor4::from_fn([1, 1, k, k], |i| u.data()[i / k] * v.data()[i % k]);
        let x = random_tensor([1, 1, 12, 13], 20 + d as u64);
        let col = ConvParams::new(u).with_dilation(d, d).with_same_padding();
        let row = ConvParams::new(v).with_dilation(d, d).with_same_padding();
        let square = ConvParams::new(full)
            .with_dilation(d, d)
            .with_same_padding();
        let pair = conv2d(&conv2d(&x, &col).unwrap(), &row).unwrap();
        let one = conv2d(&x, &square).unwrap();
        assert!(pair.max_abs_diff(&one) <= 1e-10, "k {k} d {d}");
    }
}

#[test]
fn transposed_conv_is_the_conv_input_gradient() {
    let cases = [
        ([2, 3, 7, 6], [4, 3, 3, 3], (2, 2), (1, 1), (1, 1)),
        ([1, 2, 8, 8], [3, 2, 3, 3], (2, 2), (1, 1), (1, 1)),
        ([1, 2, 9, 9], [2, 2, 3, 1], (1, 1), (2, 1), (2, 0)),
        ([1, 3, 10, 7], [2, 3, 2, 3], (3, 2), (1, 2), (0, 1)),
    ];
    for (i, (xs, ws, stride, dil, pad)) in cases.into_iter().enumerate() {
        let p = ConvParams::new(random_tensor(ws, 400 + i as u64))
            .with_stride(stride.0, stride.1)
            .with_dilation(dil.0, dil.1)
            .with_padding(pad.0, pad.1);
        let x = random_tensor(xs, 500 + i as u64);
        let y = conv2d(&x, &p).unwrap();
        let u = random_tensor(y.shape(), 600 + i as u64);
        let grad = conv2d_backward(&x, &p, &u).unwrap().input;
        let (kh, kw) = p.kernel();
        let oh = (xs[2] + 2 * pad.0 - dil.0 * (kh - 1) - 1) % stride.0;
        let ow = (xs[3] + 2 * pad.1 - dil.1 * (kw - 1) - 1) % stride.1;
        let t = transposed_conv2d(&u, &p, (oh, ow)).unwrap();
        assert_eq!(t.shape(), x.shape(), "case {i}");
        assert!(t.max_abs_diff(&grad) <= 1e-12, "case {i}");
    }
}

#[test]
fn conv_is_linear_without_bias() {
    let p = ConvParams::new(random_tensor([3, 2, 3, 3], 1))
        .with_dilation(2, 2)
        .with_same_padding();
    let a = random_tensor([2, 2, 9, 8], 2);
    let b = random_tensor([2, 2, 9, 8], 3);
    let (alpha, beta) = (0.7, -1.9);
    let mix = Tensor4::from_fn(a.shape(), |i| alpha * a.data()[i] + beta * b.data()[i]);
    let lhs = conv2d(&mix, &p).unwrap();
    let (ya, yb) = (conv2d(&a, &p).unwrap(), conv2d(&b, &p).unwrap());
    let rhs = Tensor4::from_fn(ya.shape(), |i| alpha * ya.data()[i] + beta * yb.data()[i]);
    assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
}

#[test]
fn maxpool_matches_window_max() {
    let x = random_tensor([1, 3, 8, 8], 7);
    let y = maxpool2d(&x).unwrap();
    assert_eq!(y.shape().to_array(), [1, 3, 4, 4]);
    for c in 0..3 {
        for i in 0..4 {
            for j in 0..4 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(a, b)| x.get(0, c, 2 * i + a, 2 * j + b))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.get(0, c, i, j), m);
            }
        }
    }
}

#[test]
fn small_dilated_conv_matches_coarse_differences() {
    // step 1e-3 relative, the setting quoted for this case
    let x = random_tensor([1, 2, 6, 6], 11);
    let p = ConvParams::new(random_tensor([2, 2, 3, 3], 12))
        .with_bias(vec![0.1, -0.3])
        .with_dilation(2, 2)
        .with_same_padding();
    let dy = random_tensor(conv2d(&x, &p).unwrap().shape(), 13);
    let g = conv2d_backward(&x, &p, &dy).unwrap();
    let mut probe = p.clone();
    let r = grad_check(
        &[x.data().to_vec(), p.weight.data().to_vec()],
        &[g.input.into_vec(), g.weight.into_vec()],
        |v| {
            probe.weight = Tensor4::from_vec([2, 2, 3, 3], v[1].clone())?;
            Ok(conv2d(&Tensor4::from_vec([1, 2, 6, 6], v[0].clone())?, &probe)?.dot(&dy))
        },
        GradCheckOptions {
            eps: 1e-3,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn shape_examples() {
    assert_eq!(conv_output_extent(512, 3, 2, 1, 1), Some(256));
    assert_eq!(transposed_output_extent(256, 3, 2, 1, 1, 1), Some(512));
    let ones = |h| Tensor4::<f64>::full([1, 1, h, h], 1.0);
    let p = ConvParams::new(Tensor4::full([1, 1, 3, 3], 1.0)).with_dilation(2, 2);
    assert!(conv2d(&ones(4), &p).is_err());
    assert_eq!(conv2d(&ones(5), &p).unwrap().data(), &[9.0]);
    let a = Tensor4::<f64>::zeros([1, 13, 2, 2]);
    let b = Tensor4::<f64>::zeros([1, 3, 2, 2]);
    assert_eq!(concat_channels(&a, &b).unwrap().shape().c, 16);
}

#[test]
fn non_bt_1d_is_fcu_with_k3() {
    let mut fcu = Block::<f64>::init(BlockSpec::fcu(4, 3).unwrap(), &mut rng(1)).unwrap();
    randomize_block(&mut fcu, 2);
    let mut nb = Block::<f64>::zeroed(BlockSpec::non_bt_1d(4, 1).unwrap()).unwrap();
    let mut values = Vec::new();
    fcu.for_each_param("", &mut |_, d| values.push(d.to_vec()));
    let mut k = 0;
    nb.for_each_param_mut("", &mut |_, d| {
        d.copy_from_slice(&values[k]);
        k += 1;
    });
    assert_eq!(k, values.len());
    let x = random_tensor([2, 4, 6, 5], 3);
    for mode in [Mode::Train, Mode::Infer] {
        let a = fcu.forward(&x, mode).unwrap().0;
        let b = nb.forward(&x, mode).unwrap().0;
        assert_eq!(a.data(), b.data());
    }
}
