use std::collections::HashMap;

use esnet_core::blocks::{Block, BlockSpec};
use esnet_core::gradcheck::suite::{random_tensor, randomize_block, rng};
use esnet_core::tensor::*;
use esnet_core::training::{poly_lr, sgd_update, ConfusionMatrix, SgdConfig};
use proptest::prelude::*;

/// Copies every parameter of `pfcu` into a block whose branches are
/// listed in the order `perm`.
fn permuted_pfcu(pfcu: &Block<f64>, rates: [usize; 3], perm: [usize; 3]) -> Block<f64> {
    let mut values = HashMap::new();
    pfcu.for_each_param("p", &mut |i, d| {
        values.insert(i.name, d.to_vec());
    });
    let spec = BlockSpec::pfcu(4, &perm.map(|p| rates[p])).unwrap();
    let mut out = Block::<f64>::zeroed(spec).unwrap();
    let source = |name: &str| -> String {
        let (layer, field) = name.strip_prefix("p.").unwrap().split_once('.').unwrap();
        let (kind, idx) = layer.split_at(layer.find(|c: char| c.is_ascii_digit()).unwrap());
        let idx: usize = idx.parse().unwrap();
        let mapped = match kind {
            "conv" if idx >= 2 => 2 + 2 * perm[(idx - 2) / 2] + (idx - 2) % 2,
            "bn" if idx >= 1 => 1 + perm[idx - 1],
            _ => idx,
        };
        format!("p.{kind}{mapped}.{field}")
    };
    out.for_each_param_mut("p", &mut |i, d| {
        d.copy_from_slice(&values[&source(&i.name)])
    });
    out
}

#[test]
fn pfcu_is_invariant_under_branch_permutation() {
    let rates = [2, 5, 9];
    let mut block = Block::<f64>::init(BlockSpec::pfcu(4, &rates).unwrap(), &mut rng(3)).unwrap();
    randomize_block(&mut block, 4);
    let x = random_tensor([2, 4, 12, 10], 5);
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let other = permuted_pfcu(&block, rates, perm);
        for mode in [Mode::Train, Mode::Infer] {
            let a = block.forward(&x, mode).unwrap().0;
            let b = other.forward(&x, mode).unwrap().0;
            assert_eq!(a.data(), b.data(), "{perm:?} {mode:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_extent_follows_closed_form(
        h in 1usize..24, k in 1usize..6, s in 1usize..4, d in 1usize..4, p in 0usize..4,
    ) {
        let eff = d * (k - 1) + 1;
        prop_assume!(eff <= h + 2 * p);
        let x = Tensor4::<f64>::zeros([1, 1, h, 3]);
        let w = ConvParams::new(Tensor4::zeros([1, 1, k, 1]))
            .with_stride(s, 1)
            .with_dilation(d, 1)
            .with_padding(p, 0);
        let y = conv2d(&x, &w).unwrap();
        prop_assert_eq!(y.shape().h, (h + 2 * p - eff) / s + 1);
    }

    #[test]
    fn transposed_conv_restores_extent(
        h in 1usize..24, k in 1usize..6, s in 1usize..4, d in 1usize..3, p in 0usize..3,
    ) {
        let eff = d * (k - 1) + 1;
        prop_assume!(eff <= h + 2 * p);
        let out = conv_output_extent(h, k, s, d, p).unwrap();
        let o = (h + 2 * p - eff) % s;
        prop_assert_eq!(transposed_output_extent(out, k, s, d, p, o), Some(h));
    }

    #[test]
    fn adjoint_identity_holds(seed in 0u64..1000, s in 1usize..3, d in 1usize..3) {
        let p = ConvParams::new(random_tensor([2, 3, 3, 3], seed)).with_stride(s, s).with_dilation(d, d).with_same_padding();
        let x = random_tensor([1, 3, 9, 8], seed + 1);
        let y = conv2d(&x, &p).unwrap();
        let u = random_tensor(y.shape(), seed + 2);
        // same padding: H + 2p - eK = H - 1
        let o = (8 % s, 7 % s);
        let t = transposed_conv2d(&u, &p, o).unwrap();
        // <conv(x), u> = <x, conv^T(u)>
        let lhs = y.dot(&u);
        let rhs = x.dot(&t);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn poly_lr_strictly_decreases(max_iter in 2usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = SgdConfig::recipe(max_iter);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (i, j) = ((lo * max_iter as f64) as usize, (hi * max_iter as f64) as usize);
        prop_assume!(i < j);
        prop_assert!(poly_lr(i, &cfg).unwrap() > poly_lr(j, &cfg).unwrap());
        prop_assert_eq!(poly_lr(max_iter, &cfg).unwrap(), 0.0);
        prop_assert!(poly_lr(max_iter + 1, &cfg).is_err());
    }

    #[test]
    fn poly_lr_steps_shrink_with_max_iter(max_iter in 1000usize..100_000) {
        let cfg = SgdConfig::recipe(max_iter);
        let step = (poly_lr(0, &cfg).unwrap() - poly_lr(1, &cfg).unwrap()).abs();
        prop_assert!(step < 5e-4 * 2.0 / max_iter as f64);
    }

    #[test]
    fn sgd_with_zero_rate_is_identity(
        p in prop::collection::vec(-5.0f64..5.0, 1..20),
        seed in 0u64..100,
    ) {
        let g = random_tensor([1, 1, 1, p.len()], seed).into_vec();
        let mut v = random_tensor([1, 1, 1, p.len()], seed + 1).into_vec();
        let mut q = p.clone();
        sgd_update(&mut q, &g, &mut v, 0.0, 0.9, 1e-4).unwrap();
        prop_assert_eq!(q, p);
    }

    #[test]
    fn miou_is_invariant_under_class_permutation(
        counts in prop::collection::vec(0u64..50, 16),
        perm in Just([0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let rows: Vec<Vec<u64>> = counts.chunks(4).map(<[u64]>::to_vec).collect();
        let moved: Vec<Vec<u64>> = (0..4)
            .map(|i| (0..4).map(|j| rows[perm[i]][perm[j]]).collect())
            .collect();
        let a = ConfusionMatrix::from_counts(&rows).unwrap().miou();
        let b = ConfusionMatrix::from_counts(&moved).unwrap().miou();
        match (a.mean, b.mean) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
            (x, y) => prop_assert_eq!(x, y),
        }
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(a.per_class[p], b.per_class[i]);
        }
    }

    #[test]
    fn zero_weight_blocks_are_relu(seed in 0u64..500, k in prop::sample::select(vec![3usize, 5])) {
        let x = random_tensor([2, 4, 10, 9], seed).map(|v| 3.0 * v);
        for spec in [BlockSpec::fcu(4, k).unwrap(), BlockSpec::pfcu(4, &[2, 5, 9]).unwrap()] {
            let block = Block::<f64>::zeroed(spec).unwrap();
            for mode in [Mode::Train, Mode::Infer] {
                prop_assert_eq!(block.forward(&x, mode).unwrap().0, relu(&x));
            }
        }
    }

    #[test]
    fn relu_and_softmax_stay_finite(seed in 0u64..500, scale in 1.0f64..200.0) {
        let logits = random_tensor([1, 5, 3, 4], seed).map(|v| v * scale);
        let labels = LabelMap::filled(1, 3, 4, 2);
        let (loss, d) = softmax_cross_entropy(&logits, &labels, 255).unwrap();
        prop_assert!(loss.is_finite() && d.is_finite());
        prop_assert!(relu(&logits).data().iter().all(|v| *v >= 0.0));
    }
}
