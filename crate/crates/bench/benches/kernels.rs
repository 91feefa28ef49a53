use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use esnet_bench::{input, random_block};
use esnet_core::tensor::{conv2d, conv2d_backward, ConvParams, Mode};
use esnet_core::BlockSpec;

fn convolutions(c: &mut Criterion) {
    let x = input([1, 32, 64, 64], 1);
    let mut g = c.benchmark_group("conv2d 32ch 64x64");
    for (name, kh, kw, d) in [
        ("3x3", 3, 3, 1),
        ("3x1", 3, 1, 1),
        ("1x3", 1, 3, 1),
        ("3x3 r9", 3, 3, 9),
    ] {
        let p = ConvParams::new(input([32, 32, kh, kw], 2))
            .with_dilation(d, d)
            .with_same_padding();
        g.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| conv2d(black_box(&x), &p).unwrap())
        });
        let dy = conv2d(&x, &p).unwrap();
        g.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| conv2d_backward(black_box(&x), &p, &dy).unwrap())
        });
    }
    g.finish();
}

fn blocks(c: &mut Criterion) {
    let x = input([2, 32, 32, 32], 3);
    let mut g = c.benchmark_group("blocks 32ch 32x32");
    for spec in [
        BlockSpec::fcu(32, 3).unwrap(),
        BlockSpec::fcu(32, 5).unwrap(),
        BlockSpec::pfcu(32, &[2, 5, 9]).unwrap(),
        BlockSpec::non_bt_1d(32, 1).unwrap(),
        BlockSpec::non_bottleneck(32).unwrap(),
    ] {
        let block = random_block(spec, 4);
        g.bench_function(BenchmarkId::new("infer", spec.kind), |b| {
            b.iter(|| block.forward(black_box(&x), Mode::Infer).unwrap())
        });
        let (y, cache) = block.forward_recorded(&x, Mode::Train).unwrap();
        g.bench_function(BenchmarkId::new("backward", spec.kind), |b| {
            b.iter(|| block.backward(&cache, black_box(&y)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, convolutions, blocks);
criterion_main!(benches);
