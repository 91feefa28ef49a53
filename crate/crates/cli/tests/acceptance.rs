//! One line per acceptance criterion. Exits nonzero if any criterion
//! outside `KNOWN_FAILING` fails.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use esnet_cli::{pnm, run_cli, weights};
use esnet_core::analysis::{
    paper_accounting, receptive_field, reduction_ratio, true_param_count, RfState,
};
use esnet_core::blocks::{Block, BlockSpec, ConvLayout, ConvPath};
use esnet_core::gradcheck::suite::{random_tensor, randomize_block, rng, run_suite, SuiteScale};
use esnet_core::network::{build_erfnet_reference, build_esnet, build_esnet_scaled, DEFAULT_INPUT};
use esnet_core::tensor::{conv2d, relu, transposed_conv2d, ConvParams, Mode, Tensor4};
use esnet_core::training::{synth_dataset, train_toy, OptimizerState, SgdConfig};
use esnet_core::{LabelMap, Network};

/// The 500-step recipe does not reach the accuracy bar; the README has
/// the measurements.
const KNOWN_FAILING: &[usize] = &[8];

type Criterion = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let trace = build_esnet(20).unwrap().group_trace(DEFAULT_INPUT).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let sizes: Vec<String> = trace.iter().map(|(_, d)| d.to_string()).collect();
    let want = [
        "512×256×16",
        "256×128×64",
        "128×64×128",
        "256×128×64",
        "512×256×16",
        "1024×512×20",
    ];
    outcome(
        sizes == want && secs < 1.0,
        format!("{} in {secs:.3} s", sizes.join(", ")),
    )
}

fn criterion_2() -> Outcome {
    let esnet = paper_accounting(&build_esnet(20).unwrap()).total;
    let erfnet = paper_accounting(&build_erfnet_reference().unwrap()).total;
    let ratio = format!("{:.1}", reduction_ratio(esnet, 17_688).unwrap());
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/esnet.json");
    let mut out = Vec::new();
    let code = run_cli(
        ["esnet", "analyze", "--config", cfg.to_str().unwrap()],
        &mut out,
        &mut Vec::new(),
    );
    let text = String::from_utf8(out).unwrap();
    let flagged = code == 0
        && text.contains("residual total: 15,296")
        && text.contains("ERFNet residual total: 18,048")
        && text.contains("ERFNet stated total: 17,688 [MISMATCH");
    outcome(
        esnet == 15_296 && erfnet == 18_048 && ratio == "13.5" && flagged,
        format!("ESNet {esnet}, ERFNet listed {erfnet} vs stated 17688 (flagged: {flagged}), reduction {ratio}%"),
    )
}

fn criterion_3() -> Outcome {
    let total = true_param_count(&build_esnet(20).unwrap()).total;
    outcome(
        (1_490_000..=1_830_000).contains(&total),
        format!("{total} learnable parameters"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cases = run_suite(SuiteScale::Small).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let required = [
        "dilation 2",
        "dilation 5",
        "dilation 9",
        "3x1",
        "1x3",
        "transposed",
        "batchnorm2d",
        "cross-entropy",
        "FCU(3)",
        "FCU(5)",
        "PFCU(2,5,9)",
        "network 3x32x16 running statistics",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|r| !cases.iter().any(|c| c.name.contains(r)))
        .collect();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {:.2e}", c.name, c.report.max_rel_error))
        .collect();
    let strict_max = cases
        .iter()
        .filter(|c| c.tolerance <= 1e-4)
        .map(|c| c.report.max_rel_error)
        .fold(0.0, f64::max);
    let batch = cases
        .iter()
        .find(|c| c.name.contains("batch statistics"))
        .unwrap();
    outcome(
        missing.is_empty() && failed.is_empty() && strict_max < 1e-4 && secs < 300.0,
        format!(
            "{} cases, max error {strict_max:.2e} at tolerance 1e-4, train-mode network {:.2e} at 1e-3, {secs:.0} s{}{}",
            cases.len(),
            batch.report.max_rel_error,
            if missing.is_empty() { String::new() } else { format!(", missing {missing:?}") },
            if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") },
        ),
    )
}

fn brute_conv(x: &Tensor4<f64>, p: &ConvParams<f64>) -> Tensor4<f64> {
    let s = x.shape();
    let [co, ci, kh, kw] = p.weight.shape().to_array();
    let (ph, pw) = p.padding;
    let oh = s.h + 2 * ph - (kh - 1) * p.dilation.0;
    let ow = s.w + 2 * pw - (kw - 1) * p.dilation.1;
    Tensor4::from_fn([s.n, co, oh, ow], |idx| {
        let (j, i, o, n) = (
            idx % ow,
            idx / ow % oh,
            idx / (ow * oh) % co,
            idx / (ow * oh * co),
        );
        let mut acc = 0.0;
        for c in 0..ci {
            for a in 0..kh {
                for b in 0..kw {
                    let r = (i + a * p.dilation.0) as isize - ph as isize;
                    let q = (j + b * p.dilation.1) as isize - pw as isize;
                    if (0..s.h as isize).contains(&r) && (0..s.w as isize).contains(&q) {
                        acc += p.weight.get(o, c, a, b) * x.get(n, c, r as usize, q as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Gradient of `<conv(x), u>` with respect to `x`, by scattering.
fn brute_input_grad(xs: [usize; 4], p: &ConvParams<f64>, u: &Tensor4<f64>) -> Tensor4<f64> {
    let mut g = Tensor4::zeros(xs);
    let [co, ci, kh, kw] = p.weight.shape().to_array();
    let us = u.shape();
    for n in 0..us.n {
        for o in 0..co {
            for i in 0..us.h {
                for j in 0..us.w {
                    for c in 0..ci {
                        for a in 0..kh {
                            for b in 0..kw {
                                let r = (i * p.stride.0 + a * p.dilation.0) as isize
                                    - p.padding.0 as isize;
                                let q = (j * p.stride.1 + b * p.dilation.1) as isize
                                    - p.padding.1 as isize;
                                if (0..xs[2] as isize).contains(&r)
                                    && (0..xs[3] as isize).contains(&q)
                                {
                                    let (r, q) = (r as usize, q as usize);
                                    let v = g.get(n, c, r, q)
                                        + p.weight.get(o, c, a, b) * u.get(n, o, i, j);
                                    g.set(n, c, r, q, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    g
}

fn criterion_5() -> Outcome {
    let x = random_tensor([2, 3, 9, 8], 1);
    let p = ConvParams::new(random_tensor([4, 3, 3, 3], 2)).with_padding(1, 1);
    let brute = conv2d(&x, &p).unwrap().max_abs_diff(&brute_conv(&x, &p));

    let mut rank1: f64 = 0.0;
    for (k, d) in [(3, 1), (5, 1), (3, 2)] {
        let u = random_tensor([1, 1, k, 1], 3 + k as u64);
        let v = random_tensor([1, 1, 1, k], 4 + k as u64);
        let full = Tensor4::from_fn([1, 1, k, k], |i| u.data()[i / k] * v.data()[i % k]);
        let x = random_tensor([1, 1, 12, 11], 5);
        let pad = d * (k - 1) / 2;
        let col = ConvParams::new(u).with_dilation(d, d).with_padding(pad, 0);
        let row = ConvParams::new(v).with_dilation(d, d).with_padding(0, pad);
        let sq = ConvParams::new(full)
            .with_dilation(d, d)
            .with_padding(pad, pad);
        let pair = conv2d(&conv2d(&x, &col).unwrap(), &row).unwrap();
        rank1 = rank1.max(pair.max_abs_diff(&conv2d(&x, &sq).unwrap()));
    }

    let mut adjoint: f64 = 0.0;
    for (s, d) in [(2, 1), (1, 2), (2, 2)] {
        let p = ConvParams::new(random_tensor([3, 2, 3, 3], 6))
            .with_stride(s, s)
            .with_dilation(d, d)
            .with_padding(d, d);
        let xs = [2, 2, 10, 9];
        let y = conv2d(&Tensor4::zeros(xs), &p).unwrap();
        let u = random_tensor(y.shape(), 7);
        let o = ((10 - 1) % s, (9 - 1) % s);
        let t = transposed_conv2d(&u, &p, o).unwrap();
        adjoint = adjoint.max(t.max_abs_diff(&brute_input_grad(xs, &p, &u)));
    }

    let mut fcu = Block::<f64>::init(BlockSpec::fcu(6, 3).unwrap(), &mut rng(8)).unwrap();
    randomize_block(&mut fcu, 9);
    let mut nb = Block::<f64>::zeroed(BlockSpec::non_bt_1d(6, 1).unwrap()).unwrap();
    let mut values = Vec::new();
    fcu.for_each_param("", &mut |_, d| values.push(d.to_vec()));
    let mut k = 0;
    nb.for_each_param_mut("", &mut |_, d| {
        d.copy_from_slice(&values[k]);
        k += 1;
    });
    let x = random_tensor([2, 6, 8, 7], 10);
    let same = [Mode::Train, Mode::Infer]
        .iter()
        .all(|&m| fcu.forward(&x, m).unwrap().0 == nb.forward(&x, m).unwrap().0);

    outcome(
        brute <= 1e-12 && rank1 <= 1e-10 && adjoint <= 1e-12 && same,
        format!("brute force {brute:.1e}, rank-1 {rank1:.1e}, adjoint {adjoint:.1e}, NonBt1D == FCU(3): {same}"),
    )
}

fn permuted_pfcu(pfcu: &Block<f64>, rates: [usize; 3], perm: [usize; 3]) -> Block<f64> {
    let mut values = HashMap::new();
    pfcu.for_each_param("p", &mut |i, d| {
        values.insert(i.name, d.to_vec());
    });
    let mut out =
        Block::<f64>::zeroed(BlockSpec::pfcu(8, &perm.map(|p| rates[p])).unwrap()).unwrap();
    out.for_each_param_mut("p", &mut |i, d| {
        let (layer, field) = i.name["p.".len()..].split_once('.').unwrap();
        let digit = layer.find(|c: char| c.is_ascii_digit()).unwrap();
        let (kind, idx) = (&layer[..digit], layer[digit..].parse::<usize>().unwrap());
        let src = match kind {
            "conv" if idx >= 2 => 2 + 2 * perm[(idx - 2) / 2] + (idx - 2) % 2,
            "bn" if idx >= 1 => 1 + perm[idx - 1],
            _ => idx,
        };
        d.copy_from_slice(&values[&format!("p.{kind}{src}.{field}")]);
    });
    out
}

fn criterion_6() -> Outcome {
    let x = random_tensor([2, 8, 10, 9], 11).map(|v| 4.0 * v);
    let specs = [
        BlockSpec::fcu(8, 3).unwrap(),
        BlockSpec::fcu(8, 5).unwrap(),
        BlockSpec::pfcu(8, &[2, 5, 9]).unwrap(),
    ];
    let identity = specs.iter().all(|&s| {
        let b = Block::<f64>::zeroed(s).unwrap();
        [Mode::Train, Mode::Infer]
            .iter()
            .all(|&m| b.forward(&x, m).unwrap().0 == relu(&x))
    });
    let rates = [2, 5, 9];
    let mut pfcu = Block::<f64>::init(BlockSpec::pfcu(8, &rates).unwrap(), &mut rng(12)).unwrap();
    randomize_block(&mut pfcu, 13);
    let mut permutations = 0;
    for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let other = permuted_pfcu(&pfcu, rates, perm);
        if [Mode::Train, Mode::Infer].iter().all(|&m| {
            pfcu.forward(&x, m).unwrap().0.data() == other.forward(&x, m).unwrap().0.data()
        }) {
            permutations += 1;
        }
    }
    outcome(
        identity && permutations == 5,
        format!("zero blocks == relu: {identity}, bitwise-equal permutations {permutations}/5"),
    )
}

fn criterion_7() -> Outcome {
    let single = |d: usize| {
        let l = ConvLayout {
            cin: 1,
            cout: 1,
            kernel: (3, 3),
            stride: (1, 1),
            dilation: (d, d),
            padding: (d, d),
            transposed: false,
            output_padding: (0, 0),
            path: ConvPath::Main,
            bias: false,
        };
        RfState::INPUT.through(&l).max_rf()
    };
    let rows = receptive_field(&build_esnet(20).unwrap());
    let mut ordered = true;
    for stage in ["block3_pfcu1", "block3_pfcu2", "block3_pfcu3"] {
        let rf = |rate| {
            rows.iter()
                .find(|r| r.layer.starts_with(stage) && r.branch_rate == Some(rate))
                .unwrap()
                .state
                .max_rf()
        };
        ordered &= rf(9) > rf(5) && rf(5) > rf(2);
    }
    let encoder: Vec<u64> = rows
        .iter()
        .filter(|r| r.branch_rate.is_none())
        .take_while(|r| !r.layer.starts_with("block4"))
        .map(|r| r.state.max_rf())
        .collect();
    let monotone = encoder.windows(2).all(|w| w[0] <= w[1]);
    let (a, b) = (single(1), single(2));
    outcome(
        a == 3 && b == 5 && ordered && monotone,
        format!(
            "3x3 -> {a}, 3x3 r=2 -> {b}, r9 > r5 > r2: {ordered}, encoder {} -> {} non-decreasing: {monotone}",
            encoder[0],
            encoder.last().unwrap()
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let data = synth_dataset(8, (32, 32), 4, 1).unwrap();
    let spec = build_esnet_scaled(4, [16, 32, 64], [3, 32, 32]).unwrap();
    let mut net = Network::<f64>::init(spec, 1).unwrap();
    let mut state = OptimizerState::new(SgdConfig::recipe(500)).unwrap();
    let report = train_toy(&mut net, &data, 500, 4, 1, &mut state).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (first, last) = (report.curve[0].loss, report.curve[499].loss);
    let acc = report.pixel_accuracy;
    outcome(
        acc >= 0.95 && last <= 0.5 * first && secs < 600.0,
        format!(
            "widths 16/32/64, 500 steps: accuracy {:.1}% (need 95%), loss {first:.3} -> {last:.3} ({:.0}% of initial), {secs:.0} s",
            100.0 * acc,
            100.0 * last / first
        ),
    )
}

fn criterion_9() -> Outcome {
    let spec = build_esnet_scaled(4, [4, 8, 16], [3, 32, 32]).unwrap();
    let x = random_tensor([2, 3, 32, 32], 14);
    let logits = || {
        Network::<f64>::init(spec.clone(), 5)
            .unwrap()
            .forward(&x)
            .unwrap()
    };
    let (l1, l2) = (logits(), logits());
    let same_logits = l1
        .data()
        .iter()
        .zip(l2.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let data = synth_dataset(8, (32, 32), 4, 6).unwrap();
    let train = || {
        let mut net = Network::<f64>::init(spec.clone(), 6).unwrap();
        let mut state = OptimizerState::new(SgdConfig::recipe(4)).unwrap();
        let r = train_toy(&mut net, &data, 4, 4, 6, &mut state).unwrap();
        let curve: Vec<u64> = r.curve.iter().map(|p| p.loss.to_bits()).collect();
        (
            curve,
            weights::encode(&net.cast::<f32>().param_store()).unwrap(),
        )
    };
    let ((c1, w1), (c2, w2)) = (train(), train());
    let same_runs = c1 == c2 && w1 == w2;

    let esnw = weights::encode(&weights::decode(&w1).unwrap()).unwrap() == w1;
    let rgb = pnm::Image8::new(5, 3, 3, (0..45).map(|i| (i * 53 % 256) as u8).collect());
    let ppm = rgb.encode();
    let ppm_ok = pnm::decode(&ppm, 3).unwrap().encode() == ppm
        && pnm::tensor_to_rgb(&pnm::rgb_to_tensor(&rgb)) == rgb;
    let labels = LabelMap::new(1, 3, 4, vec![0, 1, 2, 3, 4, 5, 19, 200, 255, 0, 7, 1]).unwrap();
    let pgm = pnm::labels_to_gray(&labels).unwrap().encode();
    let pgm_ok = pnm::decode(&pgm, 1).unwrap().encode() == pgm
        && pnm::gray_to_labels(&pnm::decode(&pgm, 1).unwrap()) == labels;
    outcome(
        same_logits && same_runs && esnw && ppm_ok && pgm_ok,
        format!(
            "logits {same_logits}, loss curve and weights file {same_runs}, round-trips ESNW {esnw} PPM {ppm_ok} PGM {pgm_ok}"
        ),
    )
}

fn criterion_10() -> Outcome {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/esnet.json");
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run_cli(
        [
            "esnet",
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--size",
            "1024x512",
            "--runs",
            "2",
            "--warmup",
            "0",
        ],
        &mut out,
        &mut err,
    );
    let text = String::from_utf8_lossy(&out).into_owned() + &String::from_utf8_lossy(&err);
    let line = text
        .lines()
        .find(|l| l.starts_with("latency:"))
        .unwrap_or("no latency line");
    outcome(
        code == 0 && line.contains("stddev"),
        format!("exit {code}, {line}"),
    )
}

fn main() {
    let criteria: [(&str, Criterion); 10] = [
        ("architecture stage sizes", criterion_1),
        ("residual weight accounting", criterion_2),
        ("parameter count", criterion_3),
        ("gradient checks", criterion_4),
        ("oracle equivalences", criterion_5),
        ("identity blocks and branch permutation", criterion_6),
        ("receptive fields", criterion_7),
        ("desk-scale learning", criterion_8),
        ("determinism and round-trips", criterion_9),
        ("throughput harness", criterion_10),
    ];
    let mut unexpected = Vec::new();
    let mut passed = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let mark = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {mark} {title}: {}", o.detail);
        if o.pass {
            passed += 1;
        } else if !KNOWN_FAILING.contains(&n) {
            unexpected.push(n);
        }
    }
    println!("{passed} of {} criteria pass", criteria.len());
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
