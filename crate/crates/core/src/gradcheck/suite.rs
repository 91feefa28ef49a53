//! The standard gradient-check suite: the differentiable ops, every block
//! kind and a width-scaled network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, grad_check_piecewise, GradCheckOptions, GradCheckReport};
use crate::blocks::{Block, BlockSpec};
use crate::error::Result;
use crate::network::{build_esnet_scaled, Network};
use crate::params::ParamKind;
use crate::tensor::{
    batchnorm2d_backward, batchnorm2d_forward, conv2d, conv2d_backward, pixel_cross_entropy,
    softmax_cross_entropy, transposed_conv2d, transposed_conv2d_backward, BnParams, ConvParams,
    LabelMap, Mode, Shape4, Tensor4,
};

pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative step for block checks. Train-mode normalization amplifies
/// rounding noise enough that 1e-6 sits on the noise floor.
pub const BLOCK_EPS: f64 = 1e-5;
/// Train-mode network checks, where exact zeros meet a rounding floor.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteScale {
    /// Network on 3×32×16 input with widths 4/8/16.
    Small,
    /// Network on 3×16×8 input with widths 4/6/8 and fewer coordinates.
    Tiny,
}

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    pub tolerance: f64,
    /// Largest tolerated share of skipped coordinates.
    pub max_skipped: f64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    fn new(name: impl Into<String>, tolerance: f64, report: GradCheckReport) -> Self {
        SuiteCase {
            name: name.into(),
            tolerance,
            max_skipped: 0.0,
            report,
        }
    }

    pub fn passed(&self) -> bool {
        let seen = (self.report.checked + self.report.skipped).max(1);
        self.report.passes(self.tolerance)
            && self.report.skipped as f64 <= self.max_skipped * seen as f64
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: impl Into<Shape4>, seed: u64) -> Tensor4<f64> {
    let mut r = rng(seed);
    Tensor4::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn random_labels(n: usize, h: usize, w: usize, classes: u32, seed: u64) -> LabelMap {
    let mut r = rng(seed);
    let data = (0..n * h * w).map(|_| r.gen_range(0..classes)).collect();
    LabelMap::new(n, h, w, data).expect("label count matches dims")
}

fn perturb(kind: ParamKind, data: &mut [f64], r: &mut ChaCha8Rng) {
    match kind {
        ParamKind::ConvBias | ParamKind::NormShift => {
            data.iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2))
        }
        ParamKind::NormScale => data.iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5)),
        _ => {}
    }
}

/// Moves biases and BN scales and shifts away from their initial values so
/// that no gradient vanishes by symmetry.
pub fn randomize_block(block: &mut Block<f64>, seed: u64) {
    let mut r = rng(seed);
    block.for_each_param_mut("", &mut |i, d| perturb(i.kind, d, &mut r));
}

pub fn randomize_network(net: &mut Network<f64>, seed: u64) {
    let mut r = rng(seed);
    net.for_each_learnable_mut(&mut |i, d| perturb(i.kind, d, &mut r));
}

fn learnable(block: &Block<f64>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    block.for_each_param("", &mut |i, d| {
        if i.kind.is_learnable() {
            out.push(d.to_vec())
        }
    });
    out
}

fn load_learnable(block: &mut Block<f64>, groups: &[Vec<f64>]) {
    let mut k = 0;
    block.for_each_param_mut("", &mut |i, d| {
        if i.kind.is_learnable() {
            d.copy_from_slice(&groups[k]);
            k += 1;
        }
    });
}

/// `sum(dy ⊙ (y − y0))`: the same function as `sum(dy ⊙ y)` up to a
/// constant, without the cancellation of two large sums.
fn centered_dot(y: &Tensor4<f64>, y0: &Tensor4<f64>, dy: &Tensor4<f64>) -> f64 {
    y.data()
        .iter()
        .zip(y0.data())
        .zip(dy.data())
        .map(|((a, b), d)| (a - b) * d)
        .sum()
}

/// `sum(dy ⊙ conv2d(x))` against the input, weight and bias.
pub fn conv_grad_check(
    x: &Tensor4<f64>,
    p: &ConvParams<f64>,
    seed: u64,
) -> Result<GradCheckReport> {
    let y = conv2d(x, p)?;
    let dy = random_tensor(y.shape(), seed);
    let g = conv2d_backward(x, p, &dy)?;
    let bias = p.bias.clone().unwrap_or_default();
    let point = vec![x.data().to_vec(), p.weight.data().to_vec(), bias];
    let analytic = vec![g.input.into_vec(), g.weight.into_vec(), g.bias];
    let (ws, xs) = (p.weight.shape(), x.shape());
    let mut probe = p.clone();
    grad_check(
        &point,
        &analytic,
        |v| {
            probe.weight = Tensor4::from_vec(ws, v[1].clone())?;
            if probe.bias.is_some() {
                probe.bias = Some(v[2].clone());
            }
            Ok(centered_dot(
                &conv2d(&Tensor4::from_vec(xs, v[0].clone())?, &probe)?,
                &y,
                &dy,
            ))
        },
        GradCheckOptions::default(),
    )
}

pub fn transposed_grad_check(
    x: &Tensor4<f64>,
    p: &ConvParams<f64>,
    output_padding: (usize, usize),
    seed: u64,
) -> Result<GradCheckReport> {
    let y = transposed_conv2d(x, p, output_padding)?;
    let dy = random_tensor(y.shape(), seed);
    let g = transposed_conv2d_backward(x, p, output_padding, &dy)?;
    let bias = p.bias.clone().unwrap_or_default();
    let point = vec![x.data().to_vec(), p.weight.data().to_vec(), bias];
    let analytic = vec![g.input.into_vec(), g.weight.into_vec(), g.bias];
    let (ws, xs) = (p.weight.shape(), x.shape());
    let mut probe = p.clone();
    grad_check(
        &point,
        &analytic,
        |v| {
            probe.weight = Tensor4::from_vec(ws, v[1].clone())?;
            if probe.bias.is_some() {
                probe.bias = Some(v[2].clone());
            }
            let xi = Tensor4::from_vec(xs, v[0].clone())?;
            Ok(centered_dot(
                &transposed_conv2d(&xi, &probe, output_padding)?,
                &y,
                &dy,
            ))
        },
        GradCheckOptions::default(),
    )
}

/// Input, scale and shift gradients of batch norm in the given mode.
pub fn bn_grad_check(
    x: &Tensor4<f64>,
    p: &BnParams<f64>,
    mode: Mode,
    seed: u64,
) -> Result<GradCheckReport> {
    let (y, cache) = batchnorm2d_forward(x, p, mode)?;
    let dy = random_tensor(y.shape(), seed);
    let g = batchnorm2d_backward(&cache, p, &dy)?;
    let point = vec![x.data().to_vec(), p.gamma.clone(), p.beta.clone()];
    let analytic = vec![g.input.into_vec(), g.gamma, g.beta];
    let mut probe = p.clone();
    grad_check(
        &point,
        &analytic,
        |v| {
            probe.gamma = v[1].clone();
            probe.beta = v[2].clone();
            let xi = Tensor4::from_vec(x.shape(), v[0].clone())?;
            Ok(centered_dot(
                &batchnorm2d_forward(&xi, &probe, mode)?.0,
                &y,
                &dy,
            ))
        },
        GradCheckOptions::default(),
    )
}

pub fn cross_entropy_grad_check(
    logits: &Tensor4<f64>,
    labels: &LabelMap,
    ignore: u32,
) -> Result<GradCheckReport> {
    let (_, d) = softmax_cross_entropy(logits, labels, ignore)?;
    let shape = logits.shape();
    grad_check(
        &[logits.data().to_vec()],
        &[d.into_vec()],
        |v| Ok(softmax_cross_entropy(&Tensor4::from_vec(shape, v[0].clone())?, labels, ignore)?.0),
        GradCheckOptions::default(),
    )
}

fn pattern(cache: &crate::blocks::BlockCache<f64>) -> Vec<u32> {
    let mut out = Vec::new();
    cache.activation_pattern(&mut out);
    out
}

/// Checks `x ↦ sum(dy ⊙ block(x))` in train mode against the input and
/// every learnable parameter. Probes that flip a rectifier or a pooling
/// winner are skipped.
pub fn block_grad_check(
    block: &Block<f64>,
    x: &Tensor4<f64>,
    seed: u64,
) -> Result<GradCheckReport> {
    let (y, cache) = block.forward_recorded(x, Mode::Train)?;
    let dy = random_tensor(y.shape(), seed);
    let (dx, grads) = block.backward(&cache, &dy)?;
    let base = pattern(&cache);
    let mut analytic = vec![dx.data().to_vec()];
    grads.flatten_into(&mut analytic);
    let mut point = vec![x.data().to_vec()];
    point.extend(learnable(block));

    let mut probe = block.clone();
    let shape = x.shape();
    grad_check_piecewise(
        &point,
        &analytic,
        |p| {
            load_learnable(&mut probe, &p[1..]);
            let xi = Tensor4::from_vec(shape, p[0].clone())?;
            let (yi, c) = probe.forward_recorded(&xi, Mode::Train)?;
            Ok((pattern(&c) == base).then(|| centered_dot(&yi, &y, &dy)))
        },
        GradCheckOptions {
            eps: BLOCK_EPS,
            ..Default::default()
        },
    )
}

/// Mean cross-entropy of the logits against every learnable parameter and
/// the input. Probes that flip a rectifier or a pooling winner are skipped.
pub fn network_grad_check(
    net: &Network<f64>,
    x: &Tensor4<f64>,
    labels: &LabelMap,
    mode: Mode,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    const IGNORE: u32 = u32::MAX;
    let (logits, tape) = net.forward_recorded(x, mode)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, labels, IGNORE)?;
    let base = pixel_cross_entropy(&logits, labels, IGNORE)?;
    let valid = labels.data.len().max(1) as f64;
    let grads = net.backward(&tape, &dlogits)?;
    let pattern = tape.activation_pattern();
    let mut analytic = vec![grads.input.data().to_vec()];
    analytic.extend(grads.flatten());

    let mut point = vec![x.data().to_vec()];
    let mut probe = net.clone();
    probe.for_each_learnable_mut(&mut |_, d| point.push(d.to_vec()));
    let shape = x.shape();
    grad_check_piecewise(
        &point,
        &analytic,
        |p| {
            let mut k = 1;
            probe.for_each_learnable_mut(&mut |_, d| {
                d.copy_from_slice(&p[k]);
                k += 1;
            });
            let xi = Tensor4::from_vec(shape, p[0].clone())?;
            let (logits, t) = probe.forward_recorded(&xi, mode)?;
            if t.activation_pattern() != pattern {
                return Ok(None);
            }
            let px = pixel_cross_entropy(&logits, labels, IGNORE)?;
            Ok(Some(
                px.iter().zip(&base).map(|(a, b)| a - b).sum::<f64>() / valid,
            ))
        },
        opts,
    )
}

fn conv_params(dims: [usize; 4], seed: u64) -> ConvParams<f64> {
    let bias = random_tensor([1, 1, 1, dims[0]], seed + 7).into_vec();
    ConvParams::new(random_tensor(dims, seed)).with_bias(bias)
}

/// Randomized block on a random input, checked in train mode.
pub fn check_block(spec: BlockSpec, x_shape: [usize; 4], seed: u64) -> Result<GradCheckReport> {
    let mut block = Block::init(spec, &mut rng(seed))?;
    randomize_block(&mut block, seed + 1);
    let x = random_tensor(x_shape, seed + 2);
    block_grad_check(&block, &x, seed + 3)
}

/// Width-scaled ESNet with four classes and randomized affine parameters.
pub fn check_scaled_network(
    widths: [usize; 3],
    dims: [usize; 3],
    batch: usize,
    mode: Mode,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let spec = build_esnet_scaled(4, widths, dims)?;
    let mut net = Network::<f64>::init(spec, 70)?;
    randomize_network(&mut net, 71);
    let [c, h, w] = dims;
    let x = random_tensor([batch, c, h, w], 72);
    let labels = random_labels(batch, h, w, 4, 73);
    network_grad_check(&net, &x, &labels, mode, opts)
}

pub fn op_cases() -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    let tol = OP_TOLERANCE;
    for d in [2, 5, 9] {
        let p = conv_params([3, 2, 3, 3], d as u64)
            .with_dilation(d, d)
            .with_same_padding();
        let r = conv_grad_check(
            &random_tensor([2, 2, 11, 10], 10 + d as u64),
            &p,
            20 + d as u64,
        )?;
        out.push(SuiteCase::new(format!("conv2d 3x3 dilation {d}"), tol, r));
    }
    for (kh, kw) in [(3, 1), (1, 3), (5, 1), (1, 5)] {
        let p = conv_params([2, 3, kh, kw], 3).with_same_padding();
        let r = conv_grad_check(&random_tensor([1, 3, 7, 6], 4), &p, 5)?;
        out.push(SuiteCase::new(format!("conv2d {kh}x{kw}"), tol, r));
        let p = p.with_dilation(2, 3).with_same_padding();
        let r = conv_grad_check(&random_tensor([1, 3, 9, 9], 6), &p, 7)?;
        out.push(SuiteCase::new(
            format!("conv2d {kh}x{kw} dilation 2x3"),
            tol,
            r,
        ));
    }
    let p = conv_params([4, 3, 3, 3], 8)
        .with_stride(2, 2)
        .with_padding(1, 1);
    let r = conv_grad_check(&random_tensor([2, 3, 8, 6], 9), &p, 10)?;
    out.push(SuiteCase::new("conv2d stride 2", tol, r));

    let p = ConvParams::new(random_tensor([3, 2, 3, 3], 11))
        .with_bias(vec![0.3, -0.2])
        .with_stride(2, 2)
        .with_padding(1, 1);
    let r = transposed_grad_check(&random_tensor([2, 3, 4, 5], 12), &p, (1, 1), 13)?;
    out.push(SuiteCase::new("transposed conv2d", tol, r));

    let x = random_tensor([3, 2, 4, 5], 20).map(|v| 2.0 * v + 0.5);
    let mut bn = BnParams::new(2);
    bn.gamma = vec![1.3, 0.7];
    bn.beta = vec![0.1, -0.4];
    bn.running_mean = vec![0.2, -0.1];
    bn.running_var = vec![1.5, 0.6];
    for mode in [Mode::Train, Mode::Infer] {
        let r = bn_grad_check(&x, &bn, mode, 21)?;
        out.push(SuiteCase::new(format!("batchnorm2d {mode:?}"), tol, r));
    }

    let logits = random_tensor([1, 4, 3, 3], 30).scale(2.0);
    let mut labels = random_labels(1, 3, 3, 4, 31);
    labels.data[4] = 255;
    let r = cross_entropy_grad_check(&logits, &labels, 255)?;
    out.push(SuiteCase::new("softmax cross-entropy", tol, r));
    Ok(out)
}

pub fn block_cases() -> Result<Vec<SuiteCase>> {
    let cases: [(&str, BlockSpec, [usize; 4]); 9] = [
        ("FCU(3)", BlockSpec::fcu(3, 3)?, [2, 3, 6, 5]),
        ("FCU(5)", BlockSpec::fcu(3, 5)?, [2, 3, 7, 6]),
        (
            "PFCU(2,5,9)",
            BlockSpec::pfcu(2, &[2, 5, 9])?,
            [2, 2, 10, 11],
        ),
        (
            "downsampling unit",
            BlockSpec::downsample(3, 5)?,
            [2, 3, 6, 4],
        ),
        ("upsampling unit", BlockSpec::upsample(3, 2)?, [2, 3, 3, 4]),
        ("full conv", BlockSpec::full_conv(3, 4)?, [1, 3, 3, 2]),
        (
            "non-bottleneck",
            BlockSpec::non_bottleneck(3)?,
            [2, 3, 5, 5],
        ),
        ("bottleneck", BlockSpec::bottleneck(8)?, [2, 8, 4, 4]),
        (
            "non-bt-1D dilation 2",
            BlockSpec::non_bt_1d(2, 2)?,
            [2, 2, 6, 6],
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, spec, shape))| {
            let r = check_block(spec, shape, 40 + 4 * i as u64)?;
            let mut case = SuiteCase::new(name, OP_TOLERANCE, r);
            case.max_skipped = 0.05;
            Ok(case)
        })
        .collect()
}

/// The network checked twice: with fixed normalization statistics at the
/// op tolerance, and with batch statistics at the network tolerance.
pub fn network_cases(scale: SuiteScale) -> Result<Vec<SuiteCase>> {
    let (widths, dims, max_coords) = match scale {
        SuiteScale::Small => ([4, 8, 16], [3, 32, 16], 10_000),
        SuiteScale::Tiny => ([4, 6, 8], [3, 16, 8], 2_000),
    };
    let label = format!("network {}x{}x{}", dims[0], dims[1], dims[2]);
    let fixed = GradCheckOptions {
        eps: 1e-6,
        max_coords,
        seed: 0,
    };
    let r = check_scaled_network(widths, dims, 2, Mode::Infer, fixed)?;
    let mut infer = SuiteCase::new(format!("{label} running statistics"), OP_TOLERANCE, r);
    infer.max_skipped = 0.05;
    let batch = GradCheckOptions { eps: 1e-5, ..fixed };
    let r = check_scaled_network(widths, dims, 4, Mode::Train, batch)?;
    let mut train = SuiteCase::new(format!("{label} batch statistics"), NETWORK_TOLERANCE, r);
    train.max_skipped = 0.2;
    Ok(vec![infer, train])
}

pub fn run_suite(scale: SuiteScale) -> Result<Vec<SuiteCase>> {
    let mut out = op_cases()?;
    out.extend(block_cases()?);
    out.extend(network_cases(scale)?);
    Ok(out)
}
