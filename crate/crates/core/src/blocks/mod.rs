//! Residual and resampling blocks.
//!
//! A block owns its convolutions and batch-norm layers as flat lists whose
//! order is fixed by [`BlockSpec::conv_layouts`] and [`BlockSpec::bn_channels`].
//! Convolution, normalization and activation are applied in the order
//!
//! * factorized pair: `K×1 -> ReLU -> 1×K -> BN`, followed by ReLU unless the
//!   pair ends the residual path,
//! * PFCU: shared pair with ReLU, then three dilated pairs ending in BN,
//! * residual merge: `ReLU(identity + path)`.

mod spec;

use rand::Rng;

pub use spec::{BlockKind, BlockSpec, ConvLayout, ConvPath};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, ParamInfo, ParamKind};
use crate::tensor::{
    add_assign, batchnorm2d_backward, batchnorm2d_forward, concat_channels, conv2d,
    conv2d_backward, maxpool2d_backward, maxpool2d_with_indices, relu, relu_backward,
    split_channels, transposed_conv2d, transposed_conv2d_backward, BnCache, BnParams, ConvParams,
    Mode, Scalar, Shape4, Tensor4,
};

#[derive(Clone, Copy, Debug)]
enum Node {
    Conv(usize),
    ConvT(usize),
    Bn(usize),
    Relu,
}

const FACTORIZED_PATH: &[Node] = &[
    Node::Conv(0),
    Node::Relu,
    Node::Conv(1),
    Node::Bn(0),
    Node::Relu,
    Node::Conv(2),
    Node::Relu,
    Node::Conv(3),
    Node::Bn(1),
];
const NON_BOTTLENECK_PATH: &[Node] = &[
    Node::Conv(0),
    Node::Bn(0),
    Node::Relu,
    Node::Conv(1),
    Node::Bn(1),
];
const BOTTLENECK_PATH: &[Node] = &[
    Node::Conv(0),
    Node::Bn(0),
    Node::Relu,
    Node::Conv(1),
    Node::Bn(1),
    Node::Relu,
    Node::Conv(2),
    Node::Bn(2),
];
const PFCU_SHARED: &[Node] = &[
    Node::Conv(0),
    Node::Relu,
    Node::Conv(1),
    Node::Bn(0),
    Node::Relu,
];
const UPSAMPLE_PATH: &[Node] = &[Node::ConvT(0), Node::Bn(0), Node::Relu];
const FULL_CONV_PATH: &[Node] = &[Node::ConvT(0)];

fn pfcu_branch(i: usize) -> [Node; 4] {
    [
        Node::Conv(2 + 2 * i),
        Node::Relu,
        Node::Conv(3 + 2 * i),
        Node::Bn(1 + i),
    ]
}

#[derive(Clone, Debug)]
enum NodeCache<T> {
    Conv(Tensor4<T>),
    Bn(usize, BnCache<T>),
    Relu(Tensor4<T>),
}

#[derive(Clone, Debug)]
enum CacheKind<T> {
    Residual {
        path: Vec<NodeCache<T>>,
        output: Tensor4<T>,
    },
    Pfcu {
        shared: Vec<NodeCache<T>>,
        branches: Vec<Vec<NodeCache<T>>>,
        output: Tensor4<T>,
    },
    Downsample {
        input: Tensor4<T>,
        pool_indices: Vec<u32>,
        bn: BnCache<T>,
        output: Tensor4<T>,
    },
    Path(Vec<NodeCache<T>>),
}

/// Everything a block's backward pass needs from its forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    kind: CacheKind<T>,
}

impl<T: Scalar> BlockCache<T> {
    /// Appends the sign of every rectified unit and the winning element of
    /// every pooling window. Two forwards with equal patterns lie in the same
    /// linear region of the piecewise-linear ops.
    pub fn activation_pattern(&self, out: &mut Vec<u32>) {
        fn signs<T: Scalar>(y: &Tensor4<T>, out: &mut Vec<u32>) {
            out.extend(y.data().iter().map(|&v| u32::from(v > T::zero())));
        }
        fn from_path<T: Scalar>(path: &[NodeCache<T>], out: &mut Vec<u32>) {
            for c in path {
                if let NodeCache::Relu(y) = c {
                    signs(y, out);
                }
            }
        }
        match &self.kind {
            CacheKind::Residual { path, output } => {
                from_path(path, out);
                signs(output, out);
            }
            CacheKind::Pfcu {
                shared,
                branches,
                output,
            } => {
                from_path(shared, out);
                for b in branches {
                    from_path(b, out);
                }
                signs(output, out);
            }
            CacheKind::Downsample {
                pool_indices,
                output,
                ..
            } => {
                out.extend_from_slice(pool_indices);
                signs(output, out);
            }
            CacheKind::Path(path) => from_path(path, out),
        }
    }

    /// Train-mode batch-norm caches, keyed by BN index within the block.
    pub fn bn_caches(&self) -> Vec<(usize, &BnCache<T>)> {
        fn from_path<'a, T>(path: &'a [NodeCache<T>], out: &mut Vec<(usize, &'a BnCache<T>)>) {
            for c in path {
                if let NodeCache::Bn(i, cache) = c {
                    out.push((*i, cache));
                }
            }
        }
        let mut out = Vec::new();
        match &self.kind {
            CacheKind::Residual { path, .. } | CacheKind::Path(path) => from_path(path, &mut out),
            CacheKind::Pfcu {
                shared, branches, ..
            } => {
                from_path(shared, &mut out);
                for b in branches {
                    from_path(b, &mut out);
                }
            }
            CacheKind::Downsample { bn, .. } => out.push((0, bn)),
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParamGrads<T> {
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParamGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Gradients for every learnable parameter of a block, laid out like the block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads<T> {
    pub convs: Vec<ConvParamGrads<T>>,
    pub bns: Vec<BnParamGrads<T>>,
}

impl<T: Scalar> BlockGrads<T> {
    /// Learnable gradients in parameter order: each conv's weight then bias,
    /// then each BN's gamma and beta.
    pub fn flatten_into(&self, out: &mut Vec<Vec<T>>) {
        for c in &self.convs {
            out.push(c.weight.data().to_vec());
            if let Some(b) = &c.bias {
                out.push(b.clone());
            }
        }
        for b in &self.bns {
            out.push(b.gamma.clone());
            out.push(b.beta.clone());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    spec: BlockSpec,
    pub convs: Vec<ConvParams<T>>,
    pub bns: Vec<BnParams<T>>,
}

impl<T: Scalar> Block<T> {
    /// All conv weights and biases zero, batch norms at identity.
    pub fn zeroed(spec: BlockSpec) -> Result<Self> {
        spec.validate()?;
        let convs = spec
            .conv_layouts()
            .iter()
            .map(|l| {
                let p = ConvParams::new(Tensor4::zeros(l.weight_dims()))
                    .with_stride(l.stride.0, l.stride.1)
                    .with_dilation(l.dilation.0, l.dilation.1)
                    .with_padding(l.padding.0, l.padding.1);
                if l.bias {
                    p.with_bias(vec![T::zero(); l.cout])
                } else {
                    p
                }
            })
            .collect();
        let bns = spec.bn_channels().into_iter().map(BnParams::new).collect();
        Ok(Block { spec, convs, bns })
    }

    /// Fan-in scaled uniform weights, zero biases, identity batch norms.
    pub fn init<R: Rng + ?Sized>(spec: BlockSpec, rng: &mut R) -> Result<Self> {
        let mut block = Self::zeroed(spec)?;
        for (p, l) in block.convs.iter_mut().zip(spec.conv_layouts()) {
            fan_in_uniform(rng, l.fan_in(), p.weight.data_mut());
        }
        Ok(block)
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    fn output_padding(&self) -> (usize, usize) {
        self.spec.conv_layouts()[0].output_padding
    }

    /// Forward pass. A cache for [`Block::backward`] is returned in train mode.
    pub fn forward(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, Option<BlockCache<T>>)> {
        let (y, kind) = self.run(x, mode, mode == Mode::Train)?;
        Ok((y, kind.map(|kind| BlockCache { kind })))
    }

    /// Forward pass that records a cache in either mode. In infer mode the
    /// backward pass differentiates the fixed affine normalization.
    pub fn forward_recorded(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
    ) -> Result<(Tensor4<T>, BlockCache<T>)> {
        let (y, kind) = self.run(x, mode, true)?;
        let kind = kind.ok_or_else(|| Error::invalid("block", "forward recorded no cache"))?;
        Ok((y, BlockCache { kind }))
    }

    fn run(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor4<T>, Option<CacheKind<T>>)> {
        let s = x.shape();
        self.spec.output_dims([s.c, s.h, s.w])?;
        let (y, kind) = match self.spec.kind {
            BlockKind::Fcu { .. } | BlockKind::NonBt1D { .. } => {
                self.residual(x, FACTORIZED_PATH, mode, record)?
            }
            BlockKind::NonBottleneck => self.residual(x, NON_BOTTLENECK_PATH, mode, record)?,
            BlockKind::Bottleneck => self.residual(x, BOTTLENECK_PATH, mode, record)?,
            BlockKind::Pfcu { .. } => self.pfcu(x, mode, record)?,
            BlockKind::Downsample => self.downsample(x, mode, record)?,
            BlockKind::Upsample => {
                let (y, path) = self.run_path(UPSAMPLE_PATH, x.clone(), mode, record)?;
                (y, CacheKind::Path(path))
            }
            BlockKind::FullConv => {
                let (y, path) = self.run_path(FULL_CONV_PATH, x.clone(), mode, record)?;
                (y, CacheKind::Path(path))
            }
        };
        Ok((y, record.then_some(kind)))
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// estimates.
    pub fn update_running_stats(&mut self, cache: &BlockCache<T>) {
        for (i, bn) in cache.bn_caches() {
            self.bns[i].update_running(bn);
        }
    }

    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        dy: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, BlockGrads<T>)> {
        let mut grads = self.zero_grads();
        let dx = match &cache.kind {
            CacheKind::Residual { path, output } => {
                let d = relu_backward(output, dy)?;
                let nodes = self.residual_nodes()?;
                let mut dx = self.back_path(nodes, path, d.clone(), &mut grads)?;
                add_assign(&mut dx, &d)?;
                dx
            }
            CacheKind::Pfcu {
                shared,
                branches,
                output,
            } => {
                let d = relu_backward(output, dy)?;
                let mut d_shared: Option<Tensor4<T>> = None;
                for (i, cache) in branches.iter().enumerate() {
                    let g = self.back_path(&pfcu_branch(i), cache, d.clone(), &mut grads)?;
                    match d_shared.as_mut() {
                        None => d_shared = Some(g),
                        Some(acc) => add_assign(acc, &g)?,
                    }
                }
                let d_shared = d_shared.expect("three branches");
                let mut dx = self.back_path(PFCU_SHARED, shared, d_shared, &mut grads)?;
                add_assign(&mut dx, &d)?;
                dx
            }
            CacheKind::Downsample {
                input,
                pool_indices,
                bn,
                output,
            } => {
                let d = relu_backward(output, dy)?;
                let bg = batchnorm2d_backward(bn, &self.bns[0], &d)?;
                grads.bns[0] = BnParamGrads {
                    gamma: bg.gamma,
                    beta: bg.beta,
                };
                let conv_channels = self.spec.channels_out - self.spec.channels_in;
                let (d_conv, d_pool) = split_channels(&bg.input, conv_channels)?;
                let cg = conv2d_backward(input, &self.convs[0], &d_conv)?;
                grads.convs[0] = conv_grads(&self.convs[0], cg.weight, cg.bias);
                let mut dx = maxpool2d_backward(input.shape(), pool_indices, &d_pool)?;
                add_assign(&mut dx, &cg.input)?;
                dx
            }
            CacheKind::Path(path) => {
                let nodes = match self.spec.kind {
                    BlockKind::Upsample => UPSAMPLE_PATH,
                    _ => FULL_CONV_PATH,
                };
                self.back_path(nodes, path, dy.clone(), &mut grads)?
            }
        };
        Ok((dx, grads))
    }

    fn residual_nodes(&self) -> Result<&'static [Node]> {
        match self.spec.kind {
            BlockKind::Fcu { .. } | BlockKind::NonBt1D { .. } => Ok(FACTORIZED_PATH),
            BlockKind::NonBottleneck => Ok(NON_BOTTLENECK_PATH),
            BlockKind::Bottleneck => Ok(BOTTLENECK_PATH),
            _ => Err(Error::invalid("block", "cache does not match block kind")),
        }
    }

    fn residual(
        &self,
        x: &Tensor4<T>,
        nodes: &[Node],
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor4<T>, CacheKind<T>)> {
        let (mut y, path) = self.run_path(nodes, x.clone(), mode, record)?;
        add_assign(&mut y, x)?;
        let output = relu(&y);
        Ok((output.clone(), CacheKind::Residual { path, output }))
    }

    fn pfcu(&self, x: &Tensor4<T>, mode: Mode, record: bool) -> Result<(Tensor4<T>, CacheKind<T>)> {
        let (shared_out, shared) = self.run_path(PFCU_SHARED, x.clone(), mode, record)?;
        let mut outs = Vec::with_capacity(3);
        let mut branches = Vec::with_capacity(3);
        for i in 0..3 {
            let (o, c) = self.run_path(&pfcu_branch(i), shared_out.clone(), mode, record)?;
            outs.push(o);
            branches.push(c);
        }
        let merged = merge_branches(&outs[0], &outs[1], &outs[2], x)?;
        let output = relu(&merged);
        Ok((
            output.clone(),
            CacheKind::Pfcu {
                shared,
                branches,
                output,
            },
        ))
    }

    fn downsample(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor4<T>, CacheKind<T>)> {
        let conv = conv2d(x, &self.convs[0])?;
        let (pooled, pool_indices) = maxpool2d_with_indices(x)?;
        let cat = concat_channels(&conv, &pooled)?;
        let (normed, bn) = batchnorm2d_forward(&cat, &self.bns[0], mode)?;
        let output = relu(&normed);
        let kind = if record {
            CacheKind::Downsample {
                input: x.clone(),
                pool_indices,
                bn,
                output: output.clone(),
            }
        } else {
            CacheKind::Path(Vec::new())
        };
        Ok((output, kind))
    }

    fn run_path(
        &self,
        nodes: &[Node],
        mut x: Tensor4<T>,
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor4<T>, Vec<NodeCache<T>>)> {
        let mut caches = Vec::new();
        for node in nodes {
            x = match *node {
                Node::Conv(i) => {
                    let y = conv2d(&x, &self.convs[i])?;
                    if record {
                        caches.push(NodeCache::Conv(x));
                    }
                    y
                }
                Node::ConvT(i) => {
                    let y = transposed_conv2d(&x, &self.convs[i], self.output_padding())?;
                    if record {
                        caches.push(NodeCache::Conv(x));
                    }
                    y
                }
                Node::Bn(i) => {
                    let (y, c) = batchnorm2d_forward(&x, &self.bns[i], mode)?;
                    if record {
                        caches.push(NodeCache::Bn(i, c));
                    }
                    y
                }
                Node::Relu => {
                    let y = relu(&x);
                    if record {
                        caches.push(NodeCache::Relu(y.clone()));
                    }
                    y
                }
            };
        }
        Ok((x, caches))
    }

    fn back_path(
        &self,
        nodes: &[Node],
        caches: &[NodeCache<T>],
        mut dy: Tensor4<T>,
        grads: &mut BlockGrads<T>,
    ) -> Result<Tensor4<T>> {
        if nodes.len() != caches.len() {
            return Err(Error::invalid("block", "cache does not match block layout"));
        }
        for (node, cache) in nodes.iter().zip(caches).rev() {
            dy = match (*node, cache) {
                (Node::Conv(i), NodeCache::Conv(input)) => {
                    let g = conv2d_backward(input, &self.convs[i], &dy)?;
                    grads.convs[i] = conv_grads(&self.convs[i], g.weight, g.bias);
                    g.input
                }
                (Node::ConvT(i), NodeCache::Conv(input)) => {
                    let g = transposed_conv2d_backward(
                        input,
                        &self.convs[i],
                        self.output_padding(),
                        &dy,
                    )?;
                    grads.convs[i] = conv_grads(&self.convs[i], g.weight, g.bias);
                    g.input
                }
                (Node::Bn(i), NodeCache::Bn(_, c)) => {
                    let g = batchnorm2d_backward(c, &self.bns[i], &dy)?;
                    grads.bns[i] = BnParamGrads {
                        gamma: g.gamma,
                        beta: g.beta,
                    };
                    g.input
                }
                (Node::Relu, NodeCache::Relu(y)) => relu_backward(y, &dy)?,
                _ => return Err(Error::invalid("block", "cache does not match block layout")),
            };
        }
        Ok(dy)
    }

    pub fn zero_grads(&self) -> BlockGrads<T> {
        BlockGrads {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParamGrads {
                    weight: Tensor4::zeros(c.weight.shape()),
                    bias: c.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BnParamGrads {
                    gamma: vec![T::zero(); b.channels()],
                    beta: vec![T::zero(); b.channels()],
                })
                .collect(),
        }
    }

    /// Visits every tensor (learnable or not) in parameter order with its
    /// name `"{prefix}.conv{i}.weight"`, `"{prefix}.bn{i}.gamma"` and so on.
    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(ParamInfo, &[T])) {
        for (i, c) in self.convs.iter().enumerate() {
            f(
                info(
                    prefix,
                    "conv",
                    i,
                    ParamKind::ConvWeight,
                    c.weight.shape().to_array().to_vec(),
                ),
                c.weight.data(),
            );
            if let Some(b) = &c.bias {
                f(
                    info(prefix, "conv", i, ParamKind::ConvBias, vec![b.len()]),
                    b,
                );
            }
        }
        for (i, b) in self.bns.iter().enumerate() {
            let dims = vec![b.channels()];
            f(
                info(prefix, "bn", i, ParamKind::NormScale, dims.clone()),
                &b.gamma,
            );
            f(
                info(prefix, "bn", i, ParamKind::NormShift, dims.clone()),
                &b.beta,
            );
            f(
                info(prefix, "bn", i, ParamKind::RunningMean, dims.clone()),
                &b.running_mean,
            );
            f(
                info(prefix, "bn", i, ParamKind::RunningVar, dims),
                &b.running_var,
            );
        }
    }

    pub fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(ParamInfo, &mut [T])) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            let dims = c.weight.shape().to_array().to_vec();
            f(
                info(prefix, "conv", i, ParamKind::ConvWeight, dims),
                c.weight.data_mut(),
            );
            if let Some(b) = &mut c.bias {
                let dims = vec![b.len()];
                f(info(prefix, "conv", i, ParamKind::ConvBias, dims), b);
            }
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            let dims = vec![b.channels()];
            f(
                info(prefix, "bn", i, ParamKind::NormScale, dims.clone()),
                &mut b.gamma,
            );
            f(
                info(prefix, "bn", i, ParamKind::NormShift, dims.clone()),
                &mut b.beta,
            );
            f(
                info(prefix, "bn", i, ParamKind::RunningMean, dims.clone()),
                &mut b.running_mean,
            );
            f(
                info(prefix, "bn", i, ParamKind::RunningVar, dims),
                &mut b.running_var,
            );
        }
    }

    /// Learnable scalars: conv weights and biases, BN gamma and beta.
    pub fn learnable_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |i, d| {
            if i.kind.is_learnable() {
                n += d.len();
            }
        });
        n
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            spec: self.spec,
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    weight: c.weight.cast(),
                    bias: c
                        .bias
                        .as_ref()
                        .map(|b| b.iter().map(|v| U::from_f64(v.as_f64())).collect()),
                    stride: c.stride,
                    dilation: c.dilation,
                    padding: c.padding,
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| {
                    let cv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
                    BnParams {
                        gamma: cv(&b.gamma),
                        beta: cv(&b.beta),
                        running_mean: cv(&b.running_mean),
                        running_var: cv(&b.running_var),
                        eps: U::from_f64(b.eps.as_f64()),
                        momentum: U::from_f64(b.momentum.as_f64()),
                    }
                })
                .collect(),
        }
    }
}

fn info(prefix: &str, layer: &str, i: usize, kind: ParamKind, dims: Vec<usize>) -> ParamInfo {
    ParamInfo {
        name: format!("{prefix}.{layer}{i}.{}", kind.suffix()),
        kind,
        dims,
    }
}

fn conv_grads<T: Scalar>(p: &ConvParams<T>, weight: Tensor4<T>, bias: Vec<T>) -> ConvParamGrads<T> {
    ConvParamGrads {
        weight,
        bias: p.bias.as_ref().map(|_| bias),
    }
}

/// `a + b + c + identity` per element, with the three branch terms added in
/// ascending order of value so the result does not depend on branch order.
fn merge_branches<T: Scalar>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    c: &Tensor4<T>,
    identity: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let s: Shape4 = identity.shape();
    if [a.shape(), b.shape(), c.shape()].iter().any(|&x| x != s) {
        return Err(Error::shape("pfcu", "branch outputs differ in shape"));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .zip(identity.data())
        .map(|(((&x, &y), &z), &id)| {
            let (lo, mid, hi) = sort3(x, y, z);
            ((lo + mid) + hi) + id
        })
        .collect();
    Tensor4::from_vec(s, data)
}

#[inline]
fn sort3<T: Scalar>(a: T, b: T, c: T) -> (T, T, T) {
    let (a, b) = if b < a { (b, a) } else { (a, b) };
    let (b, c) = if c < b { (c, b) } else { (b, c) };
    let (a, b) = if b < a { (b, a) } else { (a, b) };
    (a, b, c)
}
