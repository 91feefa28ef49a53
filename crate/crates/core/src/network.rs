//! Assembly of blocks into a full encoder-decoder and whole-network passes.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Block, BlockCache, BlockGrads, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::params::{ParamInfo, ParamStore};
use crate::tensor::{Mode, Scalar, Tensor4};

/// Channel widths of the three encoder levels of the full-size ESNet.
pub const ESNET_WIDTHS: [usize; 3] = [16, 64, 128];
pub const ESNET_RATES: [usize; 3] = [2, 5, 9];
pub const DEFAULT_INPUT: [usize; 3] = [3, 1024, 512];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    /// Stage group: `block1` .. `block5` and `full_conv`.
    pub group: String,
    pub block: BlockSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub stages: Vec<Stage>,
    pub num_classes: usize,
    /// `(c, h, w)`.
    pub input_dims: [usize; 3],
}

/// Appends stages while tracking the running channel count. Every
/// resampling unit opens a new `blockN` group; stage names are
/// `{group}_{kind}{index}`.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    num_classes: usize,
    input_dims: [usize; 3],
    channels: usize,
    group: usize,
    stages: Vec<Stage>,
    error: Option<Error>,
}

impl NetworkBuilder {
    pub fn new(num_classes: usize, input_dims: [usize; 3]) -> Self {
        NetworkBuilder {
            num_classes,
            input_dims,
            channels: input_dims[0],
            group: 0,
            stages: Vec::new(),
            error: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn push(&mut self, spec: Result<BlockSpec>) -> &mut Self {
        if self.error.is_some() {
            return self;
        }
        let spec = match spec {
            Ok(s) => s,
            Err(e) => {
                self.error = Some(e);
                return self;
            }
        };
        let group = match spec.kind {
            BlockKind::FullConv => "full_conv".to_string(),
            BlockKind::Downsample | BlockKind::Upsample => {
                self.group += 1;
                format!("block{}", self.group)
            }
            _ => format!("block{}", self.group.max(1)),
        };
        let name = if spec.kind.is_residual() {
            let same = self
                .stages
                .iter()
                .filter(|s| s.group == group && s.block.kind.short_name() == spec.kind.short_name())
                .count();
            format!("{group}_{}{}", spec.kind.short_name(), same + 1)
        } else if spec.kind == BlockKind::FullConv {
            group.clone()
        } else {
            format!("{group}_{}", spec.kind.short_name())
        };
        self.channels = spec.channels_out;
        self.stages.push(Stage {
            name,
            group,
            block: spec,
        });
        self
    }

    pub fn down(&mut self, channels_out: usize) -> &mut Self {
        let c = self.channels;
        self.push(BlockSpec::downsample(c, channels_out))
    }

    pub fn up(&mut self, channels_out: usize) -> &mut Self {
        let c = self.channels;
        self.push(BlockSpec::upsample(c, channels_out))
    }

    pub fn fcu(&mut self, k: usize, count: usize) -> &mut Self {
        for _ in 0..count {
            let c = self.channels;
            self.push(BlockSpec::fcu(c, k));
        }
        self
    }

    pub fn pfcu(&mut self, rates: &[usize], count: usize) -> &mut Self {
        for _ in 0..count {
            let c = self.channels;
            self.push(BlockSpec::pfcu(c, rates));
        }
        self
    }

    pub fn non_bt_1d(&mut self, dilation: usize, count: usize) -> &mut Self {
        for _ in 0..count {
            let c = self.channels;
            self.push(BlockSpec::non_bt_1d(c, dilation));
        }
        self
    }

    pub fn non_bottleneck(&mut self, count: usize) -> &mut Self {
        for _ in 0..count {
            let c = self.channels;
            self.push(BlockSpec::non_bottleneck(c));
        }
        self
    }

    pub fn bottleneck(&mut self, count: usize) -> &mut Self {
        for _ in 0..count {
            let c = self.channels;
            self.push(BlockSpec::bottleneck(c));
        }
        self
    }

    pub fn full_conv(&mut self) -> &mut Self {
        let (c, k) = (self.channels, self.num_classes);
        self.push(BlockSpec::full_conv(c, k))
    }

    pub fn build(&self) -> Result<NetworkSpec> {
        if let Some(e) = &self.error {
            return Err(e.clone());
        }
        let spec = NetworkSpec {
            stages: self.stages.clone(),
            num_classes: self.num_classes,
            input_dims: self.input_dims,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// The 18-layer ESNet for `classes` classes at the default input size.
pub fn build_esnet(classes: usize) -> Result<NetworkSpec> {
    build_esnet_scaled(classes, ESNET_WIDTHS, DEFAULT_INPUT)
}

/// ESNet with the three level widths replaced; the block sequence is kept.
pub fn build_esnet_scaled(
    classes: usize,
    widths: [usize; 3],
    input_dims: [usize; 3],
) -> Result<NetworkSpec> {
    if classes < 2 {
        return Err(Error::invalid(
            "build_esnet",
            format!("at least 2 classes required, got {classes}"),
        ));
    }
    let [w1, w2, w3] = widths;
    NetworkBuilder::new(classes, input_dims)
        .down(w1)
        .fcu(3, 3)
        .down(w2)
        .fcu(5, 2)
        .down(w3)
        .pfcu(&ESNET_RATES, 3)
        .up(w2)
        .fcu(5, 2)
        .up(w1)
        .fcu(3, 2)
        .full_conv()
        .build()
}

/// The ERFNet layout used for the weight comparison: 5 non-bt-1D blocks at
/// 64 channels, 8 dilated ones at 128, and 2 + 2 in the decoder.
pub fn build_erfnet_reference() -> Result<NetworkSpec> {
    NetworkBuilder::new(20, DEFAULT_INPUT)
        .down(16)
        .down(64)
        .non_bt_1d(1, 5)
        .down(128)
        .non_bt_1d(2, 1)
        .non_bt_1d(4, 1)
        .non_bt_1d(8, 1)
        .non_bt_1d(16, 1)
        .non_bt_1d(2, 1)
        .non_bt_1d(4, 1)
        .non_bt_1d(8, 1)
        .non_bt_1d(16, 1)
        .up(64)
        .non_bt_1d(1, 2)
        .up(16)
        .non_bt_1d(1, 2)
        .full_conv()
        .build()
}

/// `h×w×c`, the way layer sizes are usually tabulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims(pub [usize; 3]);

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.0;
        write!(f, "{h}×{w}×{c}")
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("network", "no stages"));
        }
        let mut c = self.input_dims[0];
        for s in &self.stages {
            s.block.validate()?;
            if s.block.channels_in != c {
                return Err(Error::shape(
                    "network",
                    format!(
                        "stage {} expects {} channels but receives {c}",
                        s.name, s.block.channels_in
                    ),
                ));
            }
            c = s.block.channels_out;
        }
        if c != self.num_classes {
            return Err(Error::shape(
                "network",
                format!("output has {c} channels for {} classes", self.num_classes),
            ));
        }
        Ok(())
    }

    /// Input extents must be divisible by `2^downsamplers`.
    pub fn required_divisor(&self) -> usize {
        let downs = self
            .stages
            .iter()
            .filter(|s| s.block.kind == BlockKind::Downsample)
            .count();
        1 << downs
    }

    /// Checks `(c, h, w)` against the input channels and the divisor.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let [c, h, w] = dims;
        if c != self.input_dims[0] {
            return Err(Error::shape(
                "network",
                format!(
                    "input has {c} channels, network expects {}",
                    self.input_dims[0]
                ),
            ));
        }
        let factor = self.required_divisor();
        for extent in [h, w] {
            if extent == 0 || extent % factor != 0 {
                return Err(Error::Divisibility {
                    op: "network",
                    extent,
                    factor,
                });
            }
        }
        Ok(())
    }

    /// Output `(c, h, w)` of every stage.
    pub fn shape_trace(&self, input_dims: [usize; 3]) -> Result<Vec<(String, Dims)>> {
        self.check_input(input_dims)?;
        let mut d = input_dims;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            d = s.block.output_dims(d)?;
            out.push((s.name.clone(), Dims(d)));
        }
        Ok(out)
    }

    /// Output of the last stage of every group, in order.
    pub fn group_trace(&self, input_dims: [usize; 3]) -> Result<Vec<(String, Dims)>> {
        let trace = self.shape_trace(input_dims)?;
        let mut out: Vec<(String, Dims)> = Vec::new();
        for (stage, (_, d)) in self.stages.iter().zip(trace) {
            match out.last_mut() {
                Some((g, last)) if *g == stage.group => *last = d,
                _ => out.push((stage.group.clone(), d)),
            }
        }
        Ok(out)
    }

    /// Stage count per group, in order.
    pub fn group_sizes(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for s in &self.stages {
            match out.last_mut() {
                Some((g, n)) if *g == s.group => *n += 1,
                _ => out.push((s.group.clone(), 1)),
            }
        }
        out
    }

    pub fn learnable_count(&self) -> usize {
        self.stages.iter().map(|s| s.block.learnable_count()).sum()
    }
}

/// Block caches recorded by a train-mode forward, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<BlockCache<T>>,
}

impl<T: Scalar> Tape<T> {
    /// Activation pattern of every block, in stage order.
    pub fn activation_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for c in &self.caches {
            c.activation_pattern(&mut out);
        }
        out
    }
}

/// Per-block gradients in stage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub blocks: Vec<BlockGrads<T>>,
    pub input: Tensor4<T>,
}

impl<T: Scalar> Gradients<T> {
    /// One vector per learnable tensor, in the order of
    /// [`Network::for_each_learnable_mut`].
    pub fn flatten(&self) -> Vec<Vec<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            b.flatten_into(&mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    blocks: Vec<Block<T>>,
}

impl<T: Scalar> Network<T> {
    /// Seeded fan-in uniform weights; blocks draw from one stream in order.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = spec
            .stages
            .iter()
            .map(|s| Block::init(s.block, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Network { spec, blocks })
    }

    pub fn zeroed(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let blocks = spec
            .stages
            .iter()
            .map(|s| Block::zeroed(s.block))
            .collect::<Result<_>>()?;
        Ok(Network { spec, blocks })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block<T>] {
        &mut self.blocks
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        let s = x.shape();
        self.spec.check_input([s.c, s.h, s.w])
    }

    /// Inference forward pass using running statistics.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(&h, Mode::Infer)?.0;
        }
        Ok(h)
    }

    /// Forward pass that records a tape in either mode and leaves the
    /// running statistics untouched.
    pub fn forward_recorded(&self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, Tape<T>)> {
        self.check(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward_recorded(&h, mode)?;
            caches.push(cache);
            h = y;
        }
        Ok((h, Tape { caches }))
    }

    /// Train-mode forward; running statistics are updated from the batch.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
        let (y, tape) = self.forward_recorded(x, Mode::Train)?;
        self.update_running_stats(&tape);
        Ok((y, tape))
    }

    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        for (b, c) in self.blocks.iter_mut().zip(&tape.caches) {
            b.update_running_stats(c);
        }
    }

    pub fn backward(&self, tape: &Tape<T>, dlogits: &Tensor4<T>) -> Result<Gradients<T>> {
        if tape.caches.len() != self.blocks.len() {
            return Err(Error::invalid(
                "network",
                "tape recorded by a different network",
            ));
        }
        let mut grads = Vec::with_capacity(self.blocks.len());
        let mut d = dlogits.clone();
        for (b, c) in self.blocks.iter().zip(&tape.caches).rev() {
            let (dx, g) = b.backward(c, &d)?;
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        Ok(Gradients {
            blocks: grads,
            input: d,
        })
    }

    /// Every tensor, including running statistics, under its stage prefix.
    pub fn for_each_param(&self, f: &mut dyn FnMut(ParamInfo, &[T])) {
        for (s, b) in self.spec.stages.iter().zip(&self.blocks) {
            b.for_each_param(&s.name, f);
        }
    }

    /// Learnable tensors only, in gradient order.
    pub fn for_each_learnable_mut(&mut self, f: &mut dyn FnMut(ParamInfo, &mut [T])) {
        for (s, b) in self.spec.stages.iter().zip(&mut self.blocks) {
            b.for_each_param_mut(&s.name, &mut |info, data| {
                if info.kind.is_learnable() {
                    f(info, data)
                }
            });
        }
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.for_each_param(&mut |i, _| out.push(i));
        out
    }

    pub fn learnable_count(&self) -> usize {
        self.blocks.iter().map(Block::learnable_count).sum()
    }

    pub fn param_store(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.for_each_param(&mut |info, data| {
            store
                .push(info.name, info.dims, data.to_vec())
                .expect("block parameter names are unique");
        });
        store
    }

    /// Replaces every tensor with the entry of the same name. Missing and
    /// unexpected names are both reported.
    pub fn load_param_store(&mut self, store: &ParamStore<T>) -> Result<()> {
        let infos = self.param_infos();
        let names: Vec<String> = infos.iter().map(|i| i.name.clone()).collect();
        let (missing, extra) = store.name_diff(&names);
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Params(format!(
                "missing [{}], unexpected [{}]",
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for info in &infos {
            let e = store.get(&info.name).expect("checked above");
            if e.dims != info.dims {
                return Err(Error::Params(format!(
                    "{}: dims {:?} but network expects {:?}",
                    info.name, e.dims, info.dims
                )));
            }
        }
        let stages = self.spec.stages.clone();
        for (s, b) in stages.iter().zip(&mut self.blocks) {
            b.for_each_param_mut(&s.name, &mut |info, data| {
                data.copy_from_slice(&store.get(&info.name).expect("checked above").data);
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
        }
    }
}
