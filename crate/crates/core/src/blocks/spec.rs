use std::fmt;

use crate::error::{Error, Result};

/// The residual and resampling units a network is assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Stride-2 3×3 convolution concatenated with 2×2 max pooling.
    Downsample,
    /// Stride-2 3×3 transposed convolution followed by BN and ReLU.
    Upsample,
    /// The last upsampling unit: transposed convolution onto class scores,
    /// with bias and no normalization or activation.
    FullConv,
    /// Two `(K×1, 1×K)` factorized pairs with an identity skip.
    Fcu { k: usize },
    /// Shared `(3×1, 1×3)` transform feeding three dilated `(3×1, 1×3)`
    /// branches, summed with the identity.
    Pfcu { rates: [usize; 3] },
    /// Two 3×3 convolutions with an identity skip.
    NonBottleneck,
    /// 1×1 reduce, 3×3, 1×1 expand (reduction factor 4) with an identity skip.
    Bottleneck,
    /// Factorized residual block with `K = 3`; the second pair may be dilated.
    NonBt1D { dilation: usize },
}

impl BlockKind {
    pub fn is_residual(&self) -> bool {
        !matches!(
            self,
            BlockKind::Downsample | BlockKind::Upsample | BlockKind::FullConv
        )
    }

    pub fn short_name(&self) -> &'static str {
        match self {
            BlockKind::Downsample => "down",
            BlockKind::Upsample => "up",
            BlockKind::FullConv => "full_conv",
            BlockKind::Fcu { .. } => "fcu",
            BlockKind::Pfcu { .. } => "pfcu",
            BlockKind::NonBottleneck => "non_bottleneck",
            BlockKind::Bottleneck => "bottleneck",
            BlockKind::NonBt1D { .. } => "non_bt_1d",
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockKind::Downsample => write!(f, "Down-sampling Unit"),
            BlockKind::Upsample => write!(f, "Up-sampling Unit"),
            BlockKind::FullConv => write!(f, "Up-sampling Unit (full conv)"),
            BlockKind::Fcu { k } => write!(f, "FCU (K = {k})"),
            BlockKind::Pfcu { rates } => {
                write!(f, "PFCU (r = {}, {}, {})", rates[0], rates[1], rates[2])
            }
            BlockKind::NonBottleneck => write!(f, "Non-bottleneck"),
            BlockKind::Bottleneck => write!(f, "Bottleneck"),
            BlockKind::NonBt1D { dilation: 1 } => write!(f, "Non-bt-1D"),
            BlockKind::NonBt1D { dilation } => write!(f, "Non-bt-1D (d = {dilation})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels_in: usize,
    pub channels_out: usize,
}

/// Which part of a block a convolution belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPath {
    Main,
    Shared,
    Branch(usize),
}

/// Geometry of one convolution inside a block.
///
/// For transposed layers `cin` and `cout` are the channels of the layer's
/// input and output; the stored weight has dims `(cin, cout, kh, kw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayout {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub transposed: bool,
    pub output_padding: (usize, usize),
    pub path: ConvPath,
    /// Layers feeding straight into batch norm have no bias.
    pub bias: bool,
}

impl ConvLayout {
    fn same(cin: usize, cout: usize, kernel: (usize, usize), dilation: (usize, usize)) -> Self {
        ConvLayout {
            cin,
            cout,
            kernel,
            stride: (1, 1),
            dilation,
            padding: (
                dilation.0 * (kernel.0 - 1) / 2,
                dilation.1 * (kernel.1 - 1) / 2,
            ),
            transposed: false,
            output_padding: (0, 0),
            path: ConvPath::Main,
            bias: true,
        }
    }

    fn before_bn(mut self) -> Self {
        self.bias = false;
        self
    }

    fn on(mut self, path: ConvPath) -> Self {
        self.path = path;
        self
    }

    fn upsampling(cin: usize, cout: usize, bias: bool) -> Self {
        ConvLayout {
            cin,
            cout,
            kernel: (3, 3),
            stride: (2, 2),
            dilation: (1, 1),
            padding: (1, 1),
            transposed: true,
            output_padding: (1, 1),
            path: ConvPath::Main,
            bias,
        }
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        if self.transposed {
            [self.cin, self.cout, self.kernel.0, self.kernel.1]
        } else {
            [self.cout, self.cin, self.kernel.0, self.kernel.1]
        }
    }

    pub fn kernel_elements(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn weight_count(&self) -> usize {
        self.cin * self.cout * self.kernel_elements()
    }

    /// Fan-in used for initialization: the product of weight dims 1..4.
    pub fn fan_in(&self) -> usize {
        let d = self.weight_dims();
        d[1] * d[2] * d[3]
    }

    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation.0 * (self.kernel.0 - 1) + 1,
            self.dilation.1 * (self.kernel.1 - 1) + 1,
        )
    }
}

impl BlockSpec {
    pub fn downsample(channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::checked(BlockKind::Downsample, channels_in, channels_out)
    }

    pub fn upsample(channels_in: usize, channels_out: usize) -> Result<Self> {
        Self::checked(BlockKind::Upsample, channels_in, channels_out)
    }

    pub fn full_conv(channels_in: usize, classes: usize) -> Result<Self> {
        Self::checked(BlockKind::FullConv, channels_in, classes)
    }

    pub fn fcu(channels: usize, k: usize) -> Result<Self> {
        Self::checked(BlockKind::Fcu { k }, channels, channels)
    }

    pub fn pfcu(channels: usize, rates: &[usize]) -> Result<Self> {
        let rates: [usize; 3] = rates.try_into().map_err(|_| {
            Error::invalid(
                "pfcu",
                format!("exactly three dilation rates required, got {}", rates.len()),
            )
        })?;
        Self::checked(BlockKind::Pfcu { rates }, channels, channels)
    }

    pub fn non_bottleneck(channels: usize) -> Result<Self> {
        Self::checked(BlockKind::NonBottleneck, channels, channels)
    }

    pub fn bottleneck(channels: usize) -> Result<Self> {
        Self::checked(BlockKind::Bottleneck, channels, channels)
    }

    pub fn non_bt_1d(channels: usize, dilation: usize) -> Result<Self> {
        Self::checked(BlockKind::NonBt1D { dilation }, channels, channels)
    }

    fn checked(kind: BlockKind, channels_in: usize, channels_out: usize) -> Result<Self> {
        let spec = BlockSpec {
            kind,
            channels_in,
            channels_out,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let op = "block";
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::invalid(op, "channel counts must be positive"));
        }
        if self.kind.is_residual() && self.channels_in != self.channels_out {
            return Err(Error::invalid(
                op,
                format!(
                    "{} keeps its width but got {} -> {}",
                    self.kind, self.channels_in, self.channels_out
                ),
            ));
        }
        match self.kind {
            BlockKind::Downsample if self.channels_out <= self.channels_in => Err(Error::invalid(
                op,
                format!(
                    "down-sampling unit must widen, got {} -> {}",
                    self.channels_in, self.channels_out
                ),
            )),
            BlockKind::Fcu { k } if k < 3 || k % 2 == 0 => Err(Error::invalid(
                op,
                format!("FCU kernel size must be odd and at least 3, got {k}"),
            )),
            BlockKind::Pfcu { rates } if rates.contains(&0) => {
                Err(Error::invalid(op, "PFCU dilation rates must be positive"))
            }
            BlockKind::NonBt1D { dilation: 0 } => {
                Err(Error::invalid(op, "dilation must be positive"))
            }
            BlockKind::Bottleneck if self.channels_in < 4 => Err(Error::invalid(
                op,
                format!(
                    "bottleneck needs at least 4 channels, got {}",
                    self.channels_in
                ),
            )),
            _ => Ok(()),
        }
    }

    /// Every convolution of the block, in parameter order.
    pub fn conv_layouts(&self) -> Vec<ConvLayout> {
        let (cin, cout) = (self.channels_in, self.channels_out);
        match self.kind {
            BlockKind::Downsample => vec![ConvLayout {
                cin,
                cout: cout - cin,
                kernel: (3, 3),
                stride: (2, 2),
                dilation: (1, 1),
                padding: (1, 1),
                transposed: false,
                output_padding: (0, 0),
                path: ConvPath::Main,
                bias: false,
            }],
            BlockKind::Upsample => vec![ConvLayout::upsampling(cin, cout, false)],
            BlockKind::FullConv => vec![ConvLayout::upsampling(cin, cout, true)],
            BlockKind::Fcu { k } => factorized_pairs(cin, k, 1),
            BlockKind::NonBt1D { dilation } => factorized_pairs(cin, 3, dilation),
            BlockKind::Pfcu { rates } => {
                let mut v = vec![
                    ConvLayout::same(cin, cin, (3, 1), (1, 1)).on(ConvPath::Shared),
                    ConvLayout::same(cin, cin, (1, 3), (1, 1))
                        .before_bn()
                        .on(ConvPath::Shared),
                ];
                for (i, &r) in rates.iter().enumerate() {
                    v.push(ConvLayout::same(cin, cin, (3, 1), (r, 1)).on(ConvPath::Branch(i)));
                    v.push(
                        ConvLayout::same(cin, cin, (1, 3), (1, r))
                            .before_bn()
                            .on(ConvPath::Branch(i)),
                    );
                }
                v
            }
            BlockKind::NonBottleneck => vec![
                ConvLayout::same(cin, cin, (3, 3), (1, 1)).before_bn(),
                ConvLayout::same(cin, cin, (3, 3), (1, 1)).before_bn(),
            ],
            BlockKind::Bottleneck => {
                let mid = cin / 4;
                vec![
                    ConvLayout::same(cin, mid, (1, 1), (1, 1)).before_bn(),
                    ConvLayout::same(mid, mid, (3, 3), (1, 1)).before_bn(),
                    ConvLayout::same(mid, cin, (1, 1), (1, 1)).before_bn(),
                ]
            }
        }
    }

    /// Channel count of each batch-norm layer, in parameter order.
    pub fn bn_channels(&self) -> Vec<usize> {
        let c = self.channels_out;
        match self.kind {
            BlockKind::Downsample | BlockKind::Upsample => vec![c],
            BlockKind::FullConv => vec![],
            BlockKind::Fcu { .. } | BlockKind::NonBt1D { .. } | BlockKind::NonBottleneck => {
                vec![c, c]
            }
            BlockKind::Pfcu { .. } => vec![c; 4],
            BlockKind::Bottleneck => vec![c / 4, c / 4, c],
        }
    }

    /// Kernel elements summed over the block's convolutions (no channel
    /// factor), for residual blocks only.
    pub fn kernel_elements(&self) -> Option<usize> {
        self.kind.is_residual().then(|| {
            self.conv_layouts()
                .iter()
                .map(ConvLayout::kernel_elements)
                .sum()
        })
    }

    /// Learnable scalar count: conv weights and biases plus BN scale/shift.
    pub fn learnable_count(&self) -> usize {
        let convs: usize = self
            .conv_layouts()
            .iter()
            .map(|l| l.weight_count() + if l.bias { l.cout } else { 0 })
            .sum();
        convs + self.bn_channels().iter().map(|c| 2 * c).sum::<usize>()
    }

    /// Output `(c, h, w)` for input `(c, h, w)`.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        if c != self.channels_in {
            return Err(Error::shape(
                "block",
                format!(
                    "{} expects {} input channels, got {c}",
                    self.kind, self.channels_in
                ),
            ));
        }
        match self.kind {
            BlockKind::Downsample => {
                if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape(
                        "block",
                        format!("down-sampling needs even extents, got {h}x{w}"),
                    ));
                }
                Ok([self.channels_out, h / 2, w / 2])
            }
            BlockKind::Upsample | BlockKind::FullConv => Ok([self.channels_out, 2 * h, 2 * w]),
            _ => Ok([self.channels_out, h, w]),
        }
    }
}

fn factorized_pairs(c: usize, k: usize, second_dilation: usize) -> Vec<ConvLayout> {
    let d = second_dilation;
    vec![
        ConvLayout::same(c, c, (k, 1), (1, 1)),
        ConvLayout::same(c, c, (1, k), (1, 1)).before_bn(),
        ConvLayout::same(c, c, (k, 1), (d, 1)),
        ConvLayout::same(c, c, (1, k), (1, d)).before_bn(),
    ]
}
