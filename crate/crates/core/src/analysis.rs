//! Complexity arithmetic over network specs: kernel-element accounting,
//! learnable parameter counts, theoretical receptive fields and
//! multiply-accumulate counts.

use crate::blocks::{BlockKind, ConvLayout, ConvPath};
use crate::error::{Error, Result};
use crate::network::NetworkSpec;

/// Commonly quoted weight total of the ERFNet residual blocks. The
/// per-block sizes sum to 18,048; both figures are reported.
pub const ERFNET_STATED_TOTAL: u64 = 17_688;

/// One run of identical residual blocks: `layers × channels × kernel_elems`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountingRow {
    pub stage_name: String,
    pub block_kind: String,
    pub layers: u64,
    pub channels: u64,
    pub kernel_elems: u64,
    pub product: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accounting {
    pub rows: Vec<AccountingRow>,
    pub total: u64,
    /// Non-residual stages left out of the rows.
    pub excluded: Vec<String>,
}

/// Kernel elements only: no channel-squared factor, no bias, no
/// normalization. Consecutive residual stages of one group with the same
/// block type, width and kernel-element count share a row.
pub fn paper_accounting(net: &NetworkSpec) -> Accounting {
    let mut rows: Vec<AccountingRow> = Vec::new();
    let mut excluded = Vec::new();
    let mut last_key = None;
    for s in &net.stages {
        let Some(k) = s.block.kernel_elements() else {
            excluded.push(s.name.clone());
            last_key = None;
            continue;
        };
        let key = (
            s.group.clone(),
            s.block.kind.short_name(),
            s.block.channels_in,
            k,
        );
        if last_key.as_ref() == Some(&key) {
            let row = rows.last_mut().expect("a row exists for the previous key");
            row.layers += 1;
            row.product = row.layers * row.channels * row.kernel_elems;
        } else {
            let kind = match s.block.kind {
                BlockKind::NonBt1D { .. } => "Non-bt-1D".to_string(),
                other => other.to_string(),
            };
            rows.push(AccountingRow {
                stage_name: s.group.clone(),
                block_kind: kind,
                layers: 1,
                channels: s.block.channels_in as u64,
                kernel_elems: k as u64,
                product: (s.block.channels_in * k) as u64,
            });
            last_key = Some(key);
        }
    }
    let total = rows.iter().map(|r| r.product).sum();
    Accounting {
        rows,
        total,
        excluded,
    }
}

/// `100 · (1 − a / b)`.
pub fn reduction_ratio(a_total: u64, b_total: u64) -> Result<f64> {
    if b_total == 0 {
        return Err(Error::invalid("reduction_ratio", "reference total is zero"));
    }
    Ok(100.0 * (1.0 - a_total as f64 / b_total as f64))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub per_stage: Vec<(String, u64)>,
    pub total: u64,
}

/// Learnable scalars: conv weights and biases, BN scale and shift.
pub fn true_param_count(net: &NetworkSpec) -> ParamCount {
    let per_stage: Vec<(String, u64)> = net
        .stages
        .iter()
        .map(|s| (s.name.clone(), s.block.learnable_count() as u64))
        .collect();
    let total = per_stage.iter().map(|(_, n)| n).sum();
    ParamCount { per_stage, total }
}

/// Receptive field and cumulative stride, per axis as `(h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfState {
    pub rf: (u64, u64),
    pub jump: (u64, u64),
}

impl RfState {
    pub const INPUT: RfState = RfState {
        rf: (1, 1),
        jump: (1, 1),
    };

    /// The larger of the two axes.
    pub fn max_rf(&self) -> u64 {
        self.rf.0.max(self.rf.1)
    }

    /// State after one convolution.
    pub fn through(self, l: &ConvLayout) -> RfState {
        let (eh, ew) = l.effective_kernel();
        RfState {
            rf: (
                grow(self.rf.0, eh, l.stride.0, self.jump.0, l.transposed),
                grow(self.rf.1, ew, l.stride.1, self.jump.1, l.transposed),
            ),
            jump: (
                step(self.jump.0, l.stride.0, l.transposed),
                step(self.jump.1, l.stride.1, l.transposed),
            ),
        }
    }

    fn merge(self, other: RfState) -> RfState {
        RfState {
            rf: (self.rf.0.max(other.rf.0), self.rf.1.max(other.rf.1)),
            jump: self.jump,
        }
    }
}

fn grow(rf: u64, extent: usize, stride: usize, jump: u64, transposed: bool) -> u64 {
    let taps = if transposed {
        extent.div_ceil(stride)
    } else {
        extent
    };
    rf + (taps as u64 - 1) * jump
}

fn step(jump: u64, stride: usize, transposed: bool) -> u64 {
    if transposed {
        (jump / stride as u64).max(1)
    } else {
        jump * stride as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RfRow {
    pub layer: String,
    /// Dilation rate for a PFCU branch row, `None` for stage rows.
    pub branch_rate: Option<usize>,
    pub state: RfState,
}

/// Theoretical receptive field after every stage, with one extra row per
/// PFCU branch; the stage row takes the maximum over branches.
pub fn receptive_field(net: &NetworkSpec) -> Vec<RfRow> {
    let mut state = RfState::INPUT;
    let mut rows = Vec::new();
    for s in &net.stages {
        let layouts = s.block.conv_layouts();
        state = match s.block.kind {
            BlockKind::Pfcu { rates } => {
                let shared = layouts
                    .iter()
                    .filter(|l| l.path == ConvPath::Shared)
                    .fold(state, RfState::through);
                let mut merged = shared;
                for (i, &r) in rates.iter().enumerate() {
                    let b = layouts
                        .iter()
                        .filter(|l| l.path == ConvPath::Branch(i))
                        .fold(shared, RfState::through);
                    rows.push(RfRow {
                        layer: format!("{}.branch{}", s.name, i + 1),
                        branch_rate: Some(r),
                        state: b,
                    });
                    merged = merged.merge(b);
                }
                merged
            }
            // a downsampler's pooling branch (2×2, stride 2) never reaches
            // further than its 3×3 conv
            _ => layouts.iter().fold(state, RfState::through),
        };
        rows.push(RfRow {
            layer: s.name.clone(),
            branch_rate: None,
            state,
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopCount {
    pub per_stage: Vec<(String, u64)>,
    pub total: u64,
}

/// Multiply-accumulates of one convolution producing (or, for transposed
/// layers, consuming) an `h × w` map.
pub fn conv_macs(l: &ConvLayout, h: usize, w: usize) -> u64 {
    (h * w * l.cin * l.cout * l.kernel.0 * l.kernel.1) as u64
}

/// Convolution multiply-accumulates per batch element. Transposed layers
/// are counted over their input positions; pooling and normalization are
/// not counted.
pub fn flop_count(net: &NetworkSpec, input_dims: [usize; 3]) -> Result<FlopCount> {
    let trace = net.shape_trace(input_dims)?;
    let mut prev = input_dims;
    let mut per_stage = Vec::with_capacity(net.stages.len());
    for (s, (name, out)) in net.stages.iter().zip(trace) {
        let macs = s
            .block
            .conv_layouts()
            .iter()
            .map(|l| {
                if l.transposed {
                    conv_macs(l, prev[1], prev[2])
                } else {
                    conv_macs(l, out.0[1], out.0[2])
                }
            })
            .sum();
        per_stage.push((name, macs));
        prev = out.0;
    }
    let total = per_stage.iter().map(|(_, n)| n).sum();
    Ok(FlopCount { per_stage, total })
}

/// `15296` → `"15,296"`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Column-aligned plain text. Columns holding only numbers are right aligned.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut width: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, cell) in r.iter().enumerate().take(cols) {
            width[i] = width[i].max(cell.chars().count());
        }
    }
    let numeric = |s: &str| {
        !s.is_empty()
            && s.chars()
                .all(|c| c.is_ascii_digit() || matches!(c, ',' | '.' | '%' | '-'))
    };
    let right: Vec<bool> = (0..cols)
        .map(|i| !rows.is_empty() && rows.iter().all(|r| r.get(i).is_some_and(|c| numeric(c))))
        .collect();
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            let pad = width[i] - cell.chars().count();
            if i > 0 {
                s.push_str("  ");
            }
            if right[i] {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            } else {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&rule.join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Header line plus one row per accounting row, LF terminated.
pub fn accounting_csv(acc: &Accounting) -> String {
    let mut out = String::from("stage,block,layers,channels,kernel_elems,product\n");
    for r in &acc.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.stage_name,
            csv_field(&r.block_kind),
            r.layers,
            r.channels,
            r.kernel_elems,
            r.product
        ));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::BlockSpec;
    use crate::network::{build_erfnet_reference, build_esnet, NetworkBuilder};

    #[test]
    fn esnet_accounting_rows() {
        let acc = paper_accounting(&build_esnet(20).unwrap());
        let triples: Vec<(u64, u64, u64)> = acc
            .rows
            .iter()
            .map(|r| (r.layers, r.channels, r.kernel_elems))
            .collect();
        assert_eq!(
            triples,
            vec![
                (3, 16, 12),
                (2, 64, 20),
                (3, 128, 24),
                (2, 64, 20),
                (2, 16, 12)
            ]
        );
        assert_eq!(acc.total, 15_296);
        assert_eq!(acc.rows[2].product, 9_216);
        assert_eq!(acc.excluded.len(), 6);
    }

    #[test]
    fn erfnet_accounting_rows() {
        let acc = paper_accounting(&build_erfnet_reference().unwrap());
        let triples: Vec<(u64, u64, u64)> = acc
            .rows
            .iter()
            .map(|r| (r.layers, r.channels, r.kernel_elems))
            .collect();
        assert_eq!(
            triples,
            vec![(5, 64, 12), (8, 128, 12), (2, 64, 12), (2, 16, 12)]
        );
        assert_eq!(acc.rows[1].product, 12_288);
        assert_eq!(acc.total, 18_048);
    }

    #[test]
    fn ratios() {
        assert_eq!(
            format!("{:.1}", reduction_ratio(15_296, 17_688).unwrap()),
            "13.5"
        );
        assert_eq!(
            format!("{:.1}", reduction_ratio(15_296, 18_048).unwrap()),
            "15.2"
        );
        assert_eq!(format!("{:.1}", reduction_ratio(7, 7).unwrap()), "0.0");
        assert!(reduction_ratio(1, 0).is_err());
    }

    #[test]
    fn thousands_separators() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(15_296), "15,296");
        assert_eq!(thousands(1_662_272), "1,662,272");
    }

    #[test]
    fn single_conv_receptive_fields() {
        let one = |d: usize| {
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
            RfState::INPUT.through(&l).rf
        };
        assert_eq!(one(1), (3, 3));
        assert_eq!(one(2), (5, 5));
    }

    #[test]
    fn fcu_macs_linear_in_k() {
        let macs = |k| {
            let net = NetworkBuilder::new(2, [2, 8, 8])
                .fcu(k, 1)
                .down(3)
                .up(2)
                .build()
                .unwrap();
            flop_count(&net, [2, 8, 8]).unwrap().per_stage[0].1
        };
        assert_eq!(macs(5) - macs(3), macs(7) - macs(5));
    }

    #[test]
    fn closed_form_macs() {
        let spec = BlockSpec::non_bottleneck(16).unwrap();
        let l = spec.conv_layouts()[0];
        assert_eq!(conv_macs(&l, 8, 8), 147_456);
    }

    #[test]
    fn table_alignment() {
        let t = render_table(&["name", "n"], &[vec!["a".into(), "1,000".into()]]);
        assert_eq!(t, "name      n\n----  -----\na     1,000\n");
    }
}
