//! JSON network configuration.

use esnet_core::blocks::BlockKind;
use esnet_core::network::{NetworkBuilder, DEFAULT_INPUT, ESNET_RATES, ESNET_WIDTHS};
use esnet_core::{Error, NetworkSpec, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub num_classes: usize,
    /// `[c, h, w]`.
    pub input: [usize; 3],
    pub width_scale: f64,
    pub stages: Vec<StageConfig>,
}

/// A run of `count` identical stages.
///
/// `kind` is one of `down`, `up`, `fcu`, `pfcu`, `non_bt_1d`,
/// `non_bottleneck`, `bottleneck` and `full_conv`. Resampling units take
/// an optional `channels`; without it the i-th `down` produces
/// `width_scale` times the i-th ESNet width and each `up` returns to the
/// width of the level it climbs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kind: String,
    pub count: usize,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dilation: Option<usize>,
}

impl StageConfig {
    pub fn new(kind: &str, count: usize) -> Self {
        StageConfig {
            kind: kind.to_string(),
            count,
            k: None,
            rates: None,
            channels: None,
            dilation: None,
        }
    }

    fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    fn with_rates(mut self, rates: [usize; 3]) -> Self {
        self.rates = Some(rates);
        self
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Invalid {
        op: "config",
        detail: detail.into(),
    }
}

impl NetConfig {
    /// The full-size ESNet; parses to exactly `build_esnet(classes)`.
    pub fn esnet(classes: usize) -> Self {
        NetConfig {
            num_classes: classes,
            input: DEFAULT_INPUT,
            width_scale: 1.0,
            stages: vec![
                StageConfig::new("down", 1),
                StageConfig::new("fcu", 3).with_k(3),
                StageConfig::new("down", 1),
                StageConfig::new("fcu", 2).with_k(5),
                StageConfig::new("down", 1),
                StageConfig::new("pfcu", 3).with_rates(ESNET_RATES),
                StageConfig::new("up", 1),
                StageConfig::new("fcu", 2).with_k(5),
                StageConfig::new("up", 1),
                StageConfig::new("fcu", 2).with_k(3),
                StageConfig::new("full_conv", 1),
            ],
        }
    }

    /// ESNet at the given level widths and input size.
    pub fn esnet_scaled(classes: usize, widths: [usize; 3], input: [usize; 3]) -> Self {
        let mut cfg = NetConfig::esnet(classes);
        cfg.input = input;
        let channels = [widths[0], widths[1], widths[2], widths[1], widths[0]];
        for (s, c) in cfg
            .stages
            .iter_mut()
            .filter(|s| s.kind == "down" || s.kind == "up")
            .zip(channels)
        {
            s.channels = Some(c);
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn to_spec(&self) -> Result<NetworkSpec> {
        if !(self.width_scale.is_finite() && self.width_scale > 0.0) {
            return Err(bad(format!(
                "width_scale must be positive, got {}",
                self.width_scale
            )));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(bad(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        let mut b = NetworkBuilder::new(self.num_classes, self.input);
        let mut levels: Vec<usize> = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            let at = |what: &str| bad(format!("stage {i} ({}): {what}", s.kind));
            if s.count == 0 {
                return Err(at("count must be at least 1"));
            }
            let allowed: &[&str] = match s.kind.as_str() {
                "down" | "up" => &["channels"],
                "fcu" => &["K"],
                "pfcu" => &["rates"],
                "non_bt_1d" => &["dilation"],
                "non_bottleneck" | "bottleneck" | "full_conv" => &[],
                other => return Err(at(&format!("unknown kind {other:?}"))),
            };
            for (field, present) in [
                ("K", s.k.is_some()),
                ("rates", s.rates.is_some()),
                ("channels", s.channels.is_some()),
                ("dilation", s.dilation.is_some()),
            ] {
                if present && !allowed.contains(&field) {
                    return Err(at(&format!("field {field} does not apply")));
                }
            }
            match s.kind.as_str() {
                "down" => {
                    for _ in 0..s.count {
                        let c = match s.channels {
                            Some(c) => c,
                            None => {
                                let base = ESNET_WIDTHS.get(levels.len()).ok_or_else(|| {
                                    at("no default width beyond the third level; set channels")
                                })?;
                                (*base as f64 * self.width_scale).round().max(1.0) as usize
                            }
                        };
                        levels.push(b.channels());
                        b.down(c);
                    }
                }
                "up" => {
                    for _ in 0..s.count {
                        let above = levels.pop();
                        let c = s
                            .channels
                            .or(above)
                            .ok_or_else(|| at("no level to return to; set channels"))?;
                        b.up(c);
                    }
                }
                "fcu" => {
                    b.fcu(s.k.ok_or_else(|| at("missing K"))?, s.count);
                }
                "pfcu" => {
                    b.pfcu(&s.rates.ok_or_else(|| at("missing rates"))?, s.count);
                }
                "non_bt_1d" => {
                    b.non_bt_1d(s.dilation.unwrap_or(1), s.count);
                }
                "non_bottleneck" => {
                    b.non_bottleneck(s.count);
                }
                "bottleneck" => {
                    b.bottleneck(s.count);
                }
                _ => {
                    if s.count != 1 {
                        return Err(at("count must be 1"));
                    }
                    b.full_conv();
                }
            }
        }
        b.build()
    }

    /// Run-length encodes a spec with explicit resampling widths, so that
    /// `from_spec(s).to_spec() == s`.
    pub fn from_spec(spec: &NetworkSpec) -> Self {
        let mut stages: Vec<StageConfig> = Vec::new();
        for s in &spec.stages {
            let b = &s.block;
            let mut cfg = StageConfig::new(b.kind.short_name(), 1);
            match b.kind {
                BlockKind::Downsample | BlockKind::Upsample => cfg.channels = Some(b.channels_out),
                BlockKind::Fcu { k } => cfg.k = Some(k),
                BlockKind::Pfcu { rates } => cfg.rates = Some(rates),
                BlockKind::NonBt1D { dilation } => cfg.dilation = Some(dilation),
                _ => {}
            }
            match stages.last_mut() {
                Some(last)
                    if b.kind.is_residual()
                        && StageConfig {
                            count: last.count,
                            ..cfg.clone()
                        } == *last =>
                {
                    last.count += 1
                }
                _ => stages.push(cfg),
            }
        }
        NetConfig {
            num_classes: spec.num_classes,
            input: spec.input_dims,
            width_scale: 1.0,
            stages,
        }
    }
}
