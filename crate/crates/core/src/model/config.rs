use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variants used in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Nested U-units, multi-scale extraction, attention fusion.
    #[serde(rename = "full")]
    Full,
    /// As `Full`, but the multi-scale bottleneck reduction uses k-wide
    /// kernels instead of pointwise ones.
    #[serde(rename = "no-bottleneck")]
    NoBottleneck,
    /// Nested U-units and multi-scale extraction; streams are concatenated.
    #[serde(rename = "u2-mse")]
    U2Mse,
    /// Nested U-units only; streams are concatenated.
    #[serde(rename = "u2-only")]
    U2Only,
    /// One conv block per level instead of a nested U-unit; streams are concatenated.
    #[serde(rename = "u-basic")]
    UBasic,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::UBasic,
        Variant::U2Only,
        Variant::U2Mse,
        Variant::Full,
        Variant::NoBottleneck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBottleneck => "no-bottleneck",
            Variant::U2Mse => "u2-mse",
            Variant::U2Only => "u2-only",
            Variant::UBasic => "u-basic",
        }
    }

    pub fn nested(self) -> bool {
        self != Variant::UBasic
    }

    pub fn multi_scale(self) -> bool {
        matches!(self, Variant::Full | Variant::NoBottleneck | Variant::U2Mse)
    }

    pub fn attention(self) -> bool {
        matches!(self, Variant::Full | Variant::NoBottleneck)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Epochs per input window (L).
    pub seq_len: usize,
    /// Samples per epoch (n).
    pub epoch_len: usize,
    /// Encoder filters per level; the decoder mirrors the first four.
    pub filters: Vec<usize>,
    pub kernel: usize,
    /// Pooling depth inside each U-unit.
    pub depth: usize,
    /// Max-pool sizes between consecutive encoder levels.
    pub pools: Vec<usize>,
    pub dilations: Vec<usize>,
    pub bottleneck_rate: usize,
    pub attention_ratio: usize,
    pub classes: usize,
    /// U-unit inner width is `clamp(out / mid_divisor, mid_min, mid_max)`.
    pub mid_divisor: usize,
    pub mid_min: usize,
    pub mid_max: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: 20,
            epoch_len: 3000,
            filters: vec![16, 32, 64, 128, 256],
            kernel: 5,
            depth: 4,
            pools: vec![10, 8, 6, 4],
            dilations: vec![1, 2, 3, 4],
            bottleneck_rate: 4,
            attention_ratio: 4,
            classes: 5,
            mid_divisor: 8,
            mid_min: 8,
            mid_max: 16,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// A small configuration (2 epochs of 100 samples) for tests and smoke runs.
    pub fn toy() -> Self {
        ModelConfig {
            seq_len: 2,
            epoch_len: 100,
            filters: vec![4, 8, 12, 16, 20],
            depth: 3,
            pools: vec![2, 2, 2, 2],
            attention_ratio: 2,
            mid_min: 4,
            mid_max: 8,
            ..ModelConfig::default()
        }
    }

    /// Full-rate epochs and pooling with narrow filters and shallow U-units,
    /// for runs on recorded data at desk scale.
    pub fn small() -> Self {
        ModelConfig {
            seq_len: 4,
            filters: vec![4, 8, 12, 16, 20],
            depth: 2,
            mid_min: 4,
            mid_max: 8,
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn input_len(&self) -> usize {
        self.seq_len * self.epoch_len
    }

    pub fn mid_channels(&self, out: usize) -> usize {
        (out / self.mid_divisor).clamp(self.mid_min, self.mid_max)
    }

    /// Sequence length at each encoder level.
    pub fn level_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.input_len()];
        for &p in &self.pools {
            let last = *lens.last().unwrap();
            lens.push(last.div_ceil(p));
        }
        lens
    }

    /// Channels of a stream's output, before fusion.
    pub fn stream_channels(&self) -> usize {
        self.filters[0]
    }

    /// Channels entering the classifier.
    pub fn fused_channels(&self) -> usize {
        if self.variant.attention() {
            self.stream_channels()
        } else {
            2 * self.stream_channels()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.filters.len() != 5 {
            return bad(format!("expected 5 encoder filters, got {}", self.filters.len()));
        }
        if self.pools.len() != self.filters.len() - 1 {
            return bad(format!(
                "expected {} pool sizes, got {}",
                self.filters.len() - 1,
                self.pools.len()
            ));
        }
        let scalars = [
            ("seq_len", self.seq_len),
            ("epoch_len", self.epoch_len),
            ("kernel", self.kernel),
            ("depth", self.depth),
            ("bottleneck_rate", self.bottleneck_rate),
            ("attention_ratio", self.attention_ratio),
            ("mid_divisor", self.mid_divisor),
            ("mid_min", self.mid_min),
        ];
        if let Some((name, _)) = scalars.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.filters.iter().chain(&self.pools).chain(&self.dilations).any(|&v| v == 0) {
            return bad("filters, pools and dilations must be positive".into());
        }
        if self.dilations.is_empty() {
            return bad("at least one dilation rate is required".into());
        }
        if self.classes < 2 {
            return bad("at least two classes are required".into());
        }
        if self.mid_max < self.mid_min {
            return bad("mid_max must be >= mid_min".into());
        }
        if self.stream_channels() < self.attention_ratio {
            return bad(format!(
                "attention ratio {} exceeds the {} fused channels",
                self.attention_ratio,
                self.stream_channels()
            ));
        }
        let min_len = 1usize << self.depth;
        if let Some(&len) = self.level_lengths().iter().find(|&&l| l < min_len) {
            return bad(format!(
                "encoder level of length {len} is shorter than 2^depth = {min_len}"
            ));
        }
        Ok(())
    }
}
