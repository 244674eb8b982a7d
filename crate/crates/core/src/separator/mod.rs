//! Temporal convolutional mask estimator.
//!
//! The network is a channel-wise layer norm and a 1×1 bottleneck, followed by
//! `R` repeats of `X` residual blocks whose depthwise convolutions are dilated
//! by `1, 2, …, 2^(X−1)`, and a 1×1 projection to `S` masks. Causality only
//! changes how each depthwise convolution is padded; see
//! [`dilation_schedule`].

mod checkpoint;
mod tcn;

pub use checkpoint::{Checkpoint, Precision, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tcn::{BatchStats, Mode, Tcn, TcnOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Batch norm: per-channel statistics, running averages at inference.
    Bn,
    /// Global layer norm over every channel and frame.
    Gln,
    /// Channel-wise (cumulative-free) layer norm, one set of statistics per frame.
    Cln,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Causality {
    NonCausal,
    Causal,
    /// Symmetric padding in the first repeat only, causal afterwards.
    SemiCausal,
}

impl Causality {
    pub const ALL: [Causality; 3] = [Causality::NonCausal, Causality::SemiCausal, Causality::Causal];

    pub fn name(self) -> &'static str {
        match self {
            Causality::NonCausal => "non_causal",
            Causality::Causal => "causal",
            Causality::SemiCausal => "semi_causal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskActivation {
    Relu,
    Sigmoid,
    Linear,
}

fn default_kernel() -> usize {
    3
}

fn default_activation() -> MaskActivation {
    MaskActivation::Relu
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcnConfig {
    /// Rows of each output mask.
    pub mask_rows: usize,
    /// Bottleneck channels.
    pub bottleneck: usize,
    /// Hidden channels inside each block.
    pub hidden: usize,
    /// Depthwise kernel size, odd.
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Blocks per repeat.
    pub blocks: usize,
    pub repeats: usize,
    pub norm: NormKind,
    pub causality: Causality,
    pub sources: usize,
    /// Rows of the assembled input features.
    pub input_width: usize,
    #[serde(default = "default_activation")]
    pub mask_activation: MaskActivation,
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mask_rows", self.mask_rows),
            ("bottleneck", self.bottleneck),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("repeats", self.repeats),
            ("sources", self.sources),
            ("input_width", self.input_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("separator `{name}` must be ≥ 1")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "separator `kernel` must be odd, got {}",
                self.kernel
            )));
        }
        if self.blocks > 20 {
            return Err(Error::Config(format!(
                "separator `blocks` = {} gives dilations beyond 2^19",
                self.blocks
            )));
        }
        if self.norm == NormKind::Gln && self.causality != Causality::NonCausal {
            return Err(Error::Config(format!(
                "gln normalization pools statistics over future frames and cannot be used \
                 with {} separators",
                self.causality.name()
            )));
        }
        Ok(())
    }
}

/// Padding of one depthwise convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub repeat: usize,
    pub index: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

/// Dilation and padding of every block, in execution order.
///
/// Each block pads `(P−1)·d` frames in total: split evenly when non-causal,
/// all on the left when causal. Semi-causal separators use the even split in
/// repeat 0 and the causal split afterwards.
pub fn dilation_schedule(config: &TcnConfig) -> Vec<BlockSpec> {
    let mut out = Vec::with_capacity(config.blocks * config.repeats);
    for repeat in 0..config.repeats {
        let symmetric = match config.causality {
            Causality::NonCausal => true,
            Causality::Causal => false,
            Causality::SemiCausal => repeat == 0,
        };
        for index in 0..config.blocks {
            let dilation = 1usize << index;
            let total = (config.kernel - 1) * dilation;
            let (pad_left, pad_right) = if symmetric {
                (total / 2, total / 2)
            } else {
                (total, 0)
            };
            out.push(BlockSpec {
                repeat,
                index,
                dilation,
                pad_left,
                pad_right,
            });
        }
    }
    out
}

/// Receptive field in frames and seconds, exact and in the rounded
/// `2^(X+1)·R` convention used for published tables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveField {
    pub frames: usize,
    pub table_frames: usize,
    pub seconds: f64,
    pub table_seconds: f64,
}

pub fn receptive_field(config: &TcnConfig, hop: usize, sample_rate: u32) -> ReceptiveField {
    let frames = 1 + dilation_schedule(config)
        .iter()
        .map(|b| b.pad_left + b.pad_right)
        .sum::<usize>();
    let table_frames = (config.kernel - 1) * (1usize << config.blocks) * config.repeats;
    let secs = |f: usize| f as f64 * hop as f64 / sample_rate as f64;
    ReceptiveField {
        frames,
        table_frames,
        seconds: secs(frames),
        table_seconds: secs(table_frames),
    }
}

/// Future frames that influence the current output frame.
pub fn lookahead_frames(config: &TcnConfig) -> usize {
    dilation_schedule(config).iter().map(|b| b.pad_right).sum()
}

pub fn lookahead_seconds(config: &TcnConfig, hop: usize, sample_rate: u32) -> f64 {
    lookahead_frames(config) as f64 * hop as f64 / sample_rate as f64
}
