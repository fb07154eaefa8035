use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::grouping::{ChannelPartition, GroupingKind, GroupingScheme};
use crate::error::{Error, Result};

/// How the partial-attention branch decodes its channel groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderSharing {
    /// One deconvolution stack used by every group.
    Shared,
    /// A separate deconvolution stack per group.
    Independent,
}

/// What the partial-attention heads regress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PabTarget {
    /// Gaussian heatmaps, one channel per keypoint of the group.
    Keypoints,
    /// The RGB image restricted to one horizontal stripe per group.
    PartImage,
}

/// Structural configuration of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Block-1 (stem) output channels.
    pub stem_channels: usize,
    /// Output channels of blocks 2, 3 and 4; the last is `C`.
    pub block_channels: [usize; 3],
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub grouping: GroupingKind,
    pub decoder_channels: usize,
    pub decoder_layers: usize,
    pub decoder_kernel: usize,
    pub pab_decoder: DecoderSharing,
    pub pab_target: PabTarget,
    /// Whether the holistic branch's encoder reuses backbone blocks 2-4.
    pub hab_shares_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 64,
            input_w: 32,
            stem_channels: 16,
            block_channels: [24, 36, 50],
            embed_hidden: 64,
            embed_dim: 32,
            grouping: GroupingKind::Six,
            decoder_channels: 16,
            decoder_layers: 4,
            decoder_kernel: 3,
            pab_decoder: DecoderSharing::Shared,
            pab_target: PabTarget::Keypoints,
            hab_shares_encoder: false,
        }
    }
}

/// Each backbone block halves the spatial extent.
pub const BACKBONE_STRIDE: usize = 16;

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        self.block_channels[2]
    }

    pub fn feature_extent(&self) -> (usize, usize) {
        (self.input_h / BACKBONE_STRIDE, self.input_w / BACKBONE_STRIDE)
    }

    pub fn lowlevel_extent(&self) -> (usize, usize) {
        (self.input_h / 2, self.input_w / 2)
    }

    pub fn num_groups(&self) -> usize {
        self.grouping.groups()
    }

    pub fn scheme(&self) -> GroupingScheme {
        self.grouping.scheme()
    }

    pub fn partition(&self) -> Result<ChannelPartition> {
        ChannelPartition::new(self.feature_channels(), self.num_groups())
    }

    /// Output channels of each partial-attention head.
    pub fn head_channels(&self) -> Vec<usize> {
        match self.pab_target {
            PabTarget::Keypoints => self.scheme().group_sizes(),
            PabTarget::PartImage => vec![3; self.num_groups()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0
            || self.input_w == 0
            || !self.input_h.is_multiple_of(BACKBONE_STRIDE)
            || !self.input_w.is_multiple_of(BACKBONE_STRIDE)
        {
            return Err(Error::Config(format!(
                "input extent {}x{} must be a positive multiple of the backbone stride {BACKBONE_STRIDE}",
                self.input_h, self.input_w
            )));
        }
        let widths = [
            self.stem_channels,
            self.block_channels[0],
            self.block_channels[1],
            self.block_channels[2],
        ];
        if widths.contains(&0) || self.embed_hidden == 0 || self.embed_dim == 0 || self.decoder_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if 1usize.checked_shl(self.decoder_layers as u32) != Some(BACKBONE_STRIDE) {
            return Err(Error::Config(format!(
                "{} stride-2 decoder layers cannot undo the backbone stride {BACKBONE_STRIDE}",
                self.decoder_layers
            )));
        }
        if self.decoder_kernel != 3 {
            return Err(Error::Config(format!(
                "decoder kernel {} unsupported; stride-2 doubling needs kernel 3 with padding 1",
                self.decoder_kernel
            )));
        }
        self.partition()?;
        Ok(())
    }

    /// Every field as an integer, in checkpoint order.
    pub fn to_words(&self) -> Vec<u32> {
        let w = |v: usize| v as u32;
        vec![
            w(self.input_h),
            w(self.input_w),
            w(self.stem_channels),
            w(self.block_channels[0]),
            w(self.block_channels[1]),
            w(self.block_channels[2]),
            w(self.embed_hidden),
            w(self.embed_dim),
            w(self.num_groups()),
            w(self.decoder_channels),
            w(self.decoder_layers),
            w(self.decoder_kernel),
            match self.pab_decoder {
                DecoderSharing::Shared => 0,
                DecoderSharing::Independent => 1,
            },
            match self.pab_target {
                PabTarget::Keypoints => 0,
                PabTarget::PartImage => 1,
            },
            u32::from(self.hab_shares_encoder),
        ]
    }

    pub const WORDS: usize = 15;

    pub fn from_words(words: &[u32]) -> Result<Self> {
        if words.len() != Self::WORDS {
            return Err(Error::Format(format!(
                "config block has {} fields, expected {}",
                words.len(),
                Self::WORDS
            )));
        }
        let u = |i: usize| words[i] as usize;
        let cfg = Self {
            input_h: u(0),
            input_w: u(1),
            stem_channels: u(2),
            block_channels: [u(3), u(4), u(5)],
            embed_hidden: u(6),
            embed_dim: u(7),
            grouping: GroupingKind::from_groups(u(8)).map_err(|e| Error::Format(format!("{e}")))?,
            decoder_channels: u(9),
            decoder_layers: u(10),
            decoder_kernel: u(11),
            pab_decoder: match words[12] {
                0 => DecoderSharing::Shared,
                1 => DecoderSharing::Independent,
                v => return Err(Error::Format(format!("unknown decoder sharing code {v}"))),
            },
            pab_target: match words[13] {
                0 => PabTarget::Keypoints,
                1 => PabTarget::PartImage,
                v => return Err(Error::Format(format!("unknown PAB target code {v}"))),
            },
            hab_shares_encoder: match words[14] {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("invalid encoder sharing flag {v}"))),
            },
        };
        cfg.validate().map_err(|e| Error::Format(format!("{e}")))?;
        Ok(cfg)
    }
}
