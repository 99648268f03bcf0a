use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleStyle {
    /// Dense 3x3 stride-2 convolution from one stage width to the next.
    StridedFull,
}

/// Layout of the encoder-decoder.
///
/// Encoder stage `i` opens with a stride-2 dense 3x3 convolution into
/// `encoder_channels[i]` followed by `encoder_blocks[i]` depthwise-separable
/// blocks. The bottleneck stays at the deepest resolution and widens to
/// `bottleneck_channels`; its last block uses a dilated depthwise kernel.
/// Decoder stage `i` upsamples 2x, concatenates the matching encoder output
/// (when one exists at that resolution) and runs `decoder_blocks[i]` blocks.
/// ECA, a depthwise refinement conv and a 1x1 head finish the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_size: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_blocks: Vec<usize>,
    pub bottleneck_channels: usize,
    pub bottleneck_blocks: usize,
    pub bottleneck_dilation: usize,
    pub decoder_channels: Vec<usize>,
    pub decoder_blocks: Vec<usize>,
    pub eca_kernel: usize,
    pub downsample: DownsampleStyle,
    /// Skip the ECA gate at execution time. Not part of the weight layout.
    #[serde(default)]
    pub eca_bypass: bool,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            input_size: 96,
            encoder_channels: vec![48, 96, 160, 256],
            encoder_blocks: vec![1, 1, 2, 2],
            bottleneck_channels: 320,
            bottleneck_blocks: 2,
            bottleneck_dilation: 2,
            decoder_channels: vec![256, 160, 96, 48],
            decoder_blocks: vec![3, 3, 3, 1],
            eca_kernel: 3,
            downsample: DownsampleStyle::StridedFull,
            eca_bypass: false,
        }
    }
}

impl NetSpec {
    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn stages(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidSpec(m));
        let stages = self.stages();
        if stages == 0 {
            return bad("at least one encoder stage is required".into());
        }
        if self.encoder_blocks.len() != stages
            || self.decoder_channels.len() != stages
            || self.decoder_blocks.len() != stages
        {
            return bad(format!(
                "encoder_blocks, decoder_channels and decoder_blocks must all have {stages} entries"
            ));
        }
        if self.encoder_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "encoder channel schedule {:?} must be strictly increasing",
                self.encoder_channels
            ));
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .any(|&c| c == 0)
            || self.bottleneck_channels == 0
        {
            return bad("channel counts must be positive".into());
        }
        if self.bottleneck_blocks == 0 {
            return bad("the bottleneck needs at least one block".into());
        }
        if self.bottleneck_dilation == 0 {
            return bad("bottleneck dilation must be >= 1".into());
        }
        if self.eca_kernel.is_multiple_of(2) {
            return bad(format!("ECA kernel {} must be odd", self.eca_kernel));
        }
        let head_ch = *self.decoder_channels.last().expect("stages > 0");
        if self.eca_kernel > head_ch {
            return bad(format!(
                "ECA kernel {} exceeds the {head_ch} head channels",
                self.eca_kernel
            ));
        }
        let factor = 1usize << stages;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!(
                "input size {} must be a positive multiple of {factor}",
                self.input_size
            ));
        }
        Ok(())
    }

    /// Hash of every field that shapes the weight layout.
    pub fn fingerprint(&self) -> u64 {
        let layout = NetSpec {
            eca_bypass: false,
            ..self.clone()
        };
        let canonical = serde_json::to_vec(&layout).expect("spec serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}
