use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

/// Architecture hyperparameters of the encoder-decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Residual blocks in each of the four encoder stages.
    pub blocks_per_stage: [usize; 4],
    /// Channels of the stem and the first stage; later stages double it.
    pub base_width: usize,
    /// Side length of the square stem kernel.
    pub stem_kernel: usize,
    pub depth_layers_enabled: bool,
    pub in_channels: usize,
    pub out_classes: usize,
    /// Output channels of the five decoder blocks, coarsest first.
    pub decoder_widths: [usize; 5],
}

impl NetworkConfig {
    /// ResNet34 encoder at full width.
    pub fn resnet34() -> Self {
        NetworkConfig {
            blocks_per_stage: [3, 4, 6, 3],
            base_width: 64,
            stem_kernel: 7,
            depth_layers_enabled: true,
            in_channels: 3,
            out_classes: NUM_CLASSES,
            decoder_widths: [256, 128, 64, 32, 16],
        }
    }

    /// One block per stage at width 8; small enough for CPU training.
    pub fn tiny() -> Self {
        NetworkConfig {
            blocks_per_stage: [1, 1, 1, 1],
            base_width: 8,
            stem_kernel: 7,
            depth_layers_enabled: true,
            in_channels: 3,
            out_classes: NUM_CLASSES,
            decoder_widths: [32, 16, 8, 8, 8],
        }
    }

    pub fn with_depth_layers(mut self, enabled: bool) -> Self {
        self.depth_layers_enabled = enabled;
        self
    }

    /// Output channels of encoder features f0 (stem) .. f4 (last stage).
    pub fn encoder_widths(&self) -> [usize; 5] {
        let w = self.base_width;
        [w, w, 2 * w, 4 * w, 8 * w]
    }

    /// Input channels of each decoder block's transposed convolution.
    pub fn decoder_inputs(&self) -> [usize; 5] {
        let d = self.decoder_widths;
        [8 * self.base_width, d[0], d[1], d[2], d[3]]
    }

    /// Skip-connection channels concatenated in each decoder block.
    pub fn decoder_skips(&self) -> [usize; 5] {
        let e = self.encoder_widths();
        [e[3], e[2], e[1], e[0], 0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be >= 1".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(format!(
                "blocks_per_stage must all be >= 1, got {:?}",
                self.blocks_per_stage
            )));
        }
        if self.stem_kernel == 0 || self.stem_kernel % 2 == 0 {
            return Err(Error::Config(format!("stem_kernel must be odd, got {}", self.stem_kernel)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.out_classes != NUM_CLASSES {
            return Err(Error::Config(format!("out_classes must be {NUM_CLASSES}, got {}", self.out_classes)));
        }
        let mismatches: Vec<String> = self
            .decoder_widths
            .iter()
            .zip(self.decoder_inputs())
            .enumerate()
            .filter(|(_, (&d, input))| d == 0 || d > *input)
            .map(|(j, (&d, input))| format!("decoder block {j}: width {d} not in 1..={input}"))
            .collect();
        if !mismatches.is_empty() {
            return Err(Error::Config(format!(
                "decoder_widths inconsistent with encoder widths {:?}: {}",
                self.encoder_widths(),
                mismatches.join("; ")
            )));
        }
        Ok(())
    }

    /// Number of k×k convolutions on the encoder's main path (stem plus two
    /// per residual block); projection shortcuts are not counted.
    pub fn encoder_main_convs(&self) -> usize {
        1 + 2 * self.blocks_per_stage.iter().sum::<usize>()
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::resnet34()
    }
}
