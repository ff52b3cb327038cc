use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which sequence model summarises the row features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalBranch {
    /// Global branch only.
    None,
    /// 1-D convolution over the row sequence, ReLU, mean over rows.
    Conv,
    /// Flattened sequence through one fully connected layer and ReLU.
    Fc,
    /// Vanilla tanh recurrence; final hidden state.
    Rnn,
    /// LSTM; final hidden state.
    Lstm,
}

impl LocalBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            LocalBranch::None => "none",
            LocalBranch::Conv => "conv",
            LocalBranch::Fc => "fc",
            LocalBranch::Rnn => "rnn",
            LocalBranch::Lstm => "lstm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `(channels, height, width)` of an input image.
    pub input_shape: [usize; 3],
    /// Output widths of the first two backbone blocks; the third block
    /// produces `feature_channels`.
    pub backbone_channels: [usize; 2],
    pub feature_channels: usize,
    pub map_height: usize,
    pub map_width: usize,
    pub reduced_channels: usize,
    pub lstm_hidden: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub local_branch: LocalBranch,
    pub lstm_bias: bool,
    pub normalize_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_shape: [1, 64, 32],
            backbone_channels: [16, 32],
            feature_channels: 64,
            map_height: 8,
            map_width: 4,
            reduced_channels: 32,
            lstm_hidden: 32,
            embed_dim: 64,
            num_classes: 32,
            local_branch: LocalBranch::Lstm,
            lstm_bias: true,
            normalize_embeddings: true,
        }
    }
}

/// Spatial size after one 3×3, stride-2, padding-1 convolution.
pub(crate) fn downsampled(extent: usize) -> usize {
    (extent + 2 - 3) / 2 + 1
}

impl EncoderConfig {
    /// Width of the local feature that joins the global one.
    pub fn local_dim(&self) -> usize {
        match self.local_branch {
            LocalBranch::None => 0,
            LocalBranch::Conv | LocalBranch::Fc => self.reduced_channels,
            LocalBranch::Rnn | LocalBranch::Lstm => self.lstm_hidden,
        }
    }

    pub fn fusion_in(&self) -> usize {
        self.feature_channels + self.local_dim()
    }

    /// Backbone output extent implied by `input_shape`.
    pub fn backbone_output(&self) -> (usize, usize, usize) {
        let [_, h, w] = self.input_shape;
        let (mut h, mut w) = (h, w);
        for _ in 0..3 {
            h = downsampled(h);
            w = downsampled(w);
        }
        (self.feature_channels, h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
            self.backbone_channels[0],
            self.backbone_channels[1],
            self.feature_channels,
            self.reduced_channels,
            self.lstm_hidden,
            self.embed_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let (_, h, w) = self.backbone_output();
        if (h, w) != (self.map_height, self.map_width) {
            return Err(Error::Config(format!(
                "input {:?} yields a {h}×{w} feature map, config says {}×{}",
                self.input_shape, self.map_height, self.map_width
            )));
        }
        Ok(())
    }
}
