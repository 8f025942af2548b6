use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, InitScheme};

/// Number of stacked context frames (20 left, 1 center, 20 right).
pub const CONTEXT_FRAMES: usize = 41;
/// Filterbank channels per frame.
pub const FEATURE_DIM: usize = 40;
/// Width of one stacked input vector.
pub const STACKED_DIM: usize = CONTEXT_FRAMES * FEATURE_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StackKind {
    /// Plain fully connected stack.
    Dnn,
    /// ResNet-shaped stack of 1×1 / 3×3 / 1×1 bottleneck convolutions.
    CnnBottleneck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    pub fn is_on(self) -> bool {
        self == Toggle::On
    }
}

impl From<bool> for Toggle {
    fn from(on: bool) -> Self {
        if on {
            Toggle::On
        } else {
            Toggle::Off
        }
    }
}

/// Topology of one network in the ablation space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stack: StackKind,
    /// Weight layers on the main path, output layer included.
    pub depth: usize,
    /// dnn: hidden width (one entry) or one entry per hidden layer.
    /// cnn: output channels per stage; the bottleneck inside is a quarter of it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    /// Bottleneck blocks per stage (cnn only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_blocks: Option<Vec<usize>>,
    pub activation: Activation,
    pub shortcut: Toggle,
    pub batchnorm: Toggle,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    /// Spatial layout `[frames, mel]` of the cnn input image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_hw: Option<[usize; 2]>,
    pub output_dim: usize,
    /// Conv bias; defaults to on without batchnorm and off with it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv_bias: Option<Toggle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_override: Option<InitScheme>,
}

fn default_input_dim() -> usize {
    STACKED_DIM
}

pub const DEFAULT_CNN_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const DEFAULT_STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
pub const DEFAULT_DNN_WIDTH: usize = 256;

impl ModelConfig {
    /// Plain fully connected stack without shortcuts or batchnorm.
    pub fn dnn(depth: usize, width: usize, activation: Activation, output_dim: usize) -> Self {
        ModelConfig {
            stack: StackKind::Dnn,
            depth,
            widths: Some(vec![width]),
            stage_blocks: None,
            activation,
            shortcut: Toggle::Off,
            batchnorm: Toggle::Off,
            input_dim: STACKED_DIM,
            input_hw: None,
            output_dim,
            conv_bias: None,
            init_override: None,
        }
    }

    pub fn cnn(depth: usize, activation: Activation, shortcut: bool, batchnorm: bool, output_dim: usize) -> Self {
        ModelConfig {
            stack: StackKind::CnnBottleneck,
            depth,
            widths: None,
            stage_blocks: None,
            activation,
            shortcut: shortcut.into(),
            batchnorm: batchnorm.into(),
            input_dim: STACKED_DIM,
            input_hw: None,
            output_dim,
            conv_bias: None,
            init_override: None,
        }
    }

    /// Shortcut-free, batchnorm-free SELU bottleneck stack.
    pub fn sndcnn(depth: usize, output_dim: usize) -> Self {
        Self::cnn(depth, Activation::Selu, false, false, output_dim)
    }

    /// RELU bottleneck stack with shortcuts and batchnorm.
    pub fn resnet(depth: usize, output_dim: usize) -> Self {
        Self::cnn(depth, Activation::Relu, true, true, output_dim)
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = Some(widths);
        self
    }

    pub fn with_stage_blocks(mut self, blocks: Vec<usize>) -> Self {
        self.stage_blocks = Some(blocks);
        self
    }

    pub fn with_input(mut self, input_dim: usize, input_hw: Option<[usize; 2]>) -> Self {
        self.input_dim = input_dim;
        self.input_hw = input_hw;
        self
    }

    pub fn with_init(mut self, scheme: InitScheme) -> Self {
        self.init_override = Some(scheme);
        self
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.init_override
            .unwrap_or_else(|| InitScheme::for_activation(self.activation))
    }

    pub fn conv_bias_on(&self) -> bool {
        self.conv_bias
            .map(Toggle::is_on)
            .unwrap_or(!self.batchnorm.is_on())
    }

    pub fn stage_widths(&self) -> Vec<usize> {
        match (&self.widths, self.stack) {
            (Some(w), _) => w.clone(),
            (None, StackKind::Dnn) => vec![DEFAULT_DNN_WIDTH],
            (None, StackKind::CnnBottleneck) => DEFAULT_CNN_WIDTHS.to_vec(),
        }
    }

    pub fn blocks_per_stage(&self) -> Vec<usize> {
        self.stage_blocks
            .clone()
            .unwrap_or_else(|| DEFAULT_STAGE_BLOCKS.to_vec())
    }

    /// Spatial input for cnn stacks.
    pub fn image_hw(&self) -> [usize; 2] {
        self.input_hw.unwrap_or([CONTEXT_FRAMES, FEATURE_DIM])
    }

    /// Per-sample input shape, without the batch axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.stack {
            StackKind::Dnn => vec![self.input_dim],
            StackKind::CnnBottleneck => {
                let [h, w] = self.image_hw();
                vec![1, h, w]
            }
        }
    }

    /// Short human-readable tag, e.g. `cnn50-selu-nosc-nobn`.
    pub fn label(&self) -> String {
        let stack = match self.stack {
            StackKind::Dnn => "dnn",
            StackKind::CnnBottleneck => "cnn",
        };
        format!(
            "{stack}{}-{}-{}-{}",
            self.depth,
            self.activation.name(),
            if self.shortcut.is_on() { "sc" } else { "nosc" },
            if self.batchnorm.is_on() { "bn" } else { "nobn" }
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(Error::config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(Error::config)
    }

    /// Checks that do not need shape propagation.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.output_dim == 0 || self.input_dim == 0 {
            return Err(Error::config("input_dim and output_dim must be >= 1"));
        }
        let widths = self.stage_widths();
        if widths.contains(&0) {
            return Err(Error::config(format!("widths must be positive, got {widths:?}")));
        }
        match self.stack {
            StackKind::Dnn => {
                let hidden = self.depth - 1;
                if widths.len() != 1 && widths.len() != hidden {
                    return Err(Error::config(format!(
                        "dnn widths needs 1 or {hidden} entries, got {}",
                        widths.len()
                    )));
                }
            }
            StackKind::CnnBottleneck => {
                let blocks = self.blocks_per_stage();
                if widths.len() != blocks.len() {
                    return Err(Error::config(format!(
                        "{} stage widths for {} stages",
                        widths.len(),
                        blocks.len()
                    )));
                }
                if let Some((s, w)) = widths.iter().enumerate().find(|(_, &w)| w % 4 != 0) {
                    return Err(Error::config(format!(
                        "stage {}: width {w} is not divisible by the bottleneck factor 4",
                        s + 1
                    )));
                }
                let [h, w] = self.image_hw();
                if h * w != self.input_dim {
                    return Err(Error::config(format!(
                        "input_hw {h}x{w} does not match input_dim {}",
                        self.input_dim
                    )));
                }
                if self.depth < 2 {
                    return Err(Error::config("cnn stacks need depth >= 2 (stem + output)"));
                }
                let available = 3 * blocks.iter().sum::<usize>();
                if self.depth - 2 > available {
                    return Err(Error::config(format!(
                        "depth {} needs {} block convolutions, the stages provide {available}",
                        self.depth,
                        self.depth - 2
                    )));
                }
            }
        }
        Ok(())
    }
}
