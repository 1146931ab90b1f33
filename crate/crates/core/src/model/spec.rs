use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::conv_output_extent;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape {
            channels,
            height,
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: Vec<BlockSpec>,
    pub output_channels: usize,
    pub downsample: bool,
    /// Block after which the stage is tapped; `None` taps the stage output.
    pub tap_after: Option<usize>,
}

impl StageSpec {
    /// conv 3x3 -> batch norm -> relu, stride 2 when downsampling.
    pub fn conv_bn_relu(out_channels: usize, downsample: bool) -> Self {
        StageSpec {
            blocks: vec![
                BlockSpec::Conv {
                    out_channels,
                    kernel: 3,
                    stride: if downsample { 2 } else { 1 },
                    padding: 1,
                    bias: false,
                },
                BlockSpec::BatchNorm,
                BlockSpec::Relu,
            ],
            output_channels: out_channels,
            downsample,
            tap_after: None,
        }
    }

    pub fn tap_block(&self) -> usize {
        self.tap_after.unwrap_or(self.blocks.len().saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    /// Width of the hidden layer after global pooling; 0 means none.
    pub hidden: usize,
    pub classes: usize,
}

/// Declarative description of a staged CNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputShape,
    pub stages: Vec<StageSpec>,
    pub classifier: ClassifierSpec,
}

/// Shape of a stage output, as computed by [`ModelSpec::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelSpec {
    pub fn with_input(mut self, input: InputShape) -> Self {
        self.input = input;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classifier.classes = classes;
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Checks structural invariants and returns the tapped shape of every
    /// stage.
    pub fn validate(&self) -> Result<Vec<StageShape>> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.stages.len() < 2 {
            return bad(format!("need at least 2 stages, got {}", self.stages.len()));
        }
        let InputShape {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return bad(format!("input shape {:?} has a zero extent", self.input));
        }
        if self.classifier.classes == 0 {
            return bad("classifier needs at least one class".into());
        }
        let (mut c, mut h, mut w) = (channels, height, width);
        let mut shapes = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.blocks.is_empty() {
                return bad(format!("stage {s} has no blocks"));
            }
            let tap = stage.tap_block();
            if tap >= stage.blocks.len() {
                return bad(format!("stage {s}: tap point {tap} is not a block index"));
            }
            let (h0, w0) = (h, w);
            let mut tapped = None;
            for (b, block) in stage.blocks.iter().enumerate() {
                match *block {
                    BlockSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        ..
                    } => {
                        if out_channels == 0 || stride == 0 {
                            return bad(format!("stage {s} block {b}: zero channels or stride"));
                        }
                        match (
                            conv_output_extent(h, kernel, stride, padding),
                            conv_output_extent(w, kernel, stride, padding),
                        ) {
                            (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                            _ => {
                                return bad(format!(
                                    "stage {s} block {b}: spatial collapse ({h}x{w} input, kernel {kernel})"
                                ))
                            }
                        }
                        c = out_channels;
                    }
                    BlockSpec::MaxPool { kernel, stride } => {
                        match (
                            conv_output_extent(h, kernel, stride, 0),
                            conv_output_extent(w, kernel, stride, 0),
                        ) {
                            (Some(nh), Some(nw)) => (h, w) = (nh, nw),
                            _ => {
                                return bad(format!(
                                    "stage {s} block {b}: spatial collapse ({h}x{w} input, pool {kernel})"
                                ))
                            }
                        }
                    }
                    BlockSpec::BatchNorm | BlockSpec::Relu => {}
                }
                if b == tap {
                    tapped = Some(StageShape {
                        channels: c,
                        height: h,
                        width: w,
                    });
                }
            }
            if c != stage.output_channels {
                return bad(format!(
                    "stage {s} declares {} output channels but produces {c}",
                    stage.output_channels
                ));
            }
            if c < 2 {
                return bad(format!("stage {s} has {c} channel(s); at least 2 are required"));
            }
            if stage.downsample != ((h, w) != (h0, w0)) {
                return bad(format!("stage {s}: downsample flag disagrees with its blocks"));
            }
            let tapped = tapped.expect("tap index checked above");
            if tapped.channels < 2 {
                return bad(format!("stage {s} tap point has fewer than 2 channels"));
            }
            shapes.push(tapped);
        }
        Ok(shapes)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }
}
