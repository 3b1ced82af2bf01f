//! Lowering an architecture into an executable model description.

use serde::{Deserialize, Serialize};

use super::{propagate_shape, Activation, ArchSpec, FeatureShape, LayerSpec, SpaceError};

/// One executable stage of a candidate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanStep {
    /// Convolution followed by a fixed ReLU. The grid exposes no
    /// activation choice for convolutions, so every conv gets one.
    Conv { in_channels: usize, filters: usize, kernel: usize, stride: usize },
    Pool { kernel: usize, stride: usize, padding: usize },
    Flatten { len: usize },
    Dense { inputs: usize, outputs: usize, bias: bool, activation: Activation },
}

/// A candidate model ready for parameter allocation and training: the
/// generated layers in order, plus the implicit classification head
/// (flatten if needed, then a dense layer to `num_classes`). The head is
/// not one of the generated layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub input_shape: (usize, usize, usize),
    pub steps: Vec<PlanStep>,
    pub num_classes: usize,
}

impl ModelPlan {
    /// Number of trainable scalars across all steps.
    pub fn param_count(&self) -> usize {
        self.steps
            .iter()
            .map(|s| match *s {
                PlanStep::Conv { in_channels, filters, kernel, .. } => {
                    filters * in_channels * kernel * kernel + filters
                }
                PlanStep::Dense { inputs, outputs, bias, .. } => {
                    inputs * outputs + if bias { outputs } else { 0 }
                }
                _ => 0,
            })
            .sum()
    }
}

/// Lowers `arch` to a trainable plan, validating every shape along the
/// way. Shape failures name the offending layer index.
pub fn build_model(arch: &ArchSpec, num_classes: usize) -> Result<ModelPlan, SpaceError> {
    let (c, h, w) = arch.input_shape();
    let mut shape = FeatureShape::Grid { channels: c, height: h, width: w };
    let mut steps = Vec::new();
    for (index, layer) in arch.layers().iter().enumerate() {
        match *layer {
            LayerSpec::Conv2D { filters, kernel, stride } => {
                let in_channels = match shape {
                    FeatureShape::Grid { channels, .. } => channels,
                    FeatureShape::Flat { .. } => {
                        return Err(SpaceError::ShapeFailure {
                            index,
                            detail: "conv layer after flatten".to_string(),
                        })
                    }
                };
                steps.push(PlanStep::Conv { in_channels, filters, kernel, stride });
            }
            LayerSpec::MaxPool { kernel, stride, padding } => {
                steps.push(PlanStep::Pool { kernel, stride, padding });
            }
            LayerSpec::FCL { neurons, bias, activation } => {
                if !shape.is_flat() {
                    steps.push(PlanStep::Flatten { len: shape.numel() });
                }
                steps.push(PlanStep::Dense {
                    inputs: shape.numel(),
                    outputs: neurons,
                    bias,
                    activation,
                });
            }
        }
        shape = propagate_shape(&shape, layer)
            .map_err(|detail| SpaceError::ShapeFailure { index, detail })?;
    }
    if !shape.is_flat() {
        steps.push(PlanStep::Flatten { len: shape.numel() });
    }
    steps.push(PlanStep::Dense {
        inputs: shape.numel(),
        outputs: num_classes,
        bias: true,
        activation: Activation::None,
    });
    Ok(ModelPlan { input_shape: arch.input_shape(), steps, num_classes })
}
