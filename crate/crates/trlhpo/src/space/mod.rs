//! The layer/hyper-parameter grid, decoding of continuous actions into
//! legal layers, and feature-map shape propagation.

mod model;

pub use model::{build_model, ModelPlan, PlanStep};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Maximum number of generated layers in one architecture.
pub const MAX_LAYERS: usize = 6;

pub const CONV_FILTERS: [usize; 16] = [8, 16, 24, 32, 40, 48, 56, 64, 72, 80, 88, 96, 104, 112, 120, 128];
pub const CONV_KERNELS: [usize; 3] = [3, 5, 7];
pub const CONV_STRIDES: [usize; 3] = [1, 2, 3];
pub const POOL_KERNELS: [usize; 7] = [2, 3, 4, 5, 6, 7, 8];
pub const POOL_STRIDES: [usize; 3] = [1, 2, 3];
pub const POOL_PADDINGS: [usize; 4] = [0, 1, 2, 3];
pub const ACTIVATIONS: [Activation; 7] = [
    Activation::None,
    Activation::Relu,
    Activation::LeakyRelu,
    Activation::Tanh,
    Activation::Sigmoid,
    Activation::Elu,
    Activation::Gelu,
];

/// Fully-connected widths 16, 24, ..., 512.
pub fn fcl_neurons() -> Vec<usize> {
    (0..63).map(|i| 16 + 8 * i).collect()
}

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("layer {index}: {detail}")]
    ShapeFailure { index: usize, detail: String },
    #[error("architecture already has {MAX_LAYERS} layers")]
    TooManyLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Elu,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2D,
    FCL,
    MaxPool,
}

/// One generated layer with its hyper-parameters, all drawn from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv2D { filters: usize, kernel: usize, stride: usize },
    FCL { neurons: usize, bias: bool, activation: Activation },
    MaxPool { kernel: usize, stride: usize, padding: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv2D { .. } => LayerKind::Conv2D,
            LayerSpec::FCL { .. } => LayerKind::FCL,
            LayerSpec::MaxPool { .. } => LayerKind::MaxPool,
        }
    }

    /// Membership of every hyper-parameter in its grid value list.
    pub fn in_grid(&self) -> bool {
        match *self {
            LayerSpec::Conv2D { filters, kernel, stride } => {
                CONV_FILTERS.contains(&filters)
                    && CONV_KERNELS.contains(&kernel)
                    && CONV_STRIDES.contains(&stride)
            }
            LayerSpec::FCL { neurons, .. } => fcl_neurons().contains(&neurons),
            LayerSpec::MaxPool { kernel, stride, padding } => {
                POOL_KERNELS.contains(&kernel)
                    && POOL_STRIDES.contains(&stride)
                    && POOL_PADDINGS.contains(&padding)
            }
        }
    }
}

/// Shape of the data flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureShape {
    Grid { channels: usize, height: usize, width: usize },
    Flat { len: usize },
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        match *self {
            FeatureShape::Grid { channels, height, width } => channels * height * width,
            FeatureShape::Flat { len } => len,
        }
    }

    pub fn is_flat(&self) -> bool {
        matches!(self, FeatureShape::Flat { .. })
    }
}

/// Actor output: four components in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub [f64; 4]);

impl ActionVector {
    /// Clamps each component into `[0, 1]`.
    pub fn new(raw: [f64; 4]) -> Self {
        ActionVector(raw.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn components(&self) -> [f64; 4] {
        self.0
    }
}

/// Grid index selected by a unit-interval coordinate:
/// `min(floor(a * n), n - 1)`.
pub fn grid_index(a: f64, n: usize) -> usize {
    ((a * n as f64).floor() as usize).min(n - 1)
}

/// Maps an action to a layer: the first component picks the kind by
/// thirds, the rest index that kind's hyper-parameter lists. The result
/// is already legalized for `shape`.
pub fn decode_action(a: &ActionVector, shape: &FeatureShape) -> LayerSpec {
    let [a0, a1, a2, a3] = a.components();
    let raw = if a0 < 1.0 / 3.0 {
        LayerSpec::Conv2D {
            filters: CONV_FILTERS[grid_index(a1, CONV_FILTERS.len())],
            kernel: CONV_KERNELS[grid_index(a2, CONV_KERNELS.len())],
            stride: CONV_STRIDES[grid_index(a3, CONV_STRIDES.len())],
        }
    } else if a0 < 2.0 / 3.0 {
        decode_fcl(a1, a2, a3)
    } else {
        LayerSpec::MaxPool {
            kernel: POOL_KERNELS[grid_index(a1, POOL_KERNELS.len())],
            stride: POOL_STRIDES[grid_index(a2, POOL_STRIDES.len())],
            padding: POOL_PADDINGS[grid_index(a3, POOL_PADDINGS.len())],
        }
    };
    legalize(raw, shape, a)
}

fn decode_fcl(a1: f64, a2: f64, a3: f64) -> LayerSpec {
    let neurons = fcl_neurons();
    LayerSpec::FCL {
        neurons: neurons[grid_index(a1, neurons.len())],
        bias: a2 >= 0.5,
        activation: ACTIVATIONS[grid_index(a3, ACTIVATIONS.len())],
    }
}

/// Repairs a decoded layer for the current feature shape:
/// grid layers after a flatten become fully-connected layers (re-decoded
/// from the action under the FCL grids), and oversized kernels are
/// clamped to the largest grid value that fits. A kernel with no legal
/// grid value also degrades to a fully-connected layer.
pub fn legalize(layer: LayerSpec, shape: &FeatureShape, a: &ActionVector) -> LayerSpec {
    let [_, a1, a2, a3] = a.components();
    let (height, width) = match *shape {
        FeatureShape::Flat { .. } => {
            return match layer {
                LayerSpec::FCL { .. } => layer,
                _ => decode_fcl(a1, a2, a3),
            };
        }
        FeatureShape::Grid { height, width, .. } => (height, width),
    };
    let spatial = height.min(width);
    match layer {
        LayerSpec::Conv2D { filters, kernel, stride } => {
            if kernel <= spatial {
                return layer;
            }
            match largest_fitting(&CONV_KERNELS, spatial) {
                Some(k) => LayerSpec::Conv2D { filters, kernel: k, stride },
                None => decode_fcl(a1, a2, a3),
            }
        }
        LayerSpec::MaxPool { kernel, stride, padding } => {
            let padded = spatial + 2 * padding;
            if kernel <= padded {
                return layer;
            }
            match largest_fitting(&POOL_KERNELS, padded) {
                Some(k) => LayerSpec::MaxPool { kernel: k, stride, padding },
                None => decode_fcl(a1, a2, a3),
            }
        }
        LayerSpec::FCL { .. } => layer,
    }
}

fn largest_fitting(grid: &[usize], limit: usize) -> Option<usize> {
    grid.iter().rev().copied().find(|&k| k <= limit)
}

/// Output shape of one layer applied to `shape`.
pub fn propagate_shape(shape: &FeatureShape, layer: &LayerSpec) -> Result<FeatureShape, String> {
    match (*shape, *layer) {
        (_, LayerSpec::FCL { neurons, .. }) => Ok(FeatureShape::Flat { len: neurons }),
        (FeatureShape::Grid { height, width, .. }, LayerSpec::Conv2D { filters, kernel, stride }) => {
            if kernel > height || kernel > width {
                return Err(format!("conv kernel {kernel} exceeds input {height}x{width}"));
            }
            Ok(FeatureShape::Grid {
                channels: filters,
                height: (height - kernel) / stride + 1,
                width: (width - kernel) / stride + 1,
            })
        }
        (
            FeatureShape::Grid { channels, height, width },
            LayerSpec::MaxPool { kernel, stride, padding },
        ) => {
            if kernel > height + 2 * padding || kernel > width + 2 * padding {
                return Err(format!(
                    "pool kernel {kernel} exceeds padded input {height}x{width}+2*{padding}"
                ));
            }
            Ok(FeatureShape::Grid {
                channels,
                height: (height + 2 * padding - kernel) / stride + 1,
                width: (width + 2 * padding - kernel) / stride + 1,
            })
        }
        (FeatureShape::Flat { .. }, _) => Err("grid layer applied to flat input".to_string()),
    }
}

/// An ordered stack of generated layers with their propagated shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    output_shapes: Vec<FeatureShape>,
}

impl ArchSpec {
    pub fn new(input_shape: (usize, usize, usize)) -> Self {
        ArchSpec {
            input_shape,
            layers: Vec::new(),
            output_shapes: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output_shapes(&self) -> &[FeatureShape] {
        &self.output_shapes
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Shape seen by the next layer.
    pub fn current_shape(&self) -> FeatureShape {
        match self.output_shapes.last() {
            Some(s) => *s,
            None => {
                let (c, h, w) = self.input_shape;
                FeatureShape::Grid { channels: c, height: h, width: w }
            }
        }
    }

    /// Appends a legal layer, recording its output shape.
    pub fn push(&mut self, layer: LayerSpec) -> Result<(), SpaceError> {
        if self.layers.len() >= MAX_LAYERS {
            return Err(SpaceError::TooManyLayers);
        }
        let shape = propagate_shape(&self.current_shape(), &layer).map_err(|detail| {
            SpaceError::ShapeFailure { index: self.layers.len(), detail }
        })?;
        self.layers.push(layer);
        self.output_shapes.push(shape);
        Ok(())
    }

    /// The canonical JSON form: `{input_shape, layers:[{kind, hp...}]}`.
    /// This exact string feeds [`ArchSpec::digest`] and the run log.
    pub fn canonical_json(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            input_shape: [usize; 3],
            layers: &'a [LayerSpec],
        }
        let (c, h, w) = self.input_shape;
        serde_json::to_string(&Canonical { input_shape: [c, h, w], layers: &self.layers })
            .expect("canonical serialization")
    }

    /// Rebuilds an architecture from its canonical JSON form, re-deriving
    /// and re-validating the per-layer shapes.
    pub fn from_canonical_json(s: &str) -> Result<Self, String> {
        #[derive(Deserialize)]
        struct Canonical {
            input_shape: [usize; 3],
            layers: Vec<LayerSpec>,
        }
        let c: Canonical = serde_json::from_str(s).map_err(|e| e.to_string())?;
        let mut arch = ArchSpec::new((c.input_shape[0], c.input_shape[1], c.input_shape[2]));
        for layer in c.layers {
            arch.push(layer).map_err(|e| e.to_string())?;
        }
        Ok(arch)
    }

    /// Content digest: SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
