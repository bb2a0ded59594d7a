//! Minimal feed-forward network engine: dense, conv, pooling, activation,
//! dropout and softmax layers trained by plain SGD on cross-entropy.

mod gradcheck;
mod io;
mod layer;
mod network;
mod tensor;
mod train;

pub use gradcheck::{
    gradient_check, gradient_check_report, gradient_check_suite, GradientCheckReport, ProbeNetwork, SuiteResult,
    MAX_PROBES_PER_TENSOR,
};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, MODEL_FORMAT_VERSION};
pub use layer::{Layer, LayerGrad, LayerSpec};
pub use network::{cross_entropy, weighted_cross_entropy, Mode, NetworkModel, LOG_EPSILON};
pub use tensor::Tensor;
pub use train::{train, ClassWeighting, TrainConfig};

/// Widths of the patch classifier; the layer layout is fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchCnnWidths {
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden_units: usize,
    pub dropout: f64,
}

impl Default for PatchCnnWidths {
    fn default() -> Self {
        Self {
            conv1_channels: 8,
            conv2_channels: 16,
            hidden_units: 64,
            dropout: 0.5,
        }
    }
}

/// Patch classifier for `[3, 48, 48]` inputs:
/// conv 5×5 → relu → pool → conv 5×5 → relu → pool →
/// dense → relu → dropout → dense 2 → softmax.
pub fn patch_cnn(w: PatchCnnWidths) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_channels: 3, out_channels: w.conv1_channels, kernel_size: 5, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Conv2d { in_channels: w.conv1_channels, out_channels: w.conv2_channels, kernel_size: 5, stride: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Dense { in_units: w.conv2_channels * 9 * 9, out_units: w.hidden_units },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: w.dropout },
        LayerSpec::Dense { in_units: w.hidden_units, out_units: 2 },
        LayerSpec::Softmax,
    ]
}

/// The default widths: 8 and 16 conv channels, 64 hidden units, dropout 0.5.
pub fn patch_cnn_specs() -> Vec<LayerSpec> {
    patch_cnn(PatchCnnWidths::default())
}
