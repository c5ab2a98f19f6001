use crate::imaging::QualityTier;
use serde::{Deserialize, Serialize};

/// One layer of a sequential model. Convolutions are 3x3-style "same"
/// convolutions with stride 1 (padding `kernel / 2`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// 2x2 average pooling, stride 2 (odd trailing rows/cols are dropped).
    AvgPool2,
    /// 2x2 max pooling, stride 2.
    MaxPool2,
    /// Average pooling onto a fixed `size x size` grid; `size = 1` is global
    /// average pooling.
    AdaptiveAvgPool {
        size: usize,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Dropout {
        rate: f64,
    },
    /// `y = body(x) + x`.
    Residual {
        body: Vec<LayerSpec>,
    },
    /// Squeeze-excitation channel gating:
    /// `y = x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.
    SqueezeExcite {
        channels: usize,
        hidden: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool2 => "avgpool2",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::AdaptiveAvgPool { .. } => "adaptive_avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Residual { .. } => "residual",
            LayerSpec::SqueezeExcite { .. } => "squeeze_excite",
        }
    }
}

/// Architecture plus the training hyperparameters bound to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub tier: Option<QualityTier>,
    /// `[channels, height, width]` of one input item.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    /// Index into `layers` whose output is the feature vector.
    pub feature_layer: usize,
    pub num_classes: usize,
    pub l2_lambda: f64,
    pub dropout: f64,
}

const CLASSES: usize = 10;
const MNIST: [usize; 3] = [1, 28, 28];

impl ModelSpec {
    /// Architecture for `tier`.
    pub fn for_tier(tier: QualityTier) -> Self {
        match tier {
            QualityTier::Low => Self::low(),
            QualityTier::Medium => Self::medium(),
            QualityTier::High => Self::high(),
        }
    }

    /// Lightweight CNN, 8-16 filters, 16-d feature layer.
    pub fn low() -> Self {
        use LayerSpec::*;
        let layers = vec![
            LayerSpec::conv(1, 8),
            Relu,
            MaxPool2,
            LayerSpec::conv(8, 16),
            Relu,
            MaxPool2,
            // 1x1 channel reduction keeps the 7x7 layout within budget
            Conv2d {
                in_channels: 16,
                out_channels: 4,
                kernel: 1,
            },
            Flatten,
            Dropout { rate: 0.3 },
            LayerSpec::dense(4 * 7 * 7, 16),
            Relu,
            LayerSpec::dense(16, CLASSES),
        ];
        Self {
            name: "low".into(),
            tier: Some(QualityTier::Low),
            input_shape: MNIST,
            layers,
            feature_layer: 9,
            num_classes: CLASSES,
            l2_lambda: 0.01,
            dropout: 0.3,
        }
    }

    /// Balanced CNN, 16-32 filters, one batch-normalised residual block,
    /// 32-d feature layer.
    pub fn medium() -> Self {
        use LayerSpec::*;
        let layers = vec![
            LayerSpec::conv(1, 16),
            BatchNorm { channels: 16 },
            Relu,
            AvgPool2,
            LayerSpec::conv(16, 32),
            BatchNorm { channels: 32 },
            Relu,
            AvgPool2,
            Residual {
                body: vec![
                    LayerSpec::conv(32, 32),
                    BatchNorm { channels: 32 },
                    Relu,
                    LayerSpec::conv(32, 32),
                    BatchNorm { channels: 32 },
                ],
            },
            Relu,
            Flatten,
            Dropout { rate: 0.25 },
            LayerSpec::dense(32 * 7 * 7, 64),
            Relu,
            LayerSpec::dense(64, 32),
            Relu,
            LayerSpec::dense(32, CLASSES),
        ];
        Self {
            name: "medium".into(),
            tier: Some(QualityTier::Medium),
            input_shape: MNIST,
            layers,
            feature_layer: 14,
            num_classes: CLASSES,
            l2_lambda: 0.005,
            dropout: 0.25,
        }
    }

    /// Complex CNN, 32-64 filters, two residual blocks with squeeze-excitation
    /// gating, 64-d feature layer.
    pub fn high() -> Self {
        use LayerSpec::*;
        let block = || Residual {
            body: vec![
                LayerSpec::conv(64, 64),
                Relu,
                LayerSpec::conv(64, 64),
                SqueezeExcite {
                    channels: 64,
                    hidden: 16,
                },
            ],
        };
        let layers = vec![
            LayerSpec::conv(1, 32),
            Relu,
            AvgPool2,
            LayerSpec::conv(32, 64),
            Relu,
            AvgPool2,
            block(),
            Relu,
            block(),
            Relu,
            Flatten,
            Dropout { rate: 0.2 },
            LayerSpec::dense(64 * 7 * 7, 64),
            Relu,
            LayerSpec::dense(64, CLASSES),
        ];
        Self {
            name: "high".into(),
            tier: Some(QualityTier::High),
            input_shape: MNIST,
            layers,
            feature_layer: 12,
            num_classes: CLASSES,
            l2_lambda: 0.001,
            dropout: 0.2,
        }
    }

    /// Dense-only probe: flatten, `hidden` ReLU units (the feature layer), and
    /// a linear classifier.
    pub fn dense_probe(input_shape: [usize; 3], hidden: usize, num_classes: usize) -> Self {
        let inputs = input_shape.iter().product();
        Self {
            name: format!("probe{hidden}"),
            tier: None,
            input_shape,
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::dense(inputs, hidden),
                LayerSpec::Relu,
                LayerSpec::dense(hidden, num_classes),
            ],
            feature_layer: 1,
            num_classes,
            l2_lambda: 0.0,
            dropout: 0.0,
        }
    }
}
