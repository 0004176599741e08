//! Split-head networks with hand-written backward passes.

mod checkpoint;
mod conv;
mod linear;
mod loss;
mod model;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use conv::{
    conv2d_backward_reference, conv2d_im2col, conv2d_reference, maxpool_backward, maxpool_forward, ConvGeometry,
    ConvLayer, KERNEL,
};
pub use linear::{LinearLayer, ParamGrad};
pub use loss::{cross_entropy, cross_entropy_backward, mse, mse_aux_backward};
pub use model::{param_delta, FeatureLayer, ForwardOutput, GradientSet, LayerScope, SplitHeadModel};

/// Identity of a parameterized layer.
///
/// The derived ordering is the canonical parameter order used everywhere a
/// model is flattened: feature layers in forward order, then the class head,
/// then the aux head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerId {
    Feature(usize),
    ClassHead,
    AuxHead,
}

impl LayerId {
    /// Distinct small integer per layer, used to derive per-layer RNG streams.
    pub fn stream_index(self) -> u64 {
        match self {
            LayerId::Feature(i) => i as u64,
            LayerId::ClassHead => 1 << 16,
            LayerId::AuxHead => (1 << 16) + 1,
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Feature(i) => write!(f, "f{}", i + 1),
            LayerId::ClassHead => f.write_str("class_head"),
            LayerId::AuxHead => f.write_str("aux_head"),
        }
    }
}

impl std::str::FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_head" => Ok(LayerId::ClassHead),
            "aux_head" => Ok(LayerId::AuxHead),
            _ => s
                .strip_prefix('f')
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|&i| i >= 1)
                .map(|i| LayerId::Feature(i - 1))
                .ok_or_else(|| Error::Parameter(format!("unknown layer name {s:?}"))),
        }
    }
}

/// Feature-stack architecture. The last entry of `hidden` is the latent
/// dimension `d`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArchSpec {
    /// Linear + ReLU layers of the given widths.
    Mlp { hidden: Vec<usize> },
    /// Conv blocks (3x3, padding 1, ReLU, max-pool) followed by Linear + ReLU layers.
    Cnn {
        channels: Vec<usize>,
        pools: Vec<usize>,
        hidden: Vec<usize>,
    },
}

impl ArchSpec {
    pub fn mlp(hidden: &[usize]) -> Self {
        ArchSpec::Mlp {
            hidden: hidden.to_vec(),
        }
    }

    /// The two-block student CNN: 32 and 128 channels, pools 2 and 4, then 256 units.
    pub fn student_cnn() -> Self {
        ArchSpec::Cnn {
            channels: vec![32, 128],
            pools: vec![2, 4],
            hidden: vec![256],
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ArchSpec::Mlp { .. } => "mlp",
            ArchSpec::Cnn { .. } => "cnn",
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ArchSpec::Mlp { hidden } | ArchSpec::Cnn { hidden, .. } => hidden.last().copied().unwrap_or(0),
        }
    }

    pub fn feature_layers(&self) -> usize {
        match self {
            ArchSpec::Mlp { hidden } => hidden.len(),
            ArchSpec::Cnn { channels, hidden, .. } => channels.len() + hidden.len(),
        }
    }
}

/// Everything needed to allocate a [`SplitHeadModel`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    pub aux_dim: usize,
}

impl ModelSpec {
    pub fn mnist(arch: ArchSpec, n_classes: usize, aux_dim: usize) -> Self {
        Self {
            arch,
            input_shape: [1, 28, 28],
            n_classes,
            aux_dim,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Structural(m));
        if self.n_classes == 0 || self.aux_dim == 0 {
            return bad("class and aux heads need at least one output".into());
        }
        if self.input_len() == 0 {
            return bad("input shape has a zero dimension".into());
        }
        match &self.arch {
            ArchSpec::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return bad(format!("MLP widths must be non-empty and positive, got {hidden:?}"));
                }
            }
            ArchSpec::Cnn {
                channels,
                pools,
                hidden,
            } => {
                if channels.is_empty() || channels.len() != pools.len() {
                    return bad("CNN needs one pool size per conv block".into());
                }
                if channels.contains(&0) || pools.contains(&0) || hidden.is_empty() || hidden.contains(&0) {
                    return bad("CNN channels, pools and widths must be positive".into());
                }
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for p in pools {
                    h /= p;
                    w /= p;
                }
                if h == 0 || w == 0 {
                    return bad(format!("pooling {pools:?} collapses the {:?} input", self.input_shape));
                }
            }
        }
        Ok(())
    }
}
