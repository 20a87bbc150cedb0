use crate::attention::{GapMode, StripeLayout};
use crate::tensor::Tensor;

/// Per-layer cached forward state. A tape is produced by one forward call and
/// consumed by exactly one backward call; the backward functions take it by
/// value to enforce that.
#[derive(Debug, Clone)]
pub enum LayerTape {
    Conv2d {
        input: Tensor,
        kernels: Tensor,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: Tensor,
    },
    Fc {
        input: Tensor,
        weight: Tensor,
    },
    AvgPool2 {
        input_shape: [usize; 3],
    },
    Sa {
        input: Tensor,
        p: Tensor,
    },
    Gap {
        input_shape: [usize; 3],
        mode: GapMode,
    },
    Stripe {
        input_shape: [usize; 3],
        layout: StripeLayout,
    },
}

impl LayerTape {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerTape::Conv2d { .. } => "conv2d",
            LayerTape::Relu { .. } => "relu",
            LayerTape::Fc { .. } => "fc",
            LayerTape::AvgPool2 { .. } => "avgpool2",
            LayerTape::Sa { .. } => "sa",
            LayerTape::Gap { .. } => "gap",
            LayerTape::Stripe { .. } => "stripe",
        }
    }
}
