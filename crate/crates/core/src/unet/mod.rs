//! Self-contained 3D U-Net inference: tensors, layer kernels, the `UNW1`
//! weight format and the [`Backend`] abstraction the pipeline runs models
//! through.

mod backend;
mod net;
mod ops;
mod tensor;
mod weights;

use thiserror::Error;

pub use backend::{sigmoid, AnalyticBackend, Backend};
pub use net::{unet_forward, UNet, UNetArch};
pub use ops::{concat_channels, conv3d, maxpool2, relu_in_place, upsample2_nearest, Conv3d};
pub use tensor::Tensor5;
pub use weights::{
    decode_weights, encode_weights, init_weights, init_weights_random, load_weights, save_weights, ModelWeights,
    NamedTensor, WEIGHTS_MAGIC,
};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial shape {0:?} has an odd axis; cannot pool by 2")]
    OddDimension([usize; 3]),
    #[error("spatial shape {shape:?} must be a multiple of {multiple} on every axis")]
    NotDivisible { shape: [usize; 3], multiple: usize },
    #[error("incomplete weights: {0}")]
    IncompleteWeights(String),
    #[error("not a UNW1 weight file (bad magic)")]
    BadMagic,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
