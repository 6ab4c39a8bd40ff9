pub mod autodiff;
pub mod catalog;
pub mod checkpoint;
pub mod codec;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod masks;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sampler;
pub mod tensor;
pub mod text;
pub mod unet;

pub use catalog::{CatalogItem, Manifest};
pub use checkpoint::{Checkpoint, ModelKind, TrainingMeta};
pub use codec::{ImageTensor, LatentCodec, MaskTensor, SpaceToDepth};
pub use error::{Error, Result};
pub use eval::{ConvScorer, FeatureScorer, FidelityReport};
pub use masks::{MaskKind, MaskShape};
pub use pipeline::{FinetuneConfig, PretrainConfig, RunDir};
pub use sampler::{inpaint_sample, SampleRequest, DEFAULT_GUIDANCE};
pub use tensor::Tensor;
