//! Robust model: routed-normalization encoder, projection head, pseudo
//! heads and downstream classifier, plus checkpoint I/O.

mod checkpoint;
mod encoder;
mod layers;
mod linear;
mod robust;

pub use checkpoint::{load_model, save_model, ModelState, TensorData, FORMAT_VERSION};
pub use encoder::{Architecture, Encoder, EncoderConfig};
pub use layers::{BnRoute, BnStats, ForwardCtx, Linear, Mode, Param, ParamInit, TriBatchNorm};
pub use linear::{DifferentiableClassifier, LinearPixelClassifier};
pub use robust::{project_batch, RobustModel};
