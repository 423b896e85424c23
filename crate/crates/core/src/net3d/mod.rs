pub mod archive;
pub mod config;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod scalar;

pub use archive::{export_encoder, import_encoder, load_model, save_model};
pub use config::NetConfig;
pub use graph::{LossWeights, ParamStore};
pub use model::{EncoderState, ImageEmbedding, ModelState, PromptEmbedding};
pub use scalar::Scalar;
