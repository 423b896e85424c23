// `!(x > 0.0)` rejects NaN on purpose; axis loops index several arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod curate;
pub mod error;
pub mod evalbench;
pub mod infer;
pub mod net3d;
pub mod nifti;
pub mod promptsim;
pub mod train;
pub mod voxgrid;

pub use curate::{CurateConfig, CurationReport, DatasetManifest, ManifestEntry, Split};
pub use error::{Error, Result};
pub use evalbench::{EvalRecord, GroupBy, InteractionCostModel, Method};
pub use infer::{segment_volume, InferConfig, PatchPredictor, Segmentation};
pub use net3d::{ModelState, NetConfig};
pub use promptsim::{ClickSession, ClickStrategy};
pub use train::{Stage, TrainConfig};
pub use voxgrid::{BinaryMask, ClickLabel, Dims, LabelVolume, PointPrompt, Spacing, Volume};
