//! Level generation for GVGAI-style Zelda tile grids.
//!
//! A small GAN whose generator and discriminator carry a self-attention
//! layer and an embedded feature-count conditioning vector, trained with
//! hinge losses and RMSprop, plus a bootstrapping loop that feeds playable,
//! non-duplicate generated levels back into the training corpus. Ships with
//! the static playability oracle and the evaluation metrics (playable ratio,
//! duplicate ratio, hamming diversity, tile distributions).

pub mod autodiff;
pub mod bootstrap;
pub mod checkpoint;
pub mod eval;
pub mod level;
pub mod losses;
pub mod net;
pub mod optim;
pub mod params;
pub mod playability;
pub mod trainer;

pub use level::{FeatureVector, LevelGrid, OneHotLevel, TileId};
pub use playability::PlayabilityReport;
