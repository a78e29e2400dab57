pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod refine;
pub mod selftest;
pub mod train;
pub mod transformer;
pub mod types;

pub use error::{FlowError, Result};
pub use params::ParamStore;
pub use types::{FeatureMap, FlowField, ImagePair, OcclusionMask};
