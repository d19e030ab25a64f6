//! Object-saliency guided region detection and image retrieval over
//! convolutional activation maps.

mod binio;
pub mod descriptors;
pub mod egm;
pub mod error;
pub mod feature_saliency;
pub mod object_saliency;
pub mod pipeline;
pub mod plot;
pub mod region_graph;
pub mod retrieval;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, Result};
