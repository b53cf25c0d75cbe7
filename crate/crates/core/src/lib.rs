pub mod attention_fusion;
pub mod camstyle;
pub mod datamodel;
pub mod error;
pub mod evalmetrics;
pub mod losses;
pub mod meanteacher;
pub mod network;
pub mod pipeline;
pub mod preprocess;
pub mod pseudolabel;
pub mod tensor;

pub use error::{Error, Result};
