pub mod adversarial;
pub mod classifier;
pub mod cli;
pub mod error;
pub mod inlp;
pub mod kv;
pub mod latent;
pub mod lp;
pub mod maxmargin;
pub mod metrics;
pub mod text;
pub mod theory;

pub use classifier::{FeatureSet, LinearClassifier, Predictor};
pub use error::{Error, Result};
