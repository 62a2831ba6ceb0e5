//! Spectro-temporal multivariate forecasting.

pub mod decomp;
pub mod diffcore;
pub mod embed_encode;
pub mod freqdom;
pub mod fusion;
pub mod gradsuite;
pub mod heads;
pub mod model;
pub mod msconv;
pub mod params;
pub mod pipeline;
pub mod preprocess;
pub mod ssm;
