pub mod alignment;
pub mod analysis;
pub mod autodiff;
pub mod dataset;
pub mod lru;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod time_encoder;
