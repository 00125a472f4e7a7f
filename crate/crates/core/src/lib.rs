pub mod autodiff;
pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod entropy_model;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod range_coder;
pub mod tensor;
pub mod trainer;
