pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod efin;
pub mod encoder;
pub mod experiment;
pub mod metrics;
pub mod mlp;
pub mod model;
pub mod search;
pub mod synthetic;
pub mod tensor;
pub mod train;
