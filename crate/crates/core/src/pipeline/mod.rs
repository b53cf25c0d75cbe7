pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod sampler;
pub mod toydata;
pub mod train;
