pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod entropy;
pub mod image;
pub mod laplace;
pub mod losses;
pub mod lsmnet;
pub mod metrics;
pub mod ncn;
pub mod nn;
pub mod plot;
pub mod tensor;
pub mod trainer;
