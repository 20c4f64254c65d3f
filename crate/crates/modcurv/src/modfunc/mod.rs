pub mod calc;
pub mod kernels;
