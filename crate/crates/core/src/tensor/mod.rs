//! Dense tensors, the gradient tape, parameters and the optimizer.

mod adam;
pub(crate) mod gemm;
mod gradcheck;
mod ops;
mod params;
mod resample;
mod tape;
mod value;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::grad_check;
pub use ops::{conv_output_size, ConvGeom, Unary};
pub use params::{Param, ParamStore, Params};
pub use resample::{crop_resize, resize_bilinear, CropBox};
pub use tape::{Tape, Var};
pub use value::Tensor;


#[cfg(test)]
mod tests;
