//! A compact reverse-mode autodiff engine over `f64` tensors, with the
//! kernels the video inversion models need: strided and transposed 2-D
//! convolution, nearest upsampling, broadcasting arithmetic and bilinear
//! sampling with clamp-to-edge borders.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use optim::Adam;
pub use params::{Bound, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
