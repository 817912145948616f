//! Reverse-mode autodiff over dense NCHW arrays, sized for small
//! convolutional networks trained on a CPU.
//!
//! ```
//! use ugp_nn::{Array, Var};
//!
//! let x = Var::leaf(Array::<f64>::from_vec([3], vec![1.0, 2.0, 3.0]), true);
//! let y = x.sqr().sum_all();
//! let g = y.backward();
//! assert_eq!(g.wrt(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod array;
mod error;
mod float;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod module;
mod ops;
mod optim;
mod var;

pub use array::Array;
pub use error::NnError;
pub use float::{gemm, Float, MatView};
pub use layers::{Conv2d, Init, Linear, ModulatedConv2d, LEAKY_SLOPE};
pub use module::{Module, Param};
pub use ops::{sigmoid, softplus};
pub use optim::Adam;
pub use var::{is_grad_enabled, no_grad, BackwardCtx, Gradients, ParamId, Var};
