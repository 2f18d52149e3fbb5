//! Dense kernels, the reverse-mode tape, parameters and the optimizer.

pub mod gradcheck;
pub mod mat;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;

pub use gradcheck::grad_check;
pub use mat::{activate, dot, matvec, norm2, sigmoid, softmax, Activation, Mat};
pub use optim::{Adam, DEFAULT_LR};
pub use param::{Param, ParamId, ParamSet};
pub use rng::SplitMix64;
pub use tape::{smooth_l1, Graph, Var};
