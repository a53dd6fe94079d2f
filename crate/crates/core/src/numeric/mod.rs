//! Dense arrays, transforms, differentiation and randomness used by every
//! other module.

pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use fft::{fft, ifft, ComplexSpectrum, InverseOutput};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{softmax, Activation, Graph, Var};
pub use rng::RngState;
pub use spectral::{ModeSelection, ModeSet};
pub use tensor::Tensor;
