pub mod corpus;
pub mod bilingual;
pub mod encoder;
pub mod gradcheck;
pub mod joint;
pub mod error;
pub mod math;
pub mod scorer;
pub mod scalar;
pub mod snapshot;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases for the common case.
pub type Matrix = math::DenseMatrix<f64>;
pub type Vector = math::DenseVector<f64>;
pub type Encoder = encoder::EncoderParams<f64>;
pub type Bccnn = bilingual::BccnnModel<f64>;
pub type JointModel = joint::JointModelParams<f64>;
