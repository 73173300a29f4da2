//! User/group separated token mixing.
//!
//! A token-mixing block whose first `c_u` mixed rows never see candidate
//! (G-side) information, so their per-token FFN results can be computed once
//! per user and reused across every candidate in a ranking request.

pub mod error;
pub mod numeric;
pub mod mixer;
pub mod ugsep;
pub mod ugattn;
pub mod quant;
pub mod serving;
pub mod synthetic;

pub use error::{Error, Result};
pub use numeric::{Scalar, Tensor};
