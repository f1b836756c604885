//! MAC and simplified-MAC (S-MAC) recurrent reasoning cells over a small
//! reverse-mode tensor engine, plus a synthetic compositional visual QA
//! benchmark with complementary color/shape conditions.

pub mod cell;
pub mod config;
pub mod encoder;
pub mod error;
pub mod microgen;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
