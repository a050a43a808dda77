pub mod corpus;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod kv;
pub mod objective;
pub mod tensorcore;
pub mod trainer;

pub use error::{Error, Result};
