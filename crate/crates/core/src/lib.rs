pub mod error;
pub mod io;
pub mod layered;
pub mod linalg;
pub mod mandel;
pub mod materials;
pub mod network;
pub mod online;
pub mod oracle;
pub mod training;
pub use error::{FdmnError, Result};
