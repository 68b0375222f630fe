//! Selective transfer attribute editing: transfer cells, generator and
//! discriminator, losses, data sources, training and evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod stu;
pub mod train;
pub mod verify;

pub use error::{Error, LoadIssue, Result};
