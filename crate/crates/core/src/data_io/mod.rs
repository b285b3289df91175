//! Synthetic phantoms, file formats, preprocessing and dataset assembly.

mod dataset;
mod export;
mod files;
mod phantom;
mod preprocess;

pub use dataset::*;
pub use export::*;
pub use files::*;
pub use phantom::*;
pub use preprocess::*;
