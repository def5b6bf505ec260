pub mod arch;
pub mod audio;
pub mod bench;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod model_io;
pub mod ops;
pub mod probe;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BitTensor, FloatTensor};
