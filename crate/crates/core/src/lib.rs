//! Unified spectrogram/waveform speech separation.

pub mod audio;
pub mod autodiff;
pub mod codec;
pub mod error;
pub mod objectives;
pub mod pipeline;
pub mod separator;
pub mod simulate;
pub mod spatial;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
