//! Vanilla and relation-aware transformer encoders on a minimal reverse-mode
//! autodiff engine, plus the initialization schemes and numerical probes used
//! to study depth stability without layer normalization or warmup.

pub mod checks;
pub mod diagnostics;
pub mod error;
pub mod init;
pub mod oracle;
pub mod tensor;
pub mod transformer;

pub use error::{CoreError, Result};
pub use tensor::{Gradients, RelationLabels, Tape, Tensor};
