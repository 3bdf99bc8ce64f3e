//! Training engine for knowledge-graph recommenders that keeps backward-pass
//! activations in b-bit quantized form.
//!
//! The forward pass always runs on exact activations. What the backward pass
//! needs is stored compressed on a [`tape::Tape`] (per-row uniform
//! quantization with stochastic rounding, 1-bit relu masks) and dequantized
//! only when the gradient that uses it is computed.

pub mod checkpoint;
pub mod error;
pub mod graphdata;
pub mod kgnn;
pub mod probe;
pub mod quant;
pub mod reference;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graphdata::{KgDataset, SynthSpec};
pub use kgnn::{Aggregation, ModelConfig, ModelParams};
pub use quant::{QuantConfig, QuantizedTensor, RandomStream, Rounding};
pub use tape::{ContextLedger, GradientSet, ParamId, Tape, Var};
pub use tensor::{BitMask, CsrMatrix, DenseMatrix, Element};
pub use trainer::{MetricsReport, TrainConfig};
