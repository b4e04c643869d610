//! Functional and energy simulator of an MRAM processing-in-memory CNN
//! inference accelerator.
//!
//! The device under simulation performs 3x3 convolutions inside a grid of
//! compute engines embedded in magnetoresistive RAM. Weights live in the
//! nonvolatile MRAM tier and survive power cycles; activations stream
//! through a volatile SRAM tier. Arithmetic uses two narrow floating point
//! formats, 9-bit activations and 15-bit coefficients, with per-tensor
//! exponent biases. The simulator reproduces that arithmetic bit for bit and
//! layers a calibrated power and throughput model on top.

pub mod cli;
pub mod dsfp;
pub mod engine;
pub mod memory;
pub mod oracle;
pub mod power;
pub mod quantizer;
pub mod scheduler;

pub use cli::run;
