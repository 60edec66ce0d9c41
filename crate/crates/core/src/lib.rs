#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod checkpoint;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod transform;

pub use error::{CheckpointError, Error, Result};
pub use graph::{Graph, Var};
pub use optim::{Adam, Parameter};
pub use tensor::{Shape, Tensor4};
