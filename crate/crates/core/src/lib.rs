//! Desk-scale rebuild of an ultra-large-scale neural network training stack.
//!
//! The crate is layered bottom-up:
//!
//! * [`matcore`]: strided `f32` matrices and the elementwise operations used by
//!   the gradient formulas.
//! * [`gemm`]: a naive three-loop SGEMM oracle, a cache-blocked kernel with a
//!   packed B panel and register-resident dot products, a block-size tuner and
//!   a cache-flushing wall-clock benchmark.
//! * [`nn`]: a one-hidden-layer `tanh` network whose error and gradient are
//!   computed entirely with GEMM plus elementwise products.
//! * [`optim`]: Polak-Ribière conjugate gradient with sign-only bracketing and
//!   quadratic interpolation.
//! * [`cluster`]: the tetrahedral cluster topology, three reduce schedules, a
//!   deterministic executor and a bandwidth cost model.
//! * [`trainer`]: master/worker data parallelism with chunked polling and an
//!   early-halt rule, plus flop accounting.
//! * [`datagen`]: a synthetic 20×20 glyph dataset.

pub mod cluster;
pub mod datagen;
pub mod error;
pub mod gemm;
pub mod matcore;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
pub use matcore::Mat32;
