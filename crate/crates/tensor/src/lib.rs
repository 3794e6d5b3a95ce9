//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The engine is deliberately small: values live in row-major [`Tensor`]s, a [`Tape`] records
//! one closure per op, and [`Tape::backward`] walks the records in reverse. Ops cover what a
//! 3D windowed-attention encoder, convolutional decoders and dense registration need:
//! GEMM-backed linear layers and 3D (transposed) convolutions, normalization, attention
//! building blocks, fused classification losses and trilinear warping.

pub mod gradcheck;
mod ops;
mod real;
mod tape;
mod tensor;

pub use ops::{permute_data, softmax_channels, PAD_ROW};
pub use real::{gemm, MatRef, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
