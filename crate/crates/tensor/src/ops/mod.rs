mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod sample;
mod shape;

pub use loss::softmax_channels;
pub use shape::{permute_data, PAD_ROW};
