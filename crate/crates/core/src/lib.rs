pub mod volume;
pub mod preprocess;
pub mod text;
pub mod model;
pub mod pretrain;
pub mod downstream;
pub mod phantom;
