pub mod gradients;
pub mod ranking;
pub mod sampling;
