mod conv;
mod elementwise;
mod norm;
mod pool;
mod shape;
mod softmax;

pub use conv::{conv_out_size, Conv2dOpts};
pub use norm::ChannelStats;
