pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cross_attention;
pub mod diagnostics;
pub mod gradcheck;
pub mod global_branch;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod roi;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod weak_head;

pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
