//! Autodiff tape, optimizer and the small networks built on them.

pub mod adam;
pub mod gradcheck;
pub mod lbs;
pub mod net;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, AdamState};
pub use lbs::{pose_on_tape, LbsConstants};
pub use net::{BodyMapNet, BodyMapOutput, NetConfig, NetInput, Normalization, WsNet};
pub use params::{Conv, Dense, ParamStore};
pub use tape::{sigmoid, Tape, Var, OP_NAMES};
pub use tensor::Tensor;
