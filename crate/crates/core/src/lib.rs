//! Multimodal mixture of encoder-decoder trained on synthetic shape scenes,
//! plus the assistive-device control layer that consumes it.

pub mod tensor;
pub mod model;
pub mod scenegen;
pub mod objectives;
pub mod inference;
pub mod trainer;
pub mod device;
