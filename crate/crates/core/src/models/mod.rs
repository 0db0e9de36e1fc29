//! Student groups: shared-trunk ("branch-based") or fully independent
//! ("network-based") students producing features and logits.

mod checkpoint;
mod group;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use group::{Classifier, GroupForwardOutput, GroupMode, StudentGroup, StudentGroupConfig};
pub use layers::{infer_output, InputShape, LayerSpec};

#[cfg(test)]
mod tests;
