//! Synthetic datasets, the CNT1 tensor container, checkpoints, manifests and
//! PNM images.

pub mod checkpoint;
pub mod cnt;
pub mod manifest;
pub mod pnm;
pub mod rng;
pub mod synthetic;

pub use rng::Rng;
