//! Binary formats and JSON manifests.

pub mod bytes;
pub mod container;
pub mod manifest;
pub mod state;
pub mod store;

pub use container::{
    read_feature_grids, read_label_grids, read_model, write_atomic, write_feature_grids, write_label_grids,
    write_model,
};
pub use store::{read_store, write_store};
