//! Ground-truth simulators for the ideal pendulum and mass-spring
//! systems, noise injection, a 28x28 renderer and dataset files.

mod dataset;
mod render;
mod system;

pub use dataset::{
    make_pixel_dataset, make_state_dataset, read_dataset, simulate_trajectory, windows,
    write_pixel_dataset, write_state_dataset, Dataset, DatasetManifest, PixelDataConfig,
    PixelDataset, StateDataConfig, StateDataset, Trajectory, DATASET_FORMAT, SUBSTEPS, WINDOW,
};
pub use render::{object_position, render_frame, FRAME_PIXELS, FRAME_SIDE};
pub use system::{SystemKind, SystemSpec};
