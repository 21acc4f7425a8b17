//! File formats: checkpoints, PLY point clouds, images and pose files.

pub mod checkpoint;
pub mod images;
pub mod ply;
pub mod poses;

pub use checkpoint::{load_scene, save_scene, Checkpoint, OptimRecord, ViewRecord};
pub use images::{read_image, write_image};
pub use ply::{load_ply_points, PlyFormat, PointCloud};
pub use poses::{PoseFile, PoseRecord};
