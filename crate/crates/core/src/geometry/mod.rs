//! Meshes, surface samples, deformation fields, dual quaternions and shape metrics.

mod deformation;
mod dualquat;
mod mesh;
mod metrics;
mod sampling;

pub use deformation::{
    drive_mesh, nearest_k, transfer_deformation, DeformationField, DeformationMode, DriveStencil, K_NBR,
};
pub use dualquat::{blend, fit_dualquat, DualQuat, DualQuatFit};
pub use mesh::{
    bounds, flatten, topology_hash, unflatten, Face, Mesh, Trajectory, TrajectoryManifest, Vec3,
    TRAJECTORY_SCHEMA_VERSION,
};
pub use metrics::{chamfer, nearest_neighbors, voxel_iou, Chamfer, IouReport, DEFAULT_IOU_RESOLUTION};
pub use sampling::{sample_surface, vertex_samples, Anchor, SurfaceSamples};
