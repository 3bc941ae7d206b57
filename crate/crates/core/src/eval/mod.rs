//! Trajectory, depth, semantic and surface metrics, mesh extraction and PLY
//! export.

mod kdtree;
mod mc;
mod mesh;
mod metrics;
mod ply;
mod traj;

pub use kdtree::KdTree;
pub use mc::{marching_cubes, ScalarGrid};
pub use mesh::{
    cull_unobserved, extract_mesh, field_grid, mesh_accuracy_completion, observed, scene_meshes, MeshConfig,
    MeshMetrics, MeshMode, Observer, TriangleMesh,
};
pub use metrics::{
    depth_l1, depth_l1_of, evaluate_views, miou, miou_of, nearest_keyframes, render_view, Confusion, EvalConfig,
    EvalView, RenderedImage, ViewMetrics,
};
pub use ply::{read_ply, write_ply};
pub use traj::{align_points, ate_rmse, umeyama_align, Trajectory};
