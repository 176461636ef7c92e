//! Rigid-body algebra, pinhole cameras and patch warping.

pub mod camera;
pub mod lie;
pub mod pose;
pub mod warp;

pub use camera::{project, project_jacobian, DepthMap, Intrinsics, Projection, MIN_DEPTH};
pub use pose::{read_poses, relative_pose, write_poses, SE3Pose, Twist};
pub use pose::{format_poses, parse_poses};
pub use warp::{backproject_points, project_points, warp_patch, warp_patch_windowed, TapePose, Warp};
