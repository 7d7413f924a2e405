//! Joint hierarchy, scan orders over joints and frames, forward kinematics,
//! and the procedural skinned body.

mod body;
mod fk;
mod seq;
mod tree;

pub use body::{h36m_tree, Capsule, MiniBody, SparseRow, FORMAT_VERSION, H36M_NAMES, H36M_PARENTS, NUM_JOINTS, NUM_VERTICES};
pub use fk::{axis_angle_matrix, forward_kinematics, frame_transforms, project_orthographic, JointTransform, OrthoCamera};
pub use seq::{AngleSeq, MeshSeq, PointSeq, PoseSeq2D, PoseSeq3D};
pub use tree::{kinematic_scan_order, temporal_chain_order, KinematicTree, ScanOrder};
