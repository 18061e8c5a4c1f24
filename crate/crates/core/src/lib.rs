//! Headless robotic-scene simulator and synthetic ground-truth pipeline.
//!
//! A kinematic robot is teleoperated (or scripted) to grasp objects, every
//! tick is logged to a replayable sequence, and an offline playback pass
//! re-poses the scene to ray-cast RGB, depth, instance/class masks, normals,
//! boxes, 6D poses and labeled point clouds from any number of cameras.

pub mod bvh;
pub mod camera;
pub mod grasp;
pub mod math;
pub mod mesh;
pub mod playback;
pub mod recorder;
pub mod render;
pub mod robot;
pub mod scene;
pub mod schema;
pub mod sim;
