//! Dual-arm fruit harvesting stack.
//!
//! Geometric RGB-D perception, cooperative absolute/relative task
//! generation, hierarchical QP velocity control with collision
//! constraints, and a deterministic kinematic simulator.

pub mod geometry;
pub mod hqp;
pub mod kinematics;
pub mod controller;
pub mod perception;
pub mod scenario;
pub mod sim;
