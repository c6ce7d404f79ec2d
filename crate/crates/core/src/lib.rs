//! L-infinity SLAM optimisation core.
//!
//! Camera orientations are estimated incrementally by chordal rotation
//! averaging; camera positions and scene structure then follow from a
//! quasi-convex known-rotation problem solved to global optimality by
//! bisection over second-order cone feasibility tests.

pub mod ba;
pub mod conic;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod krot;
pub mod metrics;
pub mod pipeline;
pub mod relmotion;
pub mod rotavg;
pub mod synth;
pub mod tdc;
pub mod tracks;

pub use geometry::{CameraIntrinsics, KeyframePose, Rotation};
pub use graph::{CovisibilityGraph, Edge};
pub use tracks::{FeatureTrack, FrameId, MapPoint, Observation, TrackId, TrackSet};
