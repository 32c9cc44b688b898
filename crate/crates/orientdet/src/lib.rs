//! Single point-supervised oriented object detection on synthetic scenes.
//!
//! The crate trains an oriented-box detector from point annotations alone:
//! proposal bags around each point are scored by a two-stream MIL head,
//! scale is sharpened by a scale-consistency loss and gated feature fusion,
//! and orientation is learned self-supervised from rotate/flip consistency
//! of a dense angle head. Both a two-stage pipeline (pseudo-label export
//! followed by detector training) and an end-to-end variant are provided.
//!
//! See the `examples/` directory for runnable entry points per capability.

pub mod e2e;
pub mod geom;
pub mod angle;
pub mod mil;
pub mod netcore;
pub mod nn;
pub mod ssc;
pub mod ssff;
pub mod synthdata;
pub mod trainer;

pub use geom::{HorizontalBox, OrientedBox, PyramidSpec, ViewKind, ViewTransform};
