//! Scribble-driven texture editing for UV-mapped triangle meshes.
//!
//! The crate turns freehand strokes painted over rendered views into atlas
//! edits: strokes become screen masks ([`scribble`]), masks move into texture
//! space through the rasterizer's correspondence buffers ([`mask_map`]), a
//! vision-chat model names the intended content ([`intent`]), and generated
//! patches are tiled into the region and blended ([`texturing`]).
//!
//! Geometry is generic over [`Real`]; the aliases below fix the scalar types
//! used by the rest of the workspace.

pub mod backend;
pub mod fixtures;
pub mod image;
pub mod intent;
pub mod mask_map;
pub mod mesh;
pub mod morph;
pub mod palette;
pub mod render;
pub mod scalar;
pub mod scribble;
pub mod texturing;

pub use image::{Image, Mask, Rect, Rgb, TexelMask};
pub use scalar::{PlanScalar, Real};

/// Mesh with `f32` geometry, matching the precision of interchange files.
pub type Mesh = mesh::TexturedMesh<f32>;
pub type Mesh64 = mesh::TexturedMesh<f64>;
pub type Frame = render::ViewFrame<f32>;
pub type Frame64 = render::ViewFrame<f64>;

/// Placement plan in floating point, as used by the pipeline.
pub type Plan = texturing::PlacementPlan<f64>;
/// Placement plan in exact rational arithmetic.
pub type ExactPlan = texturing::PlacementPlan<num_rational::Rational64>;
