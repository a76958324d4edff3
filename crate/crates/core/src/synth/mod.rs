//! Desk-scale synthetic photometric stereo renderer.
//!
//! Scenes are height fields viewed by an orthographic camera. Shading uses an isotropic
//! principled-BSDF subset, cast shadows are ray-marched over the bilinear surface, and an
//! optional single diffuse bounce approximates interreflection.

mod brdf;
mod lights;
mod material;
mod recipe;
mod render;
mod scene;
mod shadow;

pub use brdf::{brdf_from_dots, eval_brdf, shade};
pub use lights::sample_lights;
pub use material::{make_material_map, Category, CategoryRanges, DiffuseModel, MaterialMap, PrincipledParams};
pub use recipe::{MaterialChoice, SceneRecipe};
pub use render::{render, Interreflection, RenderedSample, DEFAULT_BOUNCE_SAMPLES};
pub use scene::{heightfield_normals, HeightfieldScene, SceneKind};
pub use shadow::{cast_shadow, ShadowTracer};
