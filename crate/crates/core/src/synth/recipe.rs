//! Declarative scene descriptions, as read from render configuration files.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synth::lights::sample_lights;
use crate::synth::material::{make_material_map, Category, MaterialMap, PrincipledParams};
use crate::synth::render::{render, Interreflection, RenderedSample, DEFAULT_BOUNCE_SAMPLES};
use crate::synth::scene::{HeightfieldScene, SceneKind};

/// Material assignment of a recipe: superpixels drawn from a category, or one uniform
/// Lambertian albedo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaterialChoice {
    Diffuse,
    Specular,
    Metallic,
    Lambertian,
}

impl MaterialChoice {
    fn category(self) -> Category {
        match self {
            MaterialChoice::Diffuse | MaterialChoice::Lambertian => Category::Diffuse,
            MaterialChoice::Specular => Category::Specular,
            MaterialChoice::Metallic => Category::Metallic,
        }
    }
}

/// Everything needed to render one synthetic photometric stereo set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecipe {
    pub name: String,
    pub kind: SceneKind,
    #[serde(default = "defaults::size")]
    pub size: usize,
    /// Sphere/bowl radius as a fraction of half the image size.
    #[serde(default = "defaults::radius")]
    pub radius: f64,
    /// Bowl depth relative to its radius.
    #[serde(default = "defaults::depth")]
    pub depth: f64,
    /// Number of Gaussian bumps for `bumps` scenes.
    #[serde(default = "defaults::bumps")]
    pub bumps: usize,
    pub material: MaterialChoice,
    #[serde(default = "defaults::superpixels")]
    pub superpixels: usize,
    /// Albedo of `lambertian` materials.
    #[serde(default = "defaults::albedo")]
    pub albedo: f64,
    #[serde(default = "defaults::lights")]
    pub lights: usize,
    #[serde(default = "defaults::elevation_min_deg")]
    pub elevation_min_deg: f64,
    #[serde(default = "defaults::jitter_deg")]
    pub jitter_deg: f64,
    #[serde(default)]
    pub interreflection: bool,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn size() -> usize {
        64
    }
    pub fn radius() -> f64 {
        0.9
    }
    pub fn depth() -> f64 {
        0.8
    }
    pub fn bumps() -> usize {
        8
    }
    pub fn superpixels() -> usize {
        100
    }
    pub fn albedo() -> f64 {
        0.8
    }
    pub fn lights() -> usize {
        300
    }
    pub fn elevation_min_deg() -> f64 {
        20.0
    }
    pub fn jitter_deg() -> f64 {
        1.0
    }
}

impl SceneRecipe {
    pub fn new(name: impl Into<String>, kind: SceneKind, material: MaterialChoice, seed_value: u64) -> Self {
        SceneRecipe {
            name: name.into(),
            kind,
            size: defaults::size(),
            radius: defaults::radius(),
            depth: defaults::depth(),
            bumps: defaults::bumps(),
            material,
            superpixels: defaults::superpixels(),
            albedo: defaults::albedo(),
            lights: defaults::lights(),
            elevation_min_deg: defaults::elevation_min_deg(),
            jitter_deg: defaults::jitter_deg(),
            interreflection: false,
            seed: seed_value,
        }
    }

    pub fn scene(&self) -> Result<HeightfieldScene> {
        let mut scene = match self.kind {
            SceneKind::Sphere => HeightfieldScene::sphere(self.size, self.radius)?,
            SceneKind::Bowl => HeightfieldScene::bowl(self.size, self.radius, self.depth)?,
            SceneKind::Bumps => HeightfieldScene::bumps(self.size, self.bumps, seed::derive(self.seed, "scene", 0))?,
        };
        scene.name = self.name.clone();
        Ok(scene)
    }

    pub fn materials(&self, scene: &HeightfieldScene) -> Result<MaterialMap> {
        match self.material {
            MaterialChoice::Lambertian => {
                let p = PrincipledParams::lambertian(self.albedo);
                p.validate()?;
                MaterialMap::uniform(scene, Category::Diffuse, p)
            }
            m => make_material_map(
                scene,
                self.superpixels.min(scene.mask.count()),
                m.category(),
                seed::derive(self.seed, "materials", 0),
            ),
        }
    }

    pub fn render(&self) -> Result<RenderedSample> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidInput("scene name must not be empty".into()));
        }
        let scene = self.scene()?;
        let materials = self.materials(&scene)?;
        let lights = sample_lights(
            self.lights,
            self.elevation_min_deg,
            self.jitter_deg,
            seed::derive(self.seed, "lights", 0),
        )?;
        let bounce = if self.interreflection {
            Interreflection::On {
                samples: DEFAULT_BOUNCE_SAMPLES,
                seed: seed::derive(self.seed, "bounce", 0),
            }
        } else {
            Interreflection::Off
        };
        render(&scene, &materials, &lights, bounce)
    }
}
