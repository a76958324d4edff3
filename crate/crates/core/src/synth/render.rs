use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;
use crate::synth::brdf::{brdf_from_dots, shade};
use crate::synth::material::MaterialMap;
use crate::synth::scene::{heightfield_normals, HeightfieldScene};
use crate::synth::shadow::ShadowTracer;
use crate::types::{Grid, ImageStack, LightSet, Mask, NormalMap, Vec3};

pub const DEFAULT_BOUNCE_SAMPLES: usize = 64;

/// Global-illumination switch for [`render`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interreflection {
    Off,
    /// One diffuse bounce gathered from a fixed stratified set of surface samples.
    On { samples: usize, seed: u64 },
}

/// A rendered photometric stereo set with its ground truth.
#[derive(Debug, Clone)]
pub struct RenderedSample {
    pub name: String,
    pub lights: LightSet,
    pub images: ImageStack,
    pub normals: NormalMap,
    pub shadow_masks: Vec<Mask>,
}

struct Surfel {
    pos: Vec3,
    normal: Vec3,
    area: f64,
    albedo: f64,
    shadows: Vec<bool>,
}

/// Renders one image per light: `I = L * rho(n, l, v) * max(n.l, 0)`, zero under cast shadow,
/// plus an optional one-bounce interreflection term.
pub fn render(
    scene: &HeightfieldScene,
    materials: &MaterialMap,
    lights: &LightSet,
    interreflection: Interreflection,
) -> Result<RenderedSample> {
    let normals = heightfield_normals(scene)?;
    if materials.superpixel_id.dims() != scene.dims() {
        return Err(Error::Shape("material map does not match scene".into()));
    }
    let pixels = scene.mask.pixels();
    for &(x, y) in &pixels {
        if materials.params(x, y).is_none() {
            return Err(Error::Shape(format!("no material at masked pixel ({x}, {y})")));
        }
    }
    let tracer = ShadowTracer::new(scene);
    let (w, h) = scene.dims();

    let shadow_masks: Vec<Mask> = lights
        .directions()
        .par_iter()
        .map(|l| {
            let mut m = Grid::filled(w, h, false);
            for &(x, y) in &pixels {
                if normals.get(x, y).dot(l) > 0.0 && tracer.occluded(x, y, l) {
                    *m.get_mut(x, y) = true;
                }
            }
            m
        })
        .collect();

    let surfels = match interreflection {
        Interreflection::Off => Vec::new(),
        Interreflection::On { samples, seed } => {
            gather_surfels(scene, &normals, materials, &shadow_masks, &pixels, samples, seed)
        }
    };

    let images: Vec<Grid<f32>> = (0..lights.len())
        .into_par_iter()
        .map(|j| {
            let l = lights.direction(j);
            let big_l = lights.intensity(j);
            let mut img = Grid::filled(w, h, 0.0f32);
            for &(x, y) in &pixels {
                let n = normals.get(x, y);
                let p = materials.params(x, y).expect("checked above");
                let direct = if *shadow_masks[j].get(x, y) {
                    0.0
                } else {
                    shade(p, &n, &l, big_l)
                };
                let indirect = if surfels.is_empty() {
                    0.0
                } else {
                    bounce(&surfels, scene.surface_point(x, y), &n, p, &l, big_l, j)
                };
                *img.get_mut(x, y) = (direct + indirect).max(0.0) as f32;
            }
            img
        })
        .collect();

    Ok(RenderedSample {
        name: scene.name.clone(),
        lights: lights.clone(),
        images: ImageStack::new(images, scene.mask.clone())?,
        normals,
        shadow_masks,
    })
}

fn gather_surfels(
    scene: &HeightfieldScene,
    normals: &NormalMap,
    materials: &MaterialMap,
    shadow_masks: &[Mask],
    pixels: &[(usize, usize)],
    samples: usize,
    seed_value: u64,
) -> Vec<Surfel> {
    let samples = samples.min(pixels.len());
    if samples == 0 {
        return Vec::new();
    }
    let mut rng = seed::rng(seed_value, "bounce-surfels", 0);
    let stratum = pixels.len() as f64 / samples as f64;
    let s2 = scene.spacing * scene.spacing;
    (0..samples)
        .map(|k| {
            let lo = (k as f64 * stratum) as usize;
            let hi = (((k + 1) as f64 * stratum) as usize).clamp(lo + 1, pixels.len());
            let (x, y) = pixels[rng.gen_range(lo..hi)];
            let n = normals.get(x, y);
            let p = materials.params(x, y).expect("masked pixel has material");
            Surfel {
                pos: scene.surface_point(x, y),
                normal: n,
                // projected footprint over the pixel, times the stratum it stands for
                area: s2 / n.z * stratum,
                albedo: (1.0 - p.metallic) * p.base_color,
                shadows: shadow_masks.iter().map(|m| *m.get(x, y)).collect(),
            }
        })
        .collect()
}

/// Radiance reflected toward the camera from light bounced once off the sampled surfels.
/// Visibility between the two surface points is not tested.
fn bounce(
    surfels: &[Surfel],
    at: Vec3,
    n: &Vec3,
    p: &crate::synth::material::PrincipledParams,
    l: &Vec3,
    big_l: f64,
    j: usize,
) -> f64 {
    let mut total = 0.0;
    for s in surfels {
        if s.shadows[j] {
            continue;
        }
        let lit = s.normal.dot(l);
        if lit <= 0.0 {
            continue;
        }
        let d = s.pos - at;
        let dist2 = d.norm_squared().max(1.0);
        let dir = d / d.norm().max(1e-12);
        let cos_here = n.dot(&dir);
        let cos_there = -s.normal.dot(&dir);
        if cos_here <= 0.0 || cos_there <= 0.0 || dir.z <= -1.0 {
            continue;
        }
        let radiance = s.albedo / std::f64::consts::PI * big_l * lit;
        let irradiance = radiance * cos_there * s.area / dist2;
        total += brdf_from_dots(p, cos_here, n.z, dir.z) * irradiance * cos_here;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::lights::sample_lights;
    use crate::synth::material::{Category, PrincipledParams};
    use std::f64::consts::PI;

    fn flat(size: usize) -> HeightfieldScene {
        HeightfieldScene::new("plane", Grid::filled(size, size, 0.0), 1.0, Grid::filled(size, size, true))
            .unwrap()
    }

    #[test]
    fn lambertian_plane_under_zenith_light() {
        let s = flat(8);
        let m = MaterialMap::uniform(&s, Category::Diffuse, PrincipledParams::lambertian(1.0)).unwrap();
        let lights = LightSet::from_directions(vec![Vec3::z()]).unwrap();
        let r = render(&s, &m, &lights, Interreflection::Off).unwrap();
        for v in r.images.images()[0].as_slice() {
            assert!((*v as f64 - 1.0 / PI).abs() < 1e-7);
        }
    }

    #[test]
    fn attached_shadow_is_zero_and_intensity_is_linear() {
        let s = HeightfieldScene::sphere(33, 0.9).unwrap();
        let m = crate::synth::material::make_material_map(&s, 10, Category::Specular, 2).unwrap();
        let lights = sample_lights(12, 20.0, 1.0, 3).unwrap();
        let r1 = render(&s, &m, &lights, Interreflection::Off).unwrap();
        let r2 = render(&s, &m, &lights.scaled(2.0).unwrap(), Interreflection::Off).unwrap();
        for j in 0..lights.len() {
            let l = lights.direction(j);
            for (x, y) in s.mask.pixels() {
                let a = *r1.images.images()[j].get(x, y);
                let b = *r2.images.images()[j].get(x, y);
                assert_eq!(b, 2.0 * a);
                if r1.normals.get(x, y).dot(&l) <= 0.0 {
                    assert_eq!(a, 0.0);
                }
            }
        }
    }

    #[test]
    fn cast_shadows_are_exact_zeros() {
        let s = HeightfieldScene::bowl(33, 0.9, 0.8).unwrap();
        let m = crate::synth::material::make_material_map(&s, 10, Category::Diffuse, 2).unwrap();
        let lights = sample_lights(20, 20.0, 1.0, 3).unwrap();
        let r = render(&s, &m, &lights, Interreflection::Off).unwrap();
        let mut shadowed = 0;
        for (j, sm) in r.shadow_masks.iter().enumerate() {
            for (x, y) in sm.pixels() {
                assert_eq!(*r.images.images()[j].get(x, y), 0.0);
                shadowed += 1;
            }
        }
        assert!(shadowed > 0);
    }

    #[test]
    fn interreflection_only_adds_light() {
        let s = HeightfieldScene::bowl(25, 0.9, 0.8).unwrap();
        let m = crate::synth::material::make_material_map(&s, 5, Category::Diffuse, 1).unwrap();
        let lights = sample_lights(6, 30.0, 0.0, 1).unwrap();
        let off = render(&s, &m, &lights, Interreflection::Off).unwrap();
        let on = render(&s, &m, &lights, Interreflection::On { samples: 32, seed: 4 }).unwrap();
        let mut more = 0;
        for (a, b) in off.images.images().iter().zip(on.images.images()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!(y >= x);
                more += usize::from(y > x);
            }
        }
        assert!(more > 0);
        let again = render(&s, &m, &lights, Interreflection::On { samples: 32, seed: 4 }).unwrap();
        assert_eq!(on.images, again.images);
    }
}
