use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synth::scene::HeightfieldScene;
use crate::types::Grid;

/// Shape of the diffuse lobe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffuseModel {
    /// Burley's roughness-dependent retro-reflective diffuse; equals Lambert at normal incidence.
    Burley,
    /// Constant `base_color / pi`.
    Lambert,
}

/// Grayscale subset of the principled BSDF parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipledParams {
    pub base_color: f64,
    pub metallic: f64,
    pub specular: f64,
    pub roughness: f64,
    pub sheen: f64,
    pub diffuse: DiffuseModel,
}

impl PrincipledParams {
    pub fn lambertian(base_color: f64) -> Self {
        PrincipledParams {
            base_color,
            metallic: 0.0,
            specular: 0.0,
            roughness: 1.0,
            sheen: 0.0,
            diffuse: DiffuseModel::Lambert,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("base_color", self.base_color),
            ("metallic", self.metallic),
            ("specular", self.specular),
            ("roughness", self.roughness),
            ("sheen", self.sheen),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Material families that keep parameter draws physically plausible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Diffuse,
    Specular,
    Metallic,
}

/// Inclusive sampling range of each parameter for one category.
#[derive(Debug, Clone)]
pub struct CategoryRanges {
    pub base_color: RangeInclusive<f64>,
    pub metallic: RangeInclusive<f64>,
    pub specular: RangeInclusive<f64>,
    pub roughness: RangeInclusive<f64>,
    pub sheen: RangeInclusive<f64>,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Diffuse, Category::Specular, Category::Metallic];

    pub fn ranges(self) -> CategoryRanges {
        match self {
            Category::Diffuse => CategoryRanges {
                base_color: 0.1..=1.0,
                metallic: 0.0..=0.0,
                specular: 0.0..=0.1,
                roughness: 0.3..=1.0,
                sheen: 0.0..=0.5,
            },
            Category::Specular => CategoryRanges {
                base_color: 0.1..=1.0,
                metallic: 0.0..=0.0,
                specular: 0.3..=1.0,
                roughness: 0.05..=0.5,
                sheen: 0.0..=0.0,
            },
            Category::Metallic => CategoryRanges {
                base_color: 0.3..=1.0,
                metallic: 1.0..=1.0,
                specular: 0.0..=1.0,
                roughness: 0.05..=0.5,
                sheen: 0.0..=0.0,
            },
        }
    }

    fn draw(self, rng: &mut impl Rng) -> PrincipledParams {
        let r = self.ranges();
        let mut pick = |range: &RangeInclusive<f64>| {
            if range.start() == range.end() {
                *range.start()
            } else {
                rng.gen_range(range.clone())
            }
        };
        PrincipledParams {
            base_color: pick(&r.base_color),
            metallic: pick(&r.metallic),
            specular: pick(&r.specular),
            roughness: pick(&r.roughness),
            sheen: pick(&r.sheen),
            diffuse: DiffuseModel::Burley,
        }
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "diffuse" => Ok(Category::Diffuse),
            "specular" => Ok(Category::Specular),
            "metallic" => Ok(Category::Metallic),
            other => Err(Error::InvalidInput(format!("unknown material category `{other}`"))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Diffuse => "diffuse",
            Category::Specular => "specular",
            Category::Metallic => "metallic",
        })
    }
}

/// Spatially varying material: one parameter tuple per superpixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMap {
    pub category: Category,
    /// Region index per pixel; `usize::MAX` outside the mask.
    pub superpixel_id: Grid<usize>,
    pub regions: Vec<PrincipledParams>,
}

impl MaterialMap {
    /// Same parameters at every pixel of the scene.
    pub fn uniform(scene: &HeightfieldScene, category: Category, params: PrincipledParams) -> Result<Self> {
        params.validate()?;
        let (w, h) = scene.dims();
        Ok(MaterialMap {
            category,
            superpixel_id: Grid::from_fn(w, h, |x, y| if *scene.mask.get(x, y) { 0 } else { usize::MAX }),
            regions: vec![params],
        })
    }

    /// Parameters at pixel `(x, y)`; `None` outside the mask.
    pub fn params(&self, x: usize, y: usize) -> Option<&PrincipledParams> {
        self.regions.get(*self.superpixel_id.get(x, y))
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }
}

const KMEANS_ITERATIONS: usize = 6;

/// Partitions the mask into at most `p` compact regions (seeded k-means on pixel positions)
/// and draws one parameter tuple per region from the category ranges.
pub fn make_material_map(scene: &HeightfieldScene, p: usize, category: Category, seed_value: u64) -> Result<MaterialMap> {
    let pixels = scene.mask.pixels();
    if p == 0 {
        return Err(Error::InvalidInput("superpixel count must be at least 1".into()));
    }
    if p > pixels.len() {
        return Err(Error::InvalidInput(format!(
            "{p} superpixels requested but mask has only {} pixels",
            pixels.len()
        )));
    }
    let mut rng = seed::rng(seed_value, "superpixels", 0);
    let mut centres: Vec<(f64, f64)> = sample(&mut rng, pixels.len(), p)
        .into_iter()
        .map(|i| (pixels[i].0 as f64, pixels[i].1 as f64))
        .collect();
    centres.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));

    let mut assignment = vec![0usize; pixels.len()];
    for _ in 0..KMEANS_ITERATIONS {
        for (slot, &(x, y)) in assignment.iter_mut().zip(&pixels) {
            *slot = nearest(&centres, x as f64, y as f64);
        }
        let mut sums = vec![(0.0, 0.0, 0usize); centres.len()];
        for (&k, &(x, y)) in assignment.iter().zip(&pixels) {
            sums[k].0 += x as f64;
            sums[k].1 += y as f64;
            sums[k].2 += 1;
        }
        for (c, s) in centres.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }

    // Drop empty clusters and renumber in first-seen row-major order.
    let mut remap = vec![usize::MAX; centres.len()];
    let mut next = 0;
    for &k in &assignment {
        if remap[k] == usize::MAX {
            remap[k] = next;
            next += 1;
        }
    }
    let (w, h) = scene.dims();
    let mut ids = Grid::filled(w, h, usize::MAX);
    for (&k, &(x, y)) in assignment.iter().zip(&pixels) {
        *ids.get_mut(x, y) = remap[k];
    }
    let mut param_rng = seed::rng(seed_value, "material-params", 0);
    let regions = (0..next).map(|_| category.draw(&mut param_rng)).collect();
    Ok(MaterialMap {
        category,
        superpixel_id: ids,
        regions,
    })
}

fn nearest(centres: &[(f64, f64)], x: f64, y: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &(cx, cy)) in centres.iter().enumerate() {
        let d = (cx - x).powi(2) + (cy - y).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> HeightfieldScene {
        HeightfieldScene::sphere(24, 0.9).unwrap()
    }

    #[test]
    fn single_region_is_uniform() {
        let m = make_material_map(&scene(), 1, Category::Specular, 3).unwrap();
        assert_eq!(m.region_count(), 1);
        let first = *m.params(12, 12).unwrap();
        for (x, y) in scene().mask.pixels() {
            assert_eq!(*m.params(x, y).unwrap(), first);
        }
    }

    #[test]
    fn category_ranges_respected() {
        let s = scene();
        for cat in Category::ALL {
            let m = make_material_map(&s, 40, cat, 9).unwrap();
            assert!(m.region_count() <= 40);
            let r = cat.ranges();
            for (x, y) in s.mask.pixels() {
                let p = m.params(x, y).unwrap();
                p.validate().unwrap();
                assert!(r.metallic.contains(&p.metallic));
                assert!(r.roughness.contains(&p.roughness));
                assert!(r.specular.contains(&p.specular));
                assert!(r.sheen.contains(&p.sheen));
                assert!(r.base_color.contains(&p.base_color));
                if cat == Category::Diffuse {
                    assert_eq!(p.metallic, 0.0);
                }
            }
        }
    }

    #[test]
    fn seeded_and_bounded() {
        let s = scene();
        let a = make_material_map(&s, 30, Category::Diffuse, 1).unwrap();
        assert_eq!(a, make_material_map(&s, 30, Category::Diffuse, 1).unwrap());
        assert_ne!(a, make_material_map(&s, 30, Category::Diffuse, 2).unwrap());
        assert!(make_material_map(&s, s.mask.count() + 1, Category::Diffuse, 1).is_err());
        assert!(a.params(0, 0).is_none());
    }
}
