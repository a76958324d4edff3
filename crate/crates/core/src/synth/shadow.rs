use crate::error::{Error, Result};
use crate::synth::scene::HeightfieldScene;
use crate::types::Vec3;

/// Ray-march step as a fraction of the pixel spacing.
pub const STEP_FRACTION: f64 = 0.5;
/// Self-intersection offset as a fraction of the scene's height range.
pub const OFFSET_FRACTION: f64 = 1e-4;

/// Precomputed marching constants for one scene.
#[derive(Debug, Clone, Copy)]
pub struct ShadowTracer<'a> {
    scene: &'a HeightfieldScene,
    step: f64,
    offset: f64,
    top: f64,
}

impl<'a> ShadowTracer<'a> {
    pub fn new(scene: &'a HeightfieldScene) -> Self {
        ShadowTracer {
            scene,
            step: STEP_FRACTION * scene.spacing,
            offset: (OFFSET_FRACTION * scene.height_range()).max(1e-12),
            top: scene.max_height(),
        }
    }

    /// True iff the ray from the surface at `(x, y)` toward `l` dips below the surface.
    pub fn occluded(&self, x: usize, y: usize, l: &Vec3) -> bool {
        let origin = self.scene.surface_point(x, y);
        let s = self.scene.spacing;
        let mut t = self.step;
        loop {
            let p = origin + l * t;
            if p.z > self.top {
                return false;
            }
            match self.scene.height_at(p.x / s, p.y / s) {
                None => return false,
                Some(h) if p.z + self.offset < h => return true,
                Some(_) => {}
            }
            t += self.step;
        }
    }
}

/// Cast-shadow test for a single masked pixel and light.
pub fn cast_shadow(scene: &HeightfieldScene, pixel: (usize, usize), l: &Vec3) -> Result<bool> {
    let (x, y) = pixel;
    let (w, h) = scene.dims();
    if x >= w || y >= h || !*scene.mask.get(x, y) {
        return Err(Error::InvalidInput(format!("pixel ({x}, {y}) is outside the mask")));
    }
    if !(l.z > 0.0) || (l.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("light {l:?} must be unit with positive z")));
    }
    Ok(ShadowTracer::new(scene).occluded(x, y, l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Grid;

    fn grazing(elevation_deg: f64, azimuth_deg: f64) -> Vec3 {
        let (e, a) = (elevation_deg.to_radians(), azimuth_deg.to_radians());
        Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin())
    }

    #[test]
    fn plane_never_shadows() {
        let s = HeightfieldScene::new("plane", Grid::filled(16, 16, 2.0), 1.0, Grid::filled(16, 16, true))
            .unwrap();
        for az in [0.0, 45.0, 170.0, 300.0] {
            for (x, y) in [(0, 0), (8, 8), (15, 3)] {
                assert!(!cast_shadow(&s, (x, y), &grazing(5.0, az)).unwrap());
            }
        }
    }

    #[test]
    fn zenith_light_never_shadows() {
        let s = HeightfieldScene::bumps(32, 8, 4).unwrap();
        for (x, y) in s.mask.pixels() {
            assert!(!cast_shadow(&s, (x, y), &Vec3::z()).unwrap());
        }
        let b = HeightfieldScene::bowl(32, 0.9, 0.8).unwrap();
        for (x, y) in b.mask.pixels() {
            assert!(!cast_shadow(&b, (x, y), &Vec3::z()).unwrap());
        }
    }

    /// Analytic oracle: does the ray from an interior point of the continuous paraboloid
    /// `h = a d^2` (flat rim beyond radius `r`) toward `l` pass below the surface?
    fn bowl_oracle(cx: f64, cy: f64, a: f64, r: f64, px: f64, py: f64, l: &Vec3) -> bool {
        let h = |x: f64, y: f64| a * ((x - cx).powi(2) + (y - cy).powi(2)).min(r * r);
        let z0 = h(px, py);
        let mut t = 1e-3;
        while t < 10.0 * r {
            let (x, y, z) = (px + l.x * t, py + l.y * t, z0 + l.z * t);
            if z > a * r * r {
                return false;
            }
            if z < h(x, y) - 1e-9 {
                return true;
            }
            t += 1e-3;
        }
        false
    }

    #[test]
    fn deep_bowl_shadows_grazing_light() {
        let size = 41;
        let s = HeightfieldScene::bowl(size, 0.9, 0.8).unwrap();
        let c = (size as f64 - 1.0) / 2.0;
        let r = 0.9 * c;
        let a = 0.8 * r / (r * r);
        // interior point left of centre, light coming from the left at 25 degrees
        let (px, py) = (10usize, 20usize);
        let l = grazing(25.0, 180.0);
        assert!(bowl_oracle(c, c, a, r, px as f64, py as f64, &l));
        assert!(cast_shadow(&s, (px, py), &l).unwrap());
        // same point lit from the opposite side is not shadowed in either model
        let l2 = grazing(25.0, 0.0);
        assert!(!bowl_oracle(c, c, a, r, px as f64, py as f64, &l2));
        assert!(!cast_shadow(&s, (px, py), &l2).unwrap());
    }

    #[test]
    fn convex_sphere_is_shadow_free_where_lit() {
        let s = HeightfieldScene::sphere(41, 0.9).unwrap();
        let normals = crate::synth::scene::heightfield_normals(&s).unwrap();
        for az in [0.0, 90.0, 200.0] {
            let l = grazing(30.0, az);
            for (x, y) in s.mask.pixels() {
                if normals.get(x, y).dot(&l) > 0.0 {
                    assert!(!cast_shadow(&s, (x, y), &l).unwrap(), "({x}, {y}) az {az}");
                }
            }
        }
    }

    #[test]
    fn outside_mask_is_an_error() {
        let s = HeightfieldScene::sphere(21, 0.5).unwrap();
        assert!(cast_shadow(&s, (0, 0), &Vec3::z()).is_err());
    }
}
