use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::types::{Grid, Mask, NormalMap, Vec3};

/// Analytic shape families available to the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Sphere,
    Bowl,
    Bumps,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sphere" => Ok(SceneKind::Sphere),
            "bowl" => Ok(SceneKind::Bowl),
            "bumps" => Ok(SceneKind::Bumps),
            other => Err(Error::InvalidInput(format!("unknown scene kind `{other}`"))),
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::Sphere => "sphere",
            SceneKind::Bowl => "bowl",
            SceneKind::Bumps => "bumps",
        })
    }
}

/// Height field seen by an orthographic camera looking down `-z`.
///
/// Heights are world `z`; pixel `(x, y)` sits at world `(x * spacing, y * spacing)`.
/// Heights outside the mask are still geometry and can cast shadows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightfieldScene {
    pub name: String,
    pub heights: Grid<f64>,
    pub spacing: f64,
    pub mask: Mask,
}

impl HeightfieldScene {
    pub fn new(name: impl Into<String>, heights: Grid<f64>, spacing: f64, mask: Mask) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidInput(format!("spacing must be positive, got {spacing}")));
        }
        if heights.as_slice().iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidInput("heights must be finite".into()));
        }
        if heights.dims() != mask.dims() {
            return Err(Error::Shape("heights and mask differ in size".into()));
        }
        Ok(HeightfieldScene {
            name: name.into(),
            heights,
            spacing,
            mask,
        })
    }

    /// Hemisphere of radius `radius_frac * size / 2` pixels on a zero ground plane.
    /// The mask stops at 95% of the radius where the slope is still finite.
    pub fn sphere(size: usize, radius_frac: f64) -> Result<Self> {
        let (c, r) = centre_radius(size, radius_frac)?;
        let heights = Grid::from_fn(size, size, |x, y| {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            (r * r - d2).max(0.0).sqrt()
        });
        let mask = Grid::from_fn(size, size, |x, y| {
            ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() <= 0.95 * r
        });
        HeightfieldScene::new("sphere", heights, 1.0, mask)
    }

    /// Concave paraboloid `h = depth * (d / r)^2` inside radius `r`, flat rim at `depth` outside.
    /// `depth_frac` is the depth relative to the radius.
    pub fn bowl(size: usize, radius_frac: f64, depth_frac: f64) -> Result<Self> {
        if !(depth_frac > 0.0) {
            return Err(Error::InvalidInput("bowl depth must be positive".into()));
        }
        let (c, r) = centre_radius(size, radius_frac)?;
        let depth = depth_frac * r;
        let heights = Grid::from_fn(size, size, |x, y| {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            depth * (d2 / (r * r)).min(1.0)
        });
        let mask = Grid::from_fn(size, size, |x, y| {
            ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() < r
        });
        HeightfieldScene::new("bowl", heights, 1.0, mask)
    }

    /// Seeded sum of Gaussian bumps and dents; the mask excludes a two-pixel border.
    pub fn bumps(size: usize, count: usize, seed_value: u64) -> Result<Self> {
        if size < 8 {
            return Err(Error::InvalidInput("bump field needs at least 8x8 pixels".into()));
        }
        let mut rng = seed::rng(seed_value, "bumps", 0);
        let s = size as f64;
        let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
            .map(|_| {
                let cx = rng.gen_range(0.1 * s..0.9 * s);
                let cy = rng.gen_range(0.1 * s..0.9 * s);
                let sigma = rng.gen_range(0.06 * s..0.16 * s);
                let sign = if rng.gen_bool(0.65) { 1.0 } else { -1.0 };
                let amp = sign * rng.gen_range(0.8..1.8) * sigma;
                (cx, cy, sigma, amp)
            })
            .collect();
        let heights = Grid::from_fn(size, size, |x, y| {
            blobs
                .iter()
                .map(|&(cx, cy, sigma, amp)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum()
        });
        let mask = Grid::from_fn(size, size, |x, y| {
            x >= 2 && y >= 2 && x + 2 < size && y + 2 < size
        });
        HeightfieldScene::new("bumps", heights, 1.0, mask)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.heights.dims()
    }

    pub fn height_range(&self) -> f64 {
        let (lo, hi) = self
            .heights
            .as_slice()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &h| (lo.min(h), hi.max(h)));
        hi - lo
    }

    pub fn max_height(&self) -> f64 {
        self.heights
            .as_slice()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// World position of the surface sample at pixel `(x, y)`.
    pub fn surface_point(&self, x: usize, y: usize) -> Vec3 {
        Vec3::new(
            x as f64 * self.spacing,
            y as f64 * self.spacing,
            *self.heights.get(x, y),
        )
    }

    /// Bilinear height at fractional pixel coordinates, `None` outside the grid.
    pub fn height_at(&self, px: f64, py: f64) -> Option<f64> {
        let (w, h) = self.dims();
        if !(px >= 0.0 && py >= 0.0 && px <= (w - 1) as f64 && py <= (h - 1) as f64) {
            return None;
        }
        let x0 = (px.floor() as usize).min(w.saturating_sub(2));
        let y0 = (py.floor() as usize).min(h.saturating_sub(2));
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let (fx, fy) = (px - x0 as f64, py - y0 as f64);
        let hv = |x, y| *self.heights.get(x, y);
        let top = hv(x0, y0) * (1.0 - fx) + hv(x1, y0) * fx;
        let bottom = hv(x0, y1) * (1.0 - fx) + hv(x1, y1) * fx;
        Some(top * (1.0 - fy) + bottom * fy)
    }
}

fn centre_radius(size: usize, radius_frac: f64) -> Result<(f64, f64)> {
    if size < 4 {
        return Err(Error::InvalidInput("scene needs at least 4x4 pixels".into()));
    }
    if !(radius_frac > 0.0 && radius_frac <= 1.0) {
        return Err(Error::InvalidInput(format!("radius fraction {radius_frac} not in (0, 1]")));
    }
    let c = (size as f64 - 1.0) / 2.0;
    Ok((c, radius_frac * (size as f64 - 1.0) / 2.0))
}

/// Ground-truth normals from central height differences, `n ~ (-dh/dx, -dh/dy, 1)`.
///
/// Differences are one-sided where a neighbour falls outside the mask; a pixel with no
/// masked neighbour along an axis is an error.
pub fn heightfield_normals(scene: &HeightfieldScene) -> Result<NormalMap> {
    let (w, h) = scene.dims();
    let mask = &scene.mask;
    if mask.count() == 0 {
        return Err(Error::InvalidInput("scene mask is empty".into()));
    }
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *mask.get(x as usize, y as usize)
    };
    let hv = |x: isize, y: isize| *scene.heights.get(x as usize, y as usize);
    let derivative = |x: isize, y: isize, dx: isize, dy: isize| -> Result<f64> {
        let fwd = inside(x + dx, y + dy);
        let bwd = inside(x - dx, y - dy);
        let s = scene.spacing;
        match (fwd, bwd) {
            (true, true) => Ok((hv(x + dx, y + dy) - hv(x - dx, y - dy)) / (2.0 * s)),
            (true, false) => Ok((hv(x + dx, y + dy) - hv(x, y)) / s),
            (false, true) => Ok((hv(x, y) - hv(x - dx, y - dy)) / s),
            (false, false) => Err(Error::InvalidInput(format!(
                "pixel ({x}, {y}) has no masked neighbour along {}",
                if dx != 0 { "x" } else { "y" }
            ))),
        }
    };
    let mut normals = Grid::filled(w, h, Vec3::zeros());
    for (x, y) in mask.pixels() {
        let (xi, yi) = (x as isize, y as isize);
        let gx = derivative(xi, yi, 1, 0)?;
        let gy = derivative(xi, yi, 0, 1)?;
        *normals.get_mut(x, y) = Vec3::new(-gx, -gy, 1.0).normalize();
    }
    NormalMap::new(normals, mask.clone())
}
