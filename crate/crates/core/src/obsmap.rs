//! Observation maps: per-pixel observations scattered onto a fixed `w x w` grid
//! indexed by the orthographic projection of each light direction.

use crate::error::{Error, Result};
use crate::types::{LightSet, Vec3};

pub const DEFAULT_WIDTH: usize = 32;

const UNIT_TOL: f64 = 1e-6;

/// A `w x w` map of normalized intensities. Row `v` follows `l_y`, column `u` follows `l_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMap {
    w: usize,
    cells: Vec<f32>,
    hits: Vec<u32>,
}

impl ObservationMap {
    pub fn width(&self) -> usize {
        self.w
    }

    /// Row-major cell values.
    pub fn cells(&self) -> &[f32] {
        &self.cells
    }

    pub fn hits(&self) -> &[u32] {
        &self.hits
    }

    pub fn cell(&self, u: usize, v: usize) -> f32 {
        self.cells[v * self.w + u]
    }

    pub fn hit_count(&self, u: usize, v: usize) -> u32 {
        self.hits[v * self.w + u]
    }

    /// Rebuilds a map from stored cell values (hit counts are inferred as 1 for non-zero cells).
    pub fn from_cells(w: usize, cells: Vec<f32>) -> Result<Self> {
        if cells.len() != w * w {
            return Err(Error::Shape(format!("{} cells for width {w}", cells.len())));
        }
        if cells.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("observation map values must lie in [0, 1]".into()));
        }
        let hits = cells.iter().map(|&v| u32::from(v > 0.0)).collect();
        Ok(ObservationMap { w, cells, hits })
    }
}

/// The `m` observations of a single pixel together with their lights.
#[derive(Debug, Clone, Copy)]
pub struct PixelObservations<'a> {
    pub values: &'a [f64],
    pub lights: &'a LightSet,
}

impl<'a> PixelObservations<'a> {
    pub fn new(values: &'a [f64], lights: &'a LightSet) -> Result<Self> {
        if values.len() != lights.len() {
            return Err(Error::Shape(format!(
                "{} values for {} lights",
                values.len(),
                lights.len()
            )));
        }
        Ok(PixelObservations { values, lights })
    }
}

/// Grid cell `(u, v)` of a light direction: `floor(w (l + 1) / 2)` per axis, clamped to `w - 1`.
pub fn project_light(l: &Vec3, w: usize) -> Result<(usize, usize)> {
    if w == 0 {
        return Err(Error::InvalidInput("observation map width must be positive".into()));
    }
    if !l.iter().all(|c| c.is_finite()) || (l.norm() - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidInput(format!("light {l:?} is not unit length")));
    }
    if l.z < 0.0 {
        return Err(Error::InvalidInput(format!("light {l:?} is back-facing")));
    }
    let index = |c: f64| {
        let raw = (w as f64 * (c + 1.0) / 2.0).floor();
        (raw.max(0.0) as usize).min(w - 1)
    };
    Ok((index(l.x), index(l.y)))
}

/// Rotates the `(x, y)` part of a vector about the view axis; `z` is untouched.
pub fn rotate_light(l: &Vec3, theta: f64) -> Vec3 {
    let (s, c) = theta.sin_cos();
    Vec3::new(c * l.x - s * l.y, s * l.x + c * l.y, l.z)
}

/// Same rotation as [`rotate_light`], applied to a surface normal.
pub fn rotate_normal(n: &Vec3, theta: f64) -> Vec3 {
    rotate_light(n, theta)
}

fn build_from<I>(values: &[f64], lights: I, intensities: &[f64], w: usize) -> Result<ObservationMap>
where
    I: Iterator<Item = Vec3>,
{
    let mut contributions: Vec<(usize, f64)> = Vec::with_capacity(values.len());
    let mut max_s = 0.0f64;
    for ((l, &i), &big_l) in lights.zip(values).zip(intensities) {
        if !(i >= 0.0 && i.is_finite()) {
            return Err(Error::InvalidInput(format!("observation {i} is negative or non-finite")));
        }
        let (u, v) = project_light(&l, w)?;
        let s = i / big_l;
        max_s = max_s.max(s);
        contributions.push((v * w + u, s));
    }
    if !(max_s > 0.0) {
        return Err(Error::InvalidInput(
            "all observations are zero, map cannot be normalized".into(),
        ));
    }
    // Sorting by (cell, value) makes every per-cell sum independent of input order.
    contributions.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut cells = vec![0.0f32; w * w];
    let mut hits = vec![0u32; w * w];
    let mut start = 0;
    while start < contributions.len() {
        let cell = contributions[start].0;
        let mut end = start;
        let mut sum = 0.0;
        while end < contributions.len() && contributions[end].0 == cell {
            sum += contributions[end].1;
            end += 1;
        }
        let count = end - start;
        let mean = sum / count as f64;
        cells[cell] = (mean / max_s).min(1.0) as f32;
        hits[cell] = count as u32;
        start = end;
    }
    Ok(ObservationMap { w, cells, hits })
}

/// Scatters `s_j = I_j / L_j` into the grid, averages collisions and divides by `max_j s_j`.
pub fn build_observation_map(obs: &PixelObservations<'_>, w: usize) -> Result<ObservationMap> {
    build_from(
        obs.values,
        obs.lights.directions().iter().copied(),
        obs.lights.intensities(),
        w,
    )
}

/// Observation map of the same pixel with every light rotated by `theta` about the view axis.
pub fn rotated_map(obs: &PixelObservations<'_>, theta: f64, w: usize) -> Result<ObservationMap> {
    build_from(
        obs.values,
        obs.lights.directions().iter().map(|l| rotate_light(l, theta)),
        obs.lights.intensities(),
        w,
    )
}
