//! Angular-error metrics between normal estimates and ground truth.

use crate::error::{Error, Result};
use crate::types::{Grid, Mask, NormalMap, Vec3};

const UNIT_TOL: f64 = 1e-6;

/// Angle between two unit vectors in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(|a x b|, a . b)`, which equals `acos(clamp(a . b))` for unit
/// inputs but is exactly zero for `a == b` and exactly symmetric in its arguments.
pub fn angular_error(a: &Vec3, b: &Vec3) -> Result<f64> {
    for v in [a, b] {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite normal {v:?}")));
        }
        if (v.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidInput(format!("normal {v:?} is not unit length")));
        }
    }
    let dot = (a.x * b.x + a.y * b.y + a.z * b.z).clamp(-1.0, 1.0);
    let cross = a.cross(b).norm();
    Ok(cross.atan2(dot).to_degrees())
}

/// Summary statistics of a per-pixel angular error map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub count: usize,
}

/// Per-pixel angular errors over the intersection of both masks.
///
/// Returns the error grid (zero outside the intersection) and the intersection mask.
pub fn angular_error_map(est: &NormalMap, gt: &NormalMap) -> Result<(Grid<f64>, Mask)> {
    if est.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "estimate is {:?}, ground truth is {:?}",
            est.dims(),
            gt.dims()
        )));
    }
    let (w, h) = est.dims();
    let mask = Grid::from_fn(w, h, |x, y| *est.mask().get(x, y) && *gt.mask().get(x, y));
    let mut errors = Grid::filled(w, h, 0.0);
    for (x, y) in mask.pixels() {
        *errors.get_mut(x, y) = angular_error(&est.get(x, y), &gt.get(x, y))?;
    }
    Ok((errors, mask))
}

pub fn error_stats(errors: &Grid<f64>, mask: &Mask) -> Result<ErrorStats> {
    let mut values: Vec<f64> = mask.pixels().iter().map(|&(x, y)| *errors.get(x, y)).collect();
    if values.is_empty() {
        return Err(Error::InvalidInput("mask intersection is empty".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    Ok(ErrorStats {
        mean,
        median,
        max: values[n - 1],
        count: n,
    })
}

/// Mean angular error in degrees over the intersected masks.
pub fn mean_angular_error(est: &NormalMap, gt: &NormalMap) -> Result<f64> {
    let (errors, mask) = angular_error_map(est, gt)?;
    Ok(error_stats(&errors, &mask)?.mean)
}
