use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::types::{LightSet, Vec3};

/// Quasi-uniform directions on the hemisphere cap above `elevation_min_deg`.
///
/// Points follow a Fibonacci spiral (uniform in `z`, golden-angle azimuth), then each is
/// tilted by a seeded angle of at most `jitter_deg` and renormalized. Intensities are 1.
pub fn sample_lights(count: usize, elevation_min_deg: f64, jitter_deg: f64, seed_value: u64) -> Result<LightSet> {
    if count == 0 {
        return Err(Error::InvalidInput("light count must be at least 1".into()));
    }
    if !(0.0..90.0).contains(&elevation_min_deg) {
        return Err(Error::InvalidInput(format!(
            "elevation floor {elevation_min_deg} must lie in [0, 90)"
        )));
    }
    if !(0.0..90.0).contains(&jitter_deg) {
        return Err(Error::InvalidInput(format!("jitter {jitter_deg} must lie in [0, 90)")));
    }
    let z_min = elevation_min_deg.to_radians().sin();
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut rng = seed::rng(seed_value, "lights", 0);
    let dirs = (0..count)
        .map(|i| {
            let z = 1.0 - (1.0 - z_min) * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            let base = Vec3::new(r * phi.cos(), r * phi.sin(), z);

            let tilt = rng.gen_range(0.0..=1.0) * jitter_deg.to_radians();
            let azimuth = rng.gen_range(0.0..2.0 * PI);
            let jittered = tilt_direction(&base, tilt, azimuth);
            if jittered.z > 1e-6 {
                jittered
            } else {
                base
            }
        })
        .collect();
    LightSet::from_directions(dirs)
}

/// Rotates `d` by `angle` toward the tangent direction at `azimuth` around it.
fn tilt_direction(d: &Vec3, angle: f64, azimuth: f64) -> Vec3 {
    let helper = if d.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let t1 = d.cross(&helper).normalize();
    let t2 = d.cross(&t1);
    let t = t1 * azimuth.cos() + t2 * azimuth.sin();
    (d * angle.cos() + t * angle.sin()).normalize()
}
