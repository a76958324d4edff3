//! Classical Lambertian least-squares photometric stereo and its shadow-thresholded variant.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{Grid, ImageStack, LightSet, Mask, NormalMap, Vec3};

/// 655 in a 16-bit image, expressed in linear floats.
pub const DEFAULT_THRESHOLD: f64 = 655.0 / 65535.0;

const MAX_CONDITION: f64 = 1e8;
const QR_CONDITION: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LsSolution {
    pub normal: Vec3,
    pub albedo: f64,
    /// RMS of `l_j . b - i_j` over the observations used.
    pub residual: f64,
    pub used_count: usize,
}

/// Solves `L b = i` in the least-squares sense; `normal = b / |b|`, `albedo = |b|`.
pub fn lambertian_ls(values: &[f64], lights: &LightSet) -> Result<LsSolution> {
    let m = values.len();
    if m != lights.len() {
        return Err(Error::Shape(format!("{m} values for {} lights", lights.len())));
    }
    if m < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 observations, got {m}")));
    }
    let rhs: Vec<f64> = values
        .iter()
        .zip(lights.intensities())
        .map(|(i, big_l)| i / big_l)
        .collect();

    let mut gram = Matrix3::zeros();
    let mut moment = Vec3::zeros();
    for (l, &i) in lights.directions().iter().zip(&rhs) {
        gram += l * l.transpose();
        moment += l * i;
    }
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    // eigenvalues of L^T L are squared singular values of L
    let condition = if lo > 0.0 { (hi / lo).sqrt() } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Numerical(format!(
            "light matrix is rank deficient (condition number {condition:.3e})"
        )));
    }

    let b = if condition > QR_CONDITION {
        let a = DMatrix::from_fn(m, 3, |r, c| lights.direction(r)[c]);
        let qr = a.qr();
        let qtb = qr.q().transpose() * DVector::from_vec(rhs.clone());
        let x = qr
            .r()
            .solve_upper_triangular(&qtb)
            .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
        Vec3::new(x[0], x[1], x[2])
    } else {
        gram.cholesky()
            .ok_or_else(|| Error::Numerical("normal equations are not positive definite".into()))?
            .solve(&moment)
    };

    let albedo = b.norm();
    if !(albedo > 0.0) || !albedo.is_finite() {
        return Err(Error::Numerical("least-squares solution is zero".into()));
    }
    let sq: f64 = lights
        .directions()
        .iter()
        .zip(&rhs)
        .map(|(l, i)| (l.dot(&b) - i).powi(2))
        .sum();
    Ok(LsSolution {
        normal: b / albedo,
        albedo,
        residual: (sq / m as f64).sqrt(),
        used_count: m,
    })
}

/// Drops observations darker than `tau`; fewer than three survivors is an error.
pub fn threshold_shadow(values: &[f64], lights: &LightSet, tau: f64) -> Result<(Vec<f64>, LightSet)> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidInput(format!("threshold must be non-negative, got {tau}")));
    }
    if values.len() != lights.len() {
        return Err(Error::Shape(format!("{} values for {} lights", values.len(), lights.len())));
    }
    let keep: Vec<usize> = (0..values.len()).filter(|&j| values[j] >= tau).collect();
    if keep.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "only {} observations at or above threshold {tau}",
            keep.len()
        )));
    }
    Ok((keep.iter().map(|&j| values[j]).collect(), lights.select(&keep)))
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    /// Normals over the pixels that solved; failed pixels are excluded from its mask.
    pub normals: NormalMap,
    pub albedo: Grid<f64>,
    pub residual: Grid<f64>,
    pub failed: Vec<(usize, usize)>,
}

/// Per-pixel thresholding then least squares over `mask`.
pub fn baseline_map(stack: &ImageStack, lights: &LightSet, tau: f64, mask: &Mask) -> Result<BaselineResult> {
    stack.check_lights(lights)?;
    if mask.dims() != stack.dims() {
        return Err(Error::Shape("mask does not match images".into()));
    }
    let pixels = mask.pixels();
    let solved: Vec<Option<LsSolution>> = pixels
        .par_iter()
        .map(|&(x, y)| {
            let values = stack.pixel_values(x, y);
            threshold_shadow(&values, lights, tau)
                .and_then(|(v, l)| lambertian_ls(&v, &l))
                .ok()
        })
        .collect();

    let (w, h) = stack.dims();
    let mut normals = Grid::filled(w, h, Vec3::zeros());
    let mut albedo = Grid::filled(w, h, 0.0);
    let mut residual = Grid::filled(w, h, 0.0);
    let mut ok = Grid::filled(w, h, false);
    let mut failed = Vec::new();
    for (&(x, y), sol) in pixels.iter().zip(solved) {
        match sol {
            Some(s) => {
                *normals.get_mut(x, y) = s.normal;
                *albedo.get_mut(x, y) = s.albedo;
                *residual.get_mut(x, y) = s.residual;
                *ok.get_mut(x, y) = true;
            }
            None => failed.push((x, y)),
        }
    }
    Ok(BaselineResult {
        normals: NormalMap::new(normals, ok)?,
        albedo,
        residual,
        failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::{angular_error, mean_angular_error};
    use crate::synth::{make_material_map, render, sample_lights, Category, HeightfieldScene, Interreflection, MaterialMap, PrincipledParams};
    use proptest::prelude::*;

    fn axis_lights() -> LightSet {
        // lights must face the camera, so the x and y axes get a negligible z component
        LightSet::from_directions(vec![
            Vec3::new(1.0, 0.0, 1e-9),
            Vec3::new(0.0, 1.0, 1e-9),
            Vec3::z(),
        ])
        .unwrap()
    }

    #[test]
    fn identity_light_matrix() {
        let s = lambertian_ls(&[0.0, 0.0, 1.0], &axis_lights()).unwrap();
        assert!((s.normal - Vec3::z()).norm() < 1e-6);
        assert!((s.albedo - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_then_invert() {
        let n = Vec3::new(1.0, 1.0, 1.0).normalize();
        let lights = axis_lights();
        let values: Vec<f64> = lights.directions().iter().map(|l| l.dot(&n)).collect();
        assert!((values[0] - 0.577).abs() < 1e-3);
        let s = lambertian_ls(&values, &lights).unwrap();
        assert!((s.normal - n).norm() < 1e-6);
        assert!(s.residual < 1e-10);
    }

    #[test]
    fn degenerate_inputs() {
        let two = LightSet::from_directions(vec![Vec3::z(), Vec3::new(0.3, 0.0, 1.0)]).unwrap();
        assert!(lambertian_ls(&[1.0, 1.0], &two).is_err());
        let coplanar = LightSet::from_directions(vec![
            Vec3::new(0.5, 0.0, 1.0),
            Vec3::new(-0.5, 0.0, 1.0),
            Vec3::new(0.2, 0.0, 1.0),
        ])
        .unwrap();
        assert!(matches!(lambertian_ls(&[1.0, 1.0, 1.0], &coplanar), Err(Error::Numerical(_))));
    }

    #[test]
    fn threshold_fixtures() {
        let lights = sample_lights(4, 30.0, 0.0, 0).unwrap();
        let values = [0.005, 0.5, 0.6, 0.7];
        let (v, l) = threshold_shadow(&values, &lights, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(v, vec![0.5, 0.6, 0.7]);
        assert_eq!(l.len(), 3);
        let (v, _) = threshold_shadow(&values, &lights, 0.0).unwrap();
        assert_eq!(v.len(), 4);
        assert!(threshold_shadow(&[0.001; 4], &lights, DEFAULT_THRESHOLD).is_err());
        assert!((DEFAULT_THRESHOLD - 0.01).abs() < 1e-4);
    }

    #[test]
    fn lambertian_sphere_is_recovered() {
        let scene = HeightfieldScene::sphere(48, 0.9).unwrap();
        let mats = MaterialMap::uniform(&scene, Category::Diffuse, PrincipledParams::lambertian(0.8)).unwrap();
        let lights = sample_lights(60, 20.0, 1.0, 2).unwrap();
        let r = render(&scene, &mats, &lights, Interreflection::Off).unwrap();
        let res = baseline_map(&r.images, &lights, DEFAULT_THRESHOLD, &scene.mask).unwrap();
        let mae = mean_angular_error(&res.normals, &r.normals).unwrap();
        assert!(mae < 0.5, "mae {mae}");

        let doubled = baseline_map(&r.images.scaled(2.0), &lights, DEFAULT_THRESHOLD, &scene.mask).unwrap();
        for (x, y) in res.normals.mask().pixels() {
            if !*doubled.normals.mask().get(x, y) {
                continue;
            }
            assert!(angular_error(&res.normals.get(x, y), &doubled.normals.get(x, y)).unwrap() < 1e-6);
            let ratio = doubled.albedo.get(x, y) / res.albedo.get(x, y);
            assert!((ratio - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn concave_bowl_is_harder_than_sphere() {
        let lights = sample_lights(60, 20.0, 1.0, 2).unwrap();
        let run = |scene: HeightfieldScene| {
            let mats = make_material_map(&scene, 20, Category::Diffuse, 7).unwrap();
            let r = render(&scene, &mats, &lights, Interreflection::Off).unwrap();
            let res = baseline_map(&r.images, &lights, DEFAULT_THRESHOLD, &scene.mask).unwrap();
            mean_angular_error(&res.normals, &r.normals).unwrap()
        };
        let sphere = run(HeightfieldScene::sphere(48, 0.9).unwrap());
        let bowl = run(HeightfieldScene::bowl(48, 0.9, 0.8).unwrap());
        assert!(bowl > sphere, "bowl {bowl} sphere {sphere}");
    }

    proptest! {
        #[test]
        fn exact_recovery_and_scale_invariance(nx in -0.7f64..0.7, ny in -0.7f64..0.7,
                                               albedo in 0.05f64..3.0, scale in 0.1f64..10.0) {
            let n = Vec3::new(nx, ny, 1.0).normalize();
            let lights = sample_lights(20, 40.0, 0.0, 1).unwrap();
            let values: Vec<f64> = lights.directions().iter().map(|l| albedo * l.dot(&n)).collect();
            let s = lambertian_ls(&values, &lights).unwrap();
            prop_assert!((s.normal - n).norm() < 1e-10);
            prop_assert!((s.albedo - albedo).abs() < 1e-10 * albedo.max(1.0));
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let t = lambertian_ls(&scaled, &lights).unwrap();
            prop_assert!((t.normal - s.normal).norm() < 1e-10);
        }
    }
}
