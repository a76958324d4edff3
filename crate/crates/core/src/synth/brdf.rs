//! Isotropic principled-BSDF subset written purely in terms of `(n.l, n.v, l.v)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::synth::material::{DiffuseModel, PrincipledParams};
use crate::types::Vec3;

const MIN_ALPHA: f64 = 1e-3;
const DIELECTRIC_F0: f64 = 0.08;

fn schlick_weight(cos: f64) -> f64 {
    (1.0 - cos).clamp(0.0, 1.0).powi(5)
}

fn ggx_d(n_h: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    let t = n_h * n_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

fn smith_g1(n_x: f64, alpha: f64) -> f64 {
    let a2 = alpha * alpha;
    2.0 * n_x / (n_x + (a2 + (1.0 - a2) * n_x * n_x).sqrt())
}

/// Reflectance from the three isotropic dot products. Requires `n_l > 0` and `n_v > 0`.
pub fn brdf_from_dots(p: &PrincipledParams, n_l: f64, n_v: f64, l_v: f64) -> f64 {
    // half-vector terms: l.h = v.h = sqrt((1 + l.v) / 2), n.h = (n.l + n.v) / (2 l.h)
    let l_h = ((1.0 + l_v) * 0.5).max(0.0).sqrt();
    let n_h = if l_h > 1e-12 {
        ((n_l + n_v) / (2.0 * l_h)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let fh = schlick_weight(l_h);

    let fd = match p.diffuse {
        DiffuseModel::Burley => {
            let fd90 = 0.5 + 2.0 * p.roughness * l_h * l_h;
            (1.0 + (fd90 - 1.0) * schlick_weight(n_l)) * (1.0 + (fd90 - 1.0) * schlick_weight(n_v))
        }
        DiffuseModel::Lambert => 1.0,
    };
    let diffuse = (1.0 - p.metallic) * p.base_color / PI * fd;

    let sheen = (1.0 - p.metallic) * p.sheen * fh;

    let alpha = (p.roughness * p.roughness).max(MIN_ALPHA);
    let microfacet = ggx_d(n_h, alpha) * smith_g1(n_l, alpha) * smith_g1(n_v, alpha) / (4.0 * n_l * n_v);
    let fresnel = |f0: f64| f0 + (1.0 - f0) * fh;
    let dielectric = (1.0 - p.metallic) * p.specular * fresnel(DIELECTRIC_F0);
    let metal = p.metallic * fresnel(p.base_color);
    let specular = (dielectric + metal) * microfacet;

    diffuse + sheen + specular
}

/// Evaluates the BRDF for unit `n`, `l`, `v`; back-facing `l` or `v` is an error.
pub fn eval_brdf(p: &PrincipledParams, n: &Vec3, l: &Vec3, v: &Vec3) -> Result<f64> {
    let n_l = n.dot(l);
    let n_v = n.dot(v);
    if n_l <= 0.0 || n_v <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "back-facing configuration: n.l = {n_l}, n.v = {n_v}"
        )));
    }
    Ok(brdf_from_dots(p, n_l, n_v, l.dot(v)))
}

/// Point-wise image formation `L * rho * max(n.l, 0)` with the camera looking down `-z`.
pub fn shade(p: &PrincipledParams, n: &Vec3, l: &Vec3, intensity: f64) -> f64 {
    let n_l = n.dot(l);
    let n_v = n.z;
    if n_l <= 0.0 || n_v <= 0.0 {
        return 0.0;
    }
    intensity * brdf_from_dots(p, n_l, n_v, l.z) * n_l
}
