//! Domain types shared by every module: light sets, image stacks and normal maps.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

const UNIT_TOL_LIGHT: f64 = 1e-9;
const UNIT_TOL_NORMAL: f64 = 1e-6;

/// Dense row-major 2-D array. `get(x, y)` addresses column `x`, row `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[self.index(x, y)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        let i = self.index(x, y);
        &mut self.data[i]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Pixel coordinates `(x, y)` in row-major order.
    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |y| (0..self.width).map(move |x| (x, y)))
    }
}

pub type Mask = Grid<bool>;

impl Mask {
    pub fn count(&self) -> usize {
        self.as_slice().iter().filter(|&&m| m).count()
    }

    /// Row-major list of `(x, y)` for every set pixel.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.coords().filter(|&(x, y)| *self.get(x, y)).collect()
    }
}

/// Calibrated directional lights: unit directions (z toward the viewer) and intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct LightSet {
    directions: Vec<Vec3>,
    intensities: Vec<f64>,
}

impl LightSet {
    pub fn new(directions: Vec<Vec3>, intensities: Vec<f64>) -> Result<Self> {
        if directions.len() != intensities.len() {
            return Err(Error::Shape(format!(
                "{} light directions but {} intensities",
                directions.len(),
                intensities.len()
            )));
        }
        for (j, d) in directions.iter().enumerate() {
            if !d.iter().all(|c| c.is_finite()) || (d.norm() - 1.0).abs() > UNIT_TOL_LIGHT {
                return Err(Error::InvalidInput(format!("light {j} is not unit length: {d:?}")));
            }
            if d.z <= 0.0 {
                return Err(Error::InvalidInput(format!("light {j} points away from the viewer")));
            }
        }
        if let Some(j) = intensities.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "light {j} intensity must be positive, got {}",
                intensities[j]
            )));
        }
        Ok(LightSet {
            directions,
            intensities,
        })
    }

    /// Directions are renormalized before validation; intensities default to 1.
    pub fn from_directions(directions: Vec<Vec3>) -> Result<Self> {
        let n = directions.len();
        let dirs = directions.into_iter().map(|d| d.normalize()).collect();
        LightSet::new(dirs, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vec3] {
        &self.directions
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn direction(&self, j: usize) -> Vec3 {
        self.directions[j]
    }

    pub fn intensity(&self, j: usize) -> f64 {
        self.intensities[j]
    }

    /// Keep only the lights at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> LightSet {
        LightSet {
            directions: indices.iter().map(|&j| self.directions[j]).collect(),
            intensities: indices.iter().map(|&j| self.intensities[j]).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Result<LightSet> {
        LightSet::new(
            self.directions.clone(),
            self.intensities.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Elevation of a light direction above the image plane, in degrees.
pub fn elevation_deg(l: &Vec3) -> f64 {
    l.z.clamp(-1.0, 1.0).asin().to_degrees()
}

/// `m` linear-radiometric grayscale images sharing one foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    images: Vec<Grid<f32>>,
    mask: Mask,
}

impl ImageStack {
    pub fn new(images: Vec<Grid<f32>>, mask: Mask) -> Result<Self> {
        for (j, img) in images.iter().enumerate() {
            if img.dims() != mask.dims() {
                return Err(Error::Shape(format!(
                    "image {j} is {:?} but mask is {:?}",
                    img.dims(),
                    mask.dims()
                )));
            }
            if img.as_slice().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "image {j} has negative or non-finite pixels"
                )));
            }
        }
        Ok(ImageStack { images, mask })
    }

    /// Checks that the stack pairs with `lights` one-to-one.
    pub fn check_lights(&self, lights: &LightSet) -> Result<()> {
        if self.images.len() != lights.len() {
            return Err(Error::Shape(format!(
                "{} images but {} lights",
                self.images.len(),
                lights.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Grid<f32>] {
        &self.images
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// The `m` observed values of pixel `(x, y)`.
    pub fn pixel_values(&self, x: usize, y: usize) -> Vec<f64> {
        self.images.iter().map(|img| *img.get(x, y) as f64).collect()
    }

    pub fn select(&self, indices: &[usize]) -> ImageStack {
        ImageStack {
            images: indices.iter().map(|&j| self.images[j].clone()).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        if mask.dims() != self.mask.dims() {
            return Err(Error::Shape("replacement mask has different dimensions".into()));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn scaled(&self, factor: f32) -> ImageStack {
        ImageStack {
            images: self.images.iter().map(|g| g.map(|v| v * factor)).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Per-pixel unit normals over a mask. Unmasked entries are conventionally zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    normals: Grid<Vec3>,
    mask: Mask,
}

impl NormalMap {
    pub fn new(normals: Grid<Vec3>, mask: Mask) -> Result<Self> {
        if normals.dims() != mask.dims() {
            return Err(Error::Shape("normal grid and mask differ in size".into()));
        }
        for (x, y) in mask.pixels() {
            let n = normals.get(x, y);
            if !n.iter().all(|c| c.is_finite()) || (n.norm() - 1.0).abs() > UNIT_TOL_NORMAL {
                return Err(Error::InvalidInput(format!(
                    "masked normal at ({x}, {y}) is not unit length: {n:?}"
                )));
            }
        }
        Ok(NormalMap { normals, mask })
    }

    pub fn normals(&self) -> &Grid<Vec3> {
        &self.normals
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> Vec3 {
        *self.normals.get(x, y)
    }
}
