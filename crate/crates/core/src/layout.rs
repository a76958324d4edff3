//! On-disk dataset directories, shared by rendered output and ingestion of captured data.
//!
//! A dataset directory holds:
//! - the images, either as `images.pst` (tensor `[m, h, w]`), or as PNG files listed one per
//!   line in `filenames.txt`, or failing both every other `*.png` in name order;
//! - `light_directions.txt`: one `lx ly lz` triple per line;
//! - `light_intensities.txt` (optional, default 1): one or three scalars per line, three
//!   being averaged;
//! - `mask.png` (optional, default all pixels);
//! - ground-truth normals (optional): `normals.pst` (tensor `[h, w, 3]`) or `normal.png`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageio::{read_gray, read_mask, read_normal_png, write_gray16, write_mask, write_normal_png};
use crate::synth::RenderedSample;
use crate::tensor::{read_tensor, write_tensor};
use crate::types::{Grid, ImageStack, LightSet, Mask, NormalMap, Vec3};

pub const IMAGES_TENSOR: &str = "images.pst";
pub const FILENAMES: &str = "filenames.txt";
pub const DIRECTIONS: &str = "light_directions.txt";
pub const INTENSITIES: &str = "light_intensities.txt";
pub const MASK: &str = "mask.png";
pub const NORMALS_TENSOR: &str = "normals.pst";
pub const NORMALS_PNG: &str = "normal.png";

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: ImageStack,
    pub lights: LightSet,
    pub normals: Option<NormalMap>,
}

impl From<RenderedSample> for Dataset {
    fn from(r: RenderedSample) -> Self {
        Dataset {
            name: r.name,
            images: r.images,
            lights: r.lights,
            normals: Some(r.normals),
        }
    }
}

impl Dataset {
    /// Loads a dataset directory; images whose 0-based index is in `exclude` are dropped
    /// together with their lights.
    pub fn load(dir: impl AsRef<Path>, exclude: &[usize]) -> Result<Dataset> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::InvalidInput(format!("dataset directory {} does not exist", dir.display())));
        }
        let images = read_images(dir)?;
        let m = images.len();
        if m == 0 {
            return Err(Error::format(dir, "no images found"));
        }
        let (w, h) = images[0].dims();
        if images.iter().any(|i| i.dims() != (w, h)) {
            return Err(Error::format(dir, "images differ in size"));
        }

        let directions = read_directions(&dir.join(DIRECTIONS))?;
        let intensities = match dir.join(INTENSITIES) {
            p if p.exists() => read_intensities(&p)?,
            _ => vec![1.0; directions.len()],
        };
        if directions.len() != m || intensities.len() != m {
            return Err(Error::format(
                dir,
                format!(
                    "{m} images but {} light directions and {} intensities",
                    directions.len(),
                    intensities.len()
                ),
            ));
        }
        let lights = LightSet::new(directions, intensities)?;

        let mask = match dir.join(MASK) {
            p if p.exists() => read_mask(&p)?,
            _ => Grid::filled(w, h, true),
        };
        if mask.dims() != (w, h) {
            return Err(Error::format(dir.join(MASK), "mask size differs from the images"));
        }
        let normals = read_normals(dir, &mask)?;

        if let Some(&bad) = exclude.iter().find(|&&j| j >= m) {
            return Err(Error::InvalidInput(format!("excluded image {bad} out of range (0..{m})")));
        }
        let keep: Vec<usize> = (0..m).filter(|j| !exclude.contains(j)).collect();
        let images = ImageStack::new(images, mask)?.select(&keep);
        let lights = lights.select(&keep);
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok(Dataset {
            name,
            images,
            lights,
            normals,
        })
    }

    /// Writes the float tensor, 16-bit PNG previews (clamped to [0, 1]), light files, mask
    /// and, when present, ground-truth normals.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (w, h) = self.images.dims();
        let m = self.images.len();
        let mut payload = Vec::with_capacity(m * w * h);
        for img in self.images.images() {
            payload.extend_from_slice(img.as_slice());
        }
        write_tensor(dir.join(IMAGES_TENSOR), &[m, h, w], &payload)?;
        let mut names = String::new();
        for (j, img) in self.images.images().iter().enumerate() {
            let name = format!("{:03}.png", j + 1);
            write_gray16(dir.join(&name), img)?;
            names += &name;
            names.push('\n');
        }
        write_text(&dir.join(FILENAMES), &names)?;

        let mut dirs = String::new();
        let mut ints = String::new();
        for (l, i) in self.lights.directions().iter().zip(self.lights.intensities()) {
            dirs += &format!("{} {} {}\n", l.x, l.y, l.z);
            ints += &format!("{i}\n");
        }
        write_text(&dir.join(DIRECTIONS), &dirs)?;
        write_text(&dir.join(INTENSITIES), &ints)?;
        write_mask(dir.join(MASK), self.images.mask())?;
        if let Some(n) = &self.normals {
            write_normals_tensor(dir.join(NORMALS_TENSOR), n)?;
            write_normal_png(dir.join(NORMALS_PNG), n)?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_images(dir: &Path) -> Result<Vec<Grid<f32>>> {
    let tensor_path = dir.join(IMAGES_TENSOR);
    if tensor_path.exists() {
        let t = read_tensor(&tensor_path)?;
        let [m, h, w] = t.dims[..] else {
            return Err(Error::format(&tensor_path, format!("expected rank 3 [m, h, w], got {:?}", t.dims)));
        };
        if t.data.iter().any(|&v| v < 0.0) {
            return Err(Error::format(&tensor_path, "negative pixel values"));
        }
        return t
            .data
            .chunks_exact(w * h)
            .take(m)
            .map(|c| Grid::from_vec(w, h, c.to_vec()))
            .collect();
    }
    let files: Vec<PathBuf> = match dir.join(FILENAMES) {
        p if p.exists() => read_text(&p)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| dir.join(l))
            .collect(),
        _ => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.to_ascii_lowercase().ends_with(".png") && name != MASK && name != NORMALS_PNG
                })
                .collect();
            files.sort();
            files
        }
    };
    files.iter().map(read_gray).collect()
}

fn parse_rows(path: &Path, text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::format(path, format!("line {}: bad number {t:?}", i + 1)))
                })
                .collect()
        })
        .collect()
}

/// Reads `lx ly lz` rows; vectors that are not unit to 1e-9 are normalized.
pub fn read_directions(path: &Path) -> Result<Vec<Vec3>> {
    parse_rows(path, &read_text(path)?)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let [x, y, z] = row[..] else {
                return Err(Error::format(path, format!("row {}: expected 3 values, got {}", i + 1, row.len())));
            };
            let v = Vec3::new(x, y, z);
            let n = v.norm();
            if !(n > 0.0) {
                return Err(Error::format(path, format!("row {}: zero direction", i + 1)));
            }
            Ok(if (n - 1.0).abs() <= UNIT_TOL { v } else { v / n })
        })
        .collect()
}

/// Reads one or three scalars per row; three per-channel values are averaged.
pub fn read_intensities(path: &Path) -> Result<Vec<f64>> {
    parse_rows(path, &read_text(path)?)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| match row[..] {
            [v] => Ok(v),
            [r, g, b] => Ok((r + g + b) / 3.0),
            _ => Err(Error::format(path, format!("row {}: expected 1 or 3 values, got {}", i + 1, row.len()))),
        })
        .collect()
}

fn read_normals(dir: &Path, mask: &Mask) -> Result<Option<NormalMap>> {
    let tensor_path = dir.join(NORMALS_TENSOR);
    if tensor_path.exists() {
        return read_normals_tensor(&tensor_path, mask).map(Some);
    }
    let png = dir.join(NORMALS_PNG);
    if png.exists() {
        return read_normal_png(&png, Some(mask)).map(Some);
    }
    Ok(None)
}

/// Writes a normal map as tensor `[h, w, 3]`; unmasked pixels are zero.
pub fn write_normals_tensor(path: impl AsRef<Path>, map: &NormalMap) -> Result<()> {
    let (w, h) = map.dims();
    let mut data = Vec::with_capacity(w * h * 3);
    for (x, y) in map.normals().coords() {
        let n = if *map.mask().get(x, y) { map.get(x, y) } else { Vec3::zeros() };
        data.extend([n.x as f32, n.y as f32, n.z as f32]);
    }
    write_tensor(path, &[h, w, 3], &data)
}

/// Reads a `[h, w, 3]` normal tensor. Masked normals are renormalized in double precision;
/// pixels outside `mask` or with an all-zero vector are left out of the result's mask.
pub fn read_normals_tensor(path: impl AsRef<Path>, mask: &Mask) -> Result<NormalMap> {
    let path = path.as_ref();
    let t = read_tensor(path)?;
    let [h, w, 3] = t.dims[..] else {
        return Err(Error::format(path, format!("expected [h, w, 3], got {:?}", t.dims)));
    };
    if mask.dims() != (w, h) {
        return Err(Error::format(path, "normal map size differs from the mask"));
    }
    let vectors = Grid::from_fn(w, h, |x, y| {
        let i = 3 * (y * w + x);
        Vec3::new(t.data[i] as f64, t.data[i + 1] as f64, t.data[i + 2] as f64)
    });
    let valid = Grid::from_fn(w, h, |x, y| *mask.get(x, y) && vectors.get(x, y).norm() > 0.5);
    let normals = vectors.map(|v| if v.norm() > 0.0 { v.normalize() } else { *v });
    NormalMap::new(normals, valid)
}
