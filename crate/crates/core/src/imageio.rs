//! PNG input/output for grayscale stacks, masks, error maps and normal maps.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::types::{Grid, Mask, NormalMap, Vec3};

pub type Rgb16Image = ImageBuffer<Rgb<u16>, Vec<u16>>;

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an 8/16-bit image as linear grayscale in `[0, 1]`.
///
/// Colour images are converted by averaging their channels.
pub fn read_gray(path: impl AsRef<Path>) -> Result<Grid<f32>> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p[0] as f32 / 65535.0).collect(),
        DynamicImage::ImageRgb8(b) => b
            .pixels()
            .map(|p| p.0.iter().map(|&c| c as f32).sum::<f32>() / (3.0 * 255.0))
            .collect(),
        DynamicImage::ImageRgb16(b) => b
            .pixels()
            .map(|p| p.0.iter().map(|&c| c as f32).sum::<f32>() / (3.0 * 65535.0))
            .collect(),
        other => {
            let b = other.to_luma16();
            b.pixels().map(|p| p[0] as f32 / 65535.0).collect()
        }
    };
    Grid::from_vec(w, h, data)
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes linear values in `[0, 1]` as a 16-bit grayscale PNG (out-of-range values clamp).
pub fn write_gray16(path: impl AsRef<Path>, img: &Grid<f32>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.as_slice().iter().map(|&v| to_u16(v)).collect(),
    )
    .expect("buffer length matches grid");
    save(&buf, path.as_ref())
}

pub fn write_gray8(path: impl AsRef<Path>, img: &Grid<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.as_slice().to_vec())
            .expect("buffer length matches grid");
    save(&buf, path.as_ref())
}

pub fn read_gray8(path: impl AsRef<Path>) -> Result<Grid<u8>> {
    let img = open(path.as_ref())?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(w, h, img.into_raw())
}

/// Any non-zero pixel is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(read_gray(path)?.map(|&v| v > 0.0))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    write_gray8(path, &mask.map(|&m| if m { 255 } else { 0 }))
}

fn encode_component(c: f64) -> u16 {
    ((c * 0.5 + 0.5).clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Encodes normals as `round((n * 0.5 + 0.5) * 65535)` per channel; unmasked pixels are black.
pub fn encode_normal_image(map: &NormalMap) -> Rgb16Image {
    let (w, h) = map.dims();
    let mut out = Rgb16Image::new(w as u32, h as u32);
    for (x, y) in map.mask().pixels() {
        let n = map.get(x, y);
        out.put_pixel(
            x as u32,
            y as u32,
            Rgb([encode_component(n.x), encode_component(n.y), encode_component(n.z)]),
        );
    }
    out
}

/// Inverse of [`encode_normal_image`]. Without an explicit mask, black pixels are background.
pub fn decode_normal_image(img: &DynamicImage, mask: Option<&Mask>) -> Result<NormalMap> {
    let rgb: Rgb16Image = match img {
        DynamicImage::ImageRgb16(b) => b.clone(),
        DynamicImage::ImageRgb8(_) => img.to_rgb16(),
        _ => {
            return Err(Error::InvalidInput(
                "normal image must have exactly three colour channels".into(),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mask = match mask {
        Some(m) if m.dims() != (w, h) => {
            return Err(Error::Shape("mask does not match normal image".into()))
        }
        Some(m) => m.clone(),
        None => Grid::from_fn(w, h, |x, y| rgb.get_pixel(x as u32, y as u32).0 != [0, 0, 0]),
    };
    let mut normals = Grid::filled(w, h, Vec3::zeros());
    for (x, y) in mask.pixels() {
        let p = rgb.get_pixel(x as u32, y as u32).0;
        let v = Vec3::new(
            p[0] as f64 / 65535.0 * 2.0 - 1.0,
            p[1] as f64 / 65535.0 * 2.0 - 1.0,
            p[2] as f64 / 65535.0 * 2.0 - 1.0,
        );
        let norm = v.norm();
        if norm < 1e-12 {
            return Err(Error::InvalidInput(format!("zero normal at ({x}, {y})")));
        }
        *normals.get_mut(x, y) = v / norm;
    }
    NormalMap::new(normals, mask)
}

pub fn write_normal_png(path: impl AsRef<Path>, map: &NormalMap) -> Result<()> {
    save(&encode_normal_image(map), path.as_ref())
}

pub fn read_normal_png(path: impl AsRef<Path>, mask: Option<&Mask>) -> Result<NormalMap> {
    decode_normal_image(&open(path.as_ref())?, mask)
}
