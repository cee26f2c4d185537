use std::path::Path;

use image::{DynamicImage, ImageReader, RgbImage};

use crate::arch::INPUT_SIZE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an image file to 8-bit RGB. An alpha channel is dropped; grayscale
/// images are rejected.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => Ok(img.to_rgb8()),
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_) => Err(Error::Format(format!(
            "`{}` is grayscale, expected an RGB image",
            path.display()
        ))),
        other => Err(Error::Format(format!(
            "`{}` has unsupported pixel layout {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Bilinear resize with half-pixel centres, returning `h×w×3` floats in the
/// source's 0..=255 scale. Equal sizes reproduce the source exactly.
pub fn resize_bilinear(img: &RgbImage, h: usize, w: usize) -> Result<Vec<f32>> {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    if sw == 0 || sh == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("cannot resize {sw}×{sh} to {w}×{h}")));
    }
    let raw = img.as_raw();
    let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, sh);
    let xs = axis(w, sw);
    let mut out = Vec::with_capacity(h * w * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for c in 0..3 {
                let p = |y: usize, x: usize| raw[(y * sw + x) * 3 + c] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Ok(out)
}

/// Maps 0..=255 to −1..=1.
pub fn to_unit_range(v: f32) -> f32 {
    (2.0 * v / 255.0 - 1.0).clamp(-1.0, 1.0)
}

/// Resize to 224×224 and scale to [−1, 1], as a `(1, 224, 224, 3)` tensor.
pub fn preprocess(img: &RgbImage) -> Result<Tensor> {
    preprocess_sized(img, INPUT_SIZE, INPUT_SIZE)
}

pub fn preprocess_sized(img: &RgbImage, h: usize, w: usize) -> Result<Tensor> {
    let data = resize_bilinear(img, h, w)?.into_iter().map(to_unit_range).collect();
    Tensor::new([1, h, w, 3], data)
}
