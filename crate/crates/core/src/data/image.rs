use std::path::Path;

use image::{DynamicImage, GenericImageView, ImageBuffer, Luma};
use ndarray::{Array2, Array3};

use super::MaskEncoding;
use crate::error::{Error, Result};
use crate::guidance::ImageTensor;
use crate::metrics::GroundTruthMask;

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes an 8- or 16-bit image to three channels in `[0, 1]`; grayscale
/// is replicated.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = decode(path)?;
    let (w, h) = img.dimensions();
    let rgb = img.to_rgb16();
    let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        rgb.get_pixel(j as u32, i as u32)[c] as f64 / u16::MAX as f64
    });
    ImageTensor::new(data)
}

/// Raw single-channel values of a mask file.
fn mask_values(path: &Path) -> Result<Array2<f64>> {
    let img = decode(path)?;
    let (w, h) = img.dimensions();
    let luma = img.to_luma16();
    let scale = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => 257.0,
        _ => 1.0,
    };
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        luma.get_pixel(j as u32, i as u32)[0] as f64 / scale
    }))
}

/// Integer labels of an instance mask.
pub fn decode_labels(path: &Path) -> Result<Array2<i64>> {
    Ok(mask_values(path)?.mapv(|v| v as i64))
}

/// Binarizes at half of the largest value; an all-zero map stays empty.
fn binarize(values: &Array2<f64>) -> Array2<f64> {
    let max = values.fold(0.0f64, |a, &b| a.max(b));
    values.mapv(|v| {
        if max > 0.0 && v >= 0.5 * max {
            1.0
        } else {
            0.0
        }
    })
}

/// Foreground union of an instance mask: 1 wherever the label is positive.
pub fn instance_to_semantic(labels: &Array2<i64>) -> Result<GroundTruthMask> {
    if let Some(&neg) = labels.iter().find(|&&v| v < 0) {
        return Err(Error::InvalidInput(format!(
            "negative instance label {neg}"
        )));
    }
    GroundTruthMask::new(labels.mapv(|v| if v > 0 { 1.0 } else { 0.0 }))
}

/// Loads a mask at its native resolution.
pub fn load_mask(path: &Path, encoding: MaskEncoding) -> Result<GroundTruthMask> {
    match encoding {
        MaskEncoding::Binary => GroundTruthMask::new(binarize(&mask_values(path)?)),
        MaskEncoding::Instance => instance_to_semantic(&decode_labels(path)?),
    }
}

/// Source coordinate of output index `i` under half-pixel alignment.
fn source_coord(i: usize, input: usize, output: usize) -> f64 {
    (i as f64 + 0.5) * input as f64 / output as f64 - 0.5
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let taps = |n: usize, m: usize| -> Vec<(usize, usize, f64)> {
        (0..m)
            .map(|i| {
                let x = source_coord(i, n, m).clamp(0.0, (n - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (r0, r1, fy) = rows[i];
        let (c0, c1, fx) = cols[j];
        let top = src[[r0, c0]] * (1.0 - fx) + src[[r0, c1]] * fx;
        let bottom = src[[r1, c0]] * (1.0 - fx) + src[[r1, c1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize; output index `i` reads `floor((i + 0.5) * in / out)`.
pub fn resize_nearest<T: Clone>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let pick = |i: usize, n: usize, m: usize| {
        (((i as f64 + 0.5) * n as f64 / m as f64).floor() as usize).min(n - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        src[[pick(i, h, out_h), pick(j, w, out_w)]].clone()
    })
}

/// Decodes an image, resizes it bilinearly to `resolution` square and
/// returns three channels in `[0, 1]`.
pub fn preprocess(path: &Path, resolution: usize) -> Result<ImageTensor> {
    let img = load_image(path)?;
    let (_, h, w) = img.data().dim();
    if (h, w) == (resolution, resolution) {
        return Ok(img);
    }
    let mut out = Array3::zeros((3, resolution, resolution));
    for c in 0..3 {
        let plane = img.data().index_axis(ndarray::Axis(0), c).to_owned();
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&resize_bilinear(&plane, resolution, resolution));
    }
    ImageTensor::new(out)
}

/// Decodes a mask, resizes it with nearest neighbour to `resolution` square
/// and binarizes it.
pub fn preprocess_mask(
    path: &Path,
    resolution: usize,
    encoding: MaskEncoding,
) -> Result<GroundTruthMask> {
    match encoding {
        MaskEncoding::Binary => {
            let values = resize_nearest(&mask_values(path)?, resolution, resolution);
            GroundTruthMask::new(binarize(&values))
        }
        MaskEncoding::Instance => {
            let labels = resize_nearest(&decode_labels(path)?, resolution, resolution);
            instance_to_semantic(&labels)
        }
    }
}

/// Writes 8-bit grayscale pixels, row-major, as a PNG.
pub fn save_gray_png(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, pixels).ok_or_else(|| {
            Error::Shape(format!("{width}x{height} image from wrong pixel count"))
        })?;
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}
