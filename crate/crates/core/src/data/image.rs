use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Input side of the reference network.
pub const IMAGE_SIDE: usize = 224;

/// Decodes a PNG or JPEG into a `[side, side, 3]` tensor with values in `[0, 1]`.
///
/// Single-channel images are replicated across RGB; other images are used as
/// decoded. Images not already `side x side` are resampled bilinearly.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::Data {
                path: path.to_path_buf(),
                reason: format!("unsupported image format {other:?}; expected PNG or JPEG"),
            })
        }
    }
    let decoded = reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (width, height, rgb) = to_rgb_bytes(&decoded);
    let pixels: Vec<f64> = rgb.into_iter().map(f64::from).collect();
    let resized = resize_bilinear(&pixels, height, width, 3, side, side);
    let data = resized.into_iter().map(|v| v / 255.0).collect();
    Ok(Tensor::new(&[side, side, 3], data)?)
}

fn to_rgb_bytes(img: &DynamicImage) -> (usize, usize, Vec<u8>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        (w, h, img.to_rgb8().into_raw())
    } else {
        let gray = img.to_luma8().into_raw();
        (w, h, gray.into_iter().flat_map(|v| [v, v, v]).collect())
    }
}

/// Center-aligned bilinear resampling of an interleaved `[H, W, C]` buffer.
///
/// Output pixel `o` samples source coordinate `(o + 0.5) · in / out - 0.5`,
/// clamped to the image; equal sizes return the input unchanged.
pub fn resize_bilinear(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), in_h * in_w * channels, "buffer/geometry mismatch");
    if in_h == out_h && in_w == out_w {
        return src.to_vec();
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * input as f64 / out as f64 - 0.5)
                    .clamp(0.0, (input - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(input - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = taps(out_h, in_h);
    let cols = taps(out_w, in_w);
    let at = |y: usize, x: usize, c: usize| src[(y * in_w + x) * channels + c];
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for c in 0..channels {
                let top = at(y0, x0, c) * (1.0 - fx) + at(y0, x1, c) * fx;
                let bottom = at(y1, x0, c) * (1.0 - fx) + at(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use image::{GrayImage, RgbImage};

    use super::*;

    #[test]
    fn normalizes_extremes_and_replicates_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        GrayImage::from_raw(2, 1, vec![0, 255]).unwrap().save(&path).unwrap();
        let t = load_image(&path, 2).unwrap();
        // 2x1 stretched to 2x2: both rows equal the source row
        assert_eq!(t.shape(), &[2, 2, 3]);
        let d = t.data();
        assert_eq!(&d[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(&d[6..], &d[..6]);
    }

    #[test]
    fn same_size_rgb_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let raw: Vec<u8> = (0..4 * 4 * 3).map(|i| (i * 5) as u8).collect();
        RgbImage::from_raw(4, 4, raw.clone()).unwrap().save(&path).unwrap();
        let t = load_image(&path, 4).unwrap();
        for (v, r) in t.data().iter().zip(&raw) {
            assert_eq!(*v, f64::from(*r) / 255.0);
        }
    }

    #[test]
    fn rejects_unsupported_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let bmp = dir.path().join("x.bmp");
        std::fs::write(&bmp, b"BM\0\0\0\0not really a bitmap").unwrap();
        assert!(load_image(&bmp, 8).is_err());
        let broken = dir.path().join("broken.png");
        std::fs::write(&broken, b"\x89PNG\r\n\x1a\ntruncated").unwrap();
        let err = load_image(&broken, 8).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
        assert!(load_image(&dir.path().join("missing.png"), 8).is_err());
    }

    #[test]
    fn downscale_by_two_averages_blocks() {
        // Center-aligned 2x downscale lands exactly between source pixels.
        let src: Vec<f64> = (0..16).map(f64::from).collect();
        let out = resize_bilinear(&src, 4, 4, 1, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
