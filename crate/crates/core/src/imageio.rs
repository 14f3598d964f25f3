//! Conversions between tensors and lossless PNG images.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use ssae_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

const PNG_MAGIC: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

pub fn is_png(bytes: &[u8]) -> bool {
    bytes.starts_with(PNG_MAGIC)
}

/// 8-bit value to `[-1, 1]`: `v / 127.5 - 1`.
#[inline]
pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

#[inline]
pub fn quantize_unit(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// RGB image to a `[3, H, W]` tensor in `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = normalize_u8(px[c]);
        }
    }
    t
}

/// `[3, H, W]` or `[1, 3, H, W]` tensor in `[-1, 1]` to an 8-bit RGB image.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = match t.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("image tensor", &[1, 3, 0, 0], s)),
    };
    if c != 3 {
        return Err(Error::shape("image channels", &[3], &[c]));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| quantize_unit(d[(ch * h + y as usize) * w + x as usize].as_f64());
        Rgb([at(0), at(1), at(2)])
    }))
}

pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn encode_png_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Decodes PNG bytes; any other container is rejected.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage> {
    if !is_png(bytes) {
        return Err(Error::ImageFormat("only lossless PNG input is accepted".into()));
    }
    Ok(image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8())
}

pub fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png_rgb(&bytes)
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = encode_png_rgb(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `[H, W]` mask in `[0, 1]` to 8-bit grayscale (`round(m * 255)`).
pub fn mask_to_gray<T: Scalar>(mask: &Tensor<T>) -> Result<GrayImage> {
    let [h, w] = mask.shape() else {
        return Err(Error::shape("mask", &[0, 0], mask.shape()));
    };
    let (h, w) = (*h, *w);
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = mask.data()[y as usize * w + x as usize].as_f64().clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    }))
}

/// Grayscale PNG to an `[H, W]` mask with values `v / 255`.
pub fn gray_to_mask(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::new(&[h as usize, w as usize], img.pixels().map(|p| p[0] as f32 / 255.0).collect())
}

pub fn read_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if !is_png(&bytes) {
        return Err(Error::ImageFormat(format!("{} is not a PNG", path.display())));
    }
    Ok(gray_to_mask(&image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.to_luma8()))
}

/// Reads an integer label PNG without palette expansion. Returns `(height, width, ids)`.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |e: png::DecodingError| Error::Dataset(format!("{}: {e}", path.display()));
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let ids: Vec<u16> = match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale | png::ColorType::Indexed, png::BitDepth::Eight) => {
            buf[..w * h].iter().map(|&v| v as u16).collect()
        }
        (png::ColorType::Grayscale, png::BitDepth::Sixteen) => {
            buf[..2 * w * h].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        }
        (png::ColorType::Indexed | png::ColorType::Grayscale, depth) if (depth as u8) < 8 => {
            let bits = depth as usize;
            let stride = info.line_size;
            let mut out = Vec::with_capacity(w * h);
            for y in 0..h {
                let row = &buf[y * stride..(y + 1) * stride];
                for x in 0..w {
                    let bit = x * bits;
                    let byte = row[bit / 8];
                    let shift = 8 - bits - (bit % 8);
                    out.push(((byte >> shift) & ((1u8 << bits) - 1)) as u16);
                }
            }
            out
        }
        (ct, bd) => {
            return Err(Error::Dataset(format!(
                "{}: label maps must be single-channel or paletted, found {ct:?}/{bd:?}",
                path.display()
            )))
        }
    };
    Ok((h, w, ids))
}

/// Writes an 8-bit single-channel label PNG.
pub fn write_label_png(path: &Path, height: usize, width: usize, ids: &[u16]) -> Result<()> {
    let px: Vec<u8> = ids
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::Dataset(format!("class id {v} does not fit 8-bit PNG"))))
        .collect::<Result<_>>()?;
    let img = GrayImage::from_raw(width as u32, height as u32, px)
        .ok_or_else(|| Error::Dataset("label buffer size mismatch".into()))?;
    std::fs::write(path, encode_png_gray(&img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_u8(255), 1.0);
        assert_eq!(normalize_u8(0), -1.0);
        for v in 0..=255u8 {
            assert_eq!(quantize_unit(normalize_u8(v) as f64), v);
        }
    }

    #[test]
    fn rejects_non_png() {
        assert!(matches!(decode_png_rgb(b"\xff\xd8\xff\xe0JFIF"), Err(Error::ImageFormat(_))));
    }

    #[test]
    fn label_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let ids: Vec<u16> = (0..12).map(|i| (i % 19) as u16).collect();
        write_label_png(&p, 3, 4, &ids).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), (3, 4, ids));
    }
}
