//! Lossless 8-bit RGB PNG reading/writing and montage grids.

use crate::synthworld::Image;
use crate::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// Quantize to 8-bit with round-half-up; exact inverse of [`load_png`]'s
/// dequantization up to half a quantization step.
pub fn to_rgb8(img: &Image) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn from_rgb8(data: &[u8], h: usize, w: usize) -> Image {
    Array3::from_shape_fn((3, h, w), |(c, y, x)| data[(y * w + x) * 3 + c] as f32 / 255.0)
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (_, h, w) = img.dim();
    let file = std::fs::File::create(path)?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::ImageDecode(format!("png header: {e}")))?;
    writer
        .write_image_data(&to_rgb8(img))
        .map_err(|e| Error::ImageDecode(format!("png data: {e}")))?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::ImageDecode(format!("png info: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::ImageDecode(format!("png frame: {e}")))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::ImageDecode(format!(
            "expected 8-bit RGB, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(from_rgb8(&buf[..w * h * 3], h, w))
}

/// Assemble a rows x cols grid of equally sized images with 1px separators.
pub fn montage(rows: &[Vec<Image>]) -> Result<Image> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Precondition("montage needs at least one image".into()));
    }
    let (_, h, w) = rows[0][0].dim();
    let n_rows = rows.len();
    let n_cols = rows.iter().map(|r| r.len()).max().unwrap();
    let gh = n_rows * h + (n_rows - 1);
    let gw = n_cols * w + (n_cols - 1);
    let mut grid = Array3::from_elem((3, gh, gw), 1.0f32);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let y0 = ri * (h + 1);
            let x0 = ci * (w + 1);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        grid[[c, y0 + y, x0 + x]] = img[[c, y, x]];
                    }
                }
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_at_8bit() {
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c * 31 + y * 8 + x) % 256) as f32 / 255.0
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        // values chosen on the 8-bit grid roundtrip exactly
        assert_eq!(img, back);
    }

    #[test]
    fn montage_dimensions() {
        let img = Array3::from_elem((3, 4, 4), 0.5);
        let grid = montage(&[vec![img.clone(), img.clone()], vec![img.clone()]]).unwrap();
        assert_eq!(grid.dim(), (3, 9, 9));
    }
}
