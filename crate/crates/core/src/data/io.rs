//! Image and label-map files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Grid, LabelMap};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Reads any PNG/PNM as RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut g = Grid::zeros(3, h, w);
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            g.data[c * n + p] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(g)
}

/// Reads a single-channel 8-bit label map. Palette PNGs yield their raw
/// indices; other formats must be 8-bit greyscale.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = png::Decoder::new(BufReader::new(file))
            .read_info()
            .map_err(|e| image_err(path, e))?;
        let size = reader.output_buffer_size().ok_or_else(|| image_err(path, "image too large"))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
        let ok = matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed)
            && info.bit_depth == png::BitDepth::Eight;
        if !ok {
            return Err(image_err(
                path,
                format!(
                    "label maps must be 8-bit greyscale or indexed, got {:?} {:?}",
                    info.color_type, info.bit_depth
                ),
            ));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h);
        for row in buf.chunks(info.line_size).take(h) {
            data.extend_from_slice(&row[..w]);
        }
        return LabelMap::from_vec(h, w, data);
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if img.color() != image::ColorType::L8 {
        return Err(image_err(path, format!("label maps must be 8-bit greyscale, got {:?}", img.color())));
    }
    let g = img.to_luma8();
    LabelMap::from_vec(g.height() as usize, g.width() as usize, g.into_raw())
}

/// Writes an RGB (or single-channel) grid in `[0, 1]` as PNG.
pub fn write_image(path: &Path, g: &Grid) -> Result<()> {
    let (h, w) = (g.height, g.width);
    let n = h * w;
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (color, bytes) = match g.channels {
        1 => (png::ColorType::Grayscale, g.data.iter().map(|&v| to_u8(v)).collect::<Vec<_>>()),
        3 => {
            let mut b = Vec::with_capacity(3 * n);
            for p in 0..n {
                for c in 0..3 {
                    b.push(to_u8(g.data[c * n + p]));
                }
            }
            (png::ColorType::Rgb, b)
        }
        c => return Err(Error::InvalidArgument(format!("cannot write a {c}-channel image"))),
    };
    encode(path, w, h, color, None, &bytes)
}

/// Writes a label map as an indexed PNG with the given palette.
pub fn write_labels(path: &Path, y: &LabelMap, palette: &[[u8; 3]]) -> Result<()> {
    let mut pal = vec![0u8; 256 * 3];
    for (i, c) in palette.iter().take(256).enumerate() {
        pal[i * 3..i * 3 + 3].copy_from_slice(c);
    }
    encode(path, y.width, y.height, png::ColorType::Indexed, Some(pal), &y.data)
}

fn encode(path: &Path, w: usize, h: usize, color: png::ColorType, palette: Option<Vec<u8>>, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Distinct colours for up to 8 classes, then a repeating ramp. Index 255
/// (ignore) is white.
pub fn default_palette() -> Vec<[u8; 3]> {
    let base: [[u8; 3]; 8] = [
        [40, 40, 40],
        [230, 60, 60],
        [60, 200, 80],
        [70, 110, 230],
        [235, 200, 50],
        [200, 80, 210],
        [60, 210, 210],
        [240, 140, 40],
    ];
    let mut p: Vec<[u8; 3]> = (0..256)
        .map(|i| if i < 8 { base[i] } else { [(i * 37 % 256) as u8, (i * 91 % 256) as u8, (i * 53 % 256) as u8] })
        .collect();
    p[255] = [255, 255, 255];
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let y = LabelMap::from_vec(3, 5, (0..15).map(|i| if i == 7 { 255 } else { (i % 4) as u8 }).collect()).unwrap();
        let p = dir.path().join("y.png");
        write_labels(&p, &y, &default_palette()).unwrap();
        assert_eq!(read_labels(&p).unwrap(), y);
    }

    #[test]
    fn image_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::from_vec(3, 2, 2, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let p = dir.path().join("x.png");
        write_image(&p, &g).unwrap();
        assert!(read_image(&p).unwrap().max_abs_diff(&g) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn rgb_png_is_not_a_label_map() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_image(&p, &Grid::zeros(3, 2, 2)).unwrap();
        assert!(read_labels(&p).is_err());
    }
}
