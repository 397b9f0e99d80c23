//! PNG and text encodings for rasters.
//!
//! * Images: 8-bit RGB or gray PNG.
//! * Semantic masks: 8-bit gray PNG, 0 = background, 255 = foreground.
//! * Three-class masks: 8-bit gray PNG holding the class values {0, 1, 2}.
//! * Label maps: 16-bit gray PNG when every id fits in `u16`; otherwise a
//!   run-length text file. The text format is a header line
//!   `rle <width> <height>` followed by one `label x y runlength` line per
//!   horizontal run of a non-zero label, in raster order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use super::{Grid, InstanceLabelMap, PixelClass, RasterImage, SemanticMask, ThreeClassMask};
use crate::error::{Error, Result};

pub fn read_image(path: &Path) -> Result<RasterImage> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        image::DynamicImage::ImageLuma8(g) => RasterImage::new(w, h, 1, g.into_raw()),
        other => RasterImage::new(w, h, 3, other.into_rgb8().into_raw()),
    }
}

pub fn write_image(path: &Path, image: &RasterImage) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let samples = image.samples().to_vec();
    if image.channels() == 3 {
        RgbImage::from_raw(w, h, samples)
            .expect("validated sample count")
            .save(path)?;
    } else {
        GrayImage::from_raw(w, h, samples)
            .expect("validated sample count")
            .save(path)?;
    }
    Ok(())
}

pub fn write_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    let raw = mask.as_slice().iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_gray8(path, mask.width(), mask.height(), raw)
}

/// Reads a gray PNG as a mask; any non-zero sample is foreground.
pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(w, h, img.into_raw().into_iter().map(|v| v != 0).collect())
}

pub fn write_three_class(path: &Path, mask: &ThreeClassMask) -> Result<()> {
    let raw = mask.as_slice().iter().map(|&c| c as u8).collect();
    save_gray8(path, mask.width(), mask.height(), raw)
}

pub fn read_three_class(path: &Path) -> Result<ThreeClassMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| {
            PixelClass::from_u8(v)
                .ok_or_else(|| Error::InvalidInput(format!("class value {v} not in {{0,1,2}}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Grid::from_vec(w, h, data)
}

fn save_gray8(path: &Path, w: usize, h: usize, raw: Vec<u8>) -> Result<()> {
    GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("grid length matches dims")
        .save(path)?;
    Ok(())
}

/// Writes a 16-bit gray PNG. Fails if an id exceeds `u16::MAX`.
pub fn write_label_png(path: &Path, labels: &InstanceLabelMap) -> Result<()> {
    if labels.max_id() > u16::MAX as u32 {
        return Err(Error::InvalidInput(format!(
            "label id {} does not fit a 16-bit PNG",
            labels.max_id()
        )));
    }
    let raw: Vec<u16> = labels.as_slice().iter().map(|&l| l as u16).collect();
    ImageBuffer::<Luma<u16>, _>::from_raw(labels.width() as u32, labels.height() as u32, raw)
        .expect("grid length matches dims")
        .save(path)?;
    Ok(())
}

pub fn read_label_png(path: &Path) -> Result<InstanceLabelMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::from_vec(w, h, img.into_raw().into_iter().map(u32::from).collect())
}

pub fn write_label_rle(path: &Path, labels: &InstanceLabelMap) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(out, "rle {} {}", labels.width(), labels.height()).map_err(io_err)?;
    for (y, row) in labels.rows().enumerate() {
        let mut x = 0;
        while x < row.len() {
            let l = row[x];
            let start = x;
            while x < row.len() && row[x] == l {
                x += 1;
            }
            if l != 0 {
                writeln!(out, "{l} {start} {y} {}", x - start).map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)
}

pub fn read_label_rle(path: &Path) -> Result<InstanceLabelMap> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |msg: String| Error::InvalidInput(format!("{}: {msg}", path.display()));
    let header = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 3 || dims[0] != "rle" {
        return Err(bad(format!("bad header {header:?}")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));
    let (w, h) = (parse(dims[1])?, parse(dims[2])?);
    let mut grid: InstanceLabelMap = Grid::new(w, h);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad(format!("bad run {line:?}")));
        }
        let label = f[0]
            .parse::<u32>()
            .map_err(|_| bad(format!("bad label {:?}", f[0])))?;
        let (x, y, n) = (parse(f[1])?, parse(f[2])?, parse(f[3])?);
        if y >= h || x + n > w {
            return Err(bad(format!("run {line:?} outside {w}x{h}")));
        }
        let start = y * w + x;
        grid.as_mut_slice()[start..start + n].fill(label);
    }
    Ok(grid)
}

/// Writes a label map to `path`, falling back to the run-length sidecar
/// `<path>.rle.txt` when ids exceed 16 bits. Returns the path written.
pub fn save_label_map(path: &Path, labels: &InstanceLabelMap) -> Result<PathBuf> {
    if labels.max_id() <= u16::MAX as u32 && !is_rle_path(path) {
        write_label_png(path, labels)?;
        Ok(path.to_path_buf())
    } else {
        let target = if is_rle_path(path) {
            path.to_path_buf()
        } else {
            let mut s = path.as_os_str().to_owned();
            s.push(".rle.txt");
            PathBuf::from(s)
        };
        write_label_rle(&target, labels)?;
        Ok(target)
    }
}

/// Reads either label encoding, chosen by extension.
pub fn load_label_map(path: &Path) -> Result<InstanceLabelMap> {
    if is_rle_path(path) {
        read_label_rle(path)
    } else {
        read_label_png(path)
    }
}

fn is_rle_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "txt" || e == "rle")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let g = Grid::from_vec(3, 2, vec![0u32, 1, 65535, 7, 7, 0]).unwrap();
        write_label_png(&p, &g).unwrap();
        assert_eq!(read_label_png(&p).unwrap(), g);
    }

    #[test]
    fn large_ids_fall_back_to_rle() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.png");
        let g = Grid::from_vec(4, 2, vec![0u32, 70_000, 70_000, 3, 1, 0, 0, 100_000]).unwrap();
        let written = save_label_map(&p, &g).unwrap();
        assert!(written.to_string_lossy().ends_with(".rle.txt"));
        let text = fs::read_to_string(&written).unwrap();
        assert!(text.starts_with("rle 4 2\n70000 1 0 2\n3 3 0 1\n"));
        assert_eq!(load_label_map(&written).unwrap(), g);
    }

    #[test]
    fn three_class_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let m = Grid::from_vec(
            3,
            1,
            vec![PixelClass::Background, PixelClass::Interior, PixelClass::Contour],
        )
        .unwrap();
        write_three_class(&p, &m).unwrap();
        assert_eq!(read_three_class(&p).unwrap(), m);
    }
}
