use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::{rgb_to_hsv, Grid, RasterImage};

/// Per-pixel classifier input: HSV planes plus a local mean intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PixelFeatures {
    pub h: u8,
    pub s: u8,
    pub v: u8,
    pub local_intensity: u8,
}

impl PixelFeatures {
    pub const COUNT: usize = 4;

    pub fn new(h: u8, s: u8, v: u8, local_intensity: u8) -> Self {
        Self {
            h,
            s,
            v,
            local_intensity,
        }
    }

    /// Feature by index in `h, s, v, local_intensity` order.
    #[inline]
    pub fn get(&self, index: usize) -> u8 {
        match index {
            0 => self.h,
            1 => self.s,
            2 => self.v,
            3 => self.local_intensity,
            _ => panic!("feature index {index} out of range"),
        }
    }
}

pub type FeaturePlanes = Grid<PixelFeatures>;

/// Computes [`PixelFeatures`] for every pixel of an RGB image.
///
/// `local_intensity` is the mean of the gray level `(R + G + B) / 3` over the
/// `(2r + 1)²` window centred on the pixel, with edge pixels replicated
/// outside the image, rounded half-up.
pub fn extract_pixel_features(image: &RasterImage, window_radius: usize) -> Result<FeaturePlanes> {
    let hsv = rgb_to_hsv(image)?;
    let (w, h) = image.dims();
    let rgb_sum: Vec<u32> = image
        .samples()
        .chunks_exact(3)
        .map(|p| p[0] as u32 + p[1] as u32 + p[2] as u32)
        .collect();
    let sums = box_sum_replicated(&rgb_sum, w, h, window_radius);
    let n = ((2 * window_radius + 1) * (2 * window_radius + 1)) as u64;

    let data = hsv
        .samples()
        .chunks_exact(3)
        .zip(&sums)
        .map(|(p, &s)| {
            let li = (2 * s + 3 * n) / (6 * n);
            PixelFeatures::new(p[0], p[1], p[2], li as u8)
        })
        .collect();
    Grid::from_vec(w, h, data)
}

/// Separable window sum with clamp-to-edge addressing.
pub(crate) fn box_sum_replicated(values: &[u32], w: usize, h: usize, r: usize) -> Vec<u64> {
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut horiz = vec![0u64; w * h];
    for y in 0..h {
        let row = &values[y * w..(y + 1) * w];
        let mut acc: u64 = (-(r as i64)..=r as i64)
            .map(|dx| row[clamp(dx, w)] as u64)
            .sum();
        for x in 0..w {
            horiz[y * w + x] = acc;
            let leaving = row[clamp(x as i64 - r as i64, w)] as u64;
            let entering = row[clamp(x as i64 + r as i64 + 1, w)] as u64;
            acc = acc + entering - leaving;
        }
    }
    let mut out = vec![0u64; w * h];
    for x in 0..w {
        let mut acc: u64 = (-(r as i64)..=r as i64)
            .map(|dy| horiz[clamp(dy, h) * w + x])
            .sum();
        for y in 0..h {
            out[y * w + x] = acc;
            let leaving = horiz[clamp(y as i64 - r as i64, h) * w + x];
            let entering = horiz[clamp(y as i64 + r as i64 + 1, h) * w + x];
            acc = acc + entering - leaving;
        }
    }
    out
}
