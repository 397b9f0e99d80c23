use super::{Grid, RasterImage};
use crate::error::Result;

/// Converts an RGB image into three 8-bit planes `H, S, V` (interleaved).
///
/// Hue in `[0°, 360°)` is mapped onto `[0, 255]` as `round(h / 360 * 255)`,
/// saturation is `round(255 * (max - min) / max)` and value is `max`. Grays
/// (`max == min`) get hue 0. All rounding is half-up and computed in exact
/// integer arithmetic.
pub fn rgb_to_hsv(image: &RasterImage) -> Result<RasterImage> {
    image.require_rgb()?;
    let samples = image
        .samples()
        .chunks_exact(3)
        .flat_map(|p| hsv_pixel(p[0], p[1], p[2]))
        .collect();
    RasterImage::new(image.width(), image.height(), 3, samples)
}

#[inline]
pub(crate) fn hsv_pixel(r: u8, g: u8, b: u8) -> [u8; 3] {
    let (r, g, b) = (r as i32, g as i32, b as i32);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta == 0 {
        return [0, 0, max as u8];
    }
    // Hue as a fraction num / (6 * delta) of the full circle.
    let num = if max == r {
        let n = g - b;
        if n < 0 {
            n + 6 * delta
        } else {
            n
        }
    } else if max == g {
        2 * delta + b - r
    } else {
        4 * delta + r - g
    };
    let h = (510 * num + 6 * delta) / (12 * delta);
    let s = (510 * delta + max) / (2 * max);
    [h as u8, s as u8, max as u8]
}

/// Per-pixel gray level `round((R + G + B) / 3)`; gray images pass through.
pub fn gray_plane(image: &RasterImage) -> Grid<u8> {
    let data = if image.channels() == 1 {
        image.samples().to_vec()
    } else {
        image
            .samples()
            .chunks_exact(3)
            .map(|p| ((2 * (p[0] as u32 + p[1] as u32 + p[2] as u32) + 3) / 6) as u8)
            .collect()
    };
    Grid {
        width: image.width(),
        height: image.height(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook conversion (as in Python's `colorsys`) in floating point,
    /// followed by half-up rounding. The 1e-9 bias only matters at exact
    /// ties, whose float representation may land a hair below `.5`; real
    /// values are at least 1/3060 away from any tie.
    fn oracle(r: u8, g: u8, b: u8) -> [u8; 3] {
        let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
        let maxc = r.max(g).max(b);
        let minc = r.min(g).min(b);
        let v = maxc;
        if minc == maxc {
            return [0, 0, (v * 255.0).round() as u8];
        }
        let s = (maxc - minc) / maxc;
        let rc = (maxc - r) / (maxc - minc);
        let gc = (maxc - g) / (maxc - minc);
        let bc = (maxc - b) / (maxc - minc);
        let h = if r == maxc {
            bc - gc
        } else if g == maxc {
            2.0 + rc - bc
        } else {
            4.0 + gc - rc
        };
        let h = (h / 6.0).rem_euclid(1.0);
        let q = |x: f64| (x * 255.0 + 0.5 + 1e-9).floor() as u8;
        [q(h), q(s), q(v)]
    }

    #[test]
    fn pure_red_and_gray() {
        assert_eq!(hsv_pixel(255, 0, 0), [0, 255, 255]);
        assert_eq!(hsv_pixel(128, 128, 128), [0, 0, 128]);
        assert_eq!(hsv_pixel(0, 0, 0), [0, 0, 0]);
    }

    #[test]
    fn matches_textbook_oracle_on_every_rgb_triple() {
        for r in 0..=255u8 {
            for g in 0..=255u8 {
                for b in 0..=255u8 {
                    assert_eq!(hsv_pixel(r, g, b), oracle(r, g, b), "rgb=({r},{g},{b})");
                }
            }
        }
    }

    #[test]
    fn rejects_gray_input() {
        let img = RasterImage::new(2, 2, 1, vec![0; 4]).unwrap();
        assert!(rgb_to_hsv(&img).is_err());
    }

    #[test]
    fn gray_rounds_half_up() {
        let img = RasterImage::new(2, 1, 3, vec![1, 0, 0, 1, 1, 0]).unwrap();
        // 1/3 -> 0, 2/3 -> 1
        assert_eq!(gray_plane(&img).as_slice(), &[0, 1]);
    }
}
