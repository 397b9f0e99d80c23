//! Overlapping window extraction and weighted reassembly.
//!
//! Large images are cut into square windows at a fixed stride. The last
//! window on each axis is shifted back so it ends exactly at the image edge,
//! so no padding is ever invented. Per-window predictions are blended back
//! with a separable weight map that fades towards the window border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, ProbabilityMap, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileOrigin {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    /// Shift the final window so it ends at the image border.
    #[default]
    ClampLast,
}

/// Window origins covering an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub stride: usize,
    pub edge_policy: EdgePolicy,
    /// Row-major: all origins of the first tile row, then the next.
    pub positions: Vec<TileOrigin>,
}

impl TilingPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn x_origins(&self) -> Vec<usize> {
        axis_origins(self.width, self.window, self.stride)
    }

    pub fn y_origins(&self) -> Vec<usize> {
        axis_origins(self.height, self.window, self.stride)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn axis_origins(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + window <= dim)
        .collect();
    let last = dim - window;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Plans `window × window` tiles at `stride` over a `width × height` image.
pub fn plan_tiling(width: usize, height: usize, window: usize, stride: usize) -> Result<TilingPlan> {
    if window == 0 || window > width.min(height) {
        return Err(Error::Planning(format!(
            "window {window} does not fit a {width}x{height} image"
        )));
    }
    if stride == 0 || stride > window {
        return Err(Error::Planning(format!(
            "stride {stride} must be in 1..={window}"
        )));
    }
    let xs = axis_origins(width, window, stride);
    let ys = axis_origins(height, window, stride);
    let positions = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| TileOrigin { x, y }))
        .collect();
    Ok(TilingPlan {
        width,
        height,
        window,
        stride,
        edge_policy: EdgePolicy::ClampLast,
        positions,
    })
}

/// Exact crops of `image` at every plan position.
pub fn extract_patches(image: &RasterImage, plan: &TilingPlan) -> Result<Vec<(TileOrigin, RasterImage)>> {
    check_plan_dims(plan, image.dims())?;
    plan.positions
        .iter()
        .map(|&o| Ok((o, image.crop(o.x, o.y, plan.window, plan.window)?)))
        .collect()
}

/// [`extract_patches`] for single-channel grids.
pub fn extract_grid_patches<T: Clone + Default>(
    grid: &Grid<T>,
    plan: &TilingPlan,
) -> Result<Vec<(TileOrigin, Grid<T>)>> {
    check_plan_dims(plan, grid.dims())?;
    plan.positions
        .iter()
        .map(|&o| Ok((o, grid.crop(o.x, o.y, plan.window, plan.window)?)))
        .collect()
}

fn check_plan_dims(plan: &TilingPlan, dims: (usize, usize)) -> Result<()> {
    if (plan.width, plan.height) != dims {
        return Err(Error::dims((plan.width, plan.height), dims));
    }
    Ok(())
}

/// Separable blending weights for one window.
///
/// Along each axis the weight rises linearly from `min_weight` on the
/// outermost pixel to 1 at `overlap` pixels from the edge and stays at 1
/// inside; the 2-D weight is the product of the two axis weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMap {
    pub window: usize,
    pub overlap: usize,
    pub min_weight: f64,
    axis: Vec<f64>,
}

impl WeightMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.axis[x] * self.axis[y]
    }

    pub fn axis_profile(&self) -> &[f64] {
        &self.axis
    }

    pub fn to_grid(&self) -> Grid<f64> {
        let n = self.window;
        let data = (0..n * n).map(|i| self.at(i % n, i / n)).collect();
        Grid::from_vec(n, n, data).expect("square window")
    }
}

pub fn make_weight_map(window: usize, overlap: usize, min_weight: f64) -> Result<WeightMap> {
    if window == 0 || overlap >= window {
        return Err(Error::InvalidInput(format!(
            "overlap {overlap} must be below window {window}"
        )));
    }
    if !(min_weight > 0.0 && min_weight <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "min_weight {min_weight} must be in (0, 1]"
        )));
    }
    let axis = (0..window)
        .map(|i| {
            let d = i.min(window - 1 - i);
            if d < overlap {
                min_weight + (1.0 - min_weight) * d as f64 / overlap as f64
            } else {
                1.0
            }
        })
        .collect();
    Ok(WeightMap {
        window,
        overlap,
        min_weight,
        axis,
    })
}

/// Streaming weighted accumulator for one or more aligned channels.
///
/// Sums `w · v` and `w` per pixel in double precision; [`Stitcher::finish`]
/// divides once and rounds to `f32`.
pub struct Stitcher {
    width: usize,
    height: usize,
    window: usize,
    weights: WeightMap,
    numerators: Vec<Vec<f64>>,
    denominator: Vec<f64>,
}

impl Stitcher {
    pub fn new(plan: &TilingPlan, weights: &WeightMap, channels: usize) -> Result<Self> {
        if weights.window != plan.window {
            return Err(Error::Assembly(format!(
                "weight map window {} != plan window {}",
                weights.window, plan.window
            )));
        }
        let n = plan.width * plan.height;
        Ok(Self {
            width: plan.width,
            height: plan.height,
            window: plan.window,
            weights: weights.clone(),
            numerators: vec![vec![0.0; n]; channels],
            denominator: vec![0.0; n],
        })
    }

    /// Adds one window's channels, all of size `window × window`.
    pub fn add(&mut self, origin: TileOrigin, channels: &[&ProbabilityMap]) -> Result<()> {
        if channels.len() != self.numerators.len() {
            return Err(Error::Assembly(format!(
                "{} channels given, {} expected",
                channels.len(),
                self.numerators.len()
            )));
        }
        let n = self.window;
        if origin.x + n > self.width || origin.y + n > self.height {
            return Err(Error::Assembly(format!(
                "window at ({}, {}) exceeds {}x{}",
                origin.x, origin.y, self.width, self.height
            )));
        }
        for c in channels {
            if c.dims() != (n, n) {
                return Err(Error::dims((n, n), c.dims()));
            }
        }
        for ty in 0..n {
            let row = (origin.y + ty) * self.width + origin.x;
            for tx in 0..n {
                let w = self.weights.at(tx, ty);
                self.denominator[row + tx] += w;
                for (num, patch) in self.numerators.iter_mut().zip(channels) {
                    num[row + tx] += w * *patch.get(tx, ty) as f64;
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Vec<ProbabilityMap>> {
        if let Some(i) = self.denominator.iter().position(|&d| d <= 0.0) {
            return Err(Error::Assembly(format!(
                "pixel ({}, {}) is not covered by any window",
                i % self.width,
                i / self.width
            )));
        }
        let (w, h) = (self.width, self.height);
        let den = self.denominator;
        self.numerators
            .into_iter()
            .map(|num| {
                let data = num.iter().zip(&den).map(|(n, d)| (n / d) as f32).collect();
                Grid::from_vec(w, h, data)
            })
            .collect()
    }
}

/// Blends per-window maps into a full-size map: each output pixel is the
/// weighted mean `Σ w·v / Σ w` over the windows covering it.
pub fn assemble(
    patches: &[(TileOrigin, ProbabilityMap)],
    plan: &TilingPlan,
    weights: &WeightMap,
) -> Result<ProbabilityMap> {
    let mut s = Stitcher::new(plan, weights, 1)?;
    for (origin, patch) in patches {
        s.add(*origin, &[patch])?;
    }
    Ok(s.finish()?.pop().expect("one channel"))
}
