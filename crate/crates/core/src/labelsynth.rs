//! Pixel-level label synthesis from point annotations.
//!
//! Point annotations are stamped as seed disks, grown competitively over the
//! classifier's foreground mask, and the resulting instances are turned into
//! background / interior / contour training masks.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{
    disk_offsets, Connectivity, Grid, InstanceLabelMap, PixelClass, RasterImage, SemanticMask,
    ThreeClassMask,
};

/// One expert-marked cell centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub id: u32,
    pub x: u32,
    pub y: u32,
}

/// Centroid annotations of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointAnnotationSet {
    width: usize,
    height: usize,
    points: Vec<PointAnnotation>,
}

impl PointAnnotationSet {
    /// Validates that ids are positive and unique and every point lies inside
    /// the `width × height` image.
    pub fn new(width: usize, height: usize, points: Vec<PointAnnotation>) -> Result<Self> {
        let mut seen = HashSet::new();
        for p in &points {
            if p.id == 0 {
                return Err(Error::InvalidInput("point id 0 is reserved".into()));
            }
            if !seen.insert(p.id) {
                return Err(Error::InvalidInput(format!("duplicate point id {}", p.id)));
            }
            if p.x as usize >= width || p.y as usize >= height {
                return Err(Error::InvalidInput(format!(
                    "point {} at ({}, {}) outside {width}x{height}",
                    p.id, p.x, p.y
                )));
            }
        }
        Ok(Self {
            width,
            height,
            points,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            points: Vec::new(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn points(&self) -> &[PointAnnotation] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads an `id,x,y` CSV. The image size must be supplied by the caller.
    pub fn read_csv(path: &Path, width: usize, height: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let points = r
            .deserialize()
            .collect::<std::result::Result<Vec<PointAnnotation>, _>>()?;
        Self::new(width, height, points)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.points.is_empty() {
            w.write_record(["id", "x", "y"])?;
        }
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Stamps every point as a filled disk of its id.
///
/// Disks are clipped to the image; where disks overlap the point listed
/// later wins.
pub fn rasterize_point_labels(points: &PointAnnotationSet, radius: usize) -> InstanceLabelMap {
    let (w, h) = points.dims();
    let mut out: InstanceLabelMap = Grid::new(w, h);
    let offsets = disk_offsets(radius);
    for p in points.points() {
        for &(dx, dy) in &offsets {
            let x = p.x as i64 + dx as i64;
            let y = p.y as i64 + dy as i64;
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                out.set(x as usize, y as usize, p.id);
            }
        }
    }
    out
}

/// Cost used to order competitive growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowPriority {
    /// Path length (in steps) from the seed disk.
    #[default]
    GeodesicDistance,
    /// Largest `|gray − mean seed gray|` met along the path.
    IntensityDelta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowConfig {
    pub connectivity: Connectivity,
    pub seed_disk_radius: usize,
    pub priority: GrowPriority,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            seed_disk_radius: 5,
            priority: GrowPriority::GeodesicDistance,
        }
    }
}

/// Result of [`competitive_region_growing`].
#[derive(Debug, Clone, PartialEq)]
pub struct GrowOutcome {
    pub labels: InstanceLabelMap,
    /// Seed ids that had no pixel on the foreground and were not grown.
    pub dropped_seeds: Vec<u32>,
}

impl GrowOutcome {
    /// True when no seed reached the foreground (all-zero output).
    pub fn no_seeds_on_foreground(&self) -> bool {
        self.labels.as_slice().iter().all(|&l| l == 0)
    }
}

/// Grows all seed regions simultaneously over `constraint`.
///
/// Seed pixels on background are discarded first; the remaining seed pixels
/// keep their ids. A single priority queue ordered by
/// `(cost, id, y, x)` then hands every reachable foreground pixel to the
/// region that reaches it at the lowest cost, lower ids winning ties.
/// Background pixels are never labelled.
pub fn competitive_region_growing(
    seeds: &InstanceLabelMap,
    constraint: &SemanticMask,
    intensity: &Grid<u8>,
    config: &GrowConfig,
) -> Result<GrowOutcome> {
    seeds.ensure_same_dims(constraint)?;
    seeds.ensure_same_dims(intensity)?;
    let (w, h) = seeds.dims();
    let fg = constraint.as_slice();

    let clipped: Vec<u32> = seeds
        .as_slice()
        .iter()
        .zip(fg)
        .map(|(&l, &f)| if f { l } else { 0 })
        .collect();

    let all_ids = seeds.ids();
    let mut gray_sum: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for (i, &l) in clipped.iter().enumerate() {
        if l != 0 {
            let e = gray_sum.entry(l).or_default();
            e.0 += intensity.as_slice()[i] as u64;
            e.1 += 1;
        }
    }
    let dropped_seeds: Vec<u32> = all_ids
        .iter()
        .copied()
        .filter(|id| !gray_sum.contains_key(id))
        .collect();
    if !dropped_seeds.is_empty() {
        log::warn!(
            "{} seed(s) lie entirely on background and were dropped",
            dropped_seeds.len()
        );
    }
    if gray_sum.is_empty() {
        log::warn!("no seeds on foreground; returning an empty label map");
    }
    let mean_gray: BTreeMap<u32, f64> = gray_sum
        .into_iter()
        .map(|(id, (s, n))| (id, s as f64 / n as f64))
        .collect();

    let mut labels = vec![0u32; w * h];
    let mut done = vec![false; w * h];
    // Costs are non-negative finite floats, whose bit patterns sort like
    // the values themselves.
    let mut heap: BinaryHeap<Reverse<(u64, u32, u32, u32)>> = BinaryHeap::new();
    for (i, &l) in clipped.iter().enumerate() {
        if l != 0 {
            heap.push(Reverse((0f64.to_bits(), l, (i / w) as u32, (i % w) as u32)));
        }
    }

    let offsets = config.connectivity.offsets();
    while let Some(Reverse((cost_bits, id, y, x))) = heap.pop() {
        let i = y as usize * w + x as usize;
        if done[i] {
            continue;
        }
        done[i] = true;
        labels[i] = id;
        let cost = f64::from_bits(cost_bits);
        let seed_gray = match config.priority {
            GrowPriority::IntensityDelta => mean_gray[&id],
            GrowPriority::GeodesicDistance => 0.0,
        };
        for &(dx, dy) in offsets {
            let nx = x as i64 + dx as i64;
            let ny = y as i64 + dy as i64;
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if done[j] || !fg[j] || clipped[j] != 0 {
                continue;
            }
            let next = match config.priority {
                GrowPriority::GeodesicDistance => cost + 1.0,
                GrowPriority::IntensityDelta => {
                    let delta = (intensity.as_slice()[j] as f64 - seed_gray).abs();
                    cost.max(delta)
                }
            };
            heap.push(Reverse((next.to_bits(), id, ny as u32, nx as u32)));
        }
    }

    Ok(GrowOutcome {
        labels: Grid::from_vec(w, h, labels)?,
        dropped_seeds,
    })
}

/// Builds a three-class mask from an instance map.
///
/// An interface is an edge between 4-adjacent pixels carrying two different
/// non-zero labels. A pixel is `Contour` when its centre lies within
/// `ceil(thickness / 2) − ½` of the midpoint of some interface edge, which
/// yields a band `2 · ceil(thickness / 2)` pixels wide centred on the
/// interface. Borders against background are not contours. Remaining
/// labelled pixels are `Interior`; everything else is `Background`.
pub fn synthesize_three_class_mask(
    instances: &InstanceLabelMap,
    border_thickness: usize,
) -> Result<ThreeClassMask> {
    if border_thickness == 0 {
        return Err(Error::InvalidInput("border thickness must be >= 1".into()));
    }
    let (w, h) = instances.dims();
    let half = border_thickness.div_ceil(2) as i64;
    // Work in doubled coordinates so edge midpoints are integers.
    let reach = 2 * half - 1;
    let reach2 = reach * reach;
    let mut contour = vec![false; w * h];

    let mut stamp = |mx: i64, my: i64| {
        let x_lo = ((mx - reach + 1).div_euclid(2)).max(0);
        let x_hi = ((mx + reach).div_euclid(2)).min(w as i64 - 1);
        let y_lo = ((my - reach + 1).div_euclid(2)).max(0);
        let y_hi = ((my + reach).div_euclid(2)).min(h as i64 - 1);
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let (dx, dy) = (2 * px - mx, 2 * py - my);
                if dx * dx + dy * dy <= reach2 {
                    contour[py as usize * w + px as usize] = true;
                }
            }
        }
    };

    let l = instances.as_slice();
    for y in 0..h {
        for x in 0..w {
            let a = l[y * w + x];
            if a == 0 {
                continue;
            }
            if x + 1 < w {
                let b = l[y * w + x + 1];
                if b != 0 && b != a {
                    stamp(2 * x as i64 + 1, 2 * y as i64);
                }
            }
            if y + 1 < h {
                let b = l[(y + 1) * w + x];
                if b != 0 && b != a {
                    stamp(2 * x as i64, 2 * y as i64 + 1);
                }
            }
        }
    }

    let classes = l
        .iter()
        .zip(&contour)
        .map(|(&lab, &c)| {
            if c {
                PixelClass::Contour
            } else if lab != 0 {
                PixelClass::Interior
            } else {
                PixelClass::Background
            }
        })
        .collect();
    Grid::from_vec(w, h, classes)
}

/// True for labelled pixels with a 4-neighbour (or the image outside)
/// carrying a different label.
pub fn instance_boundary(instances: &InstanceLabelMap) -> SemanticMask {
    let (w, h) = instances.dims();
    let mut out: SemanticMask = Grid::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let l = *instances.get(x, y);
            if l == 0 {
                continue;
            }
            let edge = Connectivity::Four.offsets().iter().any(|&(dx, dy)| {
                instances
                    .get_signed(x as i64 + dx as i64, y as i64 + dy as i64)
                    .is_none_or(|&n| n != l)
            });
            if edge {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Paints the 1-px boundary of every instance onto an RGB copy of `image`.
pub fn overlay_contours(
    image: &RasterImage,
    instances: &InstanceLabelMap,
    color: [u8; 3],
) -> Result<RasterImage> {
    if image.dims() != instances.dims() {
        return Err(Error::dims(image.dims(), instances.dims()));
    }
    let mut out = image.to_rgb();
    let boundary = instance_boundary(instances);
    for y in 0..image.height() {
        for x in 0..image.width() {
            if *boundary.get(x, y) {
                out.pixel_mut(x, y).copy_from_slice(&color);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn pts(w: usize, h: usize, p: &[(u32, u32, u32)]) -> PointAnnotationSet {
        PointAnnotationSet::new(
            w,
            h,
            p.iter().map(|&(id, x, y)| PointAnnotation { id, x, y }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn radius_zero_labels_one_pixel() {
        let m = rasterize_point_labels(&pts(8, 8, &[(3, 2, 5)]), 0);
        assert_eq!(m.as_slice().iter().filter(|&&l| l != 0).count(), 1);
        assert_eq!(*m.get(2, 5), 3);
    }

    #[test]
    fn radius_five_disk_has_81_pixels() {
        // Lattice points with dx² + dy² ≤ 25, counted directly.
        let expected = (-5i32..=5)
            .flat_map(|dy| (-5i32..=5).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= 25)
            .count();
        assert_eq!(expected, 81);
        let m = rasterize_point_labels(&pts(32, 32, &[(1, 10, 10)]), 5);
        assert_eq!(m.as_slice().iter().filter(|&&l| l == 1).count(), 81);
    }

    #[test]
    fn distant_points_keep_their_ids() {
        let m = rasterize_point_labels(&pts(200, 40, &[(4, 20, 20), (9, 120, 20)]), 5);
        assert_eq!(m.ids().into_iter().collect::<Vec<_>>(), vec![4, 9]);
        assert_eq!(m.as_slice().iter().filter(|&&l| l == 4).count(), 81);
        assert_eq!(m.as_slice().iter().filter(|&&l| l == 9).count(), 81);
    }

    #[test]
    fn annotation_validation() {
        assert!(PointAnnotationSet::new(4, 4, vec![PointAnnotation { id: 1, x: 4, y: 0 }]).is_err());
        let dup = vec![
            PointAnnotation { id: 1, x: 0, y: 0 },
            PointAnnotation { id: 1, x: 1, y: 1 },
        ];
        assert!(PointAnnotationSet::new(4, 4, dup).is_err());
    }

    fn blob_mask(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> SemanticMask {
        let mut m: SemanticMask = Grid::new(w, h);
        for &(x0, y0, rw, rh) in rects {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    #[test]
    fn single_seed_fills_its_blob_only() {
        let mask = blob_mask(40, 20, &[(2, 2, 12, 10), (20, 2, 10, 10)]);
        let seeds = rasterize_point_labels(&pts(40, 20, &[(7, 6, 6)]), 1);
        let gray = Grid::new(40, 20);
        let out =
            competitive_region_growing(&seeds, &mask, &gray, &GrowConfig::default()).unwrap();
        for y in 0..20 {
            for x in 0..40 {
                let expect = if x < 14 && *mask.get(x, y) { 7 } else { 0 };
                assert_eq!(*out.labels.get(x, y), expect, "({x},{y})");
            }
        }
        assert!(out.dropped_seeds.is_empty());
    }

    #[test]
    fn seeds_off_foreground_are_dropped() {
        let mask = blob_mask(10, 10, &[(0, 0, 3, 3)]);
        let seeds = rasterize_point_labels(&pts(10, 10, &[(5, 8, 8)]), 0);
        let out = competitive_region_growing(&seeds, &mask, &Grid::new(10, 10), &GrowConfig::default())
            .unwrap();
        assert_eq!(out.dropped_seeds, vec![5]);
        assert!(out.no_seeds_on_foreground());
    }

    /// Per-seed BFS over the foreground, then argmin of `(distance, id)`.
    fn geodesic_voronoi(seeds: &InstanceLabelMap, mask: &SemanticMask, conn: Connectivity) -> Vec<u32> {
        let (w, h) = mask.dims();
        let mut best = vec![(u32::MAX, 0u32); w * h];
        for id in seeds.ids() {
            let mut dist = vec![u32::MAX; w * h];
            let mut q = VecDeque::new();
            for i in 0..w * h {
                if seeds.as_slice()[i] == id && mask.as_slice()[i] {
                    dist[i] = 0;
                    q.push_back(i);
                }
            }
            while let Some(i) = q.pop_front() {
                let (x, y) = ((i % w) as i64, (i / w) as i64);
                for &(dx, dy) in conn.offsets() {
                    if let Some(&true) = mask.get_signed(x + dx as i64, y + dy as i64) {
                        let j = (y + dy as i64) as usize * w + (x + dx as i64) as usize;
                        if dist[j] == u32::MAX {
                            dist[j] = dist[i] + 1;
                            q.push_back(j);
                        }
                    }
                }
            }
            for i in 0..w * h {
                if dist[i] != u32::MAX && (dist[i], id) < best[i] {
                    best[i] = (dist[i], id);
                }
            }
        }
        best.into_iter().map(|(_, id)| id).collect()
    }

    #[test]
    fn two_seeds_split_geodesically() {
        let mask = blob_mask(30, 12, &[(0, 0, 30, 12)]);
        let seeds = rasterize_point_labels(&pts(30, 12, &[(2, 5, 6), (1, 22, 6)]), 2);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let cfg = GrowConfig {
                connectivity: conn,
                ..Default::default()
            };
            let out = competitive_region_growing(&seeds, &mask, &Grid::new(30, 12), &cfg).unwrap();
            assert_eq!(out.labels.as_slice(), &geodesic_voronoi(&seeds, &mask, conn)[..]);
        }
    }

    #[test]
    fn intensity_priority_follows_appearance() {
        // Seed 1 sits on a dark strip, seed 2 on a bright strip; a bright
        // pixel next to seed 1 goes to seed 2.
        let (w, h) = (20, 3);
        let mask = Grid::filled(w, h, true);
        let mut gray: Grid<u8> = Grid::new(w, h);
        for x in 10..20 {
            for y in 0..3 {
                gray.set(x, y, 200);
            }
        }
        gray.set(3, 1, 200);
        // Bright corridor along the top row links (3, 1) to seed 2.
        for x in 3..10 {
            gray.set(x, 0, 200);
        }
        let seeds = rasterize_point_labels(&pts(w, h, &[(1, 1, 1), (2, 18, 1)]), 0);
        let cfg = GrowConfig {
            priority: GrowPriority::IntensityDelta,
            ..Default::default()
        };
        let out = competitive_region_growing(&seeds, &mask, &gray, &cfg).unwrap();
        assert_eq!(*out.labels.get(5, 1), 1);
        assert_eq!(*out.labels.get(12, 1), 2);
        assert_eq!(*out.labels.get(3, 1), 2);
    }

    #[test]
    fn single_instance_has_no_contour() {
        let mut m: InstanceLabelMap = Grid::new(10, 10);
        for y in 2..8 {
            for x in 2..8 {
                m.set(x, y, 5);
            }
        }
        let c = synthesize_three_class_mask(&m, 4).unwrap();
        assert!(c.as_slice().iter().all(|&k| k != PixelClass::Contour));
        assert_eq!(*c.get(2, 2), PixelClass::Interior);
        assert_eq!(*c.get(0, 0), PixelClass::Background);
    }

    #[test]
    fn empty_map_is_background() {
        let c = synthesize_three_class_mask(&Grid::new(6, 6), 4).unwrap();
        assert!(c.as_slice().iter().all(|&k| k == PixelClass::Background));
        assert!(synthesize_three_class_mask(&Grid::new(6, 6), 0).is_err());
    }

    #[test]
    fn abutting_rectangles_get_a_four_pixel_band() {
        let mut m: InstanceLabelMap = Grid::new(20, 10);
        for y in 1..9 {
            for x in 2..10 {
                m.set(x, y, 1);
            }
            for x in 10..18 {
                m.set(x, y, 2);
            }
        }
        let c = synthesize_three_class_mask(&m, 4).unwrap();
        for y in 1..9 {
            let band: Vec<usize> = (0..20).filter(|&x| *c.get(x, y) == PixelClass::Contour).collect();
            assert_eq!(band, vec![8, 9, 10, 11], "row {y}");
        }
    }

    #[test]
    fn overlay_paints_the_perimeter() {
        let img = RasterImage::filled_rgb(8, 8, [10, 10, 10]).unwrap();
        assert_eq!(overlay_contours(&img, &Grid::new(8, 8), [255, 0, 0]).unwrap(), img);
        let mut m: InstanceLabelMap = Grid::new(8, 8);
        for y in 2..6 {
            for x in 2..6 {
                m.set(x, y, 1);
            }
        }
        let out = overlay_contours(&img, &m, [255, 0, 0]).unwrap();
        let red = (0..8)
            .flat_map(|y| (0..8).map(move |x| (x, y)))
            .filter(|&(x, y)| out.pixel(x, y) == [255, 0, 0])
            .count();
        assert_eq!(red, 12);
        assert_eq!(out.pixel(3, 3), &[10, 10, 10]);
        assert!(overlay_contours(&img, &Grid::new(4, 4), [0, 0, 0]).is_err());
    }

    #[test]
    fn centroid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let set = pts(50, 50, &[(1, 3, 4), (2, 10, 20)]);
        set.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("id,x,y\n"));
        assert_eq!(PointAnnotationSet::read_csv(&p, 50, 50).unwrap(), set);
        let empty = PointAnnotationSet::empty(5, 5);
        empty.write_csv(&p).unwrap();
        assert!(PointAnnotationSet::read_csv(&p, 5, 5).unwrap().is_empty());
    }
}
