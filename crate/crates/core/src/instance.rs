//! Instance candidates from class probability maps, and the classical
//! baseline segmenter (forest mask, distance-transform peaks, competitive
//! growing).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::features::box_sum_replicated;
use crate::forest::{extract_pixel_features, predict_semantic, ForestModel};
use crate::labelsynth::{competitive_region_growing, synthesize_three_class_mask, GrowConfig, GrowPriority};
use crate::raster::{
    connected_components, dilate, disk_offsets, distance_transform, erode, gray_plane, Connectivity, Grid,
    InstanceLabelMap, PixelClass, ProbabilityMap, RasterImage, SemanticMask,
};

/// Background / interior / contour scores of every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbMaps {
    pub background: ProbabilityMap,
    pub interior: ProbabilityMap,
    pub contour: ProbabilityMap,
    /// True when the three maps sum to one at every pixel.
    pub normalized: bool,
}

impl ClassProbMaps {
    pub fn new(
        background: ProbabilityMap,
        interior: ProbabilityMap,
        contour: ProbabilityMap,
        normalized: bool,
    ) -> Result<Self> {
        background.ensure_same_dims(&interior)?;
        background.ensure_same_dims(&contour)?;
        for m in [&background, &interior, &contour] {
            m.check_unit_range()?;
        }
        Ok(Self {
            background,
            interior,
            contour,
            normalized,
        })
    }

    /// All pixels background with probability one.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            background: Grid::filled(width, height, 1.0),
            interior: Grid::new(width, height),
            contour: Grid::new(width, height),
            normalized: true,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.background.dims()
    }

    /// Maps in `[background, interior, contour]` order.
    pub fn channels(&self) -> [&ProbabilityMap; 3] {
        [&self.background, &self.interior, &self.contour]
    }

    pub fn from_channels(channels: Vec<ProbabilityMap>, normalized: bool) -> Result<Self> {
        let [b, i, c]: [ProbabilityMap; 3] = channels
            .try_into()
            .map_err(|v: Vec<_>| Error::InvalidInput(format!("expected 3 channels, got {}", v.len())))?;
        Self::new(b, i, c, normalized)
    }
}

/// Pixelwise weighted mean of several class maps.
pub fn fuse_probability_maps(maps: &[ClassProbMaps], weights: &[f64]) -> Result<ClassProbMaps> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("need at least one map to fuse".into()))?;
    if weights.len() != maps.len() {
        return Err(Error::InvalidInput(format!(
            "{} maps but {} weights",
            maps.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("weights must not all be zero".into()));
    }
    for m in &maps[1..] {
        if m.dims() != first.dims() {
            return Err(Error::dims(first.dims(), m.dims()));
        }
    }
    let (w, h) = first.dims();
    let fuse = |pick: fn(&ClassProbMaps) -> &ProbabilityMap| {
        let data = (0..w * h)
            .map(|i| {
                let s: f64 = maps
                    .iter()
                    .zip(weights)
                    .map(|(m, &wt)| wt * pick(m).as_slice()[i] as f64)
                    .sum();
                (s / total) as f32
            })
            .collect();
        Grid::from_vec(w, h, data).expect("same dims")
    };
    Ok(ClassProbMaps {
        background: fuse(|m| &m.background),
        interior: fuse(|m| &m.interior),
        contour: fuse(|m| &m.contour),
        normalized: maps.iter().all(|m| m.normalized),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: u32,
    pub area: usize,
    /// Inclusive `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
    /// Mean pixel coordinate `[x, y]`.
    pub centroid: [f64; 2],
}

/// Instance map plus one record per id present in it.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub instances: InstanceLabelMap,
    pub records: Vec<CandidateRecord>,
}

impl CandidateSet {
    pub fn from_labels(instances: InstanceLabelMap) -> Self {
        let mut acc: BTreeMap<u32, (usize, [usize; 4], f64, f64)> = BTreeMap::new();
        let (w, _) = instances.dims();
        for (i, &l) in instances.as_slice().iter().enumerate() {
            if l == 0 {
                continue;
            }
            let (x, y) = (i % w, i / w);
            let e = acc.entry(l).or_insert((0, [x, y, x, y], 0.0, 0.0));
            e.0 += 1;
            e.1 = [e.1[0].min(x), e.1[1].min(y), e.1[2].max(x), e.1[3].max(y)];
            e.2 += x as f64;
            e.3 += y as f64;
        }
        let records = acc
            .into_iter()
            .map(|(id, (area, bbox, sx, sy))| CandidateRecord {
                id,
                area,
                bbox,
                centroid: [sx / area as f64, sy / area as f64],
            })
            .collect();
        Self { instances, records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.id).collect()
    }

    /// Keeps the candidates for which `keep` holds, zeroing the others in
    /// the label map. Ids are not renumbered.
    pub fn retain(&self, mut keep: impl FnMut(&CandidateRecord) -> bool) -> Self {
        let kept: std::collections::HashSet<u32> =
            self.records.iter().filter(|r| keep(r)).map(|r| r.id).collect();
        let instances = self.instances.map(|&l| if kept.contains(&l) { l } else { 0 });
        let records = self
            .records
            .iter()
            .filter(|r| kept.contains(&r.id))
            .copied()
            .collect();
        Self { instances, records }
    }

    /// Checks that the records describe the label map exactly.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::from_labels(self.instances.clone());
        if fresh.records != self.records {
            return Err(Error::InvalidInput(
                "candidate records do not match the label map".into(),
            ));
        }
        Ok(())
    }

    pub fn records_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }
}

/// Renumbers ids to `1..=n` in increasing order of the old ids.
fn compact_ids(labels: &InstanceLabelMap) -> InstanceLabelMap {
    let remap: BTreeMap<u32, u32> = labels
        .ids()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i as u32 + 1))
        .collect();
    labels.map(|&l| if l == 0 { 0 } else { remap[&l] })
}

/// Instances from three-class maps.
///
/// Markers are the 4-connected components of
/// `interior >= t && contour < t` holding at least `min_area` pixels, numbered
/// in raster order of their first pixel. They are grown by geodesic
/// competitive growing over `interior + contour >= t`.
pub fn instances_from_three_class(maps: &ClassProbMaps, interior_thresh: f64, min_area: usize) -> Result<CandidateSet> {
    if !(0.0..=1.0).contains(&interior_thresh) {
        return Err(Error::InvalidInput(format!(
            "interior threshold {interior_thresh} outside [0, 1]"
        )));
    }
    let (w, h) = maps.dims();
    let t = interior_thresh as f32;
    let zip = |f: fn(f32, f32, f32) -> bool| -> SemanticMask {
        let data = maps
            .interior
            .as_slice()
            .iter()
            .zip(maps.contour.as_slice())
            .map(|(&i, &c)| f(i, c, t))
            .collect();
        Grid::from_vec(w, h, data).expect("same dims")
    };
    let marker_mask = zip(|i, c, t| i >= t && c < t);
    let fg = zip(|i, c, t| i + c >= t);

    let (components, n) = connected_components(&marker_mask, Connectivity::Four);
    let mut area = vec![0usize; n as usize + 1];
    for &l in components.as_slice() {
        area[l as usize] += 1;
    }
    let markers = compact_ids(&components.map(|&l| if l != 0 && area[l as usize] >= min_area { l } else { 0 }));
    let grown = competitive_region_growing(
        &markers,
        &fg,
        &Grid::new(w, h),
        &GrowConfig {
            connectivity: Connectivity::Eight,
            seed_disk_radius: 0,
            priority: GrowPriority::GeodesicDistance,
        },
    )?;
    Ok(CandidateSet::from_labels(grown.labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Forest vote fraction at which a pixel is foreground.
    pub rf_threshold: f64,
    /// Radius of the opening and closing applied to the forest mask.
    pub smooth_radius: usize,
    /// Minimum distance between two markers, in pixels.
    pub min_peak_dist: usize,
    /// Minimum distance-to-background of a marker, in pixels.
    pub min_peak_height: f64,
    /// Weight of stain darkness, `255 − smoothed gray`, added to the
    /// distance-to-background when ranking marker pixels.
    pub darkness_weight: f64,
    /// Prominence a marker needs over the saddle to any higher marker, in
    /// score units.
    pub min_peak_prominence: f64,
    /// Radius of the box filter smoothing the gray level.
    pub darkness_radius: usize,
    /// Marker disks have radius `seed_fraction × peak height`.
    pub seed_fraction: f64,
    pub min_area: usize,
    pub connectivity: Connectivity,
    /// Contour band width used when exporting class maps.
    pub contour_thickness: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            rf_threshold: 0.5,
            smooth_radius: 1,
            min_peak_dist: 7,
            min_peak_height: 2.0,
            darkness_weight: 3.0,
            min_peak_prominence: 10.0,
            darkness_radius: 2,
            seed_fraction: 0.5,
            min_area: 20,
            connectivity: Connectivity::Eight,
            contour_thickness: 4,
        }
    }
}

/// Marker pixels `(x, y, score)` chosen on a score map.
///
/// Candidates are the regional maxima of the positive-score pixels
/// (8-connected) whose prominence is at least `min_prominence`: starting from
/// the peak, the score must drop by that much before a higher peak can be
/// reached. The highest peak of each connected region always qualifies.
/// Candidates are then accepted in order of decreasing score (ties by row,
/// then column) unless an accepted marker lies closer than `min_dist`.
pub fn find_peaks(score: &ProbabilityMap, min_dist: usize, min_prominence: f64) -> Vec<(usize, usize, f32)> {
    let (w, _) = score.dims();
    let s = score.as_slice();
    let mut order: Vec<usize> = (0..s.len()).filter(|&i| s[i] > 0.0).collect();
    // Descending score, then raster order; a pixel's rank is its position.
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut rank = vec![u32::MAX; s.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r as u32;
    }

    // Union-find over ranks. A component's root is its highest pixel, since
    // the absorbing component is always the one whose peak ranks first.
    let mut parent: Vec<u32> = (0..order.len() as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    let mut is_peak = vec![false; order.len()];
    let mut kept = vec![false; order.len()];
    for (r, &i) in order.iter().enumerate() {
        let r = r as u32;
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let mut roots: Vec<u32> = Vec::new();
        for &(dx, dy) in Connectivity::Eight.offsets() {
            let (nx, ny) = (x + dx as i64, y + dy as i64);
            if score.get_signed(nx, ny).is_some() {
                let j = ny as usize * w + nx as usize;
                if rank[j] < r {
                    let root = find(&mut parent, rank[j]);
                    if !roots.contains(&root) {
                        roots.push(root);
                    }
                }
            }
        }
        if roots.is_empty() {
            is_peak[r as usize] = true;
            continue;
        }
        // The component with the highest peak (lowest rank) absorbs the rest.
        roots.sort_unstable();
        let winner = roots[0];
        for &loser in &roots[1..] {
            if (s[order[loser as usize]] - s[i]) as f64 >= min_prominence {
                kept[loser as usize] = true;
            }
            parent[loser as usize] = winner;
        }
        parent[r as usize] = winner;
    }
    for r in 0..order.len() {
        if is_peak[r] && find(&mut parent, r as u32) == r as u32 {
            kept[r] = true;
        }
    }

    let md2 = (min_dist * min_dist) as i64;
    let mut out: Vec<(usize, usize, f32)> = Vec::new();
    for (r, &i) in order.iter().enumerate() {
        if !kept[r] {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let clear = out.iter().all(|p| {
            let (dx, dy) = (p.0 as i64 - x as i64, p.1 as i64 - y as i64);
            dx * dx + dy * dy >= md2
        });
        if clear {
            out.push((x, y, s[i]));
        }
    }
    out
}

/// Distance-to-background plus weighted stain darkness; zero wherever the
/// distance is below `min_peak_height`.
fn marker_score(image: &RasterImage, dist: &ProbabilityMap, cfg: &BaselineConfig) -> ProbabilityMap {
    let (w, h) = image.dims();
    let gray: Vec<u32> = gray_plane(image).as_slice().iter().map(|&g| g as u32).collect();
    let r = cfg.darkness_radius;
    let sums = box_sum_replicated(&gray, w, h, r);
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let data = dist
        .as_slice()
        .iter()
        .zip(&sums)
        .map(|(&d, &s)| {
            if (d as f64) < cfg.min_peak_height || d <= 0.0 {
                0.0
            } else {
                let darkness = 255.0 - s as f64 / n;
                (d as f64 + cfg.darkness_weight * darkness) as f32
            }
        })
        .collect();
    Grid::from_vec(w, h, data).expect("same dims")
}

/// Opening then closing with a disk, removing specks and pinholes.
fn smooth_mask(mask: &SemanticMask, radius: usize) -> SemanticMask {
    if radius == 0 {
        return mask.clone();
    }
    let opened = dilate(&erode(mask, radius), radius);
    erode(&dilate(&opened, radius), radius)
}

/// Baseline output with the intermediate forest probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutput {
    pub candidates: CandidateSet,
    pub foreground: SemanticMask,
    pub probability: ProbabilityMap,
}

pub fn baseline_segment(image: &RasterImage, rf: &ForestModel, cfg: &BaselineConfig) -> Result<CandidateSet> {
    Ok(baseline_segment_detailed(image, rf, cfg)?.candidates)
}

pub fn baseline_segment_detailed(image: &RasterImage, rf: &ForestModel, cfg: &BaselineConfig) -> Result<BaselineOutput> {
    rf.validate()?;
    let features = extract_pixel_features(image, rf.params.window_radius)?;
    let (raw, probability) = predict_semantic(rf, &features, cfg.rf_threshold);
    let foreground = smooth_mask(&raw, cfg.smooth_radius);
    let dist = distance_transform(&foreground);
    let score = marker_score(image, &dist, cfg);
    let peaks = find_peaks(&score, cfg.min_peak_dist, cfg.min_peak_prominence);

    let (w, h) = image.dims();
    let mut seeds: InstanceLabelMap = Grid::new(w, h);
    // Higher-ranked peaks are stamped last so they keep contested pixels.
    for (k, &(px, py, _)) in peaks.iter().enumerate().rev() {
        let r = (cfg.seed_fraction * *dist.get(px, py) as f64).floor() as usize;
        for (dx, dy) in disk_offsets(r) {
            let (x, y) = (px as i64 + dx as i64, py as i64 + dy as i64);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                seeds.set(x as usize, y as usize, k as u32 + 1);
            }
        }
    }
    let grown = competitive_region_growing(
        &seeds,
        &foreground,
        &gray_plane(image),
        &GrowConfig {
            connectivity: cfg.connectivity,
            seed_disk_radius: 0,
            priority: GrowPriority::GeodesicDistance,
        },
    )?;
    let mut area: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in grown.labels.as_slice() {
        if l != 0 {
            *area.entry(l).or_default() += 1;
        }
    }
    let kept = grown.labels.map(|&l| if l != 0 && area[&l] >= cfg.min_area { l } else { 0 });
    Ok(BaselineOutput {
        candidates: CandidateSet::from_labels(compact_ids(&kept)),
        foreground,
        probability,
    })
}

/// Class maps describing a segmentation.
///
/// A labelled pixel gets `q = (1 + p) / 2` on its class (interior, or contour
/// when within the contour band between touching instances) and `1 − q` on
/// background, where `p` is the forest vote fraction. Unlabelled pixels are
/// background with probability one.
pub fn class_probs_from_instances(
    instances: &InstanceLabelMap,
    probability: &ProbabilityMap,
    contour_thickness: usize,
) -> Result<ClassProbMaps> {
    instances.ensure_same_dims(probability)?;
    let classes = synthesize_three_class_mask(instances, contour_thickness)?;
    let (w, h) = instances.dims();
    let mut out = ClassProbMaps::empty(w, h);
    for (i, (&c, &p)) in classes.as_slice().iter().zip(probability.as_slice()).enumerate() {
        let q = 0.5 + 0.5 * p.clamp(0.0, 1.0);
        match c {
            PixelClass::Background => continue,
            PixelClass::Interior => out.interior.as_mut_slice()[i] = q,
            PixelClass::Contour => out.contour.as_mut_slice()[i] = q,
        }
        out.background.as_mut_slice()[i] = 1.0 - q;
    }
    Ok(out)
}

/// Baseline segmentation expressed as class maps, for tiled processing.
pub fn baseline_class_probs(image: &RasterImage, rf: &ForestModel, cfg: &BaselineConfig) -> Result<ClassProbMaps> {
    let out = baseline_segment_detailed(image, rf, cfg)?;
    class_probs_from_instances(&out.candidates.instances, &out.probability, cfg.contour_thickness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn maps_from(interior: Vec<f32>, contour: Vec<f32>, w: usize, h: usize) -> ClassProbMaps {
        let bg = interior
            .iter()
            .zip(&contour)
            .map(|(&i, &c)| (1.0 - i - c).max(0.0))
            .collect();
        ClassProbMaps::new(
            Grid::from_vec(w, h, bg).unwrap(),
            Grid::from_vec(w, h, interior).unwrap(),
            Grid::from_vec(w, h, contour).unwrap(),
            false,
        )
        .unwrap()
    }

    #[test]
    fn all_background_gives_no_candidates() {
        let c = instances_from_three_class(&ClassProbMaps::empty(20, 20), 0.5, 20).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn blob_without_contour_is_one_instance() {
        let (w, h) = (30, 30);
        let mut interior = vec![0.0; w * h];
        for y in 5..20 {
            for x in 8..25 {
                interior[y * w + x] = 0.9;
            }
        }
        let m = maps_from(interior.clone(), vec![0.0; w * h], w, h);
        let c = instances_from_three_class(&m, 0.5, 20).unwrap();
        assert_eq!(c.len(), 1);
        for (i, &v) in interior.iter().enumerate() {
            assert_eq!(c.instances.as_slice()[i] != 0, v >= 0.5);
        }
    }

    #[test]
    fn ridge_splits_touching_cells() {
        // Two 10-wide cells side by side with a contour ridge at x = 9..=10.
        let (w, h) = (20, 12);
        let mut interior = vec![0.0; w * h];
        let mut contour = vec![0.0; w * h];
        for y in 1..11 {
            for x in 0..w {
                if x == 9 || x == 10 {
                    contour[y * w + x] = 0.8;
                    interior[y * w + x] = 0.2;
                } else {
                    interior[y * w + x] = 0.9;
                }
            }
        }
        let c = instances_from_three_class(&maps_from(interior, contour, w, h), 0.5, 20).unwrap();
        assert_eq!(c.len(), 2);
        for y in 1..11 {
            for x in 0..9 {
                assert_eq!(*c.instances.get(x, y), 1);
                assert_eq!(*c.instances.get(x + 11, y), 2);
            }
        }
        // The ridge is split between both sides.
        assert!((1..11).all(|y| *c.instances.get(9, y) == 1 && *c.instances.get(10, y) == 2));
    }

    #[test]
    fn small_markers_are_dropped() {
        let (w, h) = (20, 20);
        let mut interior = vec![0.0; w * h];
        for y in 2..5 {
            for x in 2..5 {
                interior[y * w + x] = 1.0;
            }
        }
        let m = maps_from(interior, vec![0.0; w * h], w, h);
        assert!(instances_from_three_class(&m, 0.5, 20).unwrap().is_empty());
        assert_eq!(instances_from_three_class(&m, 0.5, 9).unwrap().len(), 1);
    }

    #[test]
    fn fuse_identity_and_mean() {
        let a = maps_from(vec![0.2, 0.8], vec![0.1, 0.1], 2, 1);
        let b = maps_from(vec![0.6, 0.0], vec![0.3, 0.5], 2, 1);
        assert_eq!(fuse_probability_maps(std::slice::from_ref(&a), &[1.0]).unwrap(), a);
        assert_eq!(fuse_probability_maps(&[a.clone(), a.clone()], &[1.0, 3.0]).unwrap(), a);
        let f = fuse_probability_maps(&[a.clone(), b.clone()], &[1.0, 1.0]).unwrap();
        let g = fuse_probability_maps(&[b, a], &[1.0, 1.0]).unwrap();
        assert_eq!(f, g);
        assert!((f.interior.as_slice()[0] - 0.4).abs() < 1e-7);
        assert!(fuse_probability_maps(&[], &[]).is_err());
        assert!(fuse_probability_maps(std::slice::from_ref(&f), &[0.0]).is_err());
    }

    #[test]
    fn peaks_respect_separation() {
        let mut m: SemanticMask = Grid::new(40, 20);
        for y in 2..18 {
            for x in 2..38 {
                m.set(x, y, true);
            }
        }
        let d = distance_transform(&m);
        let peaks = find_peaks(&d, 7, 2.0);
        assert!(!peaks.is_empty());
        for (i, a) in peaks.iter().enumerate() {
            for b in &peaks[i + 1..] {
                let (dx, dy) = (a.0 as i64 - b.0 as i64, a.1 as i64 - b.1 as i64);
                assert!(dx * dx + dy * dy >= 49);
            }
        }
    }

    #[test]
    fn peak_prominence_decides_splits() {
        // Two bumps of heights 50 and 40 joined by a saddle at 35.
        let row = [1.0f32, 20.0, 50.0, 45.0, 35.0, 38.0, 40.0, 30.0, 20.0, 10.0, 5.0, 1.0];
        let g = Grid::from_vec(row.len(), 1, row.to_vec()).unwrap();
        let both = find_peaks(&g, 3, 5.0);
        assert_eq!(both.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 6]);
        // The lower bump only rises 5 above the saddle.
        assert_eq!(find_peaks(&g, 3, 5.5).len(), 1);
        // Too close for the separation rule.
        assert_eq!(find_peaks(&g, 5, 1.0).len(), 1);
        // Separate regions each keep their maximum.
        let split = Grid::from_vec(5, 1, vec![3.0f32, 4.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(find_peaks(&split, 1, 100.0).len(), 2);
    }

    #[test]
    fn class_probs_round_trip_through_instances() {
        let mut labels: InstanceLabelMap = Grid::new(40, 20);
        for y in 3..17 {
            for x in 3..20 {
                labels.set(x, y, 1);
            }
            for x in 20..37 {
                labels.set(x, y, 2);
            }
        }
        let p: ProbabilityMap = Grid::filled(40, 20, 0.9);
        let maps = class_probs_from_instances(&labels, &p, 4).unwrap();
        let c = instances_from_three_class(&maps, 0.5, 20).unwrap();
        // Labelled pixels keep their ids; the contour band may also claim a
        // few background pixels where it meets the outer border.
        let classes = synthesize_three_class_mask(&labels, 4).unwrap();
        for i in 0..labels.len() {
            let (a, b) = (labels.as_slice()[i], c.instances.as_slice()[i]);
            if a != 0 {
                assert_eq!(a, b);
            } else if b != 0 {
                assert_eq!(classes.as_slice()[i], PixelClass::Contour);
            }
        }
    }

    proptest! {
        #[test]
        fn fuse_matches_weighted_mean(
            vals in proptest::collection::vec(proptest::collection::vec(0.0f32..=1.0, 12), 3),
            weights in proptest::collection::vec(0.01f64..5.0, 3),
        ) {
            let maps: Vec<_> = vals
                .iter()
                .map(|v| {
                    let g = Grid::from_vec(4, 3, v.clone()).unwrap();
                    ClassProbMaps::new(g.clone(), g.clone(), g, false).unwrap()
                })
                .collect();
            let f = fuse_probability_maps(&maps, &weights).unwrap();
            let total: f64 = weights.iter().sum();
            for i in 0..12 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += weights[k] * vals[k][i] as f64;
                }
                let want = s / total;
                prop_assert!((f.interior.as_slice()[i] as f64 - want).abs() <= 1e-9 + f32::EPSILON as f64 * want);
            }
        }

        #[test]
        fn instances_contain_markers(cells in proptest::collection::vec((0usize..40, 0usize..40, 2usize..8), 1..6)) {
            let (w, h) = (40, 40);
            let mut interior = vec![0.0f32; w * h];
            let mut contour = vec![0.0f32; w * h];
            for &(cx, cy, r) in &cells {
                for (dx, dy) in disk_offsets(r) {
                    let (x, y) = (cx as i64 + dx as i64, cy as i64 + dy as i64);
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        let i = y as usize * w + x as usize;
                        if dx * dx + dy * dy >= ((r - 1) * (r - 1)) as i32 {
                            contour[i] = 0.7;
                        } else {
                            interior[i] = 0.8;
                        }
                    }
                }
            }
            let m = maps_from(interior.clone(), contour.clone(), w, h);
            let c = instances_from_three_class(&m, 0.5, 5).unwrap();
            let marker: Vec<bool> = interior.iter().zip(&contour).map(|(&i, &c)| i >= 0.5 && c < 0.5).collect();
            let (_, n_markers) = connected_components(&Grid::from_vec(w, h, marker.clone()).unwrap(), Connectivity::Four);
            prop_assert!(c.len() <= n_markers as usize);
            for r in &c.records {
                prop_assert!(r.area >= 5);
                let has_marker = c.instances.as_slice().iter().zip(&marker).any(|(&l, &mk)| l == r.id && mk);
                prop_assert!(has_marker);
            }
            c.validate().unwrap();
        }
    }
}
