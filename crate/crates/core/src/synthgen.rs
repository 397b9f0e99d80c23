//! Synthetic neuron-like scenes with exact ground truth.
//!
//! Cells are rotated ellipses stained brown on a pale background. Each new
//! cell is placed beneath the ones already drawn and only claims pixels that
//! are still free, so earlier cells are never modified. A placement is kept
//! when the new cell keeps at least `min_visible` of its ellipse area, its
//! center pixel, and a single connected visible region. Otherwise it is
//! retried, and after `max_retries` failed attempts the cell is skipped and
//! counted.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labelsynth::{PointAnnotation, PointAnnotationSet};
use crate::raster::io::write_label_png;
use crate::raster::{connected_components, io::write_image, Connectivity, Grid, InstanceLabelMap, RasterImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Density {
    Sparse,
    Dense,
    VeryDense,
}

impl Density {
    pub const ALL: [Density; 3] = [Density::Sparse, Density::Dense, Density::VeryDense];

    pub fn name(self) -> &'static str {
        match self {
            Density::Sparse => "sparse",
            Density::Dense => "dense",
            Density::VeryDense => "very-dense",
        }
    }
}

impl std::str::FromStr for Density {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Density::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown density '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_cells: usize,
    /// Semi-major axis range in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Ellipse eccentricity range, each in `[0, 1)`.
    pub eccentricity_min: f64,
    pub eccentricity_max: f64,
    /// Chance that a cell is placed against an existing one.
    pub touch_probability: f64,
    pub cell_color: [u8; 3],
    /// Per-cell standard deviation of the stain color.
    pub cell_color_sigma: f64,
    pub background_color: [u8; 3],
    pub background_color_sigma: f64,
    /// Gaussian point-spread blur applied before noise; 0 disables it.
    pub blur_sigma: f64,
    /// Per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Faint small blobs that are not cells.
    pub debris: usize,
    pub min_visible: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            n_cells: 20,
            radius_min: 6.0,
            radius_max: 10.0,
            eccentricity_min: 0.0,
            eccentricity_max: 0.7,
            touch_probability: 0.1,
            cell_color: [135, 85, 50],
            cell_color_sigma: 8.0,
            background_color: [228, 218, 205],
            background_color_sigma: 4.0,
            blur_sigma: 1.5,
            noise_sigma: 6.0,
            debris: 0,
            min_visible: 0.5,
            max_retries: 50,
            seed: 0,
        }
    }
}

impl SceneConfig {
    /// Cell counts scale with image area, relative to a 256×256 scene.
    pub fn preset(density: Density, width: usize, height: usize, seed: u64) -> Self {
        let scale = (width * height) as f64 / (256.0 * 256.0);
        let (cells, touch, debris) = match density {
            Density::Sparse => (18.0, 0.05, 4.0),
            Density::Dense => (45.0, 0.35, 6.0),
            Density::VeryDense => (80.0, 0.7, 8.0),
        };
        Self {
            width,
            height,
            n_cells: (cells * scale).round() as usize,
            touch_probability: touch,
            debris: (debris * scale).round() as usize,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("scene config: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("image must be at least 1x1");
        }
        if !(self.radius_min >= 1.0 && self.radius_min <= self.radius_max) {
            return bad("radius range must satisfy 1 <= min <= max");
        }
        if !(0.0 <= self.eccentricity_min
            && self.eccentricity_min <= self.eccentricity_max
            && self.eccentricity_max < 1.0)
        {
            return bad("eccentricity range must satisfy 0 <= min <= max < 1");
        }
        if !(0.0..=1.0).contains(&self.touch_probability) {
            return bad("touch_probability must be in [0, 1]");
        }
        if !(0.5..=1.0).contains(&self.min_visible) {
            return bad("min_visible must be in [0.5, 1]");
        }
        for s in [
            self.cell_color_sigma,
            self.background_color_sigma,
            self.blur_sigma,
            self.noise_sigma,
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad("standard deviations must be finite and non-negative");
            }
        }
        Ok(())
    }
}

/// Ellipse with an integer center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: i64,
    pub cy: i64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Squared normalized radius of a pixel center; inside when `<= 1`.
    pub fn rho2(&self, x: i64, y: i64) -> f64 {
        let (dx, dy) = ((x - self.cx) as f64, (y - self.cy) as f64);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    /// Pixel bounding box `(x0, y0, x1, y1)`, inclusive.
    pub fn bbox(&self) -> (i64, i64, i64, i64) {
        let (s, c) = self.angle.sin_cos();
        let hx = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt().ceil() as i64;
        let hy = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt().ceil() as i64;
        (self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy)
    }

    pub fn pixels(&self) -> Vec<(i64, i64)> {
        let (x0, y0, x1, y1) = self.bbox();
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                if self.rho2(x, y) <= 1.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RasterImage,
    pub labels: InstanceLabelMap,
    pub centroids: PointAnnotationSet,
    /// Ellipse of each placed cell, index `id - 1`.
    pub cells: Vec<Ellipse>,
    /// Cells dropped after exhausting placement retries.
    pub skipped: usize,
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let mut labels: InstanceLabelMap = Grid::new(w, h);
    let mut cells: Vec<Ellipse> = Vec::new();
    let mut skipped = 0;

    for _ in 0..cfg.n_cells {
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let e = propose(cfg, &cells, &mut rng);
            if let Some(px) = accept(cfg, &labels, &e) {
                placed = Some((e, px));
                break;
            }
        }
        match placed {
            Some((e, px)) => {
                cells.push(e);
                let id = cells.len() as u32;
                for (x, y) in px {
                    labels.set(x, y, id);
                }
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("scene seed {}: skipped {skipped} of {} cells", cfg.seed, cfg.n_cells);
    }

    let image = render(cfg, &labels, &cells, &mut rng);
    let points = cells
        .iter()
        .enumerate()
        .map(|(i, e)| PointAnnotation {
            id: i as u32 + 1,
            x: e.cx as u32,
            y: e.cy as u32,
        })
        .collect();
    Ok(Scene {
        image,
        labels,
        centroids: PointAnnotationSet::new(w, h, points)?,
        cells,
        skipped,
    })
}

fn propose(cfg: &SceneConfig, cells: &[Ellipse], rng: &mut ChaCha8Rng) -> Ellipse {
    let a = rng.random_range(cfg.radius_min..=cfg.radius_max);
    let ecc = rng.random_range(cfg.eccentricity_min..=cfg.eccentricity_max);
    let b = (a * (1.0 - ecc * ecc).sqrt()).max(1.0);
    let angle = rng.random_range(0.0..PI);
    let (cx, cy) = if !cells.is_empty() && rng.random_bool(cfg.touch_probability) {
        let other = cells[rng.random_range(0..cells.len())];
        let reach = (other.a + other.b) / 2.0 + (a + b) / 2.0;
        let d = reach * rng.random_range(0.75..0.95);
        let theta = rng.random_range(0.0..2.0 * PI);
        (
            (other.cx as f64 + d * theta.cos()).round() as i64,
            (other.cy as f64 + d * theta.sin()).round() as i64,
        )
    } else {
        (
            rng.random_range(0..cfg.width as i64),
            rng.random_range(0..cfg.height as i64),
        )
    };
    Ellipse { cx, cy, a, b, angle }
}

/// Visible pixels of `e` when the placement is acceptable.
fn accept(cfg: &SceneConfig, labels: &InstanceLabelMap, e: &Ellipse) -> Option<Vec<(usize, usize)>> {
    let (x0, y0, x1, y1) = e.bbox();
    if x0 < 1 || y0 < 1 || x1 >= cfg.width as i64 - 1 || y1 >= cfg.height as i64 - 1 {
        return None;
    }
    if *labels.get(e.cx as usize, e.cy as usize) != 0 {
        return None;
    }
    let all = e.pixels();
    let free: Vec<(usize, usize)> = all
        .iter()
        .map(|&(x, y)| (x as usize, y as usize))
        .filter(|&(x, y)| *labels.get(x, y) == 0)
        .collect();
    if (free.len() as f64) < cfg.min_visible * all.len() as f64 {
        return None;
    }
    // Single 4-connected visible region.
    let (bw, bh) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let mut local = Grid::<bool>::new(bw, bh);
    for &(x, y) in &free {
        local.set(x - x0 as usize, y - y0 as usize, true);
    }
    let (_, n) = connected_components(&local, Connectivity::Four);
    (n == 1).then_some(free)
}

fn render(cfg: &SceneConfig, labels: &InstanceLabelMap, cells: &[Ellipse], rng: &mut ChaCha8Rng) -> RasterImage {
    let (w, h) = (cfg.width, cfg.height);
    let jitter = |rng: &mut ChaCha8Rng, base: [u8; 3], sigma: f64| -> [f64; 3] {
        let shift = if sigma > 0.0 {
            Normal::new(0.0, sigma).expect("valid sigma").sample(rng)
        } else {
            0.0
        };
        base.map(|c| c as f64 + shift)
    };
    let bg = jitter(rng, cfg.background_color, cfg.background_color_sigma);
    let mut plane = vec![bg; w * h];

    let blend = |dst: &mut [f64; 3], src: [f64; 3], alpha: f64| {
        for k in 0..3 {
            dst[k] = dst[k] * (1.0 - alpha) + src[k] * alpha;
        }
    };

    for _ in 0..cfg.debris {
        let r = rng.random_range(1.5..3.5);
        let e = Ellipse {
            cx: rng.random_range(0..w as i64),
            cy: rng.random_range(0..h as i64),
            a: r,
            b: r,
            angle: 0.0,
        };
        let strength = rng.random_range(0.2..0.35);
        for (x, y) in e.pixels() {
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                let i = y as usize * w + x as usize;
                if labels.as_slice()[i] == 0 {
                    blend(&mut plane[i], cfg.cell_color.map(f64::from), strength);
                }
            }
        }
    }

    for (i, e) in cells.iter().enumerate() {
        let id = i as u32 + 1;
        let color = jitter(rng, cfg.cell_color, cfg.cell_color_sigma);
        let (x0, y0, x1, y1) = e.bbox();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (ux, uy) = (x as usize, y as usize);
                if *labels.get(ux, uy) != id {
                    continue;
                }
                let rho2 = e.rho2(x, y);
                // Darker core fading toward the rim.
                let alpha = 1.0 - 0.35 * rho2;
                blend(&mut plane[uy * w + ux], color, alpha);
            }
        }
    }

    if cfg.blur_sigma > 0.0 {
        plane = gaussian_blur(&plane, w, h, cfg.blur_sigma);
    }

    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("valid sigma"));
    let mut samples = Vec::with_capacity(w * h * 3);
    for px in &plane {
        for &c in px {
            let n = noise.map_or(0.0, |d| d.sample(rng));
            samples.push((c + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    RasterImage::new(w, h, 3, samples).expect("rendered buffer matches dims")
}

/// Separable Gaussian blur with edge replication, kernel radius `ceil(3σ)`.
fn gaussian_blur(plane: &[[f64; 3]], w: usize, h: usize, sigma: f64) -> Vec<[f64; 3]> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (k, &wk) in kernel.iter().enumerate() {
                    let d = k as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + d).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + d).clamp(0, h as i64 - 1) as usize)
                    };
                    let px = src[sy * w + sx];
                    for c in 0..3 {
                        acc[c] += wk * px[c];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub dir: String,
    pub config: SceneConfig,
    pub n_cells: usize,
    pub skipped: usize,
    /// File name to hex SHA-256 digest.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub scenes: Vec<ManifestEntry>,
}

pub const SCENE_FILES: [&str; 3] = ["image.png", "labels.png", "centroids.csv"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes one scene per `(config, seed)` pair, seeds varying fastest, into
/// `out_dir/scene_<k>/`, followed by `out_dir/manifest.json`.
pub fn generate_dataset(configs: &[SceneConfig], seeds: &[u64], out_dir: &Path) -> Result<DatasetManifest> {
    let jobs: Vec<SceneConfig> = configs
        .iter()
        .flat_map(|c| {
            seeds.iter().map(move |&seed| SceneConfig {
                seed,
                ..c.clone()
            })
        })
        .collect();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let scenes: Vec<ManifestEntry> = jobs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| {
            let scene = generate_scene(&config)?;
            let dir_name = format!("scene_{index}");
            let dir = out_dir.join(&dir_name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            write_image(&dir.join("image.png"), &scene.image)?;
            write_label_png(&dir.join("labels.png"), &scene.labels)?;
            scene.centroids.write_csv(&dir.join("centroids.csv"))?;
            let mut checksums = BTreeMap::new();
            for f in SCENE_FILES {
                checksums.insert(f.to_string(), sha256_file(&dir.join(f))?);
            }
            Ok(ManifestEntry {
                index,
                dir: dir_name,
                config,
                n_cells: scene.cells.len(),
                skipped: scene.skipped,
                checksums,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        format: "neuseg-dataset".into(),
        version: 1,
        scenes,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Re-hashes every listed file; returns the paths whose digest differs.
pub fn verify_manifest(manifest: &DatasetManifest, out_dir: &Path) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for s in &manifest.scenes {
        for (file, digest) in &s.checksums {
            let rel = format!("{}/{}", s.dir, file);
            if sha256_file(&out_dir.join(&rel))? != *digest {
                bad.push(rel);
            }
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn zero_cells_gives_blank_scene() {
        let cfg = SceneConfig {
            n_cells: 0,
            debris: 0,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg).unwrap();
        assert!(s.labels.ids().is_empty());
        assert!(s.centroids.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::preset(Density::Dense, 128, 128, 7);
        assert_eq!(generate_scene(&cfg).unwrap(), generate_scene(&cfg).unwrap());
        let other = SceneConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate_scene(&cfg).unwrap().image, generate_scene(&other).unwrap().image);
    }

    #[test]
    fn ground_truth_invariants() {
        for d in Density::ALL {
            for seed in 0..3 {
                let cfg = SceneConfig::preset(d, 192, 160, seed);
                let s = generate_scene(&cfg).unwrap();
                let ids = s.labels.ids();
                let pts: BTreeSet<u32> = s.centroids.points().iter().map(|p| p.id).collect();
                assert_eq!(ids, pts);
                assert_eq!(ids.len() + s.skipped, cfg.n_cells);
                for p in s.centroids.points() {
                    assert_eq!(*s.labels.get(p.x as usize, p.y as usize), p.id);
                }
                let mut area = vec![0usize; s.cells.len() + 1];
                for &v in s.labels.as_slice() {
                    area[v as usize] += 1;
                }
                for (i, e) in s.cells.iter().enumerate() {
                    let full = e.pixels().len();
                    assert!(area[i + 1] as f64 >= 0.5 * full as f64);
                    assert!(area[i + 1] <= full);
                }
            }
        }
    }

    #[test]
    fn density_presets_are_ordered() {
        let n = |d| generate_scene(&SceneConfig::preset(d, 256, 256, 1)).unwrap().cells.len();
        assert!(n(Density::Sparse) < n(Density::Dense));
        assert!(n(Density::Dense) < n(Density::VeryDense));
    }

    #[test]
    fn dataset_manifest_matches_files() {
        let dir = tempfile::tempdir().unwrap();
        let configs: Vec<_> = Density::ALL
            .iter()
            .map(|&d| SceneConfig::preset(d, 64, 64, 0))
            .collect();
        let m = generate_dataset(&configs, &[1, 2], dir.path()).unwrap();
        assert_eq!(m.scenes.len(), 6);
        assert!(verify_manifest(&m, dir.path()).unwrap().is_empty());
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, m);
        fs::write(dir.path().join("scene_3/centroids.csv"), "id,x,y\n").unwrap();
        assert_eq!(verify_manifest(&m, dir.path()).unwrap(), vec!["scene_3/centroids.csv"]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = SceneConfig::default();
        for bad in [
            SceneConfig { radius_min: 5.0, radius_max: 4.0, ..base.clone() },
            SceneConfig { eccentricity_max: 1.0, ..base.clone() },
            SceneConfig { min_visible: 0.4, ..base.clone() },
            SceneConfig { width: 0, ..base.clone() },
        ] {
            assert!(generate_scene(&bad).is_err());
        }
    }
}
