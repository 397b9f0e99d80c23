//! Image-level pipeline stages shared by the subcommands.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use neuseg::forest::{extract_pixel_features, predict_semantic, ForestModel};
use neuseg::instance::{baseline_class_probs, instances_from_three_class, CandidateSet, ClassProbMaps};
use neuseg::labelsynth::{
    competitive_region_growing, overlay_contours, rasterize_point_labels, synthesize_three_class_mask,
    PointAnnotationSet,
};
use neuseg::postfilter::{extract_candidate_features, filter_candidates, GbtModel, ScoredCandidates};
use neuseg::raster::gray_plane;
use neuseg::synthgen::DatasetManifest;
use neuseg::tiling::{make_weight_map, plan_tiling, Stitcher, TilingPlan};
use neuseg::{InstanceLabelMap, PixelClass, RasterImage, SemanticMask, ThreeClassMask};

use crate::config::PipelineConfig;
use crate::error::{ensure_invariant, CliError, CliResult, ExitKind};

/// Estimated working bytes per pixel of a tile being processed.
pub const TILE_BYTES_PER_PIXEL: usize = 96;
/// Estimated bytes per image pixel held by the stitching accumulators.
pub const STITCH_BYTES_PER_PIXEL: usize = 32;

/// Window and stride actually used for an image.
///
/// Images smaller than the configured window are covered by one window as
/// large as their shorter side; the configured overlap is kept.
pub fn effective_tiling(cfg: &PipelineConfig, width: usize, height: usize) -> (usize, usize) {
    let t = &cfg.tiling;
    let window = t.window.min(width).min(height);
    if window == t.window {
        (window, t.stride)
    } else {
        let overlap = t.window - t.stride;
        (window, window.saturating_sub(overlap).max(1))
    }
}

pub fn plan_for(cfg: &PipelineConfig, width: usize, height: usize) -> CliResult<TilingPlan> {
    let (window, stride) = effective_tiling(cfg, width, height);
    Ok(plan_tiling(width, height, window, stride)?)
}

/// Refuses plans whose estimated memory exceeds the configured budget.
pub fn check_memory(cfg: &PipelineConfig, plan: &TilingPlan, workers: usize) -> CliResult<()> {
    let tiles = plan.window * plan.window * TILE_BYTES_PER_PIXEL * workers.min(plan.len()).max(1);
    let stitch = plan.width * plan.height * STITCH_BYTES_PER_PIXEL;
    let need = tiles + stitch;
    let budget = cfg.tiling.memory_budget_mb.saturating_mul(1 << 20);
    if need > budget {
        return Err(CliError::new(
            ExitKind::Resource,
            format!(
                "window {} with {} worker(s) on a {}x{} image needs about {} MiB, over the {} MiB budget",
                plan.window,
                workers,
                plan.width,
                plan.height,
                need >> 20,
                cfg.tiling.memory_budget_mb
            ),
        ));
    }
    Ok(())
}

/// Class maps for a whole image, computed window by window and stitched.
///
/// Windows are processed in parallel batches of `workers` and added to the
/// accumulator in plan order, so the result does not depend on scheduling.
pub fn tiled_class_probs(image: &RasterImage, rf: &ForestModel, cfg: &PipelineConfig, plan: &TilingPlan) -> CliResult<ClassProbMaps> {
    let weights = make_weight_map(plan.window, plan.window - plan.stride.min(plan.window), cfg.tiling.min_weight)?;
    let mut stitcher = Stitcher::new(plan, &weights, 3)?;
    let workers = rayon::current_num_threads().max(1);
    for batch in plan.positions.chunks(workers) {
        let maps: Vec<ClassProbMaps> = batch
            .par_iter()
            .map(|o| {
                let patch = image.crop(o.x, o.y, plan.window, plan.window)?;
                baseline_class_probs(&patch, rf, &cfg.baseline)
            })
            .collect::<neuseg::Result<_>>()?;
        for (o, m) in batch.iter().zip(&maps) {
            stitcher.add(*o, &m.channels())?;
        }
    }
    Ok(ClassProbMaps::from_channels(stitcher.finish()?, true)?)
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub plan: TilingPlan,
    pub maps: ClassProbMaps,
    /// Candidates before filtering.
    pub raw: CandidateSet,
    /// Present when a filter model was given.
    pub scored: Option<ScoredCandidates>,
}

impl Segmentation {
    pub fn final_candidates(&self) -> &CandidateSet {
        self.scored.as_ref().map_or(&self.raw, |s| &s.candidates)
    }
}

pub fn segment_image(
    image: &RasterImage,
    rf: &ForestModel,
    filter: Option<&GbtModel>,
    cfg: &PipelineConfig,
) -> CliResult<Segmentation> {
    let (w, h) = image.dims();
    let plan = plan_for(cfg, w, h)?;
    check_memory(cfg, &plan, rayon::current_num_threads())?;
    log::info!("segmenting {}x{} image in {} tile(s) of {} px", w, h, plan.len(), plan.window);
    let maps = tiled_class_probs(image, rf, cfg, &plan)?;
    let raw = instances_from_three_class(&maps, cfg.instances.interior_threshold, cfg.instances.min_area)?;
    raw.validate()
        .map_err(|e| CliError::new(ExitKind::Invariant, e.to_string()))?;
    ensure_invariant(raw.records.iter().all(|r| r.area >= cfg.instances.min_area), || {
        "a candidate is smaller than min_area".into()
    })?;
    let scored = match filter {
        Some(model) => {
            let features = extract_candidate_features(&raw, &maps)?;
            let scored = ScoredCandidates::score(raw.clone(), features, model)?;
            Some(filter_candidates(&scored, cfg.filter.threshold))
        }
        None => None,
    };
    Ok(Segmentation {
        plan,
        maps,
        raw,
        scored,
    })
}

#[derive(Debug, Clone)]
pub struct SynthLabels {
    pub foreground: SemanticMask,
    pub instances: InstanceLabelMap,
    pub classes: ThreeClassMask,
    pub overlay: RasterImage,
    pub dropped_seeds: Vec<u32>,
}

/// Point annotations to three-class training masks.
pub fn synth_labels(
    image: &RasterImage,
    points: &PointAnnotationSet,
    rf: &ForestModel,
    cfg: &PipelineConfig,
) -> CliResult<SynthLabels> {
    let features = extract_pixel_features(image, rf.params.window_radius)?;
    let (foreground, _) = predict_semantic(rf, &features, cfg.baseline.rf_threshold);
    if points.is_empty() {
        log::warn!("no point annotations; writing an all-background mask");
    }
    let seeds = rasterize_point_labels(points, cfg.grow.seed_disk_radius);
    let grown = competitive_region_growing(&seeds, &foreground, &gray_plane(image), &cfg.grow)?;
    let classes = synthesize_three_class_mask(&grown.labels, cfg.labels.border_thickness)?;
    let overlay = overlay_contours(image, &grown.labels, cfg.labels.overlay_color)?;

    let ids: std::collections::BTreeSet<u32> = points.points().iter().map(|p| p.id).collect();
    let labels = grown.labels.as_slice();
    ensure_invariant(
        labels.iter().zip(foreground.as_slice()).all(|(&l, &f)| l == 0 || f),
        || "a background pixel received an instance label".into(),
    )?;
    ensure_invariant(grown.labels.ids().is_subset(&ids), || {
        "an instance id does not match any point annotation".into()
    })?;
    ensure_invariant(
        classes
            .as_slice()
            .iter()
            .zip(labels)
            .all(|(&c, &l)| c != PixelClass::Interior || l != 0),
        || "an interior pixel is not labelled".into(),
    )?;
    Ok(SynthLabels {
        foreground,
        instances: grown.labels,
        classes,
        overlay,
        dropped_seeds: grown.dropped_seeds,
    })
}

/// One scene of a generated dataset.
#[derive(Debug, Clone)]
pub struct SceneFiles {
    pub name: String,
    pub dir: PathBuf,
}

impl SceneFiles {
    pub fn image(&self) -> PathBuf {
        self.dir.join("image.png")
    }

    pub fn labels(&self) -> PathBuf {
        self.dir.join("labels.png")
    }

    pub fn centroids(&self) -> PathBuf {
        self.dir.join("centroids.csv")
    }
}

pub fn load_manifest(data: &Path) -> CliResult<DatasetManifest> {
    let path = data.join("manifest.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

/// Scenes of a dataset, optionally restricted to the listed indices.
pub fn dataset_scenes(data: &Path, only: &[usize]) -> CliResult<Vec<SceneFiles>> {
    let manifest = load_manifest(data)?;
    for &i in only {
        if !manifest.scenes.iter().any(|s| s.index == i) {
            return Err(CliError::new(ExitKind::Input, format!("dataset has no scene {i}")));
        }
    }
    Ok(manifest
        .scenes
        .iter()
        .filter(|s| only.is_empty() || only.contains(&s.index))
        .map(|s| SceneFiles {
            name: s.dir.clone(),
            dir: data.join(&s.dir),
        })
        .collect())
}

/// JSON record of one output candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateOut {
    pub id: u32,
    pub area: usize,
    pub bbox: [usize; 4],
    pub centroid: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_iou: Option<f64>,
}

pub fn candidate_records(seg: &Segmentation) -> Vec<CandidateOut> {
    match &seg.scored {
        Some(s) => s
            .candidates
            .records
            .iter()
            .zip(&s.predicted_iou)
            .map(|(r, &p)| CandidateOut {
                id: r.id,
                area: r.area,
                bbox: r.bbox,
                centroid: r.centroid,
                predicted_iou: Some(p),
            })
            .collect(),
        None => seg
            .raw
            .records
            .iter()
            .map(|r| CandidateOut {
                id: r.id,
                area: r.area,
                bbox: r.bbox,
                centroid: r.centroid,
                predicted_iou: None,
            })
            .collect(),
    }
}
