//! Cross-module behaviour on generated scenes.

use std::collections::BTreeSet;

use proptest::prelude::*;

use neuseg::forest::{
    extract_pixel_features, predict_semantic, sample_training_pixels, train_random_forest, ForestModel,
    ForestParams,
};
use neuseg::instance::{baseline_segment, instances_from_three_class, class_probs_from_instances, BaselineConfig};
use neuseg::labelsynth::{
    competitive_region_growing, rasterize_point_labels, synthesize_three_class_mask, GrowConfig,
    PointAnnotation, PointAnnotationSet,
};
use neuseg::metrics::{evaluate, match_instances_iou, precision_recall_f1};
use neuseg::postfilter::{extract_candidate_features, train_iou_regressor, true_iou_targets, GbtParams};
use neuseg::raster::gray_plane;
use neuseg::synthgen::{generate_scene, Density, Scene, SceneConfig};
use neuseg::tiling::plan_tiling;
use neuseg::{Grid, PixelClass};

fn scene(density: Density, seed: u64) -> Scene {
    generate_scene(&SceneConfig::preset(density, 192, 192, seed)).unwrap()
}

fn forest() -> ForestModel {
    let params = ForestParams {
        n_trees: 30,
        ..ForestParams::default()
    };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (k, d) in [Density::Sparse, Density::VeryDense].into_iter().enumerate() {
        let s = scene(d, 900 + k as u64);
        let f = extract_pixel_features(&s.image, params.window_radius).unwrap();
        let (x, y) = sample_training_pixels(&f, &s.labels.to_mask(), 2000, k as u64).unwrap();
        xs.extend(x);
        ys.extend(y);
    }
    train_random_forest(&xs, &ys, &params).unwrap()
}

#[test]
fn point_labels_grow_into_ground_truth_instances() {
    let rf = forest();
    let s = scene(Density::Dense, 3);
    let f = extract_pixel_features(&s.image, rf.params.window_radius).unwrap();
    let (mask, _) = predict_semantic(&rf, &f, 0.5);
    let grow = GrowConfig::default();
    let seeds = rasterize_point_labels(&s.centroids, grow.seed_disk_radius);
    let out = competitive_region_growing(&seeds, &mask, &gray_plane(&s.image), &grow).unwrap();
    let counts = match_instances_iou(&out.labels, &s.labels, 0.5).unwrap();
    let f1 = precision_recall_f1(counts).f1;
    assert!(f1 >= 0.9, "synthesized instances F1 {f1}");
    let annotated: BTreeSet<u32> = s.centroids.points().iter().map(|p| p.id).collect();
    assert!(out.labels.ids().is_subset(&annotated));
}

#[test]
fn three_class_maps_round_trip_through_instance_extraction() {
    let s = scene(Density::VeryDense, 4);
    let prob = Grid::filled(192, 192, 1.0f32);
    let maps = class_probs_from_instances(&s.labels, &prob, 4).unwrap();
    let cands = instances_from_three_class(&maps, 0.5, 1).unwrap();
    let counts = match_instances_iou(&cands.instances, &s.labels, 0.5).unwrap();
    // Thin necks between touching cells may vanish under the contour band,
    // but nearly every cell must come back as its own instance.
    assert!(precision_recall_f1(counts).f1 >= 0.95, "{counts:?}");
    let classes = synthesize_three_class_mask(&s.labels, 4).unwrap();
    for (&c, &l) in classes.as_slice().iter().zip(s.labels.as_slice()) {
        if c == PixelClass::Interior {
            assert_ne!(l, 0);
        }
    }
}

#[test]
fn baseline_beats_targets_on_sparse_scene_and_filter_learns_iou() {
    let rf = forest();
    let cfg = BaselineConfig::default();
    let s = scene(Density::Sparse, 5);
    let cands = baseline_segment(&s.image, &rf, &cfg).unwrap();
    let report = evaluate(&cands.instances, &s.labels, &s.centroids, 0.5).unwrap();
    assert!(report.det.f1 >= 0.9, "{report:?}");

    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for seed in 6..9 {
        let s = scene(Density::Dense, seed);
        let out = neuseg::instance::baseline_segment_detailed(&s.image, &rf, &cfg).unwrap();
        let maps = class_probs_from_instances(&out.candidates.instances, &out.probability, 4).unwrap();
        let feats = extract_candidate_features(&out.candidates, &maps).unwrap();
        xs.extend(feats.iter().map(|f| f.values().to_vec()));
        ys.extend(true_iou_targets(&out.candidates, &s.labels).unwrap());
    }
    let model = train_iou_regressor(&xs, &ys, &GbtParams::default()).unwrap();
    let curve = model.training_curve(&xs, &ys);
    assert!(curve.last().unwrap() < &(curve[0] * 0.5), "curve {:?}", (curve[0], curve.last()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plan_covers_every_pixel(w in 1usize..400, h in 1usize..400, wf in 0.1f64..1.0, sf in 0.05f64..1.0) {
        let window = ((w.min(h) as f64 * wf) as usize).max(1);
        let stride = ((window as f64 * sf) as usize).max(1);
        let plan = plan_tiling(w, h, window, stride).unwrap();
        let mut cover = vec![false; w * h];
        for o in &plan.positions {
            prop_assert!(o.x + window <= w && o.y + window <= h);
            for y in o.y..o.y + window {
                for x in o.x..o.x + window {
                    cover[y * w + x] = true;
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c));
        for axis in [plan.x_origins(), plan.y_origins()] {
            for pair in axis.windows(2) {
                prop_assert!(pair[1] > pair[0] && pair[1] - pair[0] <= stride);
            }
        }
    }

    #[test]
    fn evaluating_ground_truth_against_itself_is_perfect(seed in 0u64..1000) {
        let s = generate_scene(&SceneConfig { n_cells: 12, ..SceneConfig::preset(Density::Dense, 96, 96, seed) }).unwrap();
        let report = evaluate(&s.labels, &s.labels, &s.centroids, 0.5).unwrap();
        prop_assert_eq!(report.det.f1, 1.0);
        prop_assert_eq!(report.seg.f1, 1.0);
        prop_assert_eq!(report.dice, 1.0);
        prop_assert_eq!(report.rce, Some(0.0));
    }

    #[test]
    fn generated_cells_keep_their_centroid_and_visible_share(seed in 0u64..1000, dense in any::<bool>()) {
        let d = if dense { Density::VeryDense } else { Density::Sparse };
        let s = generate_scene(&SceneConfig::preset(d, 128, 128, seed)).unwrap();
        let ids = s.labels.ids();
        prop_assert_eq!(ids.len(), s.cells.len());
        prop_assert_eq!(s.centroids.len(), s.cells.len());
        for p in s.centroids.points() {
            prop_assert_eq!(*s.labels.get(p.x as usize, p.y as usize), p.id);
            let full = s.cells[p.id as usize - 1].pixels().len();
            let visible = s.labels.as_slice().iter().filter(|&&l| l == p.id).count();
            prop_assert!(visible as f64 >= 0.5 * full as f64);
        }
    }

    #[test]
    fn annotations_only_on_background_yield_empty_growth(n in 1usize..6) {
        let mask = Grid::new(32, 32);
        let points = (1..=n as u32).map(|id| PointAnnotation { id, x: id * 4, y: 16 }).collect();
        let set = PointAnnotationSet::new(32, 32, points).unwrap();
        let seeds = rasterize_point_labels(&set, 2);
        let out = competitive_region_growing(&seeds, &mask, &Grid::new(32, 32), &GrowConfig::default()).unwrap();
        prop_assert!(out.no_seeds_on_foreground());
        prop_assert_eq!(out.dropped_seeds.len(), n);
    }
}
