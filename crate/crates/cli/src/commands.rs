use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

use neuseg::forest::{
    extract_pixel_features, sample_training_pixels, train_random_forest, write_samples_csv, ForestModel,
};
use neuseg::labelsynth::PointAnnotationSet;
use neuseg::metrics::{evaluate, write_det_f1_csv, EvalReport};
use neuseg::postfilter::{
    extract_candidate_features, train_iou_regressor, true_iou_targets, write_training_table, GbtModel,
};
use neuseg::raster::io::{load_label_map, read_image, save_label_map, write_image, write_mask, write_three_class};
use neuseg::synthgen::{generate_dataset, sha256_hex, Density, SceneConfig};
use neuseg::RasterImage;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, ExitKind};
use crate::pipeline::{candidate_records, dataset_scenes, plan_for, segment_image, synth_labels, SceneFiles};
use crate::{Cli, Command, LOG_FILE};

/// Versions, config hash, counters and stage timings of one run.
#[derive(Debug, Serialize)]
struct RunLog {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_sha256: String,
    threads: usize,
    counts: BTreeMap<String, u64>,
    timings_ms: BTreeMap<String, f64>,
}

struct Recorder {
    log: RunLog,
    start: Instant,
}

impl Recorder {
    fn new(command: &'static str, cfg: &PipelineConfig) -> Self {
        Self {
            log: RunLog {
                tool: "neuseg",
                version: env!("CARGO_PKG_VERSION"),
                command,
                config_sha256: sha256_hex(cfg.canonical_json().as_bytes()),
                threads: rayon::current_num_threads(),
                counts: BTreeMap::new(),
                timings_ms: BTreeMap::new(),
            },
            start: Instant::now(),
        }
    }

    fn time<T>(&mut self, stage: impl Into<String>, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.log.timings_ms.entry(stage.into()).or_default() += t.elapsed().as_secs_f64() * 1e3;
        out
    }

    fn count(&mut self, key: &str, n: u64) {
        *self.log.counts.entry(key.to_string()).or_default() += n;
    }

    fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.log
            .timings_ms
            .insert("total".into(), self.start.elapsed().as_secs_f64() * 1e3);
        write_json(&dir.join(LOG_FILE), &self.log)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn need(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::new(ExitKind::Input, format!("missing {name} (flag or config)")))
}

fn load_rgb(path: &Path) -> CliResult<RasterImage> {
    Ok(read_image(path)?.to_rgb())
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.apply_seed();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::new(ExitKind::Resource, format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Gen(a) => gen(a, &cfg),
        Command::TrainRf(a) => train_rf(a, &cfg),
        Command::SynthLabels(a) => run_synth_labels(a, &cfg),
        Command::Segment(a) => segment(a, cfg),
        Command::TrainFilter(a) => train_filter(a, &cfg),
        Command::Evaluate(a) => run_evaluate(a, cfg),
        Command::Plan(a) => plan(a, cfg),
    })
}

fn gen(args: crate::GenArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let out = need(args.out, &cfg.paths.out, "--out")?;
    let densities = match args.densities {
        Some(names) => names
            .iter()
            .map(|n| Density::from_str(n.trim()))
            .collect::<neuseg::Result<Vec<_>>>()?,
        None => cfg.gen.densities.clone(),
    };
    let seeds = args.seeds.unwrap_or_else(|| cfg.gen.seeds.clone());
    let (w, h) = (args.width.unwrap_or(cfg.gen.width), args.height.unwrap_or(cfg.gen.height));
    let configs: Vec<SceneConfig> = densities
        .iter()
        .map(|&d| SceneConfig::preset(d, w, h, 0))
        .collect();
    create_dir(&out)?;
    let mut rec = Recorder::new("gen", cfg);
    let manifest = rec.time("generate", || generate_dataset(&configs, &seeds, &out))?;
    rec.count("scenes", manifest.scenes.len() as u64);
    for s in &manifest.scenes {
        rec.count("cells", s.n_cells as u64);
        rec.count("skipped_cells", s.skipped as u64);
    }
    log::info!("wrote {} scenes to {}", manifest.scenes.len(), out.display());
    rec.finish(&out)
}

fn train_rf(args: crate::TrainRfArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let data = need(args.data.data, &cfg.paths.data, "--data")?;
    let out = need(args.out, &cfg.paths.out, "--out")?;
    let scenes = dataset_scenes(&data, &args.data.scenes)?;
    create_dir(&out)?;
    let mut rec = Recorder::new("train-rf", cfg);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (k, scene) in scenes.iter().enumerate() {
        let image = load_rgb(&scene.image())?;
        let labels = load_label_map(&scene.labels())?;
        if labels.dims() != image.dims() {
            return Err(neuseg::Error::dims(image.dims(), labels.dims()).into());
        }
        let features = rec.time("features", || extract_pixel_features(&image, cfg.forest.window_radius))?;
        let (x, y) = sample_training_pixels(
            &features,
            &labels.to_mask(),
            cfg.training.samples_per_class,
            cfg.training_seed().wrapping_add(k as u64),
        )?;
        xs.extend(x);
        ys.extend(y);
    }
    rec.count("scenes", scenes.len() as u64);
    rec.count("samples", xs.len() as u64);
    let model = rec.time("train", || train_random_forest(&xs, &ys, &cfg.forest))?;
    model.save(&out.join("rf.json"))?;
    write_samples_csv(&out.join("samples.csv"), &xs, &ys)?;
    log::info!("trained {} trees on {} samples", model.n_trees, xs.len());
    rec.finish(&out)
}

/// Inputs of a per-image command: one explicit image or dataset scenes.
enum Inputs {
    Single { image: PathBuf, extra: Option<PathBuf> },
    Scenes(Vec<SceneFiles>),
}

fn run_synth_labels(args: crate::SynthLabelsArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let model = need(args.model, &cfg.paths.rf_model, "--model")?;
    let out = need(args.out, &cfg.paths.out, "--out")?;
    let inputs = match args.image {
        Some(image) => Inputs::Single {
            image,
            extra: args.centroids,
        },
        None => Inputs::Scenes(dataset_scenes(
            &need(args.data.data, &cfg.paths.data, "--data or --image")?,
            &args.data.scenes,
        )?),
    };
    let rf = ForestModel::load(&model)?;
    create_dir(&out)?;
    let mut rec = Recorder::new("synth-labels", cfg);
    let jobs: Vec<(PathBuf, PathBuf, PathBuf)> = match inputs {
        Inputs::Single { image, extra } => vec![(image, extra.expect("clap requires centroids"), out.clone())],
        Inputs::Scenes(s) => s
            .into_iter()
            .map(|s| (s.image(), s.centroids(), out.join(&s.name)))
            .collect(),
    };
    for (image_path, centroids, dir) in jobs {
        let image = load_rgb(&image_path)?;
        let (w, h) = image.dims();
        let points = PointAnnotationSet::read_csv(&centroids, w, h)?;
        let res = rec.time("synthesize", || synth_labels(&image, &points, &rf, cfg))?;
        create_dir(&dir)?;
        write_mask(&dir.join("mask.png"), &res.foreground)?;
        save_label_map(&dir.join("instances.png"), &res.instances)?;
        write_three_class(&dir.join("three_class.png"), &res.classes)?;
        write_image(&dir.join("overlay.png"), &res.overlay)?;
        rec.count("images", 1);
        rec.count("instances", res.instances.ids().len() as u64);
        rec.count("dropped_seeds", res.dropped_seeds.len() as u64);
    }
    rec.finish(&out)
}

fn segment(args: crate::SegmentArgs, mut cfg: PipelineConfig) -> CliResult<()> {
    if let Some(w) = args.window {
        cfg.tiling.window = w;
    }
    if let Some(s) = args.stride {
        cfg.tiling.stride = s;
    }
    if let Some(t) = args.filter_threshold {
        cfg.filter.threshold = t;
    }
    if let Some(m) = args.memory_budget_mb {
        cfg.tiling.memory_budget_mb = m;
    }
    cfg.validate()?;
    let model = need(args.model, &cfg.paths.rf_model, "--model")?;
    let out = need(args.out, &cfg.paths.out, "--out")?;
    let jobs: Vec<(PathBuf, PathBuf)> = match args.image {
        Some(image) => vec![(image, out.clone())],
        None => dataset_scenes(&need(args.data.data, &cfg.paths.data, "--data or --image")?, &args.data.scenes)?
            .into_iter()
            .map(|s| (s.image(), out.join(&s.name)))
            .collect(),
    };
    let rf = ForestModel::load(&model)?;
    let filter = args
        .filter
        .or_else(|| cfg.paths.filter_model.clone())
        .map(|p| GbtModel::load(&p))
        .transpose()?;
    create_dir(&out)?;
    let mut rec = Recorder::new("segment", &cfg);
    for (image_path, dir) in jobs {
        let image = load_rgb(&image_path)?;
        let seg = rec.time("segment", || segment_image(&image, &rf, filter.as_ref(), &cfg))?;
        create_dir(&dir)?;
        save_label_map(&dir.join("labels.png"), &seg.final_candidates().instances)?;
        write_json(&dir.join("candidates.json"), &candidate_records(&seg))?;
        fs::write(dir.join("plan.json"), seg.plan.to_json()? + "\n")?;
        log::info!(
            "{}: {} tiles, {} candidates, {} kept",
            image_path.display(),
            seg.plan.len(),
            seg.raw.len(),
            seg.final_candidates().len()
        );
        rec.count("images", 1);
        rec.count("tiles", seg.plan.len() as u64);
        rec.count("candidates", seg.raw.len() as u64);
        rec.count("kept", seg.final_candidates().len() as u64);
    }
    rec.finish(&out)
}

fn train_filter(args: crate::TrainFilterArgs, cfg: &PipelineConfig) -> CliResult<()> {
    let data = need(args.data.data, &cfg.paths.data, "--data")?;
    let model = need(args.model, &cfg.paths.rf_model, "--model")?;
    let out = need(args.out, &cfg.paths.out, "--out")?;
    let scenes = dataset_scenes(&data, &args.data.scenes)?;
    let rf = ForestModel::load(&model)?;
    create_dir(&out)?;
    let mut rec = Recorder::new("train-filter", cfg);
    let (mut features, mut targets) = (Vec::new(), Vec::new());
    for scene in &scenes {
        let image = load_rgb(&scene.image())?;
        let gt = load_label_map(&scene.labels())?;
        let seg = rec.time("segment", || segment_image(&image, &rf, None, cfg))?;
        features.extend(extract_candidate_features(&seg.raw, &seg.maps)?);
        targets.extend(true_iou_targets(&seg.raw, &gt)?);
    }
    if features.len() < 2 {
        return Err(CliError::new(
            ExitKind::Input,
            format!("only {} candidate(s) found; need at least 2 to train", features.len()),
        ));
    }
    let xs: Vec<Vec<f64>> = features.iter().map(|f| f.values().to_vec()).collect();
    let gbt = rec.time("train", || train_iou_regressor(&xs, &targets, &cfg.filter.gbt))?;
    gbt.save(&out.join("filter.json"))?;
    write_training_table(&out.join("filter_table.csv"), &features, &targets)?;
    rec.count("scenes", scenes.len() as u64);
    rec.count("candidates", features.len() as u64);
    rec.finish(&out)
}

#[derive(Debug, Serialize)]
struct NamedReport<'a> {
    name: &'a str,
    report: &'a EvalReport,
}

#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    iou_threshold: f64,
    images: Vec<NamedReport<'a>>,
    pooled: &'a EvalReport,
}

/// Prediction file of a scene: `labels.png`, or its run-length fallback.
fn prediction_path(dir: &Path) -> PathBuf {
    let png = dir.join("labels.png");
    let rle = dir.join("labels.png.rle.txt");
    if !png.exists() && rle.exists() {
        rle
    } else {
        png
    }
}

fn run_evaluate(args: crate::EvaluateArgs, mut cfg: PipelineConfig) -> CliResult<()> {
    if let Some(t) = args.iou_threshold {
        cfg.eval.iou_threshold = t;
    }
    cfg.validate()?;
    let out = need(args.out, &cfg.paths.out, "--out")?;
    let jobs: Vec<(String, PathBuf, PathBuf, PathBuf)> = match args.pred {
        Some(pred) => {
            let name = pred
                .file_stem()
                .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
            vec![(
                name,
                pred,
                args.gt.expect("clap requires gt"),
                args.centroids.expect("clap requires centroids"),
            )]
        }
        None => {
            let data = need(args.data.data, &cfg.paths.data, "--data or --pred")?;
            let root = need(args.pred_root, &None, "--pred-root")?;
            dataset_scenes(&data, &args.data.scenes)?
                .into_iter()
                .map(|s| {
                    let pred = prediction_path(&root.join(&s.name));
                    (s.name.clone(), pred, s.labels(), s.centroids())
                })
                .collect()
        }
    };
    create_dir(&out)?;
    let mut rec = Recorder::new("evaluate", &cfg);
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for (name, pred, gt, centroids) in jobs {
        let pred = load_label_map(&pred)?;
        let gt = load_label_map(&gt)?;
        let (w, h) = gt.dims();
        let points = PointAnnotationSet::read_csv(&centroids, w, h)?;
        let report = rec.time("evaluate", || evaluate(&pred, &gt, &points, cfg.eval.iou_threshold))?;
        rows.push((name, report));
    }
    let pooled = EvalReport::pooled(rows.iter().map(|(_, r)| r));
    write_json(
        &out.join("report.json"),
        &ReportFile {
            iou_threshold: cfg.eval.iou_threshold,
            images: rows
                .iter()
                .map(|(n, r)| NamedReport { name: n, report: r })
                .collect(),
            pooled: &pooled,
        },
    )?;
    let mut table_rows = rows.clone();
    table_rows.push(("pooled".into(), pooled.clone()));
    let table = EvalReport::table(&table_rows);
    fs::write(out.join("report.txt"), &table)?;
    write_det_f1_csv(&out.join("det_f1.csv"), &rows)?;
    print!("{table}");
    rec.count("images", rows.len() as u64);
    rec.finish(&out)
}

fn plan(args: crate::PlanArgs, mut cfg: PipelineConfig) -> CliResult<()> {
    if let Some(w) = args.window {
        cfg.tiling.window = w;
    }
    if let Some(s) = args.stride {
        cfg.tiling.stride = s;
    }
    cfg.validate()?;
    let (w, h) = match (args.image, args.width, args.height) {
        (Some(path), _, _) => read_image(&path)?.dims(),
        (None, Some(w), Some(h)) => (w, h),
        _ => {
            return Err(CliError::new(
                ExitKind::Input,
                "give --image or both --width and --height",
            ))
        }
    };
    let plan = plan_for(&cfg, w, h)?;
    let text = plan.to_json()? + "\n";
    match args.out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    log::info!("{} tiles", plan.len());
    Ok(())
}
