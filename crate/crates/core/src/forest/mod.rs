//! Pixel features and a random-forest foreground classifier.
//!
//! Trees are CART-style: recursive Gini splits over a random subset of the
//! four features at every node, grown on a bootstrap resample. Each tree has
//! its own ChaCha stream derived from `(seed, tree_index)`, so training is
//! reproducible regardless of how the trees are scheduled across threads.
//! Determinism is defined over `(training data in order, seed)`: the same
//! data in the same order with the same seed yields a byte-identical model.

pub(crate) mod features;
mod tree;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, ProbabilityMap, SemanticMask};

pub use features::{extract_pixel_features, FeaturePlanes, PixelFeatures};
pub use tree::{DecisionTree, TreeNode};

const FORMAT: &str = "neuseg-forest";
const VERSION: u32 = 1;

/// Random-forest hyperparameters, stored with the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
    /// Radius of the local-intensity window used to build features.
    pub window_radius: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 16,
            min_leaf: 5,
            features_per_split: 2,
            bootstrap: true,
            seed: 0,
            window_radius: 5,
        }
    }
}

/// A trained forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    format: String,
    version: u32,
    pub params: ForestParams,
    pub n_trees: usize,
    pub feature_count: usize,
    pub trees: Vec<DecisionTree>,
}

impl ForestModel {
    /// Builds a model from explicit trees, e.g. hand-made stumps.
    pub fn from_trees(params: ForestParams, trees: Vec<DecisionTree>) -> Result<Self> {
        let model = Self {
            format: FORMAT.into(),
            version: VERSION,
            n_trees: trees.len(),
            feature_count: PixelFeatures::COUNT,
            params,
            trees,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Model(format!(
                "unsupported forest format {:?} v{}",
                self.format, self.version
            )));
        }
        if self.trees.is_empty() || self.n_trees != self.trees.len() {
            return Err(Error::Model(format!(
                "n_trees = {} but {} trees stored",
                self.n_trees,
                self.trees.len()
            )));
        }
        if self.feature_count != PixelFeatures::COUNT {
            return Err(Error::Model(format!(
                "feature_count {} != {}",
                self.feature_count,
                PixelFeatures::COUNT
            )));
        }
        for (i, t) in self.trees.iter().enumerate() {
            t.validate()
                .map_err(|e| Error::Model(format!("tree {i}: {e}")))?;
        }
        Ok(())
    }

    /// Number of trees voting foreground for `x`.
    #[inline]
    pub fn votes(&self, x: &PixelFeatures) -> usize {
        self.trees.iter().filter(|t| t.votes_foreground(x)).count()
    }

    /// Fraction of trees voting foreground.
    pub fn probability(&self, x: &PixelFeatures) -> f64 {
        self.votes(x) as f64 / self.n_trees as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Trains a forest on labelled feature vectors (`true` = foreground).
pub fn train_random_forest(
    samples: &[PixelFeatures],
    labels: &[bool],
    params: &ForestParams,
) -> Result<ForestModel> {
    if samples.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} samples but {} labels",
            samples.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Training(
            "need at least one sample of each class".into(),
        ));
    }
    if params.n_trees == 0 {
        return Err(Error::Training("n_trees must be positive".into()));
    }
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(params.seed, t);
            tree::grow_tree(samples, labels, params, &mut rng)
        })
        .collect();
    ForestModel::from_trees(params.clone(), trees)
}

fn tree_rng(seed: u64, tree_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree_index as u64);
    rng
}

/// Foreground mask and per-pixel vote fraction.
///
/// A pixel is foreground when its vote fraction is `>= threshold`.
pub fn predict_semantic(
    model: &ForestModel,
    features: &FeaturePlanes,
    threshold: f64,
) -> (SemanticMask, ProbabilityMap) {
    let n = model.n_trees as f64;
    let votes: Vec<usize> = features
        .as_slice()
        .par_iter()
        .with_min_len(4096)
        .map(|x| model.votes(x))
        .collect();
    let (w, h) = features.dims();
    let mask = votes.iter().map(|&v| v as f64 / n >= threshold).collect();
    let prob = votes.iter().map(|&v| (v as f64 / n) as f32).collect();
    (
        Grid::from_vec(w, h, mask).expect("same length"),
        Grid::from_vec(w, h, prob).expect("same length"),
    )
}

/// Draws a class-balanced training set of up to `per_class` pixels of each
/// class from `features`, labelled by `truth`.
pub fn sample_training_pixels(
    features: &FeaturePlanes,
    truth: &SemanticMask,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<PixelFeatures>, Vec<bool>)> {
    features.ensure_same_dims(truth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = truth
            .as_slice()
            .iter()
            .enumerate()
            .filter(|&(_, &b)| b == class)
            .map(|(i, _)| i)
            .collect();
        // Partial Fisher-Yates.
        let take = per_class.min(idx.len());
        for k in 0..take {
            let j = rng.random_range(k..idx.len());
            idx.swap(k, j);
        }
        idx.truncate(take);
        idx.sort_unstable();
        for i in idx {
            samples.push(features.as_slice()[i]);
            labels.push(class);
        }
    }
    Ok((samples, labels))
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    h: u8,
    s: u8,
    v: u8,
    local_intensity: u8,
    label: u8,
}

/// Writes a `h,s,v,local_intensity,label` CSV.
pub fn write_samples_csv(path: &Path, samples: &[PixelFeatures], labels: &[bool]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (x, &l) in samples.iter().zip(labels) {
        w.serialize(SampleRow {
            h: x.h,
            s: x.s,
            v: x.v,
            local_intensity: x.local_intensity,
            label: l as u8,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<(Vec<PixelFeatures>, Vec<bool>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for row in r.deserialize() {
        let row: SampleRow = row?;
        if row.label > 1 {
            return Err(Error::InvalidInput(format!(
                "label {} is not 0 or 1",
                row.label
            )));
        }
        samples.push(PixelFeatures::new(row.h, row.s, row.v, row.local_intensity));
        labels.push(row.label == 1);
    }
    Ok((samples, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threshold_data() -> (Vec<PixelFeatures>, Vec<bool>) {
        let samples: Vec<_> = (0..=255u8)
            .map(|v| PixelFeatures::new(0, 0, v, 128))
            .collect();
        let labels = (0..=255u8).map(|v| v >= 100).collect();
        (samples, labels)
    }

    #[test]
    fn separable_threshold_is_learned_exactly() {
        let (x, y) = threshold_data();
        let params = ForestParams {
            n_trees: 15,
            min_leaf: 1,
            ..Default::default()
        };
        let model = train_random_forest(&x, &y, &params).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(model.probability(xi) >= 0.5, yi, "{xi:?}");
        }
    }

    #[test]
    fn contradictory_duplicates_give_half() {
        let p = PixelFeatures::new(1, 2, 3, 4);
        let x = vec![p; 10];
        let y: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
        let params = ForestParams {
            n_trees: 1,
            bootstrap: false,
            min_leaf: 1,
            ..Default::default()
        };
        let model = train_random_forest(&x, &y, &params).unwrap();
        assert_eq!(model.trees[0].leaf_probability(&p), 0.5);
        // Even split votes foreground.
        assert_eq!(model.probability(&p), 1.0);
    }

    #[test]
    fn same_seed_same_bytes() {
        let (x, y) = threshold_data();
        let params = ForestParams {
            n_trees: 8,
            seed: 42,
            ..Default::default()
        };
        let a = train_random_forest(&x, &y, &params).unwrap().to_json().unwrap();
        let b = train_random_forest(&x, &y, &params).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let other = ForestParams { seed: 43, ..params };
        let c = train_random_forest(&x, &y, &other).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![PixelFeatures::default(); 4];
        let err = train_random_forest(&x, &[true; 4], &ForestParams::default()).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn stumps_voting_foreground_give_probability_one() {
        let stump = DecisionTree {
            nodes: vec![TreeNode::Leaf { counts: [0, 3] }],
        };
        let model = ForestModel::from_trees(ForestParams::default(), vec![stump; 5]).unwrap();
        let img = Grid::filled(4, 3, PixelFeatures::new(9, 9, 9, 9));
        let (mask, prob) = predict_semantic(&model, &img, 0.5);
        assert!(prob.as_slice().iter().all(|&p| p == 1.0));
        assert!(mask.as_slice().iter().all(|&b| b));
    }

    #[test]
    fn threshold_zero_is_all_foreground() {
        let stump = DecisionTree {
            nodes: vec![TreeNode::Leaf { counts: [3, 0] }],
        };
        let model = ForestModel::from_trees(ForestParams::default(), vec![stump]).unwrap();
        let img = Grid::filled(3, 3, PixelFeatures::default());
        let (mask, prob) = predict_semantic(&model, &img, 0.0);
        assert!(prob.as_slice().iter().all(|&p| p == 0.0));
        assert!(mask.as_slice().iter().all(|&b| b));
    }

    #[test]
    fn invalid_models_are_rejected() {
        let bad = DecisionTree {
            nodes: vec![TreeNode::Split {
                feature: 0,
                threshold: 1,
                left: 0,
                right: 5,
            }],
        };
        assert!(ForestModel::from_trees(ForestParams::default(), vec![bad]).is_err());
        assert!(ForestModel::from_json("{}").is_err());
    }

    #[test]
    fn serialization_round_trip_preserves_predictions() {
        let (x, y) = threshold_data();
        let params = ForestParams {
            n_trees: 6,
            ..Default::default()
        };
        let model = train_random_forest(&x, &y, &params).unwrap();
        let back = ForestModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        for xi in &x {
            assert_eq!(back.votes(xi), model.votes(xi));
        }
    }

    #[test]
    fn probability_is_a_multiple_of_one_over_n() {
        let (x, y) = threshold_data();
        let params = ForestParams {
            n_trees: 7,
            max_depth: 2,
            ..Default::default()
        };
        let model = train_random_forest(&x, &y, &params).unwrap();
        let planes = Grid::from_vec(16, 16, x).unwrap();
        let (_, prob) = predict_semantic(&model, &planes, 0.5);
        for &p in prob.as_slice() {
            let k = p as f64 * 7.0;
            assert!((k - k.round()).abs() < 1e-5);
        }
    }

    #[test]
    fn samples_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let (x, y) = threshold_data();
        write_samples_csv(&path, &x, &y).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("h,s,v,local_intensity,label\n"));
        assert_eq!(read_samples_csv(&path).unwrap(), (x, y));
    }
}
