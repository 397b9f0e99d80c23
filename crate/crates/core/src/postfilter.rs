//! Candidate post-filter: a gradient-boosted regressor predicts each
//! candidate's IoU with the true cell, and low scorers are removed.
//!
//! Shape convention: the perimeter counts candidate pixels with at least one
//! 8-neighbour outside the candidate (the image outside counts as outside).
//! An 11×11 square therefore has perimeter 40 and circularity
//! `4π·121 / 40² ≈ 0.950`. Circularity is capped at 1.2.
//!
//! Features are computed once and carried with the candidates, so removing a
//! candidate never changes the scores of the others and filtering twice is
//! the same as filtering once.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{CandidateSet, ClassProbMaps};
use crate::raster::{Connectivity, InstanceLabelMap};

pub const CIRCULARITY_CAP: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateFeatures {
    pub id: u32,
    pub area: f64,
    pub perimeter: f64,
    pub circularity: f64,
    pub mean_interior: f64,
    pub mean_contour: f64,
    /// Fraction of perimeter pixels 4-adjacent to another candidate.
    pub contact_ratio: f64,
    /// Area over bounding-box area.
    pub bbox_fill: f64,
}

impl CandidateFeatures {
    pub const COUNT: usize = 7;
    pub const NAMES: [&'static str; Self::COUNT] = [
        "area",
        "perimeter",
        "circularity",
        "mean_interior",
        "mean_contour",
        "contact_ratio",
        "bbox_fill",
    ];

    pub fn values(&self) -> [f64; Self::COUNT] {
        [
            self.area,
            self.perimeter,
            self.circularity,
            self.mean_interior,
            self.mean_contour,
            self.contact_ratio,
            self.bbox_fill,
        ]
    }
}

/// One feature vector per candidate, in record order.
pub fn extract_candidate_features(cands: &CandidateSet, maps: &ClassProbMaps) -> Result<Vec<CandidateFeatures>> {
    let labels = &cands.instances;
    if labels.dims() != maps.dims() {
        return Err(Error::dims(labels.dims(), maps.dims()));
    }
    #[derive(Default)]
    struct Acc {
        perimeter: usize,
        contact: usize,
        interior: f64,
        contour: f64,
    }
    let (w, h) = labels.dims();
    let mut acc: HashMap<u32, Acc> = HashMap::new();
    let l = labels.as_slice();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let id = l[i];
            if id == 0 {
                continue;
            }
            let a = acc.entry(id).or_default();
            a.interior += maps.interior.as_slice()[i] as f64;
            a.contour += maps.contour.as_slice()[i] as f64;
            let at = |dx: i32, dy: i32| labels.get_signed(x as i64 + dx as i64, y as i64 + dy as i64).copied();
            let on_border = Connectivity::Eight.offsets().iter().any(|&(dx, dy)| at(dx, dy) != Some(id));
            if on_border {
                a.perimeter += 1;
                let touches = Connectivity::Four
                    .offsets()
                    .iter()
                    .any(|&(dx, dy)| matches!(at(dx, dy), Some(n) if n != 0 && n != id));
                a.contact += touches as usize;
            }
        }
    }
    Ok(cands
        .records
        .iter()
        .map(|r| {
            let a = &acc[&r.id];
            let area = r.area as f64;
            let perimeter = a.perimeter as f64;
            let [x0, y0, x1, y1] = r.bbox;
            CandidateFeatures {
                id: r.id,
                area,
                perimeter,
                circularity: (4.0 * std::f64::consts::PI * area / (perimeter * perimeter)).min(CIRCULARITY_CAP),
                mean_interior: a.interior / area,
                mean_contour: a.contour / area,
                contact_ratio: a.contact as f64 / perimeter,
                bbox_fill: area / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64,
            }
        })
        .collect())
}

/// IoU of each candidate with the ground-truth instance it overlaps most
/// (lowest id on ties), or 0 when it overlaps none.
pub fn true_iou_targets(cands: &CandidateSet, gt: &InstanceLabelMap) -> Result<Vec<f64>> {
    cands.instances.ensure_same_dims(gt)?;
    let mut gt_area: HashMap<u32, u64> = HashMap::new();
    let mut inter: HashMap<u32, BTreeMap<u32, u64>> = HashMap::new();
    for (&p, &g) in cands.instances.as_slice().iter().zip(gt.as_slice()) {
        if g != 0 {
            *gt_area.entry(g).or_default() += 1;
            if p != 0 {
                *inter.entry(p).or_default().entry(g).or_default() += 1;
            }
        }
    }
    Ok(cands
        .records
        .iter()
        .map(|r| {
            let Some(m) = inter.get(&r.id) else { return 0.0 };
            let (&g, &i) = m
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .expect("non-empty");
            i as f64 / (r.area as u64 + gt_area[&g] - i) as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtParams {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    /// Fraction of rows drawn (without replacement) for each round.
    pub subsample: f64,
    pub min_samples_leaf: usize,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        Self {
            n_rounds: 100,
            max_depth: 3,
            shrinkage: 0.1,
            subsample: 1.0,
            min_samples_leaf: 1,
            seed: 0,
        }
    }
}

/// Regression tree node; split nodes send `x[feature] <= threshold` left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegNode {
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<RegNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                RegNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right } as usize,
                RegNode::Leaf { value } => return value,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub format: String,
    pub version: u32,
    pub params: GbtParams,
    pub feature_names: Vec<String>,
    pub base_prediction: f64,
    pub trees: Vec<RegressionTree>,
}

impl GbtModel {
    /// Unclamped prediction after the first `rounds` trees.
    pub fn raw_prediction(&self, x: &[f64], rounds: usize) -> f64 {
        self.base_prediction
            + self.trees[..rounds.min(self.trees.len())]
                .iter()
                .map(|t| self.params.shrinkage * t.predict(x))
                .sum::<f64>()
    }

    /// Predicted IoU, clamped to `[0, 1]`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.raw_prediction(x, self.trees.len()).clamp(0.0, 1.0)
    }

    /// Mean squared error of the raw prediction after 0, 1, …, n rounds.
    pub fn training_curve(&self, xs: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
        let mut pred = vec![self.base_prediction; xs.len()];
        let mse = |p: &[f64]| p.iter().zip(ys).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ys.len() as f64;
        let mut out = vec![mse(&pred)];
        for t in &self.trees {
            for (p, x) in pred.iter_mut().zip(xs) {
                *p += self.params.shrinkage * t.predict(x);
            }
            out.push(mse(&pred));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != "neuseg-gbt" || self.version != 1 {
            return Err(Error::Model(format!(
                "unsupported model format {} v{}",
                self.format, self.version
            )));
        }
        let nf = self.feature_names.len();
        for (k, t) in self.trees.iter().enumerate() {
            if t.nodes.is_empty() {
                return Err(Error::Model(format!("tree {k} is empty")));
            }
            for (i, n) in t.nodes.iter().enumerate() {
                if let RegNode::Split {
                    feature, left, right, ..
                } = *n
                {
                    let bad_child = |c: u32| c as usize <= i || c as usize >= t.nodes.len();
                    if feature >= nf || bad_child(left) || bad_child(right) {
                        return Err(Error::Model(format!("tree {k} node {i} is malformed")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Least-squares gradient boosting.
///
/// The base prediction is the mean target; each round fits a depth-limited
/// regression tree to the current residuals and adds it scaled by
/// `shrinkage`.
pub fn train_iou_regressor(xs: &[Vec<f64>], ys: &[f64], params: &GbtParams) -> Result<GbtModel> {
    train_regressor(xs, ys, params, CandidateFeatures::NAMES.iter().map(|s| s.to_string()).collect())
}

/// [`train_iou_regressor`] with custom feature names.
pub fn train_regressor(xs: &[Vec<f64>], ys: &[f64], params: &GbtParams, feature_names: Vec<String>) -> Result<GbtModel> {
    if xs.len() < 2 {
        return Err(Error::Training("need at least two samples".into()));
    }
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!("{} rows but {} targets", xs.len(), ys.len())));
    }
    if xs.iter().any(|x| x.len() != feature_names.len()) {
        return Err(Error::InvalidInput(format!(
            "every row must have {} features",
            feature_names.len()
        )));
    }
    if ys.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(Error::InvalidInput("targets must lie in [0, 1]".into()));
    }
    if xs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features must be finite".into()));
    }
    if !(params.shrinkage > 0.0 && params.shrinkage <= 1.0) || !(params.subsample > 0.0 && params.subsample <= 1.0) {
        return Err(Error::InvalidInput("shrinkage and subsample must lie in (0, 1]".into()));
    }
    let n = xs.len();
    let base = ys.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base; n];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let take = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(params.n_rounds);
    for _ in 0..params.n_rounds {
        let residual: Vec<f64> = ys.iter().zip(&pred).map(|(y, p)| y - p).collect();
        let rows: Vec<usize> = if take == n {
            (0..n).collect()
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            for k in 0..take {
                let j = rng.random_range(k..n);
                idx.swap(k, j);
            }
            idx.truncate(take);
            idx.sort_unstable();
            idx
        };
        let mut fitter = RegFitter {
            xs,
            residual: &residual,
            params,
            nodes: Vec::new(),
        };
        fitter.build(rows, 0);
        let tree = RegressionTree { nodes: fitter.nodes };
        for (p, x) in pred.iter_mut().zip(xs) {
            *p += params.shrinkage * tree.predict(x);
        }
        trees.push(tree);
    }
    Ok(GbtModel {
        format: "neuseg-gbt".into(),
        version: 1,
        params: params.clone(),
        feature_names,
        base_prediction: base,
        trees,
    })
}

struct RegFitter<'a> {
    xs: &'a [Vec<f64>],
    residual: &'a [f64],
    params: &'a GbtParams,
    nodes: Vec<RegNode>,
}

impl RegFitter<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let mean = rows.iter().map(|&r| self.residual[r]).sum::<f64>() / rows.len() as f64;
        let split = if depth < self.params.max_depth { self.best_split(&rows) } else { None };
        let Some((feature, threshold)) = split else {
            self.nodes.push(RegNode::Leaf { value: mean });
            return id;
        };
        self.nodes.push(RegNode::Leaf { value: mean });
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| self.xs[i][feature] <= threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id as usize] = RegNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Split minimising the summed squared error of both sides, found by a
    /// sorted prefix-sum scan per feature. Ties keep the earliest candidate.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64)> {
        let min_leaf = self.params.min_samples_leaf.max(1);
        if rows.len() < 2 * min_leaf {
            return None;
        }
        let total: f64 = rows.iter().map(|&r| self.residual[r]).sum();
        let n = rows.len() as f64;
        // Maximising sum_l²/n_l + sum_r²/n_r minimises the squared error.
        let parent_score = total * total / n;
        let mut best: Option<(f64, usize, f64)> = None;
        let nf = self.xs[rows[0]].len();
        let mut order = rows.to_vec();
        for f in 0..nf {
            order.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]).then(a.cmp(&b)));
            let mut sum_l = 0.0;
            for k in 0..order.len() - 1 {
                sum_l += self.residual[order[k]];
                let (a, b) = (self.xs[order[k]][f], self.xs[order[k + 1]][f]);
                let nl = k + 1;
                if a == b || nl < min_leaf || order.len() - nl < min_leaf {
                    continue;
                }
                let nr = (order.len() - nl) as f64;
                let sum_r = total - sum_l;
                let score = sum_l * sum_l / nl as f64 + sum_r * sum_r / nr;
                if score > parent_score + 1e-12 && best.is_none_or(|(s, _, _)| score > s) {
                    let mut t = a + (b - a) / 2.0;
                    if t >= b {
                        t = a;
                    }
                    best = Some((score, f, t));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Candidates, their carried features and predicted IoUs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidates {
    pub candidates: CandidateSet,
    pub features: Vec<CandidateFeatures>,
    pub predicted_iou: Vec<f64>,
}

impl ScoredCandidates {
    pub fn score(candidates: CandidateSet, features: Vec<CandidateFeatures>, model: &GbtModel) -> Result<Self> {
        if features.len() != candidates.len()
            || features.iter().zip(&candidates.records).any(|(f, r)| f.id != r.id)
        {
            return Err(Error::InvalidInput(
                "feature rows do not match candidate records".into(),
            ));
        }
        let predicted_iou = features.iter().map(|f| model.predict(&f.values())).collect();
        Ok(Self {
            candidates,
            features,
            predicted_iou,
        })
    }
}

/// Keeps exactly the candidates whose predicted IoU is `>= threshold`.
pub fn filter_candidates(scored: &ScoredCandidates, threshold: f64) -> ScoredCandidates {
    let keep: HashMap<u32, bool> = scored
        .features
        .iter()
        .zip(&scored.predicted_iou)
        .map(|(f, &p)| (f.id, p >= threshold))
        .collect();
    let candidates = scored.candidates.retain(|r| keep[&r.id]);
    let mut features = Vec::new();
    let mut predicted_iou = Vec::new();
    for (f, &p) in scored.features.iter().zip(&scored.predicted_iou) {
        if keep[&f.id] {
            features.push(*f);
            predicted_iou.push(p);
        }
    }
    ScoredCandidates {
        candidates,
        features,
        predicted_iou,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    area: f64,
    perimeter: f64,
    circularity: f64,
    mean_interior: f64,
    mean_contour: f64,
    contact_ratio: f64,
    bbox_fill: f64,
    iou: f64,
}

/// Writes the training table: the feature columns plus an `iou` target.
pub fn write_training_table(path: &Path, features: &[CandidateFeatures], iou: &[f64]) -> Result<()> {
    if features.len() != iou.len() {
        return Err(Error::InvalidInput("features and targets differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path)?;
    for (f, &y) in features.iter().zip(iou) {
        w.serialize(TableRow {
            area: f.area,
            perimeter: f.perimeter,
            circularity: f.circularity,
            mean_interior: f.mean_interior,
            mean_contour: f.mean_contour,
            contact_ratio: f.contact_ratio,
            bbox_fill: f.bbox_fill,
            iou: y,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a training table into feature rows and targets.
pub fn read_training_table(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in r.deserialize() {
        let t: TableRow = row?;
        xs.push(vec![
            t.area,
            t.perimeter,
            t.circularity,
            t.mean_interior,
            t.mean_contour,
            t.contact_ratio,
            t.bbox_fill,
        ]);
        ys.push(t.iou);
    }
    Ok((xs, ys))
}
