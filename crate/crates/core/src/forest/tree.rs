use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::PixelFeatures;
use super::ForestParams;

/// A node of a flattened classification tree.
///
/// Split nodes send a sample left when `feature <= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: u8,
        threshold: u8,
        left: u32,
        right: u32,
    },
    /// Weighted `[background, foreground]` training counts.
    Leaf { counts: [u32; 2] },
}

/// A binary classification tree stored as a node array, root at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    fn leaf(&self, x: &PixelFeatures) -> [u32; 2] {
        let mut i = 0usize;
        loop {
            match self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x.get(feature as usize) <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    /// Foreground fraction of the training samples in the reached leaf.
    pub fn leaf_probability(&self, x: &PixelFeatures) -> f64 {
        let [bg, fg] = self.leaf(x);
        fg as f64 / (bg + fg) as f64
    }

    /// Majority vote of the reached leaf; an even split votes foreground.
    #[inline]
    pub fn votes_foreground(&self, x: &PixelFeatures) -> bool {
        let [bg, fg] = self.leaf(x);
        fg >= bg
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
                TreeNode::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    /// Structural check used when loading models.
    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                TreeNode::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if feature as usize >= PixelFeatures::COUNT {
                        return Err(format!("node {i}: feature {feature} out of range"));
                    }
                    for c in [left, right] {
                        if c as usize <= i || c as usize >= self.nodes.len() {
                            return Err(format!("node {i}: bad child index {c}"));
                        }
                    }
                }
                TreeNode::Leaf { counts } => {
                    if counts == [0, 0] {
                        return Err(format!("node {i}: empty leaf"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sample index with its bootstrap multiplicity.
#[derive(Clone, Copy)]
struct Weighted {
    index: u32,
    weight: u32,
}

struct Split {
    feature: usize,
    threshold: u8,
    impurity: f64,
}

pub(super) fn grow_tree<R: Rng>(
    samples: &[PixelFeatures],
    labels: &[bool],
    params: &ForestParams,
    rng: &mut R,
) -> DecisionTree {
    let n = samples.len();
    let rows: Vec<Weighted> = if params.bootstrap {
        let mut counts = vec![0u32; n];
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .filter(|&(_, c)| c > 0)
            .map(|(i, c)| Weighted {
                index: i as u32,
                weight: c,
            })
            .collect()
    } else {
        (0..n as u32)
            .map(|index| Weighted { index, weight: 1 })
            .collect()
    };

    let mut builder = Builder {
        samples,
        labels,
        params,
        rng,
        nodes: Vec::new(),
    };
    builder.build(rows, 0);
    DecisionTree {
        nodes: builder.nodes,
    }
}

struct Builder<'a, R> {
    samples: &'a [PixelFeatures],
    labels: &'a [bool],
    params: &'a ForestParams,
    rng: &'a mut R,
    nodes: Vec<TreeNode>,
}

impl<R: Rng> Builder<'_, R> {
    fn class_counts(&self, rows: &[Weighted]) -> [u32; 2] {
        let mut c = [0u32; 2];
        for r in rows {
            c[self.labels[r.index as usize] as usize] += r.weight;
        }
        c
    }

    /// Appends the subtree for `rows` and returns its node index.
    fn build(&mut self, rows: Vec<Weighted>, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let counts = self.class_counts(&rows);
        let total = (counts[0] + counts[1]) as usize;
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || depth >= self.params.max_depth || total < 2 * self.params.min_leaf.max(1) {
            self.nodes.push(TreeNode::Leaf { counts });
            return id;
        }
        let Some(split) = self.best_split(&rows, counts) else {
            self.nodes.push(TreeNode::Leaf { counts });
            return id;
        };
        // Reserve the slot; children are appended after it.
        self.nodes.push(TreeNode::Leaf { counts });
        let (left_rows, right_rows): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| {
            self.samples[r.index as usize].get(split.feature) <= split.threshold
        });
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id as usize] = TreeNode::Split {
            feature: split.feature as u8,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    /// Best split over a random subset of `features_per_split` features.
    /// When that subset admits no improving split, the remaining features
    /// are tried one at a time in the same shuffled order.
    fn best_split(&mut self, rows: &[Weighted], counts: [u32; 2]) -> Option<Split> {
        let mut features: Vec<usize> = (0..PixelFeatures::COUNT).collect();
        features.shuffle(self.rng);
        let k = self.params.features_per_split.clamp(1, PixelFeatures::COUNT);
        let parent = gini_weighted(counts[0] as u64, counts[1] as u64);

        let mut best: Option<Split> = None;
        for (n, &feature) in features.iter().enumerate() {
            if n >= k && best.is_some() {
                break;
            }
            if let Some(s) = self.best_threshold(rows, counts, feature) {
                if s.impurity < parent - 1e-12
                    && best.as_ref().is_none_or(|b| s.impurity < b.impurity)
                {
                    best = Some(s);
                }
            }
        }
        best
    }

    fn best_threshold(&self, rows: &[Weighted], counts: [u32; 2], feature: usize) -> Option<Split> {
        let min_leaf = self.params.min_leaf.max(1) as u64;
        let mut hist = [[0u64; 2]; 256];
        for r in rows {
            let v = self.samples[r.index as usize].get(feature) as usize;
            hist[v][self.labels[r.index as usize] as usize] += r.weight as u64;
        }
        let present: Vec<usize> = (0..256)
            .filter(|&v| hist[v][0] + hist[v][1] > 0)
            .collect();
        let (mut l0, mut l1) = (0u64, 0u64);
        let mut best: Option<Split> = None;
        for pair in present.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            l0 += hist[a][0];
            l1 += hist[a][1];
            let r0 = counts[0] as u64 - l0;
            let r1 = counts[1] as u64 - l1;
            if l0 + l1 < min_leaf || r0 + r1 < min_leaf {
                continue;
            }
            let impurity = gini_weighted(l0, l1) + gini_weighted(r0, r1);
            if best.as_ref().is_none_or(|s| impurity < s.impurity) {
                best = Some(Split {
                    feature,
                    threshold: ((a + b) / 2) as u8,
                    impurity,
                });
            }
        }
        best
    }
}

/// Gini impurity scaled by node weight: `n · (1 − p0² − p1²)`.
fn gini_weighted(c0: u64, c1: u64) -> f64 {
    let n = (c0 + c1) as f64;
    if n == 0.0 {
        return 0.0;
    }
    n - (c0 as f64 * c0 as f64 + c1 as f64 * c1 as f64) / n
}
