//! CART regression tree with exact greedy split search.
//!
//! Trees grow level by level. Each feature is pre-sorted once per training
//! matrix ([`SortedColumns`]) and every level costs one pass over each sorted
//! column, so boosting and bagging reuse the same sort for all their trees.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features considered per node; `None` means all.
    pub max_features: Option<usize>,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            min_samples_leaf: 1,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl DecisionTree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        x.rows().map(|r| self.predict_row(r)).collect()
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + rec(nodes, *left as usize).max(rec(nodes, *right as usize))
                }
            }
        }
        rec(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub(crate) fn set_leaf_value(&mut self, node: usize, value: f64) {
        if let Node::Leaf { value: v } = &mut self.nodes[node] {
            *v = value;
        }
    }
}

/// Per-feature `(row, value)` pairs sorted by value (stable in row order).
#[derive(Debug, Clone)]
pub struct SortedColumns<'a> {
    cols: Vec<Cow<'a, [(u32, f64)]>>,
    n_rows: usize,
}

fn sort_column(x: &Matrix, j: usize) -> Vec<(u32, f64)> {
    let mut col: Vec<(u32, f64)> = (0..x.n_rows()).map(|i| (i as u32, x.get(i, j))).collect();
    col.sort_by(|a, b| a.1.total_cmp(&b.1));
    col
}

impl<'a> SortedColumns<'a> {
    pub fn new(x: &Matrix) -> SortedColumns<'static> {
        SortedColumns {
            cols: (0..x.n_cols()).map(|j| Cow::Owned(sort_column(x, j))).collect(),
            n_rows: x.n_rows(),
        }
    }

    /// Borrows `self`'s columns and appends sorted copies of `extra`'s
    /// columns; `extra` must have the same rows.
    pub fn extended(&'a self, extra: &Matrix) -> SortedColumns<'a> {
        assert_eq!(extra.n_rows(), self.n_rows);
        let mut cols: Vec<Cow<'a, [(u32, f64)]>> =
            self.cols.iter().map(|c| Cow::Borrowed(c.as_ref())).collect();
        cols.extend((0..extra.n_cols()).map(|j| Cow::Owned(sort_column(extra, j))));
        SortedColumns {
            cols,
            n_rows: self.n_rows,
        }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
}

/// Tree plus the leaf node reached by every training row (`u32::MAX` for
/// rows with zero weight).
pub(crate) struct FitOutput {
    pub tree: DecisionTree,
    pub row_leaf: Vec<u32>,
}

struct Open {
    node: usize,
    depth: usize,
    count: usize,
    sum_w: f64,
    sum_wy: f64,
    /// y of the node's first row; split gains use y - shift so a constant
    /// target gives exactly zero gain.
    shift: f64,
    features: Option<Vec<bool>>,
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Clone, Copy, Default)]
struct Scan {
    count: usize,
    w: f64,
    s: f64,
    last: f64,
    total_s: f64,
}

fn pick_features(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Vec<bool> {
    let mut pool: Vec<usize> = (0..d).collect();
    let m = m.min(d);
    for i in 0..m {
        let j = rng.random_range(i..d);
        pool.swap(i, j);
    }
    let mut mask = vec![false; d];
    for &f in &pool[..m] {
        mask[f] = true;
    }
    mask
}

pub(crate) fn fit_presorted(
    x: &Matrix,
    sorted: &SortedColumns<'_>,
    y: &[f64],
    weights: Option<&[f64]>,
    cfg: &TreeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FitOutput> {
    let n = sorted.n_rows();
    if n == 0 || y.len() != n || x.n_rows() != n {
        return Err(Error::invalid(format!(
            "tree fit needs matching non-empty data ({} rows, {} targets)",
            n,
            y.len()
        )));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let d = sorted.n_features();
    let min_leaf = cfg.min_samples_leaf.max(1);

    // Frontier slot of each row still being split, or INACTIVE.
    const INACTIVE: u32 = u32::MAX;
    let mut slot: Vec<u32> = vec![INACTIVE; n];
    // Tree node currently holding each row.
    let mut row_leaf: Vec<u32> = vec![u32::MAX; n];
    let mut root = Open {
        node: 0,
        depth: 0,
        count: 0,
        sum_w: 0.0,
        sum_wy: 0.0,
        shift: f64::NAN,
        features: None,
    };
    for i in 0..n {
        let wi = w(i);
        if wi > 0.0 {
            slot[i] = 0;
            row_leaf[i] = 0;
            if root.count == 0 {
                root.shift = y[i];
            }
            root.count += 1;
            root.sum_w += wi;
            root.sum_wy += wi * y[i];
        }
    }
    if root.count == 0 {
        return Err(Error::invalid("tree fit: every sample weight is zero"));
    }

    let mut nodes = vec![Node::Leaf {
        value: root.sum_wy / root.sum_w,
    }];
    let mut frontier = vec![root];

    loop {
        let splittable: Vec<bool> = frontier
            .iter()
            .map(|o| o.depth < cfg.max_depth && o.count >= 2 * min_leaf)
            .collect();
        if !splittable.iter().any(|&s| s) {
            break;
        }
        if let Some(m) = cfg.max_features.filter(|&m| m < d) {
            for (o, &s) in frontier.iter_mut().zip(&splittable) {
                if s {
                    o.features = Some(pick_features(rng, d, m));
                }
            }
        }
        let mut best: Vec<Option<Best>> = vec![None; frontier.len()];
        let mut scan = vec![Scan::default(); frontier.len()];

        for f in 0..d {
            for (st, o) in scan.iter_mut().zip(&frontier) {
                *st = Scan {
                    total_s: o.sum_wy - o.shift * o.sum_w,
                    ..Scan::default()
                };
            }
            for &(row, v) in sorted.cols[f].iter() {
                let k = slot[row as usize];
                if k == INACTIVE || !splittable[k as usize] {
                    continue;
                }
                let k = k as usize;
                let o = &frontier[k];
                if o.features.as_ref().is_some_and(|m| !m[f]) {
                    continue;
                }
                let st = &mut scan[k];
                if st.count >= min_leaf && v > st.last && o.count - st.count >= min_leaf {
                    let wr = o.sum_w - st.w;
                    let sr = st.total_s - st.s;
                    let gain =
                        st.s * st.s / st.w + sr * sr / wr - st.total_s * st.total_s / o.sum_w;
                    if best[k].is_none_or(|b| gain > b.gain) {
                        let mid = st.last + (v - st.last) / 2.0;
                        let threshold = if mid < v { mid } else { st.last };
                        best[k] = Some(Best {
                            gain,
                            feature: f,
                            threshold,
                        });
                    }
                }
                let wi = w(row as usize);
                st.count += 1;
                st.w += wi;
                st.s += wi * (y[row as usize] - o.shift);
                st.last = v;
            }
        }

        let mut next: Vec<Open> = Vec::new();
        let mut children: Vec<Option<(Best, u32)>> = vec![None; frontier.len()];
        for (k, o) in frontier.iter().enumerate() {
            let Some(b) = best[k].filter(|b| b.gain > 0.0) else {
                continue;
            };
            let left = nodes.len();
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            nodes[o.node] = Node::Split {
                feature: b.feature as u32,
                threshold: b.threshold,
                left: left as u32,
                right: (left + 1) as u32,
            };
            children[k] = Some((b, next.len() as u32));
            for child in [left, left + 1] {
                next.push(Open {
                    node: child,
                    depth: o.depth + 1,
                    count: 0,
                    sum_w: 0.0,
                    sum_wy: 0.0,
                    shift: f64::NAN,
                    features: None,
                });
            }
        }
        if next.is_empty() {
            break;
        }
        for i in 0..n {
            let k = slot[i];
            if k == INACTIVE {
                continue;
            }
            match children[k as usize] {
                Some((b, first)) => {
                    let c = first + u32::from(x.get(i, b.feature) > b.threshold);
                    slot[i] = c;
                    let ch = &mut next[c as usize];
                    row_leaf[i] = ch.node as u32;
                    let wi = w(i);
                    if ch.count == 0 {
                        ch.shift = y[i];
                    }
                    ch.count += 1;
                    ch.sum_w += wi;
                    ch.sum_wy += wi * y[i];
                }
                None => slot[i] = INACTIVE,
            }
        }
        for ch in &next {
            nodes[ch.node] = Node::Leaf {
                value: ch.sum_wy / ch.sum_w,
            };
        }
        frontier = next;
    }

    Ok(FitOutput {
        tree: DecisionTree {
            nodes,
            max_depth: cfg.max_depth,
            min_samples_leaf: min_leaf,
        },
        row_leaf,
    })
}

pub fn tree_fit(
    x: &Matrix,
    y: &[f64],
    weights: Option<&[f64]>,
    cfg: &TreeConfig,
    seed: u64,
) -> Result<DecisionTree> {
    if x.n_rows() == 0 {
        return Err(Error::invalid("tree fit on empty data"));
    }
    let sorted = SortedColumns::new(x);
    let mut rng = crate::rng::rng_from(seed);
    Ok(fit_presorted(x, &sorted, y, weights, cfg, &mut rng)?.tree)
}
