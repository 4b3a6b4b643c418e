//! Random forest of Gini decision trees.
//!
//! Trees grow breadth-first and draw their random numbers from a stream keyed
//! by `(seed, tree index)`. Nodes at the depth limit become leaves before
//! consuming any randomness, so a tree grown to depth `d` is exactly the
//! depth-`d` truncation of the same tree grown deeper, and a forest of `m`
//! trees is a prefix of a larger forest with the same seed. Grid search relies
//! on both facts to fit each fold once.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf {
        p_asd: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        p_asd: f64,
    },
}

impl Node {
    pub fn p_asd(&self) -> f64 {
        match self {
            Node::Leaf { p_asd } | Node::Split { p_asd, .. } => *p_asd,
        }
    }
}

/// Binary tree in breadth-first order; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub depths: Vec<usize>,
}

impl DecisionTree {
    pub fn depth(&self) -> usize {
        self.depths.iter().copied().max().unwrap_or(0)
    }

    /// Leaf probability of ASD reached by `x`, stopping at `max_depth`.
    pub fn leaf_p(&self, x: &[f64], max_depth: usize) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { p_asd } => return *p_asd,
                Node::Split { feature, threshold, left, right, p_asd } => {
                    if self.depths[i] >= max_depth {
                        return *p_asd;
                    }
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn vote(&self, x: &[f64], max_depth: usize) -> bool {
        self.leaf_p(x, max_depth) > 0.5
    }

    /// Copy with every split at `max_depth` turned into a leaf.
    pub fn truncated(&self, max_depth: usize) -> DecisionTree {
        // Children always follow their parent in breadth-first order.
        let mut reachable = vec![false; self.nodes.len()];
        let mut new_index = vec![usize::MAX; self.nodes.len()];
        reachable[0] = true;
        let mut nodes = Vec::new();
        let mut depths = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !reachable[i] {
                continue;
            }
            new_index[i] = nodes.len();
            depths.push(self.depths[i]);
            match node {
                Node::Split { left, right, .. } if self.depths[i] < max_depth => {
                    reachable[*left] = true;
                    reachable[*right] = true;
                    nodes.push(node.clone());
                }
                _ => nodes.push(Node::Leaf { p_asd: node.p_asd() }),
            }
        }
        for node in &mut nodes {
            if let Node::Split { left, right, .. } = node {
                *left = new_index[*left];
                *right = new_index[*right];
            }
        }
        DecisionTree { nodes, depths }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_trees: usize,
    pub max_depth: usize,
    pub n_features: usize,
    /// Vote-fraction cutoff applied by [`ForestModel::predict`].
    pub threshold: f64,
    pub seed: u64,
}

impl ForestModel {
    /// Fraction of trees voting ASD.
    pub fn scores(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        self.scores_restricted(x, self.n_trees, self.max_depth)
    }

    /// Scores of the sub-forest made of the first `n_trees` trees truncated
    /// at `max_depth`.
    pub fn scores_restricted(
        &self,
        x: &Array2<f64>,
        n_trees: usize,
        max_depth: usize,
    ) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::shape(format!(
                "forest was trained on {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        if n_trees == 0 || n_trees > self.trees.len() || max_depth > self.max_depth {
            return Err(Error::config(format!(
                "sub-forest {n_trees} trees / depth {max_depth} exceeds fitted {} / {}",
                self.trees.len(),
                self.max_depth
            )));
        }
        let trees = &self.trees[..n_trees];
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                let votes = trees.iter().filter(|t| t.vote(&row, max_depth)).count();
                votes as f64 / n_trees as f64
            })
            .collect())
    }

    /// Scores of several `(n_trees, max_depth)` sub-forests in one pass;
    /// each path is walked once per tree and read at every depth limit.
    pub fn scores_grid(&self, x: &Array2<f64>, cells: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
        if x.ncols() != self.n_features {
            return Err(Error::shape(format!(
                "forest was trained on {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        if cells
            .iter()
            .any(|&(t, d)| t == 0 || t > self.trees.len() || d == 0 || d > self.max_depth)
        {
            return Err(Error::config("sub-forest exceeds the fitted forest"));
        }
        let mut depth_list: Vec<usize> = cells.iter().map(|c| c.1).collect();
        depth_list.sort_unstable();
        depth_list.dedup();
        let depth_slot: Vec<usize> = cells
            .iter()
            .map(|c| depth_list.binary_search(&c.1).expect("listed"))
            .collect();
        let max_trees = cells.iter().map(|c| c.0).max().unwrap_or(0);
        let mut out = vec![vec![0.0; x.nrows()]; cells.len()];
        let mut path_p = Vec::with_capacity(self.max_depth + 1);
        let mut votes = vec![0usize; depth_list.len()];
        for (r, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            votes.iter_mut().for_each(|v| *v = 0);
            for (t, tree) in self.trees[..max_trees].iter().enumerate() {
                path_p.clear();
                let mut i = 0;
                loop {
                    path_p.push(tree.nodes[i].p_asd());
                    match &tree.nodes[i] {
                        Node::Split { feature, threshold, left, right, .. } => {
                            i = if row[*feature] <= *threshold { *left } else { *right };
                        }
                        Node::Leaf { .. } => break,
                    }
                }
                for (v, &d) in votes.iter_mut().zip(&depth_list) {
                    *v += usize::from(path_p[d.min(path_p.len() - 1)] > 0.5);
                }
                for (c, &(n, _)) in cells.iter().enumerate() {
                    if n == t + 1 {
                        out[c][r] = votes[depth_slot[c]] as f64 / n as f64;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Copy reduced to the first `n_trees` trees at depth `max_depth`.
    pub fn restricted(&self, n_trees: usize, max_depth: usize) -> Result<ForestModel> {
        if n_trees == 0 || n_trees > self.trees.len() || max_depth == 0 || max_depth > self.max_depth {
            return Err(Error::config("sub-forest exceeds the fitted forest"));
        }
        Ok(ForestModel {
            trees: self.trees[..n_trees].iter().map(|t| t.truncated(max_depth)).collect(),
            n_trees,
            max_depth,
            n_features: self.n_features,
            threshold: self.threshold,
            seed: self.seed,
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<(Vec<f64>, Vec<u8>)> {
        let s = self.scores(x)?;
        let labels = s.iter().map(|&v| u8::from(v > self.threshold)).collect();
        Ok((s, labels))
    }
}

pub fn rf_fit(
    x: &Array2<f64>,
    y: &[u8],
    n_trees: usize,
    max_depth: usize,
    seed: u64,
) -> Result<ForestModel> {
    rf_fit_with(x, y, n_trees, max_depth, seed, None)
}

pub(crate) fn rf_fit_with(
    x: &Array2<f64>,
    y: &[u8],
    n_trees: usize,
    max_depth: usize,
    seed: u64,
    search: Option<SplitSearch>,
) -> Result<ForestModel> {
    if max_depth < 1 {
        return Err(Error::config("max_depth must be at least 1"));
    }
    if n_trees < 1 {
        return Err(Error::config("n_trees must be at least 1"));
    }
    if x.nrows() != y.len() {
        return Err(Error::shape(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if !y.contains(&0) || !y.contains(&1) || y.iter().any(|&v| v > 1) {
        return Err(Error::config("forest training needs labels 0/1 with both classes present"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("forest input contains non-finite values"));
    }
    let data = TrainingColumns::new(x, y, search);
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| grow_tree(&data, max_depth, &mut rng::stream(seed, t as u64)))
        .collect();
    Ok(ForestModel {
        trees,
        n_trees,
        max_depth,
        n_features: x.ncols(),
        threshold: 0.5,
        seed,
    })
}

/// How a node finds the sorted order of its samples along a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum SplitSearch {
    /// Sort the node's samples for each candidate feature.
    Sort,
    /// Keep every feature's samples presorted and partition the lists down
    /// the tree. Cheaper when the feature count is small.
    Presorted,
}

impl SplitSearch {
    fn choose(d: usize, n: usize) -> Self {
        let m = (d as f64).sqrt().ceil() as usize;
        let log_n = (usize::BITS - n.max(2).leading_zeros()) as usize;
        if d <= m * log_n {
            SplitSearch::Presorted
        } else {
            SplitSearch::Sort
        }
    }
}

/// Column-major training data shared by every tree of a forest.
pub(crate) struct TrainingColumns<'a> {
    cols: Vec<Vec<f64>>,
    /// Row indices sorted by value, per feature (presorted search only).
    order: Vec<Vec<u32>>,
    y: &'a [u8],
    search: SplitSearch,
}

impl<'a> TrainingColumns<'a> {
    pub(crate) fn new(x: &Array2<f64>, y: &'a [u8], search: Option<SplitSearch>) -> Self {
        let search = search.unwrap_or_else(|| SplitSearch::choose(x.ncols(), x.nrows()));
        let cols: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
        let order = match search {
            SplitSearch::Sort => Vec::new(),
            SplitSearch::Presorted => cols
                .iter()
                .map(|c| {
                    let mut o: Vec<u32> = (0..c.len() as u32).collect();
                    o.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
                    o
                })
                .collect(),
        };
        TrainingColumns { cols, order, y, search }
    }
}

struct Pending {
    /// Samples of the node; with presorted search, one sorted list per feature.
    lists: Vec<Vec<u32>>,
    depth: usize,
    slot: usize,
}

/// Best cut along one feature given the node's samples in ascending order of
/// that feature: `(weighted impurity, threshold)`.
fn best_cut(
    col: &[f64],
    sorted: &[u32],
    weight: &[u32],
    y: &[u8],
    w_total: u64,
    w_pos: u64,
) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    let (mut wl, mut pl) = (0u64, 0u64);
    for k in 0..sorted.len() - 1 {
        let (a, b) = (sorted[k] as usize, sorted[k + 1] as usize);
        wl += weight[a] as u64;
        pl += weight[a] as u64 * y[a] as u64;
        if col[a] == col[b] {
            continue;
        }
        let imp = weighted_gini(wl, pl) + weighted_gini(w_total - wl, w_pos - pl);
        if best.is_none_or(|(bi, _)| imp < bi) {
            best = Some((imp, col[a] / 2.0 + col[b] / 2.0));
        }
    }
    best
}

pub(crate) fn grow_tree<R: Rng>(data: &TrainingColumns, max_depth: usize, rng: &mut R) -> DecisionTree {
    let y = data.y;
    let n = y.len();
    let d = data.cols.len();
    let mut weight = vec![0u32; n];
    for _ in 0..n {
        weight[rng.random_range(0..n)] += 1;
    }
    let root = match data.search {
        SplitSearch::Sort => vec![(0..n as u32).filter(|&i| weight[i as usize] > 0).collect()],
        SplitSearch::Presorted => data
            .order
            .iter()
            .map(|o| o.iter().copied().filter(|&i| weight[i as usize] > 0).collect())
            .collect(),
    };
    let m = (d as f64).sqrt().ceil() as usize;

    let mut nodes = vec![Node::Leaf { p_asd: 0.0 }];
    let mut depths = vec![0usize];
    let mut queue = VecDeque::from([Pending { lists: root, depth: 0, slot: 0 }]);
    let mut scratch: Vec<u32> = Vec::with_capacity(n);
    let mut goes_left = vec![false; n];

    while let Some(Pending { lists, depth, slot }) = queue.pop_front() {
        let (w_total, w_pos) = lists[0].iter().fold((0u64, 0u64), |(t, p), &i| {
            let w = weight[i as usize] as u64;
            (t + w, p + w * y[i as usize] as u64)
        });
        let p_asd = w_pos as f64 / w_total as f64;
        nodes[slot] = Node::Leaf { p_asd };
        if w_pos == 0 || w_pos == w_total || depth >= max_depth || w_total < 2 {
            continue;
        }

        let mut best: Option<(f64, usize, f64)> = None;
        for f in sample(rng, d, m.min(d)).into_iter() {
            let col = &data.cols[f];
            let sorted: &[u32] = match data.search {
                SplitSearch::Presorted => &lists[f],
                SplitSearch::Sort => {
                    scratch.clear();
                    scratch.extend_from_slice(&lists[0]);
                    scratch.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
                    &scratch
                }
            };
            if let Some((imp, thr)) = best_cut(col, sorted, &weight, y, w_total, w_pos) {
                if best.is_none_or(|(b, _, _)| imp < b) {
                    best = Some((imp, f, thr));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            continue;
        };
        let col = &data.cols[feature];
        for &i in &lists[0] {
            goes_left[i as usize] = col[i as usize] <= threshold;
        }
        let (mut left_lists, mut right_lists) = (Vec::with_capacity(lists.len()), Vec::with_capacity(lists.len()));
        for list in &lists {
            let mut l = Vec::with_capacity(list.len());
            let mut r = Vec::with_capacity(list.len());
            for &i in list {
                if goes_left[i as usize] {
                    l.push(i);
                } else {
                    r.push(i);
                }
            }
            left_lists.push(l);
            right_lists.push(r);
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { p_asd: 0.0 });
        nodes.push(Node::Leaf { p_asd: 0.0 });
        depths.push(depth + 1);
        depths.push(depth + 1);
        nodes[slot] = Node::Split { feature, threshold, left, right: left + 1, p_asd };
        queue.push_back(Pending { lists: left_lists, depth: depth + 1, slot: left });
        queue.push_back(Pending { lists: right_lists, depth: depth + 1, slot: left + 1 });
    }
    DecisionTree { nodes, depths }
}

/// Node weight times Gini impurity, `w * (1 - p^2 - q^2)`.
fn weighted_gini(w: u64, pos: u64) -> f64 {
    if w == 0 {
        return 0.0;
    }
    let w = w as f64;
    let p = pos as f64 / w;
    w * 2.0 * p * (1.0 - p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn line(n: usize) -> (Array2<f64>, Vec<u8>) {
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64 - (n as f64) / 2.0 + 0.5);
        let y = x.column(0).iter().map(|&v| u8::from(v > 0.0)).collect();
        (x, y)
    }

    #[test]
    fn one_dimensional_threshold() {
        let (x, y) = line(40);
        let f = rf_fit(&x, &y, 10, 1, 3).unwrap();
        let (_, labels) = f.predict(&x).unwrap();
        assert_eq!(labels, y);
    }

    #[test]
    fn pure_root_is_a_leaf() {
        let x = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let data = TrainingColumns::new(&x, &[1, 1, 1], None);
        let t = grow_tree(&data, 5, &mut rng::seeded(1));
        assert_eq!(t.nodes, vec![Node::Leaf { p_asd: 1.0 }]);
    }

    #[test]
    fn same_seed_same_forest() {
        let x = Array2::from_shape_fn((60, 4), |(i, j)| ((i * 7 + j * 13) % 11) as f64);
        let y: Vec<u8> = (0..60).map(|i| u8::from(i % 3 == 0)).collect();
        let a = rf_fit(&x, &y, 15, 4, 9).unwrap();
        let b = rf_fit(&x, &y, 15, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = rf_fit(&x, &y, 15, 4, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn depth_limit_and_leaf_probabilities() {
        let x = Array2::from_shape_fn((80, 3), |(i, j)| ((i * 31 + j * 17) % 23) as f64);
        let y: Vec<u8> = (0..80).map(|i| u8::from((i * 5) % 7 < 3)).collect();
        let f = rf_fit(&x, &y, 8, 3, 2).unwrap();
        for t in &f.trees {
            assert!(t.depth() <= 3);
            for n in &t.nodes {
                assert!((0.0..=1.0).contains(&n.p_asd()));
            }
        }
    }

    #[test]
    fn truncation_matches_direct_fit() {
        let x = Array2::from_shape_fn((70, 5), |(i, j)| (((i + 3) * (j + 2) * 37) % 29) as f64);
        let y: Vec<u8> = (0..70).map(|i| u8::from((i * 11) % 5 < 2)).collect();
        let big = rf_fit(&x, &y, 12, 10, 4).unwrap();
        for depth in [1, 3, 5] {
            let small = rf_fit(&x, &y, 5, depth, 4).unwrap();
            assert_eq!(big.restricted(5, depth).unwrap().trees, small.trees);
            assert_eq!(big.scores_restricted(&x, 5, depth).unwrap(), small.scores(&x).unwrap());
        }
    }

    #[test]
    fn batched_scores_match_restricted() {
        let x = Array2::from_shape_fn((50, 3), |(i, j)| (((i + 2) * (j + 3) * 7) % 13) as f64);
        let y: Vec<u8> = (0..50).map(|i| u8::from((i * 3) % 5 < 2)).collect();
        let f = rf_fit(&x, &y, 9, 6, 8).unwrap();
        let cells = [(1, 1), (4, 6), (9, 2), (9, 6), (4, 3)];
        let batched = f.scores_grid(&x, &cells).unwrap();
        for (c, &(t, d)) in cells.iter().enumerate() {
            assert_eq!(batched[c], f.scores_restricted(&x, t, d).unwrap());
        }
    }

    #[test]
    fn split_searches_agree() {
        let x = Array2::from_shape_fn((90, 7), |(i, j)| (((i + 1) * (j + 5) * 13) % 17) as f64 * 0.5);
        let y: Vec<u8> = (0..90).map(|i| u8::from((i * 7) % 9 < 4)).collect();
        let a = rf_fit_with(&x, &y, 20, 8, 3, Some(SplitSearch::Sort)).unwrap();
        let b = rf_fit_with(&x, &y, 20, 8, 3, Some(SplitSearch::Presorted)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_errors() {
        let (x, y) = line(10);
        assert!(matches!(rf_fit(&x, &y, 10, 0, 1), Err(Error::Config(_))));
        assert!(matches!(rf_fit(&x, &[0; 10], 10, 2, 1), Err(Error::Config(_))));
        let f = rf_fit(&x, &y, 3, 2, 1).unwrap();
        assert!(f.scores(&Array2::zeros((2, 2))).is_err());
    }
}
