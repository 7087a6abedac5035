//! Labelled ordered rooted trees, spatial trees and their encoding processes.
//!
//! Vertices carry labels `1..=n`. Per-vertex vectors are indexed by label and
//! have length `n + 1`; slot 0 is unused.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rooted tree on `1..=n` where every vertex orders its children.
///
/// Children are stored in compressed rows, so `children(v)` is the planar
/// order of the children of `v` (first child first).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledOrderedTree {
    root: usize,
    parent: Vec<usize>,
    offsets: Vec<usize>,
    kids: Vec<usize>,
}

impl LabeledOrderedTree {
    /// The tree with the single vertex 1.
    pub fn singleton() -> Self {
        Self::from_rows(1, vec![0, 0, 0], Vec::new())
    }

    /// Builds a tree from per-label child lists. `children[0]` must be empty.
    pub fn from_children(root: usize, children: &[Vec<usize>]) -> Result<Self> {
        if children.len() < 2 {
            return Err(Error::InvalidTree("need at least one vertex".into()));
        }
        if !children[0].is_empty() {
            return Err(Error::InvalidTree("label 0 cannot have children".into()));
        }
        let mut offsets = Vec::with_capacity(children.len() + 1);
        let mut kids = Vec::new();
        offsets.push(0);
        for row in children {
            kids.extend_from_slice(row);
            offsets.push(kids.len());
        }
        let tree = Self::from_rows(root, offsets, kids);
        tree.validate()?;
        Ok(tree)
    }

    /// Builds a tree from a parent map (`parent[root] == root`) where children
    /// are ordered by increasing label. Used for tests and small fixtures.
    pub fn from_parents_sorted(parent: &[usize]) -> Result<Self> {
        let n = parent.len().saturating_sub(1);
        let roots: Vec<usize> = (1..=n).filter(|&v| parent[v] == v).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidTree(format!(
                "expected one root, found {}",
                roots.len()
            )));
        }
        let mut children = vec![Vec::new(); n + 1];
        for v in 1..=n {
            if parent[v] != v {
                if parent[v] == 0 || parent[v] > n {
                    return Err(Error::InvalidTree(format!("parent of {v} out of range")));
                }
                children[parent[v]].push(v);
            }
        }
        Self::from_children(roots[0], &children)
    }

    /// Trusted constructor: `offsets` has length `n + 2`, `kids` length `n - 1`.
    pub(crate) fn from_rows(root: usize, offsets: Vec<usize>, kids: Vec<usize>) -> Self {
        let n = offsets.len() - 2;
        let mut parent = vec![0; n + 1];
        if n >= 1 {
            parent[root] = root;
        }
        for v in 1..=n {
            for &c in &kids[offsets[v]..offsets[v + 1]] {
                if c <= n {
                    parent[c] = v;
                }
            }
        }
        Self {
            root,
            parent,
            offsets,
            kids,
        }
    }

    pub fn n(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Parent of `v`; the root is its own parent.
    pub fn parent(&self, v: usize) -> usize {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.kids[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.degree(v) == 0
    }

    /// Offset of the first child of `v` in the flat edge arrays.
    pub(crate) fn row_start(&self, v: usize) -> usize {
        self.offsets[v]
    }

    pub fn degrees(&self) -> DegreeSequence {
        DegreeSequence {
            d: (1..=self.n()).map(|v| self.degree(v)).collect(),
        }
    }

    /// 1-based position of `v` among its parent's children; 0 for the root.
    pub fn child_position(&self, v: usize) -> usize {
        if v == self.root {
            return 0;
        }
        let p = self.parent[v];
        self.children(p)
            .iter()
            .position(|&c| c == v)
            .map_or(0, |i| i + 1)
    }

    /// Vertices in lexicographic (depth-first, planar) order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.n());
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend(self.children(v).iter().rev());
        }
        order
    }

    /// Depth of every vertex, indexed by label.
    pub fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0; self.n() + 1];
        for v in self.preorder() {
            for &c in self.children(v) {
                depth[c] = depth[v] + 1;
            }
        }
        depth
    }

    /// Leaves in depth-first order.
    pub fn leaves_dfs(&self) -> Vec<usize> {
        self.preorder()
            .into_iter()
            .filter(|&v| self.is_leaf(v))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::InvalidTree("empty tree".into()));
        }
        if self.root == 0 || self.root > n {
            return Err(Error::InvalidTree(format!(
                "root {} out of range",
                self.root
            )));
        }
        if self.kids.len() != n - 1 {
            return Err(Error::InvalidTree(format!(
                "{} edges for {} vertices",
                self.kids.len(),
                n
            )));
        }
        let mut seen = vec![false; n + 1];
        seen[self.root] = true;
        for &c in &self.kids {
            if c == 0 || c > n {
                return Err(Error::InvalidTree(format!("child label {c} out of range")));
            }
            if seen[c] {
                return Err(Error::InvalidTree(format!(
                    "vertex {c} has two parents or is the root"
                )));
            }
            seen[c] = true;
        }
        // n - 1 distinct non-root children and a root: connected iff acyclic,
        // which holds iff the depth-first walk from the root reaches everyone.
        if self.preorder().len() != n {
            return Err(Error::InvalidTree("tree is not connected".into()));
        }
        Ok(())
    }
}

/// Degrees `d_1..d_n` of a tree on `1..=n`, summing to `n - 1`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DegreeSequence {
    d: Vec<usize>,
}

impl DegreeSequence {
    pub fn new(d: Vec<usize>) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::InvalidDegrees("empty sequence".into()));
        }
        let sum: usize = d.iter().sum();
        if sum != d.len() - 1 {
            return Err(Error::InvalidDegrees(format!(
                "sum {} != n - 1 = {}",
                sum,
                d.len() - 1
            )));
        }
        Ok(Self { d })
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Degree of label `v` (1-based).
    pub fn get(&self, v: usize) -> usize {
        self.d[v - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.d
    }

    /// Number of internal vertices.
    pub fn n_internal(&self) -> usize {
        self.d.iter().filter(|&&x| x > 0).count()
    }

    pub fn max_degree(&self) -> usize {
        self.d.iter().copied().max().unwrap_or(0)
    }
}

/// An ordering of the edge labels `{(v, c) : 1 <= c <= d_v}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeLabelSeq {
    n: usize,
    pairs: Vec<(usize, usize)>,
}

impl EdgeLabelSeq {
    /// Validates that `pairs` lists every `(v, c)` with `c <= d_v` exactly once
    /// for some degree sequence on `1..=n`.
    pub fn new(n: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidEdgeLabels("n must be positive".into()));
        }
        if pairs.len() != n - 1 {
            return Err(Error::InvalidEdgeLabels(format!(
                "{} pairs for n = {}",
                pairs.len(),
                n
            )));
        }
        let mut d = vec![0usize; n + 1];
        for &(v, c) in &pairs {
            if v == 0 || v > n || c == 0 {
                return Err(Error::InvalidEdgeLabels(format!(
                    "pair ({v},{c}) out of range"
                )));
            }
            d[v] += 1;
        }
        let mut hit = vec![Vec::new(); n + 1];
        for v in 1..=n {
            hit[v] = vec![false; d[v]];
        }
        for &(v, c) in &pairs {
            if c > d[v] || hit[v][c - 1] {
                return Err(Error::InvalidEdgeLabels(format!(
                    "pair ({v},{c}) repeated or out of range"
                )));
            }
            hit[v][c - 1] = true;
        }
        Ok(Self { n, pairs })
    }

    pub(crate) fn new_unchecked(n: usize, pairs: Vec<(usize, usize)>) -> Self {
        Self { n, pairs }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn degrees(&self) -> DegreeSequence {
        let mut d = vec![0; self.n];
        for &(v, _) in &self.pairs {
            d[v - 1] += 1;
        }
        DegreeSequence { d }
    }
}

/// A tree together with displacements along its edges.
///
/// `disp` is aligned with the flat child array: the displacement from `v` to
/// its `j`-th child is `displacement(v)[j - 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTree {
    tree: LabeledOrderedTree,
    disp: Vec<f64>,
    loc: Vec<f64>,
}

impl SpatialTree {
    /// `disp` holds the concatenated displacement vectors `Y^(1), Y^(2), ...`
    /// in label order, each of length `c(v)`.
    pub fn new(tree: LabeledOrderedTree, disp: Vec<f64>) -> Result<Self> {
        if disp.len() != tree.n() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} displacements for {} edges",
                disp.len(),
                tree.n() - 1
            )));
        }
        let mut loc = vec![0.0; tree.n() + 1];
        for v in tree.preorder() {
            let start = tree.row_start(v);
            for (j, &c) in tree.children(v).iter().enumerate() {
                loc[c] = loc[v] + disp[start + j];
            }
        }
        Ok(Self { tree, disp, loc })
    }

    /// Zero displacement everywhere.
    pub fn flat(tree: LabeledOrderedTree) -> Self {
        let m = tree.n() - 1;
        Self::new(tree, vec![0.0; m]).expect("lengths agree")
    }

    pub fn tree(&self) -> &LabeledOrderedTree {
        &self.tree
    }

    pub fn displacement(&self, v: usize) -> &[f64] {
        let s = self.tree.row_start(v);
        &self.disp[s..s + self.tree.degree(v)]
    }

    pub fn displacements_flat(&self) -> &[f64] {
        &self.disp
    }

    /// Location of `v`; the root sits at 0.
    pub fn loc(&self, v: usize) -> f64 {
        self.loc[v]
    }

    pub fn locations(&self) -> &[f64] {
        &self.loc
    }

    /// Same tree, displacements replaced through `f(v, Y^(v))`.
    pub fn map_displacements<F>(&self, mut f: F) -> SpatialTree
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let mut disp = vec![0.0; self.disp.len()];
        for v in 1..=self.tree.n() {
            let k = self.tree.degree(v);
            if k == 0 {
                continue;
            }
            let s = self.tree.row_start(v);
            let y = f(v, &self.disp[s..s + k]);
            disp[s..s + k].copy_from_slice(&y);
        }
        SpatialTree::new(self.tree.clone(), disp).expect("lengths agree")
    }
}

/// All integer-time encodings of one spatial tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedPaths {
    pub w: Vec<i64>,
    pub h: Vec<i64>,
    pub contour: Vec<usize>,
    pub htilde: Vec<i64>,
    pub r: Vec<f64>,
    pub rtilde: Vec<f64>,
    pub hloop: Vec<i64>,
}

impl EncodedPaths {
    /// Contour height padded with zeros to `len` entries (never truncated).
    pub fn htilde_padded(&self, len: usize) -> Vec<i64> {
        let mut out = self.htilde.clone();
        if out.len() < len {
            out.resize(len, 0);
        }
        out
    }

    /// Writes `index,W,H,R,Hloop` rows for `0..=n`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,W,H,R,Hloop")?;
        for i in 0..self.w.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i, self.w[i], self.h[i], self.r[i], self.hloop[i]
            )?;
        }
        Ok(())
    }

    /// Writes `index,vertex,Htilde,Rtilde` rows over the contour.
    pub fn write_contour_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,vertex,Htilde,Rtilde")?;
        for i in 0..self.contour.len() {
            writeln!(
                out,
                "{},{},{},{}",
                i, self.contour[i], self.htilde[i], self.rtilde[i]
            )?;
        }
        Ok(())
    }
}

/// Łukasiewicz path: `W(i) = sum_{j <= i} (c(v_j) - 1)`, length `n + 1`.
pub fn lukasiewicz(tree: &LabeledOrderedTree) -> Vec<i64> {
    luka_from_order(tree, &tree.preorder())
}

fn luka_from_order(tree: &LabeledOrderedTree, order: &[usize]) -> Vec<i64> {
    let mut w = Vec::with_capacity(order.len() + 1);
    let mut acc = 0i64;
    w.push(0);
    for &v in order {
        acc += tree.degree(v) as i64 - 1;
        w.push(acc);
    }
    w
}

/// Height process `H(i) = |v_{i+1}|` with `H(n) = 0`.
pub fn height(tree: &LabeledOrderedTree) -> Vec<i64> {
    let depth = tree.depths();
    let mut h: Vec<i64> = tree.preorder().iter().map(|&v| depth[v] as i64).collect();
    h.push(0);
    h
}

/// Contour order `w_0..w_{2(n-1)}` and the depths along it.
pub fn contour(tree: &LabeledOrderedTree) -> (Vec<usize>, Vec<i64>) {
    let n = tree.n();
    let mut order = Vec::with_capacity(2 * n - 1);
    let mut depths = Vec::with_capacity(2 * n - 1);
    let mut stack: Vec<(usize, usize)> = vec![(tree.root(), 0)];
    order.push(tree.root());
    depths.push(0);
    while let Some(top) = stack.last_mut() {
        let (v, next) = *top;
        if next < tree.degree(v) {
            top.1 += 1;
            let c = tree.children(v)[next];
            stack.push((c, 0));
            order.push(c);
            depths.push(stack.len() as i64 - 1);
        } else {
            stack.pop();
            if let Some(&(p, _)) = stack.last() {
                order.push(p);
                depths.push(stack.len() as i64 - 1);
            }
        }
    }
    (order, depths)
}

/// Head of the snake: `R(i) = l(v_{i+1})`, `R(n) = 0`, and `R~(i) = l(w_i)`.
pub fn snake_head(spatial: &SpatialTree) -> (Vec<f64>, Vec<f64>) {
    let tree = spatial.tree();
    let mut r: Vec<f64> = tree.preorder().iter().map(|&v| spatial.loc(v)).collect();
    r.push(0.0);
    let (order, _) = contour(tree);
    let rt = order.iter().map(|&v| spatial.loc(v)).collect();
    (r, rt)
}

/// Height in the looptree: each edge to the `j`-th of `k` children costs
/// `min(j, k + 1 - j)`.
pub fn looptree_height(tree: &LabeledOrderedTree) -> Vec<i64> {
    let order = tree.preorder();
    let mut lh = vec![0i64; tree.n() + 1];
    for &v in &order {
        let k = tree.degree(v);
        for (idx, &c) in tree.children(v).iter().enumerate() {
            let j = idx + 1;
            lh[c] = lh[v] + j.min(k + 1 - j) as i64;
        }
    }
    let mut out: Vec<i64> = order.iter().map(|&v| lh[v]).collect();
    out.push(0);
    out
}

/// Pointwise `alpha1 * H - (2 / alpha2) * W`.
pub fn combine_height_luka(h: &[i64], w: &[i64], alpha1: f64, alpha2: f64) -> Result<Vec<f64>> {
    if alpha2 == 0.0 {
        return Err(Error::InvalidArgument("alpha2 must be nonzero".into()));
    }
    if h.len() != w.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch {} vs {}",
            h.len(),
            w.len()
        )));
    }
    let b = 2.0 / alpha2;
    Ok(h.iter()
        .zip(w)
        .map(|(&x, &y)| alpha1 * x as f64 - b * y as f64)
        .collect())
}

/// Every encoding of `spatial` in one pass over the tree.
pub fn encode(spatial: &SpatialTree) -> EncodedPaths {
    let tree = spatial.tree();
    let (contour_order, htilde) = contour(tree);
    let (r, rtilde) = snake_head(spatial);
    EncodedPaths {
        w: lukasiewicz(tree),
        h: height(tree),
        contour: contour_order,
        htilde,
        r,
        rtilde,
        hloop: looptree_height(tree),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cherry() -> LabeledOrderedTree {
        LabeledOrderedTree::from_children(1, &[vec![], vec![2, 3], vec![], vec![]]).unwrap()
    }

    #[test]
    fn cherry_encodings() {
        let t = cherry();
        assert_eq!(lukasiewicz(&t), vec![0, 1, 0, -1]);
        assert_eq!(height(&t), vec![0, 1, 1, 0]);
        assert_eq!(contour(&t).1, vec![0, 1, 0, 1, 0]);
        assert_eq!(looptree_height(&t), vec![0, 1, 1, 0]);
    }

    #[test]
    fn singleton_encodings() {
        let t = LabeledOrderedTree::singleton();
        assert_eq!(lukasiewicz(&t), vec![0, -1]);
        assert_eq!(height(&t), vec![0, 0]);
        assert_eq!(contour(&t), (vec![1], vec![0]));
        let e = encode(&SpatialTree::flat(t));
        assert_eq!(e.r, vec![0.0, 0.0]);
    }

    #[test]
    fn path_heights() {
        let t = LabeledOrderedTree::from_parents_sorted(&[0, 1, 1, 2]).unwrap();
        assert_eq!(height(&t), vec![0, 1, 2, 0]);
        assert_eq!(looptree_height(&t), height(&t));
    }

    #[test]
    fn displaced_cherry() {
        let s = SpatialTree::new(cherry(), vec![-1.0, 1.0]).unwrap();
        assert_eq!(snake_head(&s).0, vec![0.0, -1.0, 1.0, 0.0]);
        assert_eq!(snake_head(&s).1, vec![0.0, -1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn star_of_three_loops() {
        let t =
            LabeledOrderedTree::from_children(1, &[vec![], vec![2, 3, 4], vec![], vec![], vec![]])
                .unwrap();
        assert_eq!(looptree_height(&t), vec![0, 1, 2, 1, 0]);
    }

    #[test]
    fn rejects_bad_trees() {
        assert!(LabeledOrderedTree::from_children(1, &[vec![], vec![2], vec![1]]).is_err());
        assert!(LabeledOrderedTree::from_children(1, &[vec![], vec![2, 2], vec![]]).is_err());
        assert!(DegreeSequence::new(vec![1, 1]).is_err());
        assert!(EdgeLabelSeq::new(3, vec![(1, 1), (1, 1)]).is_err());
        assert!(EdgeLabelSeq::new(3, vec![(1, 2), (1, 3)]).is_err());
    }

    #[test]
    fn combine_rejects_zero_alpha2() {
        assert!(combine_height_luka(&[0], &[0], 1.0, 0.0).is_err());
        assert_eq!(
            combine_height_luka(&[0, 0], &[0, 0], 1.0, 2.0).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            combine_height_luka(&[3], &[2], 0.0, 2.0).unwrap(),
            vec![-2.0]
        );
    }
}
