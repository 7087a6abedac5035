//! The line-breaking bijection between edge-label sequences and labelled
//! ordered trees, together with the bookkeeping of its construction.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{EdgeLabelSeq, LabeledOrderedTree};

/// Record of how `build_tree` assembled its paths. Positions are 1-based
/// indices into the edge-label sequence; `J` and `Jtilde` end with `n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionTrace {
    #[serde(rename = "ellStar")]
    pub ell_star: usize,
    #[serde(rename = "J")]
    pub j: Vec<usize>,
    #[serde(rename = "Jtilde")]
    pub jtilde: Vec<usize>,
    #[serde(rename = "M")]
    pub m: Vec<usize>,
    /// Attachment of path `i + 1` as an index into `vhat` (1-based).
    #[serde(rename = "A")]
    pub a: Vec<usize>,
    /// 1: first repeat, new path left of the old one; 2: right; 0: otherwise.
    #[serde(rename = "F")]
    pub f: Vec<u8>,
    #[serde(rename = "Vhat")]
    pub vhat: Vec<usize>,
}

/// `B(pi)`: the tree assembled from `pi`, with its construction trace.
pub fn build_tree(pi: &EdgeLabelSeq) -> (LabeledOrderedTree, ConstructionTrace) {
    let (tree, trace) = assemble(pi, true);
    (tree, trace.expect("trace requested"))
}

/// `B(pi)` without the trace; the fast path used by the samplers.
pub fn build_tree_only(pi: &EdgeLabelSeq) -> LabeledOrderedTree {
    assemble(pi, false).0
}

/// Validating front end for untrusted input.
pub fn build_tree_checked(
    n: usize,
    pairs: Vec<(usize, usize)>,
) -> Result<(LabeledOrderedTree, ConstructionTrace)> {
    let pi = EdgeLabelSeq::new(n, pairs)?;
    Ok(build_tree(&pi))
}

fn assemble(
    pi: &EdgeLabelSeq,
    want_trace: bool,
) -> (LabeledOrderedTree, Option<ConstructionTrace>) {
    let n = pi.n();
    if n == 1 {
        let trace = ConstructionTrace {
            ell_star: 0,
            j: Vec::new(),
            jtilde: vec![1],
            m: Vec::new(),
            a: Vec::new(),
            f: Vec::new(),
            vhat: Vec::new(),
        };
        return (LabeledOrderedTree::singleton(), want_trace.then_some(trace));
    }
    let p = pi.pairs();
    // v(i), c(i) for 1-based i.
    let v = |i: usize| p[i - 1].0;
    let c = |i: usize| p[i - 1].1;

    let mut appeared = vec![false; n + 1];
    let mut in_set = vec![false; n + 1];
    let mut js = Vec::new();
    let mut ms = Vec::new();

    appeared[v(1)] = true;
    in_set[v(1)] = true;
    let mut j_prev = 1;
    let mut ptr = 1;
    loop {
        while appeared[ptr] {
            ptr += 1;
        }
        let m = ptr;
        ptr += 1;
        ms.push(m);
        in_set[m] = true;
        let mut j_next = n;
        for j in j_prev + 1..n {
            let x = v(j);
            let hit = in_set[x];
            appeared[x] = true;
            in_set[x] = true;
            if hit {
                j_next = j;
                break;
            }
        }
        js.push(j_next);
        if j_next == n {
            break;
        }
        j_prev = j_next;
    }

    let mut d = vec![0usize; n + 1];
    for &(x, _) in p {
        d[x] += 1;
    }
    let mut offsets = vec![0usize; n + 2];
    for x in 1..=n {
        offsets[x + 1] = offsets[x] + d[x];
    }
    let mut kids = vec![0usize; n - 1];
    let mut next_j = 0;
    for i in 1..n {
        let child = if js[next_j] == i + 1 {
            next_j += 1;
            ms[next_j - 1]
        } else {
            v(i + 1)
        };
        kids[offsets[v(i)] + c(i) - 1] = child;
    }
    let tree = LabeledOrderedTree::from_rows(v(1), offsets, kids);

    if !want_trace {
        return (tree, None);
    }

    let mut vhat = Vec::new();
    let mut vhat_index = vec![0usize; n + 1];
    let mut first_pos = vec![0usize; n + 1];
    let mut count = vec![0usize; n + 1];
    let mut jtilde = Vec::new();
    // count_before[i]: occurrences of v(i) strictly before position i.
    let mut count_before = vec![0usize; n];
    for i in 1..n {
        let x = v(i);
        count_before[i] = count[x];
        if count[x] == 0 {
            vhat.push(x);
            vhat_index[x] = vhat.len();
            first_pos[x] = i;
        } else if i > 1 {
            jtilde.push(i);
        }
        count[x] += 1;
    }
    jtilde.push(n);

    let ell_star = js.len();
    let mut a = Vec::with_capacity(ell_star.saturating_sub(1));
    let mut f = Vec::with_capacity(ell_star.saturating_sub(1));
    for &jm in &js[..ell_star - 1] {
        let x = v(jm);
        a.push(vhat_index[x]);
        let flag = if count_before[jm] == 1 {
            if c(jm) < c(first_pos[x]) {
                1
            } else {
                2
            }
        } else {
            0
        };
        f.push(flag);
    }
    let trace = ConstructionTrace {
        ell_star,
        j: js,
        jtilde,
        m: ms,
        a,
        f,
        vhat,
    };
    (tree, Some(trace))
}

/// The paths `P^(1..ell*)` as vertex lists: `v_{j_{i-1}}, ..., v_{j_i - 1}, m_i`.
pub fn construction_paths(pi: &EdgeLabelSeq, trace: &ConstructionTrace) -> Vec<Vec<usize>> {
    let p = pi.pairs();
    let mut out = Vec::with_capacity(trace.ell_star);
    let mut start = 1;
    for (i, &ji) in trace.j.iter().enumerate() {
        let mut path: Vec<usize> = (start..ji).map(|k| p[k - 1].0).collect();
        path.push(trace.m[i]);
        out.push(path);
        start = ji;
    }
    out
}

/// `B^{-1}(T)`: concatenated edge labels of the paths to the successive
/// smallest labels not yet reached.
pub fn deconstruct_tree(tree: &LabeledOrderedTree) -> EdgeLabelSeq {
    let n = tree.n();
    let mut pos = vec![0usize; n + 1];
    for u in 1..=n {
        for (idx, &c) in tree.children(u).iter().enumerate() {
            pos[c] = idx + 1;
        }
    }
    let mut in_tree = vec![false; n + 1];
    in_tree[tree.root()] = true;
    let mut pairs = Vec::with_capacity(n - 1);
    let mut climb = Vec::new();
    let mut ptr = 1;
    loop {
        while ptr <= n && in_tree[ptr] {
            ptr += 1;
        }
        if ptr > n {
            break;
        }
        let mut u = ptr;
        climb.clear();
        while !in_tree[u] {
            climb.push(u);
            u = tree.parent(u);
        }
        for &x in climb.iter().rev() {
            pairs.push((tree.parent(x), pos[x]));
            in_tree[x] = true;
        }
    }
    EdgeLabelSeq::new_unchecked(n, pairs)
}

/// Internal vertices in order of first appearance in `pi`.
pub fn first_appearance_order(pi: &EdgeLabelSeq) -> Vec<usize> {
    let mut seen = vec![false; pi.n() + 1];
    let mut out = Vec::new();
    for &(v, _) in pi.pairs() {
        if !seen[v] {
            seen[v] = true;
            out.push(v);
        }
    }
    out
}

/// Size-biased random ordering of `values`: returns indices `s` with
/// `P(s) = prod_i values[s_i] / sum_{j >= i} values[s_j]`.
///
/// Implemented with exponential clocks: index `i` rings at `E_i / values[i]`.
pub fn size_biased_reorder<R: Rng + ?Sized>(values: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    if let Some(bad) = values.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "weights must be positive, got {bad}"
        )));
    }
    let mut keyed: Vec<(f64, usize)> = values
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let e: f64 = Exp1.sample(rng);
            (e / k, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}
