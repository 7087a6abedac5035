//! Limit objects: Aldous' line-breaking tree with Brownian labels, the
//! Poisson process of hairs, hairy sets and their Hausdorff distance.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First `k` jump times of a Poisson process on `[0, inf)` with intensity `t dt`.
pub fn sample_jump_times<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut acc = 0.0;
    (0..k)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            acc += e;
            (2.0 * acc).sqrt()
        })
        .collect()
}

/// The tree spanned by `k` leaves of the line-breaking construction, with
/// heights and labels at the leaves. Leaf `i` (0-based) is the tip `J_i`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuumTree {
    pub k: usize,
    pub j: Vec<f64>,
    /// `a[i]` is where segment `i + 1` is glued; `a[i] <= j[i]`.
    pub a: Vec<f64>,
    /// `true` when segment `i + 1` hangs on the left of its parent branch.
    pub sides: Vec<bool>,
    pub h: Vec<f64>,
    pub l: Vec<f64>,
    /// Leaves in planar (depth-first) order.
    pub tau: Vec<usize>,
}

// Segment s (0-based) covers (J_{s-1}, J_s], with J_{-1} = 0.
fn segment_of(j: &[f64], t: f64) -> usize {
    j.partition_point(|&x| x < t)
}

pub fn build_continuum_tree<R: Rng + ?Sized>(k: usize, rng: &mut R) -> ContinuumTree {
    assert!(k >= 1, "need at least one leaf");
    let j = sample_jump_times(k, rng);

    // Brownian motion along the concatenated segments, known at a sorted set of times.
    let mut known: Vec<(f64, f64)> = Vec::with_capacity(2 * k + 1);
    known.push((0.0, 0.0));
    let mut b_prev = 0.0;
    let mut t_prev = 0.0;
    for &t in &j {
        let z: f64 = StandardNormal.sample(rng);
        b_prev += (t - t_prev).sqrt() * z;
        t_prev = t;
        known.push((t, b_prev));
    }
    let b_at_j: Vec<f64> = known[1..].iter().map(|p| p.1).collect();

    let mut a = Vec::with_capacity(k.saturating_sub(1));
    let mut b_at_a = Vec::with_capacity(k.saturating_sub(1));
    let mut sides = Vec::with_capacity(k.saturating_sub(1));
    for i in 0..k.saturating_sub(1) {
        let u: f64 = rng.random();
        let t = u * j[i];
        let idx = known.partition_point(|p| p.0 < t);
        let (t1, b1) = known[idx - 1];
        let (t2, b2) = known[idx];
        let w = (t - t1) / (t2 - t1);
        let var = (t - t1) * (t2 - t) / (t2 - t1);
        let z: f64 = StandardNormal.sample(rng);
        let b = b1 + w * (b2 - b1) + var.max(0.0).sqrt() * z;
        known.insert(idx, (t, b));
        a.push(t);
        b_at_a.push(b);
        sides.push(rng.random::<bool>());
    }

    // base_h[s], base_l[s]: height and label where segment s starts.
    let mut base_h = vec![0.0; k];
    let mut base_l = vec![0.0; k];
    let start = |s: usize| {
        if s == 0 {
            (0.0, 0.0)
        } else {
            (j[s - 1], b_at_j[s - 1])
        }
    };
    let mut parent_seg = vec![usize::MAX; k];
    for s in 1..k {
        let t = a[s - 1];
        let p = segment_of(&j, t);
        parent_seg[s] = p;
        let (t0, b0) = start(p);
        base_h[s] = base_h[p] + t - t0;
        base_l[s] = base_l[p] + b_at_a[s - 1] - b0;
    }
    let mut h = Vec::with_capacity(k);
    let mut l = Vec::with_capacity(k);
    for s in 0..k {
        let (t0, b0) = start(s);
        h.push(base_h[s] + j[s] - t0);
        l.push(base_l[s] + b_at_j[s] - b0);
    }

    let mut left: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut right: Vec<Vec<usize>> = vec![Vec::new(); k];
    for s in 1..k {
        if sides[s - 1] {
            left[parent_seg[s]].push(s);
        } else {
            right[parent_seg[s]].push(s);
        }
    }
    for s in 0..k {
        left[s].sort_by(|x, y| a[x - 1].total_cmp(&a[y - 1]));
        right[s].sort_by(|x, y| a[y - 1].total_cmp(&a[x - 1]));
    }
    enum Item {
        Seg(usize),
        Leaf(usize),
    }
    let mut tau = Vec::with_capacity(k);
    let mut stack = vec![Item::Seg(0)];
    while let Some(item) = stack.pop() {
        match item {
            Item::Leaf(s) => tau.push(s),
            Item::Seg(s) => {
                for &c in right[s].iter().rev() {
                    stack.push(Item::Seg(c));
                }
                stack.push(Item::Leaf(s));
                for &c in left[s].iter().rev() {
                    stack.push(Item::Seg(c));
                }
            }
        }
    }
    ContinuumTree {
        k,
        j,
        a,
        sides,
        h,
        l,
        tau,
    }
}

impl ContinuumTree {
    /// `(h, l)` at the leaves in planar order.
    pub fn planar_pairs(&self) -> Vec<(f64, f64)> {
        self.tau.iter().map(|&s| (self.h[s], self.l[s])).collect()
    }
}

/// `k` pairs distributed as `(2e, sqrt(2) r)` at sorted uniform times.
pub fn bsbe_rfdds<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<(f64, f64)> {
    build_continuum_tree(k, rng).planar_pairs()
}

/// Intensity of large displacement pairs `(x, y)`, both nonnegative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PiMeasureSpec {
    /// `a_plus q x^{-q-1} dx (x) delta_0 + delta_0 (x) a_minus q y^{-q-1} dy`.
    AxisPair { a_plus: f64, a_minus: f64, q: f64 },
    /// `c x^{-q-1} dx` carried by the ray `(x, rho x)`.
    DiagonalRay { c: f64, rho: f64, q: f64 },
}

/// One hair: `x` up, `y` down, planted at time `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hair {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl PiMeasureSpec {
    pub fn q(&self) -> f64 {
        match *self {
            Self::AxisPair { q, .. } | Self::DiagonalRay { q, .. } => q,
        }
    }

    pub fn eta(&self) -> f64 {
        4.0 - self.q()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        if !(q > 2.0 && q <= 4.0) {
            return Err(Error::InvalidArgument(format!(
                "q = {q} gives eta outside [0, 2)"
            )));
        }
        let ok = match *self {
            Self::AxisPair {
                a_plus, a_minus, ..
            } => a_plus >= 0.0 && a_minus >= 0.0,
            Self::DiagonalRay { c, rho, .. } => c >= 0.0 && rho >= 0.0 && rho.is_finite(),
        };
        if !ok {
            return Err(Error::InvalidArgument(
                "intensity parameters must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// `pi({x v y > gamma})`.
    pub fn mass_above(&self, gamma: f64) -> Result<f64> {
        self.validate()?;
        if !(gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "infinite mass above gamma = {gamma}"
            )));
        }
        Ok(match *self {
            Self::AxisPair { a_plus, a_minus, q } => (a_plus + a_minus) * gamma.powf(-q),
            Self::DiagonalRay { c, rho, q } => c / q * (gamma / rho.max(1.0)).powf(-q),
        })
    }

    /// A draw from `pi` restricted to `{x v y > gamma}` and normalised.
    pub fn sample_above<R: Rng + ?Sized>(&self, gamma: f64, rng: &mut R) -> (f64, f64) {
        let u: f64 = rng.random();
        match *self {
            Self::AxisPair { a_plus, a_minus, q } => {
                let r = gamma * (1.0 - u).powf(-1.0 / q);
                if rng.random::<f64>() * (a_plus + a_minus) < a_plus {
                    (r, 0.0)
                } else {
                    (0.0, r)
                }
            }
            Self::DiagonalRay { rho, q, .. } => {
                let x = gamma / rho.max(1.0) * (1.0 - u).powf(-1.0 / q);
                (x, rho * x)
            }
        }
    }
}

/// Points of `Leb[0,1] (x) pi` with `x v y > gamma`, sorted by time.
pub fn sample_hairy_ppp<R: Rng + ?Sized>(
    spec: &PiMeasureSpec,
    gamma: f64,
    rng: &mut R,
) -> Result<Vec<Hair>> {
    let mass = spec.mass_above(gamma)?;
    if mass == 0.0 {
        return Ok(Vec::new());
    }
    let count = Poisson::new(mass)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .sample(rng) as usize;
    let mut hairs: Vec<Hair> = (0..count)
        .map(|_| {
            let t: f64 = rng.random();
            let (x, y) = spec.sample_above(gamma, rng);
            Hair { t, x, y }
        })
        .collect();
    hairs.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(hairs)
}

/// `U(f, S)`: the graph of `f` (linear between grid points on `[0, 1]`) with
/// the vertical segments `[f(t) - y, f(t) + x]` at each hair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HairySet {
    pub grid: Vec<(f64, f64)>,
    pub hairs: Vec<Hair>,
    pub eps: f64,
}

pub const DEFAULT_SET_RESOLUTION: f64 = 1e-3;

fn interpolate(grid: &[(f64, f64)], t: f64) -> f64 {
    let idx = grid.partition_point(|p| p.0 < t);
    if idx == 0 {
        return grid[0].1;
    }
    if idx == grid.len() {
        return grid[grid.len() - 1].1;
    }
    let (t1, f1) = grid[idx - 1];
    let (t2, f2) = grid[idx];
    if t2 == t1 {
        f2
    } else {
        f1 + (t - t1) / (t2 - t1) * (f2 - f1)
    }
}

/// `f` is sampled at `i / (f.len() - 1)`.
pub fn hairy_union(f: &[f64], hairs: &[Hair], eps: f64) -> Result<HairySet> {
    if f.is_empty() {
        return Err(Error::InvalidArgument("empty function grid".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let m = f.len();
    let grid = if m == 1 {
        vec![(0.0, f[0])]
    } else {
        f.iter()
            .enumerate()
            .map(|(i, &y)| (i as f64 / (m - 1) as f64, y))
            .collect()
    };
    Ok(HairySet {
        grid,
        hairs: hairs.to_vec(),
        eps,
    })
}

impl HairySet {
    pub fn value_at(&self, t: f64) -> f64 {
        interpolate(&self.grid, t)
    }

    /// Hair segments as `(t, lo, hi)`.
    pub fn segments(&self) -> Vec<(f64, f64, f64)> {
        self.hairs
            .iter()
            .map(|h| {
                let y0 = self.value_at(h.t);
                (h.t, y0 - h.y, y0 + h.x)
            })
            .collect()
    }

    /// Point cloud with spacing at most `eps` along the graph and the hairs.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for w in self.grid.windows(2) {
            let (t1, y1) = w[0];
            let (t2, y2) = w[1];
            let len = ((t2 - t1).powi(2) + (y2 - y1).powi(2)).sqrt();
            let steps = (len / self.eps).ceil().max(1.0) as usize;
            for s in 0..steps {
                let u = s as f64 / steps as f64;
                pts.push((t1 + u * (t2 - t1), y1 + u * (y2 - y1)));
            }
        }
        if let Some(&last) = self.grid.last() {
            pts.push(last);
        }
        for (t, lo, hi) in self.segments() {
            let steps = ((hi - lo) / self.eps).ceil().max(1.0) as usize;
            for s in 0..=steps {
                pts.push((t, lo + (hi - lo) * s as f64 / steps as f64));
            }
        }
        pts
    }

    /// CSV with columns `t,lo,hi`: grid samples (`lo == hi`) then hairs.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,lo,hi")?;
        for &(t, y) in &self.grid {
            writeln!(out, "{t},{y},{y}")?;
        }
        for (t, lo, hi) in self.segments() {
            writeln!(out, "{t},{lo},{hi}")?;
        }
        Ok(())
    }
}

// sup over a in A of the distance from a to B; `b` sorted by first coordinate.
fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut worst: f64 = 0.0;
    for &(x, y) in a {
        let start = b.partition_point(|p| p.0 < x);
        let mut best = f64::INFINITY;
        let mut i = start;
        while i < b.len() && b[i].0 - x < best {
            best = best.min(((b[i].0 - x).powi(2) + (b[i].1 - y).powi(2)).sqrt());
            i += 1;
        }
        let mut i = start;
        while i > 0 && x - b[i - 1].0 < best {
            best = best.min(((b[i - 1].0 - x).powi(2) + (b[i - 1].1 - y).powi(2)).sqrt());
            i -= 1;
        }
        worst = worst.max(best);
        if worst.is_infinite() {
            break;
        }
    }
    worst
}

/// Hausdorff distance between finite planar point sets.
pub fn hausdorff_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "Hausdorff distance of an empty set".into(),
        ));
    }
    let sort = |s: &[(f64, f64)]| {
        let mut v = s.to_vec();
        v.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));
        v
    };
    let (sa, sb) = (sort(a), sort(b));
    Ok(directed(&sa, &sb).max(directed(&sb, &sa)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::stream_rng;

    #[test]
    fn one_leaf() {
        let mut rng = stream_rng(3, 0);
        let t = build_continuum_tree(1, &mut rng);
        assert_eq!(t.h[0], t.j[0]);
        assert_eq!(t.tau, vec![0]);
    }

    #[test]
    fn two_leaves_recursion() {
        let mut rng = stream_rng(4, 0);
        for _ in 0..100 {
            let t = build_continuum_tree(2, &mut rng);
            assert!((t.h[1] - (t.a[0] + t.j[1] - t.j[0])).abs() < 1e-12);
            let expect = if t.sides[0] { vec![1, 0] } else { vec![0, 1] };
            assert_eq!(t.tau, expect);
        }
    }

    #[test]
    fn hausdorff_basics() {
        assert_eq!(
            hausdorff_distance(&[(0.0, 0.0)], &[(0.0, 1.0)]).unwrap(),
            1.0
        );
        assert!(hausdorff_distance(&[], &[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn empty_intensity() {
        let spec = PiMeasureSpec::AxisPair {
            a_plus: 0.0,
            a_minus: 0.0,
            q: 4.0,
        };
        let mut rng = stream_rng(1, 1);
        assert!(sample_hairy_ppp(&spec, 1.0, &mut rng).unwrap().is_empty());
        assert!(sample_hairy_ppp(&spec, 0.0, &mut rng).is_err());
    }
}
