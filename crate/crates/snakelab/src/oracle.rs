//! Exact small-n checks: exhaustive enumeration against closed-form laws.
//!
//! Everything here works in rational arithmetic. Joint laws are compared
//! row by row; each report carries a final `unobserved` row holding the
//! formula mass that fell outside the enumerated support.

use std::collections::{BTreeMap, HashMap};

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::displacements::{DisplacementModel, IidLaw};
use crate::error::{Error, Result};
use crate::linebreak::{build_tree, build_tree_only, deconstruct_tree, first_appearance_order};
use crate::sampling::{sample_tree, stream_rng, uniform_edge_perm, OffspringLaw};
use crate::tree::{DegreeSequence, EdgeLabelSeq, LabeledOrderedTree};

pub type Q = BigRational;

/// Largest `n` for which `P_d` is enumerated.
pub const MAX_ENUM_N: usize = 9;

fn qi(x: usize) -> Q {
    Q::from_integer(BigInt::from(x))
}

fn qf(a: i64, b: i64) -> Q {
    Q::new(BigInt::from(a), BigInt::from(b))
}

fn q_to_f64(x: &Q) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn q_str(x: &Q) -> String {
    if x.is_integer() {
        x.numer().to_string()
    } else {
        format!("{}/{}", x.numer(), x.denom())
    }
}

fn factorial(n: usize) -> u128 {
    (1..=n as u128).product()
}

/// Computed versus formula probabilities for one law.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExactLawReport {
    pub law_name: String,
    pub support: Vec<String>,
    pub computed_probabilities: Vec<String>,
    pub formula_probabilities: Vec<String>,
    pub max_abs_diff: f64,
    pub mismatches: usize,
    pub computed_total: String,
    pub notes: Vec<String>,
}

impl ExactLawReport {
    fn from_rows(name: impl Into<String>, rows: Vec<(String, Q, Q)>, notes: Vec<String>) -> Self {
        let mut support = Vec::with_capacity(rows.len() + 1);
        let mut computed = Vec::with_capacity(rows.len() + 1);
        let mut formula = Vec::with_capacity(rows.len() + 1);
        let mut max_diff = Q::zero();
        let mut mismatches = 0;
        let mut total_c = Q::zero();
        let mut total_f = Q::zero();
        let mut push = |label: String, c: Q, f: Q| {
            let d = (&c - &f).abs();
            if !d.is_zero() {
                mismatches += 1;
            }
            if d > max_diff {
                max_diff = d;
            }
            support.push(label);
            computed.push(q_str(&c));
            formula.push(q_str(&f));
        };
        for (label, c, f) in rows {
            total_c += &c;
            total_f += &f;
            push(label, c, f);
        }
        push("unobserved".into(), Q::zero(), Q::one() - total_f);
        Self {
            law_name: name.into(),
            support,
            computed_probabilities: computed,
            formula_probabilities: formula,
            max_abs_diff: q_to_f64(&max_diff),
            mismatches,
            computed_total: q_str(&total_c),
            notes,
        }
    }

    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.computed_total == "1"
    }
}

/// All orderings of the edge labels of `d`, in lexicographic order.
pub struct PdIter {
    n: usize,
    base: Vec<(usize, usize)>,
    perm: Vec<usize>,
    done: bool,
}

impl Iterator for PdIter {
    type Item = EdgeLabelSeq;

    fn next(&mut self) -> Option<EdgeLabelSeq> {
        if self.done {
            return None;
        }
        let out =
            EdgeLabelSeq::new_unchecked(self.n, self.perm.iter().map(|&i| self.base[i]).collect());
        // next permutation
        let p = &mut self.perm;
        match (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) {
            None => self.done = true,
            Some(i) => {
                let j = (i..p.len())
                    .rev()
                    .find(|&j| p[j] > p[i - 1])
                    .expect("pivot");
                p.swap(i - 1, j);
                p[i..].reverse();
            }
        }
        Some(out)
    }
}

pub fn enumerate_pd(d: &DegreeSequence) -> Result<PdIter> {
    let n = d.n();
    if n > MAX_ENUM_N {
        return Err(Error::TooLarge(format!(
            "enumeration of P_d needs n <= {MAX_ENUM_N}, got {n}"
        )));
    }
    let base: Vec<(usize, usize)> = (1..=n)
        .flat_map(|v| (1..=d.get(v)).map(move |c| (v, c)))
        .collect();
    let perm = (0..base.len()).collect();
    Ok(PdIter {
        n,
        base,
        perm,
        done: false,
    })
}

/// Every degree sequence of length `n` summing to `n - 1`.
pub fn degree_sequences(n: usize) -> Vec<DegreeSequence> {
    fn rec(i: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<DegreeSequence>) {
        let n = cur.capacity();
        if i + 1 == n {
            cur.push(left);
            out.push(DegreeSequence::new(cur.clone()).expect("sums to n - 1"));
            cur.pop();
            return;
        }
        for x in 0..=left {
            cur.push(x);
            rec(i + 1, left - x, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    rec(0, n - 1, &mut Vec::with_capacity(n), &mut out);
    out
}

/// Outcome of the exhaustive round-trip check.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct BijectionCheck {
    pub degree_sequences: usize,
    pub sequences: u64,
    pub failures: u64,
}

/// `B^{-1}(B(pi)) = pi` and `B(B^{-1}(T)) = T` over all `pi` in `P_d`, all
/// `d` with `n <= max_n`.
pub fn check_bijection_exhaustive(max_n: usize) -> Result<BijectionCheck> {
    if max_n > MAX_ENUM_N {
        return Err(Error::TooLarge(format!("max_n must be <= {MAX_ENUM_N}")));
    }
    let ds: Vec<DegreeSequence> = (1..=max_n).flat_map(degree_sequences).collect();
    let per: Vec<(u64, u64)> = ds
        .par_iter()
        .map(|d| {
            let mut count = 0;
            let mut bad = 0;
            for pi in enumerate_pd(d).expect("n checked") {
                count += 1;
                let t = build_tree_only(&pi);
                let back = deconstruct_tree(&t);
                if back != pi || build_tree_only(&back) != t || t.validate().is_err() {
                    bad += 1;
                }
            }
            (count, bad)
        })
        .collect();
    Ok(BijectionCheck {
        degree_sequences: ds.len(),
        sequences: per.iter().map(|x| x.0).sum(),
        failures: per.iter().map(|x| x.1).sum(),
    })
}

fn fmt_seq(v: &[usize]) -> String {
    let s: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("({})", s.join(","))
}

/// `prod_j d_{x_j} / (n - 1 - sum_{i<j} d_{x_i})`.
pub fn sb_order_probability(d: &DegreeSequence, order: &[usize]) -> Q {
    let mut rest = d.n() - 1;
    let mut p = Q::one();
    for &v in order {
        p *= qf(d.get(v) as i64, rest as i64);
        rest -= d.get(v);
    }
    p
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.is_empty() {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

/// Law of the first-appearance order of internal vertices under uniform
/// `pi` in `P_d`, against the size-biased product.
pub fn check_sb_order_law(d: &DegreeSequence) -> Result<ExactLawReport> {
    let total = factorial(d.n().saturating_sub(1));
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for pi in enumerate_pd(d)? {
        *counts.entry(first_appearance_order(&pi)).or_default() += 1;
    }
    let internal: Vec<usize> = (1..=d.n()).filter(|&v| d.get(v) > 0).collect();
    let rows = permutations(&internal)
        .into_iter()
        .map(|o| {
            let c = counts.get(&o).copied().unwrap_or(0);
            let f = sb_order_probability(d, &o);
            (fmt_seq(&o), Q::new(BigInt::from(c), BigInt::from(total)), f)
        })
        .collect();
    Ok(ExactLawReport::from_rows(
        format!("first-appearance order, d={}", fmt_seq(d.as_slice())),
        rows,
        Vec::new(),
    ))
}

// s_q = sum_{l <= q} d(vhat_l), clamped at the number of internal vertices.
fn prefix_sums(d: &DegreeSequence, vhat: &[usize]) -> Vec<usize> {
    let mut s = vec![0];
    for &v in vhat {
        s.push(s.last().unwrap() + d.get(v));
    }
    s
}

/// `P(Jtilde_{i+1} > base + k | Jtilde_1..Jtilde_i = .., base, Vhat)` where
/// `base = Jtilde_i` (`0` when `i = 0`):
/// `prod_{p=base}^{base+k-1} (n - 1 - s_{p-i}) / (n - 1 - p)`.
pub fn repeat_survival(n: usize, s: &[usize], i: usize, base: usize, k: usize) -> Q {
    let big_n = s.len() - 1;
    let mut p = Q::one();
    for pos in base..base + k {
        if pos + 1 >= n {
            return Q::zero();
        }
        let idx = (pos - i).min(big_n);
        p *= qf((n - 1 - s[idx]) as i64, (n - 1 - pos) as i64);
        if p.is_zero() {
            break;
        }
    }
    p
}

fn repeat_step(n: usize, s: &[usize], i: usize, base: usize, next: usize) -> Q {
    let k = next - base;
    if next >= n {
        repeat_survival(n, s, i, base, n - 1 - base)
    } else {
        repeat_survival(n, s, i, base, k - 1) - repeat_survival(n, s, i, base, k)
    }
}

// Survival forms as printed: the first-repeat product and the later-repeat
// product, evaluated literally where every factor lies in [0, 1].
fn literal_first(n: usize, d: &DegreeSequence, vhat: &[usize], k: usize) -> Option<Q> {
    let mut p = Q::one();
    for j in 1..=k {
        if j > vhat.len() || n - 1 <= j {
            return None;
        }
        let sum: usize = vhat[..j].iter().map(|&v| d.get(v) + 1).sum();
        let f = Q::one() - qf(sum as i64, (n - 1 - j) as i64);
        if f.is_negative() || f > Q::one() {
            return None;
        }
        p *= f;
    }
    Some(p)
}

fn literal_later(
    n: usize,
    d: &DegreeSequence,
    vhat: &[usize],
    i: usize,
    base: usize,
    k: usize,
) -> Option<Q> {
    let mut p = Q::one();
    for j in base..=base + k {
        if j > vhat.len() || j >= n {
            return None;
        }
        let sum: i64 = vhat[..j].iter().map(|&v| d.get(v) as i64 - 1).sum::<i64>() - i as i64;
        let f = Q::one() - qf(sum, (n - j) as i64);
        if f.is_negative() || f > Q::one() {
            return None;
        }
        p *= f;
    }
    Some(p)
}

/// Joint law of `(Vhat, Jtilde)` from enumeration, against the product of
/// the size-biased order law and the conditional repeat-time laws.
pub fn check_repeat_laws(d: &DegreeSequence) -> Result<ExactLawReport> {
    let n = d.n();
    if n > 8 {
        return Err(Error::TooLarge("repeat-law check needs n <= 8".into()));
    }
    let total = factorial(n.saturating_sub(1));
    let mut counts: BTreeMap<(Vec<usize>, Vec<usize>), u64> = BTreeMap::new();
    for pi in enumerate_pd(d)? {
        let (_, tr) = build_tree(&pi);
        *counts.entry((tr.vhat, tr.jtilde)).or_default() += 1;
    }

    // Conditional survival from enumeration, for the literal-form diagnostics.
    let mut cond: BTreeMap<(Vec<usize>, Vec<usize>), (u64, Vec<u64>)> = BTreeMap::new();
    for ((vhat, jt), &c) in &counts {
        for i in 0..jt.len() {
            let e = cond
                .entry((vhat.clone(), jt[..i].to_vec()))
                .or_insert((0, vec![0; n + 1]));
            e.0 += c;
            let base = if i == 0 { 0 } else { jt[i - 1] };
            for k in 0..=n {
                if jt[i] > base + k {
                    e.1[k] += c;
                }
            }
        }
    }
    let (mut lit_ok, mut lit_bad, mut lit_out) = (0, 0, 0);
    for ((vhat, prefix), (c, surv)) in &cond {
        let i = prefix.len();
        let base = prefix.last().copied().unwrap_or(0);
        if base >= n {
            continue;
        }
        for k in 1..n - base {
            let lit = if i == 0 {
                literal_first(n, d, vhat, k)
            } else {
                literal_later(n, d, vhat, i, base, k)
            };
            match lit {
                None => lit_out += 1,
                Some(v) if v == Q::new(BigInt::from(surv[k]), BigInt::from(*c)) => lit_ok += 1,
                Some(_) => lit_bad += 1,
            }
        }
    }

    let rows = counts
        .iter()
        .map(|((vhat, jt), &c)| {
            let s = prefix_sums(d, vhat);
            let mut f = sb_order_probability(d, vhat);
            let mut base = 0;
            for (i, &next) in jt.iter().enumerate() {
                f *= repeat_step(n, &s, i, base, next);
                base = next;
            }
            (
                format!("Vhat={};Jtilde={}", fmt_seq(vhat), fmt_seq(jt)),
                Q::new(BigInt::from(c), BigInt::from(total)),
                f,
            )
        })
        .collect();
    let notes = vec![format!(
        "printed survival products: {lit_ok} agree, {lit_bad} disagree, {lit_out} outside [0,1] or undefined"
    )];
    Ok(ExactLawReport::from_rows(
        format!("repeat times, d={}", fmt_seq(d.as_slice())),
        rows,
        notes,
    ))
}

/// Exact rational masses of a finite-support law.
pub fn exact_masses(law: &OffspringLaw) -> Result<Vec<Q>> {
    law.exact_pmf().map(|m| m.to_vec()).ok_or_else(|| {
        Error::InvalidLaw(format!("law '{}' has no finite rational pmf", law.name()))
    })
}

/// Point masses of `S_m`, built by repeated convolution and cached.
pub struct ConvTable {
    pmf: Vec<Q>,
    powers: Vec<Vec<Q>>,
}

impl ConvTable {
    pub fn new(pmf: &[Q]) -> Self {
        Self {
            pmf: pmf.to_vec(),
            powers: vec![vec![Q::one()]],
        }
    }

    pub fn prob(&mut self, terms: usize, value: i64) -> Q {
        while self.powers.len() <= terms {
            let last = self.powers.last().unwrap();
            let mut next = vec![Q::zero(); last.len() + self.pmf.len() - 1];
            for (a, pa) in last.iter().enumerate() {
                if pa.is_zero() {
                    continue;
                }
                for (b, pb) in self.pmf.iter().enumerate() {
                    if !pb.is_zero() {
                        next[a + b] += pa * pb;
                    }
                }
            }
            self.powers.push(next);
        }
        if value < 0 {
            return Q::zero();
        }
        self.powers[terms]
            .get(value as usize)
            .cloned()
            .unwrap_or_else(Q::zero)
    }

    pub fn mean(&self) -> Q {
        self.pmf.iter().enumerate().map(|(k, p)| qi(k) * p).sum()
    }
}

/// Root-degree law of the size-conditioned tree by exhaustive enumeration of
/// Łukasiewicz excursions, against Kemperman's formula.
pub fn check_kemperman(law: &OffspringLaw, n: usize) -> Result<ExactLawReport> {
    let pmf = exact_masses(law)?;
    kemperman_report(law.name(), &pmf, n)
}

pub fn kemperman_report(name: &str, pmf: &[Q], n: usize) -> Result<ExactLawReport> {
    if n > 12 || n < 2 {
        return Err(Error::TooLarge("Kemperman check needs 2 <= n <= 12".into()));
    }
    let mut conv = ConvTable::new(pmf);
    let denom = conv.prob(n, n as i64 - 1);
    if denom.is_zero() {
        return Err(Error::InvalidArgument(format!("P(S_{n} = {}) = 0", n - 1)));
    }
    let support: Vec<usize> = (0..pmf.len()).filter(|&k| !pmf[k].is_zero()).collect();
    let mut by_root = vec![Q::zero(); pmf.len()];
    // depth-first over degree sequences whose walk stays >= 0 until the last step
    fn rec(
        pmf: &[Q],
        support: &[usize],
        n: usize,
        pos: usize,
        open: i64,
        w: Q,
        root: usize,
        acc: &mut [Q],
    ) {
        if pos == n {
            if open == 0 {
                acc[root] += w;
            }
            return;
        }
        if open == 0 {
            return;
        }
        for &k in support {
            let next = open - 1 + k as i64;
            if next > (n - pos - 1) as i64 {
                continue;
            }
            rec(pmf, support, n, pos + 1, next, &w * &pmf[k], root, acc);
        }
    }
    for &k in &support {
        rec(
            pmf,
            &support,
            n,
            1,
            k as i64,
            pmf[k].clone(),
            k,
            &mut by_root,
        );
    }
    let total: Q = by_root.iter().sum();
    let rows = (1..pmf.len())
        .filter(|&k| !pmf[k].is_zero())
        .map(|k| {
            let computed = &by_root[k] / &total;
            let f = qf(n as i64, n as i64 - 1) * conv.prob(n - 1, n as i64 - 1 - k as i64) / &denom
                * qi(k)
                * &pmf[k];
            (format!("k={k}"), computed, f)
        })
        .collect();
    Ok(ExactLawReport::from_rows(
        format!("root degree, {name}, n={n}"),
        rows,
        Vec::new(),
    ))
}

/// The change-of-measure density for the first `m = ks.len()` size-biased degrees.
pub fn theta_n(pmf: &[Q], n: usize, ks: &[usize]) -> Result<Q> {
    let mut conv = ConvTable::new(pmf);
    theta_n_with(&mut conv, n, ks)
}

fn theta_n_with(conv: &mut ConvTable, n: usize, ks: &[usize]) -> Result<Q> {
    let m = ks.len();
    if m >= n {
        return Err(Error::InvalidArgument("need m < n".into()));
    }
    let den = conv.prob(n, n as i64 - 1);
    if den.is_zero() {
        return Err(Error::InvalidArgument(format!("P(S_{n} = {}) = 0", n - 1)));
    }
    let total: usize = ks.iter().sum();
    if total > n - 1 {
        return Ok(Q::zero());
    }
    let mut p = conv.prob(n - m, (n - 1 - total) as i64) / den;
    let mut used = 0;
    for (i, &k) in ks.iter().enumerate() {
        p *= qf((n - i) as i64, (n - 1 - used) as i64);
        used += k;
    }
    Ok(p)
}

/// The prefixed version: `r` fixed degrees summing to `s` ahead of `n - r`
/// free entries.
pub fn theta_general(
    pmf: &[Q],
    n: usize,
    r: usize,
    s: usize,
    prefix: &[usize],
    ks: &[usize],
) -> Result<Q> {
    let mut conv = ConvTable::new(pmf);
    theta_general_with(&mut conv, n, r, s, prefix, ks)
}

fn theta_general_with(
    conv: &mut ConvTable,
    n: usize,
    r: usize,
    s: usize,
    prefix: &[usize],
    ks: &[usize],
) -> Result<Q> {
    let m = ks.len();
    if prefix.len() != r || prefix.iter().sum::<usize>() != s || prefix.contains(&0) {
        return Err(Error::InvalidArgument(
            "prefix must hold r positive degrees summing to s".into(),
        ));
    }
    if r >= n || s >= n || m > n - r {
        return Err(Error::InvalidArgument(
            "need r, s < n and m <= n - r".into(),
        ));
    }
    let den = conv.prob(n - r, (n - 1 - s) as i64);
    if den.is_zero() {
        return Err(Error::InvalidArgument(
            "conditioning event has probability 0".into(),
        ));
    }
    let total: usize = ks.iter().sum();
    if total > n - 1 - s {
        return Ok(Q::zero());
    }
    let mean = conv.mean();
    let mut p = conv.prob(n - r - m, (n - 1 - s - total) as i64) / den;
    for _ in 0..m {
        p *= &mean;
    }
    let mut used = 0;
    for (i, &k) in ks.iter().enumerate() {
        p *= qf((n - r - i) as i64, (n - 1 - used) as i64);
        used += k;
    }
    Ok(p)
}

// Count vectors c over values 0..len with sum(c) = slots and sum(v c_v) = total,
// weighted by multinomial(slots; c) prod pmf_v^{c_v}.
fn count_vectors(pmf: &[Q], slots: usize, total: usize) -> Vec<(Vec<usize>, Q)> {
    fn rec(
        pmf: &[Q],
        v: usize,
        slots: usize,
        total: usize,
        cur: &mut Vec<usize>,
        w: Q,
        out: &mut Vec<(Vec<usize>, Q)>,
    ) {
        if v == pmf.len() {
            if slots == 0 && total == 0 {
                out.push((cur.clone(), w));
            }
            return;
        }
        let mut wc = w;
        let mut binom = Q::one();
        for c in 0..=slots {
            if c > 0 {
                if pmf[v].is_zero() || c * v > total {
                    break;
                }
                binom = binom * qi(slots - c + 1) / qi(c);
                wc = &wc * &pmf[v];
            }
            cur.push(c);
            rec(pmf, v + 1, slots - c, total - c * v, cur, &wc * &binom, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(pmf, 0, slots, total, &mut Vec::new(), Q::one(), &mut out);
    out
}

// Law of the first m size-biased picks among the free entries (counts c),
// with `blocked` weight that ends a path when picked.
fn sb_picks(
    c: &mut [usize],
    blocked: usize,
    m: usize,
    w: Q,
    cur: &mut Vec<usize>,
    out: &mut BTreeMap<Vec<usize>, Q>,
) {
    if cur.len() == m {
        *out.entry(cur.clone()).or_insert_with(Q::zero) += w;
        return;
    }
    let rest: usize = c.iter().enumerate().map(|(v, &x)| v * x).sum::<usize>() + blocked;
    for v in 1..c.len() {
        if c[v] == 0 {
            continue;
        }
        let p = &w * qf((v * c[v]) as i64, rest as i64);
        c[v] -= 1;
        cur.push(v);
        sb_picks(c, blocked, m, p, cur, out);
        cur.pop();
        c[v] += 1;
    }
}

fn tuples(vals: &[usize], m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..m {
        out = out
            .into_iter()
            .flat_map(|t| {
                vals.iter().map(move |&v| {
                    let mut u = t.clone();
                    u.push(v);
                    u
                })
            })
            .collect();
    }
    out
}

/// `P(first m size-biased degrees = k, N >= m)` against `prod mu-bar(k_i) * Theta(k)`,
/// for every `k` with positive size-biased mass.
pub fn check_theta_general_identity(
    pmf: &[Q],
    n: usize,
    prefix: &[usize],
    m: usize,
) -> Result<ExactLawReport> {
    let r = prefix.len();
    let s: usize = prefix.iter().sum();
    if n > 8 {
        return Err(Error::TooLarge("identity check needs n <= 8".into()));
    }
    let mut conv = ConvTable::new(pmf);
    let den = conv.prob(n - r, (n - 1 - s) as i64);
    if den.is_zero() {
        return Err(Error::InvalidArgument(
            "conditioning event has probability 0".into(),
        ));
    }
    let mut lhs: BTreeMap<Vec<usize>, Q> = BTreeMap::new();
    for (mut c, w) in count_vectors(pmf, n - r, n - 1 - s) {
        sb_picks(&mut c, s, m, w / &den, &mut Vec::new(), &mut lhs);
    }
    let mean = conv.mean();
    let positive: Vec<usize> = (1..pmf.len()).filter(|&k| !pmf[k].is_zero()).collect();
    let mut rows = Vec::new();
    for ks in tuples(&positive, m) {
        let mut f = theta_general_with(&mut conv, n, r, s, prefix, &ks)?;
        for &k in &ks {
            f *= qi(k) * &pmf[k] / &mean;
        }
        let c = lhs.remove(&ks).unwrap_or_else(Q::zero);
        rows.push((fmt_seq(&ks), c, f));
    }
    for (ks, c) in lhs {
        rows.push((fmt_seq(&ks), c, Q::zero()));
    }
    // Both sides are sub-probabilities; renormalise them by P(N >= m, no prefix pick)
    // so the report's rows form a law.
    let mass: Q = rows.iter().map(|r| r.1.clone()).sum();
    let notes = vec![format!(
        "mass of the event (both sides before normalisation): {}",
        q_str(&mass)
    )];
    if mass.is_zero() {
        return Ok(ExactLawReport::from_rows(
            format!("theta n={n} r={r} s={s} m={m}"),
            Vec::new(),
            notes,
        ));
    }
    let rows = rows
        .into_iter()
        .map(|(l, c, f)| (l, c / &mass, f / &mass))
        .collect();
    Ok(ExactLawReport::from_rows(
        format!("theta n={n} r={r} s={s} m={m}"),
        rows,
        notes,
    ))
}

/// The unprefixed identity, using the unprefixed density.
pub fn check_theta_n_identity(pmf: &[Q], n: usize, m: usize) -> Result<ExactLawReport> {
    let general = check_theta_general_identity(pmf, n, &[], m)?;
    let mut conv = ConvTable::new(pmf);
    let mean = conv.mean();
    // Recompute the formula column with theta_n itself.
    let positive: Vec<usize> = (1..pmf.len()).filter(|&k| !pmf[k].is_zero()).collect();
    let mut lhs: BTreeMap<Vec<usize>, Q> = BTreeMap::new();
    let den = conv.prob(n, n as i64 - 1);
    for (mut c, w) in count_vectors(pmf, n, n - 1) {
        sb_picks(&mut c, 0, m, w / &den, &mut Vec::new(), &mut lhs);
    }
    let mut rows = Vec::new();
    let mut expect_theta = Q::zero();
    let mut p_n_ge_m = Q::zero();
    for ks in tuples(&positive, m) {
        let th = theta_n_with(&mut conv, n, &ks)?;
        let mut bar = Q::one();
        for &k in &ks {
            bar *= qi(k) * &pmf[k] / &mean;
        }
        expect_theta += &bar * &th;
        let c = lhs.remove(&ks).unwrap_or_else(Q::zero);
        p_n_ge_m += &c;
        rows.push((fmt_seq(&ks), c, bar * th));
    }
    let mut notes = general.notes;
    notes.push(format!(
        "E[Theta] = {}, P(N >= m) = {}",
        q_str(&expect_theta),
        q_str(&p_n_ge_m)
    ));
    // Unnormalised rows plus the complementary event N < m.
    rows.push(("N<m".into(), Q::one() - &p_n_ge_m, Q::one() - &expect_theta));
    Ok(ExactLawReport::from_rows(
        format!("theta n={n} m={m}"),
        rows,
        notes,
    ))
}

// ---------------------------------------------------------------------------
// Pruning and grafting on plane spatial trees with integer displacements.

/// One vertex in depth-first order: out-degree and the displacements of its children.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlaneNode {
    pub deg: usize,
    pub disp: Vec<i64>,
}

pub type PlaneTree = Vec<PlaneNode>;

fn subtree_end(t: &[PlaneNode], i: usize) -> usize {
    let mut open = 1usize;
    let mut j = i;
    while open > 0 {
        open = open - 1 + t[j].deg;
        j += 1;
    }
    j
}

/// `(T', sorted cut subtrees)` for threshold `tau`.
pub fn prune(t: &[PlaneNode], tau: f64) -> (PlaneTree, Vec<PlaneTree>) {
    let mut kept = Vec::with_capacity(t.len());
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < t.len() {
        let node = &t[i];
        if node.disp.iter().any(|&y| (y as f64).abs() > tau) {
            let end = subtree_end(t, i);
            cuts.push(t[i..end].to_vec());
            kept.push(PlaneNode {
                deg: 0,
                disp: Vec::new(),
            });
            i = end;
        } else {
            kept.push(node.clone());
            i += 1;
        }
    }
    cuts.sort();
    (kept, cuts)
}

/// Replaces the leaves at preorder positions `leaves` (increasing) by `parts`.
pub fn graft(t: &[PlaneNode], leaves: &[usize], parts: &[&PlaneTree]) -> PlaneTree {
    let mut out = Vec::new();
    let mut next = 0;
    for (i, node) in t.iter().enumerate() {
        if next < leaves.len() && leaves[next] == i {
            out.extend(parts[next].iter().cloned());
            next += 1;
        } else {
            out.push(node.clone());
        }
    }
    out
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, m, &mut Vec::new(), &mut out);
    out
}

/// Law of `T' (+) (cuts in uniform order)` at uniformly chosen leaves of `T'`.
pub fn graft_prediction(tp: &PlaneTree, cuts: &[PlaneTree]) -> BTreeMap<PlaneTree, Q> {
    let leaves: Vec<usize> = (0..tp.len()).filter(|&i| tp[i].deg == 0).collect();
    let m = cuts.len();
    let idx: Vec<usize> = (0..m).collect();
    let perms = permutations(&idx);
    let mut out: BTreeMap<PlaneTree, Q> = BTreeMap::new();
    let subs = subsets(leaves.len(), m);
    let each = Q::one() / (qi(subs.len()) * qi(perms.len()));
    for s in &subs {
        let pos: Vec<usize> = s.iter().map(|&i| leaves[i]).collect();
        for p in &perms {
            let parts: Vec<&PlaneTree> = p.iter().map(|&i| &cuts[i]).collect();
            *out.entry(graft(tp, &pos, &parts)).or_insert_with(Q::zero) += &each;
        }
    }
    out
}

/// A tiny size-conditioned spatial tree model with integer displacements.
#[derive(Clone, Debug)]
pub struct PruneGraftInstance {
    pub pmf: Vec<Q>,
    pub n: usize,
    pub atoms: Vec<(i64, Q)>,
    pub tau: f64,
}

impl Default for PruneGraftInstance {
    fn default() -> Self {
        Self {
            pmf: vec![qf(1, 3), qf(1, 3), qf(1, 3)],
            n: 6,
            atoms: vec![(-1, qf(2, 3)), (2, qf(1, 3))],
            tau: 1.5,
        }
    }
}

type ClassKey = (PlaneTree, Vec<PlaneTree>);

impl PruneGraftInstance {
    /// Every spatial plane tree of size `n` with its (unnormalised) probability.
    pub fn all_trees(&self) -> Vec<(PlaneTree, Q)> {
        let mut shapes = Vec::new();
        fn rec(pmf: &[Q], n: usize, cur: &mut Vec<usize>, open: usize, out: &mut Vec<Vec<usize>>) {
            if cur.len() == n {
                if open == 0 {
                    out.push(cur.clone());
                }
                return;
            }
            if open == 0 {
                return;
            }
            for k in 0..pmf.len() {
                if pmf[k].is_zero() || open - 1 + k > n - cur.len() - 1 {
                    continue;
                }
                cur.push(k);
                rec(pmf, n, cur, open - 1 + k, out);
                cur.pop();
            }
        }
        for k in 0..self.pmf.len() {
            if self.pmf[k].is_zero() {
                continue;
            }
            let mut cur = vec![k];
            if self.n == 1 {
                if k == 0 {
                    shapes.push(cur);
                }
                continue;
            }
            rec(&self.pmf, self.n, &mut cur, k, &mut shapes);
        }
        let mut out = Vec::new();
        for degs in shapes {
            let mut w = Q::one();
            for &k in &degs {
                w *= &self.pmf[k];
            }
            let edges = self.n - 1;
            let mut assign = vec![0usize; edges];
            loop {
                let mut wy = w.clone();
                let mut nodes = Vec::with_capacity(degs.len());
                let mut e = 0;
                for &k in &degs {
                    let disp: Vec<i64> = (0..k)
                        .map(|j| {
                            let a = &self.atoms[assign[e + j]];
                            wy *= &a.1;
                            a.0
                        })
                        .collect();
                    e += k;
                    nodes.push(PlaneNode { deg: k, disp });
                }
                out.push((nodes, wy));
                // odometer
                let mut pos = 0;
                while pos < edges {
                    assign[pos] += 1;
                    if assign[pos] < self.atoms.len() {
                        break;
                    }
                    assign[pos] = 0;
                    pos += 1;
                }
                if pos == edges {
                    break;
                }
            }
        }
        out
    }

    /// Conditional law given the pruned data, class by class, against the
    /// uniform-grafting law.
    pub fn exact_report(&self) -> ExactLawReport {
        let trees = self.all_trees();
        let total: Q = trees.iter().map(|t| t.1.clone()).sum();
        let mut classes: BTreeMap<ClassKey, BTreeMap<PlaneTree, Q>> = BTreeMap::new();
        for (t, w) in trees {
            let key = prune(&t, self.tau);
            *classes
                .entry(key)
                .or_default()
                .entry(t)
                .or_insert_with(Q::zero) += w;
        }
        let mut rows = Vec::new();
        let mut nontrivial = 0;
        for (ci, ((tp, cuts), members)) in classes.iter().enumerate() {
            let class_mass: Q = members.values().sum();
            let pred = graft_prediction(tp, cuts);
            if pred.len() > 1 {
                nontrivial += 1;
            }
            let mut keys: Vec<&PlaneTree> = members.keys().chain(pred.keys()).collect();
            keys.sort();
            keys.dedup();
            for (ti, t) in keys.into_iter().enumerate() {
                let c = members.get(t).map(|w| w / &total).unwrap_or_else(Q::zero);
                let f = pred
                    .get(t)
                    .map(|p| p * &class_mass / &total)
                    .unwrap_or_else(Q::zero);
                rows.push((format!("class{ci}:tree{ti}"), c, f));
            }
        }
        let notes = vec![format!(
            "{} classes, {} with more than one grafting outcome",
            classes.len(),
            nontrivial
        )];
        ExactLawReport::from_rows("prune/graft conditional law", rows, notes)
    }

    fn offspring_law(&self) -> Result<OffspringLaw> {
        OffspringLaw::from_exact("prune-graft", self.pmf.clone(), false)
    }

    fn displacement_model(&self) -> DisplacementModel {
        DisplacementModel::Iid(IidLaw::Atoms(
            self.atoms
                .iter()
                .map(|(v, p)| (*v as f64, q_to_f64(p)))
                .collect(),
        ))
    }
}

/// Depth-first plane form of a labelled spatial tree (displacements rounded).
pub fn plane_form(spatial: &crate::tree::SpatialTree) -> PlaneTree {
    let t = spatial.tree();
    t.preorder()
        .into_iter()
        .map(|v| PlaneNode {
            deg: t.degree(v),
            disp: spatial
                .displacement(v)
                .iter()
                .map(|y| y.round() as i64)
                .collect(),
        })
        .collect()
}

/// Chi-square of sampled trees against the grafting prediction, within each
/// class of the pruned data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PruneGraftMc {
    pub seed: u64,
    pub samples: u64,
    pub chi2: f64,
    pub df: usize,
    pub p_value: f64,
    pub cells: usize,
    pub classes_used: usize,
    pub classes_skipped: usize,
    pub impossible_outcomes: u64,
}

pub fn check_prune_graft_mc(
    inst: &PruneGraftInstance,
    samples: u64,
    seed: u64,
) -> Result<PruneGraftMc> {
    let law = inst.offspring_law()?;
    let model = inst.displacement_model();
    const CHUNK: u64 = 10_000;
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Result<BTreeMap<PlaneTree, u64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c);
            let mut counts = BTreeMap::new();
            let todo = CHUNK.min(samples - c * CHUNK);
            for _ in 0..todo {
                let t = sample_tree(&law, inst.n, &mut rng)?;
                let sp = crate::displacements::sample_displacements(&t, &model, &mut rng)?;
                *counts.entry(plane_form(&sp)).or_default() += 1;
            }
            Ok(counts)
        })
        .collect();
    let mut counts: BTreeMap<PlaneTree, u64> = BTreeMap::new();
    for p in parts {
        for (k, v) in p? {
            *counts.entry(k).or_default() += v;
        }
    }
    let mut classes: BTreeMap<ClassKey, BTreeMap<PlaneTree, u64>> = BTreeMap::new();
    for (t, c) in counts {
        classes.entry(prune(&t, inst.tau)).or_default().insert(t, c);
    }
    let (mut chi2, mut df, mut cells, mut used, mut skipped, mut impossible) =
        (0.0, 0usize, 0usize, 0usize, 0usize, 0u64);
    for ((tp, cuts), obs) in &classes {
        let pred = graft_prediction(tp, cuts);
        let n_class: u64 = obs.values().sum();
        for (t, &c) in obs {
            if !pred.contains_key(t) {
                impossible += c;
            }
        }
        if pred.len() < 2 {
            continue;
        }
        let min_expected = pred
            .values()
            .map(|p| q_to_f64(p) * n_class as f64)
            .fold(f64::INFINITY, f64::min);
        if min_expected < 5.0 {
            skipped += 1;
            continue;
        }
        used += 1;
        df += pred.len() - 1;
        for (t, p) in &pred {
            let e = q_to_f64(p) * n_class as f64;
            let o = obs.get(t).copied().unwrap_or(0) as f64;
            chi2 += (o - e) * (o - e) / e;
            cells += 1;
        }
    }
    let p_value = if impossible > 0 {
        0.0
    } else if df == 0 {
        1.0
    } else {
        ChiSquared::new(df as f64)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sf(chi2)
    };
    Ok(PruneGraftMc {
        seed,
        samples,
        chi2,
        df,
        p_value,
        cells,
        classes_used: used,
        classes_skipped: skipped,
        impossible_outcomes: impossible,
    })
}

/// Monte Carlo estimate of `P(B_d <= b)` beside the closed-form bound.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AncestralBound {
    pub empirical: f64,
    pub stderr: f64,
    /// `None` when `n - 1 - b Delta <= 0`.
    pub bound: Option<f64>,
    pub holds: bool,
}

fn ancestral_min_distance(t: &LabeledOrderedTree, depth: &[usize], set: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in set.iter().enumerate() {
        for &b in &set[i + 1..] {
            let (lo, hi) = if depth[a] >= depth[b] { (a, b) } else { (b, a) };
            let diff = depth[lo] - depth[hi];
            let mut u = lo;
            for _ in 0..diff {
                u = t.parent(u);
            }
            if u == hi {
                best = Some(best.map_or(diff, |x: usize| x.min(diff)));
            }
        }
    }
    best
}

pub fn check_ancestral_bound<R: Rng + ?Sized>(
    d: &DegreeSequence,
    set: &[usize],
    b: usize,
    reps: u64,
    rng: &mut R,
) -> Result<AncestralBound> {
    let n = d.n();
    if set.iter().any(|&v| v == 0 || v > n) {
        return Err(Error::InvalidArgument("vertex outside [n]".into()));
    }
    let k = set.len() as f64;
    let delta = d.max_degree() as f64;
    let room = (n as f64) - 1.0 - b as f64 * delta;
    let bound = (room > 0.0).then(|| k * (1.0 - (1.0 - k * delta / room).powi(b as i32)));
    let mut hits = 0u64;
    for _ in 0..reps {
        let t = build_tree_only(&uniform_edge_perm(d, rng));
        let depth = t.depths();
        if ancestral_min_distance(&t, &depth, set).is_some_and(|x| x <= b) {
            hits += 1;
        }
    }
    let p = hits as f64 / reps as f64;
    let stderr = (p * (1.0 - p) / reps as f64).sqrt();
    let holds = bound.is_none_or(|bd| p <= bd + 3.0 * stderr);
    Ok(AncestralBound {
        empirical: p,
        stderr,
        bound,
        holds,
    })
}

/// Every exact check at its default size, as run by the `oracle` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OracleSuite {
    pub bijection: BijectionCheck,
    pub reports: Vec<ExactLawReport>,
    pub prune_graft_mc: Vec<PruneGraftMc>,
    pub passed: bool,
}

pub fn default_degree_sequences() -> Vec<DegreeSequence> {
    [
        vec![2, 1, 0, 0],
        vec![3, 2, 1, 0, 0, 0, 0],
        vec![1, 2, 0, 1, 0, 2, 1, 0],
        vec![0, 3, 0, 1, 1, 0, 2, 0],
        vec![1, 1, 1, 1, 0],
    ]
    .into_iter()
    .map(|d| DegreeSequence::new(d).expect("valid"))
    .collect()
}

pub fn run_oracle_suite(seed: u64, mc_samples: u64) -> Result<OracleSuite> {
    let bijection = check_bijection_exhaustive(7)?;
    let mut reports = Vec::new();
    for d in default_degree_sequences() {
        reports.push(check_sb_order_law(&d)?);
        reports.push(check_repeat_laws(&d)?);
    }
    let binary = OffspringLaw::builtin("binary")?;
    let ternary = OffspringLaw::from_exact("ternary", vec![qf(1, 3), qf(1, 3), qf(1, 3)], true)?;
    let skewed = OffspringLaw::from_exact(
        "skewed",
        vec![qf(13, 24), qf(1, 4), Q::zero(), qf(1, 12), qf(1, 8)],
        true,
    )?;
    for law in [&binary, &ternary, &skewed] {
        for n in [3, 5, 8, 11] {
            if law.admits_size(n)
                && exact_masses(law)
                    .map(|m| ConvTable::new(&m).prob(n, n as i64 - 1) > Q::zero())?
            {
                reports.push(check_kemperman(law, n)?);
            }
        }
        let pmf = exact_masses(law)?;
        for (n, m) in [(5, 1), (7, 2), (8, 3)] {
            if ConvTable::new(&pmf).prob(n, n as i64 - 1).is_zero() {
                continue;
            }
            reports.push(check_theta_n_identity(&pmf, n, m)?);
        }
        for (n, prefix, m) in [(5, vec![2], 1), (7, vec![1, 2], 2), (8, vec![3], 2)] {
            let s: usize = prefix.iter().sum();
            if ConvTable::new(&pmf)
                .prob(n - prefix.len(), (n - 1 - s) as i64)
                .is_zero()
            {
                continue;
            }
            reports.push(check_theta_general_identity(&pmf, n, &prefix, m)?);
        }
    }
    let inst = PruneGraftInstance::default();
    reports.push(inst.exact_report());
    let mut prune_graft_mc = Vec::new();
    if mc_samples > 0 {
        for i in 0..3 {
            prune_graft_mc.push(check_prune_graft_mc(
                &inst,
                mc_samples,
                seed.wrapping_add(i),
            )?);
        }
    }
    let mc_ok =
        prune_graft_mc.is_empty() || prune_graft_mc.iter().filter(|r| r.p_value < 1e-3).count() < 2;
    let passed = bijection.failures == 0 && reports.iter().all(|r| r.passed()) && mc_ok;
    Ok(OracleSuite {
        bijection,
        reports,
        prune_graft_mc,
        passed,
    })
}
