//! Offspring laws, conditioned degree sequences, uniform edge-label orders,
//! and two independent samplers of size-conditioned trees.

use std::path::Path;

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linebreak::build_tree_only;
use crate::tree::{DegreeSequence, EdgeLabelSeq, LabeledOrderedTree};

/// The generator used everywhere. Streams are independent ChaCha streams.
pub type SimRng = ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum LawKind {
    Poisson1,
    GeometricHalf,
    Finite,
}

/// A critical offspring distribution `mu` on the non-negative integers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OffspringLaw {
    name: String,
    kind: LawKind,
    pmf: Vec<f64>,
    #[serde(skip)]
    exact: Option<Vec<BigRational>>,
}

impl OffspringLaw {
    /// `poisson1`, `geometric_half` or `binary`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "poisson1" => {
                // e^{-1}/k!, cut at double-precision underflow.
                let mut pmf = Vec::new();
                let mut p = (-1.0f64).exp();
                let mut k = 0usize;
                while p >= 1e-300 || k < 2 {
                    pmf.push(p);
                    k += 1;
                    p /= k as f64;
                    if p < 1e-300 {
                        break;
                    }
                }
                Ok(Self {
                    name: name.into(),
                    kind: LawKind::Poisson1,
                    pmf,
                    exact: None,
                })
            }
            "geometric_half" => {
                let mut pmf = Vec::new();
                let mut p = 0.5;
                while p > 1e-300 {
                    pmf.push(p);
                    p *= 0.5;
                }
                Ok(Self {
                    name: name.into(),
                    kind: LawKind::GeometricHalf,
                    pmf,
                    exact: None,
                })
            }
            "binary" => {
                let half = BigRational::new(1.into(), 2.into());
                let exact = vec![half.clone(), BigRational::zero(), half];
                Ok(Self::from_exact("binary", exact, false)?)
            }
            other => Err(Error::InvalidLaw(format!("unknown builtin law '{other}'"))),
        }
    }

    /// A finite law given by exact rational masses. `require_gcd1` enforces
    /// that the support has greatest common divisor one.
    pub fn from_exact(name: &str, masses: Vec<BigRational>, require_gcd1: bool) -> Result<Self> {
        if masses.iter().any(|m| m.is_negative()) {
            return Err(Error::InvalidLaw("negative mass".into()));
        }
        let total: BigRational = masses.iter().cloned().sum();
        if !total.is_one() {
            return Err(Error::InvalidLaw(format!("masses sum to {total}, not 1")));
        }
        let pmf: Vec<f64> = masses
            .iter()
            .map(|m| m.to_f64().unwrap_or(f64::NAN))
            .collect();
        let law = Self {
            name: name.into(),
            kind: LawKind::Finite,
            pmf,
            exact: Some(masses),
        };
        law.check(require_gcd1)?;
        Ok(law)
    }

    /// A finite law given by floating masses (no exact arithmetic available).
    pub fn from_pmf(name: &str, pmf: Vec<f64>) -> Result<Self> {
        if pmf.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::InvalidLaw("negative or non-finite mass".into()));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidLaw(format!("masses sum to {total}, not 1")));
        }
        let law = Self {
            name: name.into(),
            kind: LawKind::Finite,
            pmf,
            exact: None,
        };
        law.check(true)?;
        Ok(law)
    }

    /// Reads a two-column `k,mass` CSV. Masses may be decimals or `a/b`.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows: Vec<(usize, BigRational)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (Some(k), Some(m), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Parse(format!(
                    "line {}: expected two columns",
                    lineno + 1
                )));
            };
            let Ok(k) = k.parse::<usize>() else {
                if lineno == 0 {
                    continue; // header
                }
                return Err(Error::Parse(format!("line {}: bad k '{k}'", lineno + 1)));
            };
            rows.push((k, parse_rational(m)?));
        }
        let kmax = rows
            .iter()
            .map(|r| r.0)
            .max()
            .ok_or_else(|| Error::Parse("empty pmf".into()))?;
        let mut masses = vec![BigRational::zero(); kmax + 1];
        for (k, m) in rows {
            if !masses[k].is_zero() {
                return Err(Error::Parse(format!("k = {k} listed twice")));
            }
            masses[k] = m;
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("custom");
        Self::from_exact(name, masses, true)
    }

    fn check(&self, require_gcd1: bool) -> Result<()> {
        let mean = self.mean();
        if (mean - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidLaw(format!(
                "mean {mean} is not 1 (law must be critical)"
            )));
        }
        if require_gcd1 && self.support_gcd() != 1 {
            return Err(Error::InvalidLaw(format!(
                "support has gcd {}",
                self.support_gcd()
            )));
        }
        if self.pmf[0] <= 0.0 || self.pmf[0] + self.pmf.get(1).copied().unwrap_or(0.0) >= 1.0 {
            return Err(Error::InvalidLaw(
                "need mu_0 > 0 and mu_0 + mu_1 < 1".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Masses `mu_0, mu_1, ...` (truncated for infinite-support laws).
    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn mass(&self, k: usize) -> f64 {
        self.pmf.get(k).copied().unwrap_or(0.0)
    }

    pub fn exact_pmf(&self) -> Option<&[BigRational]> {
        self.exact.as_deref()
    }

    pub fn moment(&self, p: i32) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(k, &m)| m * (k as f64).powi(p))
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.moment(2) - m * m
    }

    pub fn sigma(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn third_moment(&self) -> f64 {
        self.moment(3)
    }

    /// `P(xi odd)`.
    pub fn odd_mass(&self) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .filter(|(k, _)| k % 2 == 1)
            .map(|(_, &m)| m)
            .sum()
    }

    /// Size-biased masses `k mu_k / E[xi]`.
    pub fn size_biased(&self) -> Vec<f64> {
        let mean = self.mean();
        self.pmf
            .iter()
            .enumerate()
            .map(|(k, &m)| k as f64 * m / mean)
            .collect()
    }

    pub fn support_gcd(&self) -> usize {
        self.pmf
            .iter()
            .enumerate()
            .filter(|(k, &m)| *k > 0 && m > 0.0)
            .fold(0, |g, (k, _)| num::integer::gcd(g, k))
    }

    /// Whether `P(S_n = n - 1) > 0` for iid sums with this law.
    pub fn admits_size(&self, n: usize) -> bool {
        if n == 0 {
            return false;
        }
        match self.kind {
            LawKind::Poisson1 | LawKind::GeometricHalf => true,
            LawKind::Finite => {
                let g = self.support_gcd();
                let kmax = self.pmf.len() - 1;
                g > 0 && (n - 1) % g == 0 && kmax * n >= n - 1
            }
        }
    }
}

/// Parses `3`, `0.25`, `1/3` or `2.5e-1` into an exact rational.
pub fn parse_rational(s: &str) -> Result<BigRational> {
    let bad = || Error::Parse(format!("bad number '{s}'"));
    if let Some((a, b)) = s.split_once('/') {
        let a: BigInt = a.trim().parse().map_err(|_| bad())?;
        let b: BigInt = b.trim().parse().map_err(|_| bad())?;
        if b.is_zero() {
            return Err(bad());
        }
        return Ok(BigRational::new(a, b));
    }
    let (mant, exp) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (s, 0),
    };
    let (int, frac) = mant.split_once('.').unwrap_or((mant, ""));
    let neg = int.starts_with('-');
    let digits = format!("{}{}", int.trim_start_matches(['-', '+']), frac);
    if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let num: BigInt = digits.parse().map_err(|_| bad())?;
    let scale = exp - frac.len() as i32;
    let ten = BigInt::from(10);
    let mut r = BigRational::from_integer(num);
    if scale >= 0 {
        r *= BigRational::from_integer(num::pow(ten, scale as usize));
    } else {
        r /= BigRational::from_integer(num::pow(ten, (-scale) as usize));
    }
    Ok(if neg { -r } else { r })
}

/// Default number of rejected attempts allowed when conditioning on the sum.
pub fn default_budget(n: usize) -> u64 {
    (1e4 * (n as f64).sqrt()).ceil() as u64
}

/// iid `mu` degrees conditioned to sum to `n - 1`.
pub fn sample_degree_sequence<R: Rng + ?Sized>(
    law: &OffspringLaw,
    n: usize,
    rng: &mut R,
) -> Result<DegreeSequence> {
    sample_degree_sequence_budget(law, n, default_budget(n), rng)
}

pub fn sample_degree_sequence_budget<R: Rng + ?Sized>(
    law: &OffspringLaw,
    n: usize,
    budget: u64,
    rng: &mut R,
) -> Result<DegreeSequence> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if !law.admits_size(n) {
        return Err(Error::InvalidArgument(format!(
            "law {} cannot produce a tree of size {n}",
            law.name
        )));
    }
    let d = match law.kind {
        LawKind::Poisson1 => {
            // Conditioned Poisson counts are multinomial with equal cells.
            let mut d = vec![0usize; n];
            for _ in 0..n - 1 {
                d[rng.random_range(0..n)] += 1;
            }
            d
        }
        LawKind::GeometricHalf => {
            // Uniform composition of n - 1 into n parts (stars and bars).
            let slots = 2 * n - 2;
            let mut is_bar = vec![false; slots];
            for i in rand::seq::index::sample(rng, slots, n - 1) {
                is_bar[i] = true;
            }
            let mut d = vec![0usize; n];
            let mut part = 0;
            for b in is_bar {
                if b {
                    part += 1;
                } else {
                    d[part] += 1;
                }
            }
            d
        }
        LawKind::Finite => sample_finite_counts(law, n, budget, rng)?,
    };
    DegreeSequence::new(d)
}

/// Rejection on the multinomial count vector: given the counts, an iid
/// sequence is a uniform arrangement of them.
fn sample_finite_counts<R: Rng + ?Sized>(
    law: &OffspringLaw,
    n: usize,
    budget: u64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let support: Vec<usize> = (0..law.pmf.len()).filter(|&k| law.pmf[k] > 0.0).collect();
    let mut counts = vec![0u64; support.len()];
    for _ in 0..budget.max(1) {
        let mut left = n as u64;
        let mut mass_left = 1.0;
        let mut total = 0u64;
        for (i, &k) in support.iter().enumerate() {
            let c = if i + 1 == support.len() || left == 0 {
                left
            } else {
                let p = (law.pmf[k] / mass_left).clamp(0.0, 1.0);
                Binomial::new(left, p).expect("valid binomial").sample(rng)
            };
            counts[i] = c;
            left -= c;
            mass_left -= law.pmf[k];
            total += c * k as u64;
        }
        if total == n as u64 - 1 {
            let mut d = Vec::with_capacity(n);
            for (i, &k) in support.iter().enumerate() {
                d.extend(std::iter::repeat_n(k, counts[i] as usize));
            }
            d.shuffle(rng);
            return Ok(d);
        }
    }
    Err(Error::BudgetExhausted(budget))
}

/// Uniform ordering of the edge labels of `d`.
pub fn uniform_edge_perm<R: Rng + ?Sized>(d: &DegreeSequence, rng: &mut R) -> EdgeLabelSeq {
    let n = d.n();
    let mut pairs = Vec::with_capacity(n - 1);
    for v in 1..=n {
        for c in 1..=d.get(v) {
            pairs.push((v, c));
        }
    }
    pairs.shuffle(rng);
    EdgeLabelSeq::new(n, pairs).expect("expanded multiset is valid")
}

/// Size-conditioned tree through the line-breaking bijection.
pub fn sample_tree<R: Rng + ?Sized>(
    law: &OffspringLaw,
    n: usize,
    rng: &mut R,
) -> Result<LabeledOrderedTree> {
    let d = sample_degree_sequence(law, n, rng)?;
    Ok(build_tree_only(&uniform_edge_perm(&d, rng)))
}

/// Independent sampler: rotate the degree sequence into an excursion (cycle
/// lemma), read it in depth-first order, then label uniformly at random.
pub fn sample_conditioned_tree_cyclelemma<R: Rng + ?Sized>(
    law: &OffspringLaw,
    n: usize,
    rng: &mut R,
) -> Result<LabeledOrderedTree> {
    let d = sample_degree_sequence(law, n, rng)?;
    let d = d.as_slice();
    // The walk sum_{j<=i}(d_j - 1) ends at -1; start right after the first
    // time it reaches its minimum.
    let mut acc = 0i64;
    let mut min = i64::MAX;
    let mut argmin = 0;
    for (i, &x) in d.iter().enumerate() {
        acc += x as i64 - 1;
        if acc < min {
            min = acc;
            argmin = i;
        }
    }
    let degs: Vec<usize> = (0..n).map(|i| d[(argmin + 1 + i) % n]).collect();
    let mut labels: Vec<usize> = (1..=n).collect();
    labels.shuffle(rng);
    Ok(tree_from_preorder_degrees(&degs, &labels))
}

/// Plane tree whose depth-first vertices have degrees `degs`, the `i`-th
/// vertex receiving `labels[i]`. `degs` must be a Łukasiewicz excursion.
pub fn tree_from_preorder_degrees(degs: &[usize], labels: &[usize]) -> LabeledOrderedTree {
    let n = degs.len();
    let mut children = vec![Vec::new(); n + 1];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for (i, &k) in degs.iter().enumerate() {
        let v = labels[i];
        if let Some(top) = stack.last_mut() {
            children[top.0].push(v);
            top.1 -= 1;
            if top.1 == 0 {
                stack.pop();
            }
        }
        if k > 0 {
            stack.push((v, k));
        }
    }
    LabeledOrderedTree::from_children(labels[0], &children).expect("excursion gives a tree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_moments() {
        let b = OffspringLaw::builtin("binary").unwrap();
        assert_eq!(b.variance(), 1.0);
        assert_eq!(b.third_moment(), 4.0);
        let p = OffspringLaw::builtin("poisson1").unwrap();
        assert!((p.mean() - 1.0).abs() < 1e-12);
        assert!((p.variance() - 1.0).abs() < 1e-12);
        let g = OffspringLaw::builtin("geometric_half").unwrap();
        assert!((g.mean() - 1.0).abs() < 1e-12);
        assert!((g.variance() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_laws() {
        let r = |a: i64, b: i64| BigRational::new(a.into(), b.into());
        assert!(OffspringLaw::from_exact("x", vec![r(1, 2), r(1, 2)], true).is_err());
        assert!(OffspringLaw::from_exact("x", vec![r(1, 2), r(0, 1), r(1, 2)], true).is_err());
        assert!(OffspringLaw::from_exact("x", vec![r(-1, 2), r(3, 2)], true).is_err());
        assert!(OffspringLaw::from_exact("x", vec![r(1, 3), r(1, 3), r(1, 3)], true).is_ok());
        assert!(OffspringLaw::builtin("zipf").is_err());
    }

    #[test]
    fn parses_rationals() {
        let r = |a: i64, b: i64| BigRational::new(a.into(), b.into());
        assert_eq!(parse_rational("0.25").unwrap(), r(1, 4));
        assert_eq!(parse_rational("1/3").unwrap(), r(1, 3));
        assert_eq!(parse_rational("2.5e-1").unwrap(), r(1, 4));
        assert_eq!(parse_rational("3").unwrap(), r(3, 1));
        assert!(parse_rational("abc").is_err());
    }

    #[test]
    fn binary_n3_degrees() {
        let b = OffspringLaw::builtin("binary").unwrap();
        let mut rng = stream_rng(3, 0);
        for _ in 0..50 {
            let mut d = sample_degree_sequence(&b, 3, &mut rng)
                .unwrap()
                .as_slice()
                .to_vec();
            d.sort();
            assert_eq!(d, vec![0, 0, 2]);
        }
        assert!(sample_degree_sequence(&b, 4, &mut rng).is_err());
    }

    #[test]
    fn cycle_lemma_gives_excursion() {
        let law = OffspringLaw::builtin("geometric_half").unwrap();
        let mut rng = stream_rng(5, 0);
        for n in [1, 2, 7, 40] {
            let t = sample_conditioned_tree_cyclelemma(&law, n, &mut rng).unwrap();
            let w = crate::tree::lukasiewicz(&t);
            assert!(w[..n].iter().all(|&x| x >= 0));
            assert_eq!(w[n], -1);
        }
    }
}
