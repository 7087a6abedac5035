//! Displacement laws on the edges of a tree, their global moments, and the
//! typical / mid-range / large split of displacement vectors.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::sampling::OffspringLaw;
use crate::tree::{LabeledOrderedTree, SpatialTree};

/// Law of a single displacement, used coordinate-wise for iid models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum IidLaw {
    Zero,
    Normal {
        mean: f64,
        sd: f64,
    },
    /// Finitely many `(value, probability)` atoms.
    Atoms(Vec<(f64, f64)>),
    HeavyTail(HeavyTail),
}

/// Exact power tails beyond `cutoff` and two atoms at `±core` inside it:
/// `P(Y >= y) = a_plus y^-q` and `P(Y <= -y) = a_minus y^-q` for `y >= cutoff`.
/// The atom weights are solved so that `E[Y] = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeavyTail {
    pub q: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    pub cutoff: f64,
    pub core: f64,
    w_plus: f64,
    w_minus: f64,
}

impl HeavyTail {
    pub fn new(q: f64, a_plus: f64, a_minus: f64, cutoff: f64, core: f64) -> Result<Self> {
        if !(q > 2.0) {
            return Err(Error::InvalidModel(format!(
                "tail exponent q = {q} must exceed 2"
            )));
        }
        if a_plus < 0.0 || a_minus < 0.0 || !(cutoff > 0.0) || !(core > 0.0) || core >= cutoff {
            return Err(Error::InvalidModel(
                "need a_± >= 0 and 0 < core < cutoff".into(),
            ));
        }
        let p_plus = a_plus * cutoff.powf(-q);
        let p_minus = a_minus * cutoff.powf(-q);
        let core_mass = 1.0 - p_plus - p_minus;
        if !(core_mass > 0.0) {
            return Err(Error::InvalidModel(
                "tail mass beyond the cutoff exceeds 1".into(),
            ));
        }
        let tail_mean = q / (q - 1.0) * cutoff * (p_plus - p_minus);
        let diff = -tail_mean / core;
        let w_plus = (core_mass + diff) / 2.0;
        let w_minus = (core_mass - diff) / 2.0;
        if w_plus < 0.0 || w_minus < 0.0 {
            return Err(Error::InvalidModel(
                "core atom too small to centre the tails".into(),
            ));
        }
        Ok(Self {
            q,
            a_plus,
            a_minus,
            cutoff,
            core,
            w_plus,
            w_minus,
        })
    }

    pub fn core_weights(&self) -> (f64, f64) {
        (self.w_plus, self.w_minus)
    }

    fn tail_masses(&self) -> (f64, f64) {
        let s = self.cutoff.powf(-self.q);
        (self.a_plus * s, self.a_minus * s)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (pp, pm) = self.tail_masses();
        let u: f64 = rng.random();
        if u < pp + pm {
            let v: f64 = rng.random();
            let mag = self.cutoff * (1.0 - v).powf(-1.0 / self.q);
            if u < pp {
                mag
            } else {
                -mag
            }
        } else if u < pp + pm + self.w_plus {
            self.core
        } else {
            -self.core
        }
    }

    /// `(P(|Y| <= t), E[Y; |Y| <= t], E[Y^2; |Y| <= t])`.
    fn truncated(&self, t: f64) -> (f64, f64, f64) {
        let q = self.q;
        let (mut p, mut m1, mut m2) = (0.0, 0.0, 0.0);
        if self.core <= t {
            p += self.w_plus + self.w_minus;
            m1 += self.core * (self.w_plus - self.w_minus);
            m2 += self.core * self.core * (self.w_plus + self.w_minus);
        }
        if t >= self.cutoff {
            let a = self.a_plus + self.a_minus;
            let d = self.a_plus - self.a_minus;
            p += a * (self.cutoff.powf(-q) - t.powf(-q));
            m1 += d * q / (q - 1.0) * (self.cutoff.powf(1.0 - q) - t.powf(1.0 - q));
            m2 += a * q / (q - 2.0) * (self.cutoff.powf(2.0 - q) - t.powf(2.0 - q));
        }
        (p, m1, m2)
    }
}

impl IidLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            IidLaw::Zero => 0.0,
            IidLaw::Normal { mean, sd } => Normal::new(*mean, *sd).expect("validated").sample(rng),
            IidLaw::Atoms(atoms) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for &(x, p) in atoms {
                    acc += p;
                    if u < acc {
                        return x;
                    }
                }
                atoms.last().map_or(0.0, |a| a.0)
            }
            IidLaw::HeavyTail(h) => h.sample(rng),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            IidLaw::Normal { sd, .. } if !(*sd >= 0.0) => {
                Err(Error::InvalidModel("sd must be >= 0".into()))
            }
            IidLaw::Atoms(a) => {
                let s: f64 = a.iter().map(|x| x.1).sum();
                if a.is_empty() || a.iter().any(|x| x.1 < 0.0) || (s - 1.0).abs() > 1e-12 {
                    Err(Error::InvalidModel(
                        "atom probabilities must be >= 0 and sum to 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// `(P(|Y| <= t), E[Y; |Y| <= t], E[Y^2; |Y| <= t])`; `t` may be infinite.
    pub fn truncated(&self, t: f64) -> (f64, f64, f64) {
        match self {
            IidLaw::Zero => (if t >= 0.0 { 1.0 } else { 0.0 }, 0.0, 0.0),
            IidLaw::Normal { mean, sd } => {
                if *sd == 0.0 {
                    return if mean.abs() <= t {
                        (1.0, *mean, mean * mean)
                    } else {
                        (0.0, 0.0, 0.0)
                    };
                }
                if t.is_infinite() {
                    return (1.0, *mean, mean * mean + sd * sd);
                }
                let z = StatNormal::standard();
                let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let a = (-t - mean) / sd;
                let b = (t - mean) / sd;
                let p = z.cdf(b) - z.cdf(a);
                let e1 = phi(a) - phi(b);
                let e2 = p + a * phi(a) - b * phi(b);
                (
                    p,
                    mean * p + sd * e1,
                    mean * mean * p + 2.0 * mean * sd * e1 + sd * sd * e2,
                )
            }
            IidLaw::Atoms(atoms) => atoms
                .iter()
                .filter(|a| a.0.abs() <= t)
                .fold((0.0, 0.0, 0.0), |s, &(x, p)| {
                    (s.0 + p, s.1 + p * x, s.2 + p * x * x)
                }),
            IidLaw::HeavyTail(h) => h.truncated(t),
        }
    }
}

/// Sampler hook for sibling-dependent laws: `(k, rng) -> Y_k`.
pub type CustomSampler = Arc<dyn Fn(usize, &mut dyn RngCore) -> Vec<f64> + Send + Sync>;

/// The family `(nu_k)` of displacement-vector laws.
#[derive(Clone)]
pub enum DisplacementModel {
    Iid(IidLaw),
    /// `Y_{k,j} = sigma - (2 / sigma)(k - j)`.
    DeterministicSpread {
        sigma: f64,
    },
    /// `Y_{k,j} = c - min(j, k + 1 - j)`.
    Looptree {
        c: f64,
    },
    ExchangeableCustom(CustomSampler),
}

impl fmt::Debug for DisplacementModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Iid(l) => f.debug_tuple("Iid").field(l).finish(),
            Self::DeterministicSpread { sigma } => f
                .debug_struct("DeterministicSpread")
                .field("sigma", sigma)
                .finish(),
            Self::Looptree { c } => f.debug_struct("Looptree").field("c", c).finish(),
            Self::ExchangeableCustom(_) => f.write_str("ExchangeableCustom(..)"),
        }
    }
}

impl DisplacementModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Iid(l) => l.validate(),
            Self::DeterministicSpread { sigma } if *sigma == 0.0 || !sigma.is_finite() => Err(
                Error::InvalidModel("sigma must be finite and nonzero".into()),
            ),
            Self::Looptree { c } if !c.is_finite() => Err(Error::InvalidModel(
                "looptree constant must be finite".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Deterministic models: the vector `Y_k`.
    pub fn deterministic_vector(&self, k: usize) -> Option<Vec<f64>> {
        match self {
            Self::DeterministicSpread { sigma } => Some(
                (1..=k)
                    .map(|j| sigma - 2.0 / sigma * (k - j) as f64)
                    .collect(),
            ),
            Self::Looptree { c } => Some((1..=k).map(|j| c - j.min(k + 1 - j) as f64).collect()),
            _ => None,
        }
    }

    /// One draw of `Y_k`.
    pub fn sample_vector<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Iid(l) => (0..k).map(|_| l.sample(rng)).collect(),
            Self::ExchangeableCustom(f) => f(k, rng),
            _ => self.deterministic_vector(k).expect("deterministic model"),
        }
    }
}

/// Declarative form of a model, as read from configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisplacementSpec {
    Zero,
    Normal {
        #[serde(default)]
        mean: f64,
        sd: f64,
    },
    Atoms {
        values: Vec<f64>,
        probs: Vec<f64>,
    },
    /// `sigma` defaults to the standard deviation of the offspring law.
    DeterministicSpread {
        sigma: Option<f64>,
    },
    /// `c` defaults to the centring constant of the offspring law.
    Looptree {
        c: Option<f64>,
    },
    Pareto {
        q: f64,
        a_plus: f64,
        a_minus: f64,
        cutoff: f64,
        core: f64,
    },
}

impl DisplacementSpec {
    /// Parses the short CLI forms `zero`, `normal`, `deterministic_spread`,
    /// `looptree`, `pareto4`, `pareto3`, or a JSON object.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()));
        }
        Ok(match s {
            "zero" => Self::Zero,
            "normal" => Self::Normal { mean: 0.0, sd: 1.0 },
            "deterministic_spread" => Self::DeterministicSpread { sigma: None },
            "looptree" => Self::Looptree { c: None },
            "pareto4" => pareto_preset(4.0),
            "pareto3" => pareto_preset(3.0),
            other => return Err(Error::Parse(format!("unknown displacement '{other}'"))),
        })
    }

    pub fn to_model(&self, law: &OffspringLaw) -> Result<DisplacementModel> {
        let m = match self {
            Self::Zero => DisplacementModel::Iid(IidLaw::Zero),
            Self::Normal { mean, sd } => DisplacementModel::Iid(IidLaw::Normal {
                mean: *mean,
                sd: *sd,
            }),
            Self::Atoms { values, probs } => {
                if values.len() != probs.len() {
                    return Err(Error::InvalidModel(
                        "values and probs differ in length".into(),
                    ));
                }
                DisplacementModel::Iid(IidLaw::Atoms(
                    values.iter().copied().zip(probs.iter().copied()).collect(),
                ))
            }
            Self::DeterministicSpread { sigma } => DisplacementModel::DeterministicSpread {
                sigma: sigma.unwrap_or_else(|| law.sigma()),
            },
            Self::Looptree { c } => DisplacementModel::Looptree {
                c: c.unwrap_or_else(|| looptree_centre(law)),
            },
            Self::Pareto {
                q,
                a_plus,
                a_minus,
                cutoff,
                core,
            } => DisplacementModel::Iid(IidLaw::HeavyTail(HeavyTail::new(
                *q, *a_plus, *a_minus, *cutoff, *core,
            )?)),
        };
        m.validate()?;
        Ok(m)
    }
}

/// One-sided Pareto preset with unit tail constant: the limiting intensity
/// puts mass 1 above level 1.
/// Total tail weight 1, so the intensity puts mass 1 above level 1. For
/// `q < 4` the cutoff sits near half of `n^{1/3}` at `n = 10^5`, the core is
/// small and the tails are symmetric. Otherwise the diffusive part or the
/// centring drift swamps the hairs at any feasible size.
pub fn pareto_preset(q: f64) -> DisplacementSpec {
    if q < 4.0 {
        DisplacementSpec::Pareto {
            q,
            a_plus: 0.5,
            a_minus: 0.5,
            cutoff: 23.0,
            core: 0.02,
        }
    } else {
        DisplacementSpec::Pareto {
            q,
            a_plus: 1.0,
            a_minus: 0.0,
            cutoff: 2.0,
            core: 0.5,
        }
    }
}

/// `c* = E[xi^2]/4 + 1/2 + P(xi odd)/4`.
pub fn looptree_centre(law: &OffspringLaw) -> f64 {
    0.25 * law.moment(2) + 0.5 + 0.25 * law.odd_mass()
}

/// Draws independent `Y^(v) ~ nu_{c(v)}` in label order.
pub fn sample_displacements<R: Rng>(
    tree: &LabeledOrderedTree,
    model: &DisplacementModel,
    rng: &mut R,
) -> Result<SpatialTree> {
    model.validate()?;
    let mut disp = vec![0.0; tree.n() - 1];
    let mut offset = 0;
    for v in 1..=tree.n() {
        let k = tree.degree(v);
        if k == 0 {
            continue;
        }
        let y = model.sample_vector(k, rng);
        if y.len() != k {
            return Err(Error::InvalidModel(format!(
                "sampler returned {} entries for degree {k}",
                y.len()
            )));
        }
        disp[offset..offset + k].copy_from_slice(&y);
        offset += k;
    }
    SpatialTree::new(tree.clone(), disp)
}

/// `E[Y_{xi-bar, U}]` and `E[Y_{xi-bar, U}^2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMoments {
    pub mean: f64,
    pub beta2: f64,
}

/// Global moments as the double sum `sum_k mu_k sum_j E[Y_{k,j}^p]`.
pub fn global_moments(law: &OffspringLaw, model: &DisplacementModel) -> Result<GlobalMoments> {
    truncated_global_moments(law, model, f64::INFINITY)
}

/// Moments of `Y 1{||Y_k||_inf <= threshold}` (whole-vector gating).
pub fn truncated_global_moments(
    law: &OffspringLaw,
    model: &DisplacementModel,
    threshold: f64,
) -> Result<GlobalMoments> {
    let mut mean = 0.0;
    let mut beta2 = 0.0;
    match model {
        DisplacementModel::Iid(l) => {
            let (p, m1, m2) = l.truncated(threshold);
            for (k, &mu) in law.pmf().iter().enumerate().skip(1) {
                let w = mu * k as f64 * p.powi(k as i32 - 1);
                mean += w * m1;
                beta2 += w * m2;
            }
            if let IidLaw::HeavyTail(h) = l {
                if threshold.is_infinite() && h.q <= 2.0 {
                    return Err(Error::InvalidModel("second moment diverges".into()));
                }
            }
        }
        DisplacementModel::DeterministicSpread { .. } | DisplacementModel::Looptree { .. } => {
            for (k, &mu) in law.pmf().iter().enumerate().skip(1) {
                let y = model.deterministic_vector(k).expect("deterministic");
                if y.iter().any(|x| x.abs() > threshold) {
                    continue;
                }
                mean += mu * y.iter().sum::<f64>();
                beta2 += mu * y.iter().map(|x| x * x).sum::<f64>();
            }
        }
        DisplacementModel::ExchangeableCustom(_) => {
            return Err(Error::InvalidModel(
                "moments of a custom sampler are not available in closed form".into(),
            ))
        }
    }
    Ok(GlobalMoments { mean, beta2 })
}

/// Thresholds `n^{1/(4-eta) - delta}` and `gamma n^{1/(4-eta)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationBands {
    pub n: usize,
    pub eta: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl TruncationBands {
    pub fn new(n: usize, eta: f64, delta: f64, gamma: f64) -> Result<Self> {
        if !(0.0..2.0).contains(&eta) {
            return Err(Error::InvalidArgument(format!(
                "eta = {eta} must lie in [0, 2)"
            )));
        }
        if !(delta > 0.0) || !(gamma > 0.0) {
            return Err(Error::InvalidArgument(
                "delta and gamma must be positive".into(),
            ));
        }
        Ok(Self {
            n,
            eta,
            delta,
            gamma,
        })
    }

    /// `n^{1/(4 - eta)}`.
    pub fn scale(&self) -> f64 {
        (self.n as f64).powf(1.0 / (4.0 - self.eta))
    }

    pub fn threshold_typ(&self) -> f64 {
        (self.n as f64).powf(1.0 / (4.0 - self.eta) - self.delta)
    }

    pub fn threshold_large(&self) -> f64 {
        self.gamma * self.scale()
    }
}

fn sup_norm(y: &[f64]) -> f64 {
    y.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Typical, mid-range and large parts of the displacements, each gated on
/// the sup-norm of the whole vector. At small `n` the typical threshold can
/// exceed the large one; the typical band then wins so the parts still sum
/// to the original.
pub fn split_bands(
    spatial: &SpatialTree,
    bands: &TruncationBands,
) -> (SpatialTree, SpatialTree, SpatialTree) {
    let lo = bands.threshold_typ();
    let hi = bands.threshold_large().max(lo);
    let gate = |keep: &dyn Fn(f64) -> bool| {
        spatial.map_displacements(|_, y| {
            if keep(sup_norm(y)) {
                y.to_vec()
            } else {
                vec![0.0; y.len()]
            }
        })
    };
    (
        gate(&|s| s <= lo),
        gate(&|s| lo < s && s <= hi),
        gate(&|s| s > hi),
    )
}

/// Typical part recentred by its global drift, `Y 1{..} - E[Y 1{..}]`.
pub fn recentred_typical(
    spatial: &SpatialTree,
    law: &OffspringLaw,
    model: &DisplacementModel,
    bands: &TruncationBands,
) -> Result<SpatialTree> {
    let lo = bands.threshold_typ();
    let drift = truncated_global_moments(law, model, lo)?.mean;
    Ok(spatial.map_displacements(|_, y| {
        let keep = sup_norm(y) <= lo;
        y.iter()
            .map(|&x| if keep { x - drift } else { -drift })
            .collect()
    }))
}

/// One entry of the large-jump list: the largest positive and negative
/// displacement away from `vertex`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LargeJump {
    pub vertex: usize,
    pub plus: f64,
    pub minus: f64,
}

/// Vectors with sup-norm above the large threshold, as `(Y+, Y-)` pairs in
/// decreasing order of the larger, then the smaller coordinate; remaining ties
/// go to the smaller vertex label.
pub fn large_jump_ordering(spatial: &SpatialTree, bands: &TruncationBands) -> Vec<LargeJump> {
    let hi = bands.threshold_large();
    let tree = spatial.tree();
    let mut out: Vec<LargeJump> = (1..=tree.n())
        .filter(|&v| !tree.is_leaf(v))
        .filter_map(|v| {
            let y = spatial.displacement(v);
            if sup_norm(y) <= hi {
                return None;
            }
            let plus = y.iter().fold(0.0f64, |m, &x| m.max(x));
            let minus = y.iter().fold(0.0f64, |m, &x| m.max(-x));
            Some(LargeJump {
                vertex: v,
                plus,
                minus,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        let (amax, amin) = (a.plus.max(a.minus), a.plus.min(a.minus));
        let (bmax, bmin) = (b.plus.max(b.minus), b.plus.min(b.minus));
        bmax.total_cmp(&amax)
            .then(bmin.total_cmp(&amin))
            .then(a.vertex.cmp(&b.vertex))
    });
    out
}

/// Pairs of a large-jump list padded with `(0, 0)` to length `len`.
pub fn padded_pairs(jumps: &[LargeJump], len: usize) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = jumps.iter().map(|j| (j.plus, j.minus)).collect();
    if v.len() < len {
        v.resize(len, (0.0, 0.0));
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_vectors() {
        let s = DisplacementModel::DeterministicSpread { sigma: 1.0 };
        assert_eq!(s.deterministic_vector(2).unwrap(), vec![-1.0, 1.0]);
        let l = DisplacementModel::Looptree { c: 5.0 };
        assert_eq!(l.deterministic_vector(3).unwrap(), vec![4.0, 3.0, 4.0]);
    }

    #[test]
    fn heavy_tail_is_centred() {
        let h = HeavyTail::new(4.0, 1.0, 0.0, 2.0, 0.5).unwrap();
        let (p, m1, _) = h.truncated(f64::INFINITY);
        assert!((p - 1.0).abs() < 1e-15);
        assert!(m1.abs() < 1e-15);
        assert!(HeavyTail::new(4.0, 1.0, 0.0, 1.0, 0.5).is_err());
        assert!(HeavyTail::new(2.0, 1.0, 0.0, 2.0, 0.5).is_err());
    }

    #[test]
    fn truncation_extremes() {
        let law = OffspringLaw::builtin("binary").unwrap();
        let m = DisplacementModel::Iid(IidLaw::Normal { mean: 0.0, sd: 1.0 });
        let full = global_moments(&law, &m).unwrap();
        assert_eq!(
            truncated_global_moments(&law, &m, f64::INFINITY).unwrap(),
            full
        );
        let zero = truncated_global_moments(&law, &m, 0.0).unwrap();
        assert_eq!((zero.mean, zero.beta2), (0.0, 0.0));
        assert!((full.beta2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bands_validate() {
        assert!(TruncationBands::new(10, 2.0, 0.1, 1.0).is_err());
        assert!(TruncationBands::new(10, 0.0, 0.0, 1.0).is_err());
        let b = TruncationBands::new(10_000, 0.0, 0.05, 1.0).unwrap();
        assert!((b.scale() - 10.0).abs() < 1e-12);
        assert!(b.threshold_typ() < b.threshold_large());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            DisplacementSpec::parse("zero").unwrap(),
            DisplacementSpec::Zero
        );
        let s = DisplacementSpec::parse(r#"{"kind":"normal","sd":2.0}"#).unwrap();
        assert_eq!(s, DisplacementSpec::Normal { mean: 0.0, sd: 2.0 });
        assert!(DisplacementSpec::parse(r#"{"kind":"normal","sd":2.0,"bogus":1}"#).is_err());
        assert!(DisplacementSpec::parse("nope").is_err());
    }
}
