//! Seeded Monte Carlo experiments: rescaled discrete snakes against samples
//! of the limit objects, with the two-sample tests they rely on.
//!
//! Every replicate draws from its own stream of the seed, so results do not
//! depend on the number of worker threads.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use statrs::distribution::{
    ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson as PoissonDist,
};

use crate::continuum::{build_continuum_tree, PiMeasureSpec};
use crate::displacements::{
    global_moments, large_jump_ordering, looptree_centre, recentred_typical, sample_displacements,
    truncated_global_moments, DisplacementModel, IidLaw, TruncationBands,
};
use crate::error::{Error, Result};
use crate::sampling::{sample_tree, stream_rng, OffspringLaw, SimRng};
use crate::tree::{encode, looptree_height, lukasiewicz, LabeledOrderedTree, SpatialTree};

const CONTINUUM_STREAM: u64 = 1 << 32;
const NULL_POOL_STREAM: u64 = 2 << 32;
const NULL_SPLIT_STREAM: u64 = 3 << 32;
const TIME_STREAM: u64 = 4 << 32;

// ---------------------------------------------------------------------------
// Tests

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// `P(K > lambda)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // Jacobi-transformed series converges fast for small arguments.
        let pi = std::f64::consts::PI;
        let c = (2.0 * pi).sqrt() / lambda;
        let mut s = 0.0;
        for j in 1..=20 {
            let k = (2 * j - 1) as f64;
            s += (-k * k * pi * pi / (8.0 * lambda * lambda)).exp();
        }
        return (1.0 - c * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        s += if j % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Exact `P(D_{n,m} >= d)` for continuous data, by counting lattice paths.
pub fn ks_exact_sf(n: usize, m: usize, d: f64) -> f64 {
    // D takes values |i m - j n| / (n m); compare on that integer scale.
    let nm = (n * m) as f64;
    let limit = (d * nm - 1e-7).ceil() as i64;
    if limit <= 0 {
        return 1.0;
    }
    let inside = |i: usize, j: usize| ((i * m) as i64 - (j * n) as i64).abs() < limit;
    // Path probabilities rather than counts keep the numbers in range.
    let mut row = vec![0.0f64; m + 1];
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                row[0] = 1.0;
                continue;
            }
            if !inside(i, j) {
                row[j] = 0.0;
                continue;
            }
            let rem = (n - i + m - j + 1) as f64;
            let from_up = if i > 0 {
                row[j] * (n - i + 1) as f64 / rem
            } else {
                0.0
            };
            let from_left = if j > 0 {
                row[j - 1] * (m - j + 1) as f64 / rem
            } else {
                0.0
            };
            row[j] = from_up + from_left;
        }
    }
    (1.0 - row[m]).clamp(0.0, 1.0)
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Two-sample Kolmogorov-Smirnov test; exact p-value when `n m <= 10^4`.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<KsResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let (a, b) = (sorted(x), sorted(y));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let t = a[i].min(b[j]);
        while i < n && a[i] <= t {
            i += 1;
        }
        while j < m && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let p = if n * m <= 10_000 {
        ks_exact_sf(n, m, d)
    } else {
        let en = ((n * m) as f64 / (n + m) as f64).sqrt();
        kolmogorov_sf((en + 0.12 + 0.11 / en) * d)
    };
    Ok(KsResult {
        statistic: d,
        p_value: p,
    })
}

/// One-sample test against a continuous distribution function.
pub fn ks_one_sample(x: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    let a = sorted(x);
    let n = a.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in a.iter().enumerate() {
        let f = cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let en = n.sqrt();
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_sf((en + 0.12 + 0.11 / en) * d),
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|` (V-statistic form).
pub fn energy_statistic(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    // row sums are collected before adding so the result ignores the thread count
    let total = |s: &[Vec<f64>], t: &[Vec<f64>]| {
        s.par_iter()
            .map(|a| t.iter().map(|b| dist(a, b)).sum::<f64>())
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>()
    };
    let mean_cross = total(x, y) / (x.len() * y.len()) as f64;
    let within = |s: &[Vec<f64>]| total(s, s) / (s.len() * s.len()) as f64;
    2.0 * mean_cross - within(x) - within(y)
}

/// Null distribution of the energy statistic for two samples of size
/// `pool.len() / 2` from one law: random equal splits of `pool`. Sorted.
pub fn energy_null(pool: &[Vec<f64>], splits: usize, seed: u64) -> Vec<f64> {
    let total = pool.len();
    let half = total / 2;
    let mut d = vec![0.0f32; total * total];
    d.par_chunks_mut(total).enumerate().for_each(|(i, row)| {
        for (j, x) in row.iter_mut().enumerate() {
            *x = dist(&pool[i], &pool[j]) as f32;
        }
    });
    let grand: f64 = d
        .par_chunks(total)
        .map(|r| r.iter().map(|&x| x as f64).sum::<f64>())
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let mut out: Vec<f64> = (0..splits)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, NULL_SPLIT_STREAM + s as u64);
            let mut idx: Vec<usize> = (0..total).collect();
            idx.shuffle(&mut rng);
            let mut in_a = vec![false; total];
            for &i in &idx[..half] {
                in_a[i] = true;
            }
            let (mut saa, mut sbb) = (0.0f64, 0.0f64);
            for i in 0..total {
                let row = &d[i * total..(i + 1) * total];
                let (mut ra, mut rb) = (0.0f64, 0.0f64);
                for (j, &x) in row.iter().enumerate() {
                    if in_a[j] {
                        ra += x as f64;
                    } else {
                        rb += x as f64;
                    }
                }
                if in_a[i] {
                    saa += ra;
                } else {
                    sbb += rb;
                }
            }
            let sab = (grand - saa - sbb) / 2.0;
            let (na, nb) = (half as f64, (total - half) as f64);
            2.0 * sab / (na * nb) - saa / (na * na) - sbb / (nb * nb)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

pub fn chi_square(observed: &[u64], expected: &[f64], fitted: usize) -> Result<ChiSquareResult> {
    if observed.len() != expected.len() || observed.len() < fitted + 2 {
        return Err(Error::InvalidArgument(
            "need matching bins and positive degrees of freedom".into(),
        ));
    }
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let o = o as f64;
            (o - e) * (o - e) / e
        })
        .sum();
    let df = observed.len() - 1 - fitted;
    let p = ChiSquared::new(df as f64)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .sf(stat);
    Ok(ChiSquareResult {
        statistic: stat,
        df,
        p_value: p,
    })
}

/// Counts against `Poisson(mean)`, bins `0, 1, ..` with the upper tail merged
/// until every expected count is at least 5.
pub fn poisson_count_test(counts: &[usize], mean: f64) -> Result<ChiSquareResult> {
    let total = counts.len() as f64;
    if mean <= 0.0 {
        let bad = counts.iter().any(|&c| c > 0);
        return Ok(ChiSquareResult {
            statistic: if bad { f64::INFINITY } else { 0.0 },
            df: 0,
            p_value: if bad { 0.0 } else { 1.0 },
        });
    }
    let pois = PoissonDist::new(mean).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut edges = Vec::new();
    let mut k = 0u64;
    while total * pois.sf(k) >= 5.0 && total * pois.pmf(k) >= 5.0 {
        edges.push(k);
        k += 1;
    }
    if edges.is_empty() {
        return Err(Error::InvalidArgument(
            "too few replicates for a count test".into(),
        ));
    }
    // bins: each k in edges, then the tail {k > last}
    let last = *edges.last().unwrap();
    let mut obs = vec![0u64; edges.len() + 1];
    for &c in counts {
        let c = c as u64;
        let b = if c > last { edges.len() } else { c as usize };
        obs[b] += 1;
    }
    let mut exp: Vec<f64> = edges.iter().map(|&k| total * pois.pmf(k)).collect();
    exp.push(total * pois.sf(last));
    if *exp.last().unwrap() < 5.0 {
        // fold the short tail into the last point bin
        let t = exp.pop().unwrap();
        let o = obs.pop().unwrap();
        *exp.last_mut().unwrap() += t;
        *obs.last_mut().unwrap() += o;
    }
    if exp.len() < 2 {
        return Ok(ChiSquareResult {
            statistic: 0.0,
            df: 0,
            p_value: 1.0,
        });
    }
    chi_square(&obs, &exp, 0)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestOutcome {
    pub test: String,
    pub seed: u64,
    pub statistic: f64,
    pub p_value: Option<f64>,
    /// `p_floor`: pass when `p >= threshold`; `max`: pass when `statistic <= threshold`.
    pub rule: String,
    pub threshold: f64,
    pub sizes: Vec<usize>,
    pub passed: bool,
}

impl TestOutcome {
    fn p_test(
        test: &str,
        seed: u64,
        statistic: f64,
        p: f64,
        floor: f64,
        sizes: Vec<usize>,
    ) -> Self {
        Self {
            test: test.into(),
            seed,
            statistic,
            p_value: Some(p),
            rule: "p_floor".into(),
            threshold: floor,
            sizes,
            passed: p >= floor,
        }
    }

    fn max_test(test: &str, seed: u64, statistic: f64, threshold: f64, sizes: Vec<usize>) -> Self {
        Self {
            test: test.into(),
            seed,
            statistic,
            p_value: None,
            rule: "max".into(),
            threshold,
            sizes,
            passed: statistic <= threshold,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub test: String,
    pub runs: usize,
    pub failures: usize,
    /// A test fails when at least this many runs fail.
    pub failures_allowed_below: usize,
    pub passed: bool,
}

/// Rows of per-replicate values, written alongside a report.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SampleTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SampleTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.columns.join(","))?;
        for r in &self.rows {
            let s: Vec<String> = r.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{}", s.join(","))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub experiment: String,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub outcomes: Vec<TestOutcome>,
    pub verdicts: Vec<Verdict>,
    pub passed: bool,
    #[serde(skip)]
    pub samples: SampleTable,
}

impl StatsReport {
    fn new(
        experiment: &str,
        metadata: BTreeMap<String, serde_json::Value>,
        outcomes: Vec<TestOutcome>,
        samples: SampleTable,
    ) -> Self {
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for o in &outcomes {
            let e = groups.entry(o.test.clone()).or_default();
            e.0 += 1;
            if !o.passed {
                e.1 += 1;
            }
        }
        let verdicts: Vec<Verdict> = groups
            .into_iter()
            .map(|(test, (runs, failures))| {
                let limit = (2 * runs).div_ceil(3).max(1);
                Verdict {
                    test,
                    runs,
                    failures,
                    failures_allowed_below: limit,
                    passed: failures < limit,
                }
            })
            .collect();
        let passed = verdicts.iter().all(|v| v.passed);
        Self {
            experiment: experiment.into(),
            metadata,
            outcomes,
            verdicts,
            passed,
            samples,
        }
    }

    pub fn verdict(&self, test: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.test == test)
    }
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Clone, Debug)]
pub struct Experiment {
    pub law: OffspringLaw,
    pub model: DisplacementModel,
    pub n: usize,
    /// Samples per side.
    pub reps: usize,
    pub k: usize,
    pub seed: u64,
    pub seeds: usize,
    pub p_floor: f64,
    pub null_splits: usize,
    pub delta: f64,
    pub gamma: f64,
}

impl Experiment {
    pub fn new(law: OffspringLaw, model: DisplacementModel, n: usize) -> Self {
        Self {
            law,
            model,
            n,
            reps: 2000,
            k: 2,
            seed: 1,
            seeds: 3,
            p_floor: 1e-3,
            null_splits: 1000,
            delta: 0.02,
            gamma: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 || self.reps < 1 || self.k < 1 || self.seeds < 1 {
            return Err(Error::InvalidArgument(
                "need n >= 2 and reps, k, seeds >= 1".into(),
            ));
        }
        if !self.law.admits_size(self.n) {
            return Err(Error::InvalidArgument(format!(
                "law '{}' has no tree of size {}",
                self.law.name(),
                self.n
            )));
        }
        self.model.validate()
    }

    fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    fn metadata(&self, name: &str) -> BTreeMap<String, serde_json::Value> {
        let mut m = BTreeMap::new();
        m.insert("experiment".into(), json!(name));
        m.insert("law".into(), json!(self.law.name()));
        m.insert("model".into(), json!(format!("{:?}", self.model)));
        m.insert("n".into(), json!(self.n));
        m.insert("reps".into(), json!(self.reps));
        m.insert("k".into(), json!(self.k));
        m.insert("seed".into(), json!(self.seed));
        m.insert("seeds".into(), json!(self.seeds));
        m.insert("p_floor".into(), json!(self.p_floor));
        m.insert(
            "rule".into(),
            json!("a test fails when it fails on at least two thirds of the seeds"),
        );
        m.insert(
            "tolerances".into(),
            json!("finite-n thresholds are choices of this library, not limit statements"),
        );
        m
    }
}

/// Vertex depths, locations and the Łukasiewicz path in depth-first order.
struct Walk {
    h: Vec<i64>,
    loc: Vec<f64>,
}

fn walk(spatial: &SpatialTree) -> Walk {
    let t = spatial.tree();
    let order = t.preorder();
    let depth = t.depths();
    let h = order.iter().map(|&v| depth[v] as i64).collect();
    let loc = order.iter().map(|&v| spatial.loc(v)).collect();
    Walk { h, loc }
}

fn sample_spatial(
    law: &OffspringLaw,
    model: &DisplacementModel,
    n: usize,
    rng: &mut SimRng,
) -> Result<SpatialTree> {
    let t = sample_tree(law, n, rng)?;
    sample_displacements(&t, model, rng)
}

/// `k` iid uniform indices in `0..n`: the first unsorted, then all sorted.
fn uniform_indices(n: usize, k: usize, rng: &mut SimRng) -> (usize, Vec<usize>) {
    let mut u: Vec<usize> = (0..k)
        .map(|_| ((rng.random::<f64>() * n as f64) as usize).min(n - 1))
        .collect();
    let first = u[0];
    u.sort_unstable();
    (first, u)
}

fn par_reps<T: Send>(reps: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..reps).into_par_iter().map(f).collect()
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

fn ks_outcome(name: &str, seed: u64, x: &[f64], y: &[f64], floor: f64) -> Result<TestOutcome> {
    let r = ks_two_sample(x, y)?;
    Ok(TestOutcome::p_test(
        name,
        seed,
        r.statistic,
        r.p_value,
        floor,
        vec![x.len(), y.len()],
    ))
}

/// Rescaled discrete `(height, label)` pairs against line-breaking samples.
pub fn verify_main_theorem(exp: &Experiment) -> Result<StatsReport> {
    exp.validate()?;
    let gm = global_moments(&exp.law, &exp.model)?;
    if gm.mean.abs() > 1e-9 {
        return Err(Error::InvalidModel(format!(
            "model is not globally centred (mean {})",
            gm.mean
        )));
    }
    let sigma = exp.law.sigma();
    let beta = gm.beta2.sqrt();
    let n = exp.n as f64;
    let hs = sigma / n.sqrt();
    let ls = if beta > 0.0 {
        sigma.sqrt() / (beta * n.powf(0.25))
    } else {
        1.0 / n.powf(0.25)
    };
    let cl = if beta > 0.0 { 1.0 } else { 0.0 };
    let k = exp.k;

    let mut outcomes = Vec::new();
    let mut table = SampleTable {
        columns: vec!["seed".into(), "side".into()],
        rows: Vec::new(),
    };
    table
        .columns
        .extend((1..=k).flat_map(|i| [format!("h{i}"), format!("l{i}")]));
    for seed in exp.seed_list() {
        // columns: h_first, l_first, then k sorted pairs
        let disc = par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, r as u64);
            let sp = sample_spatial(&exp.law, &exp.model, exp.n, &mut rng)?;
            let w = walk(&sp);
            let (first, idx) = uniform_indices(exp.n, k, &mut rng);
            let mut row = vec![w.h[first] as f64 * hs, w.loc[first] * ls];
            for &i in &idx {
                row.push(w.h[i] as f64 * hs);
                row.push(w.loc[i] * ls);
            }
            Ok(row)
        })?;
        let cont = par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, CONTINUUM_STREAM + r as u64);
            let t = build_continuum_tree(k, &mut rng);
            let mut row = vec![t.h[0], t.l[0] * cl];
            for (h, l) in t.planar_pairs() {
                row.push(h);
                row.push(l * cl);
            }
            Ok(row)
        })?;
        outcomes.push(ks_outcome(
            "height_k1",
            seed,
            &column(&disc, 0),
            &column(&cont, 0),
            exp.p_floor,
        )?);
        outcomes.push(ks_outcome(
            "label_k1",
            seed,
            &column(&disc, 1),
            &column(&cont, 1),
            exp.p_floor,
        )?);
        for i in 0..k {
            outcomes.push(ks_outcome(
                &format!("height_{}_of_{k}", i + 1),
                seed,
                &column(&disc, 2 + 2 * i),
                &column(&cont, 2 + 2 * i),
                exp.p_floor,
            )?);
            outcomes.push(ks_outcome(
                &format!("label_{}_of_{k}", i + 1),
                seed,
                &column(&disc, 3 + 2 * i),
                &column(&cont, 3 + 2 * i),
                exp.p_floor,
            )?);
        }
        let x: Vec<Vec<f64>> = disc.iter().map(|r| r[2..].to_vec()).collect();
        let y: Vec<Vec<f64>> = cont.iter().map(|r| r[2..].to_vec()).collect();
        let stat = energy_statistic(&x, &y);
        let pool = par_reps(2 * exp.reps, |r| {
            let mut rng = stream_rng(seed, NULL_POOL_STREAM + r as u64);
            let t = build_continuum_tree(k, &mut rng);
            Ok(t.planar_pairs()
                .into_iter()
                .flat_map(|(h, l)| [h, l * cl])
                .collect::<Vec<f64>>())
        })?;
        let null = energy_null(&pool, exp.null_splits, seed);
        let q = quantile(&null, 0.999);
        outcomes.push(TestOutcome::max_test(
            &format!("joint_energy_k{k}"),
            seed,
            stat,
            q,
            vec![x.len(), y.len(), exp.null_splits],
        ));
        for (side, rows) in [(0.0, &x), (1.0, &y)] {
            for r in rows.iter() {
                let mut row = vec![seed as f64, side];
                row.extend_from_slice(r);
                table.rows.push(row);
            }
        }
    }
    let mut meta = exp.metadata("main");
    meta.insert("sigma".into(), json!(sigma));
    meta.insert("beta".into(), json!(beta));
    meta.insert("energy_quantile".into(), json!(0.999));
    Ok(StatsReport::new("main", meta, outcomes, table))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// `sigma H - (2 / sigma) W` against the label marginal.
pub fn verify_cor_height_luka(
    exp: &Experiment,
    tight_sizes: &[usize],
    tight_reps: usize,
) -> Result<StatsReport> {
    exp.validate()?;
    let sigma = exp.law.sigma();
    let model = DisplacementModel::DeterministicSpread { sigma };
    let gm = global_moments(&exp.law, &model)?;
    let beta = gm.beta2.sqrt();
    let n = exp.n as f64;
    let ls = if beta > 0.0 {
        sigma.sqrt() / (beta * n.powf(0.25))
    } else {
        1.0 / n.powf(0.25)
    };
    let cl = if beta > 0.0 { 1.0 } else { 0.0 };
    let b = 2.0 / sigma;

    let mut outcomes = Vec::new();
    let mut table = SampleTable {
        columns: vec!["seed".into(), "discrete".into(), "continuum".into()],
        rows: Vec::new(),
    };
    for seed in exp.seed_list() {
        let disc = par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, r as u64);
            let sp = sample_spatial(&exp.law, &model, exp.n, &mut rng)?;
            let wk = walk(&sp);
            let w = lukasiewicz(sp.tree());
            let mut gap: f64 = 0.0;
            let mut scale: f64 = 1.0;
            for i in 0..exp.n {
                let comb = sigma * wk.h[i] as f64 - b * w[i] as f64;
                gap = gap.max((comb - wk.loc[i]).abs());
                scale = scale.max(wk.loc[i].abs());
            }
            let i = ((rng.random::<f64>() * n) as usize).min(exp.n - 1);
            let x = (sigma * wk.h[i] as f64 - b * w[i] as f64) * ls;
            Ok((x, gap / scale))
        })?;
        let cont = par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, CONTINUUM_STREAM + r as u64);
            Ok(build_continuum_tree(1, &mut rng).l[0] * cl)
        })?;
        let gap = disc.iter().map(|d| d.1).fold(0.0, f64::max);
        outcomes.push(TestOutcome::max_test(
            "identity_relative_gap",
            seed,
            gap,
            1e-12,
            vec![exp.reps],
        ));
        let x: Vec<f64> = disc.iter().map(|d| d.0).collect();
        outcomes.push(ks_outcome("luka_k1", seed, &x, &cont, exp.p_floor)?);
        for (a, c) in x.iter().zip(&cont) {
            table.rows.push(vec![seed as f64, *a, *c]);
        }
    }
    let mut medians = Vec::new();
    let mut used = Vec::new();
    if !tight_sizes.is_empty() && tight_reps > 0 {
        for &m0 in tight_sizes {
            // the smallest admissible size at or above the request
            let m = (m0..m0 + 64)
                .find(|&m| exp.law.admits_size(m))
                .ok_or_else(|| Error::InvalidArgument(format!("no tree of size near {m0}")))?;
            used.push(m);
            let vals = par_reps(tight_reps, |r| {
                let mut rng = stream_rng(exp.seed, TIME_STREAM + ((m as u64) << 20) + r as u64);
                let t = sample_tree(&exp.law, m, &mut rng)?;
                let depth = t.depths();
                let order = t.preorder();
                let w = lukasiewicz(&t);
                let mx = order
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (sigma * depth[v] as f64 - b * w[i] as f64).abs())
                    .fold(0.0, f64::max);
                Ok(mx / (m as f64).powf(0.25))
            })?;
            medians.push(median(vals));
        }
        let lo = medians.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = medians.iter().copied().fold(0.0, f64::max);
        let spread = if lo > 0.0 {
            (hi - lo) / lo
        } else if hi == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        outcomes.push(TestOutcome::max_test(
            "max_tightness_spread",
            exp.seed,
            spread,
            0.15,
            vec![tight_reps],
        ));
    }
    let mut meta = exp.metadata("luka");
    meta.insert("sigma".into(), json!(sigma));
    meta.insert("beta".into(), json!(beta));
    meta.insert("tightness_sizes".into(), json!(used));
    meta.insert("tightness_medians".into(), json!(medians));
    Ok(StatsReport::new("luka", meta, outcomes, table))
}

/// `c* H - H_loop` against the label marginal, and the looptree height.
pub fn verify_looptree(exp: &Experiment) -> Result<StatsReport> {
    exp.validate()?;
    let sigma = exp.law.sigma();
    let c = looptree_centre(&exp.law);
    let model = DisplacementModel::Looptree { c };
    let gm = global_moments(&exp.law, &model)?;
    let beta = gm.beta2.sqrt();
    let n = exp.n as f64;
    let ls = if beta > 0.0 {
        sigma.sqrt() / (beta * n.powf(0.25))
    } else {
        1.0 / n.powf(0.25)
    };
    let cl = if beta > 0.0 { 1.0 } else { 0.0 };

    let mut outcomes = Vec::new();
    let mut table = SampleTable {
        columns: vec![
            "seed".into(),
            "diff".into(),
            "loop_height".into(),
            "cont_label".into(),
            "cont_height".into(),
        ],
        rows: Vec::new(),
    };
    for seed in exp.seed_list() {
        let disc = par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, r as u64);
            let sp = sample_spatial(&exp.law, &model, exp.n, &mut rng)?;
            let wk = walk(&sp);
            let hl = looptree_height(sp.tree());
            let mut gap: f64 = 0.0;
            for i in 0..exp.n {
                gap = gap.max(
                    (c * wk.h[i] as f64 - hl[i] as f64 - wk.loc[i]).abs() / (1.0 + wk.loc[i].abs()),
                );
            }
            let i = ((rng.random::<f64>() * n) as usize).min(exp.n - 1);
            Ok((
                (c * wk.h[i] as f64 - hl[i] as f64) * ls,
                sigma * hl[i] as f64 / (c * n.sqrt()),
                gap,
            ))
        })?;
        let cont = par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, CONTINUUM_STREAM + r as u64);
            let t = build_continuum_tree(1, &mut rng);
            Ok((t.l[0] * cl, t.h[0]))
        })?;
        let gap = disc.iter().map(|d| d.2).fold(0.0, f64::max);
        outcomes.push(TestOutcome::max_test(
            "identity_relative_gap",
            seed,
            gap,
            1e-9,
            vec![exp.reps],
        ));
        let x: Vec<f64> = disc.iter().map(|d| d.0).collect();
        let y: Vec<f64> = cont.iter().map(|d| d.0).collect();
        outcomes.push(ks_outcome("looptree_k1", seed, &x, &y, exp.p_floor)?);
        let hx: Vec<f64> = disc.iter().map(|d| d.1).collect();
        let hy: Vec<f64> = cont.iter().map(|d| d.1).collect();
        outcomes.push(ks_outcome("loop_height_k1", seed, &hx, &hy, exp.p_floor)?);
        for (d, cc) in disc.iter().zip(&cont) {
            table.rows.push(vec![seed as f64, d.0, d.1, cc.0, cc.1]);
        }
    }
    let mut meta = exp.metadata("looptree");
    meta.insert("sigma".into(), json!(sigma));
    meta.insert("c".into(), json!(c));
    meta.insert("beta".into(), json!(beta));
    meta.insert("global_mean".into(), json!(gm.mean));
    Ok(StatsReport::new("looptree", meta, outcomes, table))
}

/// Largest point of the hair process: `pi({x v y > m}) = E` solved for `m`.
pub fn sample_max_hair<R: Rng + ?Sized>(spec: &PiMeasureSpec, rng: &mut R) -> Result<f64> {
    let base = spec.mass_above(1.0)?;
    if base == 0.0 {
        return Ok(0.0);
    }
    let e: f64 = Exp1.sample(rng);
    Ok((base / e).powf(1.0 / spec.q()))
}

/// The intensity a heavy-tailed iid model converges to.
pub fn matching_intensity(model: &DisplacementModel) -> Result<PiMeasureSpec> {
    match model {
        DisplacementModel::Iid(IidLaw::HeavyTail(h)) => Ok(PiMeasureSpec::AxisPair {
            a_plus: h.a_plus,
            a_minus: h.a_minus,
            q: h.q,
        }),
        _ => Err(Error::InvalidModel(
            "hairy experiments need a heavy-tailed iid model".into(),
        )),
    }
}

/// Large jumps against the Poisson hair process.
pub fn verify_hairy(exp: &Experiment, spec: &PiMeasureSpec) -> Result<StatsReport> {
    exp.validate()?;
    spec.validate()?;
    let q_model = match &exp.model {
        DisplacementModel::Iid(IidLaw::HeavyTail(h)) => h.q,
        _ => {
            return Err(Error::InvalidModel(
                "hairy experiments need a heavy-tailed iid model".into(),
            ))
        }
    };
    if (q_model - spec.q()).abs() > 1e-12 {
        return Err(Error::InvalidModel(format!(
            "model tail q = {q_model} differs from intensity q = {}",
            spec.q()
        )));
    }
    let eta = spec.eta();
    let bands = TruncationBands::new(exp.n, eta, exp.delta, exp.gamma)?;
    let scale = bands.scale();
    let mass = spec.mass_above(exp.gamma)?;
    let sigma = exp.law.sigma();
    let n = exp.n as f64;
    let typ = truncated_global_moments(&exp.law, &exp.model, bands.threshold_typ())?;
    let beta_typ = (typ.beta2 - typ.mean * typ.mean).max(0.0).sqrt();

    let mut outcomes = Vec::new();
    let mut table = SampleTable {
        columns: vec![
            "seed".into(),
            "count".into(),
            "max_abs".into(),
            "typical_head".into(),
        ],
        rows: Vec::new(),
    };
    for seed in exp.seed_list() {
        let disc = par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, r as u64);
            let sp = sample_spatial(&exp.law, &exp.model, exp.n, &mut rng)?;
            let jumps = large_jump_ordering(&sp, &bands);
            let mags: Vec<f64> = jumps.iter().map(|j| j.plus.max(j.minus) / scale).collect();
            let max_abs = sp.locations()[1..]
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
                / scale;
            let typical = if eta == 0.0 {
                let rt = recentred_typical(&sp, &exp.law, &exp.model, &bands)?;
                let order = rt.tree().preorder();
                let i = ((rng.random::<f64>() * n) as usize).min(exp.n - 1);
                rt.loc(order[i]) / n.powf(0.25)
            } else {
                0.0
            };
            Ok((mags, max_abs, typical))
        })?;
        let counts: Vec<usize> = disc.iter().map(|d| d.0.len()).collect();
        let chi = poisson_count_test(&counts, mass)?;
        outcomes.push(TestOutcome::p_test(
            "large_jump_count",
            seed,
            chi.statistic,
            chi.p_value,
            exp.p_floor,
            vec![exp.reps, chi.df],
        ));
        let mags: Vec<f64> = disc.iter().flat_map(|d| d.0.iter().copied()).collect();
        if !mags.is_empty() {
            let r = ks_one_sample(&mags, |x| {
                if x <= exp.gamma {
                    0.0
                } else {
                    1.0 - spec.mass_above(x).unwrap_or(0.0) / mass
                }
            })?;
            outcomes.push(TestOutcome::p_test(
                "large_jump_magnitude",
                seed,
                r.statistic,
                r.p_value,
                exp.p_floor,
                vec![mags.len()],
            ));
        }
        if eta > 0.0 {
            let x: Vec<f64> = disc.iter().map(|d| d.1).collect();
            let y = par_reps(exp.reps, |r| {
                let mut rng = stream_rng(seed, CONTINUUM_STREAM + r as u64);
                sample_max_hair(spec, &mut rng)
            })?;
            outcomes.push(ks_outcome("max_abs_vs_hair", seed, &x, &y, exp.p_floor)?);
        } else {
            let x: Vec<f64> = disc.iter().map(|d| d.2).collect();
            let y = par_reps(exp.reps, |r| {
                let mut rng = stream_rng(seed, CONTINUUM_STREAM + r as u64);
                Ok(build_continuum_tree(1, &mut rng).l[0] * beta_typ / sigma.sqrt())
            })?;
            outcomes.push(ks_outcome("typical_head_k1", seed, &x, &y, exp.p_floor)?);
        }
        for d in &disc {
            table
                .rows
                .push(vec![seed as f64, d.0.len() as f64, d.1, d.2]);
        }
    }
    let mut meta = exp.metadata("hairy");
    meta.insert("eta".into(), json!(eta));
    meta.insert("gamma".into(), json!(exp.gamma));
    meta.insert("delta".into(), json!(exp.delta));
    meta.insert("pi_mass_above_gamma".into(), json!(mass));
    meta.insert(
        "intensity".into(),
        serde_json::to_value(spec).unwrap_or_default(),
    );
    meta.insert("beta_typical".into(), json!(beta_typ));
    Ok(StatsReport::new("hairy", meta, outcomes, table))
}

/// Exceedance curve of the recentred typical head's sup-norm.
pub fn tail_bound_diagnostic(exp: &Experiment, gamma_grid: &[f64]) -> Result<StatsReport> {
    exp.validate()?;
    if gamma_grid.len() < 2 || gamma_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "gamma grid must be increasing with at least two points".into(),
        ));
    }
    let bands = TruncationBands::new(exp.n, 0.0, exp.delta, 1.0)?;
    let norm = (exp.n as f64).powf(0.25);
    let mut sups = Vec::new();
    for seed in exp.seed_list() {
        sups.extend(par_reps(exp.reps, |r| {
            let mut rng = stream_rng(seed, r as u64);
            let sp = sample_spatial(&exp.law, &exp.model, exp.n, &mut rng)?;
            let rt = recentred_typical(&sp, &exp.law, &exp.model, &bands)?;
            Ok(rt.locations()[1..]
                .iter()
                .fold(0.0f64, |m, x| m.max(x.abs()))
                / norm)
        })?);
    }
    let total = sups.len() as f64;
    let probs: Vec<f64> = gamma_grid
        .iter()
        .map(|&g| sups.iter().filter(|&&s| s > g).count() as f64 / total)
        .collect();
    let increases = probs.windows(2).filter(|w| w[1] > w[0]).count();
    let pts: Vec<(f64, f64)> = gamma_grid
        .iter()
        .zip(&probs)
        .filter(|p| *p.1 > 0.0)
        .map(|(g, p)| (g.ln(), p.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    } else {
        f64::NEG_INFINITY
    };
    let outcomes = vec![
        TestOutcome::max_test(
            "monotone_violations",
            exp.seed,
            increases as f64,
            0.0,
            vec![sups.len()],
        ),
        TestOutcome::max_test("loglog_slope", exp.seed, slope, -4.0, vec![pts.len()]),
    ];
    let mut meta = exp.metadata("tail");
    meta.insert("gamma_grid".into(), json!(gamma_grid));
    meta.insert("exceedance".into(), json!(probs));
    meta.insert("fitted_points".into(), json!(pts.len()));
    let table = SampleTable {
        columns: vec!["gamma".into(), "exceedance".into()],
        rows: gamma_grid
            .iter()
            .zip(&probs)
            .map(|(g, p)| vec![*g, *p])
            .collect(),
    };
    Ok(StatsReport::new("tail", meta, outcomes, table))
}

/// Contour and head of one tree, raw and rescaled, one row per contour step.
pub fn figure_head<W: Write>(
    law: &OffspringLaw,
    model: &DisplacementModel,
    n: usize,
    seed: u64,
    out: W,
) -> Result<()> {
    let mut rng = stream_rng(seed, 0);
    let sp = sample_spatial(law, model, n, &mut rng)?;
    write_figure(&sp, out)
}

fn write_figure<W: Write>(sp: &SpatialTree, mut out: W) -> Result<()> {
    let e = encode(sp);
    let n = sp.tree().n() as f64;
    let (a, b) = (n.sqrt(), n.powf(0.25));
    writeln!(
        out,
        "index,vertex,Htilde,Rtilde,Htilde_scaled,Rtilde_scaled"
    )?;
    for i in 0..e.contour.len() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            i,
            e.contour[i],
            e.htilde[i],
            e.rtilde[i],
            e.htilde[i] as f64 / a,
            e.rtilde[i] / b
        )?;
    }
    Ok(())
}

/// The tree drawn by [`figure_head`], for cross-checks.
pub fn figure_tree(
    law: &OffspringLaw,
    model: &DisplacementModel,
    n: usize,
    seed: u64,
) -> Result<(LabeledOrderedTree, SpatialTree)> {
    let mut rng = stream_rng(seed, 0);
    let sp = sample_spatial(law, model, n, &mut rng)?;
    Ok((sp.tree().clone(), sp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_known_points() {
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_sf(1.9495) - 0.001).abs() < 1e-4);
        assert!((kolmogorov_sf(0.5) - 0.9639).abs() < 1e-3);
    }

    #[test]
    fn exact_tiny() {
        // n = m = 1: D = 1 always.
        assert_eq!(ks_exact_sf(1, 1, 1.0), 1.0);
        // n = m = 2: P(D = 1) = 2 / 6.
        assert!((ks_exact_sf(2, 2, 1.0) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_bins() {
        let counts: Vec<usize> = (0..1000)
            .map(|i| [0, 0, 1, 1, 1, 2, 0, 3, 1, 2][i % 10])
            .collect();
        let r = poisson_count_test(&counts, 1.1).unwrap();
        assert!(r.df >= 2);
    }
}
