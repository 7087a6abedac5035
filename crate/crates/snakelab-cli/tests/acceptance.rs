//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The process exits 0 once every criterion has been evaluated, so a failing
//! criterion shows up as a FAIL line rather than a harness error. Set
//! `SNAKELAB_ACCEPTANCE_STRICT=1` to exit 1 when any line reads FAIL.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use snakelab::displacements::{
    global_moments, looptree_centre, pareto_preset, sample_displacements, DisplacementModel,
};
use snakelab::linebreak::{build_tree, construction_paths, deconstruct_tree};
use snakelab::oracle::{
    check_bijection_exhaustive, check_prune_graft_mc, check_repeat_laws, check_sb_order_law,
    degree_sequences, run_oracle_suite, PruneGraftInstance,
};
use snakelab::sampling::{sample_tree, stream_rng, OffspringLaw};
use snakelab::stats::{
    matching_intensity, tail_bound_diagnostic, verify_cor_height_luka, verify_hairy,
    verify_looptree, verify_main_theorem, Experiment, StatsReport,
};
use snakelab::tree::{
    combine_height_luka, height, looptree_height, lukasiewicz, snake_head, EdgeLabelSeq,
    LabeledOrderedTree,
};

type Outcome = (bool, String);

fn verdicts(r: &StatsReport, tests: &[&str]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for t in tests {
        match r.verdict(t) {
            Some(v) => {
                ok &= v.passed;
                parts.push(format!("{t} {}/{} failed", v.failures, v.runs));
            }
            None => {
                ok = false;
                parts.push(format!("{t} missing"));
            }
        }
    }
    (ok, parts.join(", "))
}

fn p_values(r: &StatsReport, test: &str) -> String {
    let ps: Vec<String> = r
        .outcomes
        .iter()
        .filter(|o| o.test == test)
        .map(|o| match o.p_value {
            Some(p) => format!("{p:.3e}"),
            None => format!("{:.4}", o.statistic),
        })
        .collect();
    format!("{test} [{}]", ps.join(", "))
}

fn figure_three() -> LabeledOrderedTree {
    let mut ch = vec![Vec::new(); 12];
    ch[4] = vec![8, 2, 3];
    ch[3] = vec![10];
    ch[10] = vec![1];
    ch[1] = vec![9, 11];
    ch[9] = vec![7];
    ch[8] = vec![5];
    ch[5] = vec![6];
    LabeledOrderedTree::from_children(4, &ch).unwrap()
}

fn looptree_bfs(t: &LabeledOrderedTree) -> Vec<i64> {
    let n = t.n();
    let mut adj = vec![Vec::new(); n + 1];
    for v in 1..=n {
        let ch = t.children(v);
        if ch.is_empty() {
            continue;
        }
        let mut cyc = vec![v];
        cyc.extend_from_slice(ch);
        for i in 0..cyc.len() {
            let (a, b) = (cyc[i], cyc[(i + 1) % cyc.len()]);
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut dist = vec![-1i64; n + 1];
    dist[t.root()] = 0;
    let mut q = VecDeque::from([t.root()]);
    while let Some(u) = q.pop_front() {
        for &w in &adj[u] {
            if dist[w] < 0 {
                dist[w] = dist[u] + 1;
                q.push_back(w);
            }
        }
    }
    let mut out: Vec<i64> = t.preorder().into_iter().map(|v| dist[v]).collect();
    out.push(0);
    out
}

fn c1_bijection() -> Outcome {
    let t0 = Instant::now();
    let r = check_bijection_exhaustive(7).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    (
        r.failures == 0 && secs < 120.0,
        format!(
            "{} degree sequences, {} sequences, {} failures, {secs:.1}s",
            r.degree_sequences, r.sequences, r.failures
        ),
    )
}

fn c2_figure() -> Outcome {
    let expected = vec![
        (4, 3),
        (3, 1),
        (10, 1),
        (4, 2),
        (4, 1),
        (8, 1),
        (5, 1),
        (1, 1),
        (9, 1),
        (1, 2),
    ];
    let t = figure_three();
    let pi = deconstruct_tree(&t);
    let (back, trace) = build_tree(&pi);
    let origins: Vec<Vec<usize>> = construction_paths(&pi, &trace)
        .iter()
        .map(|p| p[..p.len() - 1].to_vec())
        .collect();
    let want_paths = vec![
        vec![4, 3, 10],
        vec![4],
        vec![4, 8],
        vec![5],
        vec![1, 9],
        vec![1],
    ];
    let ok = pi.pairs() == expected.as_slice()
        && back == t
        && trace.ell_star == 6
        && origins == want_paths
        && EdgeLabelSeq::new(11, expected).unwrap() == pi;
    (ok, format!("ell* = {}, paths {origins:?}", trace.ell_star))
}

fn c3_exact_laws() -> Outcome {
    let t0 = Instant::now();
    let suite = run_oracle_suite(1, 0).unwrap();
    let mut reports = suite.reports.len();
    let mut bad: Vec<String> = suite
        .reports
        .iter()
        .filter(|r| r.mismatches > 0 || r.max_abs_diff > 1e-12)
        .map(|r| r.law_name.clone())
        .collect();
    for n in 1..=8 {
        for d in degree_sequences(n) {
            for r in [
                check_sb_order_law(&d).unwrap(),
                check_repeat_laws(&d).unwrap(),
            ] {
                reports += 1;
                if r.mismatches > 0 || r.max_abs_diff > 1e-12 {
                    bad.push(r.law_name);
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        bad.is_empty() && secs < 600.0,
        format!(
            "{reports} exact reports, {} with mismatches {bad:?}, {secs:.1}s",
            bad.len()
        ),
    )
}

fn c4_encodings() -> Outcome {
    let binary = OffspringLaw::builtin("binary").unwrap();
    let model = DisplacementModel::DeterministicSpread { sigma: 1.0 };
    let sizes = [11, 101, 1001, 10001, 100001];
    let mut bad = 0;
    for i in 0..1000u64 {
        let n = sizes[i as usize % sizes.len()];
        let mut rng = stream_rng(41, i);
        let t = sample_tree(&binary, n, &mut rng).unwrap();
        let sp = sample_displacements(&t, &model, &mut rng).unwrap();
        let (r, _) = snake_head(&sp);
        let comb = combine_height_luka(&height(&t), &lukasiewicz(&t), 1.0, 1.0).unwrap();
        if r[..n] != comb[..n] {
            bad += 1;
        }
    }
    let mut loop_bad = 0;
    let laws = ["poisson1", "geometric_half", "binary"];
    for i in 0..100u64 {
        let law = OffspringLaw::builtin(laws[i as usize % 3]).unwrap();
        let n = [101, 1001, 10001][(i as usize / 3) % 3];
        let mut rng = stream_rng(42, i);
        let t = sample_tree(&law, n, &mut rng).unwrap();
        if looptree_height(&t) != looptree_bfs(&t) {
            loop_bad += 1;
        }
    }
    (
        bad == 0 && loop_bad == 0,
        format!("identity failures {bad}/1000, looptree mismatches {loop_bad}/100"),
    )
}

fn c5_moments() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["binary", "poisson1", "geometric_half"] {
        let law = OffspringLaw::builtin(name).unwrap();
        let s2 = law.variance();
        let spread = global_moments(
            &law,
            &DisplacementModel::DeterministicSpread { sigma: law.sigma() },
        )
        .unwrap();
        let spread_cf = 4.0 / (3.0 * s2) * (law.third_moment() - 1.0) - (s2 + 2.0);
        let c = looptree_centre(&law);
        let lt = global_moments(&law, &DisplacementModel::Looptree { c }).unwrap();
        let odd: f64 = law
            .pmf()
            .iter()
            .enumerate()
            .filter(|(k, _)| k % 2 == 1)
            .map(|(k, &m)| m * ((k as f64 + 1.0) / 4.0 - c / 2.0))
            .sum();
        let loop_cf =
            c * c + law.third_moment() / 12.0 + (0.25 - c / 2.0) * law.moment(2) + 1.0 / 6.0 - c
                + odd;
        let e1 = (spread.beta2 - spread_cf).abs();
        let e2 = (lt.beta2 - loop_cf).abs();
        ok &= spread.mean.abs() < 1e-10 && lt.mean.abs() < 1e-10 && e1 < 1e-10 && e2 < 1e-10;
        parts.push(format!(
            "{name}: spread beta2 {:.6} (err {e1:.1e}), looptree beta2 {:.6} (err {e2:.1e})",
            spread.beta2, lt.beta2
        ));
    }
    (ok, parts.join("; "))
}

fn c6_main() -> Outcome {
    let law = OffspringLaw::builtin("binary").unwrap();
    let model = DisplacementModel::DeterministicSpread { sigma: law.sigma() };
    let exp = Experiment::new(law, model, 20001);
    let t0 = Instant::now();
    let r = verify_main_theorem(&exp).unwrap();
    let (ok, msg) = verdicts(&r, &["height_k1", "joint_energy_k2"]);
    (
        ok,
        format!(
            "{msg}; {}; {}; {:.0}s",
            p_values(&r, "height_k1"),
            p_values(&r, "label_k1"),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn c7_corollaries() -> Outcome {
    let binary = OffspringLaw::builtin("binary").unwrap();
    let model = DisplacementModel::DeterministicSpread {
        sigma: binary.sigma(),
    };
    let exp = Experiment::new(binary.clone(), model, 20001);
    let luka = verify_cor_height_luka(&exp, &[5000, 20000, 80000], 500).unwrap();
    let (ok1, m1) = verdicts(
        &luka,
        &["identity_relative_gap", "luka_k1", "max_tightness_spread"],
    );
    let mut ok = ok1;
    let mut msg = format!("luka binary: {m1}");
    for (name, n) in [("binary", 20001), ("poisson1", 20000)] {
        let law = OffspringLaw::builtin(name).unwrap();
        let c = looptree_centre(&law);
        let exp = Experiment::new(law, DisplacementModel::Looptree { c }, n);
        let r = verify_looptree(&exp).unwrap();
        let (o, m) = verdicts(&r, &["identity_relative_gap", "looptree_k1"]);
        ok &= o;
        msg.push_str(&format!(
            "; looptree {name}: {m}, {}",
            p_values(&r, "looptree_k1")
        ));
    }
    (ok, msg)
}

fn c8_hairy() -> Outcome {
    let law = OffspringLaw::builtin("poisson1").unwrap();
    let model = pareto_preset(4.0).to_model(&law).unwrap();
    let spec = matching_intensity(&model).unwrap();
    let mut exp = Experiment::new(law.clone(), model, 10_000);
    exp.reps = 10_000;
    let r4 = verify_hairy(&exp, &spec).unwrap();
    let (ok4, m4) = verdicts(&r4, &["large_jump_count", "large_jump_magnitude"]);

    let model = pareto_preset(3.0).to_model(&law).unwrap();
    let spec = matching_intensity(&model).unwrap();
    let exp = Experiment::new(law, model, 100_000);
    let r3 = verify_hairy(&exp, &spec).unwrap();
    let (ok3, m3) = verdicts(&r3, &["max_abs_vs_hair"]);
    (
        ok4 && ok3,
        format!("q=4: {m4}; q=3: {m3}, {}", p_values(&r3, "max_abs_vs_hair")),
    )
}

fn c9_tail() -> Outcome {
    let law = OffspringLaw::builtin("binary").unwrap();
    let model = DisplacementModel::DeterministicSpread { sigma: law.sigma() };
    let exp = Experiment::new(law, model, 20001);
    let grid: Vec<f64> = (0..7).map(|i| 1.5 + 0.25 * i as f64).collect();
    let r = tail_bound_diagnostic(&exp, &grid).unwrap();
    let (ok, m) = verdicts(&r, &["monotone_violations", "loglog_slope"]);
    let slope = |r: &StatsReport| {
        r.outcomes
            .iter()
            .find(|o| o.test == "loglog_slope")
            .map_or(f64::NAN, |o| o.statistic)
    };
    let far: Vec<f64> = (0..7).map(|i| 3.0 + 0.5 * i as f64).collect();
    let beyond = tail_bound_diagnostic(&exp, &far).unwrap();
    (
        ok,
        format!(
            "{m}; slope on [1.5, 3] = {:.2}, exceedance {}; beyond the bulk, slope on [3, 6] = {:.2}",
            slope(&r),
            r.metadata["exceedance"],
            slope(&beyond)
        ),
    )
}

fn c10_prune_graft() -> Outcome {
    let inst = PruneGraftInstance::default();
    let exact = inst.exact_report();
    let ps: Vec<f64> = (0..3)
        .map(|s| check_prune_graft_mc(&inst, 200_000, 1 + s).unwrap().p_value)
        .collect();
    let fails = ps.iter().filter(|&&p| p < 1e-3).count();
    let ps: Vec<String> = ps.iter().map(|p| format!("{p:.3e}")).collect();
    (
        exact.mismatches == 0 && fails < 2,
        format!(
            "exact law mismatches {}, chi-square p {ps:?}",
            exact.mismatches
        ),
    )
}

fn snapshot(args: &[&str], out: &Path) -> (Vec<u8>, BTreeMap<String, Vec<u8>>) {
    let _ = fs::remove_dir_all(out);
    let o = Command::new(env!("CARGO_BIN_EXE_snakelab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SNAKELAB_SEED")
        .output()
        .expect("spawn snakelab");
    let mut files = BTreeMap::new();
    if let Ok(rd) = fs::read_dir(out) {
        for e in rd.flatten() {
            files.insert(
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            );
        }
    }
    let mut head = o.status.code().unwrap_or(-1).to_string().into_bytes();
    head.extend(o.stdout);
    (head, files)
}

fn c11_determinism() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("small.toml");
    fs::write(
        &cfg,
        "tight_sizes = [101, 201]\ntight_reps = 30\nnull_splits = 100\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let small = [
        "--n", "301", "--reps", "60", "--seeds", "2", "--config", &cfg,
    ];
    let runs: Vec<Vec<&str>> = vec![
        vec!["sample-tree", "--n", "500", "--seed", "5"],
        vec![
            "snake",
            "--n",
            "500",
            "--displacement",
            "normal",
            "--seed",
            "5",
        ],
        vec![
            "figure",
            "--n",
            "25000",
            "--offspring",
            "poisson1",
            "--seed",
            "7",
        ],
        vec!["oracle", "--seed", "3"],
        [&["verify", "main"][..], &small].concat(),
        [&["verify", "luka"][..], &small].concat(),
        [&["verify", "looptree"][..], &small].concat(),
        [&["verify", "tail"][..], &small].concat(),
        [&["verify", "hairy", "--offspring", "poisson1"][..], &small].concat(),
    ];
    let mut differing = Vec::new();
    let mut artifacts = 0;
    for args in &runs {
        let out = dir.join("run");
        let a = snapshot(args, &out);
        let b = snapshot(args, &out);
        artifacts += a.1.len();
        if a != b || a.1.is_empty() {
            differing.push(args[..2].join(" "));
        }
    }
    (
        differing.is_empty(),
        format!(
            "{} subcommand runs, {artifacts} artifacts, differing {differing:?}",
            runs.len()
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("bijection exactness up to n = 7", c1_bijection),
        ("worked line-breaking example", c2_figure),
        ("exact finite-n laws", c3_exact_laws),
        ("encoding identities", c4_encodings),
        ("global moments", c5_moments),
        ("height and label fdd", c6_main),
        (
            "height-Lukasiewicz and looptree corollaries",
            c7_corollaries,
        ),
        ("hairy limits", c8_hairy),
        ("tail envelope", c9_tail),
        ("prune/graft law", c10_prune_graft),
        ("determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (ok, detail) = f();
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            t0.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    let strict = std::env::var("SNAKELAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
