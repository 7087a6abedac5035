use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use snakelab::continuum::PiMeasureSpec;
use snakelab::displacements::{sample_displacements, DisplacementModel, DisplacementSpec};
use snakelab::linebreak::build_tree_only;
use snakelab::oracle::run_oracle_suite;
use snakelab::sampling::{
    default_budget, sample_degree_sequence_budget, stream_rng, uniform_edge_perm, OffspringLaw,
};
use snakelab::stats::{
    figure_head, matching_intensity, tail_bound_diagnostic, verify_cor_height_luka, verify_hairy,
    verify_looptree, verify_main_theorem, Experiment, StatsReport,
};
use snakelab::tree::{encode, LabeledOrderedTree, SpatialTree};

#[derive(Parser)]
#[command(
    name = "snakelab",
    version,
    about = "Discrete snakes on conditioned Bienaymé trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample one tree and write its encodings.
    SampleTree,
    /// Sample one spatial tree and write the head of the snake.
    Snake,
    /// Run a seeded statistical check and write its report.
    Verify {
        #[arg(value_enum)]
        check: Check,
    },
    /// Run the exact small-n suite.
    Oracle,
    /// Write the contour and head of one large tree.
    Figure,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq, Debug)]
enum Check {
    Main,
    Luka,
    Looptree,
    Hairy,
    Tail,
}

#[derive(Args, Default)]
struct Flags {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Builtin offspring law: binary, poisson1, geometric_half.
    #[arg(long, global = true)]
    offspring: Option<String>,
    /// Offspring law as a `k,mass` CSV file.
    #[arg(long, global = true)]
    pmf: Option<PathBuf>,
    /// zero, normal, deterministic_spread, looptree, pareto4, pareto3 or a JSON object.
    #[arg(long, global = true)]
    displacement: Option<String>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    reps: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Falls back to SNAKELAB_SEED, then 1.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    seeds: Option<usize>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Output directory. Without it the main artifact goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Deserialize, Serialize, Clone, Debug)]
#[serde(untagged)]
enum DisplacementField {
    Name(String),
    Spec(DisplacementSpec),
}

#[derive(Deserialize, Default, Debug)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    offspring: Option<String>,
    pmf: Option<PathBuf>,
    displacement: Option<DisplacementField>,
    intensity: Option<PiMeasureSpec>,
    n: Option<usize>,
    reps: Option<usize>,
    k: Option<usize>,
    seed: Option<u64>,
    seeds: Option<usize>,
    eta: Option<f64>,
    delta: Option<f64>,
    gamma: Option<f64>,
    gamma_grid: Option<Vec<f64>>,
    p_floor: Option<f64>,
    null_splits: Option<usize>,
    tight_sizes: Option<Vec<usize>>,
    tight_reps: Option<usize>,
    mc_samples: Option<u64>,
    budget: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
}

/// Every knob after merging file, flags, environment and defaults.
#[derive(Serialize, Debug)]
struct Resolved {
    command: String,
    offspring: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pmf: Option<PathBuf>,
    displacement: DisplacementSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    intensity: Option<PiMeasureSpec>,
    n: usize,
    reps: usize,
    k: usize,
    seed: u64,
    seeds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    eta: Option<f64>,
    delta: f64,
    gamma: f64,
    gamma_grid: Vec<f64>,
    p_floor: f64,
    null_splits: usize,
    tight_sizes: Vec<usize>,
    tight_reps: usize,
    mc_samples: u64,
    budget: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    workers: usize,
}

struct Defaults {
    offspring: &'static str,
    displacement: &'static str,
    n: usize,
    reps: usize,
}

fn defaults(cmd: Command) -> Defaults {
    let d = |offspring, displacement, n, reps| Defaults {
        offspring,
        displacement,
        n,
        reps,
    };
    match cmd {
        Command::SampleTree => d("poisson1", "zero", 1000, 1),
        Command::Snake => d("poisson1", "deterministic_spread", 1000, 1),
        Command::Figure => d("poisson1", "deterministic_spread", 25000, 1),
        Command::Oracle => d("poisson1", "zero", 8, 1),
        Command::Verify { check } => match check {
            Check::Main | Check::Tail => d("binary", "deterministic_spread", 20001, 2000),
            Check::Luka => d("binary", "deterministic_spread", 20001, 2000),
            Check::Looptree => d("binary", "looptree", 20001, 2000),
            Check::Hairy => d("poisson1", "pareto4", 10000, 10000),
        },
    }
}

fn command_name(cmd: Command) -> String {
    match cmd {
        Command::SampleTree => "sample-tree".into(),
        Command::Snake => "snake".into(),
        Command::Figure => "figure".into(),
        Command::Oracle => "oracle".into(),
        Command::Verify { check } => format!("verify {}", format!("{check:?}").to_lowercase()),
    }
}

fn resolve(cmd: Command, flags: &Flags) -> Result<Resolved> {
    let file = match &flags.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<FileConfig>(&text)
                .with_context(|| format!("invalid config {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let def = defaults(cmd);
    let env_seed = match std::env::var("SNAKELAB_SEED") {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("SNAKELAB_SEED is not an integer: '{s}'"))?,
        ),
        Err(_) => None,
    };
    // a flag naming one source of the law overrides the other source in the file
    let (offspring, pmf) = match (&flags.offspring, &flags.pmf) {
        (Some(_), Some(_)) => bail!("give --offspring or --pmf, not both"),
        (Some(o), None) => (o.clone(), None),
        (None, Some(p)) => (String::new(), Some(p.clone())),
        (None, None) => match (&file.offspring, &file.pmf) {
            (Some(_), Some(_)) => bail!("config sets both offspring and pmf"),
            (o, p) => (
                o.clone().unwrap_or_else(|| {
                    if p.is_some() {
                        String::new()
                    } else {
                        def.offspring.into()
                    }
                }),
                p.clone(),
            ),
        },
    };
    let displacement = match (&flags.displacement, file.displacement) {
        (Some(s), _) => DisplacementSpec::parse(s)?,
        (None, Some(DisplacementField::Name(s))) => DisplacementSpec::parse(&s)?,
        (None, Some(DisplacementField::Spec(s))) => s,
        (None, None) => DisplacementSpec::parse(def.displacement)?,
    };
    let n = flags.n.or(file.n).unwrap_or(def.n);
    let workers = flags
        .workers
        .or(file.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |w| w.get()));
    if workers == 0 {
        bail!("workers must be positive");
    }
    Ok(Resolved {
        command: command_name(cmd),
        offspring,
        pmf,
        displacement,
        intensity: file.intensity,
        n,
        reps: flags.reps.or(file.reps).unwrap_or(def.reps),
        k: flags.k.or(file.k).unwrap_or(2),
        seed: flags.seed.or(file.seed).or(env_seed).unwrap_or(1),
        seeds: flags.seeds.or(file.seeds).unwrap_or(3),
        eta: flags.eta.or(file.eta),
        delta: flags.delta.or(file.delta).unwrap_or(0.02),
        gamma: flags.gamma.or(file.gamma).unwrap_or(1.0),
        gamma_grid: file
            .gamma_grid
            .unwrap_or_else(|| (0..7).map(|i| 1.5 + 0.25 * i as f64).collect()),
        p_floor: file.p_floor.unwrap_or(1e-3),
        null_splits: file.null_splits.unwrap_or(1000),
        tight_sizes: file.tight_sizes.unwrap_or_else(|| vec![5000, 20000, 80000]),
        tight_reps: file.tight_reps.unwrap_or(500),
        mc_samples: file.mc_samples.unwrap_or(20000),
        budget: file.budget.unwrap_or_else(|| default_budget(n)),
        out: flags.out.clone().or(file.out),
        workers,
    })
}

fn load_law(cfg: &Resolved) -> Result<OffspringLaw> {
    Ok(match &cfg.pmf {
        Some(p) => OffspringLaw::from_csv(p)?,
        None => OffspringLaw::builtin(&cfg.offspring)?,
    })
}

fn experiment(cfg: &Resolved, law: OffspringLaw, model: DisplacementModel) -> Experiment {
    let mut exp = Experiment::new(law, model, cfg.n);
    exp.reps = cfg.reps;
    exp.k = cfg.k;
    exp.seed = cfg.seed;
    exp.seeds = cfg.seeds;
    exp.p_floor = cfg.p_floor;
    exp.null_splits = cfg.null_splits;
    exp.delta = cfg.delta;
    exp.gamma = cfg.gamma;
    exp
}

/// Writes `name` under the output directory, or to stdout when `primary`
/// and no directory was given.
fn emit(cfg: &Resolved, name: &str, primary: bool, body: &[u8]) -> Result<()> {
    match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(name);
            fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        }
        None if primary => io::stdout().lock().write_all(body)?,
        None => {}
    }
    Ok(())
}

fn tree_csv(t: &LabeledOrderedTree) -> Vec<u8> {
    let mut s = String::from("vertex,parent,position,degree\n");
    for v in t.preorder() {
        let parent = if v == t.root() { 0 } else { t.parent(v) };
        let pos = if v == t.root() {
            0
        } else {
            t.child_position(v)
        };
        s.push_str(&format!("{v},{parent},{pos},{}\n", t.degree(v)));
    }
    s.into_bytes()
}

fn spatial_csv(sp: &SpatialTree) -> Vec<u8> {
    let t = sp.tree();
    let mut s = String::from("vertex,parent,position,degree,location\n");
    for v in t.preorder() {
        let parent = if v == t.root() { 0 } else { t.parent(v) };
        let pos = if v == t.root() {
            0
        } else {
            t.child_position(v)
        };
        s.push_str(&format!(
            "{v},{parent},{pos},{},{}\n",
            t.degree(v),
            sp.loc(v)
        ));
    }
    s.into_bytes()
}

fn sample_spatial(cfg: &Resolved, model: &DisplacementModel) -> Result<SpatialTree> {
    let law = load_law(cfg)?;
    if !law.admits_size(cfg.n) {
        bail!(
            "no tree of size {} under the law '{}' (support gcd {})",
            cfg.n,
            law.name(),
            law.support_gcd()
        );
    }
    let mut rng = stream_rng(cfg.seed, 0);
    let d = sample_degree_sequence_budget(&law, cfg.n, cfg.budget, &mut rng)?;
    let t = build_tree_only(&uniform_edge_perm(&d, &mut rng));
    Ok(sample_displacements(&t, model, &mut rng)?)
}

fn write_report(cfg: &Resolved, report: &StatsReport) -> Result<bool> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    emit(cfg, "report.json", true, &json)?;
    let mut csv = Vec::new();
    report.samples.write_csv(&mut csv)?;
    emit(cfg, "samples.csv", false, &csv)?;
    for v in &report.verdicts {
        eprintln!(
            "{:<28} {} ({} of {} runs failed)",
            v.test,
            if v.passed { "pass" } else { "FAIL" },
            v.failures,
            v.runs
        );
    }
    Ok(report.passed)
}

fn run(cmd: Command, cfg: &Resolved) -> Result<bool> {
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), toml::to_string(cfg)?)?;
    }
    match cmd {
        Command::SampleTree => {
            let law = load_law(cfg)?;
            let model = DisplacementSpec::Zero.to_model(&law)?;
            let sp = sample_spatial(cfg, &model)?;
            emit(cfg, "tree.csv", false, &tree_csv(sp.tree()))?;
            let mut csv = Vec::new();
            encode(&sp).write_csv(&mut csv)?;
            emit(cfg, "encoding.csv", true, &csv)?;
            Ok(true)
        }
        Command::Snake => {
            let law = load_law(cfg)?;
            let model = cfg.displacement.to_model(&law)?;
            let sp = sample_spatial(cfg, &model)?;
            emit(cfg, "spatial.csv", false, &spatial_csv(&sp))?;
            let e = encode(&sp);
            let mut csv = Vec::new();
            e.write_csv(&mut csv)?;
            emit(cfg, "encoding.csv", false, &csv)?;
            let mut head = Vec::new();
            e.write_contour_csv(&mut head)?;
            emit(cfg, "head.csv", true, &head)?;
            Ok(true)
        }
        Command::Figure => {
            let law = load_law(cfg)?;
            let model = cfg.displacement.to_model(&law)?;
            let mut csv = Vec::new();
            figure_head(&law, &model, cfg.n, cfg.seed, &mut csv)?;
            emit(cfg, "figure.csv", true, &csv)?;
            Ok(true)
        }
        Command::Oracle => {
            let suite = run_oracle_suite(cfg.seed, cfg.mc_samples)?;
            let mut json = serde_json::to_vec_pretty(&suite)?;
            json.push(b'\n');
            emit(cfg, "oracle.json", true, &json)?;
            eprintln!(
                "bijection: {} sequences, {} failures; {} exact reports; passed = {}",
                suite.bijection.sequences,
                suite.bijection.failures,
                suite.reports.len(),
                suite.passed
            );
            Ok(suite.passed)
        }
        Command::Verify { check } => {
            let law = load_law(cfg)?;
            let model = cfg.displacement.to_model(&law)?;
            let exp = experiment(cfg, law, model);
            let report = match check {
                Check::Main => verify_main_theorem(&exp)?,
                Check::Luka => verify_cor_height_luka(&exp, &cfg.tight_sizes, cfg.tight_reps)?,
                Check::Looptree => verify_looptree(&exp)?,
                Check::Tail => tail_bound_diagnostic(&exp, &cfg.gamma_grid)?,
                Check::Hairy => {
                    let spec = match &cfg.intensity {
                        Some(s) => s.clone(),
                        None => matching_intensity(&exp.model)?,
                    };
                    if let Some(eta) = cfg.eta {
                        if (eta - spec.eta()).abs() > 1e-12 {
                            bail!("eta = {eta} but the intensity has eta = {}", spec.eta());
                        }
                    }
                    verify_hairy(&exp, &spec)?
                }
            };
            write_report(cfg, &report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(cli.command, &cli.flags) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match toml::to_string(&cfg) {
        Ok(s) => eprint!("# resolved config\n{s}"),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
