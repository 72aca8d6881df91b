//! Command-line interface.
//!
//! Every subcommand resolves its flags into a [`Job`], runs it inside a rayon pool
//! of the requested size, writes its outputs into the run directory and finishes
//! with a `manifest.json` holding the resolved job, the seed and a SHA-256 digest
//! of each output. `rerun` executes the job stored in a manifest on one thread and
//! compares digests.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 digest mismatch on
//! rerun. Errors are printed to stderr as `{"error": {"kind", "message"}}`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::Error;
use crate::initkit::{analytic_row_covariance, empirical_row_covariance, InitFamily, InitScheme, LayerWeights};
use crate::mcprop::{
    boundary_from_probes, dead_node_probability, sweep_curves, BoundaryProbe, Preset, PropagationConfig, GROWTH_WINDOW,
};
use crate::meanfield::{g_k, phase_point, LengthFixedPoint, MapParams, PhaseLabel};
use crate::quadrature::{critical_points, Approximation, QuadratureGrid};
use crate::report::{self, fmt_f64, RunManifest, MANIFEST_NAME};
use crate::rng::{self, tag};
use crate::trainer::{compare_schemes, rank_test_less, run_experiment, OptimizerConfig, TeacherSpec, TrainConfig};

/// Environment variable naming the root under which default run directories are created.
pub const OUT_ROOT_ENV: &str = "RELU_CORR_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

const EXIT_RUNTIME: i32 = 1;
const EXIT_USAGE: i32 = 2;
const EXIT_MISMATCH: i32 = 3;

const GRAMMAR_HELP: &str = "\
Numeric lists:
  A value list is a comma-separated sequence of items. Each item is a number
  or a range start:stop:step, which includes start and excludes stop
  (0.5:2:0.5 is 0.5, 1, 1.5). Range values are rounded to 12 decimals.

Schemes:
  NAME[:key=value]...  with NAME one of he, aci, pci, rai, raai, correlated
  and keys sigma2w, sigma2b, k, beta (on|off). Defaults: he (2, 0),
  aci (2, 0, k=100), pci (2, 0, k=-0.5), rai (0.36, 0), raai (0.9, 0, k=100),
  correlated is aci.  Example: raai:sigma2w=1.2:k=10

Output:
  Files go to --out, or to $RELU_CORR_OUT/<subcommand> (default root ./runs).";

#[derive(Debug, Parser)]
#[command(name = "relu-corr", version, about = "Signal propagation in correlated ReLU networks", after_help = GRAMMAR_HELP)]
struct Cli {
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Scale of the default experiment sizes.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mean-field phase labels and fixed points over a parameter grid.
    PhaseDiagram(PhaseDiagramArgs),
    /// Monte Carlo length/correlation curves over a sigma2_w grid.
    Propagate(PropagateArgs),
    /// Dead-node probabilities of random networks.
    Deadnodes(DeadnodesArgs),
    /// Critical variances of the beta-substituted schemes.
    CriticalPoints(CriticalPointsArgs),
    /// One teacher-student training run.
    Train(TrainArgs),
    /// Several schemes trained over replicate seeds.
    Compare(CompareArgs),
    /// Sampler covariance check and weight dumps.
    ValidateInit(ValidateInitArgs),
    /// Repeat the job in a manifest on one thread and compare output digests.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
struct PhaseDiagramArgs {
    /// Correlation strengths (value list).
    #[arg(long, default_value = "0")]
    k: String,
    /// Weight variances (value list).
    #[arg(long, default_value = "0.5:4:0.05")]
    sigma2w: String,
    /// Bias variances (value list).
    #[arg(long, default_value = "0.1")]
    sigma2b: String,
}

#[derive(Debug, Args)]
struct PropagateArgs {
    #[arg(long, default_value = "he")]
    scheme: String,
    /// Weight variances to sweep (value list); defaults to the scheme's own.
    #[arg(long)]
    sigma2w: Option<String>,
    #[arg(long)]
    sigma2b: Option<f64>,
    #[arg(long)]
    k: Option<f64>,
    #[command(flatten)]
    net: NetworkArgs,
    /// Correlation of the two signals in each input pair.
    #[arg(long)]
    c0: Option<f64>,
}

#[derive(Debug, Args)]
struct NetworkArgs {
    /// Nodes per layer (N).
    #[arg(long)]
    width: Option<usize>,
    /// Layers (L).
    #[arg(long)]
    depth: Option<usize>,
    /// Input pairs (propagate) or inputs (deadnodes) per network (M).
    #[arg(long)]
    inputs: Option<usize>,
    #[arg(long)]
    networks: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DeadnodesArgs {
    /// Scheme to measure; repeatable. Defaults to he, aci, rai, raai.
    #[arg(long)]
    scheme: Vec<String>,
    #[command(flatten)]
    net: NetworkArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ApproxArg {
    Rms,
    Mean,
    Both,
}

#[derive(Debug, Args)]
struct CriticalPointsArgs {
    #[arg(long, value_enum, default_value_t = ApproxArg::Both)]
    approx: ApproxArg,
    /// Correlation strength of RAAI.
    #[arg(long, default_value_t = 100.0)]
    k: f64,
    #[arg(long, default_value_t = 64)]
    hermite_order: usize,
    #[arg(long, default_value_t = 64)]
    beta_order: usize,
    /// Bisection tolerance on sigma2_w.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TeacherArg {
    Standard,
    Simple,
    Complex,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    teacher: Option<TeacherArg>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Student initialization.
    #[arg(long)]
    scheme: Option<String>,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Student initialization; repeatable. Defaults to he and raai.
    #[arg(long)]
    scheme: Vec<String>,
    /// Replicates per scheme.
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[command(flatten)]
    train: TrainOverrides,
}

#[derive(Debug, Args)]
struct ValidateInitArgs {
    #[arg(long, default_value = "aci")]
    scheme: String,
    #[arg(long, default_value_t = 8)]
    n_in: usize,
    #[arg(long, default_value_t = 8)]
    n_out: usize,
    /// Rows drawn for the covariance estimate.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// A fully resolved subcommand; stored in the manifest for reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    PhaseDiagram { k: Vec<f64>, sigma2_w: Vec<f64>, sigma2_b: Vec<f64> },
    Propagate { config: PropagationConfig, sigma2_w: Vec<f64> },
    Deadnodes { configs: Vec<PropagationConfig> },
    CriticalPoints { approximations: Vec<Approximation>, k: f64, grid: QuadratureGrid, tol: f64 },
    Train { config: TrainConfig },
    Compare { template: TrainConfig, schemes: Vec<InitScheme>, seeds: usize },
    ValidateInit { scheme: InitScheme, n_in: usize, n_out: usize, samples: usize, seed: u64 },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::PhaseDiagram { .. } => "phase-diagram",
            Job::Propagate { .. } => "propagate",
            Job::Deadnodes { .. } => "deadnodes",
            Job::CriticalPoints { .. } => "critical-points",
            Job::Train { .. } => "train",
            Job::Compare { .. } => "compare",
            Job::ValidateInit { .. } => "validate-init",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Job::PhaseDiagram { .. } | Job::CriticalPoints { .. } => 0,
            Job::Propagate { config, .. } => config.seed,
            Job::Deadnodes { configs } => configs.first().map_or(0, |c| c.seed),
            Job::Train { config } => config.seed,
            Job::Compare { template, .. } => template.seed,
            Job::ValidateInit { seed, .. } => *seed,
        }
    }

    /// Runs the job, writing into `dir`. Returns the written files and a short
    /// human-readable report.
    pub fn run(&self, dir: &Path) -> crate::Result<(Vec<PathBuf>, String)> {
        match self {
            Job::PhaseDiagram { k, sigma2_w, sigma2_b } => run_phase_diagram(dir, k, sigma2_w, sigma2_b),
            Job::Propagate { config, sigma2_w } => run_propagate(dir, config, sigma2_w),
            Job::Deadnodes { configs } => run_deadnodes(dir, configs),
            Job::CriticalPoints { approximations, k, grid, tol } => {
                run_critical_points(dir, approximations, *k, grid, *tol)
            }
            Job::Train { config } => run_train(dir, config),
            Job::Compare { template, schemes, seeds } => run_compare(dir, template, schemes, *seeds),
            Job::ValidateInit { scheme, n_in, n_out, samples, seed } => {
                run_validate_init(dir, scheme, *n_in, *n_out, *samples, *seed)
            }
        }
    }
}

/// Parses a value list: comma-separated numbers and `start:stop:step` ranges.
pub fn parse_values(text: &str) -> crate::Result<Vec<f64>> {
    let bad = |msg: String| Error::Config(format!("value list '{text}': {msg}"));
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim) {
        let parts: Vec<&str> = item.split(':').collect();
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|e| bad(format!("'{p}': {e}"))))
            .collect::<crate::Result<Vec<f64>>>()?;
        if nums.iter().any(|x| !x.is_finite()) {
            return Err(bad("values must be finite".into()));
        }
        match nums[..] {
            [x] => out.push(x),
            [start, stop, step] => {
                if !(step > 0.0) {
                    return Err(bad(format!("step must be > 0 in '{item}'")));
                }
                if stop <= start {
                    return Err(bad(format!("empty range '{item}'")));
                }
                let n = ((stop - start) / step - 1e-9).ceil() as usize;
                out.extend((0..n).map(|i| round12(start + i as f64 * step)));
            }
            _ => return Err(bad(format!("'{item}' is neither a number nor start:stop:step"))),
        }
    }
    Ok(out)
}

fn round12(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Parses `NAME[:key=value]...` into a scheme.
pub fn parse_scheme(text: &str) -> crate::Result<InitScheme> {
    let bad = |msg: String| Error::Config(format!("scheme '{text}': {msg}"));
    let mut parts = text.split(':');
    let name = parts.next().unwrap_or_default().trim().to_ascii_lowercase();
    let mut scheme = match name.as_str() {
        "he" => InitScheme::he(),
        "aci" | "correlated" => InitScheme::aci(),
        "pci" => InitScheme::correlated(2.0, 0.0, -0.5),
        "rai" => InitScheme::rai(),
        "raai" => InitScheme::raai(),
        _ => return Err(bad(format!("unknown scheme name '{name}'"))),
    };
    for kv in parts {
        let (key, value) = kv.split_once('=').ok_or_else(|| bad(format!("expected key=value, got '{kv}'")))?;
        let num = || value.trim().parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
        match key.trim() {
            "sigma2w" => scheme.sigma2_w = num()?,
            "sigma2b" => scheme.sigma2_b = num()?,
            "k" => scheme.k = num()?,
            "beta" => {
                scheme.beta_substitution = match value.trim() {
                    "on" => true,
                    "off" => false,
                    v => return Err(bad(format!("beta must be on or off, got '{v}'"))),
                }
            }
            k => return Err(bad(format!("unknown key '{k}'"))),
        }
    }
    scheme.validate()?;
    Ok(scheme)
}

fn network_config(preset: Preset, scheme: InitScheme, net: &NetworkArgs) -> PropagationConfig {
    let mut cfg = PropagationConfig::preset(preset, scheme);
    cfg.width = net.width.unwrap_or(cfg.width);
    cfg.depth = net.depth.unwrap_or(cfg.depth);
    cfg.n_inputs = net.inputs.unwrap_or(cfg.n_inputs);
    cfg.n_networks = net.networks.unwrap_or(cfg.n_networks);
    cfg.seed = net.seed;
    cfg
}

fn train_config(preset: Preset, o: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let optimizer = o.optimizer.map(|opt| match opt {
        OptimizerArg::Sgd => OptimizerConfig::sgd(),
        OptimizerArg::Adam => OptimizerConfig::adam(),
    });
    let mut cfg = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => match preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(optimizer.unwrap_or_else(OptimizerConfig::adam)),
        },
    };
    if let Some(opt) = optimizer {
        cfg.optimizer = opt;
    }
    if let Some(lr) = o.lr {
        match &mut cfg.optimizer {
            OptimizerConfig::Sgd { lr: l } | OptimizerConfig::Adam { lr: l, .. } => *l = lr,
        }
    }
    if let Some(t) = o.teacher {
        cfg.teacher = match t {
            TeacherArg::Standard => TeacherSpec::Standard,
            TeacherArg::Simple => TeacherSpec::Simple,
            TeacherArg::Complex => TeacherSpec::Complex,
        };
    }
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.depth, o.depth);
    set(&mut cfg.width, o.width);
    set(&mut cfg.input_dim, o.input_dim);
    set(&mut cfg.n_train, o.n_train);
    set(&mut cfg.n_val, o.n_val);
    set(&mut cfg.batch_size, o.batch_size);
    set(&mut cfg.epochs, o.epochs);
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if o.data_seed.is_some() {
        cfg.data_seed = o.data_seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(cmd: Command, preset: Preset) -> anyhow::Result<Job> {
    Ok(match cmd {
        Command::PhaseDiagram(a) => Job::PhaseDiagram {
            k: parse_values(&a.k)?,
            sigma2_w: parse_values(&a.sigma2w)?,
            sigma2_b: parse_values(&a.sigma2b)?,
        },
        Command::Propagate(a) => {
            let mut scheme = parse_scheme(&a.scheme)?;
            if let Some(b) = a.sigma2b {
                scheme.sigma2_b = b;
            }
            if let Some(k) = a.k {
                scheme.k = k;
            }
            let mut config = network_config(preset, scheme, &a.net);
            if let Some(c0) = a.c0 {
                config.input_correlation = c0;
            }
            let sigma2_w = match &a.sigma2w {
                Some(text) => parse_values(text)?,
                None => vec![scheme.sigma2_w],
            };
            config.validate()?;
            Job::Propagate { config, sigma2_w }
        }
        Command::Deadnodes(a) => {
            let names = if a.scheme.is_empty() {
                vec!["he".into(), "aci".into(), "rai".into(), "raai".into()]
            } else {
                a.scheme
            };
            let configs = names
                .iter()
                .map(|n| {
                    let cfg = network_config(preset, parse_scheme(n)?, &a.net);
                    cfg.validate().map(|_| cfg)
                })
                .collect::<crate::Result<Vec<_>>>()?;
            Job::Deadnodes { configs }
        }
        Command::CriticalPoints(a) => {
            let approximations = match a.approx {
                ApproxArg::Rms => vec![Approximation::Rms],
                ApproxArg::Mean => vec![Approximation::Mean],
                ApproxArg::Both => Approximation::ALL.to_vec(),
            };
            Job::CriticalPoints {
                approximations,
                k: a.k,
                grid: QuadratureGrid::new(a.hermite_order, a.beta_order)?,
                tol: a.tol,
            }
        }
        Command::Train(a) => {
            let mut config = train_config(preset, &a.train)?;
            if let Some(s) = &a.scheme {
                config.student_init = parse_scheme(s)?;
            }
            Job::Train { config }
        }
        Command::Compare(a) => {
            let names = if a.scheme.is_empty() { vec!["he".into(), "raai".into()] } else { a.scheme };
            let schemes = names.iter().map(|n| parse_scheme(n)).collect::<crate::Result<Vec<_>>>()?;
            if a.seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()).into());
            }
            Job::Compare { template: train_config(preset, &a.train)?, schemes, seeds: a.seeds }
        }
        Command::ValidateInit(a) => Job::ValidateInit {
            scheme: parse_scheme(&a.scheme)?,
            n_in: a.n_in,
            n_out: a.n_out,
            samples: a.samples,
            seed: a.seed,
        },
        Command::Rerun(_) => unreachable!("rerun is handled before resolution"),
    })
}

fn csv_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn run_phase_diagram(dir: &Path, ks: &[f64], s2w: &[f64], s2b: &[f64]) -> crate::Result<(Vec<PathBuf>, String)> {
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut text = String::new();
    for &k in ks {
        let gk = g_k(k).ok();
        for &b in s2b {
            let mut first_chaotic = None;
            let mut first_unbounded = None;
            for &w in s2w {
                let pt = phase_point(&MapParams::new(w, b, k)?)?;
                if pt.phase != PhaseLabel::BoundedOrdered && first_chaotic.is_none() {
                    first_chaotic = Some(w);
                }
                if pt.phase == PhaseLabel::Unbounded && first_unbounded.is_none() {
                    first_unbounded = Some(w);
                }
                let q = match pt.fixed.q_star {
                    LengthFixedPoint::Finite(q) => fmt_f64(q),
                    LengthFixedPoint::Vanishing => "0".into(),
                    LengthFixedPoint::Divergent => "inf".into(),
                };
                rows.push(vec![
                    fmt_f64(w),
                    fmt_f64(b),
                    fmt_f64(k),
                    pt.phase.to_string(),
                    q,
                    csv_opt(pt.fixed.c_star),
                    fmt_f64(w / 2.0),
                ]);
            }
            let _ = writeln!(
                text,
                "k={k} sigma2_b={b}: chaos boundary 2, length boundary {}; first chaotic grid point {}, first unbounded {}",
                gk.map_or("inf".into(), |g| format!("{g:.4}")),
                first_chaotic.map_or("-".into(), |x| x.to_string()),
                first_unbounded.map_or("-".into(), |x| x.to_string()),
            );
            series.push(json!({
                "k": k,
                "sigma2_b": b,
                "chaos_boundary": 2.0,
                "length_boundary": gk,
                "first_chaotic_grid_point": first_chaotic,
                "first_unbounded_grid_point": first_unbounded,
            }));
        }
    }
    let csv = dir.join("phase_diagram.csv");
    report::write_csv(&csv, &["sigma2_w", "sigma2_b", "k", "phase", "q_star", "c_star", "chi1"], rows)?;
    let summary = dir.join("summary.json");
    report::write_json(&summary, &json!({ "series": series }))?;
    Ok((vec![csv, summary], text))
}

fn curve_file(sigma2_w: f64) -> String {
    format!("curve_sigma2w_{sigma2_w}.csv")
}

fn run_propagate(dir: &Path, base: &PropagationConfig, grid: &[f64]) -> crate::Result<(Vec<PathBuf>, String)> {
    let curves = sweep_curves(base, grid)?;
    let mut files = Vec::new();
    let mut points = Vec::new();
    let mut probes = Vec::new();
    let mut text = String::new();
    for (&w, curve) in grid.iter().zip(&curves) {
        let path = dir.join(curve_file(w));
        report::write_curve_csv(curve, &path)?;
        files.push(path);
        let probe = BoundaryProbe::from_curve(w, curve);
        let scheme = base.scheme.with_sigma2_w(w);
        let analytic = match scheme.family {
            InitFamily::He | InitFamily::CorrelatedGaussian => {
                Some(phase_point(&MapParams::new(w, scheme.sigma2_b, scheme.k)?)?)
            }
            _ => None,
        };
        let _ = writeln!(
            text,
            "sigma2_w={w}: growth {:.4}, final c {}, plateau q {:.6e}{}",
            probe.growth,
            probe.final_c.map_or("-".into(), |c| format!("{c:.4}")),
            curve.plateau_q(GROWTH_WINDOW),
            if curve.is_truncated() { " (truncated)" } else { "" },
        );
        points.push(json!({
            "sigma2_w": w,
            "file": curve_file(w),
            "probe": &probe,
            "plateau_q": curve.plateau_q(GROWTH_WINDOW),
            "dead_fraction": &curve.dead_fraction,
            "overflow_at": curve.overflow_at,
            "analytic": analytic,
        }));
        probes.push(probe);
    }
    let boundary = if grid.len() >= 2 {
        match boundary_from_probes(probes, &base.scheme.label()) {
            Ok(b) => json!({ "length": b.length_boundary, "chaos": b.chaos_boundary }),
            Err(e) => json!({ "error": { "kind": e.kind(), "message": e.to_string() } }),
        }
    } else {
        serde_json::Value::Null
    };
    let _ = writeln!(text, "boundaries: {boundary}");
    let summary = dir.join("summary.json");
    report::write_json(
        &summary,
        &json!({ "config": base, "scheme": base.scheme.label(), "points": points, "boundaries": boundary }),
    )?;
    files.push(summary);
    Ok((files, text))
}

fn run_deadnodes(dir: &Path, configs: &[PropagationConfig]) -> crate::Result<(Vec<PathBuf>, String)> {
    let reports = configs.iter().map(dead_node_probability).collect::<crate::Result<Vec<_>>>()?;
    let mut text = String::new();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let _ = writeln!(text, "{:<12} {:.4} (std {:.4})", r.scheme.label(), r.probability, r.std_across_networks);
            vec![r.scheme.label(), fmt_f64(r.probability), fmt_f64(r.std_across_networks)]
        })
        .collect();
    let table = dir.join("deadnodes.csv");
    report::write_csv(&table, &["scheme", "dead_probability", "std_across_networks"], rows)?;

    let labels: Vec<String> = reports.iter().map(|r| r.scheme.label()).collect();
    let mut header = vec!["layer"];
    header.extend(labels.iter().map(String::as_str));
    let layers = reports.iter().map(|r| r.per_layer.len()).max().unwrap_or(0);
    let per_layer = (0..layers).map(|l| {
        let mut row = vec![(l + 1).to_string()];
        row.extend(reports.iter().map(|r| csv_opt(r.per_layer.get(l).copied())));
        row
    });
    let layer_csv = dir.join("deadnodes_per_layer.csv");
    report::write_csv(&layer_csv, &header, per_layer)?;

    let summary = dir.join("summary.json");
    report::write_json(&summary, &json!({ "configs": configs, "reports": reports }))?;
    Ok((vec![table, layer_csv, summary], text))
}

fn run_critical_points(
    dir: &Path,
    approxs: &[Approximation],
    k: f64,
    grid: &QuadratureGrid,
    tol: f64,
) -> crate::Result<(Vec<PathBuf>, String)> {
    let points = critical_points(approxs, k, grid, tol)?;
    let mut text = format!("{:<14}{:<8}{:<10}{}\n", "approximation", "scheme", "quantity", "critical_sigma2_w");
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let quantity = serde_json::to_value(p.quantity).expect("enum serializes");
            let quantity = quantity.as_str().unwrap_or_default().to_string();
            let _ = writeln!(
                text,
                "{:<14}{:<8}{:<10}{:.4}",
                p.approximation.to_string(),
                p.scheme,
                quantity,
                p.critical_sigma2_w
            );
            vec![p.approximation.to_string(), p.scheme.clone(), quantity, fmt_f64(p.k), fmt_f64(p.critical_sigma2_w)]
        })
        .collect();
    let csv = dir.join("critical_points.csv");
    report::write_csv(&csv, &["approximation", "scheme", "quantity", "k", "critical_sigma2_w"], rows)?;
    let summary = dir.join("summary.json");
    report::write_json(&summary, &json!({ "grid": grid, "tol": tol, "points": points }))?;
    Ok((vec![csv, summary], text))
}

fn run_train(dir: &Path, config: &TrainConfig) -> crate::Result<(Vec<PathBuf>, String)> {
    let run = run_experiment(config)?;
    let json_path = dir.join("run.json");
    report::write_json(&json_path, &run)?;
    let csv = dir.join("curve.csv");
    report::write_train_csv(&run, &csv)?;
    let text = format!(
        "{} {}: val loss {:.6e} -> {:.6e}{}\n",
        config.student_init.label(),
        config.optimizer.name(),
        run.initial_val_loss,
        run.final_val_loss(),
        run.diverged_at.map_or(String::new(), |e| format!(" (diverged at epoch {e})")),
    );
    Ok((vec![json_path, csv], text))
}

fn run_compare(
    dir: &Path,
    template: &TrainConfig,
    schemes: &[InitScheme],
    seeds: usize,
) -> crate::Result<(Vec<PathBuf>, String)> {
    let cmp = compare_schemes(schemes, template, seeds)?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for (s, runs) in cmp.runs.iter().enumerate() {
        for (i, run) in runs.iter().enumerate() {
            let path = dir.join(format!("runs/scheme{s}_replicate{i}.csv"));
            report::write_train_csv(run, &path)?;
            files.push(path);
            rows.push(vec![
                s.to_string(),
                cmp.schemes[s].label.clone(),
                i.to_string(),
                run.config.seed.to_string(),
                run.config.data_seed().to_string(),
                fmt_f64(run.final_val_loss()),
                run.diverged_at.map_or(String::new(), |e| e.to_string()),
            ]);
        }
    }
    let table = dir.join("comparison.csv");
    report::write_csv(
        &table,
        &["scheme_index", "scheme", "replicate", "seed", "data_seed", "final_val_loss", "diverged_at"],
        rows,
    )?;

    let epochs = cmp.schemes.iter().map(|s| s.mean_val.len()).max().unwrap_or(0);
    let mut header = vec!["epoch".to_string()];
    header.extend(cmp.schemes.iter().map(|s| format!("{} mean_val", s.label)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mean_rows = (0..epochs).map(|e| {
        let mut row = vec![e.to_string()];
        row.extend(cmp.schemes.iter().map(|s| csv_opt(s.mean_val.get(e).copied())));
        row
    });
    let means = dir.join("mean_curves.csv");
    report::write_csv(&means, &header, mean_rows)?;

    let mut text = String::new();
    let base = &cmp.schemes[0];
    let mut tests = Vec::new();
    for s in &cmp.schemes {
        let _ = writeln!(text, "{:<16} final val {:.6e} (std {:.2e})", s.label, s.final_mean, s.final_std);
        if !std::ptr::eq(s, base) {
            tests.push(json!({
                "scheme": s.label,
                "baseline": base.label,
                "p_less": rank_test_less(&s.final_val, &base.final_val),
                "p_greater": rank_test_less(&base.final_val, &s.final_val),
            }));
        }
    }
    let summary = dir.join("summary.json");
    report::write_json(&summary, &json!({ "report": cmp, "rank_tests": tests }))?;
    files.extend([table, means, summary]);
    Ok((files, text))
}

fn run_validate_init(
    dir: &Path,
    scheme: &InitScheme,
    n_in: usize,
    n_out: usize,
    samples: usize,
    seed: u64,
) -> crate::Result<(Vec<PathBuf>, String)> {
    let mut rng = rng::stream(seed, &[tag::VALIDATE]);
    let emp = empirical_row_covariance(scheme, n_in, samples, &mut rng)?;
    let ana = analytic_row_covariance(scheme, n_in);
    let z = covariance_z_scores(&emp, &ana, samples);
    let max_z = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_dev = (&emp - &ana).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let layer = LayerWeights::sample(scheme, n_in, n_out, seed)?;
    let csv = dir.join("weights.csv");
    layer.write_csv(&csv)?;
    let bin = dir.join("weights.bin");
    layer.write_binary(&bin)?;
    let summary = dir.join("covariance.json");
    report::write_json(
        &summary,
        &json!({
            "scheme": scheme,
            "label": scheme.label(),
            "n_in": n_in,
            "samples": samples,
            "analytic": ana,
            "empirical": emp,
            "max_abs_deviation": max_dev,
            "max_z": max_z,
            "beta_entries": layer.substituted,
        }),
    )?;
    let text = format!("{}: max |z| = {max_z:.3} over {n_in}x{n_in} entries, {samples} rows\n", scheme.label());
    Ok((vec![summary, csv, bin], text))
}

/// `(empirical - analytic) / se` entrywise, with the Gaussian standard error
/// `se_ij^2 = (A_ii A_jj + A_ij^2) / (n - 1)`.
pub fn covariance_z_scores(empirical: &Array2<f64>, analytic: &Array2<f64>, samples: usize) -> Array2<f64> {
    let n = analytic.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        let a = analytic[[i, j]];
        let se = ((analytic[[i, i]] * analytic[[j, j]] + a * a) / (samples as f64 - 1.0)).sqrt();
        (empirical[[i, j]] - a) / se
    })
}

fn default_dir(command: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
    root.join(command)
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().context("building thread pool")?;
    Ok(pool.install(f))
}

/// Runs `job` into `dir` and writes its manifest.
pub fn execute(job: &Job, dir: &Path, threads: usize, args: Vec<String>) -> anyhow::Result<(RunManifest, String)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let (files, text, used_threads) =
        with_pool(threads, || job.run(dir).map(|(f, t)| (f, t, rayon::current_num_threads())))??;
    let manifest = RunManifest {
        command: job.name().to_string(),
        args,
        config: serde_json::to_value(job)?,
        seed: job.seed(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: used_threads,
        started: started.to_rfc3339(),
        finished: chrono::Utc::now().to_rfc3339(),
        wall_time_secs: clock.elapsed().as_secs_f64(),
        outputs: RunManifest::digest_outputs(dir, &files)?,
    };
    report::write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok((manifest, text))
}

enum Outcome {
    Done,
    Mismatch(Vec<String>),
}

fn run(cli: Cli, args: Vec<String>) -> anyhow::Result<Outcome> {
    let preset = Preset::from(cli.preset);
    if let Command::Rerun(r) = &cli.command {
        let original: RunManifest = report::read_json(&r.manifest)?;
        let job: Job = serde_json::from_value(original.config.clone())
            .map_err(|e| Error::Config(format!("{}: stored job: {e}", r.manifest.display())))?;
        let dir = match &cli.out {
            Some(d) => d.clone(),
            None => r.manifest.parent().unwrap_or(Path::new(".")).join("rerun"),
        };
        let (manifest, _) = execute(&job, &dir, 1, args)?;
        let bad = original.mismatches(&manifest);
        println!(
            "rerun of {} into {}: {} files, {} mismatched",
            job.name(),
            dir.display(),
            manifest.outputs.len(),
            bad.len()
        );
        return Ok(if bad.is_empty() { Outcome::Done } else { Outcome::Mismatch(bad) });
    }
    let job = resolve(cli.command, preset)?;
    let dir = cli.out.unwrap_or_else(|| default_dir(job.name()));
    let (_, text) = execute(&job, &dir, cli.threads, args)?;
    print!("{text}");
    println!("outputs in {}", dir.display());
    Ok(Outcome::Done)
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.kind();
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "json";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "runtime"
}

fn print_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            print_error("usage", e.to_string().trim_end());
            return EXIT_USAGE;
        }
    };
    let args = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, args) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Mismatch(files)) => {
            print_error("digest_mismatch", &format!("outputs differ: {}", files.join(", ")));
            EXIT_MISMATCH
        }
        Err(err) => {
            print_error(error_kind(&err), &format!("{err:#}"));
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_excludes_stop() {
        assert_eq!(parse_values("0.5:2:0.5").unwrap(), vec![0.5, 1.0, 1.5]);
        assert_eq!(parse_values("1.5:3.5:0.05").unwrap().len(), 40);
        assert_eq!(parse_values("0:1:0.1").unwrap()[3], 0.3);
    }

    #[test]
    fn lists_mix_numbers_and_ranges() {
        assert_eq!(parse_values("0, 1:3:1 ,7").unwrap(), vec![0.0, 1.0, 2.0, 7.0]);
    }

    #[test]
    fn malformed_ranges_rejected() {
        for bad in ["", "1:2", "1:2:0", "2:1:0.5", "a", "1:2:3:4", "nan"] {
            assert!(parse_values(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn scheme_specs() {
        assert_eq!(parse_scheme("he").unwrap(), InitScheme::he());
        assert_eq!(parse_scheme("RAAI").unwrap(), InitScheme::raai());
        let s = parse_scheme("raai:sigma2w=1.2:k=10:beta=off").unwrap();
        assert_eq!((s.sigma2_w, s.k, s.beta_substitution), (1.2, 10.0, false));
        assert_eq!(parse_scheme("pci").unwrap().label(), "PCI(k=-0.5)");
        assert!(parse_scheme("xavier").is_err());
        assert!(parse_scheme("he:sigma2w").is_err());
        assert!(parse_scheme("aci:k=-2").is_err());
    }

    #[test]
    fn job_round_trips_through_json() {
        let job = Job::Propagate {
            config: PropagationConfig::desk(InitScheme::aci().with_sigma2_b(0.1)),
            sigma2_w: parse_values("1.5:3.5:0.05").unwrap(),
        };
        let back: Job = serde_json::from_value(serde_json::to_value(&job).unwrap()).unwrap();
        assert_eq!(back, job);
    }

    #[test]
    fn z_scores_vanish_on_exact_match() {
        let a = analytic_row_covariance(&InitScheme::aci(), 4);
        assert!(covariance_z_scores(&a, &a, 1000).iter().all(|z| *z == 0.0));
    }
}
