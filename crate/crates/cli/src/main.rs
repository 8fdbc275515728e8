//! `maxplus`: value iteration, max-plus approximation and benchmark sweeps
//! from the command line.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use maxplus_vi::benchmarks::{build, error_metrics, BenchmarkProblem, ValueSpec};
use maxplus_vi::dictionaries::{
    lipschitz_estimate, make_bregman_dictionary, make_distance_dictionary, make_partition_dictionary,
    regular_centers, Partition,
};
use maxplus_vi::experiments::{cells_per_dim, run_sweep, select_affine_scale, write_sweep_csv, Method, SweepConfig};
use maxplus_vi::matching_pursuit::{
    current_values, run_matching_pursuit, write_trace_csv, Norm, PursuitConfig, PursuitStart,
};
use maxplus_vi::reduced_vi::{compile_forms, run_reduced_vi, CompiledMdp, FormsCache};
use maxplus_vi::{Dict, Grid, Mdp, Metric, Values};

/// Accuracy of the value-iteration optimum that approximation errors are measured against.
const REFERENCE_TOL: f64 = 1e-10;

#[derive(Parser, Serialize)]
#[command(name = "maxplus", version, about = "Max-plus approximate value iteration for deterministic MDPs")]
struct Cli {
    /// Worker threads for parallel sections (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Exact value iteration with a residual certificate.
    Solve(SolveArgs),
    /// Reduced value iteration on a fixed dictionary.
    Approx(ApproxArgs),
    /// Greedy dictionary growth by matching pursuit.
    Greedy(GreedyArgs),
    /// Benchmark problems.
    #[command(subcommand)]
    Benchmark(BenchmarkCommand),
    /// Error sweep over methods, horizons and dictionary sizes.
    Sweep(SweepArgs),
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum BenchmarkCommand {
    /// Write a benchmark MDP and its analytic values.
    Build(BuildArgs),
}

fn parse_spec(s: &str) -> Result<ValueSpec, String> {
    s.parse().map_err(|e: maxplus_vi::Error| e.to_string())
}

fn parse_norm(s: &str) -> Result<Norm, String> {
    s.parse().map_err(|e: maxplus_vi::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: maxplus_vi::Error| e.to_string())
}

#[derive(Args, Serialize, Clone)]
struct ProblemArgs {
    /// Builtin benchmark: v1d_bumps, v1d_convex, v2d_sparse or v2d_full.
    #[arg(long, value_parser = parse_spec, conflicts_with = "mdp")]
    problem: Option<ValueSpec>,
    /// Grid nodes per dimension (default 362 in 1D, 45 in 2D).
    #[arg(long)]
    nodes: Option<usize>,
    /// Continuous-time discount base (default 0.5 in 1D, 0.919 in 2D).
    #[arg(long)]
    eta: Option<f64>,
    /// MDP file in the text format.
    #[arg(long)]
    mdp: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Stop once the Bellman residual is at most this.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000_000)]
    max_iter: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Atoms {
    /// Indicators of the cells of a regular partition.
    Constant,
    /// Distance cones at regularly spaced centers.
    Affine,
    /// Quadratic-minus-linear atoms on a grid of slopes.
    Bregman,
}

impl fmt::Display for Atoms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Args, Serialize)]
struct ApproxArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Horizon: the number of Bellman steps compiled into the forms.
    #[arg(long, default_value_t = 4)]
    rho: usize,
    /// Dictionary size.
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Atoms::Constant)]
    atoms: Atoms,
    /// Scale of the distance atoms (default: the multiple of the Lipschitz estimate of the
    /// optimum that best fits it).
    #[arg(long)]
    scale: Option<f64>,
    /// Curvature of the Bregman reference `λ/2 ‖x‖²`.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Certified sup-norm accuracy of the reduced fixed point.
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 10_000_000)]
    max_iter: usize,
    /// Directory caching compiled forms between runs.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GreedyArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 4)]
    rho: usize,
    /// Atom budget.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Start from one cell and split (constant) or from the zero atom and add distance atoms (affine).
    #[arg(long, value_enum, default_value_t = Atoms::Constant)]
    atoms: Atoms,
    /// Norm of the pursuit criteria: l1 or linf.
    #[arg(long, value_parser = parse_norm, default_value = "l1")]
    norm: Norm,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Pair the best k candidates per dictionary and keep the pair with the smallest Bellman residual.
    #[arg(long, default_value_t = 0)]
    lookahead: usize,
    /// MM rounds refining the scale of each adopted distance atom.
    #[arg(long, default_value_t = 0)]
    mm_rounds: usize,
    /// Recorded in the metadata; candidate pools are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct BuildArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Comma-separated horizons.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    rho: Vec<usize>,
    /// Comma-separated dictionary sizes.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    n: Vec<usize>,
    /// Comma-separated subset of fixed-constant, fixed-affine, greedy-constant, greedy-affine.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, value_parser = parse_norm, default_value = "l1")]
    norm: Norm,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Scale of the fixed distance atoms (default: chosen per n).
    #[arg(long)]
    scale: Option<f64>,
    /// Write zero wall-clock columns so reruns are byte-identical.
    #[arg(long)]
    no_timings: bool,
    /// Recorded in the metadata; candidate pools are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Errors reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--tol must be positive, got {tol}")))
    }
}

fn check_positive(name: &str, x: usize) -> Result<()> {
    if x == 0 {
        Err(usage(format!("--{name} must be positive")))
    } else {
        Ok(())
    }
}

enum Source {
    Benchmark(BenchmarkProblem<f64>),
    File(Mdp),
}

impl Source {
    fn mdp(&self) -> &Mdp {
        match self {
            Source::Benchmark(p) => &p.mdp,
            Source::File(m) => m,
        }
    }

    fn grid(&self) -> Option<&Arc<Grid>> {
        match self {
            Source::Benchmark(p) => Some(&p.grid),
            Source::File(m) => m.grid(),
        }
    }
}

fn benchmark(args: &ProblemArgs, spec: ValueSpec) -> Result<BenchmarkProblem<f64>> {
    let (nodes, eta) = match spec.dimension() {
        1 => (362, 0.5),
        _ => (45, 0.919),
    };
    let nodes = args.nodes.unwrap_or(nodes);
    let eta = args.eta.unwrap_or(eta);
    if nodes < 3 {
        return Err(usage("--nodes must be at least 3"));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(usage(format!("--eta must lie in (0,1), got {eta}")));
    }
    Ok(build(spec, nodes, eta)?)
}

fn load(args: &ProblemArgs) -> Result<Source> {
    match (&args.problem, &args.mdp) {
        (Some(spec), _) => Ok(Source::Benchmark(benchmark(args, *spec)?)),
        (None, Some(path)) => {
            if !path.is_file() {
                return Err(usage(format!("no such file: {}", path.display())));
            }
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let mdp = Mdp::read_text(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
            Ok(Source::File(mdp))
        }
        (None, None) => Err(usage("one of --problem or --mdp is required")),
    }
}

fn require_benchmark(args: &ProblemArgs) -> Result<BenchmarkProblem<f64>> {
    match args.problem {
        Some(spec) => benchmark(args, spec),
        None => Err(usage("this subcommand needs a builtin --problem")),
    }
}

fn optimum(mdp: &Mdp) -> Result<Values> {
    let zero = Values::constant(mdp.state_count(), 0.0);
    let out = mdp.value_iteration(&zero, REFERENCE_TOL * (1.0 - mdp.gamma()), usize::MAX)?;
    Ok(out.values)
}

fn prepare(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

#[derive(Serialize)]
struct Meta<'a> {
    tool: &'static str,
    version: &'static str,
    library_version: &'static str,
    argv: Vec<String>,
    config: &'a Cli,
}

fn write_meta(out: &Path, cli: &Cli) -> Result<()> {
    let meta = Meta {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        library_version: maxplus_vi::VERSION,
        argv: std::env::args().collect(),
        config: cli,
    };
    write_json(&out.join("meta.json"), &meta)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// One row per state: `state`, grid coordinates when known, then each named column.
fn write_values(path: &Path, grid: Option<&Arc<Grid>>, columns: &[(&str, &Values)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("writing {}", path.display()))?);
    let dims = grid.map_or(0, |g| g.dimension());
    let mut header = vec!["state".to_string()];
    header.extend((1..=dims).map(|d| format!("x{d}")));
    header.extend(columns.iter().map(|c| c.0.to_string()));
    writeln!(w, "{}", header.join(","))?;
    let states = columns.first().map_or(0, |c| c.1.len());
    for s in 0..states {
        let mut row = vec![s.to_string()];
        if let Some(g) = grid {
            row.extend(g.coords::<f64>(s).iter().map(|x| x.to_string()));
        }
        row.extend(columns.iter().map(|c| c.1.as_slice()[s].raw().to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Certificate {
    states: usize,
    gamma: f64,
    tol: f64,
    iterations: usize,
    residual: f64,
    /// `residual / (1 - γ)`, a sup-norm bound on the distance to the optimum.
    bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    analytic_gap_l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    analytic_gap_linf: Option<f64>,
}

fn cmd_solve(args: &SolveArgs) -> Result<()> {
    check_tol(args.tol)?;
    let source = load(&args.problem)?;
    prepare(&args.out)?;
    let mdp = source.mdp();
    let zero = Values::constant(mdp.state_count(), 0.0);
    let run = mdp.value_iteration(&zero, args.tol, args.max_iter)?;
    let gamma = mdp.gamma();
    let bound = run.residual / (1.0 - gamma);
    let mut cert = Certificate {
        states: mdp.state_count(),
        gamma,
        tol: args.tol,
        iterations: run.iterations,
        residual: run.residual,
        bound,
        analytic_gap_l1: None,
        analytic_gap_linf: None,
    };
    println!(
        "converged after {} iterations, residual {:e}; certified gap to the optimum <= {:e} (tol/(1-gamma) = {:e})",
        run.iterations,
        run.residual,
        bound,
        args.tol / (1.0 - gamma)
    );
    match &source {
        Source::Benchmark(p) => {
            let (l1, linf) = error_metrics(&run.values, &p.v_star)?;
            cert.analytic_gap_l1 = Some(l1);
            cert.analytic_gap_linf = Some(linf);
            println!("gap to the analytic values: l1 {l1:e}, linf {linf:e}");
            write_values(&args.out.join("values.csv"), source.grid(), &[("value", &run.values), ("v_star", &p.v_star)])?;
        }
        Source::File(_) => write_values(&args.out.join("values.csv"), source.grid(), &[("value", &run.values)])?,
    }
    write_json(&args.out.join("certificate.json"), &cert)
}

/// `n` cells of consecutive state ids.
fn block_partition(states: usize, n: usize) -> Result<Partition> {
    Ok(Partition::from_assignment((0..states).map(|s| s * n / states).collect())?)
}

/// `per_dim[d]` evenly spaced slopes in `[-lip, lip + λ]` along each dimension.
fn slope_grid(per_dim: &[usize], lip: f64, lambda: f64) -> Vec<Vec<f64>> {
    let (lo, hi) = (-lip, lip + lambda);
    let axis = |m: usize| -> Vec<f64> {
        if m == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
        }
    };
    per_dim.iter().fold(vec![Vec::new()], |acc, &m| {
        acc.iter()
            .flat_map(|prefix| {
                axis(m).into_iter().map(move |x| {
                    let mut p = prefix.clone();
                    p.push(x);
                    p
                })
            })
            .collect()
    })
}

#[derive(Serialize)]
struct ApproxSummary {
    atoms: String,
    size: usize,
    rho: usize,
    gamma_eff: f64,
    iterations: usize,
    residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    err_l1: f64,
    err_linf: f64,
}

fn cmd_approx(args: &ApproxArgs) -> Result<()> {
    check_tol(args.tol)?;
    check_positive("rho", args.rho)?;
    check_positive("n", args.n)?;
    let source = load(&args.problem)?;
    let mdp = source.mdp();
    let states = mdp.state_count();
    if args.n > states {
        return Err(usage(format!("--n {} exceeds the {states} states", args.n)));
    }
    prepare(&args.out)?;
    let reference = optimum(mdp)?;
    let grid = source.grid().cloned();
    let need_grid = || grid.clone().ok_or_else(|| usage(format!("{} atoms need a grid; use --problem", args.atoms)));
    let mut scale = None;
    let w: Dict = match args.atoms {
        Atoms::Constant => match &grid {
            Some(g) => {
                let per_dim = cells_per_dim(args.n, g.dimension());
                if per_dim.iter().zip(g.sizes()).any(|(k, m)| k > m) {
                    return Err(usage(format!("--n {} does not fit the grid", args.n)));
                }
                make_partition_dictionary(&Partition::regular(g, &per_dim)?, Some(g.clone()))?
            }
            None => make_partition_dictionary(&block_partition(states, args.n)?, None)?,
        },
        Atoms::Affine => {
            let g = need_grid()?;
            let c = match args.scale {
                Some(c) => c,
                None => {
                    let lip = lipschitz_estimate(&reference, &g, Metric::L1, 1.0)?;
                    select_affine_scale(&reference, &g, args.n, lip, Norm::L1)?
                }
            };
            scale = Some(c);
            let centers = regular_centers(&g, &cells_per_dim(args.n, g.dimension()))?;
            make_distance_dictionary(&centers, c, &[], Metric::L1, &g)?
        }
        Atoms::Bregman => {
            let g = need_grid()?;
            let lip = lipschitz_estimate(&reference, &g, Metric::LInf, 1.0)?;
            let slopes = slope_grid(&cells_per_dim(args.n, g.dimension()), lip, args.lambda);
            make_bregman_dictionary(&slopes, args.lambda, &g)?
        }
    };
    let forms = match &args.cache_dir {
        Some(dir) => FormsCache::new(dir)?.compile(mdp, &w, &w, args.rho)?,
        None => compile_forms(mdp, &w, &w, args.rho)?,
    };
    let (run, v) = run_reduced_vi(&forms, &w, None, args.tol, args.max_iter)?;
    let (err_l1, err_linf) = error_metrics(&v, &reference)?;
    println!(
        "{} atoms, rho {}: converged after {} iterations; error vs optimum l1 {err_l1:e}, linf {err_linf:e}",
        w.len(),
        args.rho,
        run.iteration
    );
    write_values(&args.out.join("approx.csv"), grid.as_ref(), &[("value", &v), ("reference", &reference)])?;
    write_json(
        &args.out.join("summary.json"),
        &ApproxSummary {
            atoms: args.atoms.to_string(),
            size: w.len(),
            rho: args.rho,
            gamma_eff: forms.gamma_eff,
            iterations: run.iteration,
            residual: run.residual,
            scale,
            err_l1,
            err_linf,
        },
    )
}

#[derive(Serialize)]
struct GreedySummary {
    atoms: String,
    size: usize,
    rho: usize,
    split_dims: Vec<usize>,
    err_l1: Option<f64>,
    err_linf: Option<f64>,
}

fn cmd_greedy(args: &GreedyArgs) -> Result<()> {
    check_tol(args.tol)?;
    check_positive("rho", args.rho)?;
    check_positive("n", args.n)?;
    let problem = require_benchmark(&args.problem)?;
    let grid = problem.grid.clone();
    let start = match args.atoms {
        Atoms::Constant => PursuitStart::single_cell(&grid),
        Atoms::Affine => PursuitStart::zero_atom(grid.state_count(), Some(grid.clone()))?,
        Atoms::Bregman => return Err(usage("greedy supports constant and affine atoms")),
    };
    prepare(&args.out)?;
    let reference = optimum(&problem.mdp)?;
    let compiled = Arc::new(CompiledMdp::new(&problem.mdp, args.rho)?);
    let mut cfg = PursuitConfig::new(args.n, args.norm, args.tol);
    cfg.pool.lookahead = args.lookahead;
    cfg.mm_rounds = args.mm_rounds;
    cfg.reference = Some(reference.clone());
    let out = run_matching_pursuit(compiled, start, &cfg)?;
    let v = current_values(&out.state)?;
    let last = out.trace.last().expect("trace has a starting row");
    if !out.split_dims.is_empty() {
        let dims: Vec<String> = out.split_dims.iter().map(|d| format!("x{}", d + 1)).collect();
        println!("split dimensions: {}", dims.join(" "));
    }
    println!(
        "{} atoms, rho {}: error vs optimum l1 {:e}, linf {:e}",
        last.n,
        args.rho,
        last.err_l1.unwrap_or(f64::NAN),
        last.err_linf.unwrap_or(f64::NAN)
    );
    write_trace_csv(&out.trace, File::create(args.out.join("trace.csv"))?)?;
    write_values(&args.out.join("approx.csv"), Some(&grid), &[("value", &v), ("reference", &reference)])?;
    write_json(
        &args.out.join("summary.json"),
        &GreedySummary {
            atoms: args.atoms.to_string(),
            size: last.n,
            rho: args.rho,
            split_dims: out.split_dims.clone(),
            err_l1: last.err_l1,
            err_linf: last.err_linf,
        },
    )
}

fn cmd_build(args: &BuildArgs) -> Result<()> {
    let problem = require_benchmark(&args.problem)?;
    prepare(&args.out)?;
    let mdp_path = args.out.join("mdp.txt");
    problem
        .mdp
        .write_text(BufWriter::new(File::create(&mdp_path).with_context(|| format!("writing {}", mdp_path.display()))?))?;
    write_values(&args.out.join("vstar.csv"), Some(&problem.grid), &[("v_star", &problem.v_star)])?;
    println!(
        "{}: {} states, {} edges, gamma {:.6}, horizon {:.1}",
        problem.spec,
        problem.mdp.state_count(),
        problem.mdp.edge_count(),
        problem.gamma(),
        problem.horizon()
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    check_tol(args.tol)?;
    if args.rho.is_empty() || args.n.is_empty() {
        return Err(usage("--rho and --n need at least one value"));
    }
    if args.rho.contains(&0) || args.n.contains(&0) {
        return Err(usage("--rho and --n values must be positive"));
    }
    let problem = require_benchmark(&args.problem)?;
    prepare(&args.out)?;
    let reference = optimum(&problem.mdp)?;
    let mut cfg = SweepConfig::standard(args.rho.clone(), args.n.clone());
    if !args.methods.is_empty() {
        cfg.methods = args.methods.clone();
    }
    cfg.norm = args.norm;
    cfg.tol = args.tol;
    cfg.affine_scale = args.scale;
    cfg.timings = !args.no_timings;
    let rows = run_sweep(&problem, &reference, &cfg)?;
    write_sweep_csv(&rows, File::create(args.out.join("sweep.csv"))?)?;
    println!("{} cells written to {}", rows.len(), args.out.join("sweep.csv").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        check_positive("threads", threads)?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    let out = match &cli.command {
        Command::Solve(a) => {
            cmd_solve(a)?;
            &a.out
        }
        Command::Approx(a) => {
            cmd_approx(a)?;
            &a.out
        }
        Command::Greedy(a) => {
            cmd_greedy(a)?;
            &a.out
        }
        Command::Benchmark(BenchmarkCommand::Build(a)) => {
            cmd_build(a)?;
            &a.out
        }
        Command::Sweep(a) => {
            cmd_sweep(a)?;
            &a.out
        }
    };
    write_meta(out, cli)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
