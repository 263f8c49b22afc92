mod config;

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use sparsefac::diagnostics::{
    cross_correlation_estimate, diagonal_concentration, entry_growth_profile, LayerProfile, Pairing,
};
use sparsefac::equiv::{match_chain, reconstruction_error, MatchResult};
use sparsefac::genmodel::{forward_product, gen_factor_chain, ModelParams};
use sparsefac::gram::rounded_gram;
use sparsefac::io::{load_dense, load_sparse, save_dense, save_sparse, FormatError, DENSE_MAGIC, SPARSE_MAGIC};
use sparsefac::peeling::{factorize_chain, ChainError, LayerStatus, DEFAULT_KAPPA_MAX};
use sparsefac::recovery::RecoveryConfig;
use sparsefac::reversal::{
    estimate_gamma, reverse_iterate, ReversalError, DEFAULT_POWER_ITERS, DEFAULT_TOL,
};
use sparsefac::rng::{mix64, AUX_LAYER_BASE};
use sparsefac::{DenseMatrix, SparseIntMatrix};

/// Substream of the per-trial chain seeds used by `bench`.
const BENCH_STREAM: u64 = AUX_LAYER_BASE + 16;

#[derive(Parser)]
#[command(name = "sparsefac", version, about = "Factorize random sparse deep linear chains")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads, 0 for one per core. Defaults to $THREADS, else 0.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat key=value file of flag values; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Record wall-clock times in reports (zero otherwise, so reruns are byte-identical).
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded chain: X1.smf .. Xs.smf, Y.dmf and manifest.json.
    Generate(GenerateArgs),
    /// Recover the factors of Y.dmf: Xhat1.smf .. and report.json.
    Factorize(FactorizeArgs),
    /// Generate, factorize and verify over a parameter grid; writes a CSV.
    Bench(BenchArgs),
    /// Recover z from y = (X / sqrt(d)) z by iterative correction.
    Reverse(ReverseArgs),
    /// Concentration diagnostics: growth profile CSV and report.json.
    Diag(DiagArgs),
    /// Match recovered factors against the truth up to permutation and sign.
    Verify(VerifyArgs),
    /// Dump the rounded Gram graph of Y as SMF1 with a JSON sidecar.
    Gram(GramArgs),
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    /// Matrix order.
    #[arg(long)]
    n: usize,
    /// Spikes per column.
    #[arg(long)]
    d: usize,
    /// Chain depth.
    #[arg(long)]
    s: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone, Copy)]
struct SolverArgs {
    /// Adjacency fraction for the drop pass of candidate pruning.
    #[arg(long, default_value_t = RecoveryConfig::DEFAULT_TAU)]
    tau: f64,
    /// Signed-agreement fraction for the add pass of candidate pruning.
    #[arg(long, default_value_t = RecoveryConfig::DEFAULT_TAU_ADD)]
    tau_add: f64,
    /// Layers whose condition estimate exceeds this are flagged ill_conditioned.
    #[arg(long, default_value_t = DEFAULT_KAPPA_MAX)]
    kappa_max: f64,
}

impl SolverArgs {
    fn recovery(&self, d: usize) -> RecoveryConfig {
        RecoveryConfig { tau: self.tau, tau_add: self.tau_add, ..RecoveryConfig::new(d) }
    }
}

#[derive(Args, Serialize)]
struct FactorizeArgs {
    /// Observed product (DMF1).
    #[arg(long)]
    y: PathBuf,
    /// Matrix order; defaults to the order of Y.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    s: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    /// Comma-separated matrix orders.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// Comma-separated sparsities.
    #[arg(long, value_delimiter = ',', required = true)]
    d: Vec<usize>,
    /// Comma-separated depths.
    #[arg(long, value_delimiter = ',', required = true)]
    s: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; the resolved config goes to the same path with a .json extension.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Serialize)]
struct ReverseArgs {
    /// Layer factor (SMF1).
    #[arg(long)]
    x: PathBuf,
    /// Layer output (DMF1, one column).
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    d: usize,
    /// Output directory for z_hat.csv, history.csv and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Step size; estimated by power iteration when omitted.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_POWER_ITERS)]
    power_iters: usize,
    /// Correction budget; defaults to 100 n.
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args, Serialize)]
struct DiagArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    /// Number of layers to propagate through.
    #[arg(long)]
    s: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plotting constant of the growth scale.
    #[arg(long, default_value_t = 2.0)]
    c: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    /// Directory holding Xhat1.smf, Xhat2.smf, ...
    #[arg(long)]
    recovered: PathBuf,
    /// Directory holding X1.smf, X2.smf, ...
    #[arg(long)]
    truth: PathBuf,
    /// Product to report the reconstruction error against (needs --d).
    #[arg(long, requires = "d")]
    y: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GramArgs {
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    d: usize,
    /// SMF1 output; the sidecar goes to the same path with a .json extension.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Algorithm(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Algorithm(_) => 3,
            Failure::Io(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Algorithm(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_failure(path: &Path, e: FormatError) -> Failure {
    match e {
        FormatError::Io(e) if e.kind() == io::ErrorKind::NotFound => {
            Failure::Usage(format!("{}: no such file", path.display()))
        }
        e => Failure::Io(format!("{}: {e}", path.display())),
    }
}

fn read_sparse_file(path: &Path) -> Result<SparseIntMatrix, Failure> {
    load_sparse(path).map_err(|e| load_failure(path, e))
}

fn read_dense_file(path: &Path) -> Result<DenseMatrix, Failure> {
    load_dense(path).map_err(|e| load_failure(path, e))
}

fn write_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| write_failure(path, e))
}

fn write_sparse_file(m: &SparseIntMatrix, path: &Path) -> Outcome {
    save_sparse(m, path).map_err(|e| write_failure(path, e))
}

fn write_json(value: &Value, path: &Path) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| write_failure(path, e))
}

fn write_lines(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Outcome {
    let file = fs::File::create(path).map_err(|e| write_failure(path, e))?;
    let mut w = BufWriter::new(file);
    let result = (|| {
        writeln!(w, "{header}")?;
        for row in rows {
            writeln!(w, "{row}")?;
        }
        w.flush()
    })();
    result.map_err(|e| write_failure(path, e))
}

/// Resolved config of a run, echoed into its reports. The thread count is
/// left out: it never changes results.
fn echo(command: &str, timing: bool, args: &impl Serialize) -> Value {
    json!({ "command": command, "timing": timing, "args": args })
}

fn params(n: usize, d: usize, s: usize, seed: u64) -> Result<ModelParams, Failure> {
    ModelParams::new(n, d, s, seed).map_err(|e| Failure::Usage(e.to_string()))
}

fn cmd_generate(a: &GenerateArgs, timing: bool) -> Outcome {
    let p = params(a.n, a.d, a.s, a.seed)?;
    if p.precision_warning() {
        eprintln!("warning: depth {} at n = {} may accumulate rounding error above 1e-9", a.s, a.n);
    }
    create_dir(&a.out)?;
    let chain = gen_factor_chain(&p);
    let y = forward_product(&chain, a.d).expect("generated chain is square");
    let mut files = Vec::new();
    for (i, x) in chain.iter().enumerate() {
        let name = format!("X{}.smf", i + 1);
        write_sparse_file(x, &a.out.join(&name))?;
        files.push(name);
    }
    let y_path = a.out.join("Y.dmf");
    save_dense(&y, &y_path).map_err(|e| write_failure(&y_path, e))?;
    files.push("Y.dmf".into());
    let manifest = json!({
        "n": a.n,
        "d": a.d,
        "s": a.s,
        "seed": a.seed,
        "format_versions": { "sparse": SPARSE_MAGIC, "dense": DENSE_MAGIC },
        "files": files,
        "precision_warning": p.precision_warning(),
        "config": echo("generate", timing, a),
    });
    write_json(&manifest, &a.out.join("manifest.json"))
}

fn chain_failure(e: ChainError) -> Failure {
    Failure::Usage(e.to_string())
}

fn cmd_factorize(a: &FactorizeArgs, timing: bool) -> Outcome {
    let y = read_dense_file(&a.y)?;
    let n = a.n.unwrap_or(y.rows());
    let cfg = a.solver.recovery(a.d);
    let (factors, mut report) =
        factorize_chain(&y, n, a.d, a.s, &cfg, a.solver.kappa_max).map_err(chain_failure)?;
    if !timing {
        report.clear_timings();
    }
    create_dir(&a.out)?;
    for (i, x) in factors.iter().enumerate() {
        write_sparse_file(x, &a.out.join(format!("Xhat{}.smf", i + 1)))?;
    }
    let mut doc = serde_json::to_value(&report).expect("report serializes");
    doc["config"] = echo("factorize", timing, a);
    write_json(&doc, &a.out.join("report.json"))?;
    if report.all_ok() && factors.len() == a.s {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .layers
            .iter()
            .filter(|l| l.status != LayerStatus::Ok)
            .map(|l| format!("layer {}: {}", l.index, l.status.as_str()))
            .collect();
        Err(Failure::Algorithm(failed.join("; ")))
    }
}

const BENCH_HEADER: &str = "n,d,s,trial,margin,candidates,status,matched,recon_error,ms";

fn bench_cell(n: usize, d: usize, s: usize, trial: usize, a: &BenchArgs, timing: bool) -> String {
    let start = Instant::now();
    let p = ModelParams { n, d, s, master_seed: mix64(a.seed, BENCH_STREAM, trial as u64) };
    let truth = gen_factor_chain(&p);
    let y = forward_product(&truth, d).expect("generated chain is square");
    let row = match factorize_chain(&y, n, d, s, &a.solver.recovery(d), a.solver.kappa_max) {
        Ok((factors, report)) => {
            let matched = factors.len() == s
                && match_chain(&factors, &truth).is_ok_and(|m| m.iter().all(|r| r.matched));
            let first = &report.layers[0];
            let recon = report.reconstruction_error.map(|e| format!("{e:.6e}")).unwrap_or_default();
            format!(
                "{n},{d},{s},{trial},{:.6},{},{},{matched},{recon}",
                first.margin,
                first.candidates,
                report.worst_status().as_str()
            )
        }
        Err(e) => format!("{n},{d},{s},{trial},,0,error: {},false,", e.to_string().replace(',', ";")),
    };
    let ms = if timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    format!("{row},{ms:.3}")
}

fn cmd_bench(a: &BenchArgs, timing: bool) -> Outcome {
    let mut cells = Vec::new();
    for &n in &a.n {
        for &d in &a.d {
            for &s in &a.s {
                params(n, d, s, 0)?;
                a.solver.recovery(d).validate().map_err(|e| Failure::Usage(e.to_string()))?;
                cells.extend((0..a.trials).map(|t| (n, d, s, t)));
            }
        }
    }
    let rows: Vec<String> = cells.par_iter().map(|&(n, d, s, t)| bench_cell(n, d, s, t, a, timing)).collect();
    let mut summary = std::collections::BTreeMap::<String, usize>::new();
    for row in &rows {
        *summary.entry(row.split(',').nth(6).unwrap_or("").to_string()).or_default() += 1;
    }
    write_lines(&a.out, BENCH_HEADER, rows)?;
    let doc = json!({ "rows": cells.len(), "statuses": summary, "config": echo("bench", timing, a) });
    write_json(&doc, &a.out.with_extension("json"))
}

fn cmd_reverse(a: &ReverseArgs, timing: bool) -> Outcome {
    let x = read_sparse_file(&a.x)?;
    let y = read_dense_file(&a.y)?;
    if y.cols() != 1 {
        return Err(Failure::Usage(format!("{}: expected one column, found {}", a.y.display(), y.cols())));
    }
    if !x.is_square() || x.rows() != y.rows() {
        return Err(Failure::Usage(format!(
            "factor is {}x{}, y has {} rows",
            x.rows(),
            x.cols(),
            y.rows()
        )));
    }
    let start = Instant::now();
    let gamma = match a.gamma {
        Some(g) => g,
        None => estimate_gamma(&x, a.d, a.power_iters).map_err(|e| match e {
            ReversalError::TooFewPowerIters(_) => Failure::Usage(e.to_string()),
            e => Failure::Algorithm(e.to_string()),
        })?,
    };
    let max_iters = a.max_iters.unwrap_or(100 * x.rows());
    let (result, converged) = match reverse_iterate(&x, a.d, y.as_slice(), gamma, max_iters, a.tol) {
        Ok(r) => (r, true),
        Err(ReversalError::NotConverged(r)) => (*r, false),
        Err(e @ ReversalError::InvalidStep(_)) => return Err(Failure::Usage(e.to_string())),
        Err(e) => return Err(Failure::Algorithm(e.to_string())),
    };
    let elapsed = if timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    create_dir(&a.out)?;
    write_lines(
        &a.out.join("z_hat.csv"),
        "index,value",
        result.z_hat.iter().enumerate().map(|(i, v)| format!("{i},{v:.17e}")),
    )?;
    write_lines(
        &a.out.join("history.csv"),
        "iteration,residual",
        result.residual_history.iter().enumerate().map(|(i, v)| format!("{i},{v:.17e}")),
    )?;
    let doc = json!({
        "gamma": gamma,
        "iterations": result.iterations,
        "converged": converged,
        "final_residual": result.final_residual(),
        "elapsed_ms": elapsed,
        "config": echo("reverse", timing, a),
    });
    write_json(&doc, &a.out.join("report.json"))?;
    if converged {
        Ok(())
    } else {
        Err(Failure::Algorithm(format!(
            "no convergence in {max_iters} iterations, residual {:.3e}",
            result.final_residual()
        )))
    }
}

fn cmd_diag(a: &DiagArgs, timing: bool) -> Outcome {
    let p = params(a.n, a.d, a.s, a.seed)?;
    if a.trials < 2 {
        return Err(Failure::Usage("diag needs at least 2 trials".into()));
    }
    let start = Instant::now();
    let profile = entry_growth_profile(&p, a.trials, a.c);
    let diagonal = diagonal_concentration(&p, a.trials);
    let disjoint = cross_correlation_estimate(&p, a.trials, Pairing::Disjoint);
    let one_layer = cross_correlation_estimate(&ModelParams { s: 1, ..p }, a.trials, Pairing::Disjoint);
    let elapsed = if timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
    create_dir(&a.out)?;
    write_lines(&a.out.join("profile.csv"), LayerProfile::CSV_HEADER, profile.layers.iter().map(|l| l.csv_row()))?;
    let doc = json!({
        "scale": profile.scale,
        "layers": profile.layers,
        "diagonal": diagonal,
        "cross_disjoint": disjoint,
        "cross_disjoint_one_layer": one_layer,
        "elapsed_ms": elapsed,
        "config": echo("diag", timing, a),
    });
    write_json(&doc, &a.out.join("report.json"))
}

/// Reads `{prefix}1.smf`, `{prefix}2.smf`, ... until the first gap.
fn read_numbered(dir: &Path, prefix: &str) -> Result<Vec<SparseIntMatrix>, Failure> {
    let mut out = Vec::new();
    loop {
        let path = dir.join(format!("{prefix}{}.smf", out.len() + 1));
        if !path.exists() {
            return Ok(out);
        }
        out.push(read_sparse_file(&path)?);
    }
}

fn cmd_verify(a: &VerifyArgs, timing: bool) -> Outcome {
    if !a.recovered.is_dir() || !a.truth.is_dir() {
        return Err(Failure::Usage("--recovered and --truth must be directories".into()));
    }
    let recovered = read_numbered(&a.recovered, "Xhat")?;
    let truth = read_numbered(&a.truth, "X")?;
    if truth.is_empty() {
        return Err(Failure::Usage(format!("no X1.smf in {}", a.truth.display())));
    }
    let common = recovered.len().min(truth.len());
    let mut layers =
        match_chain(&recovered[..common], &truth[..common]).map_err(|e| Failure::Usage(e.to_string()))?;
    for x in &truth[common..] {
        let cols = x.cols();
        layers.push(MatchResult {
            matched: false,
            mismatched: cols,
            permutation: vec![None; cols],
            flips: vec![0; cols],
            duplicates: false,
        });
    }
    let matched = recovered.len() == truth.len() && layers.iter().all(|m| m.matched);
    let recon = match (&a.y, a.d) {
        (Some(path), Some(d)) if recovered.len() == truth.len() => {
            let y = read_dense_file(path)?;
            Some(reconstruction_error(&recovered, &y, d).map_err(|e| Failure::Usage(e.to_string()))?)
        }
        _ => None,
    };
    let doc = json!({
        "matched": matched,
        "recovered_layers": recovered.len(),
        "layers": layers,
        "reconstruction_error": recon,
        "config": echo("verify", timing, a),
    });
    match &a.out {
        Some(path) => write_json(&doc, path)?,
        None => println!("{}", serde_json::to_string_pretty(&doc).expect("JSON values serialize")),
    }
    if matched {
        Ok(())
    } else {
        Err(Failure::Algorithm("recovered factors do not match the truth".into()))
    }
}

fn cmd_gram(a: &GramArgs, timing: bool) -> Outcome {
    let y = read_dense_file(&a.y)?;
    if a.d == 0 {
        return Err(Failure::Usage("d must be at least 1".into()));
    }
    let g = rounded_gram(&y, a.d).map_err(|e| Failure::Usage(e.to_string()))?;
    let file = fs::File::create(&a.out).map_err(|e| write_failure(&a.out, e))?;
    g.write_smf(BufWriter::new(file)).map_err(|e| write_failure(&a.out, e))?;
    let mut doc = serde_json::to_value(g.sidecar()).expect("sidecar serializes");
    doc["edges"] = json!(g.edge_count());
    doc["config"] = echo("gram", timing, a);
    write_json(&doc, &a.out.with_extension("json"))
}

fn resolve_threads(flag: Option<usize>) -> Result<usize, Failure> {
    if let Some(t) = flag {
        return Ok(t);
    }
    match std::env::var("THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Usage(format!("THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: &Cli) -> Outcome {
    let threads = resolve_threads(cli.threads)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let t = cli.timing;
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, t),
        Command::Factorize(a) => cmd_factorize(a, t),
        Command::Bench(a) => cmd_bench(a, t),
        Command::Reverse(a) => cmd_reverse(a, t),
        Command::Diag(a) => cmd_diag(a, t),
        Command::Verify(a) => cmd_verify(a, t),
        Command::Gram(a) => cmd_gram(a, t),
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
