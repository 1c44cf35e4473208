use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use toponas_core::bench::{relative_gaps, run_bench, write_bench_csv, BenchConfig};
use toponas_core::cost::{normalized_cost, write_csv, CostRow, ModuleCount, NASBENCH201_REPORTED};
use toponas_core::data::{load_dataset, DatasetSpec};
use toponas_core::graph::dot::{emit_cell_dot, emit_dot};
use toponas_core::graph::{SpaceSpec, Supernet};
use toponas_core::reparam::KernelNorm;
use toponas_core::search::{run_search, AlphaInit, Curves, NoPenalty, SearchResult, Simplification, TrainConfig};
use toponas_core::simplify::{simplify_recursive, RewriteLog};
use toponas_core::tensor::DType;
use toponas_core::verify::{run_suite, Suite, SuiteReport};

const RECORD_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "toponas", version, about = "Supernet simplification and differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite one edge of a space and report module counts.
    Simplify(SimplifyArgs),
    /// Run the bi-level search and write a result record per seed.
    Search(SearchArgs),
    /// Run self-checking suites.
    Verify(VerifyArgs),
    /// Search cost against candidate count.
    Bench(BenchArgs),
    /// Normalized cost of (memory, time) pairs.
    Cost(CostArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimplifyFlag {
    None,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormFlag {
    Off,
    On,
    PerChannel,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionFlag {
    F32,
    F64,
}

impl From<PrecisionFlag> for DType {
    fn from(p: PrecisionFlag) -> DType {
        match p {
            PrecisionFlag::F32 => DType::F32,
            PrecisionFlag::F64 => DType::F64,
        }
    }
}

#[derive(Args)]
struct SimplifyArgs {
    /// Built-in space name or path to a space file.
    #[arg(long, default_value = "darts_cifar")]
    space: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, default_value = "nasbench201")]
    space: String,
    /// `synthetic:key=value,...` or `cifar10:path=...`.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "full")]
    simplify: SimplifyFlag,
    #[arg(long, value_enum, default_value = "off")]
    kernel_norm: NormFlag,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionFlag,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Freeze α one-hot on this candidate index.
    #[arg(long)]
    freeze_one_hot: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// counts, equivalence, degeneracy, gradcheck or all.
    #[arg(default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Candidate counts, e.g. `4,6,8` or `4..16` (even steps of --step).
    #[arg(long, default_value = "4,6,8,10,12,14,16")]
    sizes: String,
    #[arg(long, default_value_t = 2)]
    step: usize,
    /// Search epochs the one-epoch time is extrapolated to.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionFlag,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// CSV with columns method,memory,time; defaults to the published
    /// NAS-Bench-201 table.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status: 1 for failed checks and aborted runs, 2 for bad input.
enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let config = e
            .downcast_ref::<toponas_core::Error>()
            .is_some_and(toponas_core::Error::is_config);
        if config {
            Failure::Config(e)
        } else {
            Failure::Run(e)
        }
    }
}

impl From<toponas_core::Error> for Failure {
    fn from(e: toponas_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(anyhow::anyhow!(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Simplify(a) => cmd_simplify(a),
        Command::Search(a) => cmd_search(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Cost(a) => cmd_cost(a),
    });
    match result {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("TOPONAS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("TOPONAS_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Run(e.into()))
}

fn out_dir(out: &Option<PathBuf>) -> Result<Option<&Path>, Failure> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(out.as_deref())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

fn count_row(stage: &str, c: &ModuleCount) -> String {
    format!("{stage:<10} {:>5} {:>9} {:>6}", c.conv, c.non_conv, c.total)
}

fn cmd_simplify(a: SimplifyArgs) -> Result<ExitCode, Failure> {
    let spec = SpaceSpec::load(&a.space)?;
    let dir = out_dir(&a.out)?;
    let net = Supernet::build(&spec, a.seed, DType::F32)?;
    let graph = &net.cells[0].edges[0].graph;
    let (simplified, log) = simplify_recursive(graph);
    println!("{:<10} {:>5} {:>9} {:>6}", "stage", "conv", "non_conv", "total");
    println!("{}", count_row("initial", &log.initial));
    for e in &log.entries {
        println!("{}", count_row(&e.pass, &e.after));
    }
    if let Some(dir) = dir {
        write_json(&dir.join("rewrite_log.json"), &log)?;
        let mut table = String::from("stage,conv,non_conv,total\n");
        table += &format!("initial,{},{},{}\n", log.initial.conv, log.initial.non_conv, log.initial.total);
        for e in &log.entries {
            table += &format!("{},{},{},{}\n", e.pass, e.after.conv, e.after.non_conv, e.after.total);
        }
        fs::write(dir.join("counts.csv"), table).context("writing counts.csv")?;
        fs::write(dir.join("edge_before.dot"), emit_dot(graph, &format!("{} edge", spec.name))).context("writing DOT")?;
        fs::write(dir.join("edge_after.dot"), emit_dot(&simplified, &format!("{} edge simplified", spec.name)))
            .context("writing DOT")?;
        fs::write(dir.join("cell.dot"), emit_cell_dot(&spec)).context("writing DOT")?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Everything a search run produced, plus what is needed to rerun it.
#[derive(Serialize, Deserialize)]
struct ResultRecord {
    version: u32,
    space: String,
    dataset: String,
    seed: u64,
    config: TrainConfig,
    config_hash: String,
    started_at: String,
    finished_at: String,
    genotype: String,
    betas: Vec<Vec<Vec<f64>>>,
    alpha_trajectory: Vec<Vec<Vec<Vec<f64>>>>,
    curves: Curves,
    step_losses: Vec<f64>,
    module_count: ModuleCount,
    memory_bytes_peak: u64,
    wall_time_s: f64,
    rewrite_logs: Vec<RewriteLog>,
    aborted: Option<toponas_core::search::AbortRecord>,
}

fn cmd_search(a: SearchArgs) -> Result<ExitCode, Failure> {
    let mut spec = SpaceSpec::load(&a.space)?;
    let data_spec = DatasetSpec::parse(&a.dataset)?;
    let mut base = TrainConfig::for_space(&spec.name);
    base.epochs = a.epochs;
    base.precision = a.precision.into();
    base.simplification = match a.simplify {
        SimplifyFlag::None => Simplification::None,
        SimplifyFlag::Full => Simplification::Full,
    };
    base.kernel_norm = match a.kernel_norm {
        NormFlag::Off => KernelNorm::Off,
        NormFlag::On => KernelNorm::Whole,
        NormFlag::PerChannel => KernelNorm::PerOutputChannel,
    };
    if let Some(b) = a.batch_size {
        base.batch_size = b;
    }
    if let Some(k) = a.freeze_one_hot {
        if k >= spec.candidates.len() {
            return Err(config_err(format!(
                "--freeze-one-hot {k} is out of range for {} candidates",
                spec.candidates.len()
            )));
        }
        base.alpha_init = AlphaInit::OneHot(k);
        base.freeze_alpha = true;
    }
    base.validate()?;
    let seeds = if a.seeds.is_empty() { vec![a.seed] } else { a.seeds.clone() };
    let dir = out_dir(&a.out)?;
    let splits = load_dataset(&data_spec)?;
    spec.classes = splits.train.classes;

    let mut runs: Vec<(u64, SearchResult)> = Vec::with_capacity(seeds.len());
    let mut any_aborted = false;
    for &seed in &seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let started_at = now();
        let r = run_search(&spec, &splits.train, &splits.val, &cfg, &NoPenalty)?;
        let finished_at = now();
        match &r.aborted {
            Some(ab) => {
                any_aborted = true;
                eprintln!("seed {seed}: aborted at epoch {} step {}: {}", ab.epoch, ab.step, ab.message);
            }
            None => println!(
                "seed {seed}: {}  train loss {:.4}  val acc {:.3}",
                r.genotype,
                r.curves.train_loss.last().copied().unwrap_or(f64::NAN),
                r.curves.val_acc.last().copied().unwrap_or(f64::NAN)
            ),
        }
        if let Some(dir) = dir {
            let record = ResultRecord {
                version: RECORD_VERSION,
                space: spec.name.clone(),
                dataset: a.dataset.clone(),
                seed,
                config_hash: cfg.hash(),
                config: cfg,
                started_at,
                finished_at,
                genotype: r.genotype.clone(),
                betas: r.betas.clone(),
                alpha_trajectory: r.alpha_trajectory.clone(),
                curves: r.curves.clone(),
                step_losses: r.step_losses.clone(),
                module_count: r.module_count,
                memory_bytes_peak: r.run_cost.memory_bytes_peak,
                wall_time_s: r.run_cost.wall_time_s,
                rewrite_logs: r.rewrite_logs.clone(),
                aborted: r.aborted.clone(),
            };
            write_json(&dir.join(format!("result_seed{seed}.json")), &record)?;
            fs::write(dir.join(format!("genotype_seed{seed}.txt")), format!("{}\n", r.genotype))
                .context("writing genotype")?;
        }
        runs.push((seed, r));
    }
    if runs.len() > 1 {
        for (label, pick) in [
            ("final val acc", (|c: &Curves| c.val_acc.last().copied()) as fn(&Curves) -> Option<f64>),
            ("final val loss", |c: &Curves| c.val_loss.last().copied()),
        ] {
            let xs: Vec<f64> = runs.iter().filter(|(_, r)| r.aborted.is_none()).filter_map(|(_, r)| pick(&r.curves)).collect();
            if let Some((mean, std)) = mean_std(&xs) {
                println!("{label}: {mean:.4} ± {std:.4} over {} seeds", xs.len());
            }
        }
    }
    if let Some(dir) = dir {
        let finished: Vec<&(u64, SearchResult)> =
            runs.iter().filter(|(_, r)| r.aborted.is_none() && r.run_cost.wall_time_s > 0.0).collect();
        if !finished.is_empty() {
            let pairs: Vec<(f64, f64)> = finished
                .iter()
                .map(|(_, r)| (r.run_cost.memory_bytes_peak as f64, r.run_cost.wall_time_s))
                .collect();
            let rows: Vec<CostRow> = finished
                .iter()
                .zip(normalized_cost(&pairs)?)
                .map(|((seed, r), c)| CostRow {
                    method: format!("seed{seed}"),
                    space: spec.name.clone(),
                    conv: r.module_count.conv,
                    non_conv: r.module_count.non_conv,
                    total: r.module_count.total,
                    memory_bytes: r.run_cost.memory_bytes_peak,
                    wall_s: r.run_cost.wall_time_s,
                    c,
                })
                .collect();
            let f = fs::File::create(dir.join("search_cost.csv")).context("writing search_cost.csv")?;
            write_csv(&rows, f)?;
        }
    }
    Ok(if any_aborted { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((mean, var.sqrt()))
}

fn print_report(r: &SuiteReport) {
    println!("[{}] {} ({:.2}s)", if r.passed { "PASS" } else { "FAIL" }, r.suite, r.elapsed_s);
    for c in &r.checks {
        let status = match (c.passed, c.bound) {
            (_, toponas_core::verify::Bound::Info) => "info",
            (true, _) => "ok",
            (false, _) => "FAIL",
        };
        let rel = match c.bound {
            toponas_core::verify::Bound::AtMost => format!("<= {:.1e}", c.threshold),
            toponas_core::verify::Bound::AtLeast => format!(">= {:.1e}", c.threshold),
            toponas_core::verify::Bound::Info => String::new(),
        };
        println!("  {status:<4} {:<48} {:>11.3e} {rel}", c.name, c.value);
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode, Failure> {
    let suites: Vec<Suite> = if a.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![a.suite.parse::<Suite>()?]
    };
    let dir = out_dir(&a.out)?;
    let mut reports = Vec::with_capacity(suites.len());
    for s in suites {
        let r = run_suite(s, a.seed)?;
        print_report(&r);
        reports.push(r);
    }
    if let Some(dir) = dir {
        write_json(&dir.join("verify.json"), &reports)?;
    }
    Ok(if reports.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn parse_sizes(text: &str, step: usize) -> Result<Vec<usize>, Failure> {
    let bad = || config_err(format!("--sizes `{text}` is not a list like `4,6,8` or a range like `4..16`"));
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if step == 0 || lo > hi {
            return Err(bad());
        }
        let mut v: Vec<usize> = (lo..=hi).step_by(step).collect();
        if v.last() != Some(&hi) {
            v.push(hi);
        }
        return Ok(v);
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode, Failure> {
    let mut cfg = BenchConfig {
        sizes: parse_sizes(&a.sizes, a.step)?,
        search_epochs: a.epochs,
        seed: a.seed,
        precision: a.precision.into(),
        ..BenchConfig::default()
    };
    if let Some(c) = a.channels {
        cfg.channels = c;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    let dir = out_dir(&a.out)?;
    let rows = run_bench(&cfg)?;
    println!(
        "{:>5} {:<10} {:>5} {:>6} {:>12} {:>10} {:>12} {:>6}",
        "cands", "method", "conv", "total", "memory_B", "epoch_s", "extrap_s", "C"
    );
    for r in &rows {
        println!(
            "{:>5} {:<10} {:>5} {:>6} {:>12} {:>10.4} {:>12.2} {:>6.3}",
            r.candidates, r.method, r.conv, r.total, r.memory_bytes, r.epoch_wall_s, r.extrapolated_s, r.c
        );
    }
    for (n, m, t) in relative_gaps(&rows) {
        println!("{n:>5} saving: memory {:>6.1}%  time {:>6.1}%", 100.0 * m, 100.0 * t);
    }
    if let Some(dir) = dir {
        let f = fs::File::create(dir.join("bench.csv")).context("writing bench.csv")?;
        write_bench_csv(&rows, f)?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
struct CostInput {
    method: String,
    memory: f64,
    time: f64,
}

fn cmd_cost(a: CostArgs) -> Result<ExitCode, Failure> {
    let (methods, pairs, reported): (Vec<String>, Vec<(f64, f64)>, Vec<Option<f64>>) = match &a.input {
        Some(path) => {
            let mut rd = csv::Reader::from_path(path)
                .map_err(|e| config_err(format!("reading {}: {e}", path.display())))?;
            let mut methods = Vec::new();
            let mut pairs = Vec::new();
            for rec in rd.deserialize::<CostInput>() {
                let r = rec.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                methods.push(r.method);
                pairs.push((r.memory, r.time));
            }
            if methods.is_empty() {
                bail_config("cost input has no rows")?;
            }
            let n = methods.len();
            (methods, pairs, vec![None; n])
        }
        None => (
            NASBENCH201_REPORTED.iter().map(|r| r.method.to_string()).collect(),
            NASBENCH201_REPORTED.iter().map(|r| (r.memory_mb, r.time_s)).collect(),
            NASBENCH201_REPORTED.iter().map(|r| Some(r.c)).collect(),
        ),
    };
    let cs = normalized_cost(&pairs)?;
    println!("{:<24} {:>10} {:>10} {:>6} {:>9}", "method", "memory", "time", "C", "reported");
    for ((m, (mem, t)), (c, rep)) in methods.iter().zip(&pairs).zip(cs.iter().zip(&reported)) {
        let rep = rep.map_or(String::from("-"), |r| format!("{r:.2}"));
        println!("{m:<24} {mem:>10} {t:>10} {c:>6.2} {rep:>9}");
    }
    if let Some(dir) = out_dir(&a.out)? {
        let mut w = csv::Writer::from_path(dir.join("cost.csv")).map_err(anyhow::Error::from)?;
        w.write_record(["method", "memory", "time", "C"]).map_err(anyhow::Error::from)?;
        for ((m, (mem, t)), c) in methods.iter().zip(&pairs).zip(&cs) {
            w.write_record([m.clone(), mem.to_string(), t.to_string(), format!("{c:.6}")])
                .map_err(anyhow::Error::from)?;
        }
        w.flush().context("writing cost.csv")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn bail_config(msg: &str) -> Result<(), Failure> {
    Err(Failure::Config(anyhow::Error::msg(msg.to_string())))
}
