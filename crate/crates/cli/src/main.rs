//! `mwlab` command line.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mwlab::bench::{
    certify_families, default_suite, run_commutator_endpoint, run_constants_audit, run_czo_endpoint,
    run_maximal_endpoint, write_audits_csv, write_rows_csv, ExperimentConfig, ExperimentReport, SymbolSpec,
};
use mwlab::mesh::{Cube, Field};
use mwlab::orlicz::{luxemburg_values, YoungFunction};
use mwlab::Error;

mod selftest;

#[derive(Parser)]
#[command(name = "mwlab", version, about = "Matrix-weighted weak-type endpoint experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (a JSON object or array); the built-in suite when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Seed for random generators whose config gives none.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Record wall-clock runtimes (output is then no longer byte-reproducible).
    #[arg(long, global = true)]
    timings: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// A₁, reducing and A∞ constants with their cross-inequality margins.
    Constants,
    /// Sparse family certificates on every shifted grid.
    Sparse,
    /// Weak-type endpoint of the matrix maximal function.
    Weaktype,
    /// Weak-type endpoint of the weighted Hilbert transform (d = 1).
    Czo,
    /// Commutator endpoint (d = 1).
    Commutator,
    /// Luxemburg norms of |f| and of b − b_Q on coarse cubes.
    Orlicz,
    /// Quick built-in checks.
    Selftest,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

enum Failure {
    Config(String),
    Violation(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Violation(list)) => {
            for v in &list {
                eprintln!("violation: {v}");
            }
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    if cli.command == Command::Selftest {
        let mut out = output(cli)?;
        let failed = selftest::run(&mut out)?;
        out.flush()?;
        return if failed.is_empty() { Ok(()) } else { Err(Failure::Violation(failed)) };
    }
    let configs = load_configs(cli)?;
    let mut out = output(cli)?;
    let violations = match cli.command {
        Command::Constants => constants(&configs, cli.format, &mut out)?,
        Command::Sparse => sparse(&configs, cli.format, &mut out)?,
        Command::Weaktype => endpoint(&configs, run_maximal_endpoint, cli.format, &mut out)?,
        Command::Czo => endpoint(&configs, run_czo_endpoint, cli.format, &mut out)?,
        Command::Commutator => endpoint(&configs, run_commutator_endpoint, cli.format, &mut out)?,
        Command::Orlicz => orlicz(&configs, cli.format, &mut out)?,
        Command::Selftest => unreachable!(),
    };
    out.flush()?;
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Failure::Violation(violations))
    }
}

fn output(cli: &Cli) -> Result<Box<dyn Write>, Failure> {
    Ok(match &cli.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_configs(cli: &Cli) -> Result<Vec<ExperimentConfig>, Failure> {
    let mut configs = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => builtin(cli.command),
    };
    if configs.is_empty() {
        return Err(Failure::Config("no experiments in config".into()));
    }
    for cfg in &mut configs {
        if cfg.seed.is_none() {
            cfg.seed = cli.seed;
        }
        cfg.timings |= cli.timings;
        cfg.validate()?;
    }
    Ok(configs)
}

fn builtin(command: Command) -> Vec<ExperimentConfig> {
    let suite = if command == Command::Constants { default_suite(8, 4) } else { default_suite(10, 5) };
    match command {
        Command::Czo => suite.into_iter().filter(|c| c.d == 1).collect(),
        Command::Commutator => suite
            .into_iter()
            .filter(|c| c.d == 1)
            .map(|mut c| {
                c.b = Some(SymbolSpec::LogDistance { center: None });
                c
            })
            .collect(),
        _ => suite,
    }
}

fn constants(configs: &[ExperimentConfig], format: Format, out: &mut dyn Write) -> Result<Vec<String>, Failure> {
    let audits = configs.iter().map(run_constants_audit).collect::<Result<Vec<_>, _>>()?;
    let violations = audits
        .iter()
        .flat_map(|a| a.violations().into_iter().map(move |v| format!("{}: {v}", a.experiment_id)))
        .collect();
    match format {
        Format::Csv => write_audits_csv(&audits, out)?,
        Format::Json => writeln!(out, "{}", to_json(&audits)?)?,
    }
    Ok(violations)
}

fn sparse(configs: &[ExperimentConfig], format: Format, out: &mut dyn Write) -> Result<Vec<String>, Failure> {
    let mut violations = Vec::new();
    let mut all = Vec::new();
    for cfg in configs {
        let w = cfg.build_weight()?;
        let f = cfg.build_signal()?;
        let certs = certify_families(&w, &f)?;
        for c in &certs {
            if let Some(v) = &c.first_violation {
                violations.push(format!("{} grid {}: {v}", cfg.id, c.grid));
            }
        }
        all.push((cfg.id.clone(), certs));
    }
    match format {
        Format::Csv => {
            writeln!(
                out,
                "experiment_id,grid,members,sparse_ok,min_ratio,carleson_covered,carleson_cells,carleson_ok,domination_gap,domination_cell,domination_ok"
            )?;
            for (id, certs) in &all {
                for c in certs {
                    let (cov, cells) = c.carleson.unwrap_or((0, 0));
                    writeln!(
                        out,
                        "{id},{},{},{},{:?},{cov},{cells},{},{:?},{},{}",
                        c.grid,
                        c.members,
                        c.sparse.ok,
                        c.sparse.min_ratio,
                        c.carleson_ok,
                        c.domination_gap,
                        c.domination_cell,
                        c.domination_ok
                    )?;
                }
            }
        }
        Format::Json => {
            let v: Vec<_> = all.iter().map(|(id, certs)| json!({ "experiment_id": id, "grids": certs })).collect();
            writeln!(out, "{}", to_json(&v)?)?;
        }
    }
    Ok(violations)
}

fn endpoint(
    configs: &[ExperimentConfig],
    run: fn(&ExperimentConfig) -> mwlab::Result<ExperimentReport>,
    format: Format,
    out: &mut dyn Write,
) -> Result<Vec<String>, Failure> {
    let mut report = ExperimentReport::default();
    for cfg in configs {
        report.extend(run(cfg)?);
    }
    let mut violations = Vec::new();
    for s in &report.summaries {
        let mut prev: Option<f64> = None;
        for r in report.rows_of(&s.experiment_id) {
            if !r.ratio.is_finite() || !r.rhs_bound.is_finite() {
                violations.push(format!("{} λ = {}: ratio {} is not finite", r.experiment_id, r.lambda, r.ratio));
            }
            if let Some(p) = prev {
                if r.lhs_measure > p {
                    violations.push(format!(
                        "{} λ = {}: level-set measure {} exceeds {} at the previous λ",
                        r.experiment_id, r.lambda, r.lhs_measure, p
                    ));
                }
            }
            prev = Some(r.lhs_measure);
        }
        eprintln!(
            "{}: sup ratio {:.6} at λ = {:.6} (grid ratio {:.4})",
            s.experiment_id, s.sup_ratio, s.lambda_at_sup, s.lambda_ratio
        );
    }
    match format {
        Format::Csv => write_rows_csv(&report.rows, out)?,
        Format::Json => writeln!(out, "{}", to_json(&report)?)?,
    }
    Ok(violations)
}

struct NormRow {
    id: String,
    cube: Cube,
    kind: YoungFunction,
    value: f64,
    residual: f64,
}

fn norm_row(id: &str, cube: Cube, kind: YoungFunction, values: &[f64]) -> Result<NormRow, Failure> {
    let value = luxemburg_values(values, kind)?;
    let residual = if value > 0.0 {
        let mean = values.iter().map(|v| kind.eval(v.abs() / value)).sum::<f64>() / values.len() as f64;
        (mean - 1.0).abs()
    } else {
        0.0
    };
    Ok(NormRow { id: id.to_string(), cube, kind, value, residual })
}

fn orlicz(configs: &[ExperimentConfig], format: Format, out: &mut dyn Write) -> Result<Vec<String>, Failure> {
    let mut rows = Vec::new();
    for cfg in configs {
        let mesh = cfg.mesh()?;
        let f: Field<f64> = cfg.build_signal()?.magnitude();
        let b = match cfg.b {
            Some(_) => Some(cfg.build_symbol()?.0),
            None => None,
        };
        for grid in 0..mesh.grid_count() {
            for level in 0..=mesh.depth().min(3) {
                for cube in mesh.cubes_at(grid, level) {
                    let cells: Vec<usize> = mesh.cube_box(&cube).cells().collect();
                    if cells.is_empty() {
                        continue;
                    }
                    let fv: Vec<f64> = cells.iter().map(|&c| f.values()[c]).collect();
                    rows.push(norm_row(&cfg.id, cube, YoungFunction::Phi, &fv)?);
                    if let Some(b) = &b {
                        let mean = cells.iter().map(|&c| b.values()[c]).sum::<f64>() / cells.len() as f64;
                        let bv: Vec<f64> = cells.iter().map(|&c| b.values()[c] - mean).collect();
                        rows.push(norm_row(&cfg.id, cube, YoungFunction::PhiBar, &bv)?);
                    }
                }
            }
        }
    }
    let violations = rows
        .iter()
        .filter(|r| r.residual.is_nan() || r.residual > mwlab::orlicz::LUXEMBURG_RESIDUAL)
        .map(|r| format!("{} {} norm on {:?}: residual {:e}", r.id, r.kind.label(), r.cube, r.residual))
        .collect();
    match format {
        Format::Csv => {
            writeln!(out, "experiment_id,grid,level,coord0,coord1,norm_kind,value,residual")?;
            for r in &rows {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{:?},{:?}",
                    r.id,
                    r.cube.grid,
                    r.cube.level,
                    r.cube.coords[0],
                    r.cube.coords[1],
                    r.kind.label(),
                    r.value,
                    r.residual
                )?;
            }
        }
        Format::Json => {
            let v: Vec<_> = rows
                .iter()
                .map(|r| {
                    json!({
                        "experiment_id": r.id,
                        "cube": r.cube,
                        "norm_kind": r.kind,
                        "value": r.value,
                        "residual": r.residual,
                    })
                })
                .collect();
            writeln!(out, "{}", to_json(&v)?)?;
        }
    }
    Ok(violations)
}

fn to_json<T: serde::Serialize + ?Sized>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Config(e.to_string()))
}
