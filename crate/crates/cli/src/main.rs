//! `phybridge`: run scenarios, run the training flow, convert command words,
//! summarize traces.
//!
//! Exit codes: 0 clean, 1 usage or configuration error, 2 errors detected by a
//! run, 3 training did not converge. With several scenarios the highest code
//! wins.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use phybridge::cmdword::{decode, parse_fields, parse_hex_words, render_stream};
use phybridge::sim::{parse_trace, Warmup};
use phybridge::{RunReport, Scenario, TrainSummary};
use rayon::prelude::*;

const EXIT_USAGE: u8 = 1;
const EXIT_RUN_ERRORS: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "phybridge", version, about = "Cycle-stepped LPDDR4X PHY control path simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios to quiescence and write run reports and traces
    Run(ScenarioArgs),
    /// Initialize the device, train both directions and verify the link
    Train(ScenarioArgs),
    /// Convert between field syntax and hex command words
    Codec(CodecArgs),
    /// Rebuild a run report from a trace file
    Stats(StatsArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (TOML); repeat to run several
    #[arg(long = "config", short = 'c', required = true, value_name = "FILE")]
    configs: Vec<PathBuf>,
    /// Trace output (JSON lines); a directory when several scenarios are given
    #[arg(long, value_name = "PATH")]
    trace_out: Option<PathBuf>,
    /// Report output (JSON); a directory when several scenarios are given
    #[arg(long, value_name = "PATH")]
    report_out: Option<PathBuf>,
    /// Override the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// Scenarios to run concurrently
    #[arg(long, short = 'j', default_value_t = 1)]
    jobs: usize,
    /// Print a human-readable summary instead of JSON on stdout
    #[arg(long)]
    pretty: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    /// Field syntax to hex words
    Encode,
    /// Hex words to field syntax
    Decode,
}

#[derive(Args)]
struct CodecArgs {
    #[arg(value_enum)]
    direction: Direction,
    /// Input file, `-` for stdin
    #[arg(default_value = "-")]
    input: PathBuf,
    /// Output file (stdout when absent)
    #[arg(long, short = 'o', value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Trace file (JSON lines), `-` for stdin
    trace: PathBuf,
    /// Steady-state window start: `first_issue` or a cycle count
    #[arg(long, default_value = "first_issue", value_parser = parse_warmup)]
    warmup: Warmup,
    /// Report output (stdout when absent)
    #[arg(long, value_name = "FILE")]
    report_out: Option<PathBuf>,
    /// Print a human-readable summary instead of JSON
    #[arg(long)]
    pretty: bool,
}

fn parse_warmup(s: &str) -> Result<Warmup, String> {
    if s == "first_issue" {
        return Ok(Warmup::FirstIssue);
    }
    s.parse().map(Warmup::Cycles).map_err(|_| format!("expected `first_issue` or a cycle count, found {s:?}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => scenarios(&args, Mode::Run),
        Command::Train(args) => scenarios(&args, Mode::Train),
        Command::Codec(args) => report_usage(codec(&args)),
        Command::Stats(args) => stats(&args).unwrap_or_else(|e| {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }),
    };
    ExitCode::from(code)
}

fn report_usage(r: Result<()>) -> u8 {
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn read_input(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
        return Ok(s);
    }
    std::fs::read_to_string(path).with_context(|| format!("{}: no such file or unreadable", path.display()))
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))
        }
        None => std::io::stdout().write_all(bytes).context("writing stdout"),
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Run,
    Train,
}

struct Job {
    config: PathBuf,
    scenario: Scenario,
    trace_out: Option<PathBuf>,
    report_out: Option<PathBuf>,
}

/// Lexically normalized absolute path, for collision checks on files that do
/// not exist yet.
fn normalize(p: &Path) -> PathBuf {
    let abs = if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir().unwrap_or_default().join(p) };
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

fn plan(args: &ScenarioArgs, mode: Mode) -> Result<Vec<Job>> {
    let several = args.configs.len() > 1;
    let mut jobs = Vec::new();
    for config in &args.configs {
        let mut scenario = Scenario::from_path(config)?;
        if let Some(seed) = args.seed {
            scenario.seed = seed;
        }
        let stem = config.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let report_name = match mode {
            Mode::Run => format!("{stem}.report.json"),
            Mode::Train => format!("{stem}.training.json"),
        };
        let pick = |flag: &Option<PathBuf>, file: String, own: &Option<PathBuf>| match flag {
            Some(p) if several => Some(p.join(file)),
            Some(p) => Some(p.clone()),
            None => own.as_ref().map(|o| scenario.resolve(o)),
        };
        let trace_out = pick(&args.trace_out, format!("{stem}.trace.jsonl"), &scenario.output.trace);
        let report_out = pick(&args.report_out, report_name, &scenario.output.report);
        jobs.push(Job { config: config.clone(), scenario, trace_out, report_out });
    }
    let mut seen: HashMap<PathBuf, &Path> = HashMap::new();
    for job in &jobs {
        for out in job.trace_out.iter().chain(&job.report_out) {
            if let Some(other) = seen.insert(normalize(out), &job.config) {
                bail!(
                    "output {} would be written by both {} and {}",
                    out.display(),
                    other.display(),
                    job.config.display()
                );
            }
        }
    }
    Ok(jobs)
}

struct JobResult {
    code: u8,
    stdout: String,
    stderr: String,
}

fn execute(job: &Job, mode: Mode, pretty: bool) -> Result<JobResult> {
    let want_trace = job.trace_out.is_some();
    let name = job.config.display();
    let (code, report_json, text, trace, stderr) = match mode {
        Mode::Run => {
            let out = job.scenario.run(want_trace)?;
            let r = &out.report;
            let mut stderr = String::new();
            if !out.quiescent {
                stderr.push_str(&format!("warning: {name}: horizon reached before the run drained\n"));
            }
            let code = if r.is_clean() { 0 } else { EXIT_RUN_ERRORS };
            if code != 0 {
                stderr.push_str(&format!(
                    "{name}: {} decode errors, {} slot conflicts, {} timing violations, {} illegal commands\n",
                    r.decode_errors, r.slot_conflicts, r.timing_violations, r.illegal_commands
                ));
            }
            (code, r.to_json(), r.to_text(), out.trace, stderr)
        }
        Mode::Train => {
            let out = job.scenario.train(want_trace)?;
            let s = &out.summary;
            let mut stderr = String::new();
            if !s.no_eye_read.is_empty() {
                stderr.push_str(&format!("{name}: no eye found on read lanes {:?}\n", s.no_eye_read));
            }
            if !s.no_eye_write.is_empty() {
                stderr.push_str(&format!("{name}: no eye found on write lanes {:?}\n", s.no_eye_write));
            }
            if let Some(e) = &s.error {
                stderr.push_str(&format!("{name}: {e}\n"));
            }
            if let Some(ratio) = s.verify_ratio.filter(|&r| r != 1.0) {
                stderr.push_str(&format!("{name}: verification passed {ratio} of bursts\n"));
            }
            let code = if s.converged() { 0 } else { EXIT_NO_CONVERGENCE };
            (code, s.to_json(), training_text(s), out.trace, stderr)
        }
    };
    if let Some(p) = &job.trace_out {
        write_output(Some(p), &trace)?;
    }
    let stdout = match (&job.report_out, pretty) {
        (Some(p), false) => {
            write_output(Some(p), report_json.as_bytes())?;
            String::new()
        }
        (Some(p), true) => {
            write_output(Some(p), report_json.as_bytes())?;
            format!("== {name}\n{text}")
        }
        (None, true) => format!("== {name}\n{text}"),
        (None, false) => report_json,
    };
    Ok(JobResult { code, stdout, stderr })
}

fn training_text(s: &TrainSummary) -> String {
    let mut out = String::new();
    for (label, rep) in [("read", &s.read), ("write", &s.write)] {
        let Some(rep) = rep else { continue };
        out.push_str(&format!("{label} training ({} cycles)\n", rep.cycles));
        out.push_str("  lane  window     chosen  margin\n");
        for l in &rep.lanes {
            let window = l.pass_window.map_or("none".to_string(), |[lo, hi]| format!("{lo:>3}..{hi:<3}"));
            out.push_str(&format!("  {:>4}  {:<9}  {:>6}  {:>6}\n", l.lane, window, l.chosen_tap, l.margin_taps));
        }
    }
    match s.verify_ratio {
        Some(r) => out.push_str(&format!("verify: {} bursts, error-free ratio {r:.4}\n", s.verify_bursts)),
        None => out.push_str("verify: not run\n"),
    }
    out.push_str(if s.converged() { "converged\n" } else { "NOT converged\n" });
    out
}

fn scenarios(args: &ScenarioArgs, mode: Mode) -> u8 {
    let jobs = match plan(args, mode) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(args.jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let results: Vec<Result<JobResult>> =
        pool.install(|| jobs.par_iter().map(|job| execute(job, mode, args.pretty)).collect());
    let mut worst = 0;
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(r) => {
                print!("{}", r.stdout);
                eprint!("{}", r.stderr);
                worst = worst.max(r.code);
            }
            Err(e) => {
                eprintln!("error: {}: {e:#}", job.config.display());
                worst = worst.max(EXIT_USAGE);
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------

fn codec(args: &CodecArgs) -> Result<()> {
    let text = read_input(&args.input)?;
    let out = match args.direction {
        Direction::Encode => {
            let cmds = parse_fields(&text)?;
            render_stream(&cmds.iter().map(|c| c.encode()).collect::<Vec<_>>())
        }
        Direction::Decode => {
            let mut out = String::new();
            for (line, word) in parse_hex_words(&text)? {
                let cmd = decode(word).with_context(|| format!("line {line}: {word}"))?;
                out.push_str(&cmd.to_string());
                out.push('\n');
            }
            out
        }
    };
    write_output(args.output.as_deref(), out.as_bytes())
}

fn stats(args: &StatsArgs) -> Result<u8> {
    let text = read_input(&args.trace)?;
    let records = parse_trace(&text)?;
    let report = RunReport::from_trace(&records, args.warmup);
    let body = if args.pretty { report.to_text() } else { report.to_json() };
    match &args.report_out {
        Some(p) => {
            write_output(Some(p), report.to_json().as_bytes())?;
            if args.pretty {
                print!("{body}");
            }
        }
        None => print!("{body}"),
    }
    Ok(if report.is_clean() { 0 } else { EXIT_RUN_ERRORS })
}
