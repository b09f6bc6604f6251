//! `fragscope` command-line tool.
//!
//! Reports go to stdout or `--out`; diagnostics go to stderr as one JSON
//! object per line. Exit codes: 0 ok, 1 usage, 2 input error, 3 partial
//! (timeout), 4 internal.

mod cli;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use cli::{AggregateArgs, AnalysisArgs, BatchArgs, Cli, Command, DbCommand, DumpCfgArgs, DumpTaintArgs, RulesCommand, ScanArgs};
use fragscope::device_db::{load_device_db, DeviceInfoDB, IdentifierKind};
use fragscope::fixtures::Fixture;
use fragscope::frontend::{load_program, Diagnostic};
use fragscope::graphs::Icfg;
use fragscope::report::{aggregate, analyze_app_with, AnalysisConfig, AnalysisStatus, AppReport};
use fragscope::rules::{lint_rules, load_rules, RuleSet};
use fragscope::taint::{find_sources, propagate_inter};
use fragscope::{Budget, Deadline};
use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn input(e: impl ToString) -> Self {
        CliError::Input(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Internal(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Outcome {
    Ok,
    Partial,
}

type CliResult = Result<Outcome, CliError>;

/// Writes to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn emit(value: serde_json::Value) {
    eprintln!("{value}");
}

fn emit_diagnostic(app: &str, d: &Diagnostic) {
    let mut v = serde_json::to_value(d).expect("diagnostic serializes");
    v["level"] = json!("warning");
    v["app"] = json!(app);
    emit(v);
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display()))),
        None => {
            say!("{}", text.trim_end());
            Ok(())
        }
    }
}

fn load_rule_file(path: Option<&Path>) -> Result<RuleSet, CliError> {
    path.map_or_else(|| Ok(RuleSet::default_rules()), |p| load_rules(p).map_err(CliError::input))
}

fn config(args: &AnalysisArgs) -> Result<AnalysisConfig, CliError> {
    let mut config = AnalysisConfig {
        budget: Budget::with_wall_clock(Duration::from_secs(args.timeout)),
        rules: load_rule_file(args.rules.as_deref())?,
        ..AnalysisConfig::default()
    };
    if let Some(path) = &args.db {
        let extra = load_device_db(path).map_err(CliError::input)?;
        config.db.merge(&extra);
        config.db.validate().map_err(CliError::input)?;
    }
    Ok(config)
}

fn status_outcome(status: &AnalysisStatus) -> Outcome {
    match status {
        AnalysisStatus::PartialTimeout => Outcome::Partial,
        _ => Outcome::Ok,
    }
}

fn scan(args: ScanArgs) -> CliResult {
    let config = config(&args.analysis)?;
    let id = args.id.clone().unwrap_or_else(|| {
        args.smali_root
            .file_name()
            .map_or_else(|| "app".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let mut report = analyze_app_with(&id, &args.smali_root, args.apk.as_deref(), &config, |d| emit_diagnostic(&id, d))
        .map_err(CliError::input)?;
    report.market = args.market;
    write_output(args.out.as_deref(), &report.to_json())?;
    Ok(status_outcome(&report.analysis_status))
}

struct BatchRow {
    id: String,
    smali_root: PathBuf,
    apk: Option<PathBuf>,
    market: Option<String>,
}

fn read_manifest(path: &Path) -> Result<Vec<BatchRow>, CliError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| base.join(p);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut ids = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).filter(|s| !s.is_empty());
        let (Some(id), Some(root)) = (field(0), field(1)) else {
            if record.iter().all(str::is_empty) {
                continue;
            }
            return Err(CliError::Input(format!("{}:{line}: expected app_id and smali_root", path.display())));
        };
        if !ids.insert(id.to_string()) {
            return Err(CliError::Input(format!("{}:{line}: duplicate app id `{id}`", path.display())));
        }
        rows.push(BatchRow {
            id: id.to_string(),
            smali_root: resolve(root),
            apk: field(2).map(resolve),
            market: field(3).map(String::from),
        });
    }
    if rows.is_empty() {
        return Err(CliError::Input(format!("{}: no apps listed", path.display())));
    }
    Ok(rows)
}

fn batch(args: BatchArgs) -> CliResult {
    let config = config(&args.analysis)?;
    let rows = read_manifest(&args.manifest)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::Internal(format!("{}: {e}", args.out_dir.display())))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let results: Vec<Result<(Outcome, bool), CliError>> = pool.install(|| {
        rows.par_iter()
            .map(|row| {
                let analyzed = analyze_app_with(&row.id, &row.smali_root, row.apk.as_deref(), &config, |d| {
                    emit_diagnostic(&row.id, d)
                });
                let (mut report, load_failed) = match analyzed {
                    Ok(r) => (r, false),
                    Err(e) => {
                        emit(json!({"level": "error", "app": row.id, "message": e.to_string()}));
                        (AppReport::failed(&row.id, format!("load: {e}"), &config.budget), true)
                    }
                };
                report.market = row.market.clone();
                let path = args.out_dir.join(format!("{}.json", row.id));
                fs::write(&path, report.to_json()).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
                emit(json!({"level": "info", "app": row.id, "status": report.analysis_status.to_string()}));
                Ok((status_outcome(&report.analysis_status), load_failed))
            })
            .collect()
    });
    let mut outcome = Outcome::Ok;
    let mut failed_loads = 0;
    for r in results {
        let (o, failed) = r?;
        outcome = outcome.max(o);
        failed_loads += usize::from(failed);
    }
    if failed_loads > 0 {
        return Err(CliError::Input(format!("{failed_loads} app(s) could not be loaded")));
    }
    Ok(outcome)
}

fn aggregate_dir(args: AggregateArgs) -> CliResult {
    let mut paths: Vec<PathBuf> = fs::read_dir(&args.dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<AppReport>(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = aggregate(&reports, args.group_by).map_err(CliError::input)?;
    write_output(args.out.as_deref(), &corpus.to_json())?;
    Ok(Outcome::Ok)
}

fn db(cmd: DbCommand) -> CliResult {
    match cmd {
        DbCommand::Import { files, base, out } => {
            let mut db = match base {
                Some(p) => load_device_db(&p).map_err(CliError::input)?,
                None => DeviceInfoDB::seed(),
            };
            for f in &files {
                db.merge(&load_device_db(f).map_err(CliError::input)?);
            }
            db.validate().map_err(CliError::input)?;
            write_output(out.as_deref(), &db.to_csv())?;
        }
        DbCommand::Validate { file } => {
            let db = load_device_db(&file).map_err(CliError::input)?;
            db.validate().map_err(CliError::input)?;
            say!(
                "{}: {} brands, {} os names, {} models, {} overlaps",
                file.display(),
                db.entries(IdentifierKind::Brand).len(),
                db.entries(IdentifierKind::Os).len(),
                db.entries(IdentifierKind::Model).len(),
                db.overlaps.len()
            );
        }
    }
    Ok(Outcome::Ok)
}

fn rules(cmd: RulesCommand) -> CliResult {
    match cmd {
        RulesCommand::Lint { file } => {
            let rules = load_rule_file(file.as_deref())?;
            let findings = lint_rules(&rules);
            for f in &findings {
                emit(json!({"level": "warning", "message": f}));
            }
            say!("{} rules, {} findings", rules.len(), findings.len());
        }
        RulesCommand::List { file } => {
            let rules = load_rule_file(file.as_deref())?;
            let mut text = format!("# version {}\n", rules.version);
            for (category, indices) in &rules.category_index {
                let _ = writeln!(text, "{category} ({})", indices.len());
                for &i in indices {
                    let r = &rules.rules[i];
                    let _ = writeln!(text, "  {} [{}]", r.keyword, r.behavior_type);
                }
            }
            say!("{}", text.trim_end());
        }
        RulesCommand::Test { fixture, rules } => return rules_test(&fixture, rules.as_deref()),
    }
    Ok(Outcome::Ok)
}

fn rules_test(dir: &Path, rules: Option<&Path>) -> CliResult {
    let fixture = Fixture::open(dir).map_err(CliError::input)?;
    let config = AnalysisConfig {
        rules: load_rule_file(rules)?,
        ..AnalysisConfig::default()
    };
    let report = analyze_app_with(fixture.id(), &fixture.smali_root(), None, &config, |d| emit_diagnostic(fixture.id(), d))
        .map_err(CliError::input)?;
    let mut mismatches = 0;
    for s in &report.snippets {
        let expected = fixture
            .manifest
            .snippets
            .iter()
            .find(|e| e.method == s.method && e.index == s.branch_instruction);
        let verdict = match expected {
            Some(e) if e.categories.iter().collect::<BTreeSet<_>>() == s.categories.iter().collect() => "ok",
            Some(_) => "mismatch",
            None => "unexpected",
        };
        mismatches += usize::from(verdict != "ok");
        say!("{}@{}\t{}\t{verdict}", s.method, s.branch_instruction, s.categories.join(", "));
    }
    for e in &fixture.manifest.snippets {
        if !report.snippets.iter().any(|s| s.method == e.method && s.branch_instruction == e.index) {
            mismatches += 1;
            say!("{}@{}\t{}\tmissing", e.method, e.index, e.categories.join(", "));
        }
    }
    if mismatches > 0 {
        return Err(CliError::Input(format!("{}: {mismatches} snippet(s) differ from the manifest", fixture.id())));
    }
    Ok(Outcome::Ok)
}

fn dump_cfg(args: DumpCfgArgs) -> CliResult {
    let program = load_program(&args.smali_root).map_err(CliError::input)?;
    for d in program.diagnostics() {
        emit_diagnostic(&args.smali_root.display().to_string(), d);
    }
    let icfg = Icfg::build(&program).map_err(CliError::input)?;
    let text = if args.call_graph {
        icfg.call_graph.to_dot(&program)
    } else {
        let mut text = String::new();
        for id in program.method_ids() {
            let sig = program.method(id).signature().to_string();
            if args.method.as_deref().is_some_and(|m| !sig.contains(m)) {
                continue;
            }
            if let Some(cfg) = icfg.cfg(id) {
                let _ = writeln!(text, "// {sig}");
                text.push_str(&cfg.to_dot());
            }
        }
        if text.is_empty() {
            return Err(CliError::Input("no method matches".into()));
        }
        text
    };
    write_output(args.out.as_deref(), &text)?;
    Ok(Outcome::Ok)
}

fn dump_taint(args: DumpTaintArgs) -> CliResult {
    let program = load_program(&args.smali_root).map_err(CliError::input)?;
    for d in program.diagnostics() {
        emit_diagnostic(&args.smali_root.display().to_string(), d);
    }
    let icfg = Icfg::build(&program).map_err(CliError::input)?;
    let config = AnalysisConfig::default();
    let sources = find_sources(&program, &config.specs);
    let taint = propagate_inter(&program, &icfg, &sources, &config.budget, &Deadline::unlimited());
    let mut buf = Vec::new();
    taint.dump_jsonl(&program, &mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    write_output(args.out.as_deref(), &String::from_utf8_lossy(&buf))?;
    Ok(Outcome::Ok)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Scan(a) => scan(a),
        Command::Batch(a) => batch(a),
        Command::Aggregate(a) => aggregate_dir(a),
        Command::Db(c) => db(c),
        Command::Rules(c) => rules(c),
        Command::DumpCfg(a) => dump_cfg(a),
        Command::DumpTaint(a) => dump_taint(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = std::panic::catch_unwind(|| run(cli))
        .unwrap_or_else(|_| Err(CliError::Internal("analysis panicked".into())));
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(3),
        Err(e) => {
            emit(json!({"level": "error", "message": e.to_string()}));
            ExitCode::from(e.code())
        }
    }
}
