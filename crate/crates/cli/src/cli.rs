//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fragscope::report::Grouping;

#[derive(Debug, Parser)]
#[command(name = "fragscope", version, about = "Find and classify device-specific behaviors in Android smali code")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analyze one app and write its JSON report.
    Scan(ScanArgs),
    /// Analyze every app listed in a TSV manifest, in parallel.
    Batch(BatchArgs),
    /// Fold a directory of app reports into a corpus report.
    Aggregate(AggregateArgs),
    /// Manage device identifier databases.
    #[command(subcommand)]
    Db(DbCommand),
    /// Inspect and exercise keyword rule files.
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Print control-flow graphs or the call graph as DOT.
    DumpCfg(DumpCfgArgs),
    /// Print taint facts as JSON lines.
    DumpTaint(DumpTaintArgs),
}

/// Inputs shared by every command that runs the analysis.
#[derive(Debug, Args)]
pub struct AnalysisArgs {
    /// Identifier database CSV merged over the built-in seed.
    #[arg(long, value_name = "F")]
    pub db: Option<PathBuf>,
    /// Rule file replacing the shipped rules.
    #[arg(long, value_name = "F")]
    pub rules: Option<PathBuf>,
    /// Wall-clock budget per app, in seconds.
    #[arg(long, value_name = "N", default_value_t = fragscope::budget::DEFAULT_WALL_CLOCK_SECS)]
    pub timeout: u64,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Directory holding the app's `.smali` files.
    pub smali_root: PathBuf,
    /// APK checked for packers before analysis.
    #[arg(long, value_name = "F")]
    pub apk: Option<PathBuf>,
    /// App identifier; defaults to the smali directory name.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub market: Option<String>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "F.json")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Tab-separated `app_id, smali_root[, apk[, market]]` rows; relative
    /// paths resolve against the manifest's directory.
    pub manifest: PathBuf,
    /// Apps analyzed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Directory receiving one `<app_id>.json` per app.
    #[arg(long, value_name = "D")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Directory of app reports (`*.json`).
    pub dir: PathBuf,
    #[arg(long, default_value_t = Grouping::None)]
    pub group_by: Grouping,
    #[arg(long, value_name = "F.json")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DbCommand {
    /// Merge CSV files into one database and print it as CSV.
    Import {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Start from this database instead of the built-in seed.
        #[arg(long, value_name = "F")]
        base: Option<PathBuf>,
        #[arg(long, value_name = "F")]
        out: Option<PathBuf>,
    },
    /// Parse and check a database file.
    Validate { file: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Report suspicious rules.
    Lint {
        /// Rule file; defaults to the shipped rules.
        file: Option<PathBuf>,
    },
    /// Print rules grouped by category.
    List { file: Option<PathBuf> },
    /// Classify a fixture's snippets and compare them with its manifest.
    Test {
        /// Fixture directory containing `manifest.json` and `smali/`.
        fixture: PathBuf,
        #[arg(long, value_name = "F")]
        rules: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DumpCfgArgs {
    pub smali_root: PathBuf,
    /// Only methods whose signature contains this text.
    #[arg(long)]
    pub method: Option<String>,
    /// Print the call graph instead of per-method CFGs.
    #[arg(long)]
    pub call_graph: bool,
    #[arg(long, value_name = "F.dot")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpTaintArgs {
    pub smali_root: PathBuf,
    #[arg(long, value_name = "F.jsonl")]
    pub out: Option<PathBuf>,
}
