//! Per-app reports and corpus aggregates.
//!
//! [`analyze_app`] runs the whole pipeline on one app under a wall-clock
//! budget. [`aggregate`] folds app reports into a [`CorpusReport`] holding
//! counts, distribution tables and raw sums, so partial aggregates can be
//! merged exactly with [`CorpusReport::merge`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{detect_behaviors, ArmRegion, BehaviorSnippet, Comparison, OperandSide};
use crate::device_db::{default_source_specs, DeviceInfoDB, IdentifierKind, IdentifierMatch, SourceSpec};
use crate::frontend::{
    default_packer_signatures, detect_packing, list_apk_entries, load_program, Diagnostic, FrontendError, PackerSignature,
    PackingVerdict, Program,
};
use crate::graphs::{GraphError, Icfg};
use crate::rules::{categories_of, classify, Classification, RuleSet, UNCLASSIFIED};
use crate::taint::{find_sources, propagate_inter, SourceKind};
use crate::{Budget, Deadline};

pub const SCHEMA_VERSION: u32 = 1;
const DEFAULT_SDK_PREFIXES: &str = include_str!("../../data/sdk_prefixes.txt");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot load app: {0}")]
    Load(#[from] FrontendError),
    #[error("cannot build graphs: {0}")]
    Graph(#[from] GraphError),
    #[error("nothing to aggregate")]
    EmptyInput,
    #[error("cannot merge reports grouped by {0} and {1}")]
    GroupingMismatch(Grouping, Grouping),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum AnalysisStatus {
    Ok,
    PartialTimeout,
    Failed { reason: String },
}

impl AnalysisStatus {
    pub fn packed() -> Self {
        AnalysisStatus::Failed { reason: "packed".into() }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, AnalysisStatus::Failed { .. })
    }
}

impl fmt::Display for AnalysisStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisStatus::Ok => f.write_str("ok"),
            AnalysisStatus::PartialTimeout => f.write_str("partial_timeout"),
            AnalysisStatus::Failed { reason } => write!(f, "failed({reason})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackageBucket {
    KnownSdk,
    Developer,
    Obfuscated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageRow {
    pub package: String,
    pub bucket: PackageBucket,
    /// Number of snippets touching the package.
    pub frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleHit {
    pub category: String,
    pub keyword: String,
    pub method: String,
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetReport {
    pub method: String,
    pub branch_instruction: usize,
    pub comparison: Comparison,
    pub tainted_operand_side: OperandSide,
    pub identifiers: Vec<IdentifierMatch>,
    pub guard_strings: Vec<String>,
    pub region: Vec<ArmRegion>,
    pub reachable_methods: Vec<String>,
    pub invoked_system_methods: Vec<String>,
    pub package_names: Vec<String>,
    pub categories: Vec<String>,
    pub matches: Vec<RuleHit>,
    #[serde(default)]
    pub truncated: bool,
}

impl SnippetReport {
    pub fn new(snippet: &BehaviorSnippet, rules: &RuleSet) -> Self {
        Self::with_classes(snippet, classify(snippet, rules))
    }

    /// A report for a snippet the budget left no time to classify. It carries
    /// no categories and is marked truncated.
    pub fn unclassified(snippet: &BehaviorSnippet) -> Self {
        let mut r = Self::with_classes(snippet, Vec::new());
        r.categories.clear();
        r.truncated = true;
        r
    }

    fn with_classes(snippet: &BehaviorSnippet, classes: Vec<Classification>) -> Self {
        let site = &snippet.guard.site;
        Self {
            method: site.method.to_string(),
            branch_instruction: site.branch_instruction,
            comparison: site.comparison,
            tainted_operand_side: site.tainted_operand_side,
            identifiers: snippet.guard.identifiers.clone(),
            guard_strings: snippet.guard.guard_strings.clone(),
            region: snippet.region.clone(),
            reachable_methods: snippet.reachable_methods.iter().map(|m| m.to_string()).collect(),
            invoked_system_methods: snippet.invoked_system_methods.iter().map(|m| m.to_string()).collect(),
            package_names: snippet.package_names.iter().cloned().collect(),
            categories: categories_of(&classes).into_iter().collect(),
            matches: classes
                .into_iter()
                .map(|c| RuleHit {
                    category: c.category,
                    keyword: c.rule.keyword,
                    method: c.location.method.to_string(),
                    index: c.location.index,
                    text: c.location.text,
                })
                .collect(),
            truncated: snippet.truncated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppReport {
    pub schema_version: u32,
    pub app_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packing: Option<PackingVerdict>,
    pub analysis_status: AnalysisStatus,
    /// Seconds spent on the app.
    pub wall_time: f64,
    /// Configured wall-clock budget in seconds.
    pub budget: f64,
    pub sources: BTreeMap<SourceKind, usize>,
    pub guard_sites: usize,
    pub guards: usize,
    pub snippets: Vec<SnippetReport>,
    pub brands: BTreeSet<String>,
    pub oses: BTreeSet<String>,
    pub models: BTreeSet<String>,
    pub functionalities: BTreeSet<String>,
    pub source_attribution: Vec<PackageRow>,
    pub taint_iterations: usize,
    pub taint_converged: bool,
    pub diagnostics: usize,
}

impl AppReport {
    pub fn empty(app_id: &str, status: AnalysisStatus, budget: &Budget) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            app_id: app_id.to_string(),
            market: None,
            packing: None,
            analysis_status: status,
            wall_time: 0.0,
            budget: budget.wall_clock.as_secs_f64(),
            sources: BTreeMap::new(),
            guard_sites: 0,
            guards: 0,
            snippets: Vec::new(),
            brands: BTreeSet::new(),
            oses: BTreeSet::new(),
            models: BTreeSet::new(),
            functionalities: BTreeSet::new(),
            source_attribution: Vec::new(),
            taint_iterations: 0,
            taint_converged: true,
            diagnostics: 0,
        }
    }

    /// A report for an app that could not be analyzed at all.
    pub fn failed(app_id: &str, reason: impl Into<String>, budget: &Budget) -> Self {
        Self::empty(app_id, AnalysisStatus::Failed { reason: reason.into() }, budget)
    }

    pub fn has_behaviors(&self) -> bool {
        !self.snippets.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Package prefixes identifying known SDKs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdkPrefixes(pub Vec<String>);

impl SdkPrefixes {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn matches(&self, package: &str) -> bool {
        self.0
            .iter()
            .any(|p| package == p || package.strip_prefix(p.as_str()).is_some_and(|r| r.starts_with('.')))
    }
}

impl Default for SdkPrefixes {
    fn default() -> Self {
        Self::parse(DEFAULT_SDK_PREFIXES)
    }
}

/// Segment-length heuristic for obfuscated package names: every segment
/// after the second has at most two characters. Packages with two or fewer
/// segments are judged on all their segments.
pub fn looks_obfuscated(package: &str) -> bool {
    if package.is_empty() {
        return false;
    }
    let segs: Vec<&str> = package.split('.').collect();
    let judged = if segs.len() > 2 { &segs[2..] } else { &segs[..] };
    judged.iter().all(|s| s.chars().count() <= 2)
}

pub fn bucket_package(package: &str, sdk: &SdkPrefixes) -> PackageBucket {
    if sdk.matches(package) {
        PackageBucket::KnownSdk
    } else if looks_obfuscated(package) {
        PackageBucket::Obfuscated
    } else {
        PackageBucket::Developer
    }
}

fn sorted_rows(freq: BTreeMap<String, (PackageBucket, usize)>) -> Vec<PackageRow> {
    let mut rows: Vec<PackageRow> = freq
        .into_iter()
        .map(|(package, (bucket, frequency))| PackageRow {
            package,
            bucket,
            frequency,
        })
        .collect();
    rows.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.package.cmp(&b.package)));
    rows
}

/// Packages touched by the report's snippets, bucketed and counted.
pub fn attribute_sources(report: &AppReport, sdk: &SdkPrefixes) -> Vec<PackageRow> {
    let mut freq: BTreeMap<String, (PackageBucket, usize)> = BTreeMap::new();
    for s in &report.snippets {
        for p in &s.package_names {
            freq.entry(p.clone()).or_insert_with(|| (bucket_package(p, sdk), 0)).1 += 1;
        }
    }
    sorted_rows(freq)
}

/// Everything [`analyze_app`] needs besides the app itself.
#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub db: DeviceInfoDB,
    pub rules: RuleSet,
    pub specs: Vec<SourceSpec>,
    pub packers: Vec<PackerSignature>,
    pub sdk_prefixes: SdkPrefixes,
    pub budget: Budget,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            db: DeviceInfoDB::seed(),
            rules: RuleSet::default_rules(),
            specs: default_source_specs(),
            packers: default_packer_signatures(),
            sdk_prefixes: SdkPrefixes::default(),
            budget: Budget::default(),
        }
    }
}

/// Triage, load and analyze one app.
///
/// A packed APK yields a `failed(packed)` report without touching the smali
/// tree. When the budget runs out, the stages completed so far are reported
/// with status `partial_timeout`.
pub fn analyze_app(app_id: &str, smali_root: &Path, apk: Option<&Path>, config: &AnalysisConfig) -> Result<AppReport, ReportError> {
    analyze_app_with(app_id, smali_root, apk, config, |_| {})
}

/// [`analyze_app`], handing every load diagnostic to `on_diagnostic`.
pub fn analyze_app_with(
    app_id: &str,
    smali_root: &Path,
    apk: Option<&Path>,
    config: &AnalysisConfig,
    mut on_diagnostic: impl FnMut(&Diagnostic),
) -> Result<AppReport, ReportError> {
    let deadline = config.budget.start();
    let mut packing = None;
    if let Some(apk) = apk {
        let verdict = detect_packing(&list_apk_entries(apk)?, &config.packers);
        if verdict.packed {
            let mut r = AppReport::empty(app_id, AnalysisStatus::packed(), &config.budget);
            r.packing = Some(verdict);
            r.wall_time = deadline.elapsed().as_secs_f64();
            return Ok(r);
        }
        packing = Some(verdict);
    }
    let program = load_program(smali_root)?;
    program.diagnostics().iter().for_each(&mut on_diagnostic);
    let mut report = analyze_program(app_id, &program, config, &deadline)?;
    report.packing = packing;
    report.wall_time = deadline.elapsed().as_secs_f64();
    Ok(report)
}

/// Analyzes an already loaded program against `deadline`.
pub fn analyze_program(app_id: &str, program: &Program, config: &AnalysisConfig, deadline: &Deadline) -> Result<AppReport, ReportError> {
    let mut report = AppReport::empty(app_id, AnalysisStatus::Ok, &config.budget);
    report.diagnostics = program.diagnostics().len();
    let icfg = Icfg::build(program)?;
    let sources = find_sources(program, &config.specs);
    for s in &sources {
        *report.sources.entry(s.kind).or_default() += 1;
    }
    let taint = propagate_inter(program, &icfg, &sources, &config.budget, deadline);
    report.taint_iterations = taint.iterations;
    report.taint_converged = taint.converged;
    let detection = if deadline.expired() {
        None
    } else {
        Some(detect_behaviors(program, &icfg, &taint, &config.db, deadline))
    };
    let truncated = detection.as_ref().is_none_or(|d| d.truncated);
    if let Some(d) = detection {
        report.guard_sites = d.sites.len();
        report.guards = d.guards.len();
        report.snippets = d
            .snippets
            .iter()
            .map(|s| {
                if deadline.expired() {
                    SnippetReport::unclassified(s)
                } else {
                    SnippetReport::new(s, &config.rules)
                }
            })
            .collect();
    }
    for s in &report.snippets {
        for id in &s.identifiers {
            let set = match id.kind {
                IdentifierKind::Brand => &mut report.brands,
                IdentifierKind::Os => &mut report.oses,
                IdentifierKind::Model => &mut report.models,
            };
            set.insert(id.db_entry.clone());
        }
        report.functionalities.extend(s.categories.iter().cloned());
    }
    report.source_attribution = attribute_sources(&report, &config.sdk_prefixes);
    let truncated = truncated || report.snippets.iter().any(|s| s.truncated);
    if (truncated || !taint.converged) && deadline.expired() {
        report.analysis_status = AnalysisStatus::PartialTimeout;
    }
    report.wall_time = deadline.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    None,
    Market,
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::None => "none",
            Grouping::Market => "market",
        })
    }
}

impl std::str::FromStr for Grouping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Grouping::None),
            "market" => Ok(Grouping::Market),
            other => Err(format!("unknown grouping `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSums {
    pub brands: usize,
    pub oses: usize,
    pub models: usize,
    pub functionalities: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub avg_brands: f64,
    pub avg_oses: f64,
    pub avg_models: f64,
    pub avg_functionalities: f64,
}

/// Counts and tables for one group of apps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusGroup {
    pub apps_total: usize,
    pub unpacked: usize,
    /// Apps whose analysis ran (status ok or partial_timeout).
    pub analyzed: usize,
    pub partial: usize,
    pub with_behaviors: usize,
    pub brands: Vec<CountRow>,
    pub oses: Vec<CountRow>,
    pub categories: Vec<CountRow>,
    /// Sums over apps with behaviors; averages are derived from these.
    pub sums: RawSums,
    pub averages: Averages,
    pub source_attribution: Vec<PackageRow>,
}

fn table(map: BTreeMap<String, usize>) -> Vec<CountRow> {
    let mut rows: Vec<CountRow> = map.into_iter().map(|(name, count)| CountRow { name, count }).collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.name.cmp(&b.name)));
    rows
}

fn add_rows(a: &[CountRow], b: &[CountRow]) -> Vec<CountRow> {
    let mut map: BTreeMap<String, usize> = BTreeMap::new();
    for r in a.iter().chain(b) {
        *map.entry(r.name.clone()).or_default() += r.count;
    }
    table(map)
}

fn ratio(sum: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

impl CorpusGroup {
    pub fn from_app(r: &AppReport) -> Self {
        let packed = matches!(&r.analysis_status, AnalysisStatus::Failed { reason } if reason == "packed");
        let analyzed = !r.analysis_status.is_failed();
        let with = analyzed && r.has_behaviors();
        let mut g = CorpusGroup {
            apps_total: 1,
            unpacked: usize::from(!packed),
            analyzed: usize::from(analyzed),
            partial: usize::from(r.analysis_status == AnalysisStatus::PartialTimeout),
            with_behaviors: usize::from(with),
            ..Default::default()
        };
        if with {
            let ones = |set: &BTreeSet<String>| table(set.iter().map(|s| (s.clone(), 1)).collect());
            let functionalities: BTreeSet<String> =
                r.functionalities.iter().filter(|f| f.as_str() != UNCLASSIFIED).cloned().collect();
            g.brands = ones(&r.brands);
            g.oses = ones(&r.oses);
            g.categories = ones(&r.functionalities);
            g.sums = RawSums {
                brands: r.brands.len(),
                oses: r.oses.len(),
                models: r.models.len(),
                functionalities: functionalities.len(),
            };
            g.source_attribution = r.source_attribution.clone();
        }
        g.refresh_averages();
        g
    }

    fn refresh_averages(&mut self) {
        let n = self.with_behaviors;
        self.averages = Averages {
            avg_brands: ratio(self.sums.brands, n),
            avg_oses: ratio(self.sums.oses, n),
            avg_models: ratio(self.sums.models, n),
            avg_functionalities: ratio(self.sums.functionalities, n),
        };
    }

    pub fn merge(&self, other: &CorpusGroup) -> CorpusGroup {
        let mut attribution: BTreeMap<String, (PackageBucket, usize)> = BTreeMap::new();
        for row in self.source_attribution.iter().chain(&other.source_attribution) {
            attribution.entry(row.package.clone()).or_insert((row.bucket, 0)).1 += row.frequency;
        }
        let mut g = CorpusGroup {
            apps_total: self.apps_total + other.apps_total,
            unpacked: self.unpacked + other.unpacked,
            analyzed: self.analyzed + other.analyzed,
            partial: self.partial + other.partial,
            with_behaviors: self.with_behaviors + other.with_behaviors,
            brands: add_rows(&self.brands, &other.brands),
            oses: add_rows(&self.oses, &other.oses),
            categories: add_rows(&self.categories, &other.categories),
            sums: RawSums {
                brands: self.sums.brands + other.sums.brands,
                oses: self.sums.oses + other.sums.oses,
                models: self.sums.models + other.sums.models,
                functionalities: self.sums.functionalities + other.sums.functionalities,
            },
            averages: Averages::default(),
            source_attribution: sorted_rows(attribution),
        };
        g.refresh_averages();
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub schema_version: u32,
    pub grouping: Grouping,
    pub overall: CorpusGroup,
    /// Per-group figures; empty when `grouping` is `none`.
    pub groups: BTreeMap<String, CorpusGroup>,
}

pub const UNKNOWN_MARKET: &str = "unknown";

impl CorpusReport {
    fn of_app(r: &AppReport, grouping: Grouping) -> Self {
        let g = CorpusGroup::from_app(r);
        let mut groups = BTreeMap::new();
        if grouping == Grouping::Market {
            groups.insert(r.market.clone().unwrap_or_else(|| UNKNOWN_MARKET.to_string()), g.clone());
        }
        Self {
            schema_version: SCHEMA_VERSION,
            grouping,
            overall: g,
            groups,
        }
    }

    pub fn merge(&self, other: &CorpusReport) -> Result<CorpusReport, ReportError> {
        if self.grouping != other.grouping {
            return Err(ReportError::GroupingMismatch(self.grouping, other.grouping));
        }
        let mut groups = self.groups.clone();
        for (k, g) in &other.groups {
            let merged = match groups.get(k) {
                Some(mine) => mine.merge(g),
                None => g.clone(),
            };
            groups.insert(k.clone(), merged);
        }
        Ok(CorpusReport {
            schema_version: SCHEMA_VERSION,
            grouping: self.grouping,
            overall: self.overall.merge(&other.overall),
            groups,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn aggregate(reports: &[AppReport], grouping: Grouping) -> Result<CorpusReport, ReportError> {
    let (first, rest) = reports.split_first().ok_or(ReportError::EmptyInput)?;
    rest.iter().try_fold(CorpusReport::of_app(first, grouping), |acc, r| {
        acc.merge(&CorpusReport::of_app(r, grouping))
    })
}
