//! `[Category:Keyword]` classification of behavior snippets and clustering
//! of snippets by the system methods they invoke.
//!
//! Rule files are line oriented:
//!
//! ```text
//! # version: 2024.1
//! Permission Management | com.vivo.permissionmanager | feature_adaptation
//! OAID | com.huawei.hwid | privacy_related | optional notes
//! ```
//!
//! Keywords match as case-sensitive substrings of the texts a snippet
//! carries: constant strings, invoked method signatures and class names.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{BehaviorSnippet, Evidence, EvidenceKind};
use crate::frontend::MethodRef;

const DEFAULT_RULES: &str = include_str!("../../data/default_rules.txt");
const DEFAULT_SYSTEM_PREFIXES: &str = include_str!("../../data/system_prefixes.txt");

pub const UNCLASSIFIED: &str = "unclassified";
pub const MAX_SUGGESTIONS: usize = 20;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("cannot read rule file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed rule row: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: empty keyword")]
    EmptyKeyword { line: usize },
    #[error("line {line}: duplicate rule ({category}, {keyword})")]
    Duplicate { line: usize, category: String, keyword: String },
    #[error("rule file contains no rules")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorType {
    CompatibilityIssueFix,
    FeatureAdaptation,
    PrivacyRelated,
}

impl BehaviorType {
    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorType::CompatibilityIssueFix => "compatibility_issue_fix",
            BehaviorType::FeatureAdaptation => "feature_adaptation",
            BehaviorType::PrivacyRelated => "privacy_related",
        }
    }
}

impl fmt::Display for BehaviorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BehaviorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "compatibility_issue_fix" => Ok(BehaviorType::CompatibilityIssueFix),
            "feature_adaptation" => Ok(BehaviorType::FeatureAdaptation),
            "privacy_related" => Ok(BehaviorType::PrivacyRelated),
            other => Err(format!("unknown behavior type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub category: String,
    pub keyword: String,
    pub behavior_type: BehaviorType,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {} | {}", self.category, self.keyword, self.behavior_type)?;
        if !self.notes.is_empty() {
            write!(f, " | {}", self.notes)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub version: String,
    pub rules: Vec<Rule>,
    /// Category name to indices into `rules`, in file order.
    pub category_index: BTreeMap<String, Vec<usize>>,
}

impl RuleSet {
    /// Builds a set from rules, rejecting empty keywords and duplicate pairs.
    pub fn new(version: impl Into<String>, rules: Vec<Rule>) -> Result<Self, RuleError> {
        let mut seen = BTreeSet::new();
        let mut category_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in rules.iter().enumerate() {
            if r.keyword.is_empty() {
                return Err(RuleError::EmptyKeyword { line: i + 1 });
            }
            if !seen.insert((r.category.as_str(), r.keyword.as_str())) {
                return Err(RuleError::Duplicate {
                    line: i + 1,
                    category: r.category.clone(),
                    keyword: r.keyword.clone(),
                });
            }
            category_index.entry(r.category.clone()).or_default().push(i);
        }
        Ok(Self {
            version: version.into(),
            rules,
            category_index,
        })
    }

    /// The rule file shipped with the crate.
    pub fn default_rules() -> Self {
        parse_rules(DEFAULT_RULES).expect("shipped rule file is valid")
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.category_index.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// A copy without the rule at `index`.
    pub fn without(&self, index: usize) -> Self {
        let mut rules = self.rules.clone();
        rules.remove(index);
        Self::new(self.version.clone(), rules).expect("subset of a valid set is valid")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# version: {}\n", self.version);
        for r in &self.rules {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }
}

/// Parses the rule-file format. A `# version: X` comment sets the version.
pub fn parse_rules(text: &str) -> Result<RuleSet, RuleError> {
    let mut version = String::from("unversioned");
    let mut rules = Vec::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("version:") {
                version = v.trim().to_string();
            }
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, '|').map(str::trim).collect();
        if cols.len() < 3 {
            return Err(RuleError::Malformed {
                line: line_no,
                reason: format!("expected `category | keyword | behavior_type`, got {} column(s)", cols.len()),
            });
        }
        if cols[0].is_empty() {
            return Err(RuleError::Malformed {
                line: line_no,
                reason: "empty category".into(),
            });
        }
        if cols[1].is_empty() {
            return Err(RuleError::EmptyKeyword { line: line_no });
        }
        let behavior_type = cols[2]
            .parse()
            .map_err(|reason| RuleError::Malformed { line: line_no, reason })?;
        if !seen.insert((cols[0].to_string(), cols[1].to_string())) {
            return Err(RuleError::Duplicate {
                line: line_no,
                category: cols[0].to_string(),
                keyword: cols[1].to_string(),
            });
        }
        rules.push(Rule {
            category: cols[0].to_string(),
            keyword: cols[1].to_string(),
            behavior_type,
            notes: cols.get(3).map(|s| s.to_string()).unwrap_or_default(),
        });
    }
    if rules.is_empty() {
        return Err(RuleError::Empty);
    }
    RuleSet::new(version, rules)
}

pub fn load_rules(path: &Path) -> Result<RuleSet, RuleError> {
    let text = std::fs::read_to_string(path).map_err(|source| RuleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rules(&text)
}

/// Non-fatal findings about a valid rule set.
pub fn lint_rules(rules: &RuleSet) -> Vec<String> {
    let mut out = Vec::new();
    for (i, r) in rules.rules.iter().enumerate() {
        if r.keyword.len() < 4 {
            out.push(format!("rule {}: keyword `{}` is very short and may over-match", i + 1, r.keyword));
        }
        if r.keyword != r.keyword.trim() {
            out.push(format!("rule {}: keyword has surrounding whitespace", i + 1));
        }
        for (j, other) in rules.rules.iter().enumerate() {
            if i != j && other.category != r.category && other.keyword.contains(&r.keyword) {
                out.push(format!(
                    "rule {}: keyword `{}` ({}) also matches every snippet of rule {} ({})",
                    i + 1,
                    r.keyword,
                    r.category,
                    j + 1,
                    other.category
                ));
            }
        }
    }
    let mut types: BTreeMap<&str, BTreeSet<BehaviorType>> = BTreeMap::new();
    for r in &rules.rules {
        types.entry(&r.category).or_default().insert(r.behavior_type);
    }
    for (cat, ts) in types {
        if ts.len() > 1 {
            out.push(format!("category `{cat}` mixes behavior types"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub category: String,
    pub rule: Rule,
    /// Earliest evidence containing the keyword.
    pub location: Evidence,
}

/// Every rule whose keyword occurs in the snippet, in rule-file order.
pub fn classify(snippet: &BehaviorSnippet, rules: &RuleSet) -> Vec<Classification> {
    rules
        .rules
        .iter()
        .filter_map(|rule| {
            snippet
                .evidence
                .iter()
                .filter(|e| e.text.contains(&rule.keyword))
                .min()
                .map(|e| Classification {
                    category: rule.category.clone(),
                    rule: rule.clone(),
                    location: e.clone(),
                })
        })
        .collect()
}

/// Distinct categories of a classification, or `unclassified`.
pub fn categories_of(classes: &[Classification]) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = classes.iter().map(|c| c.category.clone()).collect();
    if out.is_empty() {
        out.insert(UNCLASSIFIED.to_string());
    }
    out
}

/// Owner-descriptor prefixes that make an unresolved callee a system method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPrefixes(pub Vec<String>);

impl SystemPrefixes {
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(|l| l.trim_start_matches('L').to_string())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn is_system(&self, m: &MethodRef) -> bool {
        let owner = m.owner.strip_prefix('L').unwrap_or(&m.owner);
        self.0.iter().any(|p| owner.starts_with(p.as_str()))
    }
}

impl Default for SystemPrefixes {
    fn default() -> Self {
        Self::parse(DEFAULT_SYSTEM_PREFIXES)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionSource {
    Literal,
    MethodFragment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordSuggestion {
    pub text: String,
    pub source: SuggestionSource,
    /// Fraction of cluster members containing the text.
    pub coverage: f64,
    /// Number of snippets, across all clusters, containing the text.
    pub global_frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetCluster {
    /// Sorted system-method signatures shared by all members.
    pub key: Vec<String>,
    /// Indices into the clustered snippet list.
    pub members: Vec<usize>,
    pub suggested_keywords: Vec<KeywordSuggestion>,
}

impl SnippetCluster {
    pub fn is_residual(&self) -> bool {
        self.key.is_empty()
    }
}

/// The sorted system-method signatures a snippet invokes.
pub fn cluster_key(snippet: &BehaviorSnippet, prefixes: &SystemPrefixes) -> Vec<String> {
    let set: BTreeSet<String> = snippet
        .invoked_system_methods
        .iter()
        .filter(|m| prefixes.is_system(m))
        .map(|m| m.to_string())
        .collect();
    set.into_iter().collect()
}

/// Groups snippets with identical system-method keys, ordered by first
/// member. Snippets without system calls share the residual cluster.
pub fn cluster_by_system_methods(snippets: &[BehaviorSnippet], prefixes: &SystemPrefixes) -> Vec<SnippetCluster> {
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut groups: HashMap<Vec<String>, Vec<usize>> = HashMap::new();
    for (i, s) in snippets.iter().enumerate() {
        let key = cluster_key(s, prefixes);
        let members = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        members.push(i);
    }
    let mut clusters: Vec<SnippetCluster> = order
        .into_iter()
        .map(|key| {
            let members = groups.remove(&key).unwrap_or_default();
            SnippetCluster {
                key,
                members,
                suggested_keywords: Vec::new(),
            }
        })
        .collect();
    for c in &mut clusters {
        c.suggested_keywords = suggest_keywords(c, snippets);
    }
    clusters
}

fn candidates(snippet: &BehaviorSnippet) -> BTreeSet<(String, SuggestionSource)> {
    let mut out = BTreeSet::new();
    for e in &snippet.evidence {
        match e.kind {
            EvidenceKind::Literal => {
                out.insert((e.text.clone(), SuggestionSource::Literal));
            }
            EvidenceKind::Method if !e.text.contains("->") => {
                out.insert((e.text.clone(), SuggestionSource::MethodFragment));
            }
            _ => {}
        }
    }
    out
}

/// Texts occurring in at least half the members, ranked by coverage
/// (descending), global frequency (ascending), literals before method
/// fragments, then lexicographically. At most [`MAX_SUGGESTIONS`].
pub fn suggest_keywords(cluster: &SnippetCluster, all: &[BehaviorSnippet]) -> Vec<KeywordSuggestion> {
    if cluster.members.is_empty() {
        return Vec::new();
    }
    let per_snippet: Vec<BTreeSet<(String, SuggestionSource)>> = all.iter().map(candidates).collect();
    let mut member_count: BTreeMap<&(String, SuggestionSource), usize> = BTreeMap::new();
    for &m in &cluster.members {
        for c in &per_snippet[m] {
            *member_count.entry(c).or_default() += 1;
        }
    }
    let n = cluster.members.len();
    let mut out: Vec<KeywordSuggestion> = member_count
        .into_iter()
        .filter(|(_, k)| 2 * k >= n)
        .map(|((text, source), k)| KeywordSuggestion {
            text: text.clone(),
            source: *source,
            coverage: k as f64 / n as f64,
            global_frequency: per_snippet.iter().filter(|s| s.iter().any(|(t, _)| t == text)).count(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.coverage
            .total_cmp(&a.coverage)
            .then(a.global_frequency.cmp(&b.global_frequency))
            .then(a.source.cmp(&b.source))
            .then(a.text.cmp(&b.text))
    });
    out.truncate(MAX_SUGGESTIONS);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_and_version() {
        let rs = parse_rules("# version: 7\nPermission Management | com.vivo.permissionmanager | feature_adaptation\n").unwrap();
        assert_eq!(rs.version, "7");
        assert_eq!(rs.len(), 1);
        assert_eq!(rs.rules[0].behavior_type, BehaviorType::FeatureAdaptation);
        let rs = parse_rules("OAID | com.huawei.hwid | privacy_related | note").unwrap();
        assert_eq!(rs.rules[0].notes, "note");
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(parse_rules(""), Err(RuleError::Empty)));
        assert!(matches!(parse_rules("# only comments\n"), Err(RuleError::Empty)));
        assert!(matches!(parse_rules("A | b"), Err(RuleError::Malformed { .. })));
        assert!(matches!(parse_rules("A |  | privacy_related"), Err(RuleError::EmptyKeyword { line: 1 })));
        assert!(matches!(parse_rules("A | b | nope"), Err(RuleError::Malformed { .. })));
        assert!(matches!(
            parse_rules("A | b | privacy_related\nA | b | privacy_related"),
            Err(RuleError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn default_rules_load_and_round_trip() {
        let rs = RuleSet::default_rules();
        assert!(rs.len() >= 40);
        assert_eq!(parse_rules(&rs.to_text()).unwrap(), rs);
    }

    #[test]
    fn system_prefixes() {
        let p = SystemPrefixes::default();
        assert!(p.is_system(&MethodRef::new("Landroid/content/Intent;", "setComponent", "()V")));
        assert!(p.is_system(&MethodRef::new("Lcom/huawei/hms/Foo;", "a", "()V")));
        assert!(!p.is_system(&MethodRef::new("Lcom/example/Foo;", "a", "()V")));
    }
}
