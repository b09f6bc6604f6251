//! Device-information vocabulary: the `android.os.Build` field to system
//! property map, and the brand / OS / model identifier database together with
//! the identifier matcher.
//!
//! Matching is case-insensitive (lowercase folding, no locale tailoring).
//! An entry matches as `exact_token` when it occurs in the candidate bounded
//! by non-token characters, and as `substring` when it occurs anywhere else;
//! substring matches need entries of at least [`MIN_SUBSTRING_LEN`] characters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_SUBSTRING_LEN: usize = 3;

pub const DEFAULT_DB_CSV: &str = include_str!("../../data/default_db.csv");

#[derive(Debug, Error)]
pub enum DeviceDbError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("line {line}: unknown kind `{kind}` (expected brand, os, model or overlap)")]
    UnknownKind { line: u64, kind: String },
    #[error("line {line}: empty value")]
    EmptyValue { line: u64 },
    #[error("database has zero entries")]
    ZeroEntries,
    #[error("`{value}` appears as {kinds} without an overlap row")]
    Overlap { value: String, kinds: String },
    #[error("unknown Build field `{0}`")]
    UnknownField(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BuildField {
    Brand,
    Device,
    Display,
    Fingerprint,
    Manufacturer,
    Model,
    Product,
}

impl BuildField {
    pub const ALL: [BuildField; 7] = [
        BuildField::Brand,
        BuildField::Device,
        BuildField::Display,
        BuildField::Fingerprint,
        BuildField::Manufacturer,
        BuildField::Model,
        BuildField::Product,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuildField::Brand => "BRAND",
            BuildField::Device => "DEVICE",
            BuildField::Display => "DISPLAY",
            BuildField::Fingerprint => "FINGERPRINT",
            BuildField::Manufacturer => "MANUFACTURER",
            BuildField::Model => "MODEL",
            BuildField::Product => "PRODUCT",
        }
    }
}

impl fmt::Display for BuildField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BuildField {
    type Err = DeviceDbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| DeviceDbError::UnknownField(s.to_string()))
    }
}

/// One row of the Build-field / system-property correspondence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub build_field: BuildField,
    pub property_key: String,
    pub description: String,
}

pub fn property_key_for(field: BuildField) -> &'static str {
    match field {
        BuildField::Brand => "ro.product.brand",
        BuildField::Device => "ro.product.device",
        BuildField::Display => "ro.build.display.id",
        BuildField::Fingerprint => "ro.build.fingerprint",
        BuildField::Manufacturer => "ro.product.manufacturer",
        BuildField::Model => "ro.product.model",
        BuildField::Product => "ro.product.name",
    }
}

pub fn property_key_for_name(field: &str) -> Result<&'static str, DeviceDbError> {
    field.parse().map(property_key_for)
}

fn description_for(field: BuildField) -> &'static str {
    match field {
        BuildField::Brand => "Consumer-visible Brand",
        BuildField::Device => "Name of the Industrial Design",
        BuildField::Display => "Build ID String for Users",
        BuildField::Fingerprint => "String that Identifies Current Build",
        BuildField::Manufacturer => "Manufacturer of the Product/Hardware",
        BuildField::Model => "End-user-visible Name for the Product",
        BuildField::Product => "Name of the Overall Product",
    }
}

pub fn default_source_specs() -> Vec<SourceSpec> {
    BuildField::ALL
        .into_iter()
        .map(|f| SourceSpec {
            build_field: f,
            property_key: property_key_for(f).to_string(),
            description: description_for(f).to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentifierKind {
    Brand,
    Os,
    Model,
}

impl IdentifierKind {
    pub const ALL: [IdentifierKind; 3] = [IdentifierKind::Brand, IdentifierKind::Os, IdentifierKind::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            IdentifierKind::Brand => "brand",
            IdentifierKind::Os => "os",
            IdentifierKind::Model => "model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    ExactToken,
    Substring,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifierMatch {
    pub matched_text: String,
    pub kind: IdentifierKind,
    pub db_entry: String,
    pub match_mode: MatchMode,
}

pub fn canonical(s: &str) -> String {
    s.chars().flat_map(char::to_lowercase).collect()
}

pub fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Identifier database. Keys are canonical forms; values keep the first
/// original spelling seen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfoDB {
    pub brands: BTreeMap<String, String>,
    pub os_names: BTreeMap<String, String>,
    pub models: BTreeMap<String, String>,
    pub overlaps: BTreeSet<String>,
}

impl DeviceInfoDB {
    pub fn seed() -> Self {
        parse_device_db(DEFAULT_DB_CSV).expect("shipped database is valid")
    }

    pub fn entries(&self, kind: IdentifierKind) -> &BTreeMap<String, String> {
        match kind {
            IdentifierKind::Brand => &self.brands,
            IdentifierKind::Os => &self.os_names,
            IdentifierKind::Model => &self.models,
        }
    }

    fn entries_mut(&mut self, kind: IdentifierKind) -> &mut BTreeMap<String, String> {
        match kind {
            IdentifierKind::Brand => &mut self.brands,
            IdentifierKind::Os => &mut self.os_names,
            IdentifierKind::Model => &mut self.models,
        }
    }

    pub fn insert(&mut self, kind: IdentifierKind, value: &str) {
        self.entries_mut(kind)
            .entry(canonical(value))
            .or_insert_with(|| value.to_string());
    }

    pub fn len(&self) -> usize {
        self.brands.len() + self.os_names.len() + self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds every entry of `other`; existing spellings win.
    pub fn merge(&mut self, other: &DeviceInfoDB) {
        for kind in IdentifierKind::ALL {
            for (canon, original) in other.entries(kind) {
                self.entries_mut(kind)
                    .entry(canon.clone())
                    .or_insert_with(|| original.clone());
            }
        }
        self.overlaps.extend(other.overlaps.iter().cloned());
    }

    /// Checks the database invariants: non-empty, and kinds disjoint unless
    /// whitelisted.
    pub fn validate(&self) -> Result<(), DeviceDbError> {
        if self.is_empty() {
            return Err(DeviceDbError::ZeroEntries);
        }
        let mut seen: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for kind in IdentifierKind::ALL {
            for canon in self.entries(kind).keys() {
                seen.entry(canon).or_default().push(kind.as_str());
            }
        }
        for (value, kinds) in seen {
            if kinds.len() > 1 && !self.overlaps.contains(value) {
                return Err(DeviceDbError::Overlap {
                    value: value.to_string(),
                    kinds: kinds.join("+"),
                });
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "value"]).expect("in-memory write");
        for kind in IdentifierKind::ALL {
            for original in self.entries(kind).values() {
                w.write_record([kind.as_str(), original]).expect("in-memory write");
            }
        }
        for o in &self.overlaps {
            w.write_record(["overlap", o]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
}

pub fn parse_device_db(text: &str) -> Result<DeviceInfoDB, DeviceDbError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut db = DeviceInfoDB::default();
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| DeviceDbError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(str::is_empty) {
            continue;
        }
        let kind = record.get(0).unwrap_or_default();
        let value = record.get(1).unwrap_or_default();
        if std::mem::take(&mut first) && kind.eq_ignore_ascii_case("kind") && value.eq_ignore_ascii_case("value") {
            continue;
        }
        if record.len() > 2 {
            return Err(DeviceDbError::Csv {
                line,
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        if value.is_empty() {
            return Err(DeviceDbError::EmptyValue { line });
        }
        match kind {
            "brand" => db.insert(IdentifierKind::Brand, value),
            "os" => db.insert(IdentifierKind::Os, value),
            "model" => db.insert(IdentifierKind::Model, value),
            "overlap" => {
                db.overlaps.insert(canonical(value));
            }
            other => {
                return Err(DeviceDbError::UnknownKind {
                    line,
                    kind: other.to_string(),
                })
            }
        }
    }
    db.validate()?;
    Ok(db)
}

pub fn load_device_db(path: &Path) -> Result<DeviceInfoDB, DeviceDbError> {
    let text = std::fs::read_to_string(path).map_err(|source| DeviceDbError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_device_db(&text)
}

fn match_mode(candidate: &str, entry: &str) -> Option<MatchMode> {
    let mut found = false;
    for (pos, _) in candidate.match_indices(entry) {
        found = true;
        let before = candidate[..pos].chars().next_back();
        let after = candidate[pos + entry.len()..].chars().next();
        if !before.is_some_and(is_token_char) && !after.is_some_and(is_token_char) {
            return Some(MatchMode::ExactToken);
        }
    }
    (found && entry.chars().count() >= MIN_SUBSTRING_LEN).then_some(MatchMode::Substring)
}

/// All database entries found in `candidate`: brands, then OS names, then
/// models, each group ordered by canonical entry.
pub fn match_identifier(candidate: &str, db: &DeviceInfoDB) -> Vec<IdentifierMatch> {
    let canon = canonical(candidate);
    if canon.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for kind in IdentifierKind::ALL {
        for (entry, original) in db.entries(kind) {
            if let Some(mode) = match_mode(&canon, entry) {
                out.push(IdentifierMatch {
                    matched_text: candidate.to_string(),
                    kind,
                    db_entry: original.clone(),
                    match_mode: mode,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn db(rows: &str) -> DeviceInfoDB {
        parse_device_db(rows).unwrap()
    }

    #[test]
    fn table_mapping() {
        assert_eq!(property_key_for(BuildField::Manufacturer), "ro.product.manufacturer");
        assert_eq!(property_key_for_name("FINGERPRINT").unwrap(), "ro.build.fingerprint");
        assert_eq!(property_key_for_name("DISPLAY").unwrap(), "ro.build.display.id");
        assert!(matches!(property_key_for_name("SERIAL"), Err(DeviceDbError::UnknownField(_))));
        let keys: BTreeSet<_> = BuildField::ALL.into_iter().map(property_key_for).collect();
        assert_eq!(keys.len(), 7);
        let specs = default_source_specs();
        assert_eq!(specs.len(), 7);
        for f in BuildField::ALL {
            assert_eq!(specs.iter().filter(|s| s.build_field == f).count(), 1);
        }
    }

    #[test]
    fn load_examples() {
        let d = db("brand,Samsung\nos,MIUI\nmodel,SM-S918B\n");
        assert_eq!((d.brands.len(), d.os_names.len(), d.models.len()), (1, 1, 1));
        assert!(matches!(parse_device_db(""), Err(DeviceDbError::ZeroEntries)));
        assert!(matches!(parse_device_db("# only comments\nkind,value\n"), Err(DeviceDbError::ZeroEntries)));
        assert_eq!(db("brand,Huawei\nbrand,Huawei\nbrand,HUAWEI\n").brands.len(), 1);
        assert!(matches!(parse_device_db("vendor,Acme\n"), Err(DeviceDbError::UnknownKind { line: 1, .. })));
        assert!(matches!(parse_device_db("brand,Acme\nbrand,\n"), Err(DeviceDbError::EmptyValue { line: 2 })));
    }

    #[test]
    fn overlap_needs_whitelist() {
        assert!(matches!(parse_device_db("brand,Nubia\nos,nubia\n"), Err(DeviceDbError::Overlap { .. })));
        assert!(parse_device_db("brand,Nubia\nos,nubia\noverlap,NUBIA\n").is_ok());
    }

    #[test]
    fn seed_is_valid() {
        let d = DeviceInfoDB::seed();
        assert!(d.brands.len() >= 30 && d.os_names.len() >= 15 && d.models.len() >= 50);
        let round = parse_device_db(&d.to_csv()).unwrap();
        assert_eq!(round, d);
    }

    #[test]
    fn matcher_examples() {
        let d = db("brand,OPPO\nbrand,LG\nos,Funtouch OS\nmodel,SM-S918B\n");
        let m = match_identifier("oppo", &d);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].kind, m[0].db_entry.as_str(), m[0].match_mode), (IdentifierKind::Brand, "OPPO", MatchMode::ExactToken));
        let m = match_identifier("Funtouch OS_2.5.1", &d);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].kind, m[0].match_mode), (IdentifierKind::Os, MatchMode::Substring));
        assert_eq!(m[0].matched_text, "Funtouch OS_2.5.1");
        assert!(match_identifier("flag", &d).is_empty());
        assert_eq!(match_identifier("LG-H870", &d)[0].match_mode, MatchMode::ExactToken);
        assert_eq!(match_identifier("samsung SM-S918B", &d)[0].kind, IdentifierKind::Model);
        assert!(match_identifier("", &d).is_empty());
    }

    /// Naive re-check of a reported match against the rule, by scanning every
    /// candidate window.
    fn naive_mode(candidate: &str, entry: &str) -> Option<MatchMode> {
        let c: Vec<char> = canonical(candidate).chars().collect();
        let e: Vec<char> = canonical(entry).chars().collect();
        if e.is_empty() || e.len() > c.len() {
            return None;
        }
        let mut any = false;
        for start in 0..=(c.len() - e.len()) {
            if c[start..start + e.len()] == e[..] {
                any = true;
                let left_ok = start == 0 || !is_token_char(c[start - 1]);
                let right_ok = start + e.len() == c.len() || !is_token_char(c[start + e.len()]);
                if left_ok && right_ok {
                    return Some(MatchMode::ExactToken);
                }
            }
        }
        (any && e.len() >= MIN_SUBSTRING_LEN).then_some(MatchMode::Substring)
    }

    fn small_db() -> impl Strategy<Value = DeviceInfoDB> {
        let entry = "[a-cA-C0-9 _-]{1,4}";
        (
            prop::collection::vec(entry, 1..5),
            prop::collection::vec(entry, 0..4),
            prop::collection::vec(entry, 0..4),
        )
            .prop_map(|(b, o, m)| {
                let mut db = DeviceInfoDB::default();
                for v in b.iter().filter(|v| !v.trim().is_empty()) {
                    db.insert(IdentifierKind::Brand, v);
                }
                for v in o.iter().filter(|v| !v.trim().is_empty()) {
                    db.insert(IdentifierKind::Os, v);
                }
                for v in m.iter().filter(|v| !v.trim().is_empty()) {
                    db.insert(IdentifierKind::Model, v);
                }
                db
            })
    }

    proptest! {
        #[test]
        fn case_insensitive(candidate in "[a-cA-Cé0-9 ._-]{1,12}", d in small_db()) {
            let upper = candidate.to_uppercase();
            let strip = |v: Vec<IdentifierMatch>| v.into_iter().map(|m| (m.kind, m.db_entry, m.match_mode)).collect::<Vec<_>>();
            prop_assert_eq!(strip(match_identifier(&candidate, &d)), strip(match_identifier(&upper, &d)));
        }

        #[test]
        fn agrees_with_naive_scanner(candidate in "[a-cA-C0-9 ._-]{1,12}", d in small_db()) {
            let got = match_identifier(&candidate, &d);
            let mut expected = Vec::new();
            for kind in IdentifierKind::ALL {
                for original in d.entries(kind).values() {
                    if let Some(mode) = naive_mode(&candidate, original) {
                        expected.push((kind, original.clone(), mode));
                    }
                }
            }
            let got: Vec<_> = got.into_iter().map(|m| (m.kind, m.db_entry, m.match_mode)).collect();
            prop_assert_eq!(got, expected);
        }
    }
}
