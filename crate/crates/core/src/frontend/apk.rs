//! APK entry listing and packer triage.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::FrontendError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApkEntryList {
    pub entries: Vec<String>,
    pub total_count: usize,
}

impl ApkEntryList {
    /// Builds a list, dropping repeated names after their first occurrence.
    pub fn new<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut seen = HashSet::new();
        let entries: Vec<String> = entries.into_iter().map(Into::into).filter(|e| seen.insert(e.clone())).collect();
        Self {
            total_count: entries.len(),
            entries,
        }
    }
}

const LOCAL_HEADER: [u8; 4] = *b"PK\x03\x04";
const EMPTY_ARCHIVE: [u8; 4] = *b"PK\x05\x06";

/// Lists central-directory entry names in archive order without inflating any entry.
pub fn list_apk_entries(path: &Path) -> Result<ApkEntryList, FrontendError> {
    let io_err = |source| FrontendError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match file.read(&mut magic[got..]).map_err(io_err)? {
            0 => break,
            n => got += n,
        }
    }
    if got < 4 || (magic != LOCAL_HEADER && magic != EMPTY_ARCHIVE) {
        return Err(FrontendError::NotZip(path.to_path_buf()));
    }
    let file = File::open(path).map_err(io_err)?;
    let truncated = |detail: String| FrontendError::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    let mut archive = zip::ZipArchive::new(BufReader::new(file)).map_err(|e| match e {
        zip::result::ZipError::Io(source) => io_err(source),
        other => truncated(other.to_string()),
    })?;
    let mut names = Vec::with_capacity(archive.len());
    for i in 0..archive.len() {
        let entry = archive.by_index_raw(i).map_err(|e| truncated(e.to_string()))?;
        let name = entry.name().map_err(|e| truncated(e.to_string()))?;
        names.push(name.to_string());
    }
    Ok(ApkEntryList::new(names))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureKind {
    EntryPath,
    PackagePrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackerSignature {
    pub packer_name: String,
    pub kind: SignatureKind,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackingVerdict {
    pub packed: bool,
    /// `(packer_name, entry)` pairs, in signature order then entry order.
    pub matched: Vec<(String, String)>,
}

pub const DEFAULT_PACKER_SIGNATURES: &str = include_str!("../../data/packers.tsv");

/// Parses `packer_name<TAB>kind<TAB>pattern` lines. Rows sharing a name and kind
/// are merged into one signature.
pub fn parse_packer_signatures(text: &str) -> Result<Vec<PackerSignature>, FrontendError> {
    let mut out: Vec<PackerSignature> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let bad = |message: String| FrontendError::BadSignature { line: i + 1, message };
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, kind, pattern] = cols.as_slice() else {
            return Err(bad(format!("expected 3 tab-separated columns, got {}", cols.len())));
        };
        let (name, pattern) = (name.trim(), pattern.trim());
        if name.is_empty() || pattern.is_empty() {
            return Err(bad("empty packer name or pattern".into()));
        }
        let kind = match kind.trim() {
            "entry_path" => SignatureKind::EntryPath,
            "package_prefix" => SignatureKind::PackagePrefix,
            other => return Err(bad(format!("unknown kind `{other}`"))),
        };
        if kind == SignatureKind::EntryPath {
            glob::Pattern::new(pattern).map_err(|e| bad(format!("bad glob `{pattern}`: {e}")))?;
        }
        match out.iter_mut().find(|s| s.packer_name == name && s.kind == kind) {
            Some(sig) => sig.patterns.push(pattern.to_string()),
            None => out.push(PackerSignature {
                packer_name: name.to_string(),
                kind,
                patterns: vec![pattern.to_string()],
            }),
        }
    }
    Ok(out)
}

pub fn default_packer_signatures() -> Vec<PackerSignature> {
    parse_packer_signatures(DEFAULT_PACKER_SIGNATURES).expect("bundled packer signatures are valid")
}

/// Dotted class path of an entry such as `smali_classes2/com/stub/StubApp.smali`.
fn entry_as_class_path(entry: &str) -> Option<String> {
    let mut path = entry;
    for ext in [".smali", ".class"] {
        if let Some(p) = path.strip_suffix(ext) {
            path = p;
        }
    }
    if let Some((root, rest)) = path.split_once('/') {
        if root.starts_with("smali") || root == "classes" {
            path = rest;
        }
    }
    (!path.is_empty()).then(|| path.replace('/', "."))
}

fn prefix_matches(prefix: &str, dotted: &str) -> bool {
    dotted == prefix || dotted.strip_prefix(prefix).is_some_and(|r| r.starts_with('.'))
}

pub fn detect_packing(entries: &ApkEntryList, signatures: &[PackerSignature]) -> PackingVerdict {
    let opts = glob::MatchOptions {
        case_sensitive: true,
        require_literal_separator: true,
        require_literal_leading_dot: false,
    };
    let mut matched = Vec::new();
    for sig in signatures {
        for entry in &entries.entries {
            let hit = match sig.kind {
                SignatureKind::EntryPath => sig
                    .patterns
                    .iter()
                    .filter_map(|p| glob::Pattern::new(p).ok())
                    .any(|p| p.matches_with(entry, opts)),
                SignatureKind::PackagePrefix => entry_as_class_path(entry)
                    .is_some_and(|dotted| sig.patterns.iter().any(|p| prefix_matches(p, &dotted))),
            };
            if hit {
                matched.push((sig.packer_name.clone(), entry.clone()));
            }
        }
    }
    PackingVerdict {
        packed: !matched.is_empty(),
        matched,
    }
}
