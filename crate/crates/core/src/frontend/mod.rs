//! Input side of the analyzer: APK entry listing for packer triage and the
//! smali frontend producing the typed [`Program`].

pub mod apk;
pub mod ir;
pub mod smali;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use apk::{
    default_packer_signatures, detect_packing, list_apk_entries, parse_packer_signatures, ApkEntryList,
    PackerSignature, PackingVerdict, SignatureKind,
};
pub use ir::{ClassDef, FieldDef, FieldRef, Instruction, MethodIR, MethodRef, Opcode, Reg};
pub use smali::{parse_smali_class, print_class};

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("{line}:{column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}: unsupported directive `{directive}`")]
    UnsupportedDirective { line: usize, directive: String },
    #[error("{0}: not a ZIP archive")]
    NotZip(PathBuf),
    #[error("{path}: truncated or corrupt archive ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("packer signatures line {line}: {message}")]
    BadSignature { line: usize, message: String },
    #[error("smali root {0} does not exist")]
    RootMissing(PathBuf),
    #[error("no classes could be loaded from {0}")]
    NoClasses(PathBuf),
    #[error("duplicate class {0}")]
    DuplicateClass(String),
    #[error("invalid method: {0}")]
    InvalidMethod(String),
}

/// Non-fatal load problem, emitted as one JSON object per line on stderr by the CLI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn from_error(file: &Path, err: &FrontendError) -> Self {
        let (kind, line, column) = match err {
            FrontendError::Syntax { line, column, .. } => ("syntax", Some(*line), Some(*column)),
            FrontendError::UnsupportedDirective { line, .. } => ("unsupported_directive", Some(*line), None),
            FrontendError::DuplicateClass(_) => ("duplicate_class", None, None),
            FrontendError::InvalidMethod(_) => ("invalid_method", None, None),
            _ => ("io", None, None),
        };
        let message = match err {
            FrontendError::Syntax { message, .. } => message.clone(),
            other => other.to_string(),
        };
        Self {
            file: file.display().to_string(),
            kind: kind.into(),
            line,
            column,
            message,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("diagnostic serializes")
    }
}

/// Dense handle for a method of a loaded [`Program`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MethodId(pub u32);

/// Immutable set of loaded classes with a method table.
#[derive(Debug, Clone)]
pub struct Program {
    classes: Vec<ClassDef>,
    index: HashMap<String, usize>,
    methods: Vec<(u32, u32)>,
    by_sig: HashMap<MethodRef, MethodId>,
    diagnostics: Vec<Diagnostic>,
}

impl Program {
    pub fn from_classes(classes: Vec<ClassDef>) -> Result<Self, FrontendError> {
        let mut program = Program {
            classes: Vec::with_capacity(classes.len()),
            index: HashMap::new(),
            methods: Vec::new(),
            by_sig: HashMap::new(),
            diagnostics: Vec::new(),
        };
        for class in classes {
            program.add_class(class)?;
        }
        Ok(program)
    }

    /// Parses each text as one class. Convenient for tests and small inputs.
    pub fn from_sources<'a>(sources: impl IntoIterator<Item = &'a str>) -> Result<Self, FrontendError> {
        let classes = sources.into_iter().map(parse_smali_class).collect::<Result<Vec<_>, _>>()?;
        Self::from_classes(classes)
    }

    fn add_class(&mut self, class: ClassDef) -> Result<(), FrontendError> {
        if self.index.contains_key(&class.class_name) {
            return Err(FrontendError::DuplicateClass(class.class_name));
        }
        for m in &class.methods {
            m.validate().map_err(FrontendError::InvalidMethod)?;
        }
        let ci = self.classes.len();
        for (mi, m) in class.methods.iter().enumerate() {
            let id = MethodId(self.methods.len() as u32);
            self.methods.push((ci as u32, mi as u32));
            self.by_sig.insert(m.signature(), id);
        }
        self.index.insert(class.class_name.clone(), ci);
        self.classes.push(class);
        Ok(())
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn class(&self, name: &str) -> Option<&ClassDef> {
        self.index.get(name).map(|&i| &self.classes[i])
    }

    pub fn method(&self, id: MethodId) -> &MethodIR {
        let (c, m) = self.methods[id.0 as usize];
        &self.classes[c as usize].methods[m as usize]
    }

    pub fn method_count(&self) -> usize {
        self.methods.len()
    }

    pub fn method_ids(&self) -> impl Iterator<Item = MethodId> + '_ {
        (0..self.methods.len() as u32).map(MethodId)
    }

    pub fn lookup(&self, sig: &MethodRef) -> Option<MethodId> {
        self.by_sig.get(sig).copied()
    }

    /// Looks a method up by its `Lowner;->name(desc)ret` rendering.
    pub fn lookup_str(&self, sig: &str) -> Option<MethodId> {
        sig.parse::<MethodRef>().ok().and_then(|s| self.lookup(&s))
    }

    pub fn instruction_count(&self) -> usize {
        self.method_ids().map(|id| self.method(id).instructions.len()).sum()
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }
}

fn smali_files(root: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "smali"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    files
}

/// Loads every `.smali` file below `root`. Files that fail to parse become
/// diagnostics instead of aborting the load.
pub fn load_program(root: &Path) -> Result<Program, FrontendError> {
    if !root.is_dir() {
        return Err(FrontendError::RootMissing(root.to_path_buf()));
    }
    let files = smali_files(root);
    let parsed: Vec<(PathBuf, Result<ClassDef, FrontendError>)> = files
        .into_par_iter()
        .map(|path| {
            let res = std::fs::read(&path)
                .map_err(|source| FrontendError::Io {
                    path: path.clone(),
                    source,
                })
                .and_then(|bytes| {
                    String::from_utf8(bytes).map_err(|e| FrontendError::Io {
                        path: path.clone(),
                        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
                    })
                })
                .and_then(|text| parse_smali_class(&text));
            (path, res)
        })
        .collect();

    let mut program = Program::from_classes(Vec::new())?;
    let mut diagnostics = Vec::new();
    for (path, res) in parsed {
        let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
        if let Err(err) = res.and_then(|class| program.add_class(class)) {
            diagnostics.push(Diagnostic::from_error(&rel, &err));
        }
    }
    program.diagnostics = diagnostics;
    if program.classes.is_empty() {
        return Err(FrontendError::NoClasses(root.to_path_buf()));
    }
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class_src(name: &str) -> String {
        format!(".class public {name}\n.super Ljava/lang/Object;\n.method public static f()V\n    .registers 1\n    return-void\n.end method\n")
    }

    #[test]
    fn load_collects_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("com/a")).unwrap();
        std::fs::write(dir.path().join("com/a/A.smali"), class_src("Lcom/a/A;")).unwrap();
        std::fs::write(dir.path().join("com/a/B.smali"), class_src("Lcom/a/B;")).unwrap();
        std::fs::write(dir.path().join("com/a/Bad.smali"), ".class public Lcom/a/Bad;\n.method broken\n").unwrap();
        let p = load_program(dir.path()).unwrap();
        assert_eq!(p.classes().len(), 2);
        assert_eq!(p.diagnostics().len(), 1);
        assert_eq!(p.diagnostics()[0].kind, "syntax");
        let line = p.diagnostics()[0].to_json_line();
        assert!(line.starts_with('{') && !line.contains('\n'));
    }

    #[test]
    fn duplicate_class_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("A.smali"), class_src("Lcom/a/A;")).unwrap();
        std::fs::write(dir.path().join("A2.smali"), class_src("Lcom/a/A;")).unwrap();
        let p = load_program(dir.path()).unwrap();
        assert_eq!(p.classes().len(), 1);
        assert_eq!(p.diagnostics()[0].kind, "duplicate_class");
    }

    #[test]
    fn empty_and_missing_roots() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_program(dir.path()), Err(FrontendError::NoClasses(_))));
        assert!(matches!(
            load_program(&dir.path().join("nope")),
            Err(FrontendError::RootMissing(_))
        ));
    }

    #[test]
    fn lookup_by_signature() {
        let p = Program::from_sources([class_src("Lcom/a/A;").as_str()]).unwrap();
        let id = p.lookup_str("Lcom/a/A;->f()V").unwrap();
        assert_eq!(p.method(id).name, "f");
        assert_eq!(p.instruction_count(), 1);
    }
}
