//! Annotated fixture apps and a brute-force reference interpreter for taint.
//!
//! Each fixture lives in `fixtures/<id>/` with a `smali/` tree, a
//! `manifest.json` describing the expected sources, guards, snippets and
//! tainted registers, and optionally an `app.apk` for packer triage.
//!
//! [`oracle_interpret`] recomputes taint by enumerating CFG paths (each
//! instruction visited at most twice per path) and simulating every
//! instruction, iterating parameter and return summaries to a global
//! fixpoint. It shares no code with the taint engine beyond the IR.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{load_program, FrontendError, MethodId, MethodRef, Opcode, Program, Reg};
use crate::rules::Rule;
use crate::taint::{DeviceInfoSource, OriginId};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Load(#[from] FrontendError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("program has {0} instructions, more than the oracle accepts")]
    TooLarge(usize),
    #[error("path enumeration exceeded {0} steps")]
    PathExplosion(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedSource {
    pub kind: String,
    pub method: String,
    pub index: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedGuard {
    pub method: String,
    pub index: usize,
    pub comparison: String,
    /// Database entries the guard matches, e.g. `OPPO`.
    pub identifiers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedSnippet {
    pub method: String,
    pub index: usize,
    pub categories: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reachable_methods: Option<Vec<String>>,
}

fn default_status() -> String {
    "ok".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub fixture_id: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub apk: Option<String>,
    #[serde(default = "default_status")]
    pub expected_status: String,
    /// Whether the fixture takes part in oracle comparison.
    #[serde(default = "yes")]
    pub oracle: bool,
    #[serde(default)]
    pub sources: Vec<ExpectedSource>,
    #[serde(default)]
    pub guards: Vec<ExpectedGuard>,
    #[serde(default)]
    pub snippets: Vec<ExpectedSnippet>,
    /// Method signature to instruction index to tainted registers. Program
    /// points not listed carry no taint.
    #[serde(default)]
    pub oracle_trace: BTreeMap<String, BTreeMap<usize, Vec<String>>>,
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub dir: PathBuf,
    pub manifest: FixtureManifest,
}

impl Fixture {
    pub fn open(dir: &Path) -> Result<Self, FixtureError> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|source| FixtureError::Io {
            path: path.clone(),
            source,
        })?;
        let manifest = serde_json::from_str(&text).map_err(|source| FixtureError::Manifest { path, source })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn id(&self) -> &str {
        &self.manifest.fixture_id
    }

    pub fn smali_root(&self) -> PathBuf {
        self.dir.join("smali")
    }

    pub fn apk_path(&self) -> Option<PathBuf> {
        self.manifest.apk.as_ref().map(|a| self.dir.join(a))
    }

    pub fn load_program(&self) -> Result<Program, FixtureError> {
        Ok(load_program(&self.smali_root())?)
    }

    /// Annotations naming a method or instruction the program lacks.
    pub fn dangling_annotations(&self, program: &Program) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |what: &str, method: &str, index: Option<usize>| {
            let found = program.lookup_str(method).map(|id| program.method(id));
            match (found, index) {
                (None, _) => out.push(format!("{what}: no method {method}")),
                (Some(m), Some(i)) if i >= m.instructions.len() => {
                    out.push(format!("{what}: {method} has no instruction {i}"))
                }
                _ => {}
            }
        };
        let m = &self.manifest;
        for s in &m.sources {
            check("source", &s.method, Some(s.index));
        }
        for g in &m.guards {
            check("guard", &g.method, Some(g.index));
        }
        for s in &m.snippets {
            check("snippet", &s.method, Some(s.index));
            for r in s.reachable_methods.iter().flatten() {
                check("reachable", r, None);
            }
        }
        for (method, points) in &m.oracle_trace {
            for i in points.keys() {
                check("oracle_trace", method, Some(*i));
            }
        }
        out
    }
}

/// The fixture corpus shipped in this crate's source tree.
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Every fixture below `root`, sorted by directory name.
pub fn load_fixtures(root: &Path) -> Result<Vec<Fixture>, FixtureError> {
    let entries = std::fs::read_dir(root).map_err(|source| FixtureError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| Fixture::open(d)).collect()
}

/// Tainted `(register, origin)` pairs before each instruction, per method.
/// Only program points with taint appear.
pub type OracleTrace = BTreeMap<MethodRef, BTreeMap<usize, BTreeSet<(Reg, OriginId)>>>;

/// Drops origins, keeping register names such as `v3`.
pub fn trace_registers(trace: &OracleTrace) -> BTreeMap<String, BTreeMap<usize, Vec<String>>> {
    trace
        .iter()
        .map(|(m, points)| {
            let points = points
                .iter()
                .map(|(i, set)| {
                    let regs: BTreeSet<Reg> = set.iter().map(|(r, _)| *r).collect();
                    (*i, regs.iter().map(|r| r.to_string()).collect())
                })
                .collect();
            (m.to_string(), points)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_instructions: usize,
    pub visits_per_instruction: u8,
    pub max_steps: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self {
            max_instructions: 300,
            visits_per_instruction: 2,
            max_steps: 5_000_000,
        }
    }
}

pub fn oracle_interpret(program: &Program, sources: &[DeviceInfoSource]) -> Result<OracleTrace, OracleError> {
    oracle_interpret_with(program, sources, OracleLimits::default())
}

type Facts = BTreeSet<(Reg, OriginId)>;

struct Oracle<'a> {
    program: &'a Program,
    limits: OracleLimits,
    seeds: HashMap<(MethodId, usize), Vec<(Reg, OriginId)>>,
    entry: HashMap<MethodId, Facts>,
    returns: HashMap<MethodId, BTreeSet<OriginId>>,
    steps: usize,
}

/// Walks the superclass chain from the reference's owner; the first class
/// declaring the method decides.
fn oracle_resolve(program: &Program, r: &MethodRef) -> Option<MethodId> {
    let mut owner = r.owner.clone();
    for _ in 0..64 {
        let class = program.class(&owner)?;
        if let Some(m) = class.methods.iter().find(|m| m.name == r.name && m.descriptor == r.descriptor) {
            if m.is_abstract_or_native {
                return None;
            }
            return program.lookup(&MethodRef::new(&class.class_name, &m.name, &m.descriptor));
        }
        owner = class.super_name.clone()?;
    }
    None
}

struct Walk {
    before: Vec<Facts>,
    params: Vec<(MethodId, Reg, OriginId)>,
    returns: BTreeSet<OriginId>,
    visits: Vec<u8>,
}

impl Oracle<'_> {
    fn successors(&self, id: MethodId, i: usize) -> Vec<usize> {
        let m = self.program.method(id);
        let ins = &m.instructions[i];
        let next = (i + 1 < m.instructions.len()).then_some(i + 1);
        match ins.opcode {
            Opcode::Goto => ins.branch_target.into_iter().collect(),
            Opcode::IfEqz | Opcode::IfNez | Opcode::IfEq | Opcode::IfNe => {
                let mut v: Vec<usize> = ins.branch_target.into_iter().collect();
                if let Some(n) = next {
                    if !v.contains(&n) {
                        v.push(n);
                    }
                }
                v
            }
            Opcode::ReturnVoid | Opcode::ReturnObject | Opcode::ReturnValue => Vec::new(),
            _ => next.into_iter().collect(),
        }
    }

    fn step(&self, id: MethodId, i: usize, state: &Facts) -> Facts {
        let m = self.program.method(id);
        let ins = &m.instructions[i];
        let of = |r: Reg| state.iter().filter(move |(x, _)| *x == r).map(|(_, o)| *o);
        let mut out = state.clone();
        let written = if ins.opcode.defines_first_operand() { ins.operands.first().copied() } else { None };
        if let Some(d) = written {
            let incoming: Vec<OriginId> = match ins.opcode {
                Opcode::Move => of(ins.operands[1]).collect(),
                Opcode::MoveResult if i > 0 && m.instructions[i - 1].opcode.is_invoke() => {
                    let call = &m.instructions[i - 1];
                    match call.method_ref.as_ref().and_then(|r| oracle_resolve(self.program, r)) {
                        Some(callee) => self.returns.get(&callee).into_iter().flatten().copied().collect(),
                        None => call.operands.iter().flat_map(|r| of(*r)).collect(),
                    }
                }
                _ => Vec::new(),
            };
            out.retain(|(r, _)| *r != d);
            out.extend(incoming.into_iter().map(|o| (d, o)));
        }
        if let Some(seeds) = self.seeds.get(&(id, i)) {
            out.extend(seeds.iter().copied());
        }
        out
    }

    fn observe(&self, id: MethodId, i: usize, state: &Facts, walk: &mut Walk) {
        let m = self.program.method(id);
        let ins = &m.instructions[i];
        walk.before[i].extend(state.iter().copied());
        if ins.opcode.is_invoke() {
            if let Some(callee) = ins.method_ref.as_ref().and_then(|r| oracle_resolve(self.program, r)) {
                let cm = self.program.method(callee);
                let first = cm.registers - cm.ins;
                for (k, r) in ins.operands.iter().enumerate().take(cm.ins as usize) {
                    for (x, o) in state {
                        if x == r {
                            walk.params.push((callee, Reg(first + k as u16), *o));
                        }
                    }
                }
            }
        }
        if matches!(ins.opcode, Opcode::ReturnObject | Opcode::ReturnValue) {
            walk.returns.extend(state.iter().filter(|(r, _)| *r == ins.operands[0]).map(|(_, o)| *o));
        }
    }

    fn dfs(&mut self, id: MethodId, i: usize, state: Facts, walk: &mut Walk) -> Result<(), OracleError> {
        if walk.visits[i] >= self.limits.visits_per_instruction {
            return Ok(());
        }
        self.steps += 1;
        if self.steps > self.limits.max_steps {
            return Err(OracleError::PathExplosion(self.limits.max_steps));
        }
        walk.visits[i] += 1;
        self.observe(id, i, &state, walk);
        let after = self.step(id, i, &state);
        for s in self.successors(id, i) {
            self.dfs(id, s, after.clone(), walk)?;
        }
        walk.visits[i] -= 1;
        Ok(())
    }

    fn walk_method(&mut self, id: MethodId) -> Result<Walk, OracleError> {
        let n = self.program.method(id).instructions.len();
        let mut walk = Walk {
            before: vec![Facts::new(); n],
            params: Vec::new(),
            returns: BTreeSet::new(),
            visits: vec![0; n],
        };
        if n > 0 {
            let entry = self.entry.get(&id).cloned().unwrap_or_default();
            self.dfs(id, 0, entry, &mut walk)?;
        }
        Ok(walk)
    }
}

pub fn oracle_interpret_with(
    program: &Program,
    sources: &[DeviceInfoSource],
    limits: OracleLimits,
) -> Result<OracleTrace, OracleError> {
    let total = program.instruction_count();
    if total > limits.max_instructions {
        return Err(OracleError::TooLarge(total));
    }
    let mut seeds: HashMap<(MethodId, usize), Vec<(Reg, OriginId)>> = HashMap::new();
    for (o, s) in sources.iter().enumerate() {
        let Some(reg) = s.defined_register else { continue };
        let Some(id) = program.lookup(&s.location.method) else { continue };
        let at = match s.kind {
            crate::taint::SourceKind::BuildFieldRead => s.location.index,
            _ => s.location.index + 1,
        };
        seeds.entry((id, at)).or_default().push((reg, o as OriginId));
    }
    let mut oracle = Oracle {
        program,
        limits,
        seeds,
        entry: HashMap::new(),
        returns: HashMap::new(),
        steps: 0,
    };
    let ids: Vec<MethodId> = program.method_ids().filter(|id| program.method(*id).has_body()).collect();
    loop {
        let mut changed = false;
        let mut trace = OracleTrace::new();
        for &id in &ids {
            let walk = oracle.walk_method(id)?;
            for (callee, r, o) in walk.params {
                changed |= oracle.entry.entry(callee).or_default().insert((r, o));
            }
            let ret = oracle.returns.entry(id).or_default();
            for o in walk.returns {
                changed |= ret.insert(o);
            }
            let points: BTreeMap<usize, Facts> =
                walk.before.into_iter().enumerate().filter(|(_, s)| !s.is_empty()).collect();
            if !points.is_empty() {
                trace.insert(program.method(id).signature(), points);
            }
        }
        if !changed {
            return Ok(trace);
        }
    }
}

/// Smali source of a call web: `methods` static methods spread over classes
/// of 100, each comparing its parameter with a brand and calling `fanout`
/// others in the guarded arm. The entry method passes `Build.BRAND` in.
pub fn call_web_sources(methods: usize, fanout: usize) -> Vec<String> {
    const PER_CLASS: usize = 100;
    let name = |k: usize| (format!("Lweb/C{};", k / PER_CLASS), format!("m{k}"));
    let mut classes: Vec<String> = Vec::new();
    let mut body = String::new();
    for k in 0..methods {
        if k % PER_CLASS == 0 {
            if !body.is_empty() {
                classes.push(std::mem::take(&mut body));
            }
            body = format!(".class public {}\n.super Ljava/lang/Object;\n\n", name(k).0);
        }
        body.push_str(&format!(
            ".method public static {}(Ljava/lang/String;)Ljava/lang/String;\n    .registers 4\n    const-string v0, \"samsung\"\n    invoke-virtual {{p0, v0}}, Ljava/lang/String;->equals(Ljava/lang/Object;)Z\n    move-result v1\n    if-eqz v1, :done\n",
            name(k).1
        ));
        for j in 0..fanout {
            let t = (k * 7 + j * 131 + 1) % methods;
            let (c, m) = name(t);
            body.push_str(&format!(
                "    invoke-static {{p0}}, {c}->{m}(Ljava/lang/String;)Ljava/lang/String;\n    move-result-object v2\n"
            ));
        }
        body.push_str("    :done\n    return-object p0\n.end method\n\n");
    }
    if !body.is_empty() {
        classes.push(body);
    }
    let (c0, m0) = name(0);
    classes.push(format!(
        ".class public Lweb/Main;\n.super Ljava/lang/Object;\n\n.method public static main()V\n    .registers 2\n    sget-object v0, Landroid/os/Build;->BRAND:Ljava/lang/String;\n    invoke-static {{v0}}, {c0}->{m0}(Ljava/lang/String;)Ljava/lang/String;\n    move-result-object v1\n    return-void\n.end method\n"
    ));
    classes
}

pub fn call_web(methods: usize, fanout: usize) -> Result<Program, FrontendError> {
    let sources = call_web_sources(methods, fanout);
    Program::from_sources(sources.iter().map(String::as_str))
}

/// How a rule's keyword is planted in a generated smali app.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeywordCarrier {
    /// A `const-string` with the keyword inside the guarded arm.
    Literal,
    /// A `new-instance` of the class the keyword names.
    Class,
}

/// Whether a keyword reads as a dotted Java class or package name.
pub fn names_class(keyword: &str) -> bool {
    let segs: Vec<&str> = keyword.split('.').collect();
    segs.len() >= 2
        && segs.iter().all(|s| {
            let mut cs = s.chars();
            cs.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && cs.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$')
        })
}

fn smali_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// A one-class app whose only device guard (`Build.BRAND` equals
/// `"samsung"`) protects code carrying `rule.keyword`.
pub fn rule_fixture_source(rule: &Rule, carrier: KeywordCarrier) -> String {
    let planted = match carrier {
        KeywordCarrier::Literal => format!("    const-string v2, \"{}\"\n", smali_escape(&rule.keyword)),
        KeywordCarrier::Class => format!("    new-instance v2, L{};\n", rule.keyword.replace('.', "/")),
    };
    format!(
        ".class public Lsmoke/Probe;\n.super Ljava/lang/Object;\n\n.method public static run()V\n    .registers 3\n    sget-object v0, Landroid/os/Build;->BRAND:Ljava/lang/String;\n    const-string v1, \"samsung\"\n    invoke-virtual {{v0, v1}}, Ljava/lang/String;->equals(Ljava/lang/Object;)Z\n    move-result v1\n    if-eqz v1, :end\n{planted}    :end\n    return-void\n.end method\n"
    )
}
