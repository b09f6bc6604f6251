//! Device-information sources and their propagation.
//!
//! Sources are reads of `android.os.Build` fields and `SystemProperties.get`
//! calls (direct or reflective). Taint moves through register copies, through
//! the return value of any library call that receives a tainted argument or
//! receiver, into the parameters of resolved callees, and back to every
//! caller of a method that returns a tainted value. Heap locations are not
//! tracked.

mod consts;
mod engine;
mod sources;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use consts::{AbsVal, ConstValues};
pub use engine::{Chain, ChainStep, OriginId, StepKind};
pub use sources::{find_sources, DeviceInfoSource, Location, SourceKind, BUILD_CLASS, SYSPROP_CLASS, UNKNOWN_KEY};

use crate::frontend::{MethodIR, MethodId, MethodRef, Program, Reg};
use crate::graphs::{Cfg, DefSite, Icfg};
use crate::{Budget, Deadline};
use engine::{analyze_method, LibraryOnly, MethodInput, Propagation, State};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintFact {
    pub method: MethodRef,
    pub method_id: MethodId,
    pub register: Reg,
    pub def_site: DefSite,
    /// First and last instruction index the fact covers: its definition (0
    /// for method entry) up to the furthest point it still holds.
    pub valid_range: (usize, usize),
    /// Index into [`TaintResult::sources`].
    pub origin: OriginId,
    pub chain: Vec<ChainStep>,
    /// Instructions reading the tainted register while the fact holds.
    pub uses: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TaintResult {
    pub facts: Vec<TaintFact>,
    pub sources: Vec<DeviceInfoSource>,
    pub iterations: usize,
    pub converged: bool,
    propagation: PropagationHandle,
}

#[derive(Clone)]
struct PropagationHandle(std::sync::Arc<Propagation>);

impl std::fmt::Debug for PropagationHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Propagation { .. }")
    }
}

impl TaintResult {
    /// Tainted `(register, origin)` pairs before instruction `index` of
    /// `method`. Empty for methods never reached by taint.
    pub fn tainted_at(&self, method: MethodId, index: usize) -> BTreeSet<(Reg, OriginId)> {
        self.propagation
            .0
            .before
            .get(&method)
            .and_then(|v| v.get(index))
            .and_then(Option::as_ref)
            .map(|s| s.iter().map(|t| (t.0, t.2)).collect())
            .unwrap_or_default()
    }

    pub fn is_tainted(&self, method: MethodId, index: usize, reg: Reg) -> bool {
        self.propagation
            .0
            .before
            .get(&method)
            .and_then(|v| v.get(index))
            .and_then(Option::as_ref)
            .is_some_and(|s| s.iter().any(|t| t.0 == reg))
    }

    /// Methods with at least one tainted program point, in id order.
    pub fn tainted_methods(&self) -> Vec<MethodId> {
        let mut ids: Vec<MethodId> = self
            .propagation
            .0
            .before
            .iter()
            .filter(|(_, v)| v.iter().flatten().any(|s| !s.is_empty()))
            .map(|(id, _)| *id)
            .collect();
        ids.sort();
        ids
    }

    pub fn facts_in(&self, method: MethodId) -> impl Iterator<Item = &TaintFact> + '_ {
        self.facts.iter().filter(move |f| f.method_id == method)
    }

    /// Origins that the method's return value may carry.
    pub fn return_origins(&self, method: MethodId) -> BTreeSet<OriginId> {
        self.propagation
            .0
            .summaries
            .returns
            .get(&method)
            .map(|r| r.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Number of facts, parameter taints or return taints that one more
    /// propagation round over every method would add. Zero on a fixpoint.
    pub fn extra_round(&self, program: &Program, icfg: &Icfg) -> usize {
        engine::extra_round(program, icfg, &self.propagation.0)
    }

    /// Identity of every fact independent of source numbering.
    pub fn fact_keys(&self) -> BTreeSet<(MethodRef, DefSite, Reg, Location)> {
        self.facts
            .iter()
            .map(|f| {
                (
                    f.method.clone(),
                    f.def_site,
                    f.register,
                    self.sources[f.origin as usize].location.clone(),
                )
            })
            .collect()
    }

    /// Writes one JSON object per fact.
    pub fn dump_jsonl(&self, program: &Program, out: &mut dyn Write) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Step {
            step: StepKind,
            method: String,
            index: usize,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            method: String,
            register: String,
            range: (usize, usize),
            origin: &'a DeviceInfoSource,
            chain: Vec<Step>,
        }
        for f in &self.facts {
            let line = Line {
                method: f.method.to_string(),
                register: f.register.to_string(),
                range: f.valid_range,
                origin: &self.sources[f.origin as usize],
                chain: f
                    .chain
                    .iter()
                    .map(|s| Step {
                        step: s.kind,
                        method: program.method(s.method).signature().to_string(),
                        index: s.index,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn materialize(
    facts: &HashMap<engine::FactKey, Chain>,
    before: &HashMap<MethodId, Vec<Option<State>>>,
    sig: impl Fn(MethodId) -> (MethodRef, Vec<Vec<Reg>>),
) -> Vec<TaintFact> {
    let mut reach: HashMap<engine::FactKey, (usize, Vec<usize>)> = HashMap::new();
    let mut sigs: HashMap<MethodId, (MethodRef, Vec<Vec<Reg>>)> = HashMap::new();
    for (&id, points) in before {
        let (_, used) = sigs.entry(id).or_insert_with(|| sig(id));
        for (i, s) in points.iter().enumerate() {
            let Some(s) = s else { continue };
            for t in s {
                let e = reach.entry((id, t.1, t.0, t.2)).or_insert((0, Vec::new()));
                e.0 = e.0.max(i);
                if used[i].contains(&t.0) {
                    e.1.push(i);
                }
            }
        }
    }
    let mut out: Vec<TaintFact> = facts
        .iter()
        .map(|(key, chain)| {
            let (id, def, reg, origin) = *key;
            let sig_entry = sigs.entry(id).or_insert_with(|| sig(id));
            let start = match def {
                DefSite::Entry => 0,
                DefSite::Instr(i) => i,
            };
            let (end, uses) = reach.get(key).cloned().unwrap_or((start, Vec::new()));
            TaintFact {
                method: sig_entry.0.clone(),
                method_id: id,
                register: reg,
                def_site: def,
                valid_range: (start, end.max(start)),
                origin,
                chain: chain.to_vec(),
                uses,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.method_id, a.def_site, a.register, a.origin).cmp(&(b.method_id, b.def_site, b.register, b.origin))
    });
    out
}

fn used_per_instruction(m: &MethodIR) -> Vec<Vec<Reg>> {
    m.instructions
        .iter()
        .map(|i| crate::graphs::used_registers(i).to_vec())
        .collect()
}

/// Interprocedural propagation from `sources` to a fixpoint, or until the
/// iteration cap or deadline stops it (`converged == false`).
pub fn propagate_inter(
    program: &Program,
    icfg: &Icfg,
    sources: &[DeviceInfoSource],
    budget: &Budget,
    deadline: &Deadline,
) -> TaintResult {
    let p = engine::run(program, icfg, sources, budget, deadline);
    let facts = materialize(&p.facts, &p.before, |id| {
        let m = program.method(id);
        (m.signature(), used_per_instruction(m))
    });
    TaintResult {
        facts,
        sources: sources.to_vec(),
        iterations: p.iterations,
        converged: p.converged,
        propagation: PropagationHandle(std::sync::Arc::new(p)),
    }
}

/// A fact to start intraprocedural propagation from. `at == None` means the
/// register is tainted on entry; otherwise the taint is defined by the
/// instruction at that index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntraSeed {
    pub at: Option<usize>,
    pub register: Reg,
    pub origin: OriginId,
}

/// Propagates `seeds` through one method, treating every call as a library
/// call. Chain steps name the method as `MethodId(0)`.
pub fn propagate_intra(method: &MethodIR, cfg: &Cfg, seeds: &[IntraSeed]) -> Vec<TaintFact> {
    let id = MethodId(0);
    let mut entry = BTreeSet::new();
    let mut at: BTreeMap<usize, Vec<(Reg, OriginId)>> = BTreeMap::new();
    let mut facts = HashMap::new();
    for s in seeds {
        match s.at {
            None => {
                entry.insert((s.register, s.origin));
                facts.insert((id, DefSite::Entry, s.register, s.origin), Chain::default());
            }
            Some(i) => at.entry(i).or_default().push((s.register, s.origin)),
        }
    }
    let input = MethodInput {
        id,
        method,
        cfg,
        entry: &entry,
        seeds: &at,
    };
    let outcome = analyze_method(&input, &LibraryOnly, &mut facts);
    let before = HashMap::from([(id, outcome.before)]);
    materialize(&facts, &before, |_| (method.signature(), used_per_instruction(method)))
}
