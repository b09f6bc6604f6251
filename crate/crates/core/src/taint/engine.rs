//! Flow-sensitive taint propagation.
//!
//! Within a method, a block-level worklist computes the set of tainted
//! registers before every instruction. Across methods, parameter taint and
//! return-value summaries are propagated through the call graph until
//! nothing changes. Summaries are context-insensitive.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sources::DeviceInfoSource;
use crate::frontend::{MethodIR, MethodId, Opcode, Program, Reg};
use crate::graphs::{CallGraph, Cfg, DefSite, Icfg};
use crate::{Budget, Deadline};

pub type OriginId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Move,
    LibReturn,
    ParamIn,
    CalleeReturn,
    CallerReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChainStep {
    pub kind: StepKind,
    pub method: MethodId,
    pub index: usize,
}

#[derive(Debug)]
struct ChainNode {
    step: ChainStep,
    parent: Chain,
    through_param: bool,
}

/// Persistent list of propagation steps from an origin.
#[derive(Debug, Clone, Default)]
pub struct Chain(Option<Arc<ChainNode>>);

impl Chain {
    pub fn push(&self, step: ChainStep) -> Chain {
        let through_param = step.kind == StepKind::ParamIn || self.through_param();
        Chain(Some(Arc::new(ChainNode {
            step,
            parent: self.clone(),
            through_param,
        })))
    }

    pub fn through_param(&self) -> bool {
        self.0.as_ref().is_some_and(|n| n.through_param)
    }

    pub fn to_vec(&self) -> Vec<ChainStep> {
        let mut out = Vec::new();
        let mut cur = &self.0;
        while let Some(node) = cur {
            out.push(node.step);
            cur = &node.parent.0;
        }
        out.reverse();
        out
    }
}

/// Tainted value: register `reg` defined at `def` carrying `origin`.
pub type Taint = (Reg, DefSite, OriginId);
pub type State = BTreeSet<Taint>;
pub type FactKey = (MethodId, DefSite, Reg, OriginId);

/// How calls are resolved while analyzing one method.
pub(crate) trait CallEnv {
    /// Resolved callee with a body for the invoke at `site`, if any.
    fn target(&self, caller: MethodId, site: usize) -> Option<MethodId>;
    fn return_summary(&self, callee: MethodId) -> Option<&BTreeMap<OriginId, Chain>>;
    fn callee_params(&self, callee: MethodId) -> Option<(u16, u16)>;
}

pub(crate) struct LibraryOnly;

impl CallEnv for LibraryOnly {
    fn target(&self, _: MethodId, _: usize) -> Option<MethodId> {
        None
    }
    fn return_summary(&self, _: MethodId) -> Option<&BTreeMap<OriginId, Chain>> {
        None
    }
    fn callee_params(&self, _: MethodId) -> Option<(u16, u16)> {
        None
    }
}

struct ProgramEnv<'a> {
    program: &'a Program,
    cg: &'a CallGraph,
    summaries: &'a HashMap<MethodId, BTreeMap<OriginId, Chain>>,
}

impl CallEnv for ProgramEnv<'_> {
    fn target(&self, caller: MethodId, site: usize) -> Option<MethodId> {
        self.cg.edge_at(caller, site).and_then(|e| e.target)
    }
    fn return_summary(&self, callee: MethodId) -> Option<&BTreeMap<OriginId, Chain>> {
        self.summaries.get(&callee)
    }
    fn callee_params(&self, callee: MethodId) -> Option<(u16, u16)> {
        let m = self.program.method(callee);
        Some((m.first_param_register(), m.ins))
    }
}

/// Per-method analysis output.
pub(crate) struct MethodOutcome {
    pub before: Vec<Option<State>>,
    pub param_out: Vec<(MethodId, Reg, OriginId, Chain)>,
    pub returns: Vec<(OriginId, Chain)>,
}

pub(crate) struct MethodInput<'a> {
    pub id: MethodId,
    pub method: &'a MethodIR,
    pub cfg: &'a Cfg,
    pub entry: &'a BTreeSet<(Reg, OriginId)>,
    /// Origins introduced right after the instruction at the key, in the given register.
    pub seeds: &'a BTreeMap<usize, Vec<(Reg, OriginId)>>,
}

fn chain_of(facts: &HashMap<FactKey, Chain>, id: MethodId, t: &Taint) -> Chain {
    facts.get(&(id, t.1, t.0, t.2)).cloned().unwrap_or_default()
}

fn transfer(
    input: &MethodInput<'_>,
    env: &dyn CallEnv,
    facts: &mut HashMap<FactKey, Chain>,
    state: &mut State,
    i: usize,
) {
    let ins = &input.method.instructions[i];
    let id = input.id;
    let step = |kind| ChainStep { kind, method: id, index: i };
    let mut gens: Vec<(Reg, OriginId, Chain)> = Vec::new();
    let dst = ins.defined_register();
    if let Some(d) = dst {
        match ins.opcode {
            Opcode::Move => {
                for t in state.iter().filter(|t| t.0 == ins.operands[1]) {
                    gens.push((d, t.2, chain_of(facts, id, t).push(step(StepKind::Move))));
                }
            }
            Opcode::MoveResult => {
                let call = i
                    .checked_sub(1)
                    .map(|p| &input.method.instructions[p])
                    .filter(|p| p.opcode.is_invoke());
                if let Some(call) = call {
                    match env.target(id, call.index) {
                        Some(callee) => {
                            for (o, ch) in env.return_summary(callee).into_iter().flatten() {
                                let kind = if ch.through_param() {
                                    StepKind::CallerReturn
                                } else {
                                    StepKind::CalleeReturn
                                };
                                gens.push((d, *o, ch.push(step(kind))));
                            }
                        }
                        None => {
                            for t in state.iter().filter(|t| call.operands.contains(&t.0)) {
                                gens.push((d, t.2, chain_of(facts, id, t).push(step(StepKind::LibReturn))));
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        state.retain(|t| t.0 != d);
    }
    if let Some(seeds) = input.seeds.get(&i) {
        for &(r, o) in seeds {
            state.retain(|t| !(t.0 == r && t.1 != DefSite::Instr(i)));
            gens.push((r, o, Chain::default()));
        }
    }
    for (r, o, ch) in gens {
        facts.entry((id, DefSite::Instr(i), r, o)).or_insert(ch);
        state.insert((r, DefSite::Instr(i), o));
    }
}

pub(crate) fn analyze_method(input: &MethodInput<'_>, env: &dyn CallEnv, facts: &mut HashMap<FactKey, Chain>) -> MethodOutcome {
    let cfg = input.cfg;
    let nb = cfg.blocks.len();
    let n = input.method.instructions.len();
    let mut block_in: Vec<Option<State>> = vec![None; nb];
    let mut work = BTreeSet::new();
    if nb > 0 {
        block_in[0] = Some(input.entry.iter().map(|&(r, o)| (r, DefSite::Entry, o)).collect());
        work.insert(0);
    }
    while let Some(b) = work.pop_first() {
        let mut state = block_in[b].clone().unwrap_or_default();
        for i in cfg.blocks[b].range() {
            transfer(input, env, facts, &mut state, i);
        }
        for e in cfg.successors(b) {
            let changed = match &mut block_in[e.to] {
                slot @ None => {
                    *slot = Some(state.clone());
                    true
                }
                Some(existing) => {
                    let before = existing.len();
                    existing.extend(state.iter().copied());
                    existing.len() != before
                }
            };
            if changed {
                work.insert(e.to);
            }
        }
    }

    let mut before: Vec<Option<State>> = vec![None; n];
    let mut param_out = Vec::new();
    let mut returns = Vec::new();
    for (b, block) in cfg.blocks.iter().enumerate() {
        let Some(mut state) = block_in[b].clone() else { continue };
        for i in block.range() {
            let ins = &input.method.instructions[i];
            if ins.opcode.is_invoke() {
                if let Some(callee) = env.target(input.id, i) {
                    let (first, words) = env.callee_params(callee).expect("resolved callee");
                    for (k, r) in ins.operands.iter().enumerate().take(words as usize) {
                        for t in state.iter().filter(|t| t.0 == *r) {
                            let ch = chain_of(facts, input.id, t).push(ChainStep {
                                kind: StepKind::ParamIn,
                                method: input.id,
                                index: i,
                            });
                            param_out.push((callee, Reg(first + k as u16), t.2, ch));
                        }
                    }
                }
            }
            if matches!(ins.opcode, Opcode::ReturnObject | Opcode::ReturnValue) {
                for t in state.iter().filter(|t| t.0 == ins.operands[0]) {
                    returns.push((t.2, chain_of(facts, input.id, t)));
                }
            }
            before[i] = Some(state.clone());
            transfer(input, env, facts, &mut state, i);
        }
    }
    MethodOutcome {
        before,
        param_out,
        returns,
    }
}

/// Converged per-method data kept so results can be queried and re-checked.
#[derive(Debug, Clone, Default)]
pub(crate) struct Summaries {
    pub entry: HashMap<MethodId, BTreeSet<(Reg, OriginId)>>,
    pub returns: HashMap<MethodId, BTreeMap<OriginId, Chain>>,
    pub seeds: HashMap<MethodId, BTreeMap<usize, Vec<(Reg, OriginId)>>>,
}

pub(crate) struct Propagation {
    pub facts: HashMap<FactKey, Chain>,
    pub before: HashMap<MethodId, Vec<Option<State>>>,
    pub summaries: Summaries,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn seeds_from_sources(program: &Program, sources: &[DeviceInfoSource]) -> HashMap<MethodId, BTreeMap<usize, Vec<(Reg, OriginId)>>> {
    let mut seeds: HashMap<MethodId, BTreeMap<usize, Vec<(Reg, OriginId)>>> = HashMap::new();
    for (o, s) in sources.iter().enumerate() {
        let (Some(id), Some(r)) = (program.lookup(&s.location.method), s.defined_register) else {
            continue;
        };
        seeds
            .entry(id)
            .or_default()
            .entry(s.definition_index())
            .or_default()
            .push((r, o as OriginId));
    }
    seeds
}

pub(crate) fn run(program: &Program, icfg: &Icfg, sources: &[DeviceInfoSource], budget: &Budget, deadline: &Deadline) -> Propagation {
    let mut summaries = Summaries {
        seeds: seeds_from_sources(program, sources),
        ..Summaries::default()
    };
    let mut facts: HashMap<FactKey, Chain> = HashMap::new();
    let mut before = HashMap::new();
    let mut work: BTreeSet<MethodId> = summaries.seeds.keys().copied().collect();
    let mut iterations = 0;
    let mut converged = true;
    let empty_entry = BTreeSet::new();
    let empty_seeds = BTreeMap::new();
    while let Some(id) = work.pop_first() {
        if iterations >= budget.max_taint_iterations || deadline.expired() {
            converged = false;
            break;
        }
        iterations += 1;
        let Some(cfg) = icfg.cfg(id) else { continue };
        let input = MethodInput {
            id,
            method: program.method(id),
            cfg,
            entry: summaries.entry.get(&id).unwrap_or(&empty_entry),
            seeds: summaries.seeds.get(&id).unwrap_or(&empty_seeds),
        };
        let env = ProgramEnv {
            program,
            cg: &icfg.call_graph,
            summaries: &summaries.returns,
        };
        let outcome = analyze_method(&input, &env, &mut facts);
        for (callee, r, o, ch) in outcome.param_out {
            if summaries.entry.entry(callee).or_default().insert((r, o)) {
                facts.entry((callee, DefSite::Entry, r, o)).or_insert(ch);
                work.insert(callee);
            }
        }
        let mut grew = false;
        let ret = summaries.returns.entry(id).or_default();
        for (o, ch) in outcome.returns {
            if let std::collections::btree_map::Entry::Vacant(slot) = ret.entry(o) {
                slot.insert(ch);
                grew = true;
            }
        }
        if grew {
            for e in icfg.call_graph.callers_of(id) {
                work.insert(e.caller);
            }
        }
        before.insert(id, outcome.before);
    }
    Propagation {
        facts,
        before,
        summaries,
        iterations,
        converged,
    }
}

/// Re-analyzes every method once against converged summaries and counts
/// anything new: facts, parameter taint or return taint.
pub(crate) fn extra_round(program: &Program, icfg: &Icfg, p: &Propagation) -> usize {
    let mut facts = p.facts.clone();
    let before_len = facts.len();
    let mut added = 0;
    let empty_entry = BTreeSet::new();
    let empty_seeds = BTreeMap::new();
    let env = ProgramEnv {
        program,
        cg: &icfg.call_graph,
        summaries: &p.summaries.returns,
    };
    for id in program.method_ids() {
        let Some(cfg) = icfg.cfg(id) else { continue };
        let input = MethodInput {
            id,
            method: program.method(id),
            cfg,
            entry: p.summaries.entry.get(&id).unwrap_or(&empty_entry),
            seeds: p.summaries.seeds.get(&id).unwrap_or(&empty_seeds),
        };
        let outcome = analyze_method(&input, &env, &mut facts);
        added += outcome
            .param_out
            .iter()
            .filter(|(c, r, o, _)| !p.summaries.entry.get(c).is_some_and(|e| e.contains(&(*r, *o))))
            .count();
        let ret = p.summaries.returns.get(&id);
        added += outcome
            .returns
            .iter()
            .filter(|(o, _)| !ret.is_some_and(|r| r.contains_key(o)))
            .count();
    }
    added + facts.len() - before_len
}
