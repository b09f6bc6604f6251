use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::guards::{taken_means_match, DeviceGuard};
use crate::frontend::ir::{descriptor_to_dotted, package_of};
use crate::frontend::{Instruction, MethodId, MethodRef, Program};
use crate::graphs::{BlockId, Cfg, EdgeKind, Icfg, PostDom, PostDominators};
use crate::Deadline;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmRegion {
    pub edge: EdgeKind,
    /// `Some(true)` when this arm runs if the device comparison succeeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched: Option<bool>,
    pub method: MethodRef,
    /// Inclusive instruction index ranges, ascending.
    pub ranges: Vec<(usize, usize)>,
}

impl ArmRegion {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|&(a, b)| a..=b)
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    Literal,
    Method,
    Class,
}

/// A piece of text found in region code, with where it was found.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Evidence {
    pub method: MethodRef,
    pub index: usize,
    pub kind: EvidenceKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorSnippet {
    pub guard: DeviceGuard,
    pub region: Vec<ArmRegion>,
    pub reachable_methods: BTreeSet<MethodRef>,
    pub invoked_system_methods: BTreeSet<MethodRef>,
    pub package_names: BTreeSet<String>,
    /// One entry per distinct text, at its earliest location.
    pub evidence: Vec<Evidence>,
    #[serde(default)]
    pub truncated: bool,
}

impl BehaviorSnippet {
    pub fn matched_arm(&self) -> Option<&ArmRegion> {
        self.region.iter().find(|a| a.matched == Some(true))
    }
}

fn arm_blocks(cfg: &Cfg, start: BlockId, cond: BlockId, stop: Option<BlockId>) -> BTreeSet<BlockId> {
    let mut seen = BTreeSet::new();
    if Some(start) == stop || start == cond {
        return seen;
    }
    let mut queue = VecDeque::from([start]);
    seen.insert(start);
    while let Some(b) = queue.pop_front() {
        for e in cfg.successors(b) {
            if Some(e.to) == stop || e.to == cond {
                continue;
            }
            if seen.insert(e.to) {
                queue.push_back(e.to);
            }
        }
    }
    seen
}

fn ranges(cfg: &Cfg, blocks: &BTreeSet<BlockId>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &b in blocks {
        let bb = cfg.blocks[b];
        match out.last_mut() {
            Some(last) if last.1 + 1 == bb.start => last.1 = bb.last(),
            _ => out.push((bb.start, bb.last())),
        }
    }
    out
}

/// Blocks of each branch arm: reachable from the arm's edge without passing
/// the condition's immediate postdominator or re-entering the condition
/// block. Blocks reachable from both arms belong to neither.
pub fn arm_regions(program: &Program, cfg: &Cfg, pdom: &PostDominators, guard: &DeviceGuard) -> Vec<ArmRegion> {
    let site = &guard.site;
    let method = program.method(site.method_id);
    let cond = cfg.block_of(site.branch_instruction);
    let stop = match pdom.immediate(cond) {
        Some(PostDom::Block(b)) => Some(b),
        _ => None,
    };
    let taken_match = taken_means_match(method, site);
    let mut arms: Vec<(EdgeKind, BTreeSet<BlockId>)> = cfg
        .successors(cond)
        .map(|e| (e.kind, arm_blocks(cfg, e.to, cond, stop)))
        .collect();
    if arms.len() == 2 {
        let shared: BTreeSet<BlockId> = arms[0].1.intersection(&arms[1].1).copied().collect();
        for (_, blocks) in &mut arms {
            blocks.retain(|b| !shared.contains(b));
        }
    }
    arms.into_iter()
        .map(|(edge, blocks)| ArmRegion {
            edge,
            matched: taken_match.map(|t| if edge == EdgeKind::BranchTaken { t } else { !t }),
            method: site.method.clone(),
            ranges: ranges(cfg, &blocks),
        })
        .collect()
}

type EvidenceMap = BTreeMap<String, Evidence>;

fn push_evidence(out: &mut EvidenceMap, method: &MethodRef, ins: &Instruction) {
    let mut add = |kind, text: String| {
        let e = Evidence {
            method: method.clone(),
            index: ins.index,
            kind,
            text: text.clone(),
        };
        match out.get_mut(&text) {
            Some(old) if *old <= e => {}
            Some(old) => *old = e,
            None => {
                out.insert(text, e);
            }
        }
    };
    if let Some(l) = &ins.literal {
        add(EvidenceKind::Literal, l.clone());
    }
    if let Some(m) = &ins.method_ref {
        add(EvidenceKind::Method, m.to_string());
        add(EvidenceKind::Method, m.dotted());
        add(EvidenceKind::Class, descriptor_to_dotted(&m.owner));
    }
    if let Some(f) = &ins.field_ref {
        add(EvidenceKind::Class, f.to_string());
        add(EvidenceKind::Class, format!("{}.{}", descriptor_to_dotted(&f.owner), f.name));
    }
    if let Some(t) = &ins.type_ref {
        add(EvidenceKind::Class, t.clone());
        add(EvidenceKind::Class, descriptor_to_dotted(t.trim_start_matches('[')));
    }
}

/// Builds the snippet for a confirmed guard: both arms, the transitive
/// closure of resolved callees invoked from them, and the library calls made
/// along the way. Stops early with `truncated` set when the deadline passes.
pub fn extract_region(
    program: &Program,
    icfg: &Icfg,
    pdom: &PostDominators,
    guard: &DeviceGuard,
    deadline: &Deadline,
) -> BehaviorSnippet {
    let site = &guard.site;
    let cfg = icfg.cfg(site.method_id).expect("guard method has a body");
    let method = program.method(site.method_id);
    let region = arm_regions(program, cfg, pdom, guard);
    let cg = &icfg.call_graph;

    let mut truncated = false;
    let mut evidence = EvidenceMap::new();
    let mut reachable: BTreeSet<MethodId> = BTreeSet::new();
    let mut system = BTreeSet::new();
    let mut packages = BTreeSet::new();
    let mut queue = VecDeque::new();

    let mut visit_call = |caller: MethodId, ins: &Instruction, queue: &mut VecDeque<MethodId>, reachable: &mut BTreeSet<MethodId>| {
        if !ins.opcode.is_invoke() {
            return;
        }
        match cg.edge_at(caller, ins.index).and_then(|e| e.target) {
            Some(t) => {
                if reachable.insert(t) {
                    queue.push_back(t);
                }
            }
            None => {
                if let Some(m) = &ins.method_ref {
                    system.insert(m.clone());
                }
            }
        }
    };

    for arm in &region {
        if !arm.is_empty() {
            packages.insert(package_of(&method.owner));
        }
        for i in arm.indices() {
            let ins = &method.instructions[i];
            push_evidence(&mut evidence, &site.method, ins);
            visit_call(site.method_id, ins, &mut queue, &mut reachable);
        }
    }
    let mut rounds = 0usize;
    while let Some(id) = queue.pop_front() {
        if deadline.expired() {
            truncated = true;
            break;
        }
        rounds += 1;
        debug_assert!(rounds <= program.method_count());
        let m = program.method(id);
        let sig = m.signature();
        packages.insert(package_of(&m.owner));
        for ins in &m.instructions {
            push_evidence(&mut evidence, &sig, ins);
            visit_call(id, ins, &mut queue, &mut reachable);
        }
    }
    let mut evidence: Vec<Evidence> = evidence.into_values().collect();
    evidence.sort();
    BehaviorSnippet {
        guard: guard.clone(),
        region,
        reachable_methods: reachable.iter().map(|id| program.method(*id).signature()).collect(),
        invoked_system_methods: system,
        package_names: packages,
        evidence,
        truncated,
    }
}
