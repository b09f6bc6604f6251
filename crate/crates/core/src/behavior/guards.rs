use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::device_db::{match_identifier, DeviceInfoDB, IdentifierMatch};
use crate::frontend::{MethodIR, MethodId, MethodRef, Opcode, Program, Reg};
use crate::graphs::{Cfg, DefSite, ReachingDefs};
use crate::taint::TaintResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    StringEquals,
    EqualsIgnoreCase,
    StartsWith,
    EndsWith,
    Contains,
    CompareTo,
    ReferenceEq,
}

impl Comparison {
    /// Kind of comparison performed by a call to `m`, if it is one.
    pub fn of_call(m: &MethodRef) -> Option<Comparison> {
        let string_like = matches!(
            m.owner.as_str(),
            "Ljava/lang/String;" | "Ljava/lang/CharSequence;" | "Ljava/lang/Object;"
        );
        match (m.owner.as_str(), m.name.as_str()) {
            (_, "equals") if string_like => Some(Comparison::StringEquals),
            ("Lkotlin/jvm/internal/Intrinsics;", "areEqual")
            | ("Landroid/text/TextUtils;", "equals")
            | ("Ljava/util/Objects;", "equals") => Some(Comparison::StringEquals),
            (_, "equalsIgnoreCase") if string_like => Some(Comparison::EqualsIgnoreCase),
            (_, "startsWith") if string_like => Some(Comparison::StartsWith),
            (_, "endsWith") if string_like => Some(Comparison::EndsWith),
            (_, "contains") if string_like => Some(Comparison::Contains),
            (_, "compareTo" | "compareToIgnoreCase") if string_like => Some(Comparison::CompareTo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperandSide {
    Receiver,
    Argument,
    Both,
}

impl OperandSide {
    fn from_flags(first: bool, rest: bool) -> Option<Self> {
        match (first, rest) {
            (true, true) => Some(OperandSide::Both),
            (true, false) => Some(OperandSide::Receiver),
            (false, true) => Some(OperandSide::Argument),
            (false, false) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardSite {
    pub method: MethodRef,
    pub method_id: MethodId,
    pub branch_instruction: usize,
    pub comparison: Comparison,
    pub tainted_operand_side: OperandSide,
    pub condition_register: Reg,
    /// Index of the comparison call feeding the condition, if any.
    pub comparison_call: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceGuard {
    pub site: GuardSite,
    pub identifiers: Vec<IdentifierMatch>,
    pub guard_strings: Vec<String>,
}

/// Follows single-definition `move` chains from `reg` at `index` to a
/// `move-result` of a comparison call. Returns the call's index.
fn comparison_feeding(method: &MethodIR, rd: &ReachingDefs, index: usize, reg: Reg) -> Option<usize> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![(index, reg)];
    let mut found = None;
    while let Some((at, r)) = stack.pop() {
        for d in rd.defs_at(at, r) {
            let DefSite::Instr(k) = d else { continue };
            if !seen.insert(k) {
                continue;
            }
            let ins = &method.instructions[k];
            match ins.opcode {
                Opcode::Move => stack.push((k, ins.operands[1])),
                Opcode::MoveResult => {
                    let call = k.checked_sub(1).map(|p| &method.instructions[p]);
                    if let Some(call) = call.filter(|c| c.opcode.is_invoke()) {
                        if call.method_ref.as_ref().and_then(Comparison::of_call).is_some() {
                            found = Some(found.map_or(call.index, |f: usize| f.min(call.index)));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    found
}

/// Branches whose condition depends on device information in one method.
pub fn find_guard_sites_in(program: &Program, id: MethodId, rd: &ReachingDefs, taint: &TaintResult) -> Vec<GuardSite> {
    let method = program.method(id);
    let mut out = Vec::new();
    for ins in method.instructions.iter().filter(|i| i.opcode.is_conditional()) {
        let regs = &ins.operands;
        let tainted: Vec<bool> = regs.iter().map(|r| taint.is_tainted(id, ins.index, *r)).collect();
        let call = regs
            .iter()
            .filter_map(|r| comparison_feeding(method, rd, ins.index, *r))
            .min();
        let call_side = call.and_then(|c| {
            let ci = &method.instructions[c];
            let flags: Vec<bool> = ci.operands.iter().map(|r| taint.is_tainted(id, c, *r)).collect();
            OperandSide::from_flags(flags.first().copied().unwrap_or(false), flags.iter().skip(1).any(|b| *b))
        });
        let (comparison, side) = match (call, call_side) {
            (Some(c), Some(side)) => {
                let kind = method.instructions[c]
                    .method_ref
                    .as_ref()
                    .and_then(Comparison::of_call)
                    .expect("comparison call");
                (kind, side)
            }
            _ => {
                let Some(side) = OperandSide::from_flags(tainted[0], tainted.iter().skip(1).any(|b| *b)) else {
                    continue;
                };
                (Comparison::ReferenceEq, side)
            }
        };
        let cond_reg = regs
            .iter()
            .zip(&tainted)
            .find(|(_, t)| **t)
            .map_or(regs[0], |(r, _)| *r);
        out.push(GuardSite {
            method: method.signature(),
            method_id: id,
            branch_instruction: ins.index,
            comparison,
            tainted_operand_side: side,
            condition_register: cond_reg,
            comparison_call: if comparison == Comparison::ReferenceEq { None } else { call },
        });
    }
    out
}

/// Every branch in the program whose condition depends on device information.
pub fn find_guard_sites(program: &Program, icfg: &crate::graphs::Icfg, taint: &TaintResult) -> Vec<GuardSite> {
    let mut out = Vec::new();
    for id in taint.tainted_methods() {
        let Some(cfg) = icfg.cfg(id) else { continue };
        let rd = ReachingDefs::compute(program.method(id), cfg);
        out.extend(find_guard_sites_in(program, id, &rd, taint));
    }
    out
}

/// Literals tied to a guard: (i) constants flowing into the compared
/// operands through copies and call results (plus constant static field
/// initializers), then (ii) constants defined in the condition block or in
/// any block holding a definition on those chains.
pub fn collect_guard_strings(program: &Program, site: &GuardSite, cfg: &Cfg, rd: &ReachingDefs) -> Vec<String> {
    let method = program.method(site.method_id);
    let branch = &method.instructions[site.branch_instruction];
    let mut roots: Vec<(usize, Reg)> = branch.operands.iter().map(|r| (branch.index, *r)).collect();
    if let Some(c) = site.comparison_call {
        roots.extend(method.instructions[c].operands.iter().map(|r| (c, *r)));
    }
    let mut operand_lits: Vec<(usize, String)> = Vec::new();
    let mut chain_blocks = BTreeSet::from([cfg.block_of(branch.index)]);
    let mut seen = BTreeSet::new();
    let mut stack = roots;
    while let Some((at, r)) = stack.pop() {
        for d in rd.defs_at(at, r) {
            let DefSite::Instr(k) = d else { continue };
            if !seen.insert(k) {
                continue;
            }
            chain_blocks.insert(cfg.block_of(k));
            let ins = &method.instructions[k];
            match ins.opcode {
                Opcode::ConstString => {
                    if let Some(l) = &ins.literal {
                        operand_lits.push((k, l.clone()));
                    }
                }
                Opcode::Move => stack.push((k, ins.operands[1])),
                Opcode::MoveResult => {
                    if let Some(call) = k.checked_sub(1).map(|p| &method.instructions[p]).filter(|c| c.opcode.is_invoke()) {
                        chain_blocks.insert(cfg.block_of(call.index));
                        stack.extend(call.operands.iter().map(|r| (call.index, *r)));
                    }
                }
                Opcode::StaticGet => {
                    let init = ins.field_ref.as_ref().and_then(|f| {
                        program
                            .class(&f.owner)
                            .and_then(|c| c.find_field(&f.name))
                            .and_then(|fd| fd.initial.clone())
                    });
                    if let Some(s) = init {
                        operand_lits.push((k, s));
                    }
                }
                _ => {}
            }
        }
    }
    operand_lits.sort();
    let mut block_lits: Vec<(usize, String)> = Vec::new();
    for b in chain_blocks {
        for i in cfg.blocks[b].range() {
            let ins = &method.instructions[i];
            if ins.opcode == Opcode::ConstString {
                if let Some(l) = &ins.literal {
                    block_lits.push((i, l.clone()));
                }
            }
        }
    }
    block_lits.sort();
    let mut out: Vec<String> = Vec::new();
    for (_, s) in operand_lits.into_iter().chain(block_lits) {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Promotes a site to a device guard when at least one of its strings names a
/// known brand, OS or model.
pub fn confirm_device_guard(site: &GuardSite, strings: &[String], db: &DeviceInfoDB) -> Option<DeviceGuard> {
    let identifiers: Vec<IdentifierMatch> = strings
        .iter()
        .filter(|s| !s.is_empty())
        .flat_map(|s| match_identifier(s, db))
        .collect();
    (!identifiers.is_empty()).then(|| DeviceGuard {
        site: site.clone(),
        identifiers,
        guard_strings: strings.to_vec(),
    })
}

/// Whether the taken edge of the branch corresponds to the comparison
/// succeeding. `None` when undecidable.
pub fn taken_means_match(method: &MethodIR, site: &GuardSite) -> Option<bool> {
    let op = method.instructions[site.branch_instruction].opcode;
    let true_means_match = match site.comparison {
        Comparison::ReferenceEq => return None,
        Comparison::CompareTo => false,
        _ => true,
    };
    match op {
        Opcode::IfNez => Some(true_means_match),
        Opcode::IfEqz => Some(!true_means_match),
        _ => None,
    }
}
