//! Reaching definitions over registers, used to walk def-use chains.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::cfg::Cfg;
use crate::frontend::{Instruction, MethodIR, Reg};

/// Where a register value was defined: on method entry (parameters and
/// uninitialized locals) or at an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefSite {
    Entry,
    Instr(usize),
}

type DefMap = BTreeMap<Reg, BTreeSet<DefSite>>;

#[derive(Debug, Clone)]
pub struct ReachingDefs {
    /// Definitions reaching each instruction (before it executes).
    before: Vec<DefMap>,
}

/// Registers an instruction reads.
pub fn used_registers(ins: &Instruction) -> &[Reg] {
    if ins.opcode.defines_first_operand() {
        &ins.operands[1.min(ins.operands.len())..]
    } else {
        &ins.operands
    }
}

fn apply(map: &mut DefMap, ins: &Instruction) {
    if let Some(r) = ins.defined_register() {
        map.insert(r, BTreeSet::from([DefSite::Instr(ins.index)]));
    }
}

impl ReachingDefs {
    pub fn compute(method: &MethodIR, cfg: &Cfg) -> Self {
        let n = method.instructions.len();
        let nb = cfg.blocks.len();
        let mut block_in: Vec<Option<DefMap>> = vec![None; nb];
        if nb > 0 {
            let entry: DefMap = (0..method.registers)
                .map(|r| (Reg(r), BTreeSet::from([DefSite::Entry])))
                .collect();
            block_in[0] = Some(entry);
        }
        let mut queue: VecDeque<usize> = (0..nb.min(1)).collect();
        let mut queued = vec![false; nb];
        if nb > 0 {
            queued[0] = true;
        }
        while let Some(b) = queue.pop_front() {
            queued[b] = false;
            let mut out = block_in[b].clone().unwrap_or_default();
            for i in cfg.blocks[b].range() {
                apply(&mut out, &method.instructions[i]);
            }
            for e in cfg.successors(b) {
                let target = &mut block_in[e.to];
                let changed = match target {
                    None => {
                        *target = Some(out.clone());
                        true
                    }
                    Some(existing) => {
                        let mut changed = false;
                        for (r, defs) in &out {
                            let slot = existing.entry(*r).or_default();
                            for d in defs {
                                changed |= slot.insert(*d);
                            }
                        }
                        changed
                    }
                };
                if changed && !queued[e.to] {
                    queued[e.to] = true;
                    queue.push_back(e.to);
                }
            }
        }
        let mut before = vec![DefMap::new(); n];
        for (b, block) in cfg.blocks.iter().enumerate() {
            let mut cur = block_in[b].clone().unwrap_or_default();
            for i in block.range() {
                before[i] = cur.clone();
                apply(&mut cur, &method.instructions[i]);
            }
        }
        Self { before }
    }

    /// Definitions of `reg` that reach instruction `index`. Empty for
    /// unreachable instructions.
    pub fn defs_at(&self, index: usize, reg: Reg) -> Vec<DefSite> {
        self.before[index]
            .get(&reg)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Instructions reading the value defined at `def`.
    pub fn uses_of(&self, method: &MethodIR, def: usize) -> Vec<usize> {
        let Some(reg) = method.instructions[def].defined_register() else {
            return Vec::new();
        };
        method
            .instructions
            .iter()
            .filter(|ins| {
                used_registers(ins).contains(&reg)
                    && self.before[ins.index]
                        .get(&reg)
                        .is_some_and(|s| s.contains(&DefSite::Instr(def)))
            })
            .map(|ins| ins.index)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_smali_class;
    use crate::graphs::build_cfg;

    #[test]
    fn merge_at_join() {
        let src = r#".class public Lt/T;
.method public static m(Z)V
    .registers 3
    const-string v0, "a"
    if-eqz v2, :b
    const-string v0, "b"
    :b
    move-object v1, v0
    return-void
.end method
"#;
        let m = parse_smali_class(src).unwrap().methods.remove(0);
        let cfg = build_cfg(&m).unwrap();
        let rd = ReachingDefs::compute(&m, &cfg);
        assert_eq!(rd.defs_at(3, Reg(0)), vec![DefSite::Instr(0), DefSite::Instr(2)]);
        assert_eq!(rd.defs_at(1, Reg(2)), vec![DefSite::Entry]);
        assert_eq!(rd.uses_of(&m, 0), vec![3]);
        assert_eq!(rd.uses_of(&m, 2), vec![3]);
    }
}
