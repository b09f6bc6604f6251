use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::GraphError;
use crate::frontend::{MethodIR, MethodRef, Opcode};

pub type BlockId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BasicBlock {
    pub id: BlockId,
    /// First instruction index (the leader).
    pub start: usize,
    /// One past the last instruction index.
    pub end: usize,
}

impl BasicBlock {
    pub fn last(&self) -> usize {
        self.end - 1
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Fallthrough,
    BranchTaken,
    Goto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub from: BlockId,
    pub to: BlockId,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct Cfg {
    pub method: MethodRef,
    pub blocks: Vec<BasicBlock>,
    pub edges: Vec<Edge>,
    #[serde(skip)]
    succs: Vec<Vec<usize>>,
    #[serde(skip)]
    preds: Vec<Vec<usize>>,
    #[serde(skip)]
    block_of: Vec<BlockId>,
}

impl Cfg {
    /// Builds a CFG directly from blocks and edges. Used by tests that need
    /// arbitrary shapes; `block_of` is derived from the block ranges.
    pub fn from_parts(method: MethodRef, blocks: Vec<BasicBlock>, edges: Vec<Edge>) -> Self {
        let n = blocks.len();
        let mut succs = vec![Vec::new(); n];
        let mut preds = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            succs[e.from].push(i);
            preds[e.to].push(i);
        }
        let mut block_of = vec![0; blocks.last().map_or(0, |b| b.end)];
        for b in &blocks {
            for i in b.range() {
                block_of[i] = b.id;
            }
        }
        Self {
            method,
            blocks,
            edges,
            succs,
            preds,
            block_of,
        }
    }

    pub fn block_of(&self, instruction: usize) -> BlockId {
        self.block_of[instruction]
    }

    pub fn successors(&self, block: BlockId) -> impl Iterator<Item = &Edge> + '_ {
        self.succs[block].iter().map(move |&i| &self.edges[i])
    }

    pub fn predecessors(&self, block: BlockId) -> impl Iterator<Item = &Edge> + '_ {
        self.preds[block].iter().map(move |&i| &self.edges[i])
    }

    /// Blocks without successors; they flow into the synthetic exit.
    pub fn exit_blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        (0..self.blocks.len()).filter(move |&b| self.succs[b].is_empty())
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph \"{}\" {{", self.method.to_string().replace('"', "\\\""));
        let _ = writeln!(s, "  node [shape=box];");
        for b in &self.blocks {
            let _ = writeln!(s, "  b{} [label=\"B{} [{}..{}]\"];", b.id, b.id, b.start, b.last());
        }
        for e in &self.edges {
            let label = match e.kind {
                EdgeKind::Fallthrough => "fall",
                EdgeKind::BranchTaken => "taken",
                EdgeKind::Goto => "goto",
            };
            let _ = writeln!(s, "  b{} -> b{} [label=\"{label}\"];", e.from, e.to);
        }
        s.push_str("}\n");
        s
    }
}

/// Splits a method body into basic blocks.
///
/// Leaders are instruction 0, every branch target, and every instruction that
/// follows a branch, goto or return.
pub fn build_cfg(method: &MethodIR) -> Result<Cfg, GraphError> {
    if method.is_abstract_or_native {
        return Err(GraphError::NoBody(method.signature()));
    }
    let ins = &method.instructions;
    let n = ins.len();
    let malformed = |msg: String| GraphError::Malformed(method.signature(), msg);
    let mut leader = vec![false; n];
    if n > 0 {
        leader[0] = true;
    }
    for i in ins {
        if let Some(t) = i.branch_target {
            if t >= n {
                return Err(malformed(format!("branch at {} targets {t}", i.index)));
            }
            leader[t] = true;
        }
        if (i.opcode.is_branch() || i.opcode.is_return()) && i.index + 1 < n {
            leader[i.index + 1] = true;
        }
    }
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if leader.get(i).is_none_or(|&l| l) {
            blocks.push(BasicBlock {
                id: blocks.len(),
                start,
                end: i,
            });
            start = i;
        }
    }
    let mut block_of = vec![0; n];
    for b in &blocks {
        for i in b.range() {
            block_of[i] = b.id;
        }
    }
    let mut edges = Vec::new();
    for b in &blocks {
        let last = &ins[b.last()];
        let next = (b.end < n).then(|| block_of[b.end]);
        match last.opcode {
            op if op.is_conditional() => {
                let target = last.branch_target.ok_or_else(|| malformed(format!("branch at {} lacks a target", last.index)))?;
                let fall = next.ok_or_else(|| malformed(format!("conditional at {} falls off the end", last.index)))?;
                edges.push(Edge {
                    from: b.id,
                    to: block_of[target],
                    kind: EdgeKind::BranchTaken,
                });
                edges.push(Edge {
                    from: b.id,
                    to: fall,
                    kind: EdgeKind::Fallthrough,
                });
            }
            Opcode::Goto => {
                let target = last.branch_target.ok_or_else(|| malformed(format!("goto at {} lacks a target", last.index)))?;
                edges.push(Edge {
                    from: b.id,
                    to: block_of[target],
                    kind: EdgeKind::Goto,
                });
            }
            op if op.is_return() => {}
            _ => {
                if let Some(to) = next {
                    edges.push(Edge {
                        from: b.id,
                        to,
                        kind: EdgeKind::Fallthrough,
                    });
                }
            }
        }
    }
    Ok(Cfg::from_parts(method.signature(), blocks, edges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_smali_class;

    fn method(body: &str) -> MethodIR {
        let src = format!(".class public Lt/T;\n.super Ljava/lang/Object;\n.method public static m(Ljava/lang/String;)V\n    .registers 4\n{body}\n.end method\n");
        parse_smali_class(&src).unwrap().methods.remove(0)
    }

    #[test]
    fn straight_line_is_one_block() {
        let m = method("    const-string v0, \"a\"\n    move-object v1, v0\n    nop\n    return-void");
        let cfg = build_cfg(&m).unwrap();
        assert_eq!(cfg.blocks.len(), 1);
        assert!(cfg.edges.is_empty());
    }

    #[test]
    fn single_if_gives_three_blocks() {
        let m = method(
            "    const-string v0, \"oppo\"\n    if-eqz v3, :cond_0\n    nop\n    :cond_0\n    return-void",
        );
        let cfg = build_cfg(&m).unwrap();
        assert_eq!(cfg.blocks.len(), 3);
        let kinds: Vec<_> = cfg.successors(0).map(|e| (e.to, e.kind)).collect();
        assert_eq!(kinds, vec![(2, EdgeKind::BranchTaken), (1, EdgeKind::Fallthrough)]);
        assert_eq!(cfg.successors(1).map(|e| e.to).collect::<Vec<_>>(), vec![2]);
        assert_eq!(cfg.exit_blocks().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn backward_goto_is_a_cycle() {
        let m = method("    :top\n    nop\n    goto :top");
        let cfg = build_cfg(&m).unwrap();
        assert_eq!(cfg.blocks.len(), 1);
        assert_eq!(cfg.edges, vec![Edge { from: 0, to: 0, kind: EdgeKind::Goto }]);
    }

    #[test]
    fn conditional_at_end_is_malformed() {
        let mut m = method("    :a\n    nop\n    return-void");
        m.instructions[1] = crate::frontend::Instruction {
            branch_target: Some(0),
            ..crate::frontend::Instruction::new(1, Opcode::IfEqz, vec![crate::frontend::Reg(0)])
        };
        assert!(matches!(build_cfg(&m), Err(GraphError::Malformed(..))));
    }

    #[test]
    fn abstract_has_no_cfg() {
        let src = ".class public abstract Lt/A;\n.method public abstract f()V\n.end method\n";
        let m = parse_smali_class(src).unwrap().methods.remove(0);
        assert!(matches!(build_cfg(&m), Err(GraphError::NoBody(_))));
    }
}
