use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::frontend::{MethodId, MethodRef, Program};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallEdge {
    pub caller: MethodId,
    pub site: usize,
    pub callee: MethodRef,
    /// The loaded method with a body this call dispatches to, if any.
    pub target: Option<MethodId>,
}

impl CallEdge {
    pub fn resolved(&self) -> bool {
        self.target.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallGraph {
    pub nodes: Vec<MethodRef>,
    pub edges: Vec<CallEdge>,
    #[serde(skip)]
    by_site: HashMap<(MethodId, usize), usize>,
    #[serde(skip)]
    callers: HashMap<MethodId, Vec<usize>>,
}

impl CallGraph {
    pub fn edge_at(&self, caller: MethodId, site: usize) -> Option<&CallEdge> {
        self.by_site.get(&(caller, site)).map(|&i| &self.edges[i])
    }

    /// Edges whose resolved target is `callee`, in build order.
    pub fn callers_of(&self, callee: MethodId) -> impl Iterator<Item = &CallEdge> + '_ {
        self.callers
            .get(&callee)
            .into_iter()
            .flatten()
            .map(move |&i| &self.edges[i])
    }

    pub fn edges_from(&self, caller: MethodId) -> impl Iterator<Item = &CallEdge> + '_ {
        self.edges.iter().filter(move |e| e.caller == caller)
    }

    pub fn to_dot(&self, program: &Program) -> String {
        let mut s = String::from("digraph callgraph {\n  node [shape=box];\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(s, "  m{i} [label=\"{}\"];", n.to_string().replace('"', "\\\""));
        }
        let mut external: HashMap<&MethodRef, usize> = HashMap::new();
        for e in &self.edges {
            match e.target {
                Some(t) => {
                    let _ = writeln!(s, "  m{} -> m{} [label=\"@{}\"];", e.caller.0, t.0, e.site);
                }
                None => {
                    let next = external.len();
                    let id = *external.entry(&e.callee).or_insert_with(|| {
                        let _ = writeln!(
                            s,
                            "  x{next} [label=\"{}\", style=dashed];",
                            e.callee.to_string().replace('"', "\\\"")
                        );
                        next
                    });
                    let _ = writeln!(s, "  m{} -> x{id} [label=\"@{}\", style=dashed];", e.caller.0, e.site);
                }
            }
        }
        debug_assert_eq!(self.nodes.len(), program.method_count());
        s.push_str("}\n");
        s
    }
}

/// Resolves a call by static receiver type: the owner class, then its loaded
/// superclasses. The first class declaring the (name, descriptor) pair decides;
/// abstract or native declarations and unloaded classes leave it unresolved.
pub fn resolve_call(program: &Program, callee: &MethodRef) -> Option<MethodId> {
    let mut class_name = callee.owner.as_str();
    let mut seen = HashSet::new();
    while seen.insert(class_name) {
        let class = program.class(class_name)?;
        if let Some(m) = class.find_method(&callee.name, &callee.descriptor) {
            return if m.has_body() { program.lookup(&m.signature()) } else { None };
        }
        class_name = class.super_name.as_deref()?;
    }
    None
}

pub fn build_call_graph(program: &Program) -> CallGraph {
    let mut edges = Vec::new();
    let mut by_site = HashMap::new();
    let mut callers: HashMap<MethodId, Vec<usize>> = HashMap::new();
    let mut nodes = Vec::with_capacity(program.method_count());
    for id in program.method_ids() {
        let m = program.method(id);
        nodes.push(m.signature());
        for ins in &m.instructions {
            let Some(callee) = ins.method_ref.as_ref().filter(|_| ins.opcode.is_invoke()) else {
                continue;
            };
            let target = resolve_call(program, callee);
            let i = edges.len();
            by_site.insert((id, ins.index), i);
            if let Some(t) = target {
                callers.entry(t).or_default().push(i);
            }
            edges.push(CallEdge {
                caller: id,
                site: ins.index,
                callee: callee.clone(),
                target,
            });
        }
    }
    CallGraph {
        nodes,
        edges,
        by_site,
        callers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#".class public Lt/Base;
.super Ljava/lang/Object;
.method public greet()V
    .registers 1
    return-void
.end method
.method public abstract hook()V
.end method
"#;

    const CHILD: &str = r#".class public Lt/Child;
.super Lt/Base;
.method public run()V
    .registers 2
    invoke-virtual {p0}, Lt/Child;->greet()V
    invoke-virtual {p0}, Lt/Child;->hook()V
    invoke-virtual {p0}, Lt/Child;->run()V
    const-string v0, "x"
    invoke-virtual {v0}, Ljava/lang/String;->toLowerCase()Ljava/lang/String;
    return-void
.end method
"#;

    #[test]
    fn resolves_along_superclass_chain() {
        let p = Program::from_sources([BASE, CHILD]).unwrap();
        let cg = build_call_graph(&p);
        let run = p.lookup_str("Lt/Child;->run()V").unwrap();
        let greet = p.lookup_str("Lt/Base;->greet()V").unwrap();
        assert_eq!(cg.edges.len(), 4);
        assert_eq!(cg.edge_at(run, 0).unwrap().target, Some(greet));
        assert!(!cg.edge_at(run, 1).unwrap().resolved(), "abstract declaration");
        assert_eq!(cg.edge_at(run, 2).unwrap().target, Some(run));
        assert!(!cg.edge_at(run, 4).unwrap().resolved(), "library call");
        assert_eq!(cg.callers_of(greet).count(), 1);
        assert!(cg.to_dot(&p).contains("style=dashed"));
    }

    #[test]
    fn no_invokes_no_edges() {
        let p = Program::from_sources([BASE]).unwrap();
        assert!(build_call_graph(&p).edges.is_empty());
    }

    #[test]
    fn deterministic() {
        let p = Program::from_sources([BASE, CHILD]).unwrap();
        assert_eq!(build_call_graph(&p), build_call_graph(&p));
    }
}
