//! Per-method control-flow graphs, postdominators, reaching definitions and
//! the whole-program call graph.
//!
//! Virtual dispatch is resolved by the static receiver type only, and
//! exceptional control flow is not modeled.

pub mod callgraph;
pub mod cfg;
pub mod defuse;
pub mod postdom;

use rayon::prelude::*;
use thiserror::Error;

pub use callgraph::{build_call_graph, resolve_call, CallEdge, CallGraph};
pub use cfg::{build_cfg, BasicBlock, BlockId, Cfg, Edge, EdgeKind};
pub use defuse::{used_registers, DefSite, ReachingDefs};
pub use postdom::{immediate_postdominator, PostDom, PostDominators};

use crate::frontend::{MethodId, MethodRef, Program};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{0} has no body")]
    NoBody(MethodRef),
    #[error("malformed method {0}: {1}")]
    Malformed(MethodRef, String),
}

/// CFGs for every method with a body plus the call graph.
#[derive(Debug, Clone)]
pub struct Icfg {
    cfgs: Vec<Option<Cfg>>,
    pub call_graph: CallGraph,
}

impl Icfg {
    pub fn build(program: &Program) -> Result<Self, GraphError> {
        let ids: Vec<MethodId> = program.method_ids().collect();
        let cfgs = ids
            .par_iter()
            .map(|&id| {
                let m = program.method(id);
                if m.has_body() {
                    build_cfg(m).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cfgs,
            call_graph: build_call_graph(program),
        })
    }

    pub fn cfg(&self, id: MethodId) -> Option<&Cfg> {
        self.cfgs[id.0 as usize].as_ref()
    }
}
