//! Postdominator tree over a CFG augmented with a synthetic exit node that
//! every return block flows into. Computed with the Cooper/Harvey/Kennedy
//! iterative algorithm on the reversed graph.

use serde::Serialize;

use super::cfg::{BlockId, Cfg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PostDom {
    Block(BlockId),
    Exit,
}

#[derive(Debug, Clone)]
pub struct PostDominators {
    /// Indexed by block; the synthetic exit is `blocks.len()`. `None` when the
    /// block cannot reach the exit.
    ipdom: Vec<Option<usize>>,
}

impl PostDominators {
    pub fn compute(cfg: &Cfg) -> Self {
        let n = cfg.blocks.len();
        let exit = n;
        // Successors in the reversed graph: exit -> return blocks, b -> forward preds(b).
        let rsuccs = |v: usize| -> Vec<usize> {
            if v == exit {
                cfg.exit_blocks().collect()
            } else {
                let mut p: Vec<usize> = cfg.predecessors(v).map(|e| e.from).collect();
                p.dedup();
                p
            }
        };
        // Predecessors in the reversed graph: forward successors, plus exit for return blocks.
        let rpreds = |v: usize| -> Vec<usize> {
            let mut s: Vec<usize> = cfg.successors(v).map(|e| e.to).collect();
            if s.is_empty() {
                s.push(exit);
            }
            s
        };

        let mut order = Vec::with_capacity(n + 1);
        let mut visited = vec![false; n + 1];
        let mut stack = vec![(exit, rsuccs(exit), 0usize)];
        visited[exit] = true;
        while let Some((v, succ, i)) = stack.last_mut() {
            if let Some(&w) = succ.get(*i) {
                *i += 1;
                if !visited[w] {
                    visited[w] = true;
                    let ws = rsuccs(w);
                    stack.push((w, ws, 0));
                }
            } else {
                order.push(*v);
                stack.pop();
            }
        }
        let mut po_num = vec![usize::MAX; n + 1];
        for (i, &v) in order.iter().enumerate() {
            po_num[v] = i;
        }

        let mut idom: Vec<Option<usize>> = vec![None; n + 1];
        idom[exit] = Some(exit);
        let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| {
            while a != b {
                while po_num[a] < po_num[b] {
                    a = idom[a].expect("processed");
                }
                while po_num[b] < po_num[a] {
                    b = idom[b].expect("processed");
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &v in order.iter().rev() {
                if v == exit {
                    continue;
                }
                let mut new_idom = None;
                for p in rpreds(v) {
                    if idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new_idom.is_some() && idom[v] != new_idom {
                    idom[v] = new_idom;
                    changed = true;
                }
            }
        }
        idom.truncate(n);
        Self { ipdom: idom }
    }

    pub fn immediate(&self, block: BlockId) -> Option<PostDom> {
        let exit = self.ipdom.len();
        self.ipdom[block].map(|p| if p == exit { PostDom::Exit } else { PostDom::Block(p) })
    }
}

/// Immediate postdominator of `block`, or `None` if it cannot reach an exit.
pub fn immediate_postdominator(cfg: &Cfg, block: BlockId) -> Option<PostDom> {
    PostDominators::compute(cfg).immediate(block)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MethodRef;
    use crate::graphs::cfg::{BasicBlock, Edge, EdgeKind};

    fn shape(n: usize, edges: &[(usize, usize)]) -> Cfg {
        let blocks = (0..n).map(|i| BasicBlock { id: i, start: i, end: i + 1 }).collect();
        let edges = edges
            .iter()
            .map(|&(from, to)| Edge { from, to, kind: EdgeKind::Fallthrough })
            .collect();
        Cfg::from_parts(MethodRef::new("Lt;", "m", "()V"), blocks, edges)
    }

    #[test]
    fn diamond_joins() {
        let cfg = shape(4, &[(0, 1), (0, 2), (1, 3), (2, 3)]);
        assert_eq!(immediate_postdominator(&cfg, 0), Some(PostDom::Block(3)));
        assert_eq!(immediate_postdominator(&cfg, 1), Some(PostDom::Block(3)));
        assert_eq!(immediate_postdominator(&cfg, 3), Some(PostDom::Exit));
    }

    #[test]
    fn early_return_goes_to_exit() {
        let cfg = shape(3, &[(0, 1), (0, 2)]);
        assert_eq!(immediate_postdominator(&cfg, 0), Some(PostDom::Exit));
    }

    #[test]
    fn infinite_loop_has_none() {
        let cfg = shape(3, &[(0, 1), (0, 2), (1, 1)]);
        assert_eq!(immediate_postdominator(&cfg, 1), None);
        assert_eq!(immediate_postdominator(&cfg, 0), Some(PostDom::Block(2)));
    }
}
