//! Intraprocedural constant propagation of the few value shapes needed to
//! recognize reflective `SystemProperties.get` calls: string constants, class
//! objects from `Class.forName`, method objects from `Class.getMethod`, and
//! object arrays filled with `aput-object`.

use std::collections::{BTreeMap, BTreeSet};

use crate::frontend::{MethodIR, Opcode, Reg};
use crate::graphs::Cfg;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbsVal {
    Str(String),
    /// Class object for a dotted class name.
    ClassObj(String),
    MethodObj { class: String, name: String },
    /// Array allocated at the given instruction index.
    Array(usize),
}

type Env = BTreeMap<Reg, AbsVal>;

const FOR_NAME: (&str, &str) = ("Ljava/lang/Class;", "forName");
const GET_METHOD: (&str, &str) = ("Ljava/lang/Class;", "getMethod");
const GET_DECLARED_METHOD: (&str, &str) = ("Ljava/lang/Class;", "getDeclaredMethod");

#[derive(Debug, Clone)]
pub struct ConstValues {
    before: Vec<Env>,
    /// First string stored into each array, by allocation site.
    array_first_string: BTreeMap<usize, String>,
}

fn join(into: &mut Env, other: &Env) -> bool {
    let before = into.len();
    into.retain(|r, v| other.get(r) == Some(v));
    into.len() != before
}

impl ConstValues {
    pub fn empty(len: usize) -> Self {
        Self {
            before: vec![Env::new(); len],
            array_first_string: BTreeMap::new(),
        }
    }

    pub fn compute(method: &MethodIR, cfg: &Cfg) -> Self {
        let ins = &method.instructions;
        let nb = cfg.blocks.len();
        let mut block_in: Vec<Option<Env>> = vec![None; nb];
        let mut work: BTreeSet<usize> = BTreeSet::new();
        if nb > 0 {
            block_in[0] = Some(Env::new());
            work.insert(0);
        }
        while let Some(b) = work.pop_first() {
            let mut env = block_in[b].clone().unwrap_or_default();
            for i in cfg.blocks[b].range() {
                step(&mut env, method, i);
            }
            for e in cfg.successors(b) {
                let changed = match &mut block_in[e.to] {
                    slot @ None => {
                        *slot = Some(env.clone());
                        true
                    }
                    Some(existing) => join(existing, &env),
                };
                if changed {
                    work.insert(e.to);
                }
            }
        }
        let mut before = vec![Env::new(); ins.len()];
        let mut array_first_string = BTreeMap::new();
        for (b, block) in cfg.blocks.iter().enumerate() {
            let Some(mut env) = block_in[b].clone() else { continue };
            for i in block.range() {
                before[i] = env.clone();
                step(&mut env, method, i);
            }
        }
        for i in ins.iter().filter(|i| i.opcode == Opcode::ArrayPut) {
            let env = &before[i.index];
            if let (Some(AbsVal::Str(s)), Some(AbsVal::Array(site))) = (env.get(&i.operands[0]), env.get(&i.operands[1])) {
                array_first_string.entry(*site).or_insert_with(|| s.clone());
            }
        }
        Self {
            before,
            array_first_string,
        }
    }

    pub fn value_at(&self, index: usize, reg: Reg) -> Option<&AbsVal> {
        self.before.get(index).and_then(|env| env.get(&reg))
    }

    pub fn string_at(&self, index: usize, reg: Reg) -> Option<&str> {
        match self.value_at(index, reg) {
            Some(AbsVal::Str(s)) => Some(s),
            _ => None,
        }
    }

    pub fn array_first_string(&self, site: usize) -> Option<&str> {
        self.array_first_string.get(&site).map(String::as_str)
    }
}

fn step(env: &mut Env, method: &MethodIR, i: usize) {
    let ins = &method.instructions[i];
    let Some(dst) = ins.defined_register() else { return };
    let value = match ins.opcode {
        Opcode::ConstString => ins.literal.clone().map(AbsVal::Str),
        Opcode::Move => env.get(&ins.operands[1]).cloned(),
        Opcode::NewArray => Some(AbsVal::Array(i)),
        Opcode::MoveResult => i
            .checked_sub(1)
            .map(|p| &method.instructions[p])
            .filter(|p| p.opcode.is_invoke())
            .and_then(|call| {
                let m = call.method_ref.as_ref()?;
                let key = (m.owner.as_str(), m.name.as_str());
                if key == FOR_NAME {
                    match env.get(call.operands.first()?) {
                        Some(AbsVal::Str(s)) => Some(AbsVal::ClassObj(s.clone())),
                        _ => None,
                    }
                } else if key == GET_METHOD || key == GET_DECLARED_METHOD {
                    match (env.get(call.operands.first()?), env.get(call.operands.get(1)?)) {
                        (Some(AbsVal::ClassObj(c)), Some(AbsVal::Str(n))) => Some(AbsVal::MethodObj {
                            class: c.clone(),
                            name: n.clone(),
                        }),
                        _ => None,
                    }
                } else {
                    None
                }
            }),
        _ => None,
    };
    match value {
        Some(v) => {
            env.insert(dst, v);
        }
        None => {
            env.remove(&dst);
        }
    }
}
