use serde::{Deserialize, Serialize};

use super::consts::{AbsVal, ConstValues};
use crate::device_db::SourceSpec;
use crate::frontend::{MethodId, MethodRef, Opcode, Program, Reg};
use crate::graphs::build_cfg;

pub const UNKNOWN_KEY: &str = "UNKNOWN_KEY";
pub const BUILD_CLASS: &str = "Landroid/os/Build;";
pub const SYSPROP_CLASS: &str = "Landroid/os/SystemProperties;";
const SYSPROP_DOTTED: &str = "android.os.SystemProperties";
const METHOD_INVOKE: (&str, &str) = ("Ljava/lang/reflect/Method;", "invoke");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    BuildFieldRead,
    SyspropDirect,
    SyspropReflective,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub method: MethodRef,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfoSource {
    pub kind: SourceKind,
    pub location: Location,
    /// Build field name, property key, or [`UNKNOWN_KEY`].
    pub detail: String,
    /// Register receiving the device information. `None` when a property
    /// read's result is discarded.
    pub defined_register: Option<Reg>,
}

impl DeviceInfoSource {
    /// Instruction index at which the device information is first held in
    /// `defined_register`.
    pub fn definition_index(&self) -> usize {
        match self.kind {
            SourceKind::BuildFieldRead => self.location.index,
            _ => self.location.index + 1,
        }
    }
}

/// Locates every read of device information.
///
/// Build field reads are `sget-object` of one of `specs`' fields. Property
/// reads are calls to `SystemProperties.get`, either direct or through
/// `Class.forName` / `getMethod` / `Method.invoke` with constant class and
/// method names in the same method.
pub fn find_sources(program: &Program, specs: &[SourceSpec]) -> Vec<DeviceInfoSource> {
    let mut out = Vec::new();
    for id in program.method_ids() {
        find_in_method(program, id, specs, &mut out);
    }
    out
}

fn result_register(program: &Program, id: MethodId, invoke: usize) -> Option<Reg> {
    let m = program.method(id);
    m.instructions
        .get(invoke + 1)
        .filter(|i| i.opcode == Opcode::MoveResult)
        .and_then(|i| i.defined_register())
}

fn find_in_method(program: &Program, id: MethodId, specs: &[SourceSpec], out: &mut Vec<DeviceInfoSource>) {
    let m = program.method(id);
    if !m.has_body() {
        return;
    }
    let mut consts: Option<ConstValues> = None;
    let sig = m.signature();
    for ins in &m.instructions {
        let loc = || Location {
            method: sig.clone(),
            index: ins.index,
        };
        match ins.opcode {
            Opcode::StaticGet => {
                let Some(f) = &ins.field_ref else { continue };
                if f.owner == BUILD_CLASS && specs.iter().any(|s| s.build_field.name() == f.name) {
                    out.push(DeviceInfoSource {
                        kind: SourceKind::BuildFieldRead,
                        location: loc(),
                        detail: f.name.clone(),
                        defined_register: ins.defined_register(),
                    });
                }
            }
            op if op.is_invoke() => {
                let Some(callee) = &ins.method_ref else { continue };
                let direct = callee.owner == SYSPROP_CLASS && callee.name == "get";
                let reflective = (callee.owner.as_str(), callee.name.as_str()) == METHOD_INVOKE;
                if !direct && !reflective {
                    continue;
                }
                let consts = consts.get_or_insert_with(|| match build_cfg(m) {
                    Ok(cfg) => ConstValues::compute(m, &cfg),
                    Err(_) => ConstValues::empty(m.instructions.len()),
                });
                if direct {
                    let key = ins
                        .operands
                        .first()
                        .and_then(|r| consts.string_at(ins.index, *r))
                        .unwrap_or(UNKNOWN_KEY);
                    out.push(DeviceInfoSource {
                        kind: SourceKind::SyspropDirect,
                        location: loc(),
                        detail: key.to_string(),
                        defined_register: result_register(program, id, ins.index),
                    });
                    continue;
                }
                let is_get = matches!(
                    ins.operands.first().and_then(|r| consts.value_at(ins.index, *r)),
                    Some(AbsVal::MethodObj { class, name }) if class == SYSPROP_DOTTED && name == "get"
                );
                if !is_get {
                    continue;
                }
                let key = match ins.operands.get(2).and_then(|r| consts.value_at(ins.index, *r)) {
                    Some(AbsVal::Array(site)) => consts.array_first_string(*site),
                    _ => None,
                }
                .unwrap_or(UNKNOWN_KEY);
                out.push(DeviceInfoSource {
                    kind: SourceKind::SyspropReflective,
                    location: loc(),
                    detail: key.to_string(),
                    defined_register: result_register(program, id, ins.index),
                });
            }
            _ => {}
        }
    }
}
