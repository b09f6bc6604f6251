//! Typed register-level IR for the supported smali subset.

use std::fmt;

use serde::{Deserialize, Serialize};

/// A Dalvik virtual register. Parameter registers (`pN`) are normalized to
/// their `vN` position at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Reg(pub u16);

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl std::str::FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix('v')
            .and_then(|n| n.parse().ok())
            .map(Reg)
            .ok_or_else(|| format!("not a register: {s}"))
    }
}

/// A symbolic method reference, e.g. `Lcom/app/Foo;->bar(I)V`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MethodRef {
    pub owner: String,
    pub name: String,
    pub descriptor: String,
}

impl MethodRef {
    pub fn new(owner: impl Into<String>, name: impl Into<String>, descriptor: impl Into<String>) -> Self {
        Self {
            owner: owner.into(),
            name: name.into(),
            descriptor: descriptor.into(),
        }
    }

    /// `android.content.Intent.setComponent` style rendering used by rule matching.
    pub fn dotted(&self) -> String {
        format!("{}.{}", descriptor_to_dotted(&self.owner), self.name)
    }
}

impl fmt::Display for MethodRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}{}", self.owner, self.name, self.descriptor)
    }
}

impl std::str::FromStr for MethodRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (owner, rest) = s.split_once("->").ok_or_else(|| format!("missing `->` in {s}"))?;
        let paren = rest.find('(').ok_or_else(|| format!("missing `(` in {s}"))?;
        if paren == 0 {
            return Err(format!("empty method name in {s}"));
        }
        Ok(MethodRef::new(owner, &rest[..paren], &rest[paren..]))
    }
}

/// A symbolic field reference, e.g. `Landroid/os/Build;->BRAND:Ljava/lang/String;`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FieldRef {
    pub owner: String,
    pub name: String,
    pub ty: String,
}

impl fmt::Display for FieldRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}:{}", self.owner, self.name, self.ty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Opcode {
    Nop,
    ConstString,
    Move,
    MoveResult,
    InvokeVirtual,
    InvokeStatic,
    InvokeDirect,
    InvokeInterface,
    ReturnVoid,
    ReturnObject,
    ReturnValue,
    IfEqz,
    IfNez,
    IfEq,
    IfNe,
    Goto,
    /// `sget*` family.
    StaticGet,
    /// `iget*` family.
    InstanceGet,
    NewInstance,
    NewArray,
    /// `aput-object`, kept so reflective argument arrays can be read back.
    ArrayPut,
}

impl Opcode {
    pub fn is_invoke(self) -> bool {
        matches!(
            self,
            Opcode::InvokeVirtual | Opcode::InvokeStatic | Opcode::InvokeDirect | Opcode::InvokeInterface
        )
    }

    pub fn is_conditional(self) -> bool {
        matches!(self, Opcode::IfEqz | Opcode::IfNez | Opcode::IfEq | Opcode::IfNe)
    }

    pub fn is_branch(self) -> bool {
        self.is_conditional() || self == Opcode::Goto
    }

    pub fn is_return(self) -> bool {
        matches!(self, Opcode::ReturnVoid | Opcode::ReturnObject | Opcode::ReturnValue)
    }

    /// Number of register operands, `None` for the variadic invoke family.
    pub fn operand_arity(self) -> Option<usize> {
        Some(match self {
            Opcode::Nop | Opcode::ReturnVoid | Opcode::Goto => 0,
            Opcode::ConstString
            | Opcode::MoveResult
            | Opcode::ReturnObject
            | Opcode::ReturnValue
            | Opcode::IfEqz
            | Opcode::IfNez
            | Opcode::StaticGet
            | Opcode::NewInstance => 1,
            Opcode::Move | Opcode::IfEq | Opcode::IfNe | Opcode::InstanceGet | Opcode::NewArray => 2,
            Opcode::ArrayPut => 3,
            Opcode::InvokeVirtual | Opcode::InvokeStatic | Opcode::InvokeDirect | Opcode::InvokeInterface => {
                return None
            }
        })
    }

    /// Canonical smali mnemonic used by the pretty-printer.
    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Nop => "nop",
            Opcode::ConstString => "const-string",
            Opcode::Move => "move-object",
            Opcode::MoveResult => "move-result-object",
            Opcode::InvokeVirtual => "invoke-virtual",
            Opcode::InvokeStatic => "invoke-static",
            Opcode::InvokeDirect => "invoke-direct",
            Opcode::InvokeInterface => "invoke-interface",
            Opcode::ReturnVoid => "return-void",
            Opcode::ReturnObject => "return-object",
            Opcode::ReturnValue => "return",
            Opcode::IfEqz => "if-eqz",
            Opcode::IfNez => "if-nez",
            Opcode::IfEq => "if-eq",
            Opcode::IfNe => "if-ne",
            Opcode::Goto => "goto",
            Opcode::StaticGet => "sget-object",
            Opcode::InstanceGet => "iget-object",
            Opcode::NewInstance => "new-instance",
            Opcode::NewArray => "new-array",
            Opcode::ArrayPut => "aput-object",
        }
    }

    /// Register written by an instruction with this opcode, if any.
    pub fn defines_first_operand(self) -> bool {
        matches!(
            self,
            Opcode::ConstString
                | Opcode::Move
                | Opcode::MoveResult
                | Opcode::StaticGet
                | Opcode::InstanceGet
                | Opcode::NewInstance
                | Opcode::NewArray
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub index: usize,
    pub opcode: Opcode,
    pub operands: Vec<Reg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub literal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_ref: Option<FieldRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method_ref: Option<MethodRef>,
    /// Class descriptor for `new-instance` / `new-array`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub type_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_target: Option<usize>,
}

impl Instruction {
    pub fn new(index: usize, opcode: Opcode, operands: Vec<Reg>) -> Self {
        Self {
            index,
            opcode,
            operands,
            literal: None,
            field_ref: None,
            method_ref: None,
            type_ref: None,
            branch_target: None,
        }
    }

    pub fn nop(index: usize) -> Self {
        Self::new(index, Opcode::Nop, Vec::new())
    }

    /// The register this instruction writes, if any.
    pub fn defined_register(&self) -> Option<Reg> {
        if self.opcode.defines_first_operand() {
            self.operands.first().copied()
        } else {
            None
        }
    }

    /// Checks that exactly the slots required by the opcode are populated.
    pub fn check_slots(&self) -> Result<(), String> {
        let op = self.opcode;
        if let Some(n) = op.operand_arity() {
            if self.operands.len() != n {
                return Err(format!("{} expects {n} registers, got {}", op.mnemonic(), self.operands.len()));
            }
        }
        let want_literal = op == Opcode::ConstString;
        let want_field = matches!(op, Opcode::StaticGet | Opcode::InstanceGet);
        let want_method = op.is_invoke();
        let want_type = matches!(op, Opcode::NewInstance | Opcode::NewArray);
        let want_target = op.is_branch();
        let slots = [
            ("literal", want_literal, self.literal.is_some()),
            ("field_ref", want_field, self.field_ref.is_some()),
            ("method_ref", want_method, self.method_ref.is_some()),
            ("type_ref", want_type, self.type_ref.is_some()),
            ("branch_target", want_target, self.branch_target.is_some()),
        ];
        for (name, want, have) in slots {
            if want != have {
                return Err(format!("{}: slot {name} {}", op.mnemonic(), if want { "missing" } else { "unexpected" }));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodIR {
    pub owner: String,
    pub name: String,
    pub descriptor: String,
    pub registers: u16,
    /// Incoming argument words, `this` included for instance methods.
    pub ins: u16,
    pub is_static: bool,
    pub is_abstract_or_native: bool,
    pub instructions: Vec<Instruction>,
    /// Recognized-but-unsupported instructions that were lowered to `nop`.
    pub lowered: usize,
}

impl MethodIR {
    pub fn signature(&self) -> MethodRef {
        MethodRef::new(&self.owner, &self.name, &self.descriptor)
    }

    pub fn has_body(&self) -> bool {
        !self.is_abstract_or_native
    }

    /// First parameter register; `this` for instance methods.
    pub fn first_param_register(&self) -> u16 {
        self.registers - self.ins
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.is_abstract_or_native && !self.instructions.is_empty() {
            return Err(format!("{}: abstract/native method with a body", self.signature()));
        }
        if self.ins > self.registers {
            return Err(format!("{}: {} argument words exceed {} registers", self.signature(), self.ins, self.registers));
        }
        for (i, ins) in self.instructions.iter().enumerate() {
            if ins.index != i {
                return Err(format!("{}: instruction index {} at position {i}", self.signature(), ins.index));
            }
            ins.check_slots().map_err(|e| format!("{} @{i}: {e}", self.signature()))?;
            if let Some(r) = ins.operands.iter().find(|r| r.0 >= self.registers) {
                return Err(format!("{} @{i}: {r} out of range ({} registers)", self.signature(), self.registers));
            }
            if let Some(t) = ins.branch_target {
                if t >= self.instructions.len() {
                    return Err(format!("{} @{i}: branch target {t} outside body", self.signature()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub ty: String,
    pub is_static: bool,
    /// Initial value when it is a string constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub class_name: String,
    pub access: Vec<String>,
    pub super_name: Option<String>,
    pub interfaces: Vec<String>,
    pub fields: Vec<FieldDef>,
    pub methods: Vec<MethodIR>,
    pub source_package: String,
}

impl ClassDef {
    pub fn find_method(&self, name: &str, descriptor: &str) -> Option<&MethodIR> {
        self.methods.iter().find(|m| m.name == name && m.descriptor == descriptor)
    }

    pub fn find_field(&self, name: &str) -> Option<&FieldDef> {
        self.fields.iter().find(|f| f.name == name)
    }
}

pub fn is_class_descriptor(s: &str) -> bool {
    s.len() > 2 && s.starts_with('L') && s.ends_with(';')
}

/// `Lcom/app/Foo$Bar;` -> `com.app.Foo$Bar`. Non-class descriptors are returned as-is.
pub fn descriptor_to_dotted(desc: &str) -> String {
    match desc.strip_prefix('L').and_then(|d| d.strip_suffix(';')) {
        Some(inner) => inner.replace('/', "."),
        None => desc.to_string(),
    }
}

/// Dotted package of a class descriptor; empty for the default package.
pub fn package_of(desc: &str) -> String {
    let dotted = descriptor_to_dotted(desc);
    match dotted.rfind('.') {
        Some(i) => dotted[..i].to_string(),
        None => String::new(),
    }
}

/// Splits the parameter list of a method descriptor into type descriptors.
pub fn parse_param_types(descriptor: &str) -> Result<Vec<String>, String> {
    let inner = descriptor
        .strip_prefix('(')
        .and_then(|d| d.split_once(')'))
        .map(|(params, _)| params)
        .ok_or_else(|| format!("malformed method descriptor {descriptor}"))?;
    let bytes = inner.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        while i < bytes.len() && bytes[i] == b'[' {
            i += 1;
        }
        match bytes.get(i) {
            Some(b'L') => {
                let end = inner[i..].find(';').ok_or_else(|| format!("unterminated class type in {descriptor}"))?;
                i += end + 1;
            }
            Some(b'Z' | b'B' | b'S' | b'C' | b'I' | b'J' | b'F' | b'D') => i += 1,
            _ => return Err(format!("bad type in descriptor {descriptor}")),
        }
        out.push(inner[start..i].to_string());
    }
    Ok(out)
}

/// Register words taken by the parameters (wide primitives take two).
pub fn param_words(descriptor: &str) -> Result<u16, String> {
    Ok(parse_param_types(descriptor)?
        .iter()
        .map(|t| if t == "J" || t == "D" { 2 } else { 1 })
        .sum())
}
