//! Smali text frontend.
//!
//! Parses one class per source text into [`ClassDef`]. Instructions outside the
//! supported subset are recognized against the Dalvik mnemonic table and
//! lowered to `nop`; unknown mnemonics are syntax errors.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::ir::{
    is_class_descriptor, package_of, param_words, ClassDef, FieldDef, FieldRef, Instruction, MethodIR, MethodRef,
    Opcode, Reg,
};
use super::FrontendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Form {
    None,
    Reg,
    RegString,
    RegReg,
    RegRegReg,
    RegList,
    RegLabel,
    RegRegLabel,
    Label,
    RegField,
    RegRegField,
    RegType,
    RegRegType,
}

enum Mnemonic {
    Supported(Opcode, Form),
    Lowered,
}

fn lookup_mnemonic(m: &str) -> Option<Mnemonic> {
    use Form::*;
    use Opcode::*;
    let supported = match m {
        "nop" => Some((Nop, None)),
        "const-string" | "const-string/jumbo" => Some((ConstString, RegString)),
        "move" | "move/from16" | "move/16" | "move-wide" | "move-wide/from16" | "move-wide/16" | "move-object"
        | "move-object/from16" | "move-object/16" => Some((Move, RegReg)),
        "move-result" | "move-result-wide" | "move-result-object" => Some((MoveResult, Reg)),
        "invoke-virtual" | "invoke-virtual/range" => Some((InvokeVirtual, RegList)),
        "invoke-static" | "invoke-static/range" => Some((InvokeStatic, RegList)),
        "invoke-direct" | "invoke-direct/range" => Some((InvokeDirect, RegList)),
        "invoke-interface" | "invoke-interface/range" => Some((InvokeInterface, RegList)),
        "return-void" => Some((ReturnVoid, None)),
        "return-object" => Some((ReturnObject, Reg)),
        "return" | "return-wide" => Some((ReturnValue, Reg)),
        "if-eqz" => Some((IfEqz, RegLabel)),
        "if-nez" => Some((IfNez, RegLabel)),
        "if-eq" => Some((IfEq, RegRegLabel)),
        "if-ne" => Some((IfNe, RegRegLabel)),
        "goto" | "goto/16" | "goto/32" => Some((Goto, Label)),
        "new-instance" => Some((NewInstance, RegType)),
        "new-array" => Some((NewArray, RegRegType)),
        "aput-object" => Some((ArrayPut, RegRegReg)),
        _ => Option::None,
    };
    if let Some((op, form)) = supported {
        return Some(Mnemonic::Supported(op, form));
    }
    if let Some(suffix) = m.strip_prefix("sget") {
        if FIELD_SUFFIXES.contains(&suffix) {
            return Some(Mnemonic::Supported(StaticGet, RegField));
        }
    }
    if let Some(suffix) = m.strip_prefix("iget") {
        if FIELD_SUFFIXES.contains(&suffix) {
            return Some(Mnemonic::Supported(InstanceGet, RegRegField));
        }
    }
    is_known_dalvik(m).then_some(Mnemonic::Lowered)
}

const FIELD_SUFFIXES: &[&str] = &["", "-wide", "-object", "-boolean", "-byte", "-char", "-short"];

const OTHER_MNEMONICS: &[&str] = &[
    "move-exception",
    "return-void-no-barrier",
    "const/4",
    "const/16",
    "const",
    "const/high16",
    "const-wide/16",
    "const-wide/32",
    "const-wide",
    "const-wide/high16",
    "const-class",
    "const-method-handle",
    "const-method-type",
    "monitor-enter",
    "monitor-exit",
    "check-cast",
    "instance-of",
    "array-length",
    "filled-new-array",
    "filled-new-array/range",
    "fill-array-data",
    "throw",
    "packed-switch",
    "sparse-switch",
    "cmpl-float",
    "cmpg-float",
    "cmpl-double",
    "cmpg-double",
    "cmp-long",
    "if-lt",
    "if-ge",
    "if-gt",
    "if-le",
    "if-ltz",
    "if-gez",
    "if-gtz",
    "if-lez",
    "invoke-super",
    "invoke-super/range",
    "invoke-polymorphic",
    "invoke-polymorphic/range",
    "invoke-custom",
    "invoke-custom/range",
    "neg-int",
    "not-int",
    "neg-long",
    "not-long",
    "neg-float",
    "neg-double",
    "int-to-byte",
    "int-to-char",
    "int-to-short",
    "rsub-int",
];

fn is_known_dalvik(m: &str) -> bool {
    if OTHER_MNEMONICS.contains(&m) {
        return true;
    }
    for prefix in ["aget", "aput", "iput", "sput"] {
        if let Some(s) = m.strip_prefix(prefix) {
            if FIELD_SUFFIXES.contains(&s) {
                return true;
            }
        }
    }
    const PRIMS: &[&str] = &["int", "long", "float", "double"];
    if let Some((from, to)) = m.split_once("-to-") {
        return PRIMS.contains(&from) && PRIMS.contains(&to) && from != to;
    }
    let (base, suffix) = match m.split_once('/') {
        Some((b, s)) => (b, Some(s)),
        None => (m, None),
    };
    let Some((op, ty)) = base.split_once('-') else {
        return false;
    };
    let int_ops = ["add", "sub", "mul", "div", "rem", "and", "or", "xor", "shl", "shr", "ushr"];
    let float_ops = ["add", "sub", "mul", "div", "rem"];
    let lit_ok = |lit: &str| match lit {
        "lit16" => ["add", "mul", "div", "rem", "and", "or", "xor"].contains(&op),
        "lit8" => int_ops.contains(&op) || op == "rsub",
        _ => false,
    };
    match (ty, suffix) {
        ("int" | "long", None | Some("2addr")) => int_ops.contains(&op),
        ("float" | "double", None | Some("2addr")) => float_ops.contains(&op),
        ("int", Some(lit)) => lit_ok(lit),
        _ => false,
    }
}

/// Method-level directives that carry no information we need.
const SKIPPABLE_METHOD_DIRECTIVES: &[&str] = &[
    ".line",
    ".local",
    ".end local",
    ".restart local",
    ".prologue",
    ".epilogue",
    ".source",
    ".catch",
    ".catchall",
];

/// Directives opening a block that is skipped up to its `.end` line.
const SKIPPABLE_BLOCKS: &[(&str, &str)] = &[
    (".annotation", ".end annotation"),
    (".subannotation", ".end subannotation"),
    (".param", ".end param"),
    (".array-data", ".end array-data"),
    (".packed-switch", ".end packed-switch"),
    (".sparse-switch", ".end sparse-switch"),
];

/// Strips a `#` comment that is not inside a string literal.
fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == '"' {
            in_str = true;
        } else if c == '#' {
            return &line[..i];
        }
    }
    line
}

/// Returns the directive keyword of a line (`.end method` counts as one keyword).
fn directive_of(line: &str) -> &str {
    let mut words = line.split_whitespace();
    let first = words.next().unwrap_or("");
    if first == ".end" || first == ".restart" {
        let second_start = line[first.len()..].trim_start();
        let len = first.len() + 1 + second_start.split_whitespace().next().map_or(0, str::len);
        return &line[..len.min(line.len())];
    }
    first
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
    col0: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> FrontendError {
        FrontendError::Syntax {
            line: self.line,
            column: self.col0 + self.pos + 1,
            message: msg.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        let r = self.rest();
        self.pos += r.len() - r.trim_start().len();
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), FrontendError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.rest().is_empty()
    }

    fn raw_reg(&mut self) -> Result<(char, u16), FrontendError> {
        self.skip_ws();
        let r = self.rest();
        let kind = r.chars().next().filter(|c| *c == 'v' || *c == 'p').ok_or_else(|| self.err("expected register"))?;
        let digits: String = r[1..].chars().take_while(char::is_ascii_digit).collect();
        if digits.is_empty() {
            return Err(self.err("expected register number"));
        }
        let n = digits.parse().map_err(|_| self.err("register number out of range"))?;
        self.pos += 1 + digits.len();
        Ok((kind, n))
    }

    fn token(&mut self) -> &'a str {
        self.skip_ws();
        let r = self.rest();
        let end = r.find(|c: char| c == ',' || c.is_whitespace()).unwrap_or(r.len());
        self.pos += end;
        &r[..end]
    }

    fn label(&mut self) -> Result<String, FrontendError> {
        self.skip_ws();
        if !self.rest().starts_with(':') {
            return Err(self.err("expected label"));
        }
        self.pos += 1;
        let tok = self.token();
        if tok.is_empty() {
            return Err(self.err("empty label"));
        }
        Ok(tok.to_string())
    }

    fn string(&mut self) -> Result<String, FrontendError> {
        self.skip_ws();
        let start_col = self.pos;
        let (value, used) = parse_string_literal(self.rest()).map_err(|m| FrontendError::Syntax {
            line: self.line,
            column: self.col0 + start_col + 1,
            message: m,
        })?;
        self.pos += used;
        Ok(value)
    }
}

/// Decodes a quoted smali string literal, returning the value and bytes consumed.
pub(crate) fn parse_string_literal(s: &str) -> Result<(String, usize), String> {
    let mut chars = s.char_indices();
    if !matches!(chars.next(), Some((_, '"'))) {
        return Err("expected string literal".into());
    }
    let mut out = String::new();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Ok((out, i + 1)),
            '\\' => {
                let (_, e) = chars.next().ok_or("unterminated escape")?;
                match e {
                    'n' => out.push('\n'),
                    't' => out.push('\t'),
                    'r' => out.push('\r'),
                    'b' => out.push('\u{8}'),
                    'f' => out.push('\u{c}'),
                    '0' => out.push('\0'),
                    '\'' | '"' | '\\' => out.push(e),
                    'u' => {
                        let mut code = 0u32;
                        for _ in 0..4 {
                            let (_, h) = chars.next().ok_or("truncated \\u escape")?;
                            code = code * 16 + h.to_digit(16).ok_or("bad hex digit in \\u escape")?;
                        }
                        // Surrogate pairs are how baksmali spells non-BMP characters.
                        if (0xD800..0xDC00).contains(&code) {
                            let rest: String = chars.clone().take(6).map(|(_, c)| c).collect();
                            let low = rest
                                .strip_prefix("\\u")
                                .and_then(|h| u32::from_str_radix(h, 16).ok())
                                .filter(|l| (0xDC00..0xE000).contains(l))
                                .ok_or("unpaired surrogate")?;
                            for _ in 0..6 {
                                chars.next();
                            }
                            code = 0x10000 + ((code - 0xD800) << 10) + (low - 0xDC00);
                        }
                        out.push(char::from_u32(code).ok_or("invalid code point")?);
                    }
                    other => return Err(format!("unknown escape `\\{other}`")),
                }
            }
            c => out.push(c),
        }
    }
    Err("unterminated string literal".into())
}

pub(crate) fn escape_string_literal(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

struct PendingBranch {
    at: usize,
    label: String,
    line: usize,
    column: usize,
}

struct MethodBuilder {
    method: MethodIR,
    register_decl: bool,
    labels: HashMap<String, usize>,
    pending: Vec<PendingBranch>,
}

impl MethodBuilder {
    fn reg(&self, cur: &mut Cursor<'_>) -> Result<Reg, FrontendError> {
        let (kind, n) = cur.raw_reg()?;
        let r = if kind == 'p' {
            let base = self.method.first_param_register();
            if n >= self.method.ins {
                return Err(cur.err(format!("p{n} exceeds {} argument words", self.method.ins)));
            }
            base + n
        } else {
            n
        };
        if r >= self.method.registers {
            return Err(cur.err(format!("{kind}{n} exceeds {} registers", self.method.registers)));
        }
        Ok(Reg(r))
    }

    fn reg_list(&self, cur: &mut Cursor<'_>) -> Result<Vec<Reg>, FrontendError> {
        cur.expect('{')?;
        let mut regs = Vec::new();
        if cur.eat('}') {
            return Ok(regs);
        }
        let first = self.reg(cur)?;
        cur.skip_ws();
        if cur.rest().starts_with("..") {
            cur.pos += 2;
            let last = self.reg(cur)?;
            if last.0 < first.0 {
                return Err(cur.err("descending register range"));
            }
            regs.extend((first.0..=last.0).map(Reg));
            cur.expect('}')?;
            return Ok(regs);
        }
        regs.push(first);
        while cur.eat(',') {
            regs.push(self.reg(cur)?);
        }
        cur.expect('}')?;
        Ok(regs)
    }

    fn instruction(&mut self, line: &str, line_no: usize, col0: usize) -> Result<(), FrontendError> {
        let mnemonic = line.split_whitespace().next().unwrap_or("");
        let index = self.method.instructions.len();
        let looked_up = lookup_mnemonic(mnemonic).ok_or_else(|| FrontendError::Syntax {
            line: line_no,
            column: col0 + 1,
            message: format!("unknown instruction `{mnemonic}`"),
        })?;
        if !self.register_decl {
            return Err(FrontendError::Syntax {
                line: line_no,
                column: col0 + 1,
                message: "instruction before .registers/.locals".into(),
            });
        }
        let (opcode, form) = match looked_up {
            Mnemonic::Lowered => {
                self.method.lowered += 1;
                self.method.instructions.push(Instruction::nop(index));
                return Ok(());
            }
            Mnemonic::Supported(op, form) => (op, form),
        };
        let mut cur = Cursor {
            text: line,
            pos: mnemonic.len(),
            line: line_no,
            col0,
        };
        let mut ins = Instruction::new(index, opcode, Vec::new());
        let mut label = None;
        let comma = |cur: &mut Cursor<'_>| cur.expect(',');
        match form {
            Form::None => {}
            Form::Reg => ins.operands.push(self.reg(&mut cur)?),
            Form::RegString => {
                ins.operands.push(self.reg(&mut cur)?);
                comma(&mut cur)?;
                ins.literal = Some(cur.string()?);
            }
            Form::RegReg | Form::RegRegReg => {
                ins.operands.push(self.reg(&mut cur)?);
                comma(&mut cur)?;
                ins.operands.push(self.reg(&mut cur)?);
                if form == Form::RegRegReg {
                    comma(&mut cur)?;
                    ins.operands.push(self.reg(&mut cur)?);
                }
            }
            Form::RegList => {
                ins.operands = self.reg_list(&mut cur)?;
                comma(&mut cur)?;
                let col = cur.pos;
                let tok = cur.token();
                let mref: MethodRef = tok.parse().map_err(|e| FrontendError::Syntax {
                    line: line_no,
                    column: col0 + col + 1,
                    message: e,
                })?;
                ins.method_ref = Some(mref);
            }
            Form::RegLabel | Form::RegRegLabel | Form::Label => {
                if form != Form::Label {
                    ins.operands.push(self.reg(&mut cur)?);
                    comma(&mut cur)?;
                    if form == Form::RegRegLabel {
                        ins.operands.push(self.reg(&mut cur)?);
                        comma(&mut cur)?;
                    }
                }
                let col = cur.col0 + cur.pos + 1;
                label = Some((cur.label()?, col));
            }
            Form::RegField | Form::RegRegField => {
                ins.operands.push(self.reg(&mut cur)?);
                comma(&mut cur)?;
                if form == Form::RegRegField {
                    ins.operands.push(self.reg(&mut cur)?);
                    comma(&mut cur)?;
                }
                let col = cur.pos;
                let tok = cur.token();
                ins.field_ref = Some(parse_field_ref(tok).ok_or_else(|| FrontendError::Syntax {
                    line: line_no,
                    column: col0 + col + 1,
                    message: format!("malformed field reference `{tok}`"),
                })?);
            }
            Form::RegType | Form::RegRegType => {
                ins.operands.push(self.reg(&mut cur)?);
                comma(&mut cur)?;
                if form == Form::RegRegType {
                    ins.operands.push(self.reg(&mut cur)?);
                    comma(&mut cur)?;
                }
                let tok = cur.token();
                if tok.is_empty() {
                    return Err(cur.err("expected type descriptor"));
                }
                ins.type_ref = Some(tok.to_string());
            }
        }
        if !cur.at_end() {
            return Err(cur.err(format!("unexpected trailing text `{}`", cur.rest().trim())));
        }
        if let Some((name, column)) = label {
            self.pending.push(PendingBranch {
                at: index,
                label: name,
                line: line_no,
                column,
            });
        }
        self.method.instructions.push(ins);
        Ok(())
    }

    fn finish(mut self) -> Result<MethodIR, FrontendError> {
        let len = self.method.instructions.len();
        for p in self.pending {
            let target = *self.labels.get(&p.label).ok_or_else(|| FrontendError::Syntax {
                line: p.line,
                column: p.column,
                message: format!("undefined label `:{}`", p.label),
            })?;
            if target >= len {
                return Err(FrontendError::Syntax {
                    line: p.line,
                    column: p.column,
                    message: format!("label `:{}` points past the end of the method", p.label),
                });
            }
            self.method.instructions[p.at].branch_target = Some(target);
        }
        Ok(self.method)
    }
}

fn parse_field_ref(tok: &str) -> Option<FieldRef> {
    let (owner, rest) = tok.split_once("->")?;
    let (name, ty) = rest.split_once(':')?;
    if owner.is_empty() || name.is_empty() || ty.is_empty() {
        return None;
    }
    Some(FieldRef {
        owner: owner.into(),
        name: name.into(),
        ty: ty.into(),
    })
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> FrontendError {
    FrontendError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn parse_method_header(rest: &str, line_no: usize, col0: usize, owner: &str) -> Result<MethodBuilder, FrontendError> {
    let words: Vec<&str> = rest.split_whitespace().collect();
    let sig = words.last().ok_or_else(|| syntax(line_no, col0 + 1, "missing method signature"))?;
    let flags = &words[..words.len() - 1];
    let paren = sig.find('(').ok_or_else(|| syntax(line_no, col0 + 1, format!("malformed method signature `{sig}`")))?;
    let (name, descriptor) = sig.split_at(paren);
    if name.is_empty() || !descriptor.contains(')') {
        return Err(syntax(line_no, col0 + 1, format!("malformed method signature `{sig}`")));
    }
    let is_static = flags.contains(&"static");
    let words_for_params = param_words(descriptor).map_err(|e| syntax(line_no, col0 + 1, e))?;
    let ins = words_for_params + u16::from(!is_static);
    Ok(MethodBuilder {
        method: MethodIR {
            owner: owner.to_string(),
            name: name.to_string(),
            descriptor: descriptor.to_string(),
            registers: ins,
            ins,
            is_static,
            is_abstract_or_native: flags.contains(&"abstract") || flags.contains(&"native"),
            instructions: Vec::new(),
            lowered: 0,
        },
        register_decl: false,
        labels: HashMap::new(),
        pending: Vec::new(),
    })
}

fn parse_field(rest: &str, line_no: usize, col0: usize) -> Result<FieldDef, FrontendError> {
    let (decl, init) = match rest.find('=') {
        Some(eq) if !rest[..eq].contains('"') => (&rest[..eq], Some(rest[eq + 1..].trim())),
        _ => (rest, None),
    };
    let words: Vec<&str> = decl.split_whitespace().collect();
    let spec = words.last().ok_or_else(|| syntax(line_no, col0 + 1, "missing field name"))?;
    let (name, ty) = spec
        .split_once(':')
        .filter(|(n, t)| !n.is_empty() && !t.is_empty())
        .ok_or_else(|| syntax(line_no, col0 + 1, format!("malformed field `{spec}`")))?;
    let initial = match init {
        Some(v) if v.starts_with('"') => {
            let (s, used) = parse_string_literal(v).map_err(|m| syntax(line_no, col0 + 1, m))?;
            if !v[used..].trim().is_empty() {
                return Err(syntax(line_no, col0 + 1, "trailing text after field initializer"));
            }
            Some(s)
        }
        _ => None,
    };
    Ok(FieldDef {
        name: name.to_string(),
        ty: ty.to_string(),
        is_static: words.contains(&"static"),
        initial,
    })
}

/// Parses the smali source of a single class.
pub fn parse_smali_class(text: &str) -> Result<ClassDef, FrontendError> {
    let mut class: Option<ClassDef> = None;
    let mut method: Option<MethodBuilder> = None;
    let mut skip_until: Option<(&str, usize)> = None;
    let mut skip_depth = 0usize;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = strip_comment(raw);
        let line = body.trim();
        if line.is_empty() {
            continue;
        }
        let col0 = body.len() - body.trim_start().len();
        let directive = directive_of(line);

        if let Some((end, _)) = skip_until {
            // Nested annotations reuse the same terminator.
            if directive == ".annotation" || directive == ".subannotation" {
                skip_depth += 1;
            } else if directive == end || directive == ".end subannotation" {
                if skip_depth == 0 {
                    skip_until = None;
                } else {
                    skip_depth -= 1;
                }
            }
            continue;
        }
        if let Some(&(_, end)) = SKIPPABLE_BLOCKS.iter().find(|(open, _)| *open == directive) {
            // `.param p1` without a body is a single line.
            if directive == ".param" && !param_has_body(text, i) {
                continue;
            }
            skip_until = Some((end, line_no));
            skip_depth = 0;
            continue;
        }

        if let Some(mb) = method.as_mut() {
            if directive == ".end method" {
                let done = method.take().map(MethodBuilder::finish).transpose()?;
                if let (Some(m), Some(c)) = (done, class.as_mut()) {
                    if c.find_method(&m.name, &m.descriptor).is_some() {
                        return Err(syntax(line_no, col0 + 1, format!("duplicate method {}", m.signature())));
                    }
                    c.methods.push(m);
                }
                continue;
            }
            if directive == ".registers" || directive == ".locals" {
                let n: u16 = line[directive.len()..]
                    .trim()
                    .parse()
                    .map_err(|_| syntax(line_no, col0 + 1, format!("bad {directive} count")))?;
                if mb.method.is_abstract_or_native {
                    return Err(syntax(line_no, col0 + 1, "register declaration in abstract/native method"));
                }
                mb.method.registers = if directive == ".registers" {
                    if n < mb.method.ins {
                        return Err(syntax(line_no, col0 + 1, ".registers smaller than argument words"));
                    }
                    n
                } else {
                    n.checked_add(mb.method.ins).ok_or_else(|| syntax(line_no, col0 + 1, "register count overflow"))?
                };
                mb.register_decl = true;
                continue;
            }
            if SKIPPABLE_METHOD_DIRECTIVES.contains(&directive) {
                continue;
            }
            if let Some(label) = line.strip_prefix(':') {
                let name = label.trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(syntax(line_no, col0 + 1, "malformed label"));
                }
                mb.labels.insert(name.to_string(), mb.method.instructions.len());
                continue;
            }
            if directive.starts_with('.') {
                return Err(FrontendError::UnsupportedDirective {
                    line: line_no,
                    directive: directive.to_string(),
                });
            }
            if mb.method.is_abstract_or_native {
                return Err(syntax(line_no, col0 + 1, "instruction in abstract/native method"));
            }
            mb.instruction(line, line_no, col0)?;
            continue;
        }

        let rest = line[directive.len()..].trim();
        match directive {
            ".class" => {
                if class.is_some() {
                    return Err(syntax(line_no, col0 + 1, "second .class directive"));
                }
                let words: Vec<&str> = rest.split_whitespace().collect();
                let name = words.last().copied().unwrap_or("");
                if !is_class_descriptor(name) {
                    return Err(syntax(line_no, col0 + 1, format!("invalid class descriptor `{name}`")));
                }
                class = Some(ClassDef {
                    class_name: name.to_string(),
                    access: words[..words.len() - 1].iter().map(|w| w.to_string()).collect(),
                    super_name: None,
                    interfaces: Vec::new(),
                    fields: Vec::new(),
                    methods: Vec::new(),
                    source_package: package_of(name),
                });
            }
            ".super" | ".implements" | ".field" | ".method" => {
                let c = class.as_mut().ok_or_else(|| syntax(line_no, col0 + 1, format!("{directive} before .class")))?;
                match directive {
                    ".super" => {
                        if !is_class_descriptor(rest) {
                            return Err(syntax(line_no, col0 + 1, format!("invalid super descriptor `{rest}`")));
                        }
                        c.super_name = Some(rest.to_string());
                    }
                    ".implements" => c.interfaces.push(rest.to_string()),
                    ".field" => c.fields.push(parse_field(rest, line_no, col0)?),
                    _ => method = Some(parse_method_header(rest, line_no, col0, &c.class_name)?),
                }
            }
            ".source" | ".end field" | ".debug" | ".enum" => {}
            _ if directive.starts_with('.') => {
                return Err(FrontendError::UnsupportedDirective {
                    line: line_no,
                    directive: directive.to_string(),
                })
            }
            _ => return Err(syntax(line_no, col0 + 1, format!("unexpected `{line}` outside a method"))),
        }
    }
    if let Some((end, line)) = skip_until {
        return Err(syntax(line, 1, format!("missing `{end}`")));
    }
    if method.is_some() {
        return Err(syntax(text.lines().count(), 1, "missing `.end method`"));
    }
    class.ok_or_else(|| syntax(1, 1, "missing .class directive"))
}

/// A `.param` line opens a block only when an `.end param` follows before the next
/// instruction-level line.
fn param_has_body(text: &str, line_idx: usize) -> bool {
    for raw in text.lines().skip(line_idx + 1) {
        let l = strip_comment(raw).trim();
        if l.is_empty() || l.starts_with(".annotation") {
            if l.starts_with(".annotation") {
                return true;
            }
            continue;
        }
        return l.starts_with(".end param");
    }
    false
}

/// Renders a class back to smali accepted by [`parse_smali_class`]. Labels are
/// synthesized as `:L<index>`.
pub fn print_class(class: &ClassDef) -> String {
    let mut out = String::new();
    let mut head = String::from(".class");
    for a in &class.access {
        head.push(' ');
        head.push_str(a);
    }
    let _ = writeln!(out, "{head} {}", class.class_name);
    if let Some(s) = &class.super_name {
        let _ = writeln!(out, ".super {s}");
    }
    for i in &class.interfaces {
        let _ = writeln!(out, ".implements {i}");
    }
    for f in &class.fields {
        let stat = if f.is_static { " static" } else { "" };
        let _ = write!(out, "\n.field public{stat} {}:{}", f.name, f.ty);
        if let Some(init) = &f.initial {
            let _ = write!(out, " = {}", escape_string_literal(init));
        }
        out.push('\n');
    }
    for m in &class.methods {
        let mut flags = String::from("public");
        if m.is_static {
            flags.push_str(" static");
        }
        if m.is_abstract_or_native {
            flags.push_str(" abstract");
        }
        let _ = writeln!(out, "\n.method {flags} {}{}", m.name, m.descriptor);
        if m.has_body() {
            let _ = writeln!(out, "    .registers {}", m.registers);
            let targets: std::collections::BTreeSet<usize> =
                m.instructions.iter().filter_map(|i| i.branch_target).collect();
            for ins in &m.instructions {
                if targets.contains(&ins.index) {
                    let _ = writeln!(out, "    :L{}", ins.index);
                }
                let _ = writeln!(out, "    {}", format_instruction(ins));
            }
        }
        out.push_str(".end method\n");
    }
    out
}

pub fn format_instruction(ins: &Instruction) -> String {
    let mut s = ins.opcode.mnemonic().to_string();
    if ins.opcode.is_invoke() {
        let regs: Vec<String> = ins.operands.iter().map(Reg::to_string).collect();
        let _ = write!(s, " {{{}}}", regs.join(", "));
    } else {
        let regs: Vec<String> = ins.operands.iter().map(Reg::to_string).collect();
        if !regs.is_empty() {
            let _ = write!(s, " {}", regs.join(", "));
        }
    }
    let mut tail = Vec::new();
    if let Some(l) = &ins.literal {
        tail.push(escape_string_literal(l));
    }
    if let Some(f) = &ins.field_ref {
        tail.push(f.to_string());
    }
    if let Some(m) = &ins.method_ref {
        tail.push(m.to_string());
    }
    if let Some(t) = &ins.type_ref {
        tail.push(t.clone());
    }
    if let Some(t) = ins.branch_target {
        tail.push(format!(":L{t}"));
    }
    for (i, t) in tail.into_iter().enumerate() {
        if i == 0 && ins.operands.is_empty() && !ins.opcode.is_invoke() {
            s.push(' ');
        } else {
            s.push_str(", ");
        }
        s.push_str(&t);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_CONST: &str = r#"
.class public Lcom/app/Foo;
.super Ljava/lang/Object;
.source "Foo.java"

.method public static brand()Ljava/lang/String;
    .registers 1
    const-string v0, "oppo"   # trailing comment
    return-object v0
.end method
"#;

    #[test]
    fn single_const_string() {
        let c = parse_smali_class(ONE_CONST).unwrap();
        assert_eq!(c.class_name, "Lcom/app/Foo;");
        assert_eq!(c.source_package, "com.app");
        let m = &c.methods[0];
        assert_eq!(m.instructions.len(), 2);
        assert_eq!(m.instructions[0].opcode, Opcode::ConstString);
        assert_eq!(m.instructions[0].literal.as_deref(), Some("oppo"));
        m.validate().unwrap();
    }

    #[test]
    fn abstract_method_has_no_body() {
        let src = ".class public abstract Lcom/app/A;\n.super Ljava/lang/Object;\n.method public abstract run(I)V\n.end method\n";
        let c = parse_smali_class(src).unwrap();
        assert!(c.methods[0].is_abstract_or_native);
        assert!(c.methods[0].instructions.is_empty());
    }

    #[test]
    fn params_are_normalized_and_labels_resolved() {
        let src = r#"
.class public Lcom/app/B;
.super Ljava/lang/Object;
.method public check(Ljava/lang/String;J)Z
    .locals 1
    if-eqz p1, :cond_0
    move-object v0, p1
    goto :cond_0
    :cond_0
    return p0
.end method
"#;
        let c = parse_smali_class(src).unwrap();
        let m = &c.methods[0];
        // 1 local + this + String + long(2)
        assert_eq!(m.registers, 5);
        assert_eq!(m.first_param_register(), 1);
        assert_eq!(m.instructions[0].operands, vec![Reg(2)]);
        assert_eq!(m.instructions[0].branch_target, Some(3));
        assert_eq!(m.instructions[2].branch_target, Some(3));
        assert_eq!(m.instructions[3].operands, vec![Reg(1)]);
    }

    #[test]
    fn unsupported_opcodes_lower_to_nop() {
        let src = r#"
.class public Lcom/app/C;
.super Ljava/lang/Object;
.method public static f()V
    .registers 3
    const/4 v0, 0x1
    add-int/lit8 v1, v0, 0x2
    invoke-super {v0}, Ljava/lang/Object;->hashCode()I
    packed-switch v0, :pswitch_data_0
    return-void
    :pswitch_data_0
    .packed-switch 0x0
        :L0
    .end packed-switch
.end method
"#;
        // Label after the last instruction is only an error if used by a supported branch.
        let c = parse_smali_class(src).unwrap();
        let m = &c.methods[0];
        assert_eq!(m.lowered, 4);
        assert!(m.instructions[..4].iter().all(|i| i.opcode == Opcode::Nop));
    }

    #[test]
    fn unknown_mnemonic_reports_position() {
        let src = ".class public Lx/Y;\n.method public static f()V\n    .registers 1\n    frobnicate v0\n.end method\n";
        match parse_smali_class(src) {
            Err(FrontendError::Syntax { line, column, .. }) => assert_eq!((line, column), (4, 5)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_directive_is_rejected() {
        let src = ".class public Lx/Y;\n.frobnicate foo\n";
        assert!(matches!(
            parse_smali_class(src),
            Err(FrontendError::UnsupportedDirective { line: 2, .. })
        ));
    }

    #[test]
    fn string_escapes_round_trip() {
        for s in ["plain", "a\"b", "back\\slash", "tab\tnl\n", "ünï\u{1F600}", "#not a comment"] {
            let esc = escape_string_literal(s);
            let (back, used) = parse_string_literal(&esc).unwrap();
            assert_eq!(back, s);
            assert_eq!(used, esc.len());
        }
        let (v, _) = parse_string_literal(r#""😀""#).unwrap();
        assert_eq!(v, "\u{1F600}");
    }

    #[test]
    fn comment_inside_string_is_kept() {
        assert_eq!(strip_comment(r#"const-string v0, "a#b" # c"#), r#"const-string v0, "a#b" "#);
    }

    #[test]
    fn register_out_of_range_is_syntax_error() {
        let src = ".class public Lx/Y;\n.method public static f()V\n    .registers 1\n    move-object v0, v3\n.end method\n";
        assert!(matches!(parse_smali_class(src), Err(FrontendError::Syntax { line: 4, .. })));
    }

    #[test]
    fn annotations_and_field_initializers() {
        let src = r#"
.class public final Lcom/app/K;
.super Ljava/lang/Object;
.annotation system Ldalvik/annotation/MemberClasses;
    value = {
        Lcom/app/K$1;
    }
.end annotation
.field public static final BRAND:Ljava/lang/String; = "vivo"
.field private count:I
.method public static k()V
    .registers 1
    .annotation runtime Ljava/lang/Deprecated;
    .end annotation
    .line 12
    return-void
.end method
"#;
        let c = parse_smali_class(src).unwrap();
        assert_eq!(c.fields.len(), 2);
        assert_eq!(c.fields[0].initial.as_deref(), Some("vivo"));
        assert!(c.fields[0].is_static);
        assert_eq!(c.methods[0].instructions.len(), 1);
    }

    #[test]
    fn range_invoke_expands() {
        let src = ".class public Lx/Y;\n.method public static f()V\n    .registers 4\n    invoke-static/range {v1 .. v3}, Lx/Y;->g(III)V\n    return-void\n.end method\n";
        let c = parse_smali_class(src).unwrap();
        assert_eq!(c.methods[0].instructions[0].operands, vec![Reg(1), Reg(2), Reg(3)]);
    }
}
