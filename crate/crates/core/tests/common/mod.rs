#![allow(dead_code)]

pub mod invariants;

use std::collections::BTreeSet;

use fragscope::behavior::{detect_behaviors, Detection};
use fragscope::device_db::{default_source_specs, DeviceInfoDB};
use fragscope::fixtures::{fixtures_dir, load_fixtures, Fixture};
use fragscope::frontend::Program;
use fragscope::graphs::Icfg;
use fragscope::rules::{categories_of, classify, RuleSet};
use fragscope::taint::{find_sources, propagate_inter, DeviceInfoSource, TaintResult};
use fragscope::{Budget, Deadline};

pub struct Run {
    pub program: Program,
    pub icfg: Icfg,
    pub sources: Vec<DeviceInfoSource>,
    pub taint: TaintResult,
    pub detection: Detection,
}

impl Run {
    pub fn of_program(program: Program) -> Self {
        let icfg = Icfg::build(&program).expect("cfg");
        let sources = find_sources(&program, &default_source_specs());
        let deadline = Deadline::unlimited();
        let taint = propagate_inter(&program, &icfg, &sources, &Budget::default(), &deadline);
        let detection = detect_behaviors(&program, &icfg, &taint, &DeviceInfoDB::seed(), &deadline);
        Self {
            program,
            icfg,
            sources,
            taint,
            detection,
        }
    }

    pub fn of(fixture: &Fixture) -> Self {
        Self::of_program(fixture.load_program().expect("fixture loads"))
    }

    /// `(method, branch index, comparison, identifiers)` per confirmed guard.
    pub fn guard_keys(&self) -> BTreeSet<(String, usize, String, BTreeSet<String>)> {
        self.detection
            .guards
            .iter()
            .map(|g| {
                (
                    g.site.method.to_string(),
                    g.site.branch_instruction,
                    serde_json::to_value(g.site.comparison).unwrap().as_str().unwrap().to_string(),
                    g.identifiers.iter().map(|m| m.db_entry.clone()).collect(),
                )
            })
            .collect()
    }

    pub fn categories(&self, method: &str, index: usize, rules: &RuleSet) -> Option<BTreeSet<String>> {
        self.detection
            .snippets
            .iter()
            .find(|s| s.guard.site.method.to_string() == method && s.guard.site.branch_instruction == index)
            .map(|s| categories_of(&classify(s, rules)))
    }
}

pub fn corpus() -> Vec<Fixture> {
    load_fixtures(&fixtures_dir()).expect("fixture corpus")
}

pub fn fixture(id: &str) -> Fixture {
    corpus().into_iter().find(|f| f.id() == id).unwrap_or_else(|| panic!("no fixture {id}"))
}

/// One generated instruction; register and target numbers are reduced
/// modulo the method's shape when rendered.
#[derive(Debug, Clone)]
pub enum GenOp {
    Source(u8, bool),
    Const(u8, u8),
    Move(u8, u8),
    Lower(u8, u8),
    Call(u8, u8, u8),
    Equals(u8, u8, u8),
    IfZero(u8, u8),
    Loop(u8, u8),
    Return(u8),
    /// Literal comparison feeding a forward branch.
    Check(u8, u8, u8),
}

pub const GEN_LITERALS: [&str; 5] = ["samsung", "oppo", "x", "Mi 5", "hello"];

pub fn gen_op(allow_loops: bool) -> impl proptest::strategy::Strategy<Value = GenOp> {
    use proptest::prelude::*;
    let r = || 0u8..5;
    prop_oneof![
        3 => (r(), any::<bool>()).prop_map(|(a, b)| GenOp::Source(a, b)),
        3 => (r(), 0u8..5).prop_map(|(a, b)| GenOp::Const(a, b)),
        2 => (r(), r()).prop_map(|(a, b)| GenOp::Move(a, b)),
        2 => (r(), r()).prop_map(|(a, b)| GenOp::Lower(a, b)),
        2 => (r(), any::<u8>(), r()).prop_map(|(a, j, d)| GenOp::Call(a, j, d)),
        3 => (r(), r(), r()).prop_map(|(a, b, d)| GenOp::Equals(a, b, d)),
        3 => (r(), any::<u8>()).prop_map(|(a, t)| GenOp::IfZero(a, t)),
        1 => (r(), any::<u8>()).prop_map(move |(a, t)| if allow_loops { GenOp::Loop(a, t) } else { GenOp::IfZero(a, t) }),
        1 => r().prop_map(GenOp::Return),
        2 => (r(), 0u8..5, any::<u8>()).prop_map(|(a, l, t)| GenOp::Check(a, l, t)),
    ]
}

pub fn gen_methods(allow_loops: bool) -> impl proptest::strategy::Strategy<Value = Vec<Vec<GenOp>>> {
    use proptest::prelude::*;
    prop::collection::vec(prop::collection::vec(gen_op(allow_loops), 1..14), 1..4)
}

/// Renders generated bodies as one smali class `Lgen/G;` whose methods are
/// `static m<i>(String)String` with registers v0..v3 and `p0 == v4`.
pub fn render_program(methods: &[Vec<GenOp>]) -> String {
    let n = methods.len();
    let mut s = String::from(".class public Lgen/G;\n.super Ljava/lang/Object;\n\n");
    for (mi, ops) in methods.iter().enumerate() {
        s.push_str(&format!(".method public static m{mi}(Ljava/lang/String;)Ljava/lang/String;\n    .registers 5\n"));
        let len = ops.len();
        for (k, op) in ops.iter().enumerate() {
            s.push_str(&format!("    :L{k}\n"));
            let line = match *op {
                GenOp::Source(r, brand) => format!(
                    "sget-object v{r}, Landroid/os/Build;->{}:Ljava/lang/String;",
                    if brand { "BRAND" } else { "MODEL" }
                ),
                GenOp::Const(r, l) => format!("const-string v{r}, \"{}\"", GEN_LITERALS[l as usize]),
                GenOp::Move(d, a) => format!("move-object v{d}, v{a}"),
                GenOp::Lower(a, d) => format!(
                    "invoke-virtual {{v{a}}}, Ljava/lang/String;->toLowerCase()Ljava/lang/String;\n    move-result-object v{d}"
                ),
                GenOp::Call(a, j, d) => format!(
                    "invoke-static {{v{a}}}, Lgen/G;->m{}(Ljava/lang/String;)Ljava/lang/String;\n    move-result-object v{d}",
                    j as usize % n
                ),
                GenOp::Equals(a, b, d) => format!(
                    "invoke-virtual {{v{a}, v{b}}}, Ljava/lang/String;->equals(Ljava/lang/Object;)Z\n    move-result v{d}"
                ),
                GenOp::IfZero(r, t) => format!("if-eqz v{r}, :L{}", k + 1 + t as usize % (len - k)),
                GenOp::Loop(r, t) => format!("if-nez v{r}, :L{}", t as usize % (k + 1)),
                GenOp::Return(r) => format!("return-object v{r}"),
                GenOp::Check(a, l, t) => format!(
                    "const-string v3, \"{}\"\n    invoke-virtual {{v{a}, v3}}, Ljava/lang/String;->equals(Ljava/lang/Object;)Z\n    move-result v3\n    if-eqz v3, :L{}",
                    GEN_LITERALS[l as usize],
                    k + 1 + t as usize % (len - k)
                ),
            };
            s.push_str(&format!("    {line}\n"));
        }
        s.push_str(&format!("    :L{len}\n    return-object v0\n.end method\n\n"));
    }
    s
}

pub fn gen_program(methods: &[Vec<GenOp>]) -> Program {
    let text = render_program(methods);
    Program::from_sources([text.as_str()]).unwrap_or_else(|e| panic!("{e}\n{text}"))
}
