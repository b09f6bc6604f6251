//! Invariant checks and input strategies shared by the property tests and
//! the acceptance runner.

use std::collections::{BTreeSet, VecDeque};
use std::sync::OnceLock;

use fragscope::behavior::BehaviorSnippet;
use fragscope::device_db::default_source_specs;
use fragscope::fixtures::oracle_interpret;
use fragscope::frontend::{MethodId, MethodRef};
use fragscope::graphs::{BasicBlock, Cfg, Edge, EdgeKind, Icfg, PostDom, PostDominators};
use fragscope::report::{aggregate, AnalysisStatus, AppReport, CorpusReport, Grouping, PackageBucket, PackageRow, SnippetReport};
use fragscope::rules::{cluster_by_system_methods, RuleSet, SystemPrefixes};
use fragscope::taint::{find_sources, propagate_inter, TaintResult};
use fragscope::{Budget, Deadline};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{corpus, gen_program, GenOp, Run};

pub type Check = Result<(), TestCaseError>;

// ---------------------------------------------------------------------------
// Postdominators against a brute-force definition.

pub fn cfg_shape() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(0usize..64, 0..3), 1..12)
}

pub fn random_cfg(succs: &[Vec<usize>]) -> Cfg {
    let n = succs.len();
    let blocks = (0..n).map(|i| BasicBlock { id: i, start: i, end: i + 1 }).collect();
    let mut edges = Vec::new();
    for (from, targets) in succs.iter().enumerate() {
        let mut seen = BTreeSet::new();
        for (k, &t) in targets.iter().enumerate() {
            if seen.insert(t % n) {
                let kind = if k == 0 { EdgeKind::Fallthrough } else { EdgeKind::BranchTaken };
                edges.push(Edge { from, to: t % n, kind });
            }
        }
    }
    Cfg::from_parts("Lt;->m()V".parse::<MethodRef>().unwrap(), blocks, edges)
}

/// Whether some path from `from` reaches a block without successors while
/// never entering `avoid`.
fn reaches_exit_avoiding(succs: &[BTreeSet<usize>], from: usize, avoid: Option<usize>) -> bool {
    if Some(from) == avoid {
        return false;
    }
    let mut seen = vec![false; succs.len()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(b) = queue.pop_front() {
        if succs[b].is_empty() {
            return true;
        }
        for &s in &succs[b] {
            if Some(s) != avoid && !seen[s] {
                seen[s] = true;
                queue.push_back(s);
            }
        }
    }
    false
}

/// Immediate postdominator from the definition: the strict postdominator
/// that every other strict postdominator also postdominates.
pub fn brute_ipdom(succs: &[BTreeSet<usize>], b: usize) -> Option<PostDom> {
    if !reaches_exit_avoiding(succs, b, None) {
        return None;
    }
    let strict: Vec<usize> = (0..succs.len())
        .filter(|&d| d != b && !reaches_exit_avoiding(succs, b, Some(d)))
        .collect();
    let postdominates = |q: usize, p: usize| !reaches_exit_avoiding(succs, p, Some(q));
    let ip = strict
        .iter()
        .copied()
        .find(|&p| strict.iter().all(|&q| q == p || postdominates(q, p)));
    Some(ip.map_or(PostDom::Exit, PostDom::Block))
}

pub fn check_postdominators(succs: &[Vec<usize>]) -> Check {
    let cfg = random_cfg(succs);
    let sets: Vec<BTreeSet<usize>> = (0..succs.len()).map(|b| cfg.successors(b).map(|e| e.to).collect()).collect();
    let pdom = PostDominators::compute(&cfg);
    for b in 0..succs.len() {
        prop_assert_eq!(pdom.immediate(b), brute_ipdom(&sets, b), "block {} of {:?}", b, sets);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Taint propagation.

pub fn check_fixpoint(methods: &[Vec<GenOp>]) -> Check {
    let program = gen_program(methods);
    let icfg = Icfg::build(&program).unwrap();
    let sources = find_sources(&program, &default_source_specs());
    let t = propagate_inter(&program, &icfg, &sources, &Budget::default(), &Deadline::unlimited());
    prop_assert!(t.converged);
    prop_assert_eq!(t.extra_round(&program, &icfg), 0);
    Ok(())
}

pub fn check_monotone(methods: &[Vec<GenOp>], keep: &[bool]) -> Check {
    let program = gen_program(methods);
    let icfg = Icfg::build(&program).unwrap();
    let all = find_sources(&program, &default_source_specs());
    let some: Vec<_> = all.iter().zip(keep.iter().cycle()).filter(|(_, k)| **k).map(|(s, _)| s.clone()).collect();
    let budget = Budget::default();
    let full = propagate_inter(&program, &icfg, &all, &budget, &Deadline::unlimited());
    let part = propagate_inter(&program, &icfg, &some, &budget, &Deadline::unlimited());
    prop_assert!(part.fact_keys().is_subset(&full.fact_keys()));
    for id in program.method_ids() {
        for i in 0..program.method(id).instructions.len() {
            let regs = |t: &TaintResult| -> BTreeSet<_> { t.tainted_at(id, i).into_iter().map(|(r, _)| r).collect() };
            prop_assert!(regs(&part).is_subset(&regs(&full)));
        }
    }
    Ok(())
}

pub fn check_oracle_agreement(methods: &[Vec<GenOp>]) -> Check {
    let run = Run::of_program(gen_program(methods));
    let trace = oracle_interpret(&run.program, &run.sources).unwrap();
    for id in run.program.method_ids() {
        let m = run.program.method(id);
        let points = trace.get(&m.signature()).cloned().unwrap_or_default();
        for i in 0..m.instructions.len() {
            prop_assert_eq!(
                run.taint.tainted_at(id, i),
                points.get(&i).cloned().unwrap_or_default(),
                "{} @{}",
                m.signature(),
                i
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Region extraction.

pub fn check_snippet(run: &Run, s: &BehaviorSnippet) -> Check {
    let program = &run.program;
    let method = program.method(s.guard.site.method_id);
    let mut seen = BTreeSet::new();
    for arm in &s.region {
        for i in arm.indices() {
            prop_assert!(i < method.instructions.len());
            prop_assert!(i != s.guard.site.branch_instruction);
            prop_assert!(seen.insert(i), "instruction {} in two arms", i);
        }
    }
    prop_assert!(s.reachable_methods.len() <= program.method_count());
    let reachable: BTreeSet<_> = s.reachable_methods.iter().map(|m| program.lookup(m).unwrap()).collect();
    let cg = &run.icfg.call_graph;
    let mut from_region: Vec<(MethodId, usize)> =
        s.region.iter().flat_map(|a| a.indices()).map(|i| (s.guard.site.method_id, i)).collect();
    for &id in &reachable {
        from_region.extend((0..program.method(id).instructions.len()).map(|i| (id, i)));
    }
    for (caller, i) in from_region {
        if let Some(t) = cg.edge_at(caller, i).and_then(|e| e.target) {
            prop_assert!(reachable.contains(&t), "callee {:?} missing", t);
        }
    }
    Ok(())
}

pub fn check_regions(methods: &[Vec<GenOp>]) -> Check {
    let run = Run::of_program(gen_program(methods));
    prop_assert_eq!(run.detection.guards.len(), run.detection.snippets.len());
    for s in &run.detection.snippets {
        check_snippet(&run, s)?;
    }
    Ok(())
}

pub fn check_fixture_regions() -> Check {
    for f in corpus() {
        let run = Run::of(&f);
        for s in &run.detection.snippets {
            check_snippet(&run, s)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Clustering.

pub fn corpus_snippets() -> &'static Vec<BehaviorSnippet> {
    static CELL: OnceLock<Vec<BehaviorSnippet>> = OnceLock::new();
    CELL.get_or_init(|| corpus().iter().flat_map(|f| Run::of(f).detection.snippets).collect())
}

pub fn snippet_pick() -> impl Strategy<Value = Vec<prop::sample::Index>> {
    prop::collection::vec(any::<prop::sample::Index>(), 0..40)
}

pub fn check_partition(pick: &[prop::sample::Index]) -> Check {
    let pool = corpus_snippets();
    let chosen: Vec<BehaviorSnippet> = pick.iter().map(|i| pool[i.index(pool.len())].clone()).collect();
    let clusters = cluster_by_system_methods(&chosen, &SystemPrefixes::default());
    let mut members: Vec<usize> = clusters.iter().flat_map(|c| c.members.iter().copied()).collect();
    members.sort();
    prop_assert_eq!(members, (0..chosen.len()).collect::<Vec<_>>());
    let keys: BTreeSet<_> = clusters.iter().map(|c| c.key.clone()).collect();
    prop_assert_eq!(keys.len(), clusters.len());
    for c in &clusters {
        prop_assert!(!c.members.is_empty());
        prop_assert!(c.suggested_keywords.len() <= 20);
        for k in &c.suggested_keywords {
            prop_assert!(k.coverage >= 0.5 && k.coverage <= 1.0);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports.

fn sample_snippets() -> &'static Vec<SnippetReport> {
    static CELL: OnceLock<Vec<SnippetReport>> = OnceLock::new();
    CELL.get_or_init(|| {
        let rules = RuleSet::default_rules();
        corpus_snippets().iter().take(6).map(|s| SnippetReport::new(s, &rules)).collect()
    })
}

fn subset(pool: &'static [&'static str]) -> impl Strategy<Value = BTreeSet<String>> {
    prop::sample::subsequence(pool, 0..=pool.len()).prop_map(|v| v.into_iter().map(String::from).collect())
}

pub fn app_report() -> impl Strategy<Value = AppReport> {
    let status = prop_oneof![
        Just(AnalysisStatus::Ok),
        Just(AnalysisStatus::PartialTimeout),
        Just(AnalysisStatus::packed()),
        Just(AnalysisStatus::Failed { reason: "input".into() }),
    ];
    let rows = prop::collection::vec(
        (prop::sample::select(vec!["com.example", "com.umeng.analytics", "a.b", "org.app"]), 1usize..4),
        0..3,
    );
    (
        "[a-z]{1,6}",
        prop::option::of(prop::sample::select(vec!["huawei", "xiaomi", "google"])),
        status,
        subset(&["Samsung", "OPPO", "vivo", "Xiaomi"]),
        subset(&["MIUI", "EMUI", "Flyme"]),
        subset(&["Mi 5", "SM-F9360"]),
        subset(&["Camera", "OAID", "Push", "unclassified"]),
        prop::collection::vec(0usize..6, 0..3),
        rows,
        (0u32..100_000, 0usize..40),
    )
        .prop_map(|(id, market, status, brands, oses, models, funcs, snip, rows, (ms, iters))| {
            let mut r = AppReport::empty(&id, status, &Budget::default());
            r.market = market.map(String::from);
            r.wall_time = ms as f64 / 1000.0 + 1e-7;
            r.brands = brands;
            r.oses = oses;
            r.models = models;
            r.functionalities = funcs;
            r.snippets = snip.into_iter().map(|i| sample_snippets()[i % sample_snippets().len()].clone()).collect();
            r.guards = r.snippets.len();
            r.guard_sites = r.snippets.len() + 1;
            r.taint_iterations = iters;
            r.source_attribution = rows
                .into_iter()
                .map(|(p, f)| PackageRow { package: p.to_string(), bucket: PackageBucket::Developer, frequency: f })
                .collect();
            r.source_attribution.sort_by(|a, b| a.package.cmp(&b.package));
            r.source_attribution.dedup_by(|a, b| a.package == b.package);
            r
        })
}

pub fn app_reports(max: usize) -> impl Strategy<Value = Vec<AppReport>> {
    prop::collection::vec(app_report(), 1..max)
}

pub fn grouping() -> impl Strategy<Value = Grouping> {
    prop_oneof![Just(Grouping::None), Just(Grouping::Market)]
}

pub fn check_merge(a: &[AppReport], b: &[AppReport], c: &[AppReport], g: Grouping) -> Check {
    let (ra, rb, rc) = (aggregate(a, g).unwrap(), aggregate(b, g).unwrap(), aggregate(c, g).unwrap());
    let left = ra.merge(&rb).unwrap().merge(&rc).unwrap();
    let right = ra.merge(&rb.merge(&rc).unwrap()).unwrap();
    prop_assert_eq!(&left, &right);
    let all: Vec<AppReport> = a.iter().chain(b).chain(c).cloned().collect();
    prop_assert_eq!(&aggregate(&all, g).unwrap(), &left);
    prop_assert_eq!(left.overall.apps_total, all.len());
    Ok(())
}

pub fn check_app_json(r: &AppReport) -> Check {
    let text = r.to_json();
    let back: AppReport = serde_json::from_str(&text).unwrap();
    prop_assert_eq!(&back, r);
    prop_assert_eq!(back.to_json(), text);
    Ok(())
}

pub fn check_corpus_json(apps: &[AppReport], g: Grouping) -> Check {
    let c = aggregate(apps, g).unwrap();
    let text = c.to_json();
    let back: CorpusReport = serde_json::from_str(&text).unwrap();
    prop_assert_eq!(&back, &c);
    prop_assert_eq!(back.to_json(), text);
    Ok(())
}
