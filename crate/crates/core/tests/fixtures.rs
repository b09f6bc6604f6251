mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{corpus, fixture, Run};
use fragscope::fixtures::{oracle_interpret, trace_registers};
use fragscope::rules::RuleSet;

#[test]
fn manifests_are_consistent_with_their_programs() {
    let all = corpus();
    assert_eq!(all.len(), 31);
    for f in &all {
        assert_eq!(f.dir.file_name().unwrap().to_str().unwrap(), f.id());
        let program = f.load_program().unwrap();
        let dangling = f.dangling_annotations(&program);
        assert!(dangling.is_empty(), "{}: {dangling:?}", f.id());
        if let Some(apk) = f.apk_path() {
            assert!(apk.is_file(), "{}: missing {}", f.id(), apk.display());
        }
    }
    assert!(all.iter().filter(|f| f.manifest.oracle).count() >= 20);
}

#[test]
fn sources_match_annotations() {
    for f in corpus() {
        let run = Run::of(&f);
        let found: BTreeSet<(String, String, usize, String)> = run
            .sources
            .iter()
            .map(|s| {
                (
                    serde_json::to_value(s.kind).unwrap().as_str().unwrap().to_string(),
                    s.location.method.to_string(),
                    s.location.index,
                    s.detail.clone(),
                )
            })
            .collect();
        let expected: BTreeSet<(String, String, usize, String)> = f
            .manifest
            .sources
            .iter()
            .map(|s| (s.kind.clone(), s.method.clone(), s.index, s.detail.clone()))
            .collect();
        assert_eq!(found, expected, "{}", f.id());
    }
}

#[test]
fn oracle_reproduces_hand_traces() {
    for f in corpus().into_iter().filter(|f| f.manifest.oracle) {
        let run = Run::of(&f);
        let trace = oracle_interpret(&run.program, &run.sources).unwrap();
        let regs = trace_registers(&trace);
        assert_eq!(regs, f.manifest.oracle_trace, "{}", f.id());
    }
}

#[test]
fn engine_agrees_with_oracle_at_every_program_point() {
    for f in corpus().into_iter().filter(|f| f.manifest.oracle) {
        let run = Run::of(&f);
        assert!(run.taint.converged, "{}", f.id());
        let trace = oracle_interpret(&run.program, &run.sources).unwrap();
        for id in run.program.method_ids() {
            let m = run.program.method(id);
            let sig = m.signature();
            let points = trace.get(&sig).cloned().unwrap_or_default();
            for i in 0..m.instructions.len() {
                let oracle = points.get(&i).cloned().unwrap_or_default();
                assert_eq!(run.taint.tainted_at(id, i), oracle, "{} {sig} @{i}", f.id());
            }
        }
    }
}

#[test]
fn guard_recall_and_precision_are_perfect() {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for f in corpus() {
        let run = Run::of(&f);
        let found = run.guard_keys();
        let expected: BTreeSet<_> = f
            .manifest
            .guards
            .iter()
            .map(|g| (g.method.clone(), g.index, g.comparison.clone(), g.identifiers.iter().cloned().collect()))
            .collect();
        tp += found.intersection(&expected).count();
        fp += found.difference(&expected).count();
        fneg += expected.difference(&found).count();
        assert_eq!(found, expected, "{}", f.id());
    }
    assert!(tp > 0);
    assert_eq!((fp, fneg), (0, 0));
}

#[test]
fn snippets_classify_as_annotated() {
    let rules = RuleSet::default_rules();
    for f in corpus() {
        let run = Run::of(&f);
        assert_eq!(run.detection.snippets.len(), f.manifest.snippets.len(), "{}", f.id());
        for s in &f.manifest.snippets {
            let got = run.categories(&s.method, s.index, &rules).unwrap_or_else(|| panic!("{}: no snippet", f.id()));
            let want: BTreeSet<String> = s.categories.iter().cloned().collect();
            assert_eq!(got, want, "{} {}@{}", f.id(), s.method, s.index);
            if let Some(reach) = &s.reachable_methods {
                let snippet = run
                    .detection
                    .snippets
                    .iter()
                    .find(|x| x.guard.site.method.to_string() == s.method && x.guard.site.branch_instruction == s.index)
                    .unwrap();
                let got: BTreeSet<String> = snippet.reachable_methods.iter().map(|m| m.to_string()).collect();
                assert_eq!(got, reach.iter().cloned().collect::<BTreeSet<_>>(), "{}", f.id());
            }
        }
    }
}

#[test]
fn unconfirmed_sites_are_reported_but_not_promoted() {
    let expect_sites = BTreeMap::from([
        ("nullcheck", 1usize),
        ("adversarial_short", 1),
        ("wrapped_compare", 1),
        ("untainted_cmp", 0),
        ("loop_badge", 2),
        ("zero_sources", 0),
    ]);
    for (id, n) in expect_sites {
        let run = Run::of(&fixture(id));
        assert_eq!(run.detection.sites.len(), n, "{id}");
    }
    let nc = Run::of(&fixture("nullcheck"));
    assert_eq!(serde_json::to_value(nc.detection.sites[0].comparison).unwrap(), "reference_eq");
    assert!(nc.detection.guards.is_empty());
}

#[test]
fn split_literal_collects_literal_from_earlier_block() {
    let run = Run::of(&fixture("split_literal"));
    assert_eq!(run.detection.guards.len(), 1);
    assert_eq!(run.detection.guards[0].guard_strings, vec!["vivo".to_string()]);
}

#[test]
fn oppo_guard_strings_and_matched_arm() {
    let run = Run::of(&fixture("oppo_perm"));
    let g = &run.detection.guards[0];
    assert_eq!(g.guard_strings, vec!["oppo".to_string()]);
    assert_eq!(serde_json::to_value(g.site.tainted_operand_side).unwrap(), "receiver");
    let snippet = &run.detection.snippets[0];
    let matched = snippet.matched_arm().expect("polarity is decidable for equals + if-eqz");
    assert_eq!(matched.ranges, vec![(7, 7)]);
    assert!(snippet
        .invoked_system_methods
        .iter()
        .any(|m| m.to_string() == "Landroid/content/Context;->startActivity(Landroid/content/Intent;)V"));
    assert!(snippet
        .invoked_system_methods
        .iter()
        .any(|m| m.name == "setComponent"));
}

#[test]
fn operand_sides() {
    for (id, side) in [("unpacked_apk", "argument"), ("wide_param", "argument"), ("reference_eq", "receiver")] {
        let run = Run::of(&fixture(id));
        let g = &run.detection.guards[0];
        assert_eq!(serde_json::to_value(g.site.tainted_operand_side).unwrap(), side, "{id}");
    }
}
