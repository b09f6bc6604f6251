mod common;

use common::invariants::*;
use common::{corpus, gen_methods, gen_program, Run};
use fragscope::report::AppReport;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn postdominators_match_brute_force(succs in cfg_shape()) {
        check_postdominators(&succs)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn taint_reaches_a_fixpoint(methods in gen_methods(true)) {
        check_fixpoint(&methods)?;
    }

    #[test]
    fn taint_is_monotone_in_sources(methods in gen_methods(true), keep in prop::collection::vec(any::<bool>(), 64)) {
        check_monotone(&methods, &keep)?;
    }

    #[test]
    fn engine_matches_oracle_on_random_acyclic_programs(methods in gen_methods(false)) {
        check_oracle_agreement(&methods)?;
    }

    #[test]
    fn regions_are_disjoint_and_closed(methods in gen_methods(true)) {
        check_regions(&methods)?;
    }
}

#[test]
fn fixture_regions_are_disjoint_and_closed() {
    check_fixture_regions().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clusters_partition_the_snippets(pick in snippet_pick()) {
        check_partition(&pick)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn corpus_merge_is_associative(a in app_reports(4), b in app_reports(4), c in app_reports(4), g in grouping()) {
        check_merge(&a, &b, &c, g)?;
    }

    #[test]
    fn app_report_json_round_trips(r in app_report()) {
        check_app_json(&r)?;
    }

    #[test]
    fn corpus_report_json_round_trips(apps in app_reports(6), g in grouping()) {
        check_corpus_json(&apps, g)?;
    }
}


#[test]
fn fixture_reports_round_trip() {
    let config = fragscope::report::AnalysisConfig::default();
    for f in corpus() {
        let r = fragscope::report::analyze_app(f.id(), &f.smali_root(), f.apk_path().as_deref(), &config).unwrap();
        let text = r.to_json();
        let back: AppReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_json(), text, "{}", f.id());
    }
}

#[test]
fn generated_programs_exercise_guards_and_calls() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;
    let mut runner = TestRunner::deterministic();
    let (mut with_guards, mut with_param_taint) = (0, 0);
    for _ in 0..200 {
        let methods = gen_methods(true).new_tree(&mut runner).unwrap().current();
        let run = Run::of_program(gen_program(&methods));
        with_guards += usize::from(!run.detection.guards.is_empty());
        with_param_taint += usize::from(run.program.method_ids().any(|id| run.taint.is_tainted(id, 0, fragscope::frontend::Reg(4))));
    }
    assert!(with_guards >= 20, "{with_guards}");
    assert!(with_param_taint >= 10, "{with_param_taint}");
}
