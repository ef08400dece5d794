use heterofuzz::assets::default_seeds;
use heterofuzz::diffdrive::{run_differential, CompareConfig, Verdict};
use heterofuzz::fuzzer::attribute;
use heterofuzz::minisim::{list_benchmark, run_script, BackendConfig, BugCategory, BugId, RunOptions, RunStatus};
use heterofuzz::profiler::KernelMetrics;

#[test]
fn runs_are_deterministic() {
    for (_, seed) in default_seeds() {
        for cfg in [BackendConfig::host(), BackendConfig::device().with_bugs(BugId::all())] {
            let a = run_script(&seed, &cfg, &RunOptions::default());
            let b = run_script(&seed, &cfg, &RunOptions::default());
            assert_eq!(a.thermo, b.thermo);
            assert_eq!(a.events, b.events);
            assert_eq!(a.first_hits, b.first_hits);
        }
    }
}

#[test]
fn clean_runs_release_everything() {
    for (name, seed) in default_seeds() {
        let r = run_script(&seed, &BackendConfig::device(), &RunOptions::default());
        assert_eq!(r.status, RunStatus::Completed, "{name}");
        let m = KernelMetrics::from_events(&r.events);
        assert_eq!(m.ml, 0.0, "{name}");
        assert!(m.pl > 0 && m.pr > 0 && m.fe > 0 && m.dc > 0, "{name}: {m:?}");
        assert_eq!(r.sync_violations, 0, "{name}");
    }
}

#[test]
fn host_backend_emits_no_copies() {
    let (_, seed) = &default_seeds()[0];
    let r = run_script(seed, &BackendConfig::host(), &RunOptions::default());
    assert_eq!(KernelMetrics::from_events(&r.events).dc, 0);
}

#[test]
fn seeds_keep_every_bug_dormant() {
    let device = BackendConfig::device().with_bugs(BugId::all());
    for (name, seed) in default_seeds() {
        let o = run_differential(&seed, &BackendConfig::host(), &device, &RunOptions::default(), &CompareConfig::default())
            .unwrap();
        assert_eq!(o.comparison.verdict, Verdict::Agree, "{name}");
    }
}

#[test]
fn each_reproducer_is_attributed_to_its_own_bug() {
    let bench = list_benchmark();
    let categories: std::collections::BTreeSet<BugCategory> = bench.iter().map(|e| e.category).collect();
    assert_eq!(categories.len(), 7);
    for e in bench {
        let clean = run_differential(
            &e.reproducer,
            &BackendConfig::host(),
            &BackendConfig::device(),
            &RunOptions::default(),
            &CompareConfig::default(),
        )
        .unwrap();
        assert_eq!(clean.comparison.verdict, Verdict::Agree, "bug {} without injection", e.id);

        let active = [e.id].into();
        let device = BackendConfig::device().with_bugs(active);
        let o = run_differential(&e.reproducer, &BackendConfig::host(), &device, &RunOptions::default(), &CompareConfig::default())
            .unwrap();
        assert!(o.comparison.verdict.is_finding(), "bug {}: {:?}", e.id, o.comparison.verdict);
        let found = attribute(&o, &BugId::all());
        assert_eq!(found, [e.id].into(), "bug {} at {}: {:?}", e.id, e.site, o.comparison.first_divergent_unit);
    }
}

#[test]
fn clean_backends_stay_within_the_reassociation_bound() {
    use heterofuzz::diffdrive::{compare_reports, Norm};
    use heterofuzz::script::parse_script;
    let cmp = CompareConfig {
        norm: Norm::Max,
        threshold: 1e-9,
    };
    for (name, seed) in default_seeds() {
        let text = seed.to_text();
        let last = text.lines().last().unwrap().to_string();
        let long = parse_script(&text.replace(&last, "run 1000")).unwrap();
        let a = run_script(&long, &BackendConfig::host(), &RunOptions::default());
        let b = run_script(&long, &BackendConfig::device(), &RunOptions::default());
        let c = compare_reports(&a, &b, &cmp).unwrap();
        assert_eq!(c.verdict, Verdict::Agree, "{name}: {}", c.distance);
    }
}
