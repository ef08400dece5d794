use heterofuzz::assets::{default_manifest, default_seeds, DEFAULT_MANIFEST};
use heterofuzz::extractor::{build_subsystem, trace_run};
use heterofuzz::minisim::{run_script, BackendConfig, ErrorKind, EventKind, RunOptions};
use heterofuzz::script::parse_script;

#[test]
fn default_corpus_reproduces_the_golden_manifest() {
    let seeds = default_seeds();
    let log = trace_run(seeds.iter().map(|(n, s)| (n.as_str(), s)), &BackendConfig::device());
    assert_eq!(log.failed_seeds().count(), 0);
    let m = build_subsystem(&log, "device").unwrap();
    assert_eq!(m.to_json(), DEFAULT_MANIFEST);
    assert_eq!((m.kept.len(), m.stubbed.len()), (40, 25));
}

#[test]
fn manifest_is_conservative_for_every_seed() {
    let m = default_manifest();
    assert!(m.reduction.units > 0.0);
    for cfg in [BackendConfig::host(), BackendConfig::device()] {
        for (name, seed) in default_seeds() {
            let plain = run_script(&seed, &cfg, &RunOptions::default());
            let reduced = run_script(&seed, &cfg, &m.run_options());
            assert!(reduced.error.is_none(), "{name}");
            assert_eq!(plain.thermo, reduced.thermo, "{name}");
            assert_eq!(plain.events, reduced.events, "{name}");
            assert_eq!(plain.covered, reduced.covered, "{name}");
        }
    }
}

#[test]
fn one_minimal_script_stubs_more_than_the_corpus() {
    let minimal = parse_script("lattice sc 1.0\nregion box block 0 2 0 2 0 2\ncreate_box 1 box\ncreate_atoms 1 box\nrun 5\n").unwrap();
    let m = build_subsystem(&trace_run([("m", &minimal)], &BackendConfig::device()), "device").unwrap();
    assert!(m.stubbed.len() > default_manifest().stubbed.len());
}

#[test]
fn entering_a_stub_emits_no_further_kernel_events() {
    let m = default_manifest();
    let (_, seed) = &default_seeds()[0];
    let text = seed.to_text().replace("fix 1 all nve", "fix 1 all nve viscous 0.1");
    let script = parse_script(&text).unwrap();
    let plain_prefix = {
        let cut = text.replace("fix 1 all nve viscous 0.1\nrun 50\n", "");
        run_script(&parse_script(&cut).unwrap(), &BackendConfig::device(), &RunOptions::default())
    };
    let r = run_script(&script, &BackendConfig::device(), &m.run_options());
    let err = r.error.expect("stub reached");
    assert_eq!(err.kind, ErrorKind::StubReached);
    assert_eq!(err.unit, "fix:viscous");
    // Terminates in place: same events as the completed prefix, minus teardown.
    let n = r.events.len();
    assert_eq!(r.events[..], plain_prefix.events[..n]);
    assert!(plain_prefix.events[n..].iter().all(|e| e.kind == EventKind::Dealloc));
    assert!(r.thermo.rows.is_empty());
}
