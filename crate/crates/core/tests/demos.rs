use memctx::demo::{run_demo, write_demo, DemoKind, DEMO_SEED, OBJECT_SIZES};

#[test]
fn functions_demo_recovers_every_marker() {
    let res = run_demo(DemoKind::Functions, DEMO_SEED).unwrap();
    let s = &res.summary;
    println!("{}", serde_json::to_string(s).unwrap());
    assert!(s.mailbox_detected && s.mailbox_base_correct);
    assert_eq!((s.missing, s.false_events), (0, 0));
    assert_eq!(s.markers, 10);
    assert_eq!(s.markers_exact, s.markers);
    assert_eq!(s.vp_offset_decoded, Some(s.vp_offset_true));
}

#[test]
fn roi_demo_boundaries_are_exact() {
    let res = run_demo(DemoKind::Roi, DEMO_SEED).unwrap();
    let s = &res.summary;
    assert_eq!((s.missing, s.false_events), (0, 0));
    assert_eq!(s.segments.len(), 10);
    assert_eq!(s.markers_exact, 10);
    let calls: Vec<u32> = s.segments.iter().map(|g| g.call_count).collect();
    assert_eq!(calls, (0..10).collect::<Vec<_>>());
}

#[test]
fn objects_demo_attribution() {
    let res = run_demo(DemoKind::Objects, DEMO_SEED).unwrap();
    let s = &res.summary;
    println!("{:?}", s.attribution);
    assert_eq!((s.missing, s.false_events), (0, 0));
    assert_eq!(s.vp_offset_decoded, Some(s.vp_offset_true));
    let objs = res.registry.objects();
    assert_eq!(objs.len(), 3);
    for (o, t) in objs.iter().zip(&res.run.objects) {
        assert_eq!(o.phys_start..o.phys_end, t.phys);
    }
    let sizes: Vec<u64> = s.objects.iter().map(|o| o.size_bytes).collect();
    assert_eq!(sizes, OBJECT_SIZES);
    assert!(s.attribution.as_ref().unwrap().accuracy() >= 0.99);
}

#[test]
fn demo_output_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        write_demo(&run_demo(DemoKind::Roi, 11).unwrap(), dir).unwrap();
    }
    for f in ["trace.csv", "truth.csv", "events.jsonl", "report.json", "summary.json", "plot/annotations.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}
