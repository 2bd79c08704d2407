use std::path::Path;
use std::process::{Command, Output};

use memctx::channel::{background_traffic, BackgroundParams};
use memctx::events_io::write_events;
use memctx::trace::write_trace;
use memctx::Event;

fn memctx(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memctx"))
        .args(args)
        .current_dir(dir)
        .env_remove("MEMCTX_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn sample_events() -> Vec<Event> {
    let mut v = Vec::new();
    for k in 0..6 {
        v.push(Event::Marker {
            id: "loop".into(),
            call_count: k,
        });
        v.push(Event::ObjectAlloc {
            object_id: k as u16 + 10,
            virtual_addr: 0x7F00_0000_0000 + (k as u64) * 0x10_0000,
            size_bytes: 4096 << k,
        });
    }
    for k in 0..6u16 {
        v.push(Event::ObjectFree { object_id: k + 10 });
    }
    v
}

#[test]
fn encode_simulate_decode_reproduces_events() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_events(&sample_events(), &d.join("in.jsonl")).unwrap();
    ok(&memctx(&["encode", "--events", "in.jsonl", "--out", "req.csv", "--seed", "3"], d));
    ok(&memctx(
        &[
            "simulate", "--requests", "req.csv", "--trace", "trace.csv", "--truth", "truth.csv", "--seed", "9",
        ],
        d,
    ));
    let stdout = ok(&memctx(
        &["decode", "--trace", "trace.csv", "--out", "out.jsonl", "--plain", "--report", "report.json"],
        d,
    ));
    assert!(stdout.contains("mailbox 0x"), "{stdout}");
    let input = std::fs::read(d.join("in.jsonl")).unwrap();
    let output = std::fs::read(d.join("out.jsonl")).unwrap();
    assert_eq!(String::from_utf8(output).unwrap(), String::from_utf8(input).unwrap());

    let stats = ok(&memctx(&["stats", "report.json"], d));
    assert!(stats.contains("events"));
    assert!(!stats.contains("no mailbox"));
}

#[test]
fn decode_background_only_reports_no_mailbox() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bg = BackgroundParams {
        address_space_base: 0,
        address_space_bytes: 1 << 30,
        reads_per_metadata_read: 0.0,
        write_fraction: 0.2,
        sequential_fraction: 0.5,
    };
    write_trace(&background_traffic(&bg, 50_000, 4), &d.join("bg.csv")).unwrap();
    let stdout = ok(&memctx(&["decode", "--trace", "bg.csv", "--out", "ev.jsonl"], d));
    assert!(stdout.contains("no mailbox detected"));
    assert_eq!(std::fs::read_to_string(d.join("ev.jsonl")).unwrap(), "");
}

#[test]
fn seed_env_and_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_events(&sample_events()[..2], &d.join("in.jsonl")).unwrap();
    ok(&memctx(&["encode", "--events", "in.jsonl", "--out", "req.csv"], d));
    std::fs::write(d.join("ch.cfg"), "# quieter channel\nbackground_ratio=5\nreorder_depth = 4\n").unwrap();
    let sim = |trace: &str, seed: Option<&str>, flag: Option<&str>| {
        let mut args = vec!["simulate", "--requests", "req.csv", "--config", "ch.cfg", "--trace", trace];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        let mut c = Command::new(env!("CARGO_BIN_EXE_memctx"));
        c.args(&args).current_dir(d).env_remove("MEMCTX_SEED");
        if let Some(s) = seed {
            c.env("MEMCTX_SEED", s);
        }
        ok(&c.output().unwrap());
        std::fs::read(d.join(trace)).unwrap()
    };
    let a = sim("a.csv", Some("21"), None);
    let b = sim("b.csv", None, Some("21"));
    let c = sim("c.csv", Some("22"), None);
    assert_eq!(a, b);
    assert_ne!(a, c);

    ok(&memctx(
        &[
            "simulate", "--requests", "req.csv", "--config", "ch.cfg", "--set", "write_fraction=0", "--trace",
            "p.csv", "--dump-params", "p.cfg",
        ],
        d,
    ));
    let dumped = std::fs::read_to_string(d.join("p.cfg")).unwrap();
    assert!(dumped.contains("background_ratio=5\n"));
    assert!(dumped.contains("reorder_depth=4\n"));
    assert!(dumped.contains("write_fraction=0\n"));
}

#[test]
fn bad_arguments_fail_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = memctx(&["encode", "--bogus"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = memctx(&["demo", "nope", "--out", "x"], tmp.path());
    assert!(!out.status.success());

    std::fs::write(tmp.path().join("bad.cfg"), "reorder_depth=-1\n").unwrap();
    std::fs::write(tmp.path().join("r.csv"), "").unwrap();
    let out = memctx(
        &["simulate", "--requests", "r.csv", "--trace", "t.csv", "--config", "bad.cfg"],
        tmp.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("reorder_depth"));
}

#[test]
fn demo_roi_is_byte_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let stdout = ok(&memctx(&["demo", "roi", "--out", "a"], d));
    assert!(stdout.starts_with("roi: "), "{stdout}");
    ok(&memctx(&["demo", "roi", "--out", "b"], d));
    for f in [
        "trace.csv",
        "truth.csv",
        "events.jsonl",
        "report.json",
        "summary.json",
        "plot/memrd.csv",
        "plot/memrddata.csv",
        "plot/memwr.csv",
        "plot/annotations.csv",
    ] {
        let x = std::fs::read(d.join("a/roi").join(f)).unwrap();
        let y = std::fs::read(d.join("b/roi").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let ann = std::fs::read_to_string(d.join("a/roi/plot/annotations.csv")).unwrap();
    let labels: Vec<&str> = ann
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(3))
        .collect();
    let want: Vec<String> = (0..10).map(|k| format!("M1:{k}")).collect();
    assert_eq!(labels, want);

    // annotate over the demo's own trace and events reproduces its segments
    ok(&memctx(
        &["annotate", "--trace", "a/roi/trace.csv", "--events", "a/roi/events.jsonl", "--out", "ann"],
        d,
    ));
    let segs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ann/segments.json")).unwrap()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("a/roi/summary.json")).unwrap()).unwrap();
    assert_eq!(segs, summary["segments"]);
    assert!(d.join("ann/plot/annotations.csv").exists());
}
