use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use memctx::analysis::{emit_plot_data, object_stats, roi_segments};
use memctx::channel::{run_channel, ChannelParams};
use memctx::decoder::{decode_trace, DecoderOptions, ObjectRegistry, DEFAULT_DETECT_THRESHOLD};
use memctx::demo::{run_demo, write_demo, DemoKind, DEMO_SEED};
use memctx::encoder::{EncoderSession, MailboxPlacement, SessionOptions, DEFAULT_REPETITIONS};
use memctx::events_io::{read_decoded, read_events, write_decoded, write_events};
use memctx::schema::Event;
use memctx::serde_hex::parse_hex;
use memctx::trace::{parse_trace, read_requests, write_requests, write_trace, write_truth};
use memctx::ChannelConfig;

/// Encode program events as memory reads, model the memory channel, and
/// recover the events from the resulting trace.
#[derive(Parser)]
#[command(name = "memctx", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Events file (JSON lines) to an application request stream (CSV).
    Encode(EncodeArgs),
    /// Request stream through the channel model to a trace and ground truth.
    Simulate(SimulateArgs),
    /// Trace to decoded events and a report.
    Decode(DecodeArgs),
    /// Trace plus decoded events to ROI segments, object stats and plot data.
    Annotate(AnnotateArgs),
    /// Summary of a decode report.
    Stats(StatsArgs),
    /// Run a scripted experiment end to end.
    Demo(DemoArgs),
}

fn parse_u64(s: &str) -> std::result::Result<u64, String> {
    parse_hex(s).or_else(|_| s.parse::<u64>().map_err(|e| format!("{s:?}: {e}")))
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Packet width in bits (8, 16, 24 or 32).
    #[arg(long, default_value_t = 16)]
    bits: u32,
    /// Disable the address randomizer.
    #[arg(long)]
    no_randomizer: bool,
    /// Randomizer multiplier (odd); the width's default when omitted.
    #[arg(long, value_parser = parse_u64)]
    key: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    repetitions: u32,
    /// Seed for mailbox placement.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Physical region for the mailbox window, start..end.
    #[arg(long, value_parser = parse_u64, default_value = "0x100000000")]
    region_start: u64,
    #[arg(long, value_parser = parse_u64, default_value = "0x200000000")]
    region_end: u64,
    /// Place the window over live data in the region instead of beside it.
    #[arg(long)]
    overlay: bool,
    /// Virtual minus physical offset announced in the mailbox info event.
    #[arg(long, value_parser = parse_u64)]
    vp_offset: Option<u64>,
    #[arg(long)]
    pid: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Identity,
    Adversarial,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    requests: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    /// Ground-truth sidecar output.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "adversarial")]
    preset: Preset,
    /// Flat key=value parameter file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// RNG seed, applied last.
    #[arg(long, env = "MEMCTX_SEED")]
    seed: Option<u64>,
    /// Write the effective parameters as key=value.
    #[arg(long)]
    dump_params: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write bare events in the encoder's input format, without trace
    /// positions or the session's mailbox info events.
    #[arg(long)]
    plain: bool,
    /// Distinct preamble messages needed to accept a mailbox.
    #[arg(long, default_value_t = DEFAULT_DETECT_THRESHOLD)]
    threshold: usize,
    /// Restrict the search to these packet widths.
    #[arg(long, value_delimiter = ',')]
    bits: Vec<u32>,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Decoded events as written by `decode`.
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    report: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// functions, roi, objects or all.
    which: String,
    #[arg(long, default_value = "demo-out")]
    out: PathBuf,
    #[arg(long, env = "MEMCTX_SEED", default_value_t = DEMO_SEED)]
    seed: u64,
}

fn json_to_file<T: serde::Serialize + ?Sized>(v: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn encode(a: EncodeArgs) -> Result<()> {
    let mut cfg = ChannelConfig::new(a.bits)?;
    if !a.no_randomizer {
        cfg = match a.key {
            Some(k) => cfg.with_randomizer_key(u32::try_from(k).context("key exceeds 32 bits")?)?,
            None => cfg.with_randomizer(),
        };
    } else if a.key.is_some() {
        bail!("--key needs the randomizer");
    }
    let region = a.region_start..a.region_end;
    let placement = if a.overlay {
        MailboxPlacement::Overlay { data: region }
    } else {
        MailboxPlacement::Dedicated { region }
    };
    let mut opts = SessionOptions {
        repetitions: a.repetitions,
        ..SessionOptions::default()
    };
    if let Some(v) = a.vp_offset {
        opts.vp_offset = v;
    }
    if let Some(p) = a.pid {
        opts.pid = p;
    }
    let events = read_events(&a.events)?;
    let mut session = EncoderSession::open(cfg, &placement, a.seed, opts)?;
    let mut reqs = session.start()?;
    for e in &events {
        reqs.extend(session.send_event(e)?);
    }
    write_requests(&reqs, &a.out)?;
    eprintln!(
        "encoded {} events into {} requests; mailbox {} ({cfg})",
        events.len(),
        reqs.len(),
        session.phys_base()
    );
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut params = match a.preset {
        Preset::Identity => ChannelParams::identity(),
        Preset::Adversarial => ChannelParams::adversarial(0),
    };
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        params.apply_kv(&text)?;
    }
    for s in &a.sets {
        let (k, v) = s.split_once('=').with_context(|| format!("--set {s:?}: expected KEY=VALUE"))?;
        params.set(k, v)?;
    }
    if let Some(seed) = a.seed {
        params.rng_seed = seed;
    }
    params.validate()?;
    if let Some(p) = &a.dump_params {
        std::fs::write(p, params.to_kv())?;
    }
    let reqs = read_requests(&a.requests)?;
    let out = run_channel(&reqs, &params)?;
    write_trace(&out.trace, &a.trace)?;
    if let Some(t) = &a.truth {
        write_truth(&out.truth, t)?;
    }
    eprintln!("{} requests -> {} trace records", reqs.len(), out.trace.len());
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let trace = parse_trace(&a.trace)?;
    let mut opts = DecoderOptions {
        detect_threshold: a.threshold,
        ..DecoderOptions::default()
    };
    if !a.bits.is_empty() {
        opts.candidates.retain(|c| a.bits.contains(&c.packet_bits()));
        if opts.candidates.is_empty() {
            bail!("no candidate configuration with bits {:?}", a.bits);
        }
    }
    let out = decode_trace(&trace, opts)?;
    if a.plain {
        let events: Vec<Event> = out
            .events
            .iter()
            .filter(|d| !matches!(d.event, Event::MailboxInfo { .. }))
            .map(|d| d.event.clone())
            .collect();
        write_events(&events, &a.out)?;
    } else {
        write_decoded(&out.events, &a.out)?;
    }
    if let Some(r) = &a.report {
        json_to_file(&out.report, r)?;
    }
    if out.report.mailboxes.is_empty() {
        println!("no mailbox detected");
    } else {
        for m in &out.report.mailboxes {
            println!("mailbox {:#x} ({}) detected at record {}", m.phys_base, m.config, m.detected_at);
        }
        println!("{} events decoded from {} records", out.events.len(), trace.len());
    }
    Ok(())
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let trace = parse_trace(&a.trace)?;
    let events = read_decoded(&a.events)?;
    let registry = ObjectRegistry::from_events(&events);
    std::fs::create_dir_all(&a.out)?;
    let segments = roi_segments(&events, &trace);
    json_to_file(&segments, &a.out.join("segments.json"))?;
    json_to_file(registry.objects(), &a.out.join("objects.json"))?;
    json_to_file(&object_stats(&registry, &trace), &a.out.join("object_stats.json"))?;
    emit_plot_data(&trace, &events, &registry, &a.out.join("plot"))?;
    println!(
        "{} segments, {} objects written to {}",
        segments.len(),
        registry.objects().len(),
        a.out.display()
    );
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let r: serde_json::Value = serde_json::from_str(&text).context("report is not JSON")?;
    let num = |k: &str| r.get(k).and_then(|v| v.as_u64()).unwrap_or(0);
    println!("records          {}", num("records"));
    println!("mailbox reads    {}", num("mailbox_reads"));
    println!("validated pairs  {}", num("validated_pairs"));
    println!("  preamble       {}", num("preamble_pairs"));
    println!("  chunk          {}", num("chunk_pairs"));
    println!("  noise          {}", num("noise_pairs"));
    println!("events           {}", num("events"));
    println!("ambiguities      {}", r["ambiguities"].as_array().map_or(0, |a| a.len()));
    if let Some(asm) = r.get("assembly").and_then(|v| v.as_object()) {
        for (k, v) in asm {
            println!("  {k:<15}{v}");
        }
    }
    match r["mailboxes"].as_array() {
        Some(m) if !m.is_empty() => {
            for d in m {
                println!("mailbox          {} config {}", d["phys_base"], d["config"]);
            }
        }
        _ => println!("no mailbox detected"),
    }
    Ok(())
}

fn demo(a: DemoArgs) -> Result<()> {
    let kinds: Vec<DemoKind> = if a.which == "all" {
        DemoKind::ALL.to_vec()
    } else {
        vec![a.which.parse().map_err(anyhow::Error::msg)?]
    };
    for kind in kinds {
        let res = run_demo(kind, a.seed)?;
        let dir = a.out.join(kind.as_str());
        write_demo(&res, &dir)?;
        let s = &res.summary;
        println!(
            "{kind}: {} records, {}/{} events, {} false, markers exact {}/{}{} -> {}",
            s.trace_records,
            s.events_sent - s.missing,
            s.events_sent,
            s.false_events,
            s.markers_exact,
            s.markers,
            s.attribution
                .as_ref()
                .map(|x| format!(", attribution {:.4}", x.accuracy()))
                .unwrap_or_default(),
            dir.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Command::Encode(a) => encode(a),
        Command::Simulate(a) => simulate(a),
        Command::Decode(a) => decode(a),
        Command::Annotate(a) => annotate(a),
        Command::Stats(a) => stats(a),
        Command::Demo(a) => demo(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
