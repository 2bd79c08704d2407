//! JSON-lines files of events, one object per line.
//!
//! Input files for encoding hold bare events (`kind` plus payload fields);
//! decoder output adds the mailbox and trace position of each event. Blank
//! lines are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::decoder::DecodedEvent;
use crate::error::{Error, Result};
use crate::schema::Event;

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(items: &[T], w: impl Write) -> Result<()> {
    let mut w = BufWriter::new(w);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads events to transmit. Extra fields, such as decode positions, are ignored.
pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let events: Vec<Event> = read_lines(path)?;
    for e in &events {
        e.validate()?;
    }
    Ok(events)
}

pub fn write_events(events: &[Event], path: &Path) -> Result<()> {
    write_lines(events, File::create(path)?)
}

pub fn read_decoded(path: &Path) -> Result<Vec<DecodedEvent>> {
    read_lines(path)
}

pub fn write_decoded_to(events: &[DecodedEvent], w: impl Write) -> Result<()> {
    write_lines(events, w)
}

pub fn write_decoded(events: &[DecodedEvent], path: &Path) -> Result<()> {
    write_decoded_to(events, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<DecodedEvent> {
        vec![
            DecodedEvent {
                event: Event::MailboxInfo {
                    virtual_base: 0x7F5A_4000_0000,
                    pid: 42,
                },
                mailbox: 0x4000_0000,
                first_index: 10,
                last_index: 80,
                first_ts: 100,
                last_ts: 800,
            },
            DecodedEvent {
                event: Event::Marker {
                    id: "M1".into(),
                    call_count: 3,
                },
                mailbox: 0x4000_0000,
                first_index: 90,
                last_index: 120,
                first_ts: 900,
                last_ts: 1200,
            },
        ]
    }

    #[test]
    fn decoded_round_trip_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.jsonl");
        write_decoded(&sample(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["kind"], "mailbox_info");
        assert_eq!(first["virtual_base"], "0x7f5a40000000");
        assert_eq!(first["mailbox"], "0x40000000");
        assert_eq!(first["first_index"], 10);
        assert_eq!(read_decoded(&p).unwrap(), sample());
        // decoder output doubles as encoder input
        let bare = read_events(&p).unwrap();
        assert_eq!(bare, sample().into_iter().map(|d| d.event).collect::<Vec<_>>());
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ev.jsonl");
        std::fs::write(
            &p,
            "{\"kind\":\"object_free\",\"object_id\":1}\n\n{\"kind\":\"nope\"}\n",
        )
        .unwrap();
        match read_events(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        std::fs::write(&p, "{\"kind\":\"marker\",\"id\":\"waytoolongid\",\"call_count\":0}\n").unwrap();
        assert!(read_events(&p).is_err());
    }
}
