use std::fs;
use std::io::{Cursor, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVT1";
const RECORD_BYTES: usize = 8 + 2 + 2 + 1 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    /// `t x y p` per line, `#` comments.
    Text,
    /// `EVT1` header followed by fixed-size little-endian records.
    Binary,
}

impl EventFormat {
    /// Guesses from the extension: `.txt`/`.csv` are text, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("txt") | Some("csv") => EventFormat::Text,
            _ => EventFormat::Binary,
        }
    }
}

/// Reads an event file.
///
/// Text files carry no mandatory geometry. The sensor size comes from
/// `geometry` when given, else from a `# sensor <width> <height>` comment,
/// else from the largest coordinates seen.
pub fn load_events(
    path: impl AsRef<Path>,
    format: EventFormat,
    geometry: Option<(usize, usize)>,
) -> Result<EventStream> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    match format {
        EventFormat::Text => parse_text(path, &bytes, geometry),
        EventFormat::Binary => parse_binary(path, &bytes, geometry),
    }
}

pub fn save_events(path: impl AsRef<Path>, stream: &EventStream, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Text => {
            let mut out = Vec::with_capacity(24 * stream.len() + 32);
            writeln!(out, "# sensor {} {}", stream.width, stream.height)?;
            for e in &stream.events {
                writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p.to_bit())?;
            }
            out
        }
        EventFormat::Binary => {
            let mut out = Vec::with_capacity(20 + RECORD_BYTES * stream.len());
            out.extend_from_slice(BINARY_MAGIC);
            out.write_u32::<LittleEndian>(stream.width as u32)?;
            out.write_u32::<LittleEndian>(stream.height as u32)?;
            out.write_u64::<LittleEndian>(stream.len() as u64)?;
            for e in &stream.events {
                out.write_f64::<LittleEndian>(e.t)?;
                out.write_u16::<LittleEndian>(e.x)?;
                out.write_u16::<LittleEndian>(e.y)?;
                out.write_u8(e.p.to_bit())?;
                out.write_u8(0)?;
            }
            out
        }
    };
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_text(path: &Path, bytes: &[u8], geometry: Option<(usize, usize)>) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(path, format!("not UTF-8: {e}")))?;
    let mut header_geometry = None;
    let mut events = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_err = |detail: String| Error::format(path, format!("line {}: {}", lineno + 1, detail));
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            let mut parts = comment.split_whitespace();
            if parts.next() == Some("sensor") {
                let dims: Vec<usize> = parts.filter_map(|p| p.parse().ok()).collect();
                if let [w, h] = dims[..] {
                    header_geometry = Some((w, h));
                }
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(' ').collect();
        if fields.len() != 4 {
            return Err(line_err(format!("expected `t x y p`, got {trimmed:?}")));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| line_err(format!("bad timestamp {:?}", fields[0])))?;
        let x: u16 = fields[1]
            .parse()
            .map_err(|_| line_err(format!("bad x {:?}", fields[1])))?;
        let y: u16 = fields[2]
            .parse()
            .map_err(|_| line_err(format!("bad y {:?}", fields[2])))?;
        let p = fields[3]
            .parse::<u8>()
            .ok()
            .and_then(Polarity::from_bit)
            .ok_or_else(|| line_err(format!("polarity must be 0 or 1, got {:?}", fields[3])))?;
        if !t.is_finite() {
            return Err(line_err("timestamp is not finite".into()));
        }
        events.push(Event { x, y, t, p });
    }
    let (width, height) = geometry.or(header_geometry).unwrap_or_else(|| {
        let w = events.iter().map(|e| e.x as usize + 1).max().unwrap_or(0);
        let h = events.iter().map(|e| e.y as usize + 1).max().unwrap_or(0);
        (w, h)
    });
    EventStream::new(width, height, events).map_err(|e| Error::format(path, e.to_string()))
}

fn parse_binary(path: &Path, bytes: &[u8], geometry: Option<(usize, usize)>) -> Result<EventStream> {
    if bytes.len() < 20 || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::format(path, "missing EVT1 header"));
    }
    let mut r = Cursor::new(&bytes[4..]);
    let width = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let expected = 20 + count * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "header announces {} records ({} bytes) but file has {} bytes",
                count,
                expected,
                bytes.len()
            ),
        ));
    }
    if let Some(g) = geometry {
        if g != (width, height) {
            return Err(Error::format(
                path,
                format!("file sensor {}x{} differs from expected {}x{}", width, height, g.0, g.1),
            ));
        }
    }
    let mut events = Vec::with_capacity(count);
    for i in 0..count {
        let offset = 20 + i * RECORD_BYTES;
        let t = r.read_f64::<LittleEndian>()?;
        let x = r.read_u16::<LittleEndian>()?;
        let y = r.read_u16::<LittleEndian>()?;
        let pbit = r.read_u8()?;
        let _pad = r.read_u8()?;
        let p = Polarity::from_bit(pbit).ok_or_else(|| {
            Error::format(path, format!("record {i} at offset {offset}: polarity byte {pbit}"))
        })?;
        if !t.is_finite() {
            return Err(Error::format(
                path,
                format!("record {i} at offset {offset}: timestamp not finite"),
            ));
        }
        events.push(Event { x, y, t, p });
    }
    EventStream::new(width, height, events).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_file_has_no_events() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "").unwrap();
        let s = load_events(&p, EventFormat::Text, Some((4, 4))).unwrap();
        assert_eq!(s.len(), 0);
    }

    #[test]
    fn three_text_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "# comment\n0.001 3 2 1\n0.25 0 0 0\n1.5 7 1 1\n").unwrap();
        let s = load_events(&p, EventFormat::Text, Some((8, 4))).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(
            s.events[0],
            Event {
                x: 3,
                y: 2,
                t: 0.001,
                p: Polarity::Positive
            }
        );
        assert_eq!(s.events[1].p, Polarity::Negative);
        assert_eq!(s.events[2].t, 1.5);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "0.1 1 1 1\n0.2 1 x 1\n").unwrap();
        let err = load_events(&p, EventFormat::Text, Some((4, 4))).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.is_data_error());
    }

    #[test]
    fn out_of_bounds_text_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "0.1 9 1 1\n").unwrap();
        assert!(load_events(&p, EventFormat::Text, Some((4, 4))).is_err());
    }

    #[test]
    fn bad_polarity_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        fs::write(&p, "0.1 1 1 -1\n").unwrap();
        assert!(load_events(&p, EventFormat::Text, Some((4, 4))).is_err());
    }

    #[test]
    fn truncated_binary_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        let s = EventStream::new(
            4,
            4,
            vec![Event {
                x: 1,
                y: 1,
                t: 0.5,
                p: Polarity::Positive,
            }],
        )
        .unwrap();
        save_events(&p, &s, EventFormat::Binary).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        let err = load_events(&p, EventFormat::Binary, None).unwrap_err();
        assert!(err.to_string().contains("bytes"), "{err}");
    }
}
