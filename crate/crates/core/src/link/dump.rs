//! Event-stream files for replaying detections without re-simulating.
//!
//! Binary layout, all little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `QKDEVT01` |
//! | 4 | format version (1) |
//! | 8 | timestamp resolution, seconds, f64 |
//! | 32 | SHA-256 of the link configuration JSON |
//! | 8 | event count |
//! | 9 each | timestamp in resolution units (u64), detector id (u8, 0..=3) |
//!
//! The text variant has `#`-prefixed header lines `resolution`, `config_sha256`
//! and `count`, then one `timestamp detector` pair per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DetectionEvent, DetectorId, LinkConfig, LinkError};

const MAGIC: &[u8; 8] = b"QKDEVT01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EventDump {
    pub resolution: f64,
    pub config_hash: [u8; 32],
    pub events: Vec<DetectionEvent>,
}

pub fn config_hash(config: &LinkConfig) -> [u8; 32] {
    let json = serde_json::to_vec(config).expect("link config serializes");
    Sha256::digest(&json).into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn io_err(e: std::io::Error) -> LinkError {
    LinkError::Dump(e.to_string())
}

impl EventDump {
    pub fn new(config: &LinkConfig, events: Vec<DetectionEvent>) -> Self {
        Self { resolution: config.timestamp_resolution, config_hash: config_hash(config), events }
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<(), LinkError> {
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.resolution.to_le_bytes()).map_err(io_err)?;
        w.write_all(&self.config_hash).map_err(io_err)?;
        w.write_all(&(self.events.len() as u64).to_le_bytes()).map_err(io_err)?;
        for e in &self.events {
            w.write_all(&e.timestamp.to_le_bytes()).map_err(io_err)?;
            w.write_all(&[e.detector as u8]).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self, LinkError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(LinkError::Dump("not an event dump (bad magic)".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(io_err)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(LinkError::Dump(format!("unsupported dump version {version}")));
        }
        r.read_exact(&mut b8).map_err(io_err)?;
        let resolution = f64::from_le_bytes(b8);
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash).map_err(io_err)?;
        r.read_exact(&mut b8).map_err(io_err)?;
        let count = u64::from_le_bytes(b8);
        let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
        let mut rec = [0u8; 9];
        for k in 0..count {
            r.read_exact(&mut rec).map_err(|e| LinkError::Dump(format!("record {k}: {e}")))?;
            let timestamp = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
            let detector = DetectorId::from_index(rec[8])
                .ok_or_else(|| LinkError::Dump(format!("record {k}: detector id {} out of range", rec[8])))?;
            events.push(DetectionEvent { timestamp, detector, true_slot: None });
        }
        Ok(Self { resolution, config_hash, events })
    }

    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<(), LinkError> {
        writeln!(w, "# resolution {:e}", self.resolution).map_err(io_err)?;
        writeln!(w, "# config_sha256 {}", hex(&self.config_hash)).map_err(io_err)?;
        writeln!(w, "# count {}", self.events.len()).map_err(io_err)?;
        for e in &self.events {
            writeln!(w, "{} {}", e.timestamp, e.detector as u8).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self, LinkError> {
        let mut resolution = None;
        let mut config_hash = None;
        let mut events = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(io_err)?;
            let bad = |what: &str| LinkError::Dump(format!("line {}: {what}", n + 1));
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let mut parts = header.split_whitespace();
                match (parts.next(), parts.next()) {
                    (Some("resolution"), Some(v)) => resolution = Some(v.parse().map_err(|_| bad("bad resolution"))?),
                    (Some("config_sha256"), Some(v)) => config_hash = Some(unhex(v).ok_or_else(|| bad("bad hash"))?),
                    _ => {}
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let timestamp = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad timestamp"))?;
            let detector = parts
                .next()
                .and_then(|v| v.parse().ok())
                .and_then(DetectorId::from_index)
                .ok_or_else(|| bad("bad detector id"))?;
            events.push(DetectionEvent { timestamp, detector, true_slot: None });
        }
        Ok(Self {
            resolution: resolution.ok_or_else(|| LinkError::Dump("missing resolution header".into()))?,
            config_hash: config_hash.unwrap_or([0; 32]),
            events,
        })
    }

    fn is_text(path: &Path) -> bool {
        matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "tsv"))
    }

    /// Writes binary, or text when the extension is `.txt`/`.tsv`.
    pub fn save(&self, path: &Path) -> Result<(), LinkError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        if Self::is_text(path) {
            self.write_text(&mut w)?;
        } else {
            self.write_binary(&mut w)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, LinkError> {
        let file = File::open(path).map_err(|e| LinkError::Dump(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        if Self::is_text(path) {
            Self::read_text(r)
        } else {
            Self::read_binary(&mut r)
        }
    }
}
