//! Simulated network: an in-process ordered message bus that records every
//! transfer in a communication ledger.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockDescriptor, ParamBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upload,
    Download,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Upload => "upload",
            Direction::Download => "download",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub direction: Direction,
    pub from: String,
    pub to: String,
    pub payload: Vec<BlockDescriptor>,
    /// Floats carried by the payload.
    pub scalar_count: usize,
    /// `scalar_count × 8`.
    pub byte_count: usize,
    /// Encoded size including block names and headers.
    pub wire_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommTotals {
    pub messages: usize,
    pub uploads: usize,
    pub downloads: usize,
    pub scalars: usize,
    pub bytes: usize,
}

impl CommTotals {
    fn add(&mut self, m: &Message) {
        self.messages += 1;
        match m.direction {
            Direction::Upload => self.uploads += 1,
            Direction::Download => self.downloads += 1,
        }
        self.scalars += m.scalar_count;
        self.bytes += m.byte_count;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub messages: Vec<Message>,
}

impl CommLedger {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn totals(&self) -> CommTotals {
        let mut t = CommTotals::default();
        self.messages.iter().for_each(|m| t.add(m));
        t
    }

    pub fn round_totals(&self, round: usize) -> CommTotals {
        let mut t = CommTotals::default();
        self.messages.iter().filter(|m| m.round == round).for_each(|m| t.add(m));
        t
    }

    /// Messages sent or received by `endpoint`.
    pub fn endpoint_totals(&self, endpoint: &str) -> CommTotals {
        let mut t = CommTotals::default();
        self.messages
            .iter()
            .filter(|m| m.from == endpoint || m.to == endpoint)
            .for_each(|m| t.add(m));
        t
    }

    pub fn rounds(&self) -> usize {
        let mut r: Vec<usize> = self.messages.iter().map(|m| m.round).collect();
        r.sort_unstable();
        r.dedup();
        r.len()
    }

    pub const CSV_HEADER: [&'static str; 8] = [
        "round",
        "direction",
        "from",
        "to",
        "payload",
        "scalar_count",
        "byte_count",
        "wire_bytes",
    ];

    /// One row per message; `payload` lists `name[d0xd1]` entries joined by `;`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        for m in &self.messages {
            let payload = m
                .payload
                .iter()
                .map(|d| {
                    let dims: Vec<String> = d.shape.iter().map(|x| x.to_string()).collect();
                    format!("{}[{}]", d.name, dims.join("x"))
                })
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                m.round.to_string(),
                m.direction.name().to_string(),
                m.from.clone(),
                m.to.clone(),
                payload,
                m.scalar_count.to_string(),
                m.byte_count.to_string(),
                m.wire_bytes.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds the accounting columns from a ledger CSV (payload shapes are
    /// parsed back into descriptors).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut messages = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                message: format!("bad {what}"),
            };
            let num = |j: usize, what: &str| rec.get(j).and_then(|s| s.parse::<usize>().ok()).ok_or_else(|| bad(what));
            let direction = match rec.get(1) {
                Some("upload") => Direction::Upload,
                Some("download") => Direction::Download,
                _ => return Err(bad("direction")),
            };
            let mut payload = Vec::new();
            for entry in rec.get(4).unwrap_or("").split(';').filter(|s| !s.is_empty()) {
                let (name, dims) = entry.strip_suffix(']').and_then(|e| e.split_once('[')).ok_or_else(|| bad("payload"))?;
                let shape = dims
                    .split('x')
                    .filter(|s| !s.is_empty())
                    .map(|d| d.parse::<usize>().map_err(|_| bad("payload shape")))
                    .collect::<Result<Vec<_>>>()?;
                payload.push(BlockDescriptor {
                    name: name.to_string(),
                    shape,
                });
            }
            messages.push(Message {
                round: num(0, "round")?,
                direction,
                from: rec.get(2).unwrap_or("").to_string(),
                to: rec.get(3).unwrap_or("").to_string(),
                payload,
                scalar_count: num(5, "scalar_count")?,
                byte_count: num(6, "byte_count")?,
                wire_bytes: num(7, "wire_bytes")?,
            });
        }
        Ok(Self { messages })
    }
}

/// Loss-free, ordered, in-process delivery. Payloads travel as encoded bytes.
#[derive(Debug, Default)]
pub struct MessageBus {
    in_flight: VecDeque<(String, Vec<u8>)>,
    pub ledger: CommLedger,
}

impl MessageBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, round: usize, direction: Direction, from: &str, to: &str, block: &ParamBlock) {
        let bytes = block.encode();
        let scalar_count = block.scalar_count();
        self.ledger.messages.push(Message {
            round,
            direction,
            from: from.to_string(),
            to: to.to_string(),
            payload: block.descriptors(),
            scalar_count,
            byte_count: scalar_count * 8,
            wire_bytes: bytes.len(),
        });
        self.in_flight.push_back((to.to_string(), bytes));
    }

    /// The oldest undelivered message addressed to `to`.
    pub fn receive(&mut self, to: &str) -> Result<ParamBlock> {
        let pos = self
            .in_flight
            .iter()
            .position(|(dest, _)| dest == to)
            .ok_or_else(|| Error::Wire(format!("no message waiting for {to}")))?;
        let (_, bytes) = self.in_flight.remove(pos).expect("position is valid");
        ParamBlock::decode(&bytes)
    }

    pub fn pending(&self) -> usize {
        self.in_flight.len()
    }
}
