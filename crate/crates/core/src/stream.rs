//! Frame streams, visit segmentation and ground-truth alignment.
//!
//! A station's timestamped frame stream is cut into visits at inter-frame
//! gaps of `gap_threshold` seconds or more. Visits inherit a ground-truth
//! label only when strictly contained in exactly one RFID interval at the
//! same station; anything ambiguous stays unlabeled.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Cloud;

pub type ClassId = usize;

/// A timestamped preprocessed cloud.
#[derive(Debug, Clone)]
pub struct Frame {
    pub frame_id: String,
    pub station_id: String,
    /// Seconds since epoch.
    pub timestamp: f64,
    pub cloud: Cloud,
}

/// A temporally contiguous sequence of frames at one station.
#[derive(Debug, Clone)]
pub struct Visit {
    pub visit_id: String,
    pub station_id: String,
    pub frames: Vec<Frame>,
    pub start_ts: f64,
    pub end_ts: f64,
    pub true_label: Option<ClassId>,
}

impl Visit {
    /// Copy with the ground-truth label removed; hands the visit to paths
    /// that must not see evaluation labels.
    pub fn without_label(&self) -> Visit {
        Visit {
            true_label: None,
            ..self.clone()
        }
    }
}

/// One RFID presence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfidRecord {
    pub animal_id: ClassId,
    pub station_id: String,
    pub start_ts: f64,
    pub end_ts: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StreamError {
    #[error("stream for station {station} not sorted: {prev} followed by {next}")]
    UnsortedStream {
        station: String,
        prev: f64,
        next: f64,
    },
}

/// Cut per-station frame streams into visits. Consecutive frames closer
/// than `gap_threshold` seconds share a visit; a gap of exactly the
/// threshold or more starts a new one.
pub fn segment_visits(frames: Vec<Frame>, gap_threshold: f64) -> Result<Vec<Visit>, StreamError> {
    let mut by_station: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    for f in frames {
        by_station.entry(f.station_id.clone()).or_default().push(f);
    }

    let mut visits = Vec::new();
    for (station, frames) in by_station {
        for w in frames.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(StreamError::UnsortedStream {
                    station,
                    prev: w[0].timestamp,
                    next: w[1].timestamp,
                });
            }
        }
        let mut current: Vec<Frame> = Vec::new();
        let mut seq = 0usize;
        for frame in frames {
            let split = current
                .last()
                .is_some_and(|prev| frame.timestamp - prev.timestamp >= gap_threshold);
            if split {
                visits.push(finish_visit(&station, seq, std::mem::take(&mut current)));
                seq += 1;
            }
            current.push(frame);
        }
        if !current.is_empty() {
            visits.push(finish_visit(&station, seq, current));
        }
    }
    Ok(visits)
}

fn finish_visit(station: &str, seq: usize, frames: Vec<Frame>) -> Visit {
    let start_ts = frames.first().expect("visit frames non-empty").timestamp;
    let end_ts = frames.last().expect("visit frames non-empty").timestamp;
    Visit {
        visit_id: format!("{station}_v{seq:05}"),
        station_id: station.to_string(),
        frames,
        start_ts,
        end_ts,
        true_label: None,
    }
}

/// Assign ground-truth labels by strict interval containment.
///
/// A visit is labeled iff its `[start_ts, end_ts]` lies inside exactly one
/// same-station RFID record (closed intervals, boundary touching counts)
/// and overlaps no other candidate. Records that overlap each other at the
/// same station are treated as corrupt: any visit touching them stays
/// unlabeled.
pub fn align_ground_truth(visits: Vec<Visit>, rfid: &[RfidRecord]) -> Vec<Visit> {
    let mut by_station: BTreeMap<&str, Vec<(usize, &RfidRecord)>> = BTreeMap::new();
    for (i, r) in rfid.iter().enumerate() {
        by_station.entry(&r.station_id).or_default().push((i, r));
    }

    // records involved in a same-station mutual overlap
    let mut corrupt = vec![false; rfid.len()];
    for recs in by_station.values() {
        for (a, (ia, ra)) in recs.iter().enumerate() {
            for (ib, rb) in recs.iter().skip(a + 1) {
                if ra.start_ts <= rb.end_ts && rb.start_ts <= ra.end_ts {
                    corrupt[*ia] = true;
                    corrupt[*ib] = true;
                }
            }
        }
    }

    visits
        .into_iter()
        .map(|mut v| {
            v.true_label = None;
            let Some(recs) = by_station.get(v.station_id.as_str()) else {
                return v;
            };
            let overlapping: Vec<&(usize, &RfidRecord)> = recs
                .iter()
                .filter(|(_, r)| r.start_ts <= v.end_ts && v.start_ts <= r.end_ts)
                .collect();
            if let [(idx, rec)] = overlapping[..] {
                let contained = rec.start_ts <= v.start_ts && v.end_ts <= rec.end_ts;
                if contained && !corrupt[*idx] {
                    v.true_label = Some(rec.animal_id);
                }
            }
            v
        })
        .collect()
}

/// One frame manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_id: String,
    pub station_id: String,
    pub timestamp: f64,
    pub cloud_path: String,
}

/// Read a JSON-lines frame manifest.
pub fn read_manifest(reader: impl BufRead) -> std::io::Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], mut writer: impl Write) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut writer, e)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        writeln!(writer)?;
    }
    Ok(())
}

/// Read the RFID log CSV (`animal_id,station_id,start_ts,end_ts`).
pub fn read_rfid_csv(path: impl AsRef<Path>) -> std::io::Result<Vec<RfidRecord>> {
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let mut records = Vec::new();
    for row in reader.deserialize() {
        let rec: RfidRecord =
            row.map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        if !(rec.start_ts < rec.end_ts) {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("rfid record with start_ts {} >= end_ts {}", rec.start_ts, rec.end_ts),
            ));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_rfid_csv(records: &[RfidRecord], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    for r in records {
        writer
            .serialize(r)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    }
    writer.flush()
}
