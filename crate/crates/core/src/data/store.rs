use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Frame, Track};
use crate::error::{Error, Result};

/// One line of the NDJSON track store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FrameRecord {
    pub vehicle_id: u64,
    pub frame_index: i64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub lane_id: i32,
    #[serde(rename = "W")]
    pub width: f64,
    #[serde(rename = "L")]
    pub length: f64,
    #[serde(rename = "C")]
    pub class: i32,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub site: String,
}

pub fn write_store(tracks: &[Track], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tracks {
        for f in &t.frames {
            let rec = FrameRecord {
                vehicle_id: t.vehicle_id,
                frame_index: f.frame_index,
                x: f.x,
                y: f.y,
                v: f.v,
                a: f.a,
                lane_id: f.lane_id,
                width: f.width,
                length: f.length,
                class: f.class,
                site: t.site.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a track store. Frames are grouped per vehicle and ordered; a track
/// is split wherever the frame step exceeds the smallest step seen for that
/// vehicle, so separate runs of one vehicle stay separate.
pub fn read_store(path: &Path) -> Result<Vec<Track>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut by_vehicle: BTreeMap<u64, (String, BTreeMap<i64, Frame>)> = BTreeMap::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
        let entry = by_vehicle.entry(r.vehicle_id).or_insert_with(|| (r.site.clone(), BTreeMap::new()));
        entry.1.insert(
            r.frame_index,
            Frame {
                frame_index: r.frame_index,
                x: r.x,
                y: r.y,
                v: r.v,
                a: r.a,
                lane_id: r.lane_id,
                width: r.width,
                length: r.length,
                class: r.class,
            },
        );
    }
    let mut tracks = Vec::new();
    for (vehicle_id, (site, frames)) in by_vehicle {
        let frames: Vec<Frame> = frames.into_values().collect();
        let step = frames
            .windows(2)
            .map(|w| w[1].frame_index - w[0].frame_index)
            .min()
            .unwrap_or(1);
        let mut run: Vec<Frame> = Vec::new();
        for f in frames {
            if run.last().is_some_and(|p| f.frame_index - p.frame_index > step) {
                tracks.push(Track {
                    vehicle_id,
                    site: site.clone(),
                    frames: std::mem::take(&mut run),
                });
            }
            run.push(f);
        }
        tracks.push(Track {
            vehicle_id,
            site,
            frames: run,
        });
    }
    Ok(tracks)
}
