use std::collections::BTreeMap;
use std::path::Path;

use super::{Frame, Track};
use crate::error::{Error, Result};

/// Required header names; column order in the file is free.
pub const NGSIM_COLUMNS: [&str; 10] = [
    "Vehicle_ID",
    "Frame_ID",
    "Local_X",
    "Local_Y",
    "v_Vel",
    "v_Acc",
    "Lane_ID",
    "v_Class",
    "v_Width",
    "v_Length",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ParseReport {
    pub tracks: Vec<Track>,
    /// Rows skipped because a required field failed to parse, or because the
    /// frame repeated one already seen for that vehicle.
    pub malformed: usize,
}

fn parse_row(rec: &csv::StringRecord, cols: &[usize; 10]) -> Option<(u64, Frame)> {
    let f = |i: usize| rec.get(cols[i]).map(str::trim);
    let num = |i: usize| f(i)?.parse::<f64>().ok().filter(|v| v.is_finite());
    let int = |i: usize| -> Option<i64> {
        let s = f(i)?;
        s.parse::<i64>().ok().or_else(|| {
            let v = s.parse::<f64>().ok()?;
            (v.fract() == 0.0 && v.abs() < 1e15).then_some(v as i64)
        })
    };
    let vehicle = u64::try_from(int(0)?).ok()?;
    Some((
        vehicle,
        Frame {
            frame_index: int(1)?,
            x: num(2)?,
            y: num(3)?,
            v: num(4)?,
            a: num(5)?,
            lane_id: i32::try_from(int(6)?).ok()?,
            class: i32::try_from(int(7)?).ok()?,
            width: num(8)?,
            length: num(9)?,
        },
    ))
}

/// Reads an NGSIM-format CSV into one track per contiguous run of frames of
/// each vehicle. Tracks are ordered by vehicle id, then by first frame.
pub fn parse_ngsim(path: &Path, site: &str) -> Result<ParseReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Format(format!("{}: empty file", path.display())));
    }
    let mut cols = [0usize; 10];
    for (slot, name) in cols.iter_mut().zip(NGSIM_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut by_vehicle: BTreeMap<u64, BTreeMap<i64, Frame>> = BTreeMap::new();
    let mut malformed = 0;
    let mut rows = 0usize;
    for rec in reader.records() {
        rows += 1;
        let Some((vehicle, frame)) = rec.ok().as_ref().and_then(|r| parse_row(r, &cols)) else {
            malformed += 1;
            continue;
        };
        let frames = by_vehicle.entry(vehicle).or_default();
        if frames.insert(frame.frame_index, frame).is_some() {
            malformed += 1;
        }
    }
    if rows == 0 {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    let mut tracks = Vec::new();
    for (vehicle_id, frames) in by_vehicle {
        let mut run: Vec<Frame> = Vec::new();
        for frame in frames.into_values() {
            if run.last().is_some_and(|p| frame.frame_index != p.frame_index + 1) {
                tracks.push(Track {
                    vehicle_id,
                    site: site.to_string(),
                    frames: std::mem::take(&mut run),
                });
            }
            run.push(frame);
        }
        tracks.push(Track {
            vehicle_id,
            site: site.to_string(),
            frames: run,
        });
    }
    Ok(ParseReport { tracks, malformed })
}

/// Writes tracks back in the same column layout the parser accepts.
pub fn write_ngsim(tracks: &[Track], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(NGSIM_COLUMNS)?;
    for t in tracks {
        for f in &t.frames {
            w.write_record([
                t.vehicle_id.to_string(),
                f.frame_index.to_string(),
                f.x.to_string(),
                f.y.to_string(),
                f.v.to_string(),
                f.a.to_string(),
                f.lane_id.to_string(),
                f.class.to_string(),
                f.width.to_string(),
                f.length.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
