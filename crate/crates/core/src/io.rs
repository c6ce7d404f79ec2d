//! Text formats for tracks, poses, points, loop pairs and evaluation output.
//!
//! Floats are written with 17 significant digits so every round trip is
//! exact. CSV files carry a header row; the poses file is whitespace
//! separated, one `frame_id qw qx qy qz tx ty tz` line per keyframe.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{KeyframePose, Rotation};
use crate::metrics::Metrics;
use crate::tracks::{FrameId, MapPoint, Observation, TrackError, TrackSet};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("header mismatch: expected {expected:?}")]
    Header { expected: String },
    #[error(transparent)]
    Track(#[from] TrackError),
}

/// Scientific notation with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T, IoError> {
    s.trim().parse().map_err(|_| IoError::Parse { line, msg: format!("bad {what} {s:?}") })
}

fn csv_writer<W: Write>(w: W, header: &[&str]) -> Result<csv::Writer<W>, IoError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(header)?;
    Ok(wr)
}

/// Data records of a CSV stream whose header must equal `header`; yields
/// `(line, record)`.
fn csv_records<R: Read>(r: R, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>, IoError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let h = rd.headers()?.clone();
    if h.iter().collect::<Vec<_>>() != header {
        return Err(IoError::Header { expected: header.join(",") });
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(IoError::Parse { line: i + 2, msg: format!("expected {} fields, found {}", header.len(), rec.len()) });
        }
        out.push((i + 2, rec));
    }
    Ok(out)
}

const TRACKS_HEADER: [&str; 4] = ["track_id", "frame_id", "u_x", "u_y"];
const POINTS_HEADER: [&str; 4] = ["track_id", "x", "y", "z"];
const LOOPS_HEADER: [&str; 2] = ["at_frame", "matched_frame"];
const METRICS_HEADER: [&str; 3] = ["frame_id", "pos_err", "rot_err_deg"];

pub fn write_tracks<W: Write>(w: W, tracks: &TrackSet) -> Result<(), IoError> {
    let mut wr = csv_writer(w, &TRACKS_HEADER)?;
    for o in tracks.observations() {
        wr.write_record([o.track_id.to_string(), o.frame_id.to_string(), fmt17(o.u.x), fmt17(o.u.y)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_tracks<R: Read>(r: R) -> Result<TrackSet, IoError> {
    let mut obs = Vec::new();
    for (line, rec) in csv_records(r, &TRACKS_HEADER)? {
        obs.push(Observation {
            track_id: parse(&rec[0], line, "track id")?,
            frame_id: parse(&rec[1], line, "frame id")?,
            u: Vector2::new(parse(&rec[2], line, "coordinate")?, parse(&rec[3], line, "coordinate")?),
        });
    }
    Ok(TrackSet::from_observations(obs)?)
}

pub fn write_poses<W: Write>(mut w: W, poses: &BTreeMap<FrameId, KeyframePose>) -> Result<(), IoError> {
    for (f, p) in poses {
        let q = p.r.to_quaternion();
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        let vals = [q.w, q.i, q.j, q.k, p.t.x, p.t.y, p.t.z].map(fmt17);
        writeln!(w, "{f} {}", vals.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses<R: Read>(r: R) -> Result<BTreeMap<FrameId, KeyframePose>, IoError> {
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let n = i + 1;
        let s = line.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 8 {
            return Err(IoError::Parse { line: n, msg: format!("expected 8 fields, found {}", parts.len()) });
        }
        let f: FrameId = parse(parts[0], n, "frame id")?;
        let v: Vec<f64> = parts[1..].iter().map(|p| parse(p, n, "number")).collect::<Result<_, _>>()?;
        let q = Quaternion::new(v[0], v[1], v[2], v[3]);
        if !(q.norm() > 0.0) {
            return Err(IoError::Parse { line: n, msg: "zero quaternion".into() });
        }
        let r = Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q));
        if out.insert(f, KeyframePose::new(r, Vector3::new(v[4], v[5], v[6]))).is_some() {
            return Err(IoError::Parse { line: n, msg: format!("duplicate frame {f}") });
        }
    }
    Ok(out)
}

pub fn write_points<W: Write>(w: W, points: &[MapPoint]) -> Result<(), IoError> {
    let mut wr = csv_writer(w, &POINTS_HEADER)?;
    for p in points {
        wr.write_record([p.track_id.to_string(), fmt17(p.x.x), fmt17(p.x.y), fmt17(p.x.z)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_points<R: Read>(r: R) -> Result<Vec<MapPoint>, IoError> {
    csv_records(r, &POINTS_HEADER)?
        .into_iter()
        .map(|(line, rec)| {
            Ok(MapPoint {
                track_id: parse(&rec[0], line, "track id")?,
                x: Vector3::new(parse(&rec[1], line, "x")?, parse(&rec[2], line, "y")?, parse(&rec[3], line, "z")?),
            })
        })
        .collect()
}

/// Loop pairs `(at_frame, matched_frame)`.
pub fn write_loops<W: Write>(w: W, pairs: &[(FrameId, FrameId)]) -> Result<(), IoError> {
    let mut wr = csv_writer(w, &LOOPS_HEADER)?;
    for (a, m) in pairs {
        wr.write_record([a.to_string(), m.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_loops<R: Read>(r: R) -> Result<Vec<(FrameId, FrameId)>, IoError> {
    csv_records(r, &LOOPS_HEADER)?
        .into_iter()
        .map(|(line, rec)| Ok((parse(&rec[0], line, "frame id")?, parse(&rec[1], line, "frame id")?)))
        .collect()
}

/// Per-frame rows followed by `rmse` and `max` summary rows.
pub fn write_metrics<W: Write>(w: W, m: &Metrics) -> Result<(), IoError> {
    let mut wr = csv_writer(w, &METRICS_HEADER)?;
    for ((f, p), r) in m.frames.iter().zip(&m.pos_err).zip(&m.rot_err_deg) {
        wr.write_record([f.to_string(), fmt17(*p), fmt17(*r)])?;
    }
    wr.write_record(["rmse".to_string(), fmt17(m.pos_rmse), fmt17(m.rot_rmse_deg)])?;
    wr.write_record(["max".to_string(), fmt17(m.pos_max), fmt17(m.rot_max_deg)])?;
    wr.flush()?;
    Ok(())
}

/// Rows `(label, values)` under `header`, floats at full precision.
pub fn write_table<W: Write>(w: W, header: &[&str], rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<(), IoError> {
    let mut wr = csv_writer(w, header)?;
    for (label, vals) in rows {
        let mut rec = vec![label];
        rec.extend(vals.into_iter().map(fmt17));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    Ok(BufReader::new(File::open(path)?))
}
