//! Body and face expressivity features from keypoint and action-unit tracks.
//!
//! Raw tracks carry gaps (undetected frames) and detection spikes. Every
//! channel is gap-filled by linear interpolation and then smoothed with a
//! width-5 median filter before it reaches an encoder.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MEDIAN_KERNEL: usize = 5;
pub const QOM_OFFSET: usize = 10;
pub const MIN_CONFIDENCE: f64 = 0.3;
pub const BUST_EPS: f64 = 1e-6;

/// Upper-face action units kept from the face tracker output.
pub const UPPER_FACE_AUS: [&str; 8] = ["AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU45"];

/// Column order of face feature matrices: the upper-face AU intensities,
/// gaze angles (radians), head translation, and head rotation (radians).
pub const FACE_CHANNELS: [&str; 16] = [
    "AU01", "AU02", "AU04", "AU05", "AU06", "AU07", "AU09", "AU45", "gaze_angle_x", "gaze_angle_y", "pose_Tx",
    "pose_Ty", "pose_Tz", "pose_Rx", "pose_Ry", "pose_Rz",
];

pub const BODY_CHANNELS: [&str; 2] = ["amplitude", "qom"];

/// Windowed median. Near the edges the window shrinks symmetrically so it
/// stays centred on `i` (half-width `min(kernel / 2, i, len - 1 - i)`), which
/// keeps every window odd-sized.
pub fn median_filter(series: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Parameter(format!("median kernel must be odd and positive, got {kernel}")));
    }
    let n = series.len();
    let mut window = Vec::with_capacity(kernel);
    Ok((0..n)
        .map(|i| {
            let half = (kernel / 2).min(i).min(n - 1 - i);
            window.clear();
            window.extend_from_slice(&series[i - half..=i + half]);
            window.sort_by(f64::total_cmp);
            window[half]
        })
        .collect())
}

/// Fills interior gaps linearly between the nearest observed neighbours and
/// edge gaps with the nearest observed value.
pub fn interpolate_missing(series: &[Option<f64>], channel: &str) -> Result<Vec<f64>> {
    let observed: Vec<(usize, f64)> = series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.filter(|x| x.is_finite()).map(|x| (i, x)))
        .collect();
    let (&(first_i, first_v), &(last_i, last_v)) = match (observed.first(), observed.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::AllMissing(channel.to_string())),
    };
    let mut out = vec![0.0; series.len()];
    out[..first_i].fill(first_v);
    out[last_i..].fill(last_v);
    for pair in observed.windows(2) {
        let ((i0, v0), (i1, v1)) = (pair[0], pair[1]);
        out[i0] = v0;
        let span = (i1 - i0) as f64;
        for (k, slot) in out.iter_mut().enumerate().take(i1).skip(i0 + 1) {
            let t = (k - i0) as f64 / span;
            *slot = v0 + t * (v1 - v0);
        }
    }
    out[last_i] = last_v;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn dist(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// The four joints the body features use, all detected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBody {
    pub left_wrist: Point,
    pub right_wrist: Point,
    pub neck: Point,
    pub mid_hip: Point,
}

impl UpperBody {
    fn points(&self) -> [Point; 4] {
        [self.left_wrist, self.right_wrist, self.neck, self.mid_hip]
    }

    /// Bust height: neck to mid-hip distance.
    pub fn bust_height(&self) -> f64 {
        self.neck.dist(self.mid_hip)
    }

    /// Area of the axis-aligned box around wrists, neck, and mid-hip.
    pub fn box_area(&self) -> f64 {
        let pts = self.points();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in pts {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
            y0 = y0.min(p.y);
            y1 = y1.max(p.y);
        }
        (x1 - x0) * (y1 - y0)
    }
}

/// Wrist-to-wrist distance divided by the bust height.
pub fn amplitude(joints: &UpperBody) -> Result<f64> {
    let h = joints.bust_height();
    if !(h > BUST_EPS) {
        return Err(Error::DegenerateFraming(h));
    }
    Ok(joints.left_wrist.dist(joints.right_wrist) / h)
}

/// `QoM(t) = Area(t + n) - Area(t)`; missing where either area is missing,
/// including the final `n` frames.
pub fn quantity_of_motion(areas: &[Option<f64>], n: usize) -> Result<Vec<Option<f64>>> {
    if n == 0 {
        return Err(Error::Parameter("QoM frame offset must be positive".into()));
    }
    Ok((0..areas.len())
        .map(|t| match (areas[t], areas.get(t + n).copied().flatten()) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Detection {
    pub point: Option<Point>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointFrame {
    pub left_wrist: Detection,
    pub right_wrist: Detection,
    pub neck: Detection,
    pub mid_hip: Detection,
}

impl KeypointFrame {
    /// All four joints, if each was detected with enough confidence.
    pub fn upper_body(&self) -> Option<UpperBody> {
        let get = |d: &Detection| d.point.filter(|_| d.confidence >= MIN_CONFIDENCE);
        Some(UpperBody {
            left_wrist: get(&self.left_wrist)?,
            right_wrist: get(&self.right_wrist)?,
            neck: get(&self.neck)?,
            mid_hip: get(&self.mid_hip)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointTrack {
    pub fps: f64,
    pub frames: Vec<KeypointFrame>,
}

/// Per-frame amplitude and QoM before gap filling and smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyFeatureTrack {
    pub amplitude: Vec<Option<f64>>,
    pub qom: Vec<Option<f64>>,
}

pub fn body_features(track: &KeypointTrack, n: usize) -> Result<BodyFeatureTrack> {
    let bodies: Vec<Option<UpperBody>> = track.frames.iter().map(KeypointFrame::upper_body).collect();
    // A degenerate framing in one frame marks that frame missing.
    let amplitude = bodies.iter().map(|b| b.and_then(|b| amplitude(&b).ok())).collect();
    let areas: Vec<Option<f64>> = bodies
        .iter()
        .map(|b| b.filter(|b| b.bust_height() > BUST_EPS).map(|b| b.box_area()))
        .collect();
    Ok(BodyFeatureTrack {
        amplitude,
        qom: quantity_of_motion(&areas, n)?,
    })
}

/// Named channels over time, `frames x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub channels: Vec<String>,
    pub values: Tensor,
}

/// Interpolates then median-filters each channel independently.
pub fn preprocess_channels(channels: &[(&str, Vec<Option<f64>>)]) -> Result<FeatureMatrix> {
    let frames = channels.first().map_or(0, |c| c.1.len());
    if frames == 0 {
        return Err(Error::Empty("feature track with zero frames"));
    }
    let mut values = Tensor::zeros(frames, channels.len());
    for (c, (name, series)) in channels.iter().enumerate() {
        if series.len() != frames {
            return Err(Error::Shape {
                op: "preprocess_channels",
                left: vec![frames],
                right: vec![series.len()],
            });
        }
        let filled = interpolate_missing(series, name)?;
        for (t, v) in median_filter(&filled, MEDIAN_KERNEL)?.into_iter().enumerate() {
            values.set(t, c, v);
        }
    }
    Ok(FeatureMatrix {
        channels: channels.iter().map(|c| c.0.to_string()).collect(),
        values,
    })
}

pub fn preprocess_body(track: &KeypointTrack) -> Result<FeatureMatrix> {
    let f = body_features(track, QOM_OFFSET)?;
    preprocess_channels(&[(BODY_CHANNELS[0], f.amplitude), (BODY_CHANNELS[1], f.qom)])
}

/// Face tracker output restricted to [`FACE_CHANNELS`]; `None` marks a
/// missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct AuTrack {
    pub frames: Vec<[Option<f64>; 16]>,
}

pub fn preprocess_face(track: &AuTrack) -> Result<FeatureMatrix> {
    let channels: Vec<(&str, Vec<Option<f64>>)> = FACE_CHANNELS
        .iter()
        .enumerate()
        .map(|(c, name)| (*name, track.frames.iter().map(|f| f[c]).collect()))
        .collect();
    preprocess_channels(&channels)
}

/// Reads an `*.au.csv` file. The header must name every column of
/// [`FACE_CHANNELS`]; other columns (`frame`, lower-face AUs, ...) are
/// ignored. Empty cells and `nan` are missing values.
pub fn read_au_csv(path: &Path) -> Result<AuTrack> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header = rdr.headers()?.clone();
    let cols: Vec<usize> = FACE_CHANNELS
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::format(path.display(), format!("missing column {name}")))
        })
        .collect::<Result<_>>()?;
    let mut frames = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = [None; 16];
        for (c, &col) in cols.iter().enumerate() {
            let cell = rec.get(col).unwrap_or("");
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::format(path.display(), format!("row {}: bad number `{cell}`", n + 1)))?;
            if c < UPPER_FACE_AUS.len() && !(0.0..=5.0).contains(&v) {
                return Err(Error::format(
                    path.display(),
                    format!("row {}: {} intensity {v} outside [0, 5]", n + 1, FACE_CHANNELS[c]),
                ));
            }
            row[c] = Some(v);
        }
        frames.push(row);
    }
    Ok(AuTrack { frames })
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseLine {
    frame: usize,
    joint: String,
    x: Option<f64>,
    y: Option<f64>,
    confidence: f64,
}

#[derive(Debug, Deserialize)]
struct PoseHeader {
    fps: f64,
}

pub const DEFAULT_FPS: f64 = 25.0;

/// Reads a `*.pose.jsonl` file: an optional `{"fps": ..}` first line, then one
/// `{"frame", "joint", "x", "y", "confidence"}` object per detection. Joints
/// other than wrists, neck, and mid-hip are ignored; undetected joints may be
/// omitted or carry null coordinates.
pub fn read_pose_jsonl(path: &Path) -> Result<KeypointTrack> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut fps = DEFAULT_FPS;
    let mut frames: BTreeMap<usize, KeypointFrame> = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if n == 0 {
            if let Ok(h) = serde_json::from_str::<PoseHeader>(&line) {
                if !(h.fps > 0.0) {
                    return Err(Error::format(path.display(), "fps must be positive"));
                }
                fps = h.fps;
                continue;
            }
        }
        let p: PoseLine =
            serde_json::from_str(&line).map_err(|e| Error::format(path.display(), format!("line {}: {e}", n + 1)))?;
        let point = match (p.x, p.y) {
            (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Some(Point::new(x, y)),
            _ => None,
        };
        let det = Detection {
            point,
            confidence: p.confidence.clamp(0.0, 1.0),
        };
        let frame = frames.entry(p.frame).or_default();
        match p.joint.as_str() {
            "left_wrist" => frame.left_wrist = det,
            "right_wrist" => frame.right_wrist = det,
            "neck" => frame.neck = det,
            "mid_hip" => frame.mid_hip = det,
            _ => {}
        }
    }
    let len = frames.keys().next_back().map_or(0, |&k| k + 1);
    let mut out = vec![KeypointFrame::default(); len];
    for (k, f) in frames {
        out[k] = f;
    }
    Ok(KeypointTrack { fps, frames: out })
}

pub fn write_pose_jsonl(path: &Path, track: &KeypointTrack) -> Result<()> {
    let mut buf = serde_json::to_vec(&serde_json::json!({ "fps": track.fps }))?;
    buf.push(b'\n');
    for (i, f) in track.frames.iter().enumerate() {
        for (name, d) in [
            ("left_wrist", f.left_wrist),
            ("right_wrist", f.right_wrist),
            ("neck", f.neck),
            ("mid_hip", f.mid_hip),
        ] {
            let line = PoseLine {
                frame: i,
                joint: name.to_string(),
                x: d.point.map(|p| p.x),
                y: d.point.map(|p| p.y),
                confidence: d.confidence,
            };
            serde_json::to_writer(&mut buf, &line)?;
            buf.push(b'\n');
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes a `*.feat.csv`: a header of channel names, one row per frame.
pub fn write_feat_csv(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&m.channels)?;
    for t in 0..m.values.rows() {
        w.write_record(m.values.row_slice(t).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feat_csv(path: &Path) -> Result<FeatureMatrix> {
    let mut rdr = csv::Reader::from_path(path)?;
    let channels: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for cell in rec.iter() {
            data.push(
                cell.parse::<f64>()
                    .map_err(|_| Error::format(path.display(), format!("bad number `{cell}`")))?,
            );
        }
        rows += 1;
    }
    let values = Tensor::from_vec(rows, channels.len(), data)
        .map_err(|_| Error::format(path.display(), "ragged rows"))?;
    Ok(FeatureMatrix { channels, values })
}

/// Writes an `*.au.csv` with a `frame` column followed by `extra` and the
/// [`FACE_CHANNELS`] columns; missing values are empty cells.
pub fn write_au_csv(path: &Path, track: &AuTrack, extra: &[(&str, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["frame".to_string()];
    header.extend(extra.iter().map(|e| e.0.to_string()));
    header.extend(FACE_CHANNELS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (t, f) in track.frames.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(extra.iter().map(|e| e.1[t].to_string()));
        rec.extend(f.iter().map(|v| v.map_or_else(String::new, |x| x.to_string())));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
