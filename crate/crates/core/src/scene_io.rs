//! Point-cloud, label and prediction file formats.
//!
//! * Point binary: headerless records of four little-endian `f32`
//!   (x, y, z, intensity).
//! * ASCII xyz: one point per line, 3 or 4 numbers separated by whitespace
//!   or commas, `#` starts a comment line.
//! * Predictions / labels: JSON documents with a `boxes` array. Reals are
//!   written with 17 significant digits so every `f64` survives a round trip.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::value::RawValue;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geom::{wrap, OrientedBox, Point};

const RECORD_BYTES: usize = 16;

/// Columnar point storage. Order is significant and preserved by all I/O.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub frame_id: String,
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    intensity: Vec<f64>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        PointCloud {
            frame_id: String::new(),
            xs: Vec::with_capacity(n),
            ys: Vec::with_capacity(n),
            zs: Vec::with_capacity(n),
            intensity: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn push(&mut self, p: Point) {
        self.xs.push(p.x);
        self.ys.push(p.y);
        self.zs.push(p.z);
        self.intensity.push(p.intensity);
    }

    #[inline]
    pub fn get(&self, i: usize) -> Point {
        Point::new(self.xs[i], self.ys[i], self.zs[i], self.intensity[i])
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn zs(&self) -> &[f64] {
        &self.zs
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensity
    }

    /// Applies `f` to every point, keeping order and frame id.
    pub fn map_points(&self, mut f: impl FnMut(&Point) -> Point) -> PointCloud {
        let mut out = PointCloud::with_capacity(self.len());
        out.frame_id = self.frame_id.clone();
        for p in self.iter() {
            out.push(f(&p));
        }
        out
    }

    /// Sub-cloud holding the given indices in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let mut out = PointCloud::with_capacity(indices.len());
        out.frame_id = self.frame_id.clone();
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        let mut pc = PointCloud::new();
        for p in iter {
            pc.push(p);
        }
        pc
    }
}

/// A cloud with its ground truth: boxes for detection and optional
/// per-point class ids for segmentation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    pub gt_boxes: Vec<OrientedBox>,
    pub point_labels: Option<Vec<i32>>,
}

impl LabeledScene {
    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.point_labels {
            if labels.len() != self.cloud.len() {
                return Err(Error::Contract(format!(
                    "{} point labels for {} points",
                    labels.len(),
                    self.cloud.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn read_point_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(Error::ByteFormat {
            offset,
            message: format!(
                "length {} is not a multiple of {RECORD_BYTES}; trailing {} bytes",
                bytes.len(),
                bytes.len() - offset
            ),
        });
    }
    let mut pc = PointCloud::with_capacity(bytes.len() / RECORD_BYTES);
    for (record, chunk) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let mut v = [0f32; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            let raw: [u8; 4] = chunk[4 * k..4 * k + 4].try_into().expect("4-byte field");
            *slot = f32::from_le_bytes(raw);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::RecordFormat {
                record,
                message: format!("non-finite value in {v:?}"),
            });
        }
        pc.push(Point::new(
            v[0] as f64,
            v[1] as f64,
            v[2] as f64,
            v[3] as f64,
        ));
    }
    Ok(pc)
}

pub fn write_point_bin(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * RECORD_BYTES);
    for p in pc.iter() {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_ascii_xyz(text: &str) -> Result<PointCloud> {
    let mut pc = PointCloud::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::LineFormat {
                line: line_no,
                message: format!("expected 3 or 4 numbers, found {}", fields.len()),
            });
        }
        let mut v = [0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|_| Error::LineFormat {
                line: line_no,
                message: format!("`{f}` is not a number"),
            })?;
            if !slot.is_finite() {
                return Err(Error::LineFormat {
                    line: line_no,
                    message: format!("`{f}` is not finite"),
                });
            }
        }
        pc.push(Point::new(v[0], v[1], v[2], v[3]));
    }
    Ok(pc)
}

/// Loads a cloud, choosing the decoder by extension: `.bin` is binary,
/// anything else is read as ASCII xyz.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let is_bin = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("bin"))
        .unwrap_or(false);
    let mut pc = if is_bin {
        read_point_bin(&fs::read(path)?)?
    } else {
        read_ascii_xyz(&fs::read_to_string(path)?)?
    };
    pc.frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(pc)
}

/// `%.17g`-style rendering: shortest form that still carries 17
/// significant digits, trailing zeros removed.
pub(crate) fn format_g17(v: f64) -> String {
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp) as usize;
        let fixed = format!("{v:.decimals$}");
        strip_zeros(&fixed).to_string()
    } else {
        format!("{}e{}", strip_zeros(mantissa), exp)
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn raw(v: f64) -> Box<RawValue> {
    RawValue::from_string(format_g17(v)).expect("finite real is valid JSON")
}

#[derive(Serialize)]
struct BoxRecord {
    cx: Box<RawValue>,
    cy: Box<RawValue>,
    cz: Box<RawValue>,
    l: Box<RawValue>,
    w: Box<RawValue>,
    h: Box<RawValue>,
    yaw: Box<RawValue>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<Box<RawValue>>,
    class_id: u32,
}

impl BoxRecord {
    fn new(b: &OrientedBox, with_score: bool) -> Self {
        BoxRecord {
            cx: raw(b.cx),
            cy: raw(b.cy),
            cz: raw(b.cz),
            l: raw(b.length),
            w: raw(b.width),
            h: raw(b.height),
            yaw: raw(b.yaw),
            score: with_score.then(|| raw(b.score)),
            class_id: b.class_id,
        }
    }
}

#[derive(Serialize)]
struct PredictionDoc<'a> {
    frame: &'a str,
    boxes: Vec<BoxRecord>,
}

#[derive(Serialize)]
struct LabelDoc<'a> {
    frame: &'a str,
    boxes: Vec<BoxRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    point_labels: Option<&'a [i32]>,
}

pub fn write_predictions(frame: &str, boxes: &[OrientedBox]) -> String {
    let doc = PredictionDoc {
        frame,
        boxes: boxes.iter().map(|b| BoxRecord::new(b, true)).collect(),
    };
    serde_json::to_string(&doc).expect("prediction document serializes")
}

pub fn write_labels(frame: &str, boxes: &[OrientedBox], point_labels: Option<&[i32]>) -> String {
    let doc = LabelDoc {
        frame,
        boxes: boxes.iter().map(|b| BoxRecord::new(b, false)).collect(),
        point_labels,
    };
    serde_json::to_string(&doc).expect("label document serializes")
}

/// Predictions document: frame id plus scored boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub frame: String,
    pub boxes: Vec<OrientedBox>,
}

/// Labels document: frame id, unscored boxes and optional point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub frame: String,
    pub boxes: Vec<OrientedBox>,
    pub point_labels: Option<Vec<i32>>,
}

pub fn read_predictions(text: &str) -> Result<Predictions> {
    let root = parse_root(text)?;
    Ok(Predictions {
        frame: frame_of(&root)?,
        boxes: boxes_of(&root, true)?,
    })
}

pub fn read_labels(text: &str) -> Result<Labels> {
    let root = parse_root(text)?;
    let point_labels = match root.get("point_labels") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) => Some(
            items
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.as_i64()
                        .and_then(|x| i32::try_from(x).ok())
                        .ok_or_else(|| {
                            Error::schema(format!("point_labels[{i}]"), "expected a 32-bit integer")
                        })
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        Some(_) => return Err(Error::schema("point_labels", "expected an array")),
    };
    Ok(Labels {
        frame: frame_of(&root)?,
        boxes: boxes_of(&root, false)?,
        point_labels,
    })
}

fn parse_root(text: &str) -> Result<Map<String, Value>> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::schema("$", format!("invalid JSON: {e}")))?;
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(Error::schema("$", "expected an object")),
    }
}

fn frame_of(root: &Map<String, Value>) -> Result<String> {
    match root.get("frame") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::schema("frame", "expected a string")),
        None => Err(Error::schema("frame", "missing field")),
    }
}

fn boxes_of(root: &Map<String, Value>, scored: bool) -> Result<Vec<OrientedBox>> {
    let items = match root.get("boxes") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(Error::schema("boxes", "expected an array")),
        None => return Err(Error::schema("boxes", "missing field")),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| parse_box(item, &format!("boxes[{i}]"), scored))
        .collect()
}

fn parse_box(item: &Value, path: &str, scored: bool) -> Result<OrientedBox> {
    let obj = item
        .as_object()
        .ok_or_else(|| Error::schema(path, "expected an object"))?;
    let real = |key: &str| -> Result<f64> {
        let field = format!("{path}.{key}");
        match obj.get(key) {
            None => Err(Error::schema(field, "missing field")),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::schema(field, "expected a finite number")),
        }
    };
    let positive = |key: &str| -> Result<f64> {
        let v = real(key)?;
        if v <= 0.0 {
            return Err(Error::schema(
                format!("{path}.{key}"),
                format!("must be > 0, got {v}"),
            ));
        }
        Ok(v)
    };
    let cx = real("cx")?;
    let cy = real("cy")?;
    let cz = real("cz")?;
    let length = positive("l")?;
    let width = positive("w")?;
    let height = positive("h")?;
    let yaw = real("yaw")?;
    let score = if scored {
        let s = real("score")?;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::schema(
                format!("{path}.score"),
                format!("must lie in [0, 1], got {s}"),
            ));
        }
        s
    } else {
        1.0
    };
    let class_field = format!("{path}.class_id");
    let class_id = match obj.get("class_id") {
        None => return Err(Error::schema(class_field, "missing field")),
        Some(v) => v
            .as_u64()
            .and_then(|c| u32::try_from(c).ok())
            .ok_or_else(|| Error::schema(class_field, "expected a non-negative integer"))?,
    };
    let yaw = if yaw > -PI && yaw <= PI {
        yaw
    } else {
        wrap(yaw)
    };
    Ok(OrientedBox {
        cx,
        cy,
        cz,
        length,
        width,
        height,
        yaw,
        score,
        class_id,
    })
}
