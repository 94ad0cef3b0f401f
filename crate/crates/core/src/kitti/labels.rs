use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box3D;

/// One object line of a KITTI `label_2` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub class: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// `left, top, right, bottom` in pixels.
    pub bbox: [f64; 4],
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rotation_y: f64,
    /// Present in detection result files (16th column).
    pub score: Option<f64>,
}

impl LabelEntry {
    pub fn is_dont_care(&self) -> bool {
        self.class == "DontCare"
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new([self.x, self.y, self.z], [self.h, self.w, self.l], self.rotation_y)
    }
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 15 {
            return Err(Error::Parse(format!("line {lineno}: expected 15 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("line {lineno}: field {}: bad number {:?}", k + 1, fields[k])))
        };
        let occluded = fields[2]
            .parse::<i32>()
            .map_err(|_| Error::Parse(format!("line {lineno}: field 3: bad integer {:?}", fields[2])))?;
        let entry = LabelEntry {
            class: fields[0].to_string(),
            truncated: num(1)?,
            occluded,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            h: num(8)?,
            w: num(9)?,
            l: num(10)?,
            x: num(11)?,
            y: num(12)?,
            z: num(13)?,
            rotation_y: num(14)?,
            score: if fields.len() > 15 { Some(num(15)?) } else { None },
        };
        if !entry.is_dont_care() && !(entry.h > 0.0 && entry.w > 0.0 && entry.l > 0.0) {
            return Err(Error::Parse(format!("line {lineno}: {} has non-positive dimensions", entry.class)));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn serialize_labels(entries: &[LabelEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = write!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            e.class,
            e.truncated,
            e.occluded,
            e.alpha,
            e.bbox[0],
            e.bbox[1],
            e.bbox[2],
            e.bbox[3],
            e.h,
            e.w,
            e.l,
            e.x,
            e.y,
            e.z,
            e.rotation_y
        );
        if let Some(s) = e.score {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
    }
    out
}
