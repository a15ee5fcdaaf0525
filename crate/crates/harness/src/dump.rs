//! Detection dumps as JSON Lines, one object per image.
//!
//! ```text
//! {"image_id":"test-0-00000","u_ood":0.0123,"detections":[{"cx":0.5,"cy":0.5,"w":0.2,"h":0.2,
//!   "confidence":0.9,"class_id":1,"class_probs":[0.1,0.8,0.05],"u_pred":0.1}]}
//! ```
//!
//! Numbers are written in the shortest decimal form that parses back to the
//! identical `f64`, so a load of a dump reproduces every value exactly.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use bea_core::detector::ImageResult;
use bea_core::geometry::{BBox, Detection};
use bea_core::metrics::{u_pred, ImagePredictions};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub confidence: f64,
    pub class_id: usize,
    pub class_probs: Vec<f64>,
    pub u_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub u_ood: f64,
    pub detections: Vec<DetectionRecord>,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
            confidence: d.confidence,
            class_id: d.class_id,
            class_probs: d.class_probs.clone(),
            u_pred: u_pred(d.confidence),
        }
    }
}

impl DetectionRecord {
    pub fn to_detection(&self) -> Detection {
        Detection {
            bbox: BBox::new(self.cx, self.cy, self.w, self.h),
            confidence: self.confidence,
            class_probs: self.class_probs.clone(),
            class_id: self.class_id,
        }
    }
}

impl From<&ImageResult> for ImageRecord {
    fn from(r: &ImageResult) -> Self {
        Self {
            image_id: r.image_id.clone(),
            u_ood: r.u_ood,
            detections: r.detections.iter().map(DetectionRecord::from).collect(),
        }
    }
}

impl ImageRecord {
    pub fn predictions(&self) -> ImagePredictions {
        ImagePredictions {
            image_id: self.image_id.clone(),
            detections: self
                .detections
                .iter()
                .map(DetectionRecord::to_detection)
                .collect(),
        }
    }
}

pub fn write_detections<W: Write>(mut w: W, records: &[ImageRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err("<writer>"))?;
    }
    Ok(())
}

pub fn dump_detections(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_detections(&mut w, records)?;
    w.flush().map_err(io_err(path))
}

/// Parses a dump; blank lines are skipped and errors carry the 1-based line.
pub fn read_detections<R: BufRead>(r: R, origin: &Path) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(origin))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<ImageRecord>> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_detections(BufReader::new(f), path)
}
