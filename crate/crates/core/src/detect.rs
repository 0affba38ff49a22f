//! Anchor-free DFL box decode, class-aware NMS and the detection JSON schema.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::LetterboxTransform;
use crate::tensor::Tensor;

/// VisDrone class table.
pub const VISDRONE_LABELS: [&str; 10] = [
    "pedestrian",
    "people",
    "bicycle",
    "car",
    "van",
    "truck",
    "tricycle",
    "awning-tricycle",
    "bus",
    "motor",
];

pub fn label(class_id: usize) -> String {
    VISDRONE_LABELS
        .get(class_id)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{class_id}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub reg_max: usize,
    pub strides: Vec<usize>,
    pub conf_thresh: f32,
    pub iou_thresh: f32,
    pub classes: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            reg_max: 16,
            strides: vec![4, 8, 16, 32],
            conf_thresh: 0.25,
            iou_thresh: 0.45,
            classes: 10,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg_max == 0 || self.classes == 0 {
            return Err(Error::Config("reg_max and classes must be positive".into()));
        }
        if self.strides.is_empty() || self.strides[0] == 0 || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("strides must be positive and ascending, got {:?}", self.strides)));
        }
        for (name, v) in [("conf", self.conf_thresh), ("iou", self.iou_thresh)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} threshold must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        4 * self.reg_max + self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub class_id: usize,
    pub score: f32,
}

impl Detection {
    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

/// Softmax expectation over the bins, in cell units.
pub fn dfl_expectation(logits: &[f32]) -> f32 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let (mut num, mut den) = (0.0f32, 0.0f32);
    for (i, &l) in logits.iter().enumerate() {
        let e = (l - m).exp();
        num += i as f32 * e;
        den += e;
    }
    num / den
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Candidate boxes in network-input pixels: the best class per cell, kept when its score
/// exceeds `conf_thresh`. Box channels are laid out side-major (l, t, r, b), then classes.
pub fn decode(taps: &[(usize, &Tensor<f32>)], cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let rm = cfg.reg_max;
    let mut out = Vec::new();
    let mut bins = vec![0.0f32; rm];
    for &(stride, t) in taps {
        let [n, c, h, w] = t.dims();
        if c != cfg.channels() {
            return Err(Error::Shape(format!(
                "head tap at stride {stride} has {c} channels, expected 4*{rm}+{} = {}",
                cfg.classes,
                cfg.channels()
            )));
        }
        if n != 1 {
            return Err(Error::Shape(format!("decode takes one image at a time, got batch {n}")));
        }
        let s = stride as f32;
        for y in 0..h {
            for x in 0..w {
                let (mut best, mut best_logit) = (0, f32::NEG_INFINITY);
                for k in 0..cfg.classes {
                    let l = t.get(0, 4 * rm + k, y, x);
                    if l > best_logit {
                        best = k;
                        best_logit = l;
                    }
                }
                let score = sigmoid(best_logit);
                if !(score > cfg.conf_thresh) {
                    continue;
                }
                let mut d = [0.0f32; 4];
                for (side, dv) in d.iter_mut().enumerate() {
                    for (b, v) in bins.iter_mut().enumerate() {
                        *v = t.get(0, side * rm + b, y, x);
                    }
                    *dv = dfl_expectation(&bins);
                }
                let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
                out.push(Detection {
                    x1: cx - d[0] * s,
                    y1: cy - d[1] * s,
                    x2: cx + d[2] * s,
                    y2: cy + d[3] * s,
                    class_id: best,
                    score,
                });
            }
        }
    }
    Ok(out)
}

pub fn iou(a: &Detection, b: &Detection) -> f32 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Score descending, then class ascending, then x1 ascending. Remaining ties fall back to the
/// other coordinates so the order is total.
pub fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Greedy class-aware suppression: a box survives unless a higher-ranked kept box of the
/// same class overlaps it by more than `iou_thresh`.
pub fn nms(candidates: &[Detection], iou_thresh: f32) -> Vec<Detection> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank);
    let mut kept_by_class: std::collections::HashMap<usize, Vec<Detection>> = Default::default();
    let mut out = Vec::new();
    for d in sorted {
        let kept = kept_by_class.entry(d.class_id).or_default();
        if kept.iter().all(|k| iou(k, &d) <= iou_thresh) {
            kept.push(d);
            out.push(d);
        }
    }
    out
}

/// Maps boxes from network input back to source pixels and clamps them to the image.
/// Boxes left with no area are dropped.
pub fn unletterbox(dets: &[Detection], t: &LetterboxTransform) -> Vec<Detection> {
    let (w, h) = (t.src_w as f64, t.src_h as f64);
    dets.iter()
        .filter_map(|d| {
            let (x1, y1) = t.inverse_point(d.x1 as f64, d.y1 as f64);
            let (x2, y2) = t.inverse_point(d.x2 as f64, d.y2 as f64);
            let b = Detection {
                x1: x1.clamp(0.0, w) as f32,
                y1: y1.clamp(0.0, h) as f32,
                x2: x2.clamp(0.0, w) as f32,
                y2: y2.clamp(0.0, h) as f32,
                ..*d
            };
            (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
        })
        .collect()
}

/// Clamps boxes to `[0,w]x[0,h]` in place.
pub fn clamp_boxes(dets: &mut [Detection], w: f32, h: f32) {
    for d in dets {
        d.x1 = d.x1.clamp(0.0, w);
        d.x2 = d.x2.clamp(0.0, w);
        d.y1 = d.y1.clamp(0.0, h);
        d.y2 = d.y2.clamp(0.0, h);
    }
}

/// One detection as a JSON line with fixed key order and four decimals.
pub fn to_json_line(image: &str, d: &Detection) -> String {
    let mut s = String::with_capacity(128);
    let name = serde_json::to_string(image).expect("string serializes");
    let lbl = serde_json::to_string(&label(d.class_id)).expect("string serializes");
    let _ = write!(
        s,
        "{{\"image\":{name},\"class\":{},\"label\":{lbl},\"score\":{:.4},\"box\":[{:.4},{:.4},{:.4},{:.4}]}}",
        d.class_id, d.score, d.x1, d.y1, d.x2, d.y2
    );
    s
}
