//! Pixel and object saliency for a chosen action.
//!
//! Pixel saliency is the input gradient of `Q(s, a)`, reduced to one value
//! per pixel by the largest absolute gradient over the newest frame's RGB
//! planes. Object saliency is `Q(s, a) - Q(s_o, a)`, where `s_o` paints the
//! object's box with the background color in every history frame and drops
//! the object from the object channels.

use std::fmt;
use std::io::Write;

use crate::agents::{assemble_state, StateTensor, HISTORY};
use crate::pnm::{Frame, GrayImage};
use crate::tensornet::{QNet, Tensor};
use crate::vision::Detection;
use crate::{Error, Result};

/// |w| at or below this is neutral.
pub const TAU: f64 = 1e-6;

pub const GOOD_COLOR: [u8; 3] = [0, 220, 0];
pub const BAD_COLOR: [u8; 3] = [230, 0, 0];

/// Raw material for both saliency kinds: history frames plus the newest
/// frame's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainState {
    /// Oldest first.
    pub frames: Vec<Frame>,
    pub detections: Vec<Detection>,
    pub object_sensitive: bool,
    /// Number of object types.
    pub k: usize,
}

impl ExplainState {
    pub fn new(frames: Vec<Frame>, detections: Vec<Detection>, object_sensitive: bool, k: usize) -> Result<Self> {
        let s = ExplainState {
            frames,
            detections,
            object_sensitive,
            k,
        };
        s.tensor()?;
        Ok(s)
    }

    pub fn newest(&self) -> &Frame {
        &self.frames[self.frames.len() - 1]
    }

    pub fn tensor(&self) -> Result<StateTensor> {
        let refs: Vec<&Frame> = self.frames.iter().collect();
        assemble_state(&refs, &self.detections, self.object_sensitive, self.k)
    }

    /// The state with detection `index` masked out.
    pub fn without(&self, index: usize, background: [u8; 3]) -> Result<ExplainState> {
        let det = self
            .detections
            .get(index)
            .ok_or_else(|| Error::Range(format!("no detection {index}")))?;
        let frames = mask_object(&self.frames, det, background)?;
        let mut detections = self.detections.clone();
        detections.remove(index);
        Ok(ExplainState {
            frames,
            detections,
            object_sensitive: self.object_sensitive,
            k: self.k,
        })
    }
}

/// Paints the detection's box with `background` in every frame.
pub fn mask_object(frames: &[Frame], det: &Detection, background: [u8; 3]) -> Result<Vec<Frame>> {
    if frames.len() != HISTORY {
        return Err(Error::Dimension(format!("expected {HISTORY} frames, got {}", frames.len())));
    }
    let mut out = frames.to_vec();
    for f in &mut out {
        if det.x + det.w > f.width || det.y + det.h > f.height {
            return Err(Error::Dimension(format!(
                "box ({}, {}, {}, {}) leaves the {}x{} frame",
                det.x, det.y, det.w, det.h, f.width, f.height
            )));
        }
        f.fill_rect(det.x, det.y, det.w, det.h, background);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelSaliencyMap {
    pub height: usize,
    pub width: usize,
    pub action: usize,
    pub values: Vec<f64>,
}

impl PixelSaliencyMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Min-max scaled to 0..=255; a constant map becomes all zeros.
    pub fn to_image(&self) -> GrayImage {
        let lo = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels = self
            .values
            .iter()
            .map(|&v| {
                if hi > lo {
                    (255.0 * (v - lo) / (hi - lo)).round() as u8
                } else {
                    0
                }
            })
            .collect();
        GrayImage {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

fn check_action(net: &QNet, action: usize) -> Result<()> {
    if action >= net.num_actions() {
        return Err(Error::Range(format!(
            "action {action} outside the {}-action set",
            net.num_actions()
        )));
    }
    Ok(())
}

/// Full input gradient of `Q(s, action)`, `[1, C, H, W]`.
pub fn input_gradient(net: &QNet, state: &StateTensor, action: usize) -> Result<Tensor> {
    check_action(net, action)?;
    let (q, cache) = net.forward(&state.to_tensor())?;
    let mut g = Tensor::zeros(&q.shape);
    g.data[action] = 1.0;
    Ok(net.backward(&cache, &g)?.input.expect("input gradient requested"))
}

pub fn pixel_saliency(net: &QNet, state: &StateTensor, action: usize) -> Result<PixelSaliencyMap> {
    let grad = input_gradient(net, state, action)?;
    let n = state.height * state.width;
    let newest = 3 * (HISTORY - 1);
    let mut values = vec![0.0f64; n];
    for c in newest..newest + 3 {
        for (v, g) in values.iter_mut().zip(&grad.data[c * n..(c + 1) * n]) {
            *v = v.max(g.abs());
        }
    }
    Ok(PixelSaliencyMap {
        height: state.height,
        width: state.width,
        action,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Good,
    Bad,
    Neutral,
}

impl Label {
    pub fn of(w: f64) -> Label {
        if w > TAU {
            Label::Good
        } else if w < -TAU {
            Label::Bad
        } else {
            Label::Neutral
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Good => "good",
            Label::Bad => "bad",
            Label::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSaliencyMap {
    pub action: usize,
    /// `Q(s, action)` of the unmasked state.
    pub base_q: f64,
    /// One `(detection, w)` per input detection, in input order.
    pub entries: Vec<(Detection, f64)>,
}

impl ObjectSaliencyMap {
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|e| e.1.abs()).fold(0.0, f64::max)
    }

    /// Copy of `frame` with each object box tinted toward the good or bad
    /// color, with strength |w| / max|w|. Pixels outside boxes are untouched.
    pub fn overlay(&self, frame: &Frame) -> Frame {
        let mut out = frame.clone();
        let max = self.max_abs();
        if max == 0.0 {
            return out;
        }
        for (d, w) in &self.entries {
            let color = match Label::of(*w) {
                Label::Good => GOOD_COLOR,
                Label::Bad => BAD_COLOR,
                Label::Neutral => continue,
            };
            let alpha = w.abs() / max;
            for y in d.y..(d.y + d.h).min(frame.height) {
                for x in d.x..(d.x + d.w).min(frame.width) {
                    let p = frame.get(x, y);
                    let mut q = [0u8; 3];
                    for c in 0..3 {
                        q[c] = ((1.0 - alpha) * p[c] as f64 + alpha * color[c] as f64).round() as u8;
                    }
                    out.set(x, y, q);
                }
            }
        }
        out
    }

    /// `type,x,y,w,label` rows; `type_names` maps type ids to names.
    pub fn write_csv<W: Write>(&self, mut out: W, type_names: &[&str]) -> std::io::Result<()> {
        writeln!(out, "type,x,y,w,label")?;
        for (d, w) in &self.entries {
            let name = type_names
                .get(d.object_type)
                .map(|s| s.to_string())
                .unwrap_or_else(|| d.object_type.to_string());
            writeln!(out, "{name},{},{},{w},{}", d.x, d.y, Label::of(*w))?;
        }
        Ok(())
    }
}

fn q_of(net: &QNet, state: &ExplainState, action: usize) -> Result<f64> {
    Ok(net.predict(&state.tensor()?.to_tensor())?.data[action])
}

/// `w_O = Q(s, action) - Q(s_O, action)` for every detection of `state`,
/// using one forward pass for `s` and one per object.
pub fn object_saliency(
    net: &QNet,
    state: &ExplainState,
    action: usize,
    background: [u8; 3],
) -> Result<ObjectSaliencyMap> {
    check_action(net, action)?;
    let base_q = q_of(net, state, action)?;
    let mut entries = Vec::with_capacity(state.detections.len());
    for (i, d) in state.detections.iter().enumerate() {
        let masked = state.without(i, background)?;
        entries.push((*d, base_q - q_of(net, &masked, action)?));
    }
    Ok(ObjectSaliencyMap {
        action,
        base_q,
        entries,
    })
}

pub fn classify_objects(map: &ObjectSaliencyMap) -> Vec<(Detection, Label)> {
    map.entries.iter().map(|(d, w)| (*d, Label::of(*w))).collect()
}
