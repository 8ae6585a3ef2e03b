//! Template matching, object detection, object channels and detection
//! metrics.
//!
//! Multi-channel sources sum each matching term over channels before
//! normalization; the correlation-coefficient method subtracts per-channel
//! means of both the template and the source patch.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::envsim::{sprite, EnvId, GroundTruth, TruthBox};
use crate::pnm::{Frame, Raster};
use crate::{Error, Result};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.95;
/// Same-type detections overlapping more than this are suppressed.
pub const NMS_IOU: f64 = 0.3;
/// Minimum IoU for a prediction to count as a true positive.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub object_type: usize,
    pub w: usize,
    pub h: usize,
    /// h×w×3 RGB.
    pub pixels: Vec<u8>,
    pub match_threshold: f64,
}

impl Template {
    pub fn from_frame(object_type: usize, frame: &Frame, match_threshold: f64) -> Result<Self> {
        let first = &frame.pixels[..3];
        if frame.pixels.chunks_exact(3).all(|p| p == first) {
            return Err(Error::Config(format!(
                "template for type {object_type} is a constant patch"
            )));
        }
        Ok(Template {
            object_type,
            w: frame.width,
            h: frame.height,
            pixels: frame.pixels.clone(),
            match_threshold,
        })
    }

    /// One template per object type of `env`, cut from the game's sprites.
    pub fn for_env(env: EnvId, cell_px: usize) -> Vec<Template> {
        (0..env.num_object_types())
            .map(|t| {
                Template::from_frame(t, &sprite(env, t, cell_px), DEFAULT_MATCH_THRESHOLD)
                    .expect("built-in sprites are non-constant")
            })
            .collect()
    }

    pub fn to_frame(&self) -> Frame {
        Frame {
            height: self.h,
            width: self.w,
            pixels: self.pixels.clone(),
        }
    }
}

impl Raster for Template {
    fn width(&self) -> usize {
        self.w
    }
    fn height(&self) -> usize {
        self.h
    }
    fn channels(&self) -> usize {
        3
    }
    fn data(&self) -> &[u8] {
        &self.pixels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchMethod {
    /// Sum of squared differences; lower is better.
    SqDiff,
    /// Cross correlation; higher is better.
    CCorr,
    /// Correlation of mean-subtracted patches; higher is better.
    CCoeff,
}

impl MatchMethod {
    pub const ALL: [MatchMethod; 3] = [MatchMethod::SqDiff, MatchMethod::CCorr, MatchMethod::CCoeff];
}

impl fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMethod::SqDiff => "sqdiff",
            MatchMethod::CCorr => "ccorr",
            MatchMethod::CCoeff => "ccoeff",
        })
    }
}

impl FromStr for MatchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqdiff" => Ok(MatchMethod::SqDiff),
            "ccorr" => Ok(MatchMethod::CCorr),
            "ccoeff" => Ok(MatchMethod::CCoeff),
            _ => Err(Error::Config(format!("unknown match method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
}

impl ScoreMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    /// Position of the highest score, first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// Score of one placement, evaluated term by term in (row, column, channel)
/// order.
fn score_at(
    src: &[u8],
    src_w: usize,
    tpl: &[u8],
    tw: usize,
    th: usize,
    ch: usize,
    tmean: &[f64],
    x: usize,
    y: usize,
    method: MatchMethod,
    normalized: bool,
) -> f64 {
    let n = (tw * th) as f64;
    let mut pmean = [0.0f64; 4];
    if method == MatchMethod::CCoeff {
        for yy in 0..th {
            let row = ((y + yy) * src_w + x) * ch;
            for xx in 0..tw {
                for c in 0..ch {
                    pmean[c] += src[row + xx * ch + c] as f64;
                }
            }
        }
        for m in pmean.iter_mut().take(ch) {
            *m /= n;
        }
    }
    let mut num = 0.0;
    let mut tn = 0.0;
    let mut pn = 0.0;
    for yy in 0..th {
        let row = ((y + yy) * src_w + x) * ch;
        for xx in 0..tw {
            for c in 0..ch {
                let i = src[row + xx * ch + c] as f64;
                let t = tpl[(yy * tw + xx) * ch + c] as f64;
                match method {
                    MatchMethod::SqDiff => {
                        let d = t - i;
                        num += d * d;
                        tn += t * t;
                        pn += i * i;
                    }
                    MatchMethod::CCorr => {
                        num += t * i;
                        tn += t * t;
                        pn += i * i;
                    }
                    MatchMethod::CCoeff => {
                        let tp = t - tmean[c];
                        let ip = i - pmean[c];
                        num += tp * ip;
                        tn += tp * tp;
                        pn += ip * ip;
                    }
                }
            }
        }
    }
    if !normalized {
        return num;
    }
    let denom = (tn * pn).sqrt();
    if denom == 0.0 {
        // no correlation evidence in a flat patch
        return match method {
            MatchMethod::SqDiff => 1.0,
            _ => 0.0,
        };
    }
    num / denom
}

fn template_means(tpl: &[u8], ch: usize) -> Vec<f64> {
    let n = (tpl.len() / ch) as f64;
    let mut m = vec![0.0; ch];
    for px in tpl.chunks_exact(ch) {
        for c in 0..ch {
            m[c] += px[c] as f64;
        }
    }
    m.iter_mut().for_each(|v| *v /= n);
    m
}

/// Slides `template` over `source` and scores every placement.
///
/// The result is `(H - h + 1) × (W - w + 1)`.
pub fn match_template<S, T>(
    source: &S,
    template: &T,
    method: MatchMethod,
    normalized: bool,
) -> Result<ScoreMap>
where
    S: Raster + ?Sized,
    T: Raster + ?Sized,
{
    let (sw, sh, ch) = (source.width(), source.height(), source.channels());
    let (tw, th) = (template.width(), template.height());
    if template.channels() != ch {
        return Err(Error::Dimension(format!(
            "source has {ch} channels, template {}",
            template.channels()
        )));
    }
    if ch == 0 || ch > 4 {
        return Err(Error::Dimension(format!("unsupported channel count {ch}")));
    }
    if tw == 0 || th == 0 || tw > sw || th > sh {
        return Err(Error::Dimension(format!(
            "template {tw}x{th} does not fit in source {sw}x{sh}"
        )));
    }
    let tmean = template_means(template.data(), ch);
    let (ow, oh) = (sw - tw + 1, sh - th + 1);
    let mut scores = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            scores.push(score_at(
                source.data(),
                sw,
                template.data(),
                tw,
                th,
                ch,
                &tmean,
                x,
                y,
                method,
                normalized,
            ));
        }
    }
    Ok(ScoreMap {
        height: oh,
        width: ow,
        scores,
    })
}

/// A located object instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub object_type: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub score: f64,
}

impl Detection {
    pub fn iou(&self, other: &Detection) -> f64 {
        iou((self.x, self.y, self.w, self.h), (other.x, other.y, other.w, other.h))
    }

    fn as_box(&self) -> (usize, usize, usize, usize) {
        (self.x, self.y, self.w, self.h)
    }
}

pub fn iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let x0 = a.0.max(b.0);
    let y0 = a.1.max(b.1);
    let x1 = (a.0 + a.2).min(b.0 + b.2);
    let y1 = (a.1 + a.3).min(b.1 + b.3);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = ((x1 - x0) * (y1 - y0)) as f64;
    let union = (a.2 * a.3 + b.2 * b.3) as f64 - inter;
    inter / union
}

/// Local maxima (8-neighbourhood, ties kept) at or above `threshold`.
pub fn peaks_from_score_map(map: &ScoreMap, template: &Template) -> Vec<Detection> {
    let t = template.match_threshold;
    let mut out = Vec::new();
    for y in 0..map.height {
        for x in 0..map.width {
            let s = map.at(x, y);
            if s < t {
                continue;
            }
            if neighbours(x, y, map.width, map.height).all(|(nx, ny)| map.at(nx, ny) <= s) {
                out.push(Detection {
                    object_type: template.object_type,
                    x,
                    y,
                    w: template.w,
                    h: template.h,
                    score: s,
                });
            }
        }
    }
    out
}

fn neighbours(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    (-1i64..=1)
        .flat_map(move |dy| (-1i64..=1).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx != 0 || dy != 0)
        .map(move |(dx, dy)| (x as i64 + dx, y as i64 + dy))
        .filter(move |&(nx, ny)| nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
        .map(|(nx, ny)| (nx as usize, ny as usize))
}

/// Greedy non-maximum suppression: highest score first (ties by y, then x),
/// dropping any box whose IoU with a kept box exceeds [`NMS_IOU`].
pub fn non_max_suppression(mut dets: Vec<Detection>) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.iou(&d) <= NMS_IOU) {
            kept.push(d);
        }
    }
    kept
}

/// Summed-area tables of per-channel sums and squared sums over an RGB frame.
struct Integral {
    w1: usize,
    sum: Vec<[u64; 3]>,
    sq: Vec<[u64; 3]>,
}

impl Integral {
    fn new(frame: &Frame) -> Self {
        let (w, h) = (frame.width, frame.height);
        let w1 = w + 1;
        let mut sum = vec![[0u64; 3]; w1 * (h + 1)];
        let mut sq = vec![[0u64; 3]; w1 * (h + 1)];
        for y in 0..h {
            let mut rs = [0u64; 3];
            let mut rq = [0u64; 3];
            for x in 0..w {
                let i = (y * w + x) * 3;
                for c in 0..3 {
                    let v = frame.pixels[i + c] as u64;
                    rs[c] += v;
                    rq[c] += v * v;
                    sum[(y + 1) * w1 + x + 1][c] = sum[y * w1 + x + 1][c] + rs[c];
                    sq[(y + 1) * w1 + x + 1][c] = sq[y * w1 + x + 1][c] + rq[c];
                }
            }
        }
        Integral { w1, sum, sq }
    }

    fn rect(table: &[[u64; 3]], w1: usize, x: usize, y: usize, w: usize, h: usize, c: usize) -> u64 {
        table[(y + h) * w1 + x + w][c] + table[y * w1 + x][c]
            - table[y * w1 + x + w][c]
            - table[(y + h) * w1 + x][c]
    }
}

/// Template statistics reused across placements by the pruned detector.
struct Prepared<'a> {
    tpl: &'a Template,
    tmean: Vec<f64>,
    /// Mean-subtracted template scaled to unit norm, interleaved RGB.
    unit: Vec<f64>,
}

impl<'a> Prepared<'a> {
    fn new(tpl: &'a Template) -> Self {
        let tmean = template_means(&tpl.pixels, 3);
        let centered: Vec<f64> = tpl
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &v)| v as f64 - tmean[i % 3])
            .collect();
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit = centered.iter().map(|v| v / norm).collect();
        Prepared { tpl, tmean, unit }
    }
}

/// Detects all template instances in `frame`.
///
/// For each template this is equivalent to computing the normalized
/// correlation-coefficient [`ScoreMap`], keeping local maxima at or above the
/// template's threshold ([`peaks_from_score_map`]) and running
/// [`non_max_suppression`]. Placements that provably score below the
/// threshold are skipped before the exact score is computed. Output is sorted
/// by type, then y, then x.
pub fn detect_objects(frame: &Frame, templates: &[Template]) -> Result<Vec<Detection>> {
    if templates.is_empty() {
        return Err(Error::Usage("detect_objects needs at least one template".into()));
    }
    let integral = Integral::new(frame);
    let mut all = Vec::new();
    for tpl in templates {
        if tpl.w > frame.width || tpl.h > frame.height {
            return Err(Error::Dimension(format!(
                "template {}x{} does not fit in frame {}x{}",
                tpl.w, tpl.h, frame.width, frame.height
            )));
        }
        if tpl.match_threshold <= 0.0 {
            // pruning relies on a positive threshold
            let map = match_template(frame, tpl, MatchMethod::CCoeff, true)?;
            all.extend(non_max_suppression(peaks_from_score_map(&map, tpl)));
            continue;
        }
        all.extend(non_max_suppression(detect_pruned(frame, &integral, &Prepared::new(tpl))));
    }
    all.sort_by(|a, b| {
        a.object_type
            .cmp(&b.object_type)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    Ok(all)
}

fn detect_pruned(frame: &Frame, integral: &Integral, prep: &Prepared) -> Vec<Detection> {
    let tpl = prep.tpl;
    let (tw, th) = (tpl.w, tpl.h);
    let (ow, oh) = (frame.width - tw + 1, frame.height - th + 1);
    let n = (tw * th) as u64;
    let nf = n as f64;
    let t = tpl.match_threshold;
    // ncc >= t  <=>  |u - v|^2 <= 2 (1 - t) for unit vectors u, v
    let budget = 2.0 * (1.0 - t) + 1e-9;
    let mut survivors: Vec<(usize, usize, f64)> = Vec::new();
    let mut score_of = std::collections::HashMap::new();
    for y in 0..oh {
        for x in 0..ow {
            let mut mean = [0.0f64; 3];
            let mut var_n = 0u64; // n * sum of squared deviations, exact
            for c in 0..3 {
                let s = Integral::rect(&integral.sum, integral.w1, x, y, tw, th, c);
                let q = Integral::rect(&integral.sq, integral.w1, x, y, tw, th, c);
                var_n += n * q - s * s;
                mean[c] = s as f64 / nf;
            }
            if var_n == 0 {
                continue; // flat patch scores 0 < t
            }
            let inv_norm = 1.0 / (var_n as f64 / nf).sqrt();
            let mut resid = 0.0;
            let mut pruned = false;
            for yy in 0..th {
                let row = ((y + yy) * frame.width + x) * 3;
                let trow = yy * tw * 3;
                for k in 0..tw * 3 {
                    let u = (frame.pixels[row + k] as f64 - mean[k % 3]) * inv_norm;
                    let d = u - prep.unit[trow + k];
                    resid += d * d;
                }
                if resid > budget {
                    pruned = true;
                    break;
                }
            }
            if pruned {
                continue;
            }
            let s = score_at(
                &frame.pixels,
                frame.width,
                &tpl.pixels,
                tw,
                th,
                3,
                &prep.tmean,
                x,
                y,
                MatchMethod::CCoeff,
                true,
            );
            if s >= t {
                survivors.push((x, y, s));
                score_of.insert((x, y), s);
            }
        }
    }
    survivors
        .into_iter()
        .filter(|&(x, y, s)| {
            neighbours(x, y, ow, oh).all(|p| score_of.get(&p).is_none_or(|&ns| ns <= s))
        })
        .map(|(x, y, score)| Detection {
            object_type: tpl.object_type,
            x,
            y,
            w: tw,
            h: th,
            score,
        })
        .collect()
}

/// k binary planes over an H×W frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectChannels {
    pub k: usize,
    pub height: usize,
    pub width: usize,
    /// k×H×W values in {0, 1}.
    pub planes: Vec<u8>,
}

impl ObjectChannels {
    pub fn zeros(k: usize, height: usize, width: usize) -> Self {
        ObjectChannels {
            k,
            height,
            width,
            planes: vec![0; k * height * width],
        }
    }

    pub fn plane(&self, j: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.planes[j * n..(j + 1) * n]
    }

    pub fn plane_sum(&self, j: usize) -> usize {
        self.plane(j).iter().map(|&v| v as usize).sum()
    }
}

/// Paints each detection's box into its type's plane.
pub fn build_object_channels(
    height: usize,
    width: usize,
    detections: &[Detection],
    k: usize,
) -> Result<ObjectChannels> {
    let mut ch = ObjectChannels::zeros(k, height, width);
    for d in detections {
        if d.object_type >= k {
            return Err(Error::Range(format!(
                "detection type {} with only {k} object channels",
                d.object_type
            )));
        }
        if d.x + d.w > width || d.y + d.h > height {
            return Err(Error::Dimension(format!(
                "detection box ({}, {}, {}, {}) leaves the {width}x{height} frame",
                d.x, d.y, d.w, d.h
            )));
        }
        let base = d.object_type * height * width;
        for y in d.y..d.y + d.h {
            ch.planes[base + y * width + d.x..base + y * width + d.x + d.w].fill(1);
        }
    }
    Ok(ch)
}

/// Treats ground-truth boxes as perfect detections (score 1).
pub fn truth_as_detections(truth: &GroundTruth) -> Vec<Detection> {
    truth
        .boxes
        .iter()
        .map(|b| Detection {
            object_type: b.object_type,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            score: 1.0,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionMetrics {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn merge(&self, other: &DetectionMetrics) -> Self {
        DetectionMetrics::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Per-prediction match outcome: `Some(truth index)` for true positives.
fn greedy_match(pred: &[Detection], truth: &[TruthBox]) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[b].score.total_cmp(&pred[a].score).then(a.cmp(&b)));
    let mut used = vec![false; truth.len()];
    let mut out = vec![None; pred.len()];
    for i in order {
        let p = &pred[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truth.iter().enumerate() {
            if used[j] || t.object_type != p.object_type {
                continue;
            }
            let o = iou(p.as_box(), (t.x, t.y, t.w, t.h));
            if o >= MATCH_IOU && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            out[i] = Some(j);
        }
    }
    out
}

/// Pooled precision / recall / F1 of `pred` against `truth`.
pub fn evaluate_detections(pred: &[Detection], truth: &GroundTruth) -> DetectionMetrics {
    let matches = greedy_match(pred, &truth.boxes);
    let tp = matches.iter().filter(|m| m.is_some()).count();
    DetectionMetrics::from_counts(tp, pred.len() - tp, truth.boxes.len() - tp)
}

/// Same matching as [`evaluate_detections`], tallied per object type.
pub fn evaluate_by_type(pred: &[Detection], truth: &GroundTruth, k: usize) -> Vec<DetectionMetrics> {
    let matches = greedy_match(pred, &truth.boxes);
    let mut tp = vec![0; k];
    let mut fp = vec![0; k];
    let mut fn_ = vec![0; k];
    let mut truth_hit = vec![false; truth.boxes.len()];
    for (p, m) in pred.iter().zip(&matches) {
        if p.object_type >= k {
            continue;
        }
        match m {
            Some(j) => {
                tp[p.object_type] += 1;
                truth_hit[*j] = true;
            }
            None => fp[p.object_type] += 1,
        }
    }
    for (b, hit) in truth.boxes.iter().zip(truth_hit) {
        if !hit && b.object_type < k {
            fn_[b.object_type] += 1;
        }
    }
    (0..k)
        .map(|j| DetectionMetrics::from_counts(tp[j], fp[j], fn_[j]))
        .collect()
}

/// Reads a `type_id filename threshold` manifest; filenames are relative to
/// the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected `type_id filename threshold`",
                path.display(),
                n + 1
            )));
        }
        let bad = |what: &str| Error::Format(format!("{}:{}: bad {what}", path.display(), n + 1));
        let ty: usize = parts[0].parse().map_err(|_| bad("type_id"))?;
        let thr: f64 = parts[2].parse().map_err(|_| bad("threshold"))?;
        let frame = Frame::read_ppm(dir.join(parts[1]))?;
        out.push(Template::from_frame(ty, &frame, thr)?);
    }
    Ok(out)
}

/// Writes `template_<type>.ppm` files and `manifest.txt` into `dir`.
pub fn write_manifest(dir: impl AsRef<Path>, templates: &[Template]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for t in templates {
        let name = format!("template_{}.ppm", t.object_type);
        t.to_frame().write_ppm(dir.join(&name))?;
        manifest.push_str(&format!("{} {} {}\n", t.object_type, name, t.match_threshold));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// CSV `frame_id,type,x,y,score` with a header row.
pub fn write_detections_csv<W: Write>(mut out: W, rows: &[(String, Detection)]) -> std::io::Result<()> {
    writeln!(out, "frame_id,type,x,y,score")?;
    for (id, d) in rows {
        writeln!(out, "{},{},{},{},{}", id, d.object_type, d.x, d.y, d.score)?;
    }
    Ok(())
}
