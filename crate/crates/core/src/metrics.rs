//! Pedestrian-detection metrics: IoU matching, miss rate against false
//! positives per image, log-average miss rate and recall.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixels. `conf` is set on detections only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf: Option<f64>,
}

impl BBox {
    pub fn gt(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h, conf: None }
    }

    pub fn det(x: f64, y: f64, w: f64, h: f64, conf: f64) -> Self {
        Self {
            x,
            y,
            w,
            h,
            conf: Some(conf),
        }
    }

    pub fn validate(&self, detection: bool) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid("bbox", format!("malformed box {self:?}")));
        }
        match (detection, self.conf) {
            (true, Some(c)) if (0.0..=1.0).contains(&c) => Ok(()),
            (true, _) => Err(Error::invalid("bbox", format!("detection needs a confidence in [0, 1]: {self:?}"))),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::invalid("bbox", "ground truth must not carry a confidence")),
        }
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let iw = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let ih = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        if iw <= 0.0 || ih <= 0.0 {
            return 0.0;
        }
        let inter = iw * ih;
        inter / (self.w * self.h + o.w * o.h - inter)
    }
}

/// Ground-truth height gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSetting {
    /// Height above 55 px.
    Reasonable,
    /// Height in 50..=75 px.
    ReasonableSmall,
    /// No height gate.
    All,
}

impl EvalSetting {
    pub fn name(self) -> &'static str {
        match self {
            EvalSetting::Reasonable => "reasonable",
            EvalSetting::ReasonableSmall => "reasonable-small",
            EvalSetting::All => "all",
        }
    }

    pub fn admits(self, height: f64) -> bool {
        match self {
            EvalSetting::Reasonable => height > 55.0,
            EvalSetting::ReasonableSmall => (50.0..=75.0).contains(&height),
            EvalSetting::All => true,
        }
    }
}

impl fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalSetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reasonable" => Ok(EvalSetting::Reasonable),
            "reasonable-small" => Ok(EvalSetting::ReasonableSmall),
            "all" => Ok(EvalSetting::All),
            _ => Err(Error::Config(format!("unknown eval setting `{s}`"))),
        }
    }
}

pub const DEFAULT_IOU: f64 = 0.5;

/// Outcome of matching one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameMatch {
    /// Confidences of true positives.
    pub tp: Vec<f64>,
    /// Confidences of false positives.
    pub fp: Vec<f64>,
    /// Counted ground truths left unmatched.
    pub fn_count: usize,
    /// Counted (non-ignored) ground truths.
    pub n_gt: usize,
}

/// Greedy matching. Detections are visited by descending confidence and take
/// the unmatched counted GT of highest IoU at or above `iou_threshold`. A
/// detection that matches nothing but overlaps an ignored GT is dropped.
pub fn match_frame(dets: &[BBox], gts: &[BBox], setting: EvalSetting, iou_threshold: f64) -> Result<FrameMatch> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid("match_frame", format!("iou threshold {iou_threshold} outside (0, 1)")));
    }
    for d in dets {
        d.validate(true)?;
    }
    for g in gts {
        g.validate(false)?;
    }
    let counted: Vec<bool> = gts.iter().map(|g| setting.admits(g.h)).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // stable: equal confidences keep input order
    order.sort_by(|&a, &b| dets[b].conf.unwrap().total_cmp(&dets[a].conf.unwrap()));

    let mut taken = vec![false; gts.len()];
    let mut out = FrameMatch {
        n_gt: counted.iter().filter(|&&c| c).count(),
        ..FrameMatch::default()
    };
    for i in order {
        let d = &dets[i];
        let conf = d.conf.unwrap();
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (j, g) in gts.iter().enumerate() {
            let iou = d.iou(g);
            if iou < iou_threshold {
                continue;
            }
            if !counted[j] {
                hits_ignored = true;
            } else if !taken[j] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                out.tp.push(conf);
            }
            None if hits_ignored => {}
            None => out.fp.push(conf),
        }
    }
    out.fn_count = out.n_gt - out.tp.len();
    Ok(out)
}

/// One point of the miss-rate curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Sweeps the confidence threshold over every distinct detection confidence,
/// from high to low. Without detections the curve is the single point `(0, 1)`.
pub fn mr_fppi_curve(matches: &[FrameMatch], n_frames: usize) -> Result<Vec<CurvePoint>> {
    if n_frames == 0 {
        return Err(Error::invalid("mr_fppi_curve", "need at least one frame"));
    }
    let n_gt: usize = matches.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Err(Error::invalid("mr_fppi_curve", "no ground truth, miss rate undefined"));
    }
    // (confidence, is_tp)
    let mut scored: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.tp.iter().map(|&c| (c, true)).chain(m.fp.iter().map(|&c| (c, false))))
        .collect();
    if scored.is_empty() {
        return Ok(vec![CurvePoint {
            fppi: 0.0,
            miss_rate: 1.0,
        }]);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(c, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if scored.get(i + 1).is_none_or(|next| next.0 != c) {
            curve.push(CurvePoint {
                fppi: fp as f64 / n_frames as f64,
                miss_rate: 1.0 - tp as f64 / n_gt as f64,
            });
        }
    }
    Ok(curve)
}

/// The nine FPPI values at which the curve is sampled.
pub fn reference_fppi() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + i as f64 / 4.0))
}

pub const MISS_RATE_FLOOR: f64 = 1e-5;

/// Log-average miss rate in percent.
pub fn lamr(curve: &[CurvePoint]) -> f64 {
    let refs = reference_fppi();
    let sum: f64 = refs
        .iter()
        .map(|&r| {
            let mut best: Option<CurvePoint> = None;
            for p in curve.iter().filter(|p| p.fppi <= r) {
                best = match best {
                    Some(b) if b.fppi > p.fppi || (b.fppi == p.fppi && b.miss_rate <= p.miss_rate) => Some(b),
                    _ => Some(*p),
                };
            }
            best.map_or(1.0, |p| p.miss_rate).max(MISS_RATE_FLOOR).ln()
        })
        .sum();
    (sum / refs.len() as f64).exp() * 100.0
}

/// Percentage of counted ground truths matched with every detection kept.
pub fn recall(matches: &[FrameMatch]) -> Result<f64> {
    let n_gt: usize = matches.iter().map(|m| m.n_gt).sum();
    if n_gt == 0 {
        return Err(Error::invalid("recall", "no ground truth"));
    }
    let tp: usize = matches.iter().map(|m| m.tp.len()).sum();
    Ok(100.0 * tp as f64 / n_gt as f64)
}

/// Boxes of one frame, one JSON object per line on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameBoxes {
    pub frame_id: String,
    pub boxes: Vec<BBox>,
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<FrameBoxes>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, frames: &[FrameBoxes]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for fr in frames {
        serde_json::to_writer(&mut f, fr)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    pub lamr: f64,
    pub recall: f64,
    pub curve: Vec<CurvePoint>,
    pub frames: usize,
    pub ground_truths: usize,
}

/// Matches every ground-truth frame against its detections and summarizes.
/// Frames absent from `dets` have no detections.
pub fn evaluate(dets: &[FrameBoxes], gts: &[FrameBoxes], setting: EvalSetting, iou_threshold: f64) -> Result<EvalReport> {
    let mut by_frame: BTreeMap<&str, &[BBox]> = BTreeMap::new();
    for d in dets {
        if by_frame.insert(&d.frame_id, &d.boxes).is_some() {
            return Err(Error::invalid("evaluate", format!("duplicate detection frame `{}`", d.frame_id)));
        }
    }
    let known: std::collections::BTreeSet<&str> = gts.iter().map(|g| g.frame_id.as_str()).collect();
    if known.len() != gts.len() {
        return Err(Error::invalid("evaluate", "duplicate ground-truth frame"));
    }
    if let Some(id) = by_frame.keys().find(|id| !known.contains(*id)) {
        return Err(Error::invalid("evaluate", format!("detections for unknown frame `{id}`")));
    }
    let matches = gts
        .iter()
        .map(|g| {
            let d = by_frame.get(g.frame_id.as_str()).copied().unwrap_or(&[]);
            match_frame(d, &g.boxes, setting, iou_threshold)
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = mr_fppi_curve(&matches, gts.len())?;
    Ok(EvalReport {
        setting,
        lamr: lamr(&curve),
        recall: recall(&matches)?,
        curve,
        frames: gts.len(),
        ground_truths: matches.iter().map(|m| m.n_gt).sum(),
    })
}
