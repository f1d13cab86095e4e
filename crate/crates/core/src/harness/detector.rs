//! Toy two-stream detector: per-modality strided backbone, a pluggable fuser
//! at every stage, and a single-anchor pointwise detection head.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, ParamStore};
use crate::config::{FusionConfig, SsmConfig, Stage};
use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::mhhpa::{init_stage, last_token, mhhpa_forward, patch, StagePlan};
use crate::ssm::init_linear;
use crate::tensor::Tensor;

/// How the two backbone streams are combined at each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fuser {
    /// RGB stream only.
    NoneRgb,
    /// Thermal stream only.
    NoneThermal,
    /// Elementwise sum fed to both streams.
    FeatureAdd,
    /// MHHPA with temporal carry.
    Mambast,
}

impl Fuser {
    pub const ALL: [Fuser; 4] = [Fuser::NoneRgb, Fuser::NoneThermal, Fuser::FeatureAdd, Fuser::Mambast];

    pub fn name(self) -> &'static str {
        match self {
            Fuser::NoneRgb => "none-rgb",
            Fuser::NoneThermal => "none-thermal",
            Fuser::FeatureAdd => "feature-add",
            Fuser::Mambast => "mambast",
        }
    }
}

impl fmt::Display for Fuser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Fuser {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Fuser::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fuser `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Channel multiplication factor; stages carry 4D, 8D and 16D channels.
    pub d: usize,
    /// Patch sizes on F1 are `1, 2, 4, ...` up to this many heads.
    pub heads_f1: usize,
    /// Mamba layers per head.
    pub layers: usize,
    pub ssm: SsmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 2,
            heads_f1: 2,
            layers: 1,
            ssm: SsmConfig {
                state_size: 4,
                expand: 2,
                conv_kernel: 2,
                ..SsmConfig::default()
            },
        }
    }
}

pub const RGB_CHANNELS: usize = 3;
pub const THERMAL_CHANNELS: usize = 1;

/// Architecture of the whole detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image: usize,
    pub fuser: Fuser,
    pub model: ModelConfig,
}

impl DetectorConfig {
    pub fn fusion(&self) -> FusionConfig {
        let mut f = FusionConfig::pyramid(self.image, self.model.d, self.model.heads_f1, self.model.layers);
        f.ssm = self.model.ssm.clone();
        f
    }

    pub fn validate(&self) -> Result<()> {
        if self.image < 32 || !self.image.is_multiple_of(32) || self.model.d == 0 {
            return Err(Error::Config("image must be a multiple of 32 and d positive".into()));
        }
        self.fusion().validate()
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Anchor `(w, h)` of each stage.
    pub fn anchor(stage: Stage) -> (f64, f64) {
        let a = 1.5 * stage.stride() as f64;
        (0.5 * a, a)
    }
}

/// Geometry of one prediction map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub stage: Stage,
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

pub const PRED_DIM: usize = 5;

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    plans: Vec<StagePlan>,
    grids: Vec<Grid>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let fusion = cfg.fusion();
        let plans = match cfg.fuser {
            Fuser::Mambast => fusion
                .stages
                .iter()
                .map(|s| StagePlan::new(s.clone()))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let grids = fusion
            .stages
            .iter()
            .map(|s| Grid {
                stage: s.stage,
                rows: s.height,
                cols: s.width,
            })
            .collect();
        Ok(Self { cfg, plans, grids })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }

    pub fn fuser(&self) -> Fuser {
        self.cfg.fuser
    }

    /// Fresh parameters. Fusion parameters exist only for the MHHPA fuser.
    pub fn init_params(&self, rng: &mut impl Rng) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        let fusion = self.cfg.fusion();
        for m in ["rgb", "thermal"] {
            let mut fan_in = 64 * if m == "rgb" { RGB_CHANNELS } else { THERMAL_CHANNELS };
            for s in &fusion.stages {
                init_linear(&mut store, &format!("bb.{m}.{}", s.stage.key()), fan_in, s.channels, true, rng);
                fan_in = 4 * s.channels;
            }
        }
        for s in &fusion.stages {
            init_linear(&mut store, &format!("head.{}", s.stage.key()), s.channels, PRED_DIM, true, rng);
        }
        if self.cfg.fuser == Fuser::Mambast {
            for s in &fusion.stages {
                init_stage(&mut store, s, &fusion.ssm, rng)?;
            }
        }
        Ok(store)
    }

    /// Zero carries of the right shapes, one set per stage.
    pub fn zero_carries<B: Backend>(&self, b: &mut B) -> Vec<Vec<B::Value>> {
        self.plans
            .iter()
            .map(|p| {
                (0..p.config().heads())
                    .map(|_| b.constant(Tensor::zeros(vec![1, p.config().head_dim()])))
                    .collect()
            })
            .collect()
    }

    /// Combines one stage's streams. Returns the fused pair and, for MHHPA,
    /// the outgoing carry tokens.
    pub fn fuse_stage<B: Backend>(
        &self,
        b: &mut B,
        stage: usize,
        rgb: &B::Value,
        thermal: &B::Value,
        carry: Option<&[B::Value]>,
    ) -> Result<(B::Value, B::Value, Vec<B::Value>)> {
        if b.shape(rgb) != b.shape(thermal) {
            return Err(Error::shape("fuse_stage", b.shape(rgb), b.shape(thermal)));
        }
        match self.cfg.fuser {
            Fuser::NoneRgb => Ok((rgb.clone(), rgb.clone(), Vec::new())),
            Fuser::NoneThermal => Ok((thermal.clone(), thermal.clone(), Vec::new())),
            Fuser::FeatureAdd => {
                let (r, t) = feature_add_fuse(b, rgb, thermal)?;
                Ok((r, t, Vec::new()))
            }
            Fuser::Mambast => {
                let out = mhhpa_forward(b, &self.plans[stage], rgb, thermal, carry)?;
                let next = out
                    .head_outputs
                    .iter()
                    .map(|h| last_token(b, h))
                    .collect::<Result<Vec<_>>>()?;
                Ok((out.rgb, out.thermal, next))
            }
        }
    }

    /// One frame through backbone, fusers and head. Returns `[cells, 5]`
    /// predictions per stage and the next carries.
    pub fn forward_frame<B: Backend>(
        &self,
        b: &mut B,
        rgb: &Tensor<f32>,
        thermal: &Tensor<f32>,
        carries: &[Vec<B::Value>],
    ) -> Result<(Vec<B::Value>, Vec<Vec<B::Value>>)> {
        let n = self.cfg.image;
        if rgb.shape() != [n, n, RGB_CHANNELS] || thermal.shape() != [n, n, THERMAL_CHANNELS] {
            return Err(Error::shape("forward_frame", rgb.shape(), thermal.shape()));
        }
        let mut r = b.constant(rgb.cast());
        let mut t = b.constant(thermal.cast());
        let mut preds = Vec::with_capacity(self.grids.len());
        let mut next = Vec::with_capacity(self.plans.len());
        for (i, g) in self.grids.iter().enumerate() {
            let key = g.stage.key();
            let s = if i == 0 { 8 } else { 2 };
            let pr = patch(b, &r, s)?;
            let pt = patch(b, &t, s)?;
            let fr = b.linear_named(&pr, &format!("bb.rgb.{key}"), true)?;
            let fr = b.silu(&fr)?;
            let ft = b.linear_named(&pt, &format!("bb.thermal.{key}"), true)?;
            let ft = b.silu(&ft)?;
            let carry = carries.get(i).map(|c| c.as_slice());
            let (fr, ft, c) = self.fuse_stage(b, i, &fr, &ft, carry)?;
            if self.cfg.fuser == Fuser::Mambast {
                next.push(c);
            }
            let mixed = b.add(&fr, &ft)?;
            let mixed = b.scale(&mixed, 0.5)?;
            let p = b.linear_named(&mixed, &format!("head.{key}"), true)?;
            preds.push(b.reshape(&p, &[g.cells(), PRED_DIM])?);
            r = fr;
            t = ft;
        }
        Ok((preds, next))
    }
}

/// Sum of the two maps, handed to both streams.
pub fn feature_add_fuse<B: Backend>(b: &mut B, rgb: &B::Value, thermal: &B::Value) -> Result<(B::Value, B::Value)> {
    if b.shape(rgb) != b.shape(thermal) {
        return Err(Error::shape("feature_add", b.shape(rgb), b.shape(thermal)));
    }
    let s = b.add(rgb, thermal)?;
    Ok((s.clone(), s))
}

/// Training targets of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTargets {
    pub objectness: Vec<f32>,
    pub positives: Vec<usize>,
    /// `(tx, ty, tw, th)` per positive cell.
    pub boxes: Vec<[f32; 4]>,
}

/// Each box goes to the stage whose anchor height is closest in log scale and
/// to the cell holding its center; the larger box wins a contested cell.
pub fn assign_targets(grids: &[Grid], boxes: &[BBox]) -> Vec<StageTargets> {
    let mut out: Vec<StageTargets> = grids
        .iter()
        .map(|g| StageTargets {
            objectness: vec![0.0; g.cells()],
            positives: Vec::new(),
            boxes: Vec::new(),
        })
        .collect();
    let mut order: Vec<&BBox> = boxes.iter().collect();
    order.sort_by(|a, b| (b.w * b.h).total_cmp(&(a.w * a.h)));
    for bx in order {
        let k = (0..grids.len())
            .min_by(|&i, &j| {
                let d = |s: usize| (bx.h / DetectorConfig::anchor(grids[s].stage).1).ln().abs();
                d(i).total_cmp(&d(j))
            })
            .expect("at least one stage");
        let g = grids[k];
        let stride = g.stage.stride() as f64;
        let (cx, cy) = (bx.x + bx.w / 2.0, bx.y + bx.h / 2.0);
        let (col, row) = ((cx / stride) as usize, (cy / stride) as usize);
        if col >= g.cols || row >= g.rows {
            continue;
        }
        let cell = row * g.cols + col;
        let t = &mut out[k];
        if t.objectness[cell] > 0.0 {
            continue;
        }
        t.objectness[cell] = 1.0;
        t.positives.push(cell);
        let (aw, ah) = DetectorConfig::anchor(g.stage);
        t.boxes.push([
            (cx / stride - col as f64) as f32,
            (cy / stride - row as f64) as f32,
            (bx.w / aw).ln() as f32,
            (bx.h / ah).ln() as f32,
        ]);
    }
    out
}

/// Loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub positive: f64,
    pub boxes: f64,
}

/// Objectness BCE over every cell plus smooth-L1 on positive cells, summed
/// over stages. Objectness is averaged over all cells, boxes over all positives.
pub fn frame_loss<B: Backend>(
    b: &mut B,
    grids: &[Grid],
    preds: &[B::Value],
    targets: &[StageTargets],
    w: LossWeights,
) -> Result<B::Value> {
    let cells: usize = grids.iter().map(|g| g.cells()).sum();
    let positives: usize = targets.iter().map(|t| t.positives.len()).sum();
    let mut terms = Vec::new();
    for ((g, p), t) in grids.iter().zip(preds).zip(targets) {
        let n = g.cells();
        let logit = b.slice(p, 1, 0, 1)?;
        let y = b.constant(Tensor::new(vec![n, 1], t.objectness.clone())?.cast());
        let weight: Vec<f32> = t
            .objectness
            .iter()
            .map(|&o| if o > 0.0 { w.positive as f32 } else { 1.0 })
            .collect();
        let weight = b.constant(Tensor::new(vec![n, 1], weight)?.cast());
        let sp = b.softplus(&logit)?;
        let yx = b.mul(&y, &logit)?;
        let bce = b.sub(&sp, &yx)?;
        let bce = b.mul(&bce, &weight)?;
        let bce = b.sum(&bce)?;
        terms.push(b.scale(&bce, 1.0 / cells as f64)?);

        if !t.positives.is_empty() {
            let rows = b.gather(p, Arc::from(t.positives.as_slice()))?;
            let xy = b.slice(&rows, 1, 1, 2)?;
            let xy = b.sigmoid(&xy)?;
            let wh = b.slice(&rows, 1, 3, 2)?;
            let pred = b.concat(&[&xy, &wh], 1)?;
            let flat: Vec<f32> = t.boxes.iter().flatten().copied().collect();
            let target = b.constant(Tensor::new(vec![t.positives.len(), 4], flat)?.cast());
            let l = b.smooth_l1(&pred, &target, 1.0 / 9.0)?;
            let l = b.sum(&l)?;
            terms.push(b.scale(&l, w.boxes / positives as f64)?);
        }
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = b.add(&total, t)?;
    }
    Ok(total)
}

fn sigmoid(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}

/// Boxes from raw predictions: sigmoid objectness above `conf_floor`, then
/// greedy non-maximum suppression at `nms_iou`.
pub fn decode(grids: &[Grid], preds: &[Tensor<f32>], conf_floor: f64, nms_iou: f64) -> Vec<BBox> {
    let mut cands = Vec::new();
    for (g, p) in grids.iter().zip(preds) {
        let stride = g.stage.stride() as f64;
        let (aw, ah) = DetectorConfig::anchor(g.stage);
        for (cell, row) in p.data().chunks(PRED_DIM).enumerate() {
            let conf = sigmoid(row[0]);
            if conf < conf_floor {
                continue;
            }
            let (i, j) = (cell / g.cols, cell % g.cols);
            let cx = (j as f64 + sigmoid(row[1])) * stride;
            let cy = (i as f64 + sigmoid(row[2])) * stride;
            let w = (row[3] as f64).clamp(-4.0, 4.0).exp() * aw;
            let h = (row[4] as f64).clamp(-4.0, 4.0).exp() * ah;
            cands.push(BBox::det(cx - w / 2.0, cy - h / 2.0, w, h, conf));
        }
    }
    cands.sort_by(|a, b| b.conf.unwrap().total_cmp(&a.conf.unwrap()));
    let mut keep: Vec<BBox> = Vec::new();
    for c in cands {
        if keep.iter().all(|k| k.iou(&c) < nms_iou) {
            keep.push(c);
        }
    }
    keep
}
