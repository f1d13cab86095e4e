//! Run configuration, training loop, checkpoints and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Clip, SyntheticSpec};
use super::detector::{assign_targets, decode, frame_loss, Detector, DetectorConfig, Fuser, LossWeights, ModelConfig};
use crate::autodiff::{Backend, Eager, Gradients, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, EvalSetting, FrameBoxes};
use crate::tensor::Tensor;

pub const RUN_SCHEMA: u32 = 1;

/// Forces single-threaded, fully ordered execution when set to `1`.
pub const DETERMINISTIC_ENV: &str = "MAMBAST_DETERMINISTIC";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Clips per step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Weight of positive cells in the objectness loss.
    pub positive_weight: f64,
    pub box_weight: f64,
    /// Frames per training window; clips are cut into windows of this length.
    pub frames: usize,
    /// Runs the windows of a batch on the rayon pool; results do not depend on it.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch: 16,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 5.0,
            positive_weight: 4.0,
            box_weight: 2.0,
            frames: 3,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub conf_floor: f64,
    pub nms_iou: f64,
    pub iou: f64,
    pub setting: EvalSetting,
    /// Carry context length at evaluation; 1 resets the carry every frame.
    pub frames: usize,
    /// Clips in the held-out set drawn by [`RunConfig::eval_spec`].
    pub clips: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_floor: 0.05,
            nms_iou: 0.5,
            iou: 0.5,
            setting: EvalSetting::All,
            frames: 3,
            clips: 256,
        }
    }
}

/// Everything a `train` or `eval` run needs, stored as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub fuser: Fuser,
    #[serde(default)]
    pub data: SyntheticSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(fuser: Fuser) -> Self {
        Self {
            schema_version: RUN_SCHEMA,
            seed: 0,
            fuser,
            data: SyntheticSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            image: self.data.image,
            fuser: self.fuser,
            model: self.model.clone(),
        }
    }

    /// Held-out clips: the training distribution under the next seed.
    pub fn eval_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.data.seed.wrapping_add(1),
            clips: self.eval.clips,
            ..self.data.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA {
            return Err(Error::Config(format!(
                "run config schema {} (expected {RUN_SCHEMA})",
                self.schema_version
            )));
        }
        self.data.validate()?;
        self.detector().validate()?;
        let t = &self.train;
        if t.batch == 0 || t.frames == 0 || !(t.lr >= 0.0) || !(0.0..1.0).contains(&t.momentum) || !(t.clip_norm >= 0.0) {
            return Err(Error::Config("train: need batch, frames > 0, lr >= 0, momentum in [0, 1)".into()));
        }
        if self.eval.frames == 0 || self.eval.clips == 0 || !(self.eval.conf_floor >= 0.0 && self.eval.conf_floor < 1.0) {
            return Err(Error::Config("eval: need frames, clips > 0 and conf_floor in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// True unless the deterministic override is set.
pub fn parallel_allowed(requested: bool) -> bool {
    requested && std::env::var(DETERMINISTIC_ENV).map_or(true, |v| v != "1")
}

/// Consecutive windows of `len` frames. A shorter clip is one window.
pub fn windows(clips: &[Clip], len: usize) -> Vec<(usize, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    for (i, c) in clips.iter().enumerate() {
        let n = c.frames.len();
        let mut start = 0;
        while start < n {
            let end = (start + len).min(n);
            out.push((i, start..end));
            start = end;
        }
    }
    out
}

/// Loss of one window, with the carry threaded through its frames.
fn window_loss<B: Backend<Elem = f32>>(
    b: &mut B,
    det: &Detector,
    clip: &Clip,
    range: std::ops::Range<usize>,
    w: LossWeights,
) -> Result<B::Value> {
    let mut carries = det.zero_carries(b);
    let mut total: Option<B::Value> = None;
    let n = range.len();
    for f in &clip.frames[range] {
        let (preds, next) = det.forward_frame(b, &f.rgb, &f.thermal, &carries)?;
        let targets = assign_targets(det.grids(), &f.boxes);
        let l = frame_loss(b, det.grids(), &preds, &targets, w)?;
        total = Some(match total {
            Some(t) => b.add(&t, &l)?,
            None => l,
        });
        carries = next;
    }
    let total = total.ok_or_else(|| Error::invalid("window_loss", "empty window"))?;
    b.scale(&total, 1.0 / n as f64)
}

fn loss_weights(cfg: &TrainConfig) -> LossWeights {
    LossWeights {
        positive: cfg.positive_weight,
        boxes: cfg.box_weight,
    }
}

/// Mean window loss over a dataset, without gradients.
pub fn dataset_loss(det: &Detector, params: &ParamStore<f32>, clips: &[Clip], cfg: &TrainConfig) -> Result<f64> {
    let ws = windows(clips, cfg.frames);
    let losses = ws
        .par_iter()
        .map(|(i, r)| {
            let mut e = Eager::new(params);
            window_loss(&mut e, det, &clips[*i], r.clone(), loss_weights(cfg))?.item()
        })
        .collect::<Result<Vec<f32>>>()?;
    Ok(losses.iter().map(|&l| l as f64).sum::<f64>() / ws.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fuser: String,
    pub steps: usize,
    /// Mean loss over all training windows before the first step.
    pub initial_loss: f64,
    /// Mean loss over all training windows after the last step.
    pub final_loss: f64,
    /// Batch loss of every step.
    pub losses: Vec<f64>,
    pub parallel: bool,
}

/// Trained parameters plus the architecture that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub detector: DetectorConfig,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config_hash: String,
    detector: DetectorConfig,
}

impl Checkpoint {
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "mambast-detector".into(),
            config_hash: self.detector.hash(),
            detector: self.detector.clone(),
        };
        self.params.save(stem, serde_json::to_value(meta)?)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = ParamStore::load(stem)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.detector.hash() != meta.config_hash {
            return Err(Error::ConfigMismatch {
                expected: meta.config_hash,
                found: meta.detector.hash(),
            });
        }
        Ok(Self {
            detector: meta.detector,
            params,
        })
    }

    /// Errors unless the checkpoint was trained with the architecture of `run`.
    pub fn check(&self, run: &RunConfig) -> Result<()> {
        let want = run.detector().hash();
        let found = self.detector.hash();
        if want != found {
            return Err(Error::ConfigMismatch { expected: want, found });
        }
        Ok(())
    }
}

fn dump_batch(dir: &Path, step: usize, clips: &[&Clip], loss: f64) -> Result<PathBuf> {
    let dump = dir.join(format!("nan_step{step}"));
    std::fs::create_dir_all(&dump)?;
    for c in clips {
        for (t, f) in c.frames.iter().enumerate() {
            f.rgb.save(dump.join(format!("{}_{t}_rgb.bin", c.id)))?;
            f.thermal.save(dump.join(format!("{}_{t}_thermal.bin", c.id)))?;
        }
    }
    let info = serde_json::json!({
        "step": step,
        "loss": loss.to_string(),
        "clips": clips.iter().map(|c| c.id.clone()).collect::<Vec<_>>(),
    });
    std::fs::write(dump.join("info.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(dump)
}

fn global_norm(g: &Gradients<f32>) -> f64 {
    g.values()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// SGD with momentum over windows of the training clips. With `out_dir` set,
/// a non-finite loss dumps the offending batch there before aborting.
pub fn train(run: &RunConfig, clips: &[Clip], out_dir: Option<&Path>) -> Result<(Checkpoint, TrainReport)> {
    run.validate()?;
    let det = Detector::new(run.detector())?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut params = det.init_params(&mut rng)?;
    let cfg = &run.train;
    let w = loss_weights(cfg);
    let parallel = parallel_allowed(cfg.parallel);
    let ws = windows(clips, cfg.frames);
    if ws.is_empty() {
        return Err(Error::invalid("train", "no training clips"));
    }
    let mut report = TrainReport {
        fuser: run.fuser.to_string(),
        steps: cfg.steps,
        initial_loss: dataset_loss(&det, &params, clips, cfg)?,
        parallel,
        ..TrainReport::default()
    };
    let mut velocity: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..ws.len()).collect();
    let mut cursor = ws.len();
    let batch = cfg.batch.min(ws.len());

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == ws.len() {
                // a batch covering every window keeps a fixed order
                if batch < ws.len() {
                    order.shuffle(&mut rng);
                }
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let one = |&k: &usize| -> Result<(f64, Gradients<f32>)> {
            let (ci, r) = &ws[k];
            let mut g = Graph::new(&params);
            let loss = window_loss(&mut g, &det, &clips[*ci], r.clone(), w)?;
            let value = g.value(&loss).item()? as f64;
            Ok((value, g.backward(loss)?))
        };
        let results: Vec<(f64, Gradients<f32>)> = if parallel {
            picked.par_iter().map(one).collect::<Result<_>>()?
        } else {
            picked.iter().map(one).collect::<Result<_>>()?
        };
        let loss = results.iter().map(|r| r.0).sum::<f64>() / batch as f64;
        if !loss.is_finite() {
            let batch_clips: Vec<&Clip> = picked.iter().map(|&k| &clips[ws[k].0]).collect();
            let dump = match out_dir {
                Some(d) => Some(dump_batch(d, step, &batch_clips, loss)?),
                None => None,
            };
            log::error!("non-finite loss {loss} at step {step}; batch dumped to {dump:?}");
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {step}, clips {:?}, dump {dump:?}",
                batch_clips.iter().map(|c| &c.id).collect::<Vec<_>>()
            )));
        }
        report.losses.push(loss);

        // ordered reduction keeps parallel and serial runs identical
        let mut grads = results.into_iter().map(|r| r.1);
        let mut sum = grads.next().expect("non-empty batch");
        for g in grads {
            for (name, t) in g {
                let acc = sum.get_mut(&name).expect("same parameter set");
                let merged: Vec<f32> = acc.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
                *acc = Tensor::new(acc.shape().to_vec(), merged)?;
            }
        }
        let mut scale = 1.0 / batch as f64;
        let norm = global_norm(&sum) * scale;
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            scale *= cfg.clip_norm / norm;
        }
        for (name, g) in &sum {
            let p = params.get(name)?;
            let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let mut next = p.to_vec();
            for ((pv, vv), &gv) in next.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = cfg.momentum as f32 * *vv + (scale as f32) * gv;
                *pv -= cfg.lr as f32 * *vv;
            }
            params.insert(name.clone(), Tensor::new(p.shape().to_vec(), next)?);
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!("{} step {step}: loss {loss:.4} grad-norm {norm:.3}", run.fuser);
        }
    }
    report.final_loss = dataset_loss(&det, &params, clips, cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut log = String::new();
        for (i, l) in report.losses.iter().enumerate() {
            log.push_str(&serde_json::json!({"step": i, "loss": l}).to_string());
            log.push('\n');
        }
        std::fs::write(dir.join("loss.jsonl"), log)?;
    }
    Ok((
        Checkpoint {
            detector: run.detector(),
            params,
        },
        report,
    ))
}

/// Detections for every frame. The carry runs through at most `context`
/// consecutive frames of a clip before it is reset.
pub fn detect(ckpt: &Checkpoint, clips: &[Clip], eval: &EvalConfig) -> Result<Vec<FrameBoxes>> {
    let det = Detector::new(ckpt.detector.clone())?;
    let ws = windows(clips, eval.frames);
    let per_window = ws
        .par_iter()
        .map(|(ci, r)| {
            let mut e = Eager::new(&ckpt.params);
            let mut carries = det.zero_carries(&mut e);
            let mut out = Vec::with_capacity(r.len());
            for f in &clips[*ci].frames[r.clone()] {
                let (preds, next) = det.forward_frame(&mut e, &f.rgb, &f.thermal, &carries)?;
                out.push(FrameBoxes {
                    frame_id: f.id.clone(),
                    boxes: decode(det.grids(), &preds, eval.conf_floor, eval.nms_iou),
                });
                carries = next;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_window.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// LAMR and recall for all clips and per day/night tag. Splits without
/// ground truth are skipped.
pub fn evaluate_detections(clips: &[Clip], dets: &[FrameBoxes], eval: &EvalConfig) -> Result<Vec<SplitReport>> {
    let by_id: BTreeMap<&str, &FrameBoxes> = dets.iter().map(|d| (d.frame_id.as_str(), d)).collect();
    let mut out = Vec::new();
    for split in ["all", "day", "night"] {
        let chosen: Vec<&Clip> = clips
            .iter()
            .filter(|c| split == "all" || c.tag() == split)
            .collect();
        let gts = super::data::ground_truth(&chosen.iter().map(|c| (*c).clone()).collect::<Vec<_>>());
        if gts.iter().all(|g| g.boxes.is_empty()) {
            continue;
        }
        let ds: Vec<FrameBoxes> = gts
            .iter()
            .filter_map(|g| by_id.get(g.frame_id.as_str()).map(|d| (*d).clone()))
            .collect();
        out.push(SplitReport {
            split: split.into(),
            report: evaluate(&ds, &gts, eval.setting, eval.iou)?,
        });
    }
    Ok(out)
}

/// [`detect`] followed by [`evaluate_detections`].
pub fn evaluate_checkpoint(ckpt: &Checkpoint, clips: &[Clip], eval: &EvalConfig) -> Result<Vec<SplitReport>> {
    let dets = detect(ckpt, clips, eval)?;
    evaluate_detections(clips, &dets, eval)
}
