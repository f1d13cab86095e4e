//! Recurrent temporal fusion over a stream of feature pyramids.
//!
//! Every head of every stage keeps one carry token of width `C/K`. Frame `t`
//! prepends the carry from frame `t - 1` to the head's token sequence; the new
//! carry is the last token of that head's final Mamba layer. The first frame
//! sees an all-zero carry.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Eager, ParamStore};
use crate::config::{FusionConfig, Stage};
use crate::error::{Error, Result};
use crate::mhhpa::{head_prefix, init_stage, last_token, mhhpa_forward, StagePlan};
use crate::tensor::Tensor;

/// One stage's RGB and thermal maps, `H x W x C` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<V = Tensor<f32>> {
    pub stage: Stage,
    pub rgb: V,
    pub thermal: V,
}

/// Parameters plus the precomputed per-stage plans.
#[derive(Clone, Debug)]
pub struct FusionModel {
    config: FusionConfig,
    plans: Vec<StagePlan>,
    params: ParamStore<f32>,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    config: FusionConfig,
}

impl FusionModel {
    /// Fresh parameters from `seed`.
    pub fn init(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in &config.stages {
            init_stage(&mut params, s, &config.ssm, &mut rng)?;
        }
        Self::with_params(config, params)
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn with_params(config: FusionConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let mut template = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in &config.stages {
            init_stage(&mut template, s, &config.ssm, &mut rng)?;
        }
        for (name, t) in template.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("fusion params", t.shape(), got.shape()));
            }
        }
        if let Some(extra) = params.names().find(|n| !template.contains(n)) {
            return Err(Error::UnknownParam(extra.clone()));
        }
        let plans = config
            .stages
            .iter()
            .map(|s| StagePlan::new(s.clone()))
            .collect::<Result<_>>()?;
        let hash = config.hash();
        Ok(Self {
            config,
            plans,
            params,
            hash,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn plans(&self) -> &[StagePlan] {
        &self.plans
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    /// Mutable access for optimizers. Shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let meta = ModelMeta {
            kind: "mambast-fusion".into(),
            config: self.config.clone(),
        };
        self.params.save(stem, serde_json::to_value(meta)?)
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let (params, meta) = ParamStore::load(stem)?;
        let meta: ModelMeta = serde_json::from_value(meta)?;
        Self::with_params(meta.config, params)
    }
}

/// Carries for every stage and head plus the frame counter.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    config_hash: String,
    frame: u64,
    /// `carries[stage][head]`, each `[1, C/K]`.
    carries: Vec<Vec<Tensor<f32>>>,
}

pub fn init_stream(model: &FusionModel) -> StreamState {
    StreamState::new(model.config())
}

impl StreamState {
    pub fn new(config: &FusionConfig) -> Self {
        let carries = config
            .stages
            .iter()
            .map(|s| vec![Tensor::zeros(vec![1, s.head_dim()]); s.heads()])
            .collect();
        Self {
            config_hash: config.hash(),
            frame: 0,
            carries,
        }
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn carries(&self) -> &[Vec<Tensor<f32>>] {
        &self.carries
    }

    pub fn carry(&self, stage: usize, head: usize) -> &Tensor<f32> {
        &self.carries[stage][head]
    }

    fn store(&self, config: &FusionConfig) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (s, heads) in config.stages.iter().zip(&self.carries) {
            for (k, c) in heads.iter().enumerate() {
                store.insert(format!("{}.carry", head_prefix(s.stage.key(), k)), c.clone());
            }
        }
        store
    }

    /// Writes the state as a tensor archive next to a model checkpoint.
    pub fn save(&self, model: &FusionModel, stem: impl AsRef<Path>) -> Result<()> {
        self.check(model)?;
        let meta = serde_json::json!({
            "kind": "mambast-stream",
            "frame": self.frame,
            "config_hash": self.config_hash,
        });
        self.store(model.config()).save(stem, meta)
    }

    pub fn load(model: &FusionModel, stem: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = ParamStore::load(stem)?;
        let hash = meta["config_hash"].as_str().unwrap_or_default().to_string();
        if hash != model.config_hash() {
            return Err(Error::ConfigMismatch {
                expected: model.config_hash().to_string(),
                found: hash,
            });
        }
        let frame = meta["frame"]
            .as_u64()
            .ok_or_else(|| Error::Format("stream state without frame counter".into()))?;
        let mut state = Self::new(model.config());
        for (s, heads) in model.config().stages.iter().zip(state.carries.iter_mut()) {
            for (k, c) in heads.iter_mut().enumerate() {
                let t = store.get(&format!("{}.carry", head_prefix(s.stage.key(), k)))?;
                if t.shape() != c.shape() {
                    return Err(Error::shape("stream state", c.shape(), t.shape()));
                }
                *c = t.clone();
            }
        }
        state.frame = frame;
        Ok(state)
    }

    fn check(&self, model: &FusionModel) -> Result<()> {
        if self.config_hash != model.config_hash() {
            return Err(Error::ConfigMismatch {
                expected: model.config_hash().to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Fuses one frame's pyramid on any backend. `carries[stage][head]` are the
/// incoming tokens; returns the fused pyramid and the outgoing tokens.
pub fn fuse_frame<B: Backend>(
    b: &mut B,
    plans: &[StagePlan],
    pyramid: &[FeaturePair<B::Value>],
    carries: &[Vec<B::Value>],
) -> Result<(Vec<FeaturePair<B::Value>>, Vec<Vec<B::Value>>)> {
    if pyramid.len() != plans.len() || carries.len() != plans.len() {
        return Err(Error::invalid(
            "fuse_frame",
            format!(
                "{} stages configured, got {} feature pairs and {} carry sets",
                plans.len(),
                pyramid.len(),
                carries.len()
            ),
        ));
    }
    let mut fused = Vec::with_capacity(plans.len());
    let mut next = Vec::with_capacity(plans.len());
    for ((plan, pair), carry) in plans.iter().zip(pyramid).zip(carries) {
        let stage = plan.config().stage;
        if pair.stage != stage {
            return Err(Error::invalid("fuse_frame", format!("expected stage {stage}, got {}", pair.stage)));
        }
        let out = mhhpa_forward(b, plan, &pair.rgb, &pair.thermal, Some(carry))?;
        let tokens = out
            .head_outputs
            .iter()
            .map(|h| last_token(b, h))
            .collect::<Result<Vec<_>>>()?;
        fused.push(FeaturePair {
            stage,
            rgb: out.rgb,
            thermal: out.thermal,
        });
        next.push(tokens);
    }
    Ok((fused, next))
}

/// Advances the stream by one frame. The input state is left untouched.
pub fn fuse_next(
    model: &FusionModel,
    state: &StreamState,
    pyramid: &[FeaturePair],
) -> Result<(Vec<FeaturePair>, StreamState)> {
    state.check(model)?;
    let mut e = Eager::new(model.params());
    let (fused, carries) = fuse_frame(&mut e, model.plans(), pyramid, &state.carries)?;
    Ok((
        fused,
        StreamState {
            config_hash: state.config_hash.clone(),
            frame: state.frame + 1,
            carries,
        },
    ))
}

/// Fuses a whole clip from a fresh stream.
pub fn fuse_clip(model: &FusionModel, frames: &[Vec<FeaturePair>]) -> Result<Vec<Vec<FeaturePair>>> {
    if frames.is_empty() {
        return Err(Error::invalid("fuse_clip", "empty clip"));
    }
    let mut state = init_stream(model);
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let (fused, next) = fuse_next(model, &state, f)?;
        out.push(fused);
        state = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SsmConfig, StageConfig};
    use crate::ssm::uniform_tensor;

    fn micro() -> FusionConfig {
        FusionConfig {
            stages: vec![
                StageConfig {
                    stage: Stage::F1,
                    height: 4,
                    width: 4,
                    channels: 4,
                    patch_sizes: vec![1, 2],
                    layers: 1,
                },
                StageConfig {
                    stage: Stage::F2,
                    height: 2,
                    width: 2,
                    channels: 8,
                    patch_sizes: vec![1],
                    layers: 1,
                },
            ],
            ssm: SsmConfig {
                state_size: 2,
                expand: 2,
                conv_kernel: 2,
                ..SsmConfig::default()
            },
        }
    }

    fn frame(seed: u64, cfg: &FusionConfig) -> Vec<FeaturePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.stages
            .iter()
            .map(|s| FeaturePair {
                stage: s.stage,
                rgb: uniform_tensor(&mut rng, vec![s.height, s.width, s.channels], 1.0),
                thermal: uniform_tensor(&mut rng, vec![s.height, s.width, s.channels], 1.0),
            })
            .collect()
    }

    #[test]
    fn stream_init_is_zero() {
        let cfg = FusionConfig::published();
        let s = StreamState::new(&cfg);
        assert_eq!(s.frame(), 0);
        let dims: Vec<Vec<usize>> = s.carries().iter().map(|h| h.iter().map(|c| c.shape()[1]).collect()).collect();
        assert_eq!(dims, vec![vec![64; 4], vec![512], vec![1024]]);
        assert!(s.carries().iter().flatten().all(|c| c.data().iter().all(|&v| v == 0.0)));
        assert_eq!(s, StreamState::new(&cfg));
    }

    #[test]
    fn rejects_foreign_state() {
        let model = FusionModel::init(micro(), 1).unwrap();
        let mut other = micro();
        other.stages[0].layers = 2;
        let state = StreamState::new(&other);
        let f = frame(2, model.config());
        assert!(matches!(fuse_next(&model, &state, &f), Err(Error::ConfigMismatch { .. })));
        assert!(fuse_clip(&model, &[]).is_err());
    }

    #[test]
    fn markov_and_streaming() {
        let mut model = FusionModel::init(micro(), 4).unwrap();
        // make every component active
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let names: Vec<String> = model.params().names().cloned().collect();
        for n in names {
            if n.ends_with("out_proj.weight") || n.ends_with("agg.weight") {
                let shape = model.params().get(&n).unwrap().shape().to_vec();
                model.params_mut().insert(n, uniform_tensor(&mut rng, shape, 0.3));
            }
        }
        let frames: Vec<_> = (0..4).map(|i| frame(10 + i, model.config())).collect();
        let clip = fuse_clip(&model, &frames).unwrap();
        let mut st = init_stream(&model);
        for (f, want) in frames.iter().zip(&clip) {
            let (a, next) = fuse_next(&model, &st, f).unwrap();
            let (b, next2) = fuse_next(&model, &st, f).unwrap();
            assert_eq!(next, next2);
            for ((x, y), w) in a.iter().zip(&b).zip(want) {
                assert!(x.rgb.bit_eq(&y.rgb) && x.rgb.bit_eq(&w.rgb) && x.thermal.bit_eq(&w.thermal));
            }
            st = next;
        }
        assert_eq!(st.frame(), 4);
        // the carry is live: frame 2 depends on frame 1
        let alt = vec![frame(77, model.config()), frames[1].clone()];
        let clip2 = fuse_clip(&model, &alt).unwrap();
        assert!(!clip2[1][0].rgb.bit_eq(&clip[1][0].rgb));
    }

    #[test]
    fn zeroed_out_projections_cut_the_carry_path() {
        let model = FusionModel::init(micro(), 6).unwrap();
        let mut params = model.params().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let names: Vec<String> = params.names().cloned().collect();
        for n in names {
            if n.ends_with("agg.weight") || n.ends_with("out_linear.weight") {
                let shape = params.get(&n).unwrap().shape().to_vec();
                params.insert(n, uniform_tensor(&mut rng, shape, 0.3));
            }
        }
        let model = FusionModel::with_params(model.config().clone(), params).unwrap();
        let f2 = frame(21, model.config());
        let a = fuse_clip(&model, &[frame(20, model.config()), f2.clone()]).unwrap();
        let b = fuse_clip(&model, &[frame(30, model.config()), f2.clone()]).unwrap();
        let single = fuse_clip(&model, std::slice::from_ref(&f2)).unwrap();
        for s in 0..2 {
            assert!(a[1][s].rgb.bit_eq(&b[1][s].rgb));
            assert!(a[1][s].thermal.bit_eq(&single[0][s].thermal));
            assert!(!a[1][s].rgb.bit_eq(&f2[s].rgb));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = FusionModel::init(micro(), 8).unwrap();
        model.save(dir.path().join("m")).unwrap();
        let back = FusionModel::load(dir.path().join("m")).unwrap();
        assert_eq!(back.config(), model.config());
        for (n, t) in model.params().iter() {
            assert!(back.params().get(n).unwrap().bit_eq(t));
        }
        let (_, st) = fuse_next(&model, &init_stream(&model), &frame(3, model.config())).unwrap();
        st.save(&model, dir.path().join("s")).unwrap();
        assert_eq!(StreamState::load(&back, dir.path().join("s")).unwrap(), st);
    }

    #[test]
    fn with_params_checks_names() {
        let model = FusionModel::init(micro(), 8).unwrap();
        let mut p = model.params().clone();
        p.insert("f1.bogus", Tensor::zeros(vec![1]));
        assert!(FusionModel::with_params(micro(), p).is_err());
        let mut p = model.params().clone();
        p.insert("f1.agg.bias", Tensor::zeros(vec![3]));
        assert!(FusionModel::with_params(micro(), p).is_err());
    }
}
