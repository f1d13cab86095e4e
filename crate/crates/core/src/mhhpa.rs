//! Multi-head hierarchical patching and aggregation for one fusion stage.
//!
//! Each head patches both modality maps at its own size, interleaves them with
//! [`crate::ocf`], projects to the head width, runs a Mamba stack and maps the
//! result back to the patched channel count. Heads are upsampled, concatenated
//! and folded back onto the stage input by a zero-initialized projection.

use rand::Rng;

use crate::autodiff::{Backend, Eager, ParamStore};
use crate::config::{SsmConfig, StageConfig};
use crate::error::{Error, Result};
use crate::ocf::{build_layout, ocf_flatten, ocf_unflatten, OcfLayout};
use crate::ssm::{init_block, init_linear, layer_prefix, stack_forward, uniform_tensor};
use crate::tensor::{Element, Tensor};

/// Stage configuration plus the OCF tables of every head, built once.
#[derive(Clone, Debug)]
pub struct StagePlan {
    cfg: StageConfig,
    layouts: Vec<OcfLayout>,
}

impl StagePlan {
    pub fn new(cfg: StageConfig) -> Result<Self> {
        cfg.validate()?;
        let layouts = cfg
            .patch_sizes
            .iter()
            .map(|&s| build_layout(cfg.height / s, cfg.width / s))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, layouts })
    }

    pub fn config(&self) -> &StageConfig {
        &self.cfg
    }

    pub fn layout(&self, head: usize) -> &OcfLayout {
        &self.layouts[head]
    }

    pub fn prefix(&self) -> &'static str {
        self.cfg.stage.key()
    }

    pub fn head_prefix(&self, head: usize) -> String {
        head_prefix(self.prefix(), head)
    }

    /// Token count seen by head `k`, without the carry.
    pub fn tokens(&self, head: usize) -> usize {
        self.layouts[head].len()
    }
}

pub fn head_prefix(stage: &str, head: usize) -> String {
    format!("{stage}.head{head}")
}

fn check_map(op: &'static str, shape: &[usize], s: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::invalid(op, format!("expected an H x W x C map, got {shape:?}")));
    }
    if s == 0 || !shape[0].is_multiple_of(s) || !shape[1].is_multiple_of(s) {
        return Err(Error::invalid(op, format!("patch size {s} does not divide {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2]))
}

/// Space-to-depth. Channel `(dy * s + dx) * c + ch` of output pixel `(i, j)`
/// holds input `(i * s + dy, j * s + dx, ch)`.
pub fn patch<B: Backend>(b: &mut B, x: &B::Value, s: usize) -> Result<B::Value> {
    let (h, w, c) = check_map("patch", b.shape(x), s)?;
    if s == 1 {
        return Ok(x.clone());
    }
    let x = b.reshape(x, &[h / s, s, w / s, s, c])?;
    let x = b.transpose(&x, &[0, 2, 1, 3, 4])?;
    b.reshape(&x, &[h / s, w / s, s * s * c])
}

/// Depth-to-space, the exact inverse of [`patch`].
pub fn unpatch<B: Backend>(b: &mut B, x: &B::Value, s: usize) -> Result<B::Value> {
    let (hp, wp, cs) = check_map("unpatch", b.shape(x), 1)?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::invalid("unpatch", format!("{cs} channels not divisible by {s}^2")));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let c = cs / (s * s);
    let x = b.reshape(x, &[hp, wp, s, s, c])?;
    let x = b.transpose(&x, &[0, 2, 1, 3, 4])?;
    b.reshape(&x, &[hp * s, wp * s, c])
}

pub fn patch_tensor<E: Element>(x: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let params = ParamStore::new();
    patch(&mut Eager::new(&params), x, s)
}

pub fn unpatch_tensor<E: Element>(x: &Tensor<E>, s: usize) -> Result<Tensor<E>> {
    let params = ParamStore::new();
    unpatch(&mut Eager::new(&params), x, s)
}

/// Adds `{stage}.emb.pos` to both maps and the per-modality vectors
/// `{stage}.emb.rgb` / `{stage}.emb.thermal`.
pub fn add_embeddings<B: Backend>(
    b: &mut B,
    stage: &str,
    rgb: &B::Value,
    thermal: &B::Value,
) -> Result<(B::Value, B::Value)> {
    if b.shape(rgb) != b.shape(thermal) {
        return Err(Error::shape("add_embeddings", b.shape(rgb), b.shape(thermal)));
    }
    let pos = b.param(&format!("{stage}.emb.pos"))?;
    if b.shape(&pos) != b.shape(rgb) {
        return Err(Error::shape("add_embeddings", b.shape(rgb), b.shape(&pos)));
    }
    let e_r = b.param(&format!("{stage}.emb.rgb"))?;
    let e_t = b.param(&format!("{stage}.emb.thermal"))?;
    let r = b.add(rgb, &pos)?;
    let r = b.add(&r, &e_r)?;
    let t = b.add(thermal, &pos)?;
    let t = b.add(&t, &e_t)?;
    Ok((r, t))
}

/// Scale of the random embedding initialization.
pub const EMBED_INIT: f64 = 0.02;

/// Inserts every parameter of one stage. The aggregation projection and each
/// block's output projection start at zero.
pub fn init_stage(store: &mut ParamStore<f32>, cfg: &StageConfig, ssm: &SsmConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let p = cfg.stage.key();
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let d = cfg.head_dim();
    store.insert(format!("{p}.emb.pos"), uniform_tensor(rng, vec![h, w, c], EMBED_INIT));
    store.insert(format!("{p}.emb.rgb"), uniform_tensor(rng, vec![c], EMBED_INIT));
    store.insert(format!("{p}.emb.thermal"), uniform_tensor(rng, vec![c], EMBED_INIT));
    for (k, &s) in cfg.patch_sizes.iter().enumerate() {
        let hp = head_prefix(p, k);
        let cs = c * s * s;
        init_linear(store, &format!("{hp}.proj"), cs, d, false, rng);
        for i in 0..cfg.layers {
            init_block(store, &layer_prefix(&hp, i), d, ssm, rng);
        }
        init_linear(store, &format!("{hp}.out_linear"), d, cs, true, rng);
    }
    store.insert(format!("{p}.agg.weight"), Tensor::zeros(vec![cfg.heads() * c, c]));
    store.insert(format!("{p}.agg.bias"), Tensor::zeros(vec![c]));
    Ok(())
}

/// Result of one stage pass.
#[derive(Clone, Debug)]
pub struct StageOutput<V> {
    pub rgb: V,
    pub thermal: V,
    /// Final-layer output of every head, carry position included when a carry was given.
    pub head_outputs: Vec<V>,
}

/// Runs one head and returns its upsampled maps plus the final-layer tokens.
fn head_forward<B: Backend>(
    b: &mut B,
    plan: &StagePlan,
    k: usize,
    rgb: &B::Value,
    thermal: &B::Value,
    carry: Option<&B::Value>,
) -> Result<(B::Value, B::Value, B::Value)> {
    let s = plan.cfg.patch_sizes[k];
    let hp = plan.head_prefix(k);
    let layout = plan.layout(k);

    let pr = patch(b, rgb, s)?;
    let pt = patch(b, thermal, s)?;
    let tokens = ocf_flatten(b, layout, &pr, &pt)?;
    let z = b.linear_named(&tokens, &format!("{hp}.proj"), false)?;
    let z = match carry {
        Some(h) => b.concat(&[h, &z], 0)?,
        None => z,
    };
    let (out, _) = stack_forward(b, &hp, plan.cfg.layers, &z)?;
    let body = match carry {
        Some(_) => b.slice(&out, 0, 1, layout.len())?,
        None => out.clone(),
    };
    let y = b.linear_named(&body, &format!("{hp}.out_linear"), true)?;
    let (yr, yt) = ocf_unflatten(b, layout, &y)?;
    let yr = b.add(&pr, &yr)?;
    let yt = b.add(&pt, &yt)?;
    let ur = unpatch(b, &yr, s)?;
    let ut = unpatch(b, &yt, s)?;
    Ok((ur, ut, out))
}

/// One stage of fusion. `carries`, when present, holds one `[1, C/K]` token per head.
pub fn mhhpa_forward<B: Backend>(
    b: &mut B,
    plan: &StagePlan,
    rgb: &B::Value,
    thermal: &B::Value,
    carries: Option<&[B::Value]>,
) -> Result<StageOutput<B::Value>> {
    let cfg = &plan.cfg;
    let expect = [cfg.height, cfg.width, cfg.channels];
    for v in [rgb, thermal] {
        if b.shape(v) != expect {
            return Err(Error::shape("mhhpa_forward", &expect, b.shape(v)));
        }
    }
    if let Some(cs) = carries {
        if cs.len() != cfg.heads() {
            return Err(Error::invalid(
                "mhhpa_forward",
                format!("{} carry tokens for {} heads", cs.len(), cfg.heads()),
            ));
        }
        let want = [1, cfg.head_dim()];
        for h in cs {
            if b.shape(h) != want {
                return Err(Error::shape("mhhpa_forward carry", &want, b.shape(h)));
            }
        }
    }

    let p = plan.prefix();
    let (er, et) = add_embeddings(b, p, rgb, thermal)?;
    let mut ups_r = Vec::with_capacity(cfg.heads());
    let mut ups_t = Vec::with_capacity(cfg.heads());
    let mut head_outputs = Vec::with_capacity(cfg.heads());
    for k in 0..cfg.heads() {
        let carry = carries.map(|c| &c[k]);
        let (ur, ut, out) = head_forward(b, plan, k, &er, &et, carry)?;
        ups_r.push(ur);
        ups_t.push(ut);
        head_outputs.push(out);
    }

    let mut fused = Vec::with_capacity(2);
    for (ups, orig) in [(&ups_r, rgb), (&ups_t, thermal)] {
        let refs: Vec<&B::Value> = ups.iter().collect();
        let cat = if refs.len() == 1 { refs[0].clone() } else { b.concat(&refs, 2)? };
        let agg = b.linear_named(&cat, &format!("{p}.agg"), true)?;
        fused.push(b.add(orig, &agg)?);
    }
    let thermal = fused.pop().expect("two modalities");
    let rgb = fused.pop().expect("two modalities");
    Ok(StageOutput {
        rgb,
        thermal,
        head_outputs,
    })
}

/// Last token of a `[L, d]` sequence as `[1, d]`.
pub fn last_token<B: Backend>(b: &mut B, seq: &B::Value) -> Result<B::Value> {
    let l = b.shape(seq)[0];
    b.slice(seq, 0, l - 1, 1)
}
