//! Synthetic RGB/thermal clips of moving blobs.
//!
//! Blobs move linearly over an underlying timeline; frame `t` of a clip shows
//! time `t * stride`. In daylight both modalities see the blobs. At night the
//! RGB image is scaled toward a dark constant and drowned in noise while the
//! thermal image is rendered exactly as by day.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BBox, FrameBoxes};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub clips: usize,
    /// Frames per clip.
    pub frames: usize,
    /// Underlying time steps between consecutive frames.
    pub stride: usize,
    pub image: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub height_min: f64,
    pub height_max: f64,
    /// Width as a fraction of height.
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Maximum blob speed in pixels per underlying step.
    pub speed: f64,
    pub night_fraction: f64,
    /// Probability that a frame after the first hides most of one blob.
    pub occlusion: f64,
    pub day_noise: f64,
    pub night_gain: f64,
    pub night_noise: f64,
    pub thermal_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            clips: 128,
            frames: 3,
            stride: 3,
            image: 64,
            blobs_min: 1,
            blobs_max: 3,
            height_min: 12.0,
            height_max: 16.0,
            aspect_min: 0.4,
            aspect_max: 0.6,
            speed: 1.0,
            night_fraction: 0.5,
            occlusion: 0.0,
            day_noise: 0.03,
            night_gain: 0.01,
            night_noise: 0.25,
            thermal_noise: 0.03,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.clips == 0 || self.frames == 0 || self.stride == 0 {
            return bad("clips, frames and stride must be positive");
        }
        if self.image < 32 || !self.image.is_multiple_of(32) {
            return bad("image size must be a positive multiple of 32");
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad("need 1 <= blobs_min <= blobs_max");
        }
        if !(self.height_min > 0.0 && self.height_min <= self.height_max && self.height_max < self.image as f64) {
            return bad("blob heights must lie in (0, image)");
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max && self.aspect_max <= 1.0) {
            return bad("aspect range must lie in (0, 1]");
        }
        let probs = [self.night_fraction, self.occlusion];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        let scales = [self.speed, self.day_noise, self.night_gain, self.night_noise, self.thermal_noise];
        if scales.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("speed, gains and noise levels must be non-negative");
        }
        Ok(())
    }

    /// Underlying time of frame `t`.
    pub fn time_of(&self, t: usize) -> usize {
        t * self.stride
    }
}

/// Background and blob levels shared by both illumination modes.
pub const THERMAL_BACKGROUND: f32 = 0.25;
pub const THERMAL_BLOB: f32 = 0.75;
pub const RGB_CONTRAST: f32 = 0.35;
pub const NIGHT_LEVEL: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub w: f64,
    pub h: f64,
    pub color: [f32; 3],
    pub heat: f32,
}

impl Blob {
    /// Top-left corner at underlying time `tau` of a timeline of length `span`.
    pub fn position(&self, tau: usize, span: usize) -> (f64, f64) {
        if span == 0 {
            return self.start;
        }
        let a = tau as f64 / span as f64;
        (
            self.start.0 + (self.end.0 - self.start.0) * a,
            self.start.1 + (self.end.1 - self.start.1) * a,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub time: usize,
    pub rgb: Tensor<f32>,
    pub thermal: Tensor<f32>,
    pub boxes: Vec<BBox>,
    pub occluded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub night: bool,
    pub blobs: Vec<Blob>,
    pub frames: Vec<Frame>,
}

impl Clip {
    pub fn tag(&self) -> &'static str {
        if self.night {
            "night"
        } else {
            "day"
        }
    }
}

fn covers(px: usize, x: f64, w: f64) -> bool {
    let c = px as f64 + 0.5;
    c >= x && c < x + w
}

fn render_clip(spec: &SyntheticSpec, index: usize) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n = spec.image;
    let span = spec.time_of(spec.frames - 1);
    let night = rng.random_bool(spec.night_fraction);

    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let grad: [f32; 2] = std::array::from_fn(|_| rng.random_range(-0.1..0.1));
    let count = rng.random_range(spec.blobs_min..=spec.blobs_max);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let h = rng.random_range(spec.height_min..=spec.height_max);
            let w = h * rng.random_range(spec.aspect_min..=spec.aspect_max);
            let (xmax, ymax) = (n as f64 - w, n as f64 - h);
            let start = (rng.random_range(0.0..=xmax), rng.random_range(0.0..=ymax));
            let reach = spec.speed * span as f64;
            let end = (
                (start.0 + rng.random_range(-reach..=reach)).clamp(0.0, xmax),
                (start.1 + rng.random_range(-reach..=reach)).clamp(0.0, ymax),
            );
            let color = std::array::from_fn(|c| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                (base[c] + sign * RGB_CONTRAST).clamp(0.0, 1.0)
            });
            let heat = THERMAL_BLOB + rng.random_range(-0.05..0.05);
            Blob {
                start,
                end,
                w,
                h,
                color,
                heat,
            }
        })
        .collect();

    let id = format!("c{index:04}");
    let frames = (0..spec.frames)
        .map(|t| {
            let tau = spec.time_of(t);
            let mut rgb = vec![0f32; n * n * 3];
            let mut thermal = vec![0f32; n * n];
            for y in 0..n {
                for x in 0..n {
                    let g = grad[0] * (x as f32 / n as f32 - 0.5) + grad[1] * (y as f32 / n as f32 - 0.5);
                    for c in 0..3 {
                        rgb[(y * n + x) * 3 + c] = base[c] + g;
                    }
                    thermal[y * n + x] = THERMAL_BACKGROUND + 0.5 * g;
                }
            }
            let mut boxes = Vec::with_capacity(blobs.len());
            for b in &blobs {
                let (bx, by) = b.position(tau, span);
                for y in (0..n).filter(|&y| covers(y, by, b.h)) {
                    for x in (0..n).filter(|&x| covers(x, bx, b.w)) {
                        rgb[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&b.color);
                        thermal[y * n + x] = b.heat;
                    }
                }
                boxes.push(BBox::gt(bx, by, b.w, b.h));
            }
            let occluded = t > 0 && rng.random_bool(spec.occlusion);
            if occluded {
                // a vertical bar over the middle of one blob, in both modalities
                let k = rng.random_range(0..blobs.len());
                let bx = boxes[k];
                let (x0, w) = (bx.x + 0.2 * bx.w, 0.6 * bx.w);
                for y in (0..n).filter(|&y| covers(y, bx.y - 2.0, bx.h + 4.0)) {
                    for x in (0..n).filter(|&x| covers(x, x0, w)) {
                        rgb[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&[0.5; 3]);
                        thermal[y * n + x] = THERMAL_BACKGROUND;
                    }
                }
            }
            let noise = if night { spec.night_noise } else { spec.day_noise } as f32;
            for v in rgb.iter_mut() {
                if night {
                    *v = NIGHT_LEVEL + spec.night_gain as f32 * *v;
                }
                *v += noise * rng.random_range(-1.0f32..1.0);
            }
            for v in thermal.iter_mut() {
                *v += spec.thermal_noise as f32 * rng.random_range(-1.0f32..1.0);
            }
            Frame {
                id: format!("{id}/{t}"),
                time: tau,
                rgb: Tensor::new(vec![n, n, 3], rgb).expect("frame shape"),
                thermal: Tensor::new(vec![n, n, 1], thermal).expect("frame shape"),
                boxes,
                occluded,
            }
        })
        .collect();
    Clip {
        id,
        night,
        blobs,
        frames,
    }
}

/// Renders every clip of `spec`. Clip `i` depends only on the seed and `i`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Clip>> {
    spec.validate()?;
    Ok((0..spec.clips).into_par_iter().map(|i| render_clip(spec, i)).collect())
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    id: String,
    time: usize,
    rgb: String,
    thermal: String,
    occluded: bool,
}

#[derive(Serialize, Deserialize)]
struct ClipEntry {
    id: String,
    tag: String,
    frames: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    spec: SyntheticSpec,
    clips: Vec<ClipEntry>,
}

pub fn ground_truth(clips: &[Clip]) -> Vec<FrameBoxes> {
    clips
        .iter()
        .flat_map(|c| c.frames.iter())
        .map(|f| FrameBoxes {
            frame_id: f.id.clone(),
            boxes: f.boxes.clone(),
        })
        .collect()
}

/// Writes `manifest.json`, `gt.jsonl` and one tensor file per frame and modality.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SyntheticSpec, clips: &[Clip]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("frames"))?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let mut frames = Vec::with_capacity(c.frames.len());
        for (t, f) in c.frames.iter().enumerate() {
            let rgb = format!("frames/{}_{t}_rgb.bin", c.id);
            let thermal = format!("frames/{}_{t}_thermal.bin", c.id);
            f.rgb.save(dir.join(&rgb))?;
            f.thermal.save(dir.join(&thermal))?;
            frames.push(FrameEntry {
                id: f.id.clone(),
                time: f.time,
                rgb,
                thermal,
                occluded: f.occluded,
            });
        }
        entries.push(ClipEntry {
            id: c.id.clone(),
            tag: c.tag().into(),
            frames,
        });
    }
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA,
        spec: spec.clone(),
        clips: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    crate::metrics::write_jsonl(dir.join("gt.jsonl"), &ground_truth(clips))
}

/// Reads a dataset written by [`write_dataset`]. Blob trajectories are not stored.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<(SyntheticSpec, Vec<Clip>)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.schema_version != DATASET_SCHEMA {
        return Err(Error::Format(format!(
            "dataset schema {} (expected {DATASET_SCHEMA})",
            manifest.schema_version
        )));
    }
    let gt = crate::metrics::read_jsonl(dir.join("gt.jsonl"))?;
    let mut boxes: std::collections::HashMap<String, Vec<BBox>> =
        gt.into_iter().map(|f| (f.frame_id, f.boxes)).collect();
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for c in manifest.clips {
        let night = match c.tag.as_str() {
            "night" => true,
            "day" => false,
            other => return Err(Error::Format(format!("unknown clip tag `{other}`"))),
        };
        let frames = c
            .frames
            .into_iter()
            .map(|f| {
                Ok(Frame {
                    rgb: Tensor::load(dir.join(&f.rgb))?,
                    thermal: Tensor::load(dir.join(&f.thermal))?,
                    boxes: boxes
                        .remove(&f.id)
                        .ok_or_else(|| Error::Format(format!("no ground truth for frame `{}`", f.id)))?,
                    id: f.id,
                    time: f.time,
                    occluded: f.occluded,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        clips.push(Clip {
            id: c.id,
            night,
            blobs: Vec::new(),
            frames,
        });
    }
    Ok((manifest.spec, clips))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            clips: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_and_tracks_blobs() {
        let spec = small();
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        for c in &a {
            assert_eq!(c.frames.iter().map(|f| f.time).collect::<Vec<_>>(), vec![0, 3, 6]);
            for f in &c.frames {
                for (b, gt) in c.blobs.iter().zip(&f.boxes) {
                    let (x, y) = b.position(f.time, 6);
                    assert_eq!((gt.x, gt.y, gt.w, gt.h), (x, y, b.w, b.h));
                    assert!(gt.x >= 0.0 && gt.x + gt.w <= 64.0 && gt.y + gt.h <= 64.0);
                }
            }
        }
    }

    #[test]
    fn night_crushes_rgb_only() {
        let spec = small();
        // blob contrast after the night gain sits well below the noise amplitude
        assert!(spec.night_gain as f32 * RGB_CONTRAST < 0.25 * spec.night_noise as f32);
        assert!(THERMAL_BLOB - THERMAL_BACKGROUND > 10.0 * spec.thermal_noise as f32);
        let mut day = spec.clone();
        day.night_fraction = 0.0;
        let mut night = spec.clone();
        night.night_fraction = 1.0;
        let (d, n) = (generate(&day).unwrap(), generate(&night).unwrap());
        // mean |blob - background| gap in the first RGB channel
        let gap = |c: &Clip| {
            let f = &c.frames[0];
            let b = f.boxes[0];
            let n = spec.image;
            let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
            for y in 0..n {
                for x in 0..n {
                    let v = f.rgb.data()[(y * n + x) * 3] as f64;
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let hit = f.boxes.iter().any(|o| cx >= o.x && cx < o.x + o.w && cy >= o.y && cy < o.y + o.h);
                    if cx >= b.x && cx < b.x + b.w && cy >= b.y && cy < b.y + b.h {
                        inside = (inside.0 + v, inside.1 + 1);
                    } else if !hit {
                        outside = (outside.0 + v, outside.1 + 1);
                    }
                }
            }
            (inside.0 / inside.1 as f64 - outside.0 / outside.1 as f64).abs()
        };
        assert!(n.iter().all(|c| gap(c) < 0.05), "{:?}", n.iter().map(gap).collect::<Vec<_>>());
        assert!(d.iter().all(|c| gap(c) > 0.15), "{:?}", d.iter().map(gap).collect::<Vec<_>>());
        assert!(n.iter().all(|c| c.night) && d.iter().all(|c| !c.night));
    }

    #[test]
    fn dataset_roundtrip_is_byte_identical() {
        let spec = small();
        let clips = generate(&spec).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &spec, &clips).unwrap();
        write_dataset(b.path(), &spec, &generate(&spec).unwrap()).unwrap();
        for name in ["manifest.json", "gt.jsonl", "frames/c0002_1_rgb.bin"] {
            assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        let (spec2, back) = read_dataset(a.path()).unwrap();
        assert_eq!(spec2, spec);
        for (x, y) in back.iter().zip(&clips) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.night, y.night);
        }
    }

    #[test]
    fn occlusion_hides_part_of_a_blob() {
        let spec = SyntheticSpec {
            occlusion: 1.0,
            night_fraction: 0.0,
            ..small()
        };
        let clips = generate(&spec).unwrap();
        assert!(clips.iter().all(|c| !c.frames[0].occluded && c.frames[1..].iter().all(|f| f.occluded)));
        assert!(generate(&SyntheticSpec { clips: 0, ..small() }).is_err());
    }
}
