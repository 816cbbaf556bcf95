//! Time-aware position-shift fusion for timelines longer than one model call.
//!
//! At every denoising step the timeline of `l` latent frames is tiled by
//! non-overlapping segments of `f` frames. The first segment starts at
//! `(k·α) mod l` for step `k`, so tile boundaries move between steps, and
//! the tile that runs past the end wraps around to the start.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ConditioningBundle, Model};
use crate::error::{Error, Result};
use crate::flow::euler_step;
use crate::latentio::VideoLatent;
use crate::numcore::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Timeline length `l` in latent frames.
    pub length: usize,
    /// Segment length `f` in latent frames (identity frame excluded).
    pub segment: usize,
    /// Shift `α` added to the first segment start at every step.
    pub offset: usize,
    /// Denoising steps `T`.
    pub steps: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.offset > 0 && self.offset < self.segment && self.segment < self.length) {
            return Err(Error::Config(format!(
                "fusion requires 0 < offset < segment < length, got offset {}, segment {}, length {}",
                self.offset, self.segment, self.length
            )));
        }
        Ok(())
    }
}

/// Circular slice `[start, end)` of the timeline at step `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    /// Step index, 0 at the noisiest step.
    pub k: usize,
    /// Countdown label `T − k`.
    pub t: usize,
    pub start: usize,
    pub end: usize,
    /// `start ≥ end`: the slice runs past the end and continues at 0.
    pub wrapped: bool,
}

impl Segment {
    fn new(k: usize, steps: usize, s: usize, f: usize, l: usize) -> Self {
        let start = s % l;
        let (end, wrapped) = if start + f > l { (start + f - l, true) } else { (start + f, false) };
        Segment {
            k,
            t: steps - k,
            start,
            end,
            wrapped,
        }
    }

    /// Timeline indices covered, in order.
    pub fn frames(&self, length: usize) -> Vec<usize> {
        let len = if self.wrapped { length - self.start + self.end } else { self.end - self.start };
        (0..len).map(|i| (self.start + i) % length).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub segments: Vec<Segment>,
}

impl FusionPlan {
    pub fn at_step(&self, k: usize) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.k == k)
    }

    /// `k,t,s,e,wrapped` rows in emission order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,t,s,e,wrapped\n");
        for s in &self.segments {
            let _ = writeln!(out, "{},{},{},{},{}", s.k, s.t, s.start, s.end, s.wrapped);
        }
        out
    }
}

/// Segment schedule for every step.
///
/// Per step: `s = αβ`, `e = s + f`; emit, advance both by `f`, reduce both
/// modulo `l` once either passes `l`, until `l` frames are covered; then
/// `αβ += α`. `αβ` is reduced modulo `l` at the start of each step.
pub fn plan_segments(cfg: &FusionConfig) -> Result<FusionPlan> {
    cfg.validate()?;
    let (l, f) = (cfg.length, cfg.segment);
    let mut segments = Vec::new();
    let mut shift = 0usize;
    for k in 0..cfg.steps {
        shift %= l;
        let (mut s, mut e, mut covered) = (shift, shift + f, 0);
        while covered < l {
            segments.push(Segment::new(k, cfg.steps, s, f, l));
            s += f;
            e += f;
            covered += f;
            if s > l || e > l {
                s %= l;
                e %= l;
            }
        }
        shift += cfg.offset;
    }
    Ok(FusionPlan { segments })
}

pub fn trace_to_file(plan: &FusionPlan, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, plan.to_csv())?;
    Ok(())
}

/// Runs `denoise` over every planned segment with a frozen read buffer per
/// step; overlapping writes within a step resolve to the later segment.
///
/// `denoise(segment_latent, timeline_frames, segment)` returns the updated
/// segment latent.
pub fn fuse_denoise(
    z_start: &VideoLatent,
    cfg: &FusionConfig,
    mut denoise: impl FnMut(&VideoLatent, &[usize], &Segment) -> Result<VideoLatent>,
) -> Result<VideoLatent> {
    if z_start.frames != cfg.length {
        return Err(Error::Invalid(format!(
            "latent has {} frames, fusion timeline has {}",
            z_start.frames, cfg.length
        )));
    }
    let plan = plan_segments(cfg)?;
    let mut current = z_start.clone();
    let frame_len = current.frame_len();
    for k in 0..cfg.steps {
        let mut next = current.clone();
        for seg in plan.at_step(k) {
            let idx = seg.frames(cfg.length);
            let input = current.gather_frames(&idx);
            let out = denoise(&input, &idx, seg)?;
            if !out.same_extents(&input) {
                return Err(Error::shape("fuse_denoise", out.data.shape(), input.data.shape()));
            }
            let dst = next.data.data_mut();
            for (i, &f) in idx.iter().enumerate() {
                dst[f * frame_len..(f + 1) * frame_len].copy_from_slice(out.frame(i));
            }
        }
        current = next;
    }
    Ok(current)
}

/// Euler sampling from `t = 0` to `t = 1` over `steps` uniform steps.
///
/// Timelines no longer than the model's segment are integrated directly;
/// longer ones go through [`fuse_denoise`] with per-segment conditioning.
pub fn sample<T: Scalar>(
    model: &Model<T>,
    z_noise: &VideoLatent,
    cond: &ConditioningBundle,
    steps: usize,
    offset: usize,
) -> Result<VideoLatent> {
    let dt = 1.0 / steps.max(1) as f64;
    let segment = model.cfg.video_frames();
    if z_noise.frames <= segment {
        let mut z = z_noise.clone();
        for k in 0..steps {
            let v = model.velocity(&z, &cond.with_t(k as f64 * dt))?;
            z = euler_step(&z, &v, dt)?;
        }
        return Ok(z);
    }
    let cfg = FusionConfig {
        length: z_noise.frames,
        segment,
        offset,
        steps,
    };
    fuse_denoise(z_noise, &cfg, |z, idx, seg| {
        let c = cond.select_video_frames(idx).with_t(seg.k as f64 * dt);
        let v = model.velocity(z, &c)?;
        euler_step(z, &v, dt)
    })
}
