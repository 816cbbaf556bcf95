use serde::{Deserialize, Serialize};

use super::{interpolate, loss_on_tape, sample_t, velocity_target, LogitNormalParams};
use crate::backbone::{ConditioningBundle, Model};
use crate::error::{Error, Result};
use crate::latentio::VideoLatent;
use crate::numcore::{Optimizer, OptimizerConfig, Scalar, SeededRng, Tape, Tensor};

/// One training clip: clean latent plus its conditioning (`t` is ignored).
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub latent: VideoLatent,
    pub cond: ConditioningBundle,
}

/// Data regime over training steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Every sample is a full clip.
    #[default]
    Single,
    /// Full clips for `audio_steps`, then single-frame image samples mixed
    /// in at `image_ratio` images per clip.
    TwoStage { audio_steps: u64, image_ratio: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub timesteps: LogitNormalParams,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 4,
            optimizer: OptimizerConfig::adam(1e-3),
            timesteps: LogitNormalParams::default(),
            schedule: Schedule::Single,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Schedule::TwoStage { image_ratio, .. } = self.schedule {
            if !(image_ratio >= 0.0 && image_ratio.is_finite()) {
                return Err(Error::Config("image_ratio must be a finite non-negative number".into()));
            }
        }
        self.timesteps.validate()
    }
}

/// A drawn training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub clip: usize,
    pub t: f64,
    pub z0: VideoLatent,
    pub z1: VideoLatent,
    pub zt: VideoLatent,
    pub u: VideoLatent,
    pub cond: ConditioningBundle,
}

fn latent_like(z: &VideoLatent, data: Tensor<f32>) -> Result<VideoLatent> {
    VideoLatent::new(z.frames, z.width, z.height, z.channels, data)
}

/// The batch used at `step`; depends only on the seed and the step index.
pub fn draw_batch(data: &[TrainClip], cfg: &TrainConfig, step: u64) -> Result<Vec<TrainSample>> {
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut rng = SeededRng::new(cfg.seed).fork(step);
    let image_prob = match cfg.schedule {
        Schedule::TwoStage {
            audio_steps,
            image_ratio,
        } if step >= audio_steps => image_ratio / (1.0 + image_ratio),
        _ => 0.0,
    };
    (0..cfg.batch_size)
        .map(|_| {
            let clip = rng.below(data.len());
            let mut z1 = data[clip].latent.clone();
            let mut cond = data[clip].cond.clone();
            if image_prob > 0.0 && rng.uniform() < image_prob {
                let f = rng.below(z1.frames);
                z1 = z1.gather_frames(&[f]);
                cond = cond.select_video_frames(&[f]);
            }
            let t = sample_t(&mut rng, &cfg.timesteps);
            let z0 = latent_like(&z1, rng.normal_tensor(z1.data.shape(), 1.0))?;
            let zt = latent_like(&z1, interpolate(&z0.data, &z1.data, t)?)?;
            let u = latent_like(&z1, velocity_target(&z0.data, &z1.data)?)?;
            Ok(TrainSample {
                clip,
                t,
                cond: cond.with_t(t),
                z0,
                z1,
                zt,
                u,
            })
        })
        .collect()
}

/// Runs `cfg.steps` optimizer steps starting after `optimizer.steps_taken()`.
///
/// Calls `on_step(step, loss)` after each update and returns the per-step
/// mean batch losses.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    data: &[TrainClip],
    cfg: &TrainConfig,
    optimizer: &mut Optimizer<T>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let start = optimizer.steps_taken();
    let scale = T::from_f64(1.0 / cfg.batch_size as f64);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in start..start + cfg.steps {
        model.store.zero_grads();
        let mut total = 0.0;
        for s in draw_batch(data, cfg, step)? {
            let mut tape = Tape::new();
            let pred = model.forward(&mut tape, &s.zt, &s.cond).map_err(|e| numeric(step, e))?;
            let l = loss_on_tape(&mut tape, pred, &s.u.data.cast())?;
            let value = tape.value(l).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}")));
            }
            total += value;
            tape.backward(l).map_err(|e| numeric(step, e))?.accumulate_into(&mut model.store, scale)?;
        }
        optimizer.step(&mut model.store)?;
        if let Some((_, p)) = model.store.iter().find(|(_, p)| !p.value.all_finite()) {
            return Err(Error::Numeric(format!("parameter `{}` diverged at step {step}", p.name)));
        }
        let mean = total / cfg.batch_size as f64;
        on_step(step, mean);
        losses.push(mean);
    }
    Ok(losses)
}

fn numeric(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(op) => Error::Numeric(format!("non-finite activation in {op} at step {step}")),
        other => other,
    }
}
