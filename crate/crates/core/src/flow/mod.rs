//! Flow matching: timestep sampling, the linear noise-to-data path, its
//! velocity, the squared-error objective, and the training loop.
//!
//! Time runs from `t = 0` (pure noise `z₀`) to `t = 1` (data `z₁`).

pub mod checkpoint;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use train::{draw_batch, train_loop, Schedule, TrainClip, TrainConfig, TrainSample};

use crate::error::{Error, Result};
use crate::latentio::VideoLatent;
use crate::numcore::{Scalar, SeededRng, Tape, Tensor, Var};

/// Logit-normal timestep distribution: `sigmoid(location + scale·N(0,1))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogitNormalParams {
    pub location: f64,
    pub scale: f64,
}

impl Default for LogitNormalParams {
    fn default() -> Self {
        LogitNormalParams {
            location: 0.0,
            scale: 1.0,
        }
    }
}

impl LogitNormalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite() && self.location.is_finite()) {
            return Err(Error::Config(format!(
                "logit-normal needs finite location and positive scale, got ({}, {})",
                self.location, self.scale
            )));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws `t ∈ (0, 1)`; the open interval is kept even when the sigmoid
/// saturates in floating point.
pub fn sample_t(rng: &mut SeededRng, p: &LogitNormalParams) -> f64 {
    let t = sigmoid(p.location + p.scale * rng.normal());
    t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
}

/// `(1 − t)·z₀ + t·z₁`.
pub fn interpolate<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    z0.zip_map(z1, "interpolate", |x, y| a * x + b * y)
}

/// `z₁ − z₀`.
pub fn velocity_target<T: Scalar>(z0: &Tensor<T>, z1: &Tensor<T>) -> Result<Tensor<T>> {
    z1.sub(z0)
}

/// Mean squared difference.
pub fn loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("loss", pred.shape(), target.shape()));
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Differentiable mean squared difference against a constant target.
pub fn loss_on_tape<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.iter().product::<usize>() != target.numel() {
        return Err(Error::shape("loss", &shape, target.shape()));
    }
    let u = tape.input(target.clone().reshape(&shape)?)?;
    let diff = tape.sub(pred, u)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// One explicit Euler step `z + dt·v` on latents.
pub fn euler_step(z: &VideoLatent, velocity: &VideoLatent, dt: f64) -> Result<VideoLatent> {
    if !z.same_extents(velocity) {
        return Err(Error::shape("euler_step", z.data.shape(), velocity.data.shape()));
    }
    let dt = dt as f32;
    let data = z.data.zip_map(&velocity.data, "euler_step", |a, b| a + dt * b)?;
    VideoLatent::new(z.frames, z.width, z.height, z.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sample_t_limits_and_median() {
        let mut rng = SeededRng::new(1);
        let narrow = LogitNormalParams {
            location: 0.0,
            scale: 1e-9,
        };
        assert!((sample_t(&mut rng, &narrow) - 0.5).abs() < 1e-8);
        let p = LogitNormalParams::default();
        let mut ts: Vec<f64> = (0..10_000).map(|_| sample_t(&mut rng, &p)).collect();
        assert!(ts.iter().all(|&t| t > 0.0 && t < 1.0));
        ts.sort_by(f64::total_cmp);
        let median = 0.5 * (ts[4999] + ts[5000]);
        assert!((0.47..=0.53).contains(&median), "{median}");
        let extreme = LogitNormalParams {
            location: 100.0,
            scale: 1.0,
        };
        assert!(sample_t(&mut rng, &extreme) < 1.0);
        assert!(LogitNormalParams { location: 0.0, scale: 0.0 }.validate().is_err());
    }

    #[test]
    fn interpolation_examples() {
        let z0 = Tensor::<f64>::zeros(&[3]);
        let z1 = Tensor::full(&[3], 2.0);
        assert_eq!(interpolate(&z0, &z1, 0.5).unwrap().data(), &[1.0; 3]);
        let mut rng = SeededRng::new(2);
        let a = rng.normal_tensor::<f32>(&[5], 1.0);
        let b = rng.normal_tensor::<f32>(&[5], 1.0);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert!(interpolate(&a, &Tensor::zeros(&[4]), 0.3).is_err());
    }

    #[test]
    fn velocity_is_time_derivative() {
        let mut rng = SeededRng::new(3);
        let z0 = rng.normal_tensor::<f64>(&[20], 1.0);
        let z1 = rng.normal_tensor::<f64>(&[20], 1.0);
        let u = velocity_target(&z0, &z1).unwrap();
        assert_eq!(velocity_target(&z0, &z0).unwrap(), Tensor::zeros(&[20]));
        assert_eq!(velocity_target(&Tensor::zeros(&[20]), &z1).unwrap(), z1);
        let eps = 1e-3;
        for t in [0.1, 0.5, 0.9] {
            let hi = interpolate(&z0, &z1, t + eps).unwrap();
            let lo = interpolate(&z0, &z1, t - eps).unwrap();
            let fd = hi.sub(&lo).unwrap().scale(1.0 / (2.0 * eps));
            assert!(fd.max_abs_diff(&u).unwrap() < 1e-9);
        }
    }

    #[test]
    fn loss_examples() {
        let u = Tensor::<f64>::from_rows(&[&[0.0, 0.0]]);
        assert_eq!(loss(&Tensor::from_rows(&[&[0.0, 2.0]]), &u).unwrap(), 2.0);
        assert_eq!(loss(&u, &u).unwrap(), 0.0);
        let v = Tensor::<f64>::full(&[4], 3.0);
        assert_eq!(loss(&v.map(|x| x + 1.0), &v).unwrap(), 1.0);
        assert!(loss(&v, &u).is_err());
    }

    #[test]
    fn tape_loss_matches_eager() {
        let mut rng = SeededRng::new(4);
        let p = rng.normal_tensor::<f64>(&[3, 4], 1.0);
        let u = rng.normal_tensor::<f64>(&[12], 1.0);
        let mut tape = Tape::new();
        let pv = tape.input(p.clone()).unwrap();
        let l = loss_on_tape(&mut tape, pv, &u).unwrap();
        let eager = loss(&p.reshape(&[12]).unwrap(), &u).unwrap();
        assert!((tape.value(l).data()[0] - eager).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_zero_iff_equal(a in proptest::collection::vec(-5.0f64..5.0, 1..20), k in 0usize..20) {
            let t = Tensor::new(vec![a.len()], a.clone()).unwrap();
            prop_assert_eq!(loss(&t, &t).unwrap(), 0.0);
            let mut b = a.clone();
            let i = k % b.len();
            b[i] += 0.5;
            let tb = Tensor::new(vec![b.len()], b).unwrap();
            prop_assert!(loss(&t, &tb).unwrap() > 0.0);
        }
    }
}
