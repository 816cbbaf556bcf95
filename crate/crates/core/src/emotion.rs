//! Audio emotion module: cross-attention from video tokens to an
//! emotion-reference latent, scaled by a learnable factor that starts at 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentio::{encode_image, PixelImage};
use crate::numcore::{cross_attention, AttentionWeights, Init, Linear, ParamId, ParamStore, Scalar, SeededRng, Tape, Tensor, Var};

/// Flattened single-frame latent of the emotion reference, `[w·h, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionRef {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub tokens: Tensor<f32>,
}

impl EmotionRef {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        EmotionRef {
            width,
            height,
            channels,
            tokens: Tensor::zeros(&[width * height, channels]),
        }
    }
}

pub fn encode_emotion_ref(img: &PixelImage, spatial: usize) -> Result<EmotionRef> {
    let z = encode_image(img, spatial)?;
    Ok(EmotionRef {
        width: z.width,
        height: z.height,
        channels: z.channels,
        tokens: z.tokens(),
    })
}

/// Parameter tensors per emotion module (scale, adapter weight and bias,
/// four attention projections).
pub const AEM_PARAM_TENSORS: usize = 7;

#[derive(Clone, Debug)]
pub struct AemParams {
    /// Scale, shape `[1]`, initialized to 0.
    pub gamma: ParamId,
    /// Latent channels `c → d_model`.
    pub fc: Linear,
    pub attn: AttentionWeights,
}

impl AemParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        latent_channels: usize,
        d_model: usize,
        n_heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(AemParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros(&[1]))?,
            fc: Linear::new(store, &format!("{name}.fc"), latent_channels, d_model, true, Init::FanIn, rng)?,
            attn: AttentionWeights::new(store, &format!("{name}.attn"), d_model, d_model, n_heads, rng)?,
        })
    }

    /// `1 + (c·d + d) + 4·d²`.
    pub fn census(latent_channels: usize, d_model: usize) -> usize {
        1 + latent_channels * d_model + d_model + 4 * d_model * d_model
    }

    pub fn num_params(&self) -> usize {
        1 + self.fc.num_params() + self.attn.num_params()
    }
}

/// `tokens + γ · CrossAttn(FC(E_ref), tokens)`.
///
/// Every frame attends to the same keys and values, so one attention call
/// over all query rows equals the per-frame formulation.
pub fn aem_apply<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &AemParams,
    tokens: Var,
    emotion: Var,
) -> Result<Var> {
    let (_, c) = tape.value(emotion).dims2()?;
    if c != params.fc.in_dim {
        return Err(Error::shape("aem", tape.shape(emotion), &[0, params.fc.in_dim]));
    }
    let kv = params.fc.forward(tape, store, emotion)?;
    let attended = cross_attention(tape, store, tokens, kv, &params.attn)?;
    let gamma = tape.param(store, params.gamma)?;
    let scaled = tape.mul_scalar(attended, gamma)?;
    tape.add(tokens, scaled)
}

/// Where emotion-module parameters were found.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementReport {
    /// Parameter tensors under each double block.
    pub double: Vec<usize>,
    /// Parameter tensors under each single block.
    pub single: Vec<usize>,
}

/// Checks by parameter name that every double block carries an emotion
/// module and no single block does.
pub fn placement_check<T: Scalar>(store: &ParamStore<T>, n_double: usize, n_single: usize) -> Result<PlacementReport> {
    let count = |prefix: String| store.iter().filter(|(_, p)| p.name.starts_with(&prefix)).count();
    let report = PlacementReport {
        double: (0..n_double).map(|i| count(format!("double.{i}.aem."))).collect(),
        single: (0..n_single).map(|i| count(format!("single.{i}.aem."))).collect(),
    };
    if let Some(i) = report.double.iter().position(|&c| c != AEM_PARAM_TENSORS) {
        return Err(Error::Placement(format!(
            "double block {i} has {} emotion parameters, expected {AEM_PARAM_TENSORS}",
            report.double[i]
        )));
    }
    if let Some(i) = report.single.iter().position(|&c| c != 0) {
        return Err(Error::Placement(format!("single block {i} carries an emotion module")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const D: usize = 8;
    const C: usize = 5;

    fn setup(seed: u64, gamma: f64) -> (ParamStore<f64>, AemParams) {
        let mut store = ParamStore::new();
        let p = AemParams::new(&mut store, "aem", C, D, 2, &mut SeededRng::new(seed)).unwrap();
        store.set_value(p.gamma, Tensor::full(&[1], gamma)).unwrap();
        (store, p)
    }

    fn run(store: &ParamStore<f64>, p: &AemParams, x: &Tensor<f64>, e: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let ev = tape.input(e.clone()).unwrap();
        let y = aem_apply(&mut tape, store, p, xv, ev).unwrap();
        tape.value(y).clone()
    }

    /// Dense single-head-at-a-time evaluation with plain loops.
    fn oracle(store: &ParamStore<f64>, p: &AemParams, x: &Tensor<f64>, e: &Tensor<f64>) -> Vec<f64> {
        let mm = |a: &[f64], rows: usize, inner: usize, b: &Tensor<f64>| -> Vec<f64> {
            let cols = b.shape()[1];
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for k in 0..inner {
                    for j in 0..cols {
                        out[i * cols + j] += a[i * inner + k] * b.data()[k * cols + j];
                    }
                }
            }
            out
        };
        let (nq, ne) = (x.shape()[0], e.shape()[0]);
        let mut kv = mm(e.data(), ne, C, store.value(p.fc.weight));
        let bias = store.value(p.fc.bias.unwrap()).data();
        for (i, v) in kv.iter_mut().enumerate() {
            *v += bias[i % D];
        }
        let q = mm(x.data(), nq, D, store.value(p.attn.q.weight));
        let k = mm(&kv, ne, D, store.value(p.attn.k.weight));
        let v = mm(&kv, ne, D, store.value(p.attn.v.weight));
        let (h, dh) = (p.attn.n_heads, D / p.attn.n_heads);
        let mut att = vec![0.0; nq * D];
        for head in 0..h {
            for i in 0..nq {
                let s: Vec<f64> = (0..ne)
                    .map(|j| (0..dh).map(|c| q[i * D + head * dh + c] * k[j * D + head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for j in 0..ne {
                    let w = (s[j] - m).exp() / z;
                    for c in 0..dh {
                        att[i * D + head * dh + c] += w * v[j * D + head * dh + c];
                    }
                }
            }
        }
        let o = mm(&att, nq, D, store.value(p.attn.out.weight));
        let g = store.value(p.gamma).data()[0];
        x.data().iter().zip(&o).map(|(a, b)| a + g * b).collect()
    }

    #[test]
    fn zero_scale_is_identity() {
        let (store, p) = setup(1, 0.0);
        let mut rng = SeededRng::new(2);
        let x = rng.normal_tensor(&[6, D], 1.0);
        let e = rng.normal_tensor(&[4, C], 1.0);
        assert_eq!(run(&store, &p, &x, &e), x);
    }

    #[test]
    fn equal_reference_rows_add_a_constant() {
        let (store, p) = setup(3, 0.5);
        let mut rng = SeededRng::new(4);
        let x = rng.normal_tensor(&[6, D], 1.0);
        let row = rng.normal_tensor::<f64>(&[C], 1.0);
        let e = Tensor::from_fn(&[4, C], |i| row.data()[i % C]);
        let y = run(&store, &p, &x, &e).sub(&x).unwrap();
        for r in 1..6 {
            for j in 0..D {
                assert!((y.data()[r * D + j] - y.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let (store, p) = setup(5, 0.8);
        let mut rng = SeededRng::new(6);
        let x = rng.normal_tensor(&[6, D], 1.0);
        let e = rng.normal_tensor(&[4, C], 1.0);
        let y = run(&store, &p, &x, &e);
        for (a, b) in y.data().iter().zip(oracle(&store, &p, &x, &e)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_row_permutation_invariant() {
        let (store, p) = setup(7, 1.1);
        let mut rng = SeededRng::new(8);
        let x = rng.normal_tensor(&[5, D], 1.0);
        let e = rng.normal_tensor(&[4, C], 1.0);
        let perm = [2, 0, 3, 1];
        let ep = Tensor::from_fn(&[4, C], |i| e.data()[perm[i / C] * C + i % C]);
        let diff = run(&store, &p, &x, &e).max_abs_diff(&run(&store, &p, &x, &ep)).unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn encode_shapes() {
        let img = PixelImage::new(8, 8, 1, vec![0.0; 64]).unwrap();
        let e = encode_emotion_ref(&img, 4).unwrap();
        assert_eq!(e.tokens.shape(), &[4, 64]);
        assert!(e.tokens.data().iter().all(|&v| v == 0.0));
        assert_eq!(e, encode_emotion_ref(&img, 4).unwrap());
    }

    #[test]
    fn gamma_starts_at_zero_and_census_matches() {
        let mut store = ParamStore::<f32>::new();
        let p = AemParams::new(&mut store, "aem", C, D, 2, &mut SeededRng::new(1)).unwrap();
        assert_eq!(store.value(p.gamma).data(), &[0.0]);
        assert_eq!(store.num_scalars(), AemParams::census(C, D));
        assert_eq!(store.len(), AEM_PARAM_TENSORS);
    }

    #[test]
    fn placement_by_name() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = SeededRng::new(1);
        AemParams::new(&mut store, "double.0.aem", C, D, 2, &mut rng).unwrap();
        AemParams::new(&mut store, "double.1.aem", C, D, 2, &mut rng).unwrap();
        assert!(placement_check(&store, 2, 1).is_ok());
        assert!(placement_check(&store, 3, 1).is_err());
        AemParams::new(&mut store, "single.0.aem", C, D, 2, &mut rng).unwrap();
        assert!(placement_check(&store, 2, 1).is_err());
    }
}
