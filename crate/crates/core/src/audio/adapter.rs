//! Face-aware audio adapter.
//!
//! Video tokens of latent frame `f` attend only to the 40 audio tokens
//! aligned with that frame. The attention output is gated by the latent face
//! mask and by a learnable weight before being added back.

use super::features::LATENT_AUDIO_TOKENS;
use crate::error::{Error, Result};
use crate::numcore::{attend, AttentionWeights, Init, Linear, ParamId, ParamStore, Scalar, SeededRng, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct FaaParams {
    /// Gate weight, shape `[1]`.
    pub alpha: ParamId,
    /// Audio features `d_a → d_model`.
    pub adapter: Linear,
    pub attn: AttentionWeights,
}

impl FaaParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_audio: usize,
        n_heads: usize,
        alpha_init: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !alpha_init.is_finite() {
            return Err(Error::Config(format!("audio gate init {alpha_init} is not finite")));
        }
        Ok(FaaParams {
            alpha: store.add(format!("{name}.alpha"), Tensor::full(&[1], T::from_f64(alpha_init)))?,
            adapter: Linear::new(store, &format!("{name}.adapter"), d_audio, d_model, true, Init::FanIn, rng)?,
            attn: AttentionWeights::new(store, &format!("{name}.attn"), d_model, d_model, n_heads, rng)?,
        })
    }

    pub fn num_params(&self) -> usize {
        1 + self.adapter.num_params() + self.attn.num_params()
    }
}

/// Applies the adapter to `tokens: [frames·cells, d]`.
///
/// `audio` is `[frames·40, d_a]` and `mask` holds one gate value per token.
pub fn faa_apply<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &FaaParams,
    tokens: Var,
    audio: Var,
    mask: Var,
    frames: usize,
) -> Result<Var> {
    let (rows, _) = tape.value(tokens).dims2()?;
    if frames == 0 || rows % frames != 0 {
        return Err(Error::invalid_shape("faa", format!("{rows} tokens do not split into {frames} frames")));
    }
    let cells = rows / frames;
    let (audio_rows, _) = tape.value(audio).dims2()?;
    if audio_rows != frames * LATENT_AUDIO_TOKENS {
        return Err(Error::shape("faa", &[frames * LATENT_AUDIO_TOKENS], tape.shape(audio)));
    }
    if tape.value(mask).numel() != rows {
        return Err(Error::shape("faa", &[rows], tape.shape(mask)));
    }

    let w = &params.attn;
    let kv = params.adapter.forward(tape, store, audio)?;
    let q = w.q.forward(tape, store, tokens)?;
    let k = w.k.forward(tape, store, kv)?;
    let v = w.v.forward(tape, store, kv)?;
    let mut per_frame = Vec::with_capacity(frames);
    for f in 0..frames {
        let qf = tape.slice_rows(q, f * cells, cells)?;
        let kf = tape.slice_rows(k, f * LATENT_AUDIO_TOKENS, LATENT_AUDIO_TOKENS)?;
        let vf = tape.slice_rows(v, f * LATENT_AUDIO_TOKENS, LATENT_AUDIO_TOKENS)?;
        per_frame.push(attend(tape, qf, kf, vf, w.n_heads)?);
    }
    let joined = tape.concat_rows(&per_frame)?;
    let attended = w.out.forward(tape, store, joined)?;
    let gated = tape.mul_col(attended, mask)?;
    let alpha = tape.param(store, params.alpha)?;
    let scaled = tape.mul_scalar(gated, alpha)?;
    tape.add(tokens, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::cross_attention;

    struct Case {
        store: ParamStore<f64>,
        params: FaaParams,
        tokens: Tensor<f64>,
        audio: Tensor<f64>,
        mask: Tensor<f64>,
    }

    const FRAMES: usize = 3;
    const CELLS: usize = 4;
    const D: usize = 8;
    const DA: usize = 3;

    fn case(seed: u64) -> Case {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let params = FaaParams::new(&mut store, "faa", D, DA, 2, 0.7, &mut rng).unwrap();
        let mut mask = Tensor::from_fn(&[FRAMES * CELLS], |_| if rng.below(2) == 0 { 0.0 } else { 1.0 });
        mask.data_mut()[..CELLS].fill(1.0);
        Case {
            tokens: rng.normal_tensor(&[FRAMES * CELLS, D], 1.0),
            audio: rng.normal_tensor(&[FRAMES * LATENT_AUDIO_TOKENS, DA], 1.0),
            mask,
            store,
            params,
        }
    }

    fn run(c: &Case, audio: &Tensor<f64>, mask: &Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let t = tape.input(c.tokens.clone()).unwrap();
        let a = tape.input(audio.clone()).unwrap();
        let m = tape.input(mask.clone()).unwrap();
        let y = faa_apply(&mut tape, &c.store, &c.params, t, a, m, FRAMES).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn zero_gate_is_identity() {
        let mut c = case(1);
        c.store.set_value(c.params.alpha, Tensor::zeros(&[1])).unwrap();
        assert_eq!(run(&c, &c.audio, &c.mask), c.tokens);
    }

    #[test]
    fn closed_mask_cells_unchanged() {
        let c = case(2);
        let y = run(&c, &c.audio, &c.mask);
        for (r, &m) in c.mask.data().iter().enumerate() {
            let same = y.data()[r * D..(r + 1) * D] == c.tokens.data()[r * D..(r + 1) * D];
            assert_eq!(same, m == 0.0, "row {r}");
        }
    }

    #[test]
    fn audio_change_at_one_frame_stays_in_that_frame() {
        let c = case(3);
        let mut audio = c.audio.clone();
        let k = 1;
        for v in &mut audio.data_mut()[k * LATENT_AUDIO_TOKENS * DA..(k + 1) * LATENT_AUDIO_TOKENS * DA] {
            *v += 0.5;
        }
        let ones = Tensor::ones(&[FRAMES * CELLS]);
        let base = run(&c, &c.audio, &ones);
        let moved = run(&c, &audio, &ones);
        for r in 0..FRAMES * CELLS {
            let same = moved.data()[r * D..(r + 1) * D] == base.data()[r * D..(r + 1) * D];
            assert_eq!(same, r / CELLS != k, "row {r}");
        }
    }

    #[test]
    fn matches_per_frame_cross_attention() {
        let c = case(4);
        let y = run(&c, &c.audio, &c.mask);
        let alpha = c.store.value(c.params.alpha).data()[0];
        for f in 0..FRAMES {
            let mut tape = Tape::new();
            let q = tape
                .input(Tensor::new(vec![CELLS, D], c.tokens.data()[f * CELLS * D..(f + 1) * CELLS * D].to_vec()).unwrap())
                .unwrap();
            let a = tape
                .input(
                    Tensor::new(
                        vec![LATENT_AUDIO_TOKENS, DA],
                        c.audio.data()[f * LATENT_AUDIO_TOKENS * DA..(f + 1) * LATENT_AUDIO_TOKENS * DA].to_vec(),
                    )
                    .unwrap(),
                )
                .unwrap();
            let kv = c.params.adapter.forward(&mut tape, &c.store, a).unwrap();
            let o = cross_attention(&mut tape, &c.store, q, kv, &c.params.attn).unwrap();
            let o = tape.value(o);
            for i in 0..CELLS {
                let r = f * CELLS + i;
                let m = c.mask.data()[r];
                for j in 0..D {
                    let expect = c.tokens.data()[r * D + j] + alpha * o.data()[i * D + j] * m;
                    assert!((y.data()[r * D + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let c = case(5);
        let mut tape = Tape::new();
        let t = tape.input(c.tokens.clone()).unwrap();
        let a = tape.input(c.audio.clone()).unwrap();
        let m = tape.input(c.mask.clone()).unwrap();
        assert!(faa_apply(&mut tape, &c.store, &c.params, t, a, m, 5).is_err());
        assert!(faa_apply(&mut tape, &c.store, &c.params, t, a, m, 2).is_err());
        let short = tape.input(Tensor::zeros(&[3])).unwrap();
        assert!(faa_apply(&mut tape, &c.store, &c.params, t, a, short, FRAMES).is_err());
    }

    #[test]
    fn gradients_reach_gate_projections_and_audio() {
        let c = case(6);
        let mut tape = Tape::new();
        let t = tape.input(c.tokens.clone()).unwrap();
        let a = tape.input(c.audio.clone()).unwrap();
        let m = tape.input(Tensor::ones(&[FRAMES * CELLS])).unwrap();
        let y = faa_apply(&mut tape, &c.store, &c.params, t, a, m, FRAMES).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let nonzero = |t: &Tensor<f64>| t.data().iter().any(|&v| v != 0.0);
        assert!(nonzero(&g.wrt(a, &[FRAMES * LATENT_AUDIO_TOKENS, DA])));
        let mut store = c.store.clone();
        store.zero_grads();
        g.accumulate_into(&mut store, 1.0).unwrap();
        for id in [c.params.alpha, c.params.adapter.weight, c.params.attn.q.weight, c.params.attn.out.weight] {
            assert!(nonzero(store.get(id).grad.as_ref().unwrap()));
        }
    }
}
