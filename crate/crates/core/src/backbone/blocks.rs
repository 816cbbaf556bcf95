//! Transformer blocks with timestep modulation.

use std::rc::Rc;

use crate::audio::{faa_apply, FaaParams};
use crate::emotion::{aem_apply, AemParams};
use crate::error::Result;
use crate::numcore::{attend, AttentionWeights, Init, Linear, ParamId, ParamStore, RotationTable, Scalar, SeededRng, Tape, Tensor, Var};

/// Conditioning inputs shared by every block of one forward pass.
#[derive(Clone)]
pub(crate) struct BlockContext<T> {
    /// `silu(timestep embedding)`, `[1, d]`.
    pub vec: Var,
    /// Ones row used for `1 + scale`.
    pub ones: Var,
    /// Rotation table for the video stream followed by the text stream.
    pub rope: Rc<RotationTable<T>>,
    pub audio: Var,
    pub mask: Var,
    pub emotion: Option<Var>,
    /// Latent frames in the video stream, identity frame included.
    pub frames: usize,
    /// Rows of the video stream.
    pub video_rows: usize,
}

/// `LN(x)·(1 + scale) + shift`.
pub(crate) fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var, ones: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let s = tape.add(scale, ones)?;
    let n = tape.mul_row(n, s)?;
    tape.add_row(n, shift)
}

fn chunks<T: Scalar>(tape: &mut Tape<T>, m: Var, k: usize, d: usize) -> Result<Vec<Var>> {
    (0..k).map(|i| tape.slice_cols(m, i * d, d)).collect()
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, Init::FanIn, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, Init::FanIn, rng)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// One stream of a double block: modulation, attention projections, MLP.
#[derive(Clone, Debug)]
pub struct StreamWeights {
    /// `d → 6d`: shift, scale, gate for attention and for the MLP.
    pub modulation: Linear,
    pub attn: AttentionWeights,
    pub mlp: Mlp,
}

impl StreamWeights {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(StreamWeights {
            modulation: Linear::new(store, &format!("{name}.mod"), d, 6 * d, true, Init::FanIn, rng)?,
            attn: AttentionWeights::new(store, &format!("{name}.attn"), d, d, heads, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), d, hidden, rng)?,
        })
    }
}

/// Dual-stream block: video and text keep separate weights and attend jointly.
#[derive(Clone, Debug)]
pub struct DoubleBlock {
    pub video: StreamWeights,
    pub text: StreamWeights,
    pub faa: Option<FaaParams>,
    pub aem: Option<AemParams>,
    pub n_heads: usize,
}

/// Sizes shared by block constructors.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
    pub d_audio: usize,
    pub latent_channels: usize,
    pub alpha_init: f64,
}

impl DoubleBlock {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: BlockDims,
        with_faa: bool,
        with_aem: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let video = StreamWeights::new(store, &format!("{name}.video"), dims.d, dims.heads, dims.hidden, rng)?;
        let text = StreamWeights::new(store, &format!("{name}.text"), dims.d, dims.heads, dims.hidden, rng)?;
        let faa = if with_faa {
            Some(FaaParams::new(store, &format!("{name}.faa"), dims.d, dims.d_audio, dims.heads, dims.alpha_init, rng)?)
        } else {
            None
        };
        let aem = if with_aem {
            Some(AemParams::new(store, &format!("{name}.aem"), dims.latent_channels, dims.d, dims.heads, rng)?)
        } else {
            None
        };
        Ok(DoubleBlock {
            video,
            text,
            faa,
            aem,
            n_heads: dims.heads,
        })
    }

    /// Joint attention, then the audio adapter and emotion module on the
    /// video stream, then the MLPs.
    pub(crate) fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &BlockContext<T>,
        video: Var,
        text: Var,
    ) -> Result<(Var, Var)> {
        let d = self.video.attn.q.in_dim;
        let mv = self.video.modulation.forward(tape, store, ctx.vec)?;
        let mv = chunks(tape, mv, 6, d)?;
        let mt = self.text.modulation.forward(tape, store, ctx.vec)?;
        let mt = chunks(tape, mt, 6, d)?;

        let hv = modulate(tape, video, mv[0], mv[1], ctx.ones)?;
        let ht = modulate(tape, text, mt[0], mt[1], ctx.ones)?;
        let project = |tape: &mut Tape<T>, wv: &Linear, wt: &Linear| -> Result<Var> {
            let a = wv.forward(tape, store, hv)?;
            let b = wt.forward(tape, store, ht)?;
            tape.concat_rows(&[a, b])
        };
        let q = project(tape, &self.video.attn.q, &self.text.attn.q)?;
        let k = project(tape, &self.video.attn.k, &self.text.attn.k)?;
        let v = project(tape, &self.video.attn.v, &self.text.attn.v)?;
        let q = tape.rope(q, ctx.rope.clone())?;
        let k = tape.rope(k, ctx.rope.clone())?;
        let a = attend(tape, q, k, v, self.n_heads)?;
        let text_rows = tape.shape(text)[0];
        let av = tape.slice_rows(a, 0, ctx.video_rows)?;
        let at = tape.slice_rows(a, ctx.video_rows, text_rows)?;
        let av = self.video.attn.out.forward(tape, store, av)?;
        let at = self.text.attn.out.forward(tape, store, at)?;
        let av = tape.mul_row(av, mv[2])?;
        let at = tape.mul_row(at, mt[2])?;
        let mut video = tape.add(video, av)?;
        let mut text = tape.add(text, at)?;

        if let Some(faa) = &self.faa {
            video = faa_apply(tape, store, faa, video, ctx.audio, ctx.mask, ctx.frames)?;
        }
        if let (Some(aem), Some(e)) = (&self.aem, ctx.emotion) {
            video = aem_apply(tape, store, aem, video, e)?;
        }

        let hv = modulate(tape, video, mv[3], mv[4], ctx.ones)?;
        let hv = self.video.mlp.forward(tape, store, hv)?;
        let hv = tape.mul_row(hv, mv[5])?;
        video = tape.add(video, hv)?;
        let ht = modulate(tape, text, mt[3], mt[4], ctx.ones)?;
        let ht = self.text.mlp.forward(tape, store, ht)?;
        let ht = tape.mul_row(ht, mt[5])?;
        text = tape.add(text, ht)?;
        Ok((video, text))
    }
}

/// Merged-stream block with parallel attention and MLP branches.
#[derive(Clone, Debug)]
pub struct SingleBlock {
    /// `d → 3d`: shift, scale, gate.
    pub modulation: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub mlp_in: Linear,
    /// `(d + hidden) → d` over the concatenated branch outputs.
    pub out: Linear,
    pub faa: Option<FaaParams>,
    pub aem: Option<AemParams>,
    pub n_heads: usize,
}

impl SingleBlock {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: BlockDims,
        with_faa: bool,
        with_aem: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let d = dims.d;
        let lin = |store: &mut ParamStore<T>, n: &str, i: usize, o: usize, bias: bool, rng: &mut SeededRng| {
            Linear::new(store, &format!("{name}.{n}"), i, o, bias, Init::FanIn, rng)
        };
        let modulation = lin(store, "mod", d, 3 * d, true, rng)?;
        let q = lin(store, "q", d, d, false, rng)?;
        let k = lin(store, "k", d, d, false, rng)?;
        let v = lin(store, "v", d, d, false, rng)?;
        let mlp_in = lin(store, "mlp_in", d, dims.hidden, true, rng)?;
        let out = lin(store, "out", d + dims.hidden, d, true, rng)?;
        let faa = if with_faa {
            Some(FaaParams::new(store, &format!("{name}.faa"), d, dims.d_audio, dims.heads, dims.alpha_init, rng)?)
        } else {
            None
        };
        let aem = if with_aem {
            Some(AemParams::new(store, &format!("{name}.aem"), dims.latent_channels, d, dims.heads, rng)?)
        } else {
            None
        };
        Ok(SingleBlock {
            modulation,
            q,
            k,
            v,
            mlp_in,
            out,
            faa,
            aem,
            n_heads: dims.heads,
        })
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ctx: &BlockContext<T>, x: Var) -> Result<Var> {
        let d = self.q.in_dim;
        let m = self.modulation.forward(tape, store, ctx.vec)?;
        let m = chunks(tape, m, 3, d)?;
        let h = modulate(tape, x, m[0], m[1], ctx.ones)?;
        let q = self.q.forward(tape, store, h)?;
        let k = self.k.forward(tape, store, h)?;
        let v = self.v.forward(tape, store, h)?;
        let q = tape.rope(q, ctx.rope.clone())?;
        let k = tape.rope(k, ctx.rope.clone())?;
        let a = attend(tape, q, k, v, self.n_heads)?;
        let f = self.mlp_in.forward(tape, store, h)?;
        let f = tape.silu(f)?;
        let both = tape.concat_cols(&[a, f])?;
        let o = self.out.forward(tape, store, both)?;
        let o = tape.mul_row(o, m[2])?;
        let mut x = tape.add(x, o)?;

        if self.faa.is_some() || self.aem.is_some() {
            let rows = tape.shape(x)[0];
            let mut video = tape.slice_rows(x, 0, ctx.video_rows)?;
            let text = tape.slice_rows(x, ctx.video_rows, rows - ctx.video_rows)?;
            if let Some(faa) = &self.faa {
                video = faa_apply(tape, store, faa, video, ctx.audio, ctx.mask, ctx.frames)?;
            }
            if let (Some(aem), Some(e)) = (&self.aem, ctx.emotion) {
                video = aem_apply(tape, store, aem, video, e)?;
            }
            x = tape.concat_rows(&[video, text])?;
        }
        Ok(x)
    }
}

/// Modulated norm and the zero-initialized projection back to latent channels.
#[derive(Clone, Debug)]
pub struct FinalLayer {
    /// `d → 2d`: shift, scale.
    pub modulation: Linear,
    pub proj: Linear,
}

impl FinalLayer {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, channels: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(FinalLayer {
            modulation: Linear::new(store, &format!("{name}.mod"), d, 2 * d, true, Init::FanIn, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, channels, true, Init::Zeros, rng)?,
        })
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ctx: &BlockContext<T>, x: Var) -> Result<Var> {
        let d = self.proj.in_dim;
        let m = self.modulation.forward(tape, store, ctx.vec)?;
        let m = chunks(tape, m, 2, d)?;
        let h = modulate(tape, x, m[0], m[1], ctx.ones)?;
        self.proj.forward(tape, store, h)
    }
}

/// Sinusoidal features of `t` through `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct TimestepEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
}

impl TimestepEmbedding {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, freq_dim: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(TimestepEmbedding {
            fc1: Linear::new(store, &format!("{name}.fc1"), freq_dim, d, true, Init::FanIn, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d, d, true, Init::FanIn, rng)?,
            freq_dim,
        })
    }

    /// `[cos(1000·t·ω_k)…, sin(1000·t·ω_k)…]` with `ω_k = 10000^(−k/half)`.
    pub fn features<T: Scalar>(&self, t: f64) -> Tensor<T> {
        let half = self.freq_dim / 2;
        let mut out = Vec::with_capacity(self.freq_dim);
        let angles: Vec<f64> = (0..half)
            .map(|k| 1000.0 * t * (-(10_000f64).ln() * k as f64 / half as f64).exp())
            .collect();
        out.extend(angles.iter().map(|a| T::from_f64(a.cos())));
        out.extend(angles.iter().map(|a| T::from_f64(a.sin())));
        out.resize(self.freq_dim, T::zero());
        Tensor::new(vec![1, self.freq_dim], out).expect("layout")
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, t: f64) -> Result<Var> {
        let f = tape.input(self.features(t))?;
        let h = self.fc1.forward(tape, store, f)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, store, h)
    }
}

/// Learned text embedding table, `[vocab, d]`.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub table: ParamId,
    pub vocab: usize,
}

impl TextEmbedding {
    pub(crate) fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, vocab: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        let table = store.add(format!("{name}.table"), rng.normal_tensor(&[vocab, d], 1.0))?;
        Ok(TextEmbedding { table, vocab })
    }

    pub(crate) fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let t = tape.param(store, self.table)?;
        tape.gather_rows(t, Rc::new(ids.to_vec()))
    }
}
