//! Dual-stream / single-stream velocity network.
//!
//! The video stream holds the reference-image tokens as its first latent
//! frame (the identity frame) followed by the noisy video frames. A short
//! learned text sequence forms the second stream of the double blocks; both
//! streams merge for the single blocks. Only the video frames are projected
//! back to latent channels.

mod blocks;

use serde::{Deserialize, Serialize};

pub use blocks::{DoubleBlock, FinalLayer, Mlp, SingleBlock, StreamWeights, TextEmbedding, TimestepEmbedding};

use crate::audio::{AlignedAudio, AUDIO_TOKENS_PER_FRAME};
use crate::emotion::{placement_check, EmotionRef, PlacementReport};
use crate::error::{Error, Result};
use crate::injection::{CharacterInjection, Mechanism};
use crate::latentio::{Entry, FaceMaskGrid, ImageLatent, TensorFile, VideoLatent};
use crate::numcore::{ParamStore, Scalar, SeededRng, Tape, Tensor, Var};
use crate::rope::{image_latent_positions, video_positions, PositionTriple, RotaryTable};
use blocks::{BlockContext, BlockDims};

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub latent_width: usize,
    pub latent_height: usize,
    pub latent_channels: usize,
    /// Latent frames per model call, identity frame included.
    pub segment_frames: usize,
    pub text_vocab: usize,
    pub text_len: usize,
    pub d_audio: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub mechanism: Mechanism,
    /// Initial audio gate weight.
    pub audio_gate_init: f64,
    #[serde(default = "default_true")]
    pub faa_in_double: bool,
    #[serde(default)]
    pub faa_in_single: bool,
    #[serde(default = "default_true")]
    pub aem_in_double: bool,
    #[serde(default)]
    pub aem_in_single: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_double: 4,
            n_single: 4,
            latent_width: 4,
            latent_height: 4,
            latent_channels: 64,
            segment_frames: 9,
            text_vocab: 16,
            text_len: 4,
            d_audio: 16,
            mlp_ratio: 4,
            rope_base: crate::rope::DEFAULT_BASE,
            mechanism: Mechanism::TokenAdd,
            audio_gate_init: 1.0,
            faa_in_double: true,
            faa_in_single: false,
            aem_in_double: true,
            aem_in_single: false,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    pub fn cells(&self) -> usize {
        self.latent_width * self.latent_height
    }

    /// Video latent frames per model call.
    pub fn video_frames(&self) -> usize {
        self.segment_frames - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_head() < 6 || !self.d_head().is_multiple_of(2) {
            return bad(format!("head width {} must be even and at least 6", self.d_head()));
        }
        if self.n_double == 0 {
            return bad("n_double must be at least 1".into());
        }
        if self.segment_frames < 2 {
            return bad("segment_frames must include the identity frame and one video frame".into());
        }
        if [self.latent_width, self.latent_height, self.latent_channels, self.text_vocab, self.text_len, self.d_audio, self.mlp_ratio]
            .contains(&0)
        {
            return bad("latent extents, text sizes, d_audio and mlp_ratio must be positive".into());
        }
        if !self.audio_gate_init.is_finite() {
            return bad("audio_gate_init must be finite".into());
        }
        RotaryTable::new(self.d_head(), self.rope_base)?;
        Ok(())
    }

    /// Analytic parameter count.
    ///
    /// With `lin(i, o) = i·o + o`, `d` = width, `H` = MLP hidden width,
    /// `c` = latent channels, `a` = audio width:
    ///
    /// - injection: (a) `lin(c,d)`; (b) `lin(2c,d) + lin(c,d)`; (c) `2·lin(c,d) + 2·lin(d,d)`
    /// - timestep: `lin(d,d) + lin(d,d)`; text: `vocab·d`
    /// - double block: `2·(lin(d,6d) + 4d² + lin(d,H) + lin(H,d))`, plus
    ///   `1 + lin(a,d) + 4d²` for an audio adapter and `1 + lin(c,d) + 4d²`
    ///   for an emotion module
    /// - single block: `lin(d,3d) + 3d² + lin(d,H) + lin(d+H,d)` plus the
    ///   same optional modules
    /// - final layer: `lin(d,2d) + lin(d,c)`
    pub fn param_census(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let (d, h, c, a) = (self.d_model, self.hidden(), self.latent_channels, self.d_audio);
        let injection = match self.mechanism {
            Mechanism::TokenConcat => lin(c, d),
            Mechanism::TokenChannel => lin(2 * c, d) + lin(c, d),
            Mechanism::TokenAdd => 2 * lin(c, d) + 2 * lin(d, d),
        };
        let faa = 1 + lin(a, d) + 4 * d * d;
        let aem = 1 + lin(c, d) + 4 * d * d;
        let stream = lin(d, 6 * d) + 4 * d * d + lin(d, h) + lin(h, d);
        let double = 2 * stream
            + if self.faa_in_double { faa } else { 0 }
            + if self.aem_in_double { aem } else { 0 };
        let single = lin(d, 3 * d)
            + 3 * d * d
            + lin(d, h)
            + lin(d + h, d)
            + if self.faa_in_single { faa } else { 0 }
            + if self.aem_in_single { aem } else { 0 };
        injection
            + 2 * lin(d, d)
            + self.text_vocab * d
            + self.n_double * double
            + self.n_single * single
            + lin(d, 2 * d)
            + lin(d, c)
    }

    /// Block placement of the conditioning modules, for checkpoint metadata.
    pub fn placements(&self) -> Placements {
        let blocks = |flag: bool, n: usize, kind: &str| -> Vec<String> {
            if flag {
                (0..n).map(|i| format!("{kind}.{i}")).collect()
            } else {
                Vec::new()
            }
        };
        let mut faa = blocks(self.faa_in_double, self.n_double, "double");
        faa.extend(blocks(self.faa_in_single, self.n_single, "single"));
        let mut aem = blocks(self.aem_in_double, self.n_double, "double");
        aem.extend(blocks(self.aem_in_single, self.n_single, "single"));
        Placements {
            faa,
            aem,
            order: "joint attention, audio adapter, emotion module, mlp".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placements {
    pub faa: Vec<String>,
    pub aem: Vec<String>,
    pub order: String,
}

/// Everything the network is conditioned on besides the noisy latent.
#[derive(Clone, Debug)]
pub struct ConditioningBundle {
    pub reference: ImageLatent,
    /// `n + 1` frames, identity frame first.
    pub audio: AlignedAudio,
    /// `n + 1` frames, identity frame first.
    pub mask: FaceMaskGrid,
    pub emotion: Option<EmotionRef>,
    pub text: Vec<usize>,
    pub t: f64,
}

impl ConditioningBundle {
    /// Same conditioning restricted to the listed video frames.
    pub fn select_video_frames(&self, frames: &[usize]) -> ConditioningBundle {
        ConditioningBundle {
            audio: self.audio.select_video_frames(frames),
            mask: self.mask.select_video_frames(frames),
            ..self.clone()
        }
    }

    pub fn with_t(&self, t: f64) -> ConditioningBundle {
        ConditioningBundle { t, ..self.clone() }
    }
}

/// Parameter handles of the network.
#[derive(Clone, Debug)]
pub struct Network {
    pub injection: CharacterInjection,
    pub time: TimestepEmbedding,
    pub text: TextEmbedding,
    pub double: Vec<DoubleBlock>,
    pub single: Vec<SingleBlock>,
    pub final_layer: FinalLayer,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub net: Network,
    pub rope: RotaryTable,
}

/// Builds and initializes a model; identical seeds give identical parameters.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let root = SeededRng::new(seed);
    let d = cfg.d_model;
    let dims = BlockDims {
        d,
        heads: cfg.n_heads,
        hidden: cfg.hidden(),
        d_audio: cfg.d_audio,
        latent_channels: cfg.latent_channels,
        alpha_init: cfg.audio_gate_init,
    };
    let injection = CharacterInjection::build(&mut store, "inject", cfg.mechanism, cfg.latent_channels, d, &mut root.fork(0))?;
    let time = TimestepEmbedding::new(&mut store, "time", d, d, &mut root.fork(1))?;
    let text = TextEmbedding::new(&mut store, "text", cfg.text_vocab, d, &mut root.fork(2))?;
    let double = (0..cfg.n_double)
        .map(|i| {
            DoubleBlock::new(
                &mut store,
                &format!("double.{i}"),
                dims,
                cfg.faa_in_double,
                cfg.aem_in_double,
                &mut root.fork(100 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let single = (0..cfg.n_single)
        .map(|i| {
            SingleBlock::new(
                &mut store,
                &format!("single.{i}"),
                dims,
                cfg.faa_in_single,
                cfg.aem_in_single,
                &mut root.fork(200 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let final_layer = FinalLayer::new(&mut store, "final", d, cfg.latent_channels, &mut root.fork(3))?;
    Ok(Model {
        rope: RotaryTable::new(cfg.d_head(), cfg.rope_base)?,
        cfg: cfg.clone(),
        store,
        net: Network {
            injection,
            time,
            text,
            double,
            single,
            final_layer,
        },
    })
}

impl<T: Scalar> Model<T> {
    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Emotion-module placement by parameter name.
    pub fn placement_check(&self) -> Result<PlacementReport> {
        placement_check(&self.store, self.cfg.n_double, self.cfg.n_single)
    }

    fn check_inputs(&self, z: &VideoLatent, cond: &ConditioningBundle) -> Result<()> {
        let cfg = &self.cfg;
        let grid = [cfg.latent_height, cfg.latent_width, cfg.latent_channels];
        if [z.height, z.width, z.channels] != grid {
            return Err(Error::shape("forward", &[z.height, z.width, z.channels], &grid));
        }
        if z.frames == 0 {
            return Err(Error::Invalid("latent has no video frames".into()));
        }
        let r = &cond.reference;
        if [r.height, r.width, r.channels] != grid {
            return Err(Error::shape("forward.reference", &[r.height, r.width, r.channels], &grid));
        }
        if cond.audio.frames != z.frames + 1 || cond.audio.d_audio != cfg.d_audio {
            return Err(Error::shape(
                "forward.audio",
                cond.audio.data.shape(),
                &[z.frames + 1, 4 * AUDIO_TOKENS_PER_FRAME, cfg.d_audio],
            ));
        }
        let m = &cond.mask;
        if [m.frames, m.height, m.width] != [z.frames + 1, cfg.latent_height, cfg.latent_width] {
            return Err(Error::shape(
                "forward.mask",
                &[m.frames, m.height, m.width],
                &[z.frames + 1, cfg.latent_height, cfg.latent_width],
            ));
        }
        if let Some(e) = &cond.emotion {
            if [e.height, e.width, e.channels] != grid {
                return Err(Error::shape("forward.emotion", &[e.height, e.width, e.channels], &grid));
            }
        }
        if cond.text.is_empty() || cond.text.iter().any(|&id| id >= cfg.text_vocab) {
            return Err(Error::Invalid(format!("text ids {:?} outside vocabulary {}", cond.text, cfg.text_vocab)));
        }
        if !(0.0..=1.0).contains(&cond.t) {
            return Err(Error::Invalid(format!("timestep {} outside [0, 1]", cond.t)));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; returns the velocity `[n·w·h, c]`.
    pub fn forward(&self, tape: &mut Tape<T>, z: &VideoLatent, cond: &ConditioningBundle) -> Result<Var> {
        self.check_inputs(z, cond)?;
        let (store, net) = (&self.store, &self.net);
        let cells = self.cfg.cells();
        let frames = z.frames + 1;
        let video_rows = frames * cells;

        let inj = net.injection.inject(tape, store, &cond.reference, z)?;
        let mut video = tape.concat_rows(&[inj.reference, inj.video])?;
        let mut text = net.text.forward(tape, store, &cond.text)?;

        let mut positions = image_latent_positions(z.width, z.height);
        positions.extend(video_positions(z.frames, z.width, z.height));
        positions.extend(std::iter::repeat_n(PositionTriple::ORIGIN, cond.text.len()));

        let vec = net.time.forward(tape, store, cond.t)?;
        let ctx = BlockContext {
            vec: tape.silu(vec)?,
            ones: tape.input(Tensor::ones(&[1, self.cfg.d_model]))?,
            rope: self.rope.rotation_table(&positions),
            audio: tape.input(cond.audio.tokens().cast())?,
            mask: tape.input(cond.mask.data.cast::<T>().reshape(&[video_rows])?)?,
            emotion: match &cond.emotion {
                Some(e) => Some(tape.input(e.tokens.cast())?),
                None => None,
            },
            frames,
            video_rows,
        };

        for block in &net.double {
            (video, text) = block.forward(tape, store, &ctx, video, text)?;
        }
        let mut x = tape.concat_rows(&[video, text])?;
        for block in &net.single {
            x = block.forward(tape, store, &ctx, x)?;
        }
        let frames_out = tape.slice_rows(x, cells, z.frames * cells)?;
        net.final_layer.forward(tape, store, &ctx, frames_out)
    }

    /// Eager velocity prediction.
    pub fn velocity(&self, z: &VideoLatent, cond: &ConditioningBundle) -> Result<VideoLatent> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, z, cond)?;
        let data = tape.value(v).cast::<f32>().reshape(&[z.frames, z.height, z.width, z.channels])?;
        VideoLatent::new(z.frames, z.width, z.height, z.channels, data)
    }

    /// Parameters (as f32) plus a JSON `meta` entry.
    pub fn to_file<M: Serialize>(&self, meta: &M) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        for (_, p) in self.store.iter() {
            f.insert(format!("param/{}", p.name), Entry::F32(p.value.cast()));
        }
        f.insert_json("meta", meta)?;
        Ok(f)
    }

    /// Rebuilds a model from `cfg` and overwrites every parameter from `file`.
    pub fn from_file(cfg: &ModelConfig, file: &TensorFile) -> Result<Self> {
        let mut model = build_model::<T>(cfg, 0)?;
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = file.f32(&format!("param/{name}"))?;
            model.store.set_value(id, t.cast())?;
        }
        let stored = file.names().filter(|n| n.starts_with("param/")).count();
        if stored != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {stored} parameters, model has {}",
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
            rope: self.rope,
        }
    }
}
