//! Character image injection.
//!
//! Three ways of conditioning the video tokens on a reference image:
//!
//! - **(a) token concat**: one tokenizer for both video and reference; the
//!   reference tokens are appended along the token axis.
//! - **(b) token channel**: the reference is repeated over time and stacked
//!   onto the video channels before tokenizer 1; tokenizer 2 produces the
//!   appended reference tokens.
//! - **(c) token add**: tokenizer 1 on the repeated reference, passed
//!   through a small fully connected projection and added to tokenizer 2's
//!   video tokens; tokenizer 2 also produces the appended reference tokens.
//!
//! All three produce `(n + 1)·w·h` tokens with identical positions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentio::{ImageLatent, VideoLatent};
use crate::numcore::{Init, Linear, ParamStore, Scalar, SeededRng, Tape, Tensor, Var};
use crate::rope::{image_latent_positions, video_positions, PositionTriple};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "a")]
    TokenConcat,
    #[serde(rename = "b")]
    TokenChannel,
    #[serde(rename = "c")]
    #[default]
    TokenAdd,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::TokenConcat, Mechanism::TokenChannel, Mechanism::TokenAdd];

    pub fn key(self) -> &'static str {
        match self {
            Mechanism::TokenConcat => "a",
            Mechanism::TokenChannel => "b",
            Mechanism::TokenAdd => "c",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Mechanism::TokenConcat),
            "b" => Ok(Mechanism::TokenChannel),
            "c" => Ok(Mechanism::TokenAdd),
            other => Err(Error::Config(format!("injection.mechanism must be a, b or c, got `{other}`"))),
        }
    }
}

/// Per-cell linear map from latent channels to model width.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub proj: Linear,
}

impl Tokenizer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        d_model: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Tokenizer {
            proj: Linear::new(store, name, in_channels, d_model, true, Init::FanIn, rng)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.proj.in_dim
    }

    /// `tokens` is `[cells, in_channels]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        let (_, c) = tape.value(tokens).dims2()?;
        if c != self.in_channels() {
            return Err(Error::shape("tokenize", tape.shape(tokens), &[0, self.in_channels()]));
        }
        self.proj.forward(tape, store, tokens)
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params()
    }
}

/// Creates tokenizer 2 as an exact copy of tokenizer 1's parameters.
///
/// When tokenizer 1 reads channel-stacked input (`2c` channels, mechanism
/// b), tokenizer 2 copies the first `c` weight rows.
pub fn init_tokenizer2_from_tokenizer1<T: Scalar>(
    store: &mut ParamStore<T>,
    t1: &Tokenizer,
    name: &str,
    in_channels: usize,
) -> Result<Tokenizer> {
    let w1 = store.value(t1.proj.weight).clone();
    let (rows, d) = w1.dims2()?;
    if in_channels == 0 || in_channels > rows {
        return Err(Error::Config(format!(
            "tokenizer 2 with {in_channels} input channels cannot copy a {rows}-channel tokenizer"
        )));
    }
    let weight = Tensor::new(vec![in_channels, d], w1.data()[..in_channels * d].to_vec())?;
    let weight = store.add(format!("{name}.weight"), weight)?;
    let bias = match t1.proj.bias {
        Some(b) => {
            let bv = store.value(b).clone();
            Some(store.add(format!("{name}.bias"), bv)?)
        }
        None => None,
    };
    Ok(Tokenizer {
        proj: Linear {
            weight,
            bias,
            in_dim: in_channels,
            out_dim: d,
        },
    })
}

/// Makes the reference-channel half of a `2c`-input tokenizer equal to its
/// video-channel half.
pub fn mirror_reference_channels<T: Scalar>(store: &mut ParamStore<T>, t1: &Tokenizer) -> Result<()> {
    let mut w = store.value(t1.proj.weight).clone();
    let (rows, d) = w.dims2()?;
    if rows % 2 != 0 {
        return Err(Error::Config("channel-stacked tokenizer needs an even input width".into()));
    }
    let half = rows / 2 * d;
    let (video, reference) = w.data_mut().split_at_mut(half);
    reference.copy_from_slice(video);
    store.set_value(t1.proj.weight, w)
}

/// Two fully connected layers with SiLU, used by mechanism (c).
#[derive(Clone, Debug)]
pub struct Projection {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projection {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_model: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Projection {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_model, d_model, true, Init::FanIn, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_model, d_model, true, Init::FanIn, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.silu(h)?;
        self.fc2.forward(tape, store, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentLabel {
    Video,
    RefImage,
}

/// Model-width tokens with positions and segment labels; reference tokens last.
#[derive(Clone, Debug)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub positions: Vec<PositionTriple>,
    pub labels: Vec<SegmentLabel>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn ref_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == SegmentLabel::RefImage).count()
    }
}

/// Video and reference token blocks on a tape.
#[derive(Clone, Copy, Debug)]
pub struct InjectedTokens {
    /// `[n·w·h, d]` in `(frame, height, width)` order.
    pub video: Var,
    /// `[w·h, d]` in `(height, width)` order.
    pub reference: Var,
}

/// Configured injection module: mechanism plus its tokenizers.
#[derive(Clone, Debug)]
pub struct CharacterInjection {
    pub mechanism: Mechanism,
    pub tokenizer1: Tokenizer,
    pub tokenizer2: Option<Tokenizer>,
    pub projection: Option<Projection>,
}

impl CharacterInjection {
    /// Validates the mechanism/parts combination.
    pub fn from_parts(
        mechanism: Mechanism,
        tokenizer1: Tokenizer,
        tokenizer2: Option<Tokenizer>,
        projection: Option<Projection>,
    ) -> Result<Self> {
        match (mechanism, tokenizer2.is_some(), projection.is_some()) {
            (Mechanism::TokenConcat, false, false)
            | (Mechanism::TokenChannel, true, false)
            | (Mechanism::TokenAdd, true, true) => Ok(CharacterInjection {
                mechanism,
                tokenizer1,
                tokenizer2,
                projection,
            }),
            (m, t2, p) => Err(Error::Config(format!(
                "mechanism {m} with tokenizer2={t2}, projection={p} is not a valid combination"
            ))),
        }
    }

    /// Builds all parts for `mechanism`, with tokenizer 2 copied from tokenizer 1.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        mechanism: Mechanism,
        latent_channels: usize,
        d_model: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let t1_in = match mechanism {
            Mechanism::TokenChannel => 2 * latent_channels,
            _ => latent_channels,
        };
        let t1 = Tokenizer::new(store, &format!("{name}.tokenizer1"), t1_in, d_model, rng)?;
        let (t2, proj) = match mechanism {
            Mechanism::TokenConcat => (None, None),
            Mechanism::TokenChannel => {
                mirror_reference_channels(store, &t1)?;
                let t2 = init_tokenizer2_from_tokenizer1(store, &t1, &format!("{name}.tokenizer2"), latent_channels)?;
                (Some(t2), None)
            }
            Mechanism::TokenAdd => {
                let t2 = init_tokenizer2_from_tokenizer1(store, &t1, &format!("{name}.tokenizer2"), latent_channels)?;
                let p = Projection::new(store, &format!("{name}.projection"), d_model, rng)?;
                (Some(t2), Some(p))
            }
        };
        Self::from_parts(mechanism, t1, t2, proj)
    }

    pub fn num_params(&self) -> usize {
        self.tokenizer1.num_params()
            + self.tokenizer2.as_ref().map_or(0, Tokenizer::num_params)
            + self.projection.as_ref().map_or(0, Projection::num_params)
    }

    pub fn inject<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        reference: &ImageLatent,
        video: &VideoLatent,
    ) -> Result<InjectedTokens> {
        match self.mechanism {
            Mechanism::TokenConcat => inject_a(tape, store, reference, video, &self.tokenizer1),
            Mechanism::TokenChannel => inject_b(
                tape,
                store,
                reference,
                video,
                &self.tokenizer1,
                self.tokenizer2.as_ref().expect("validated"),
            ),
            Mechanism::TokenAdd => inject_c(
                tape,
                store,
                reference,
                video,
                &self.tokenizer1,
                self.tokenizer2.as_ref().expect("validated"),
                self.projection.as_ref().expect("validated"),
            ),
        }
    }

    /// Eager evaluation returning the labelled token sequence.
    pub fn token_sequence<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        reference: &ImageLatent,
        video: &VideoLatent,
    ) -> Result<TokenSequence<T>> {
        let mut tape = Tape::new();
        let inj = self.inject(&mut tape, store, reference, video)?;
        assemble(&mut tape, inj, video)
    }
}

fn check_extents(reference: &ImageLatent, video: &VideoLatent) -> Result<()> {
    if video.frames == 0 {
        return Err(Error::Invalid("video latent has no frames".into()));
    }
    if reference.width != video.width || reference.height != video.height || reference.channels != video.channels {
        return Err(Error::shape(
            "inject",
            &[reference.height, reference.width, reference.channels],
            &[video.height, video.width, video.channels],
        ));
    }
    Ok(())
}

fn latent_input<T: Scalar>(tape: &mut Tape<T>, t: Tensor<f32>) -> Result<Var> {
    tape.input(t.cast())
}

/// Shared tokenizer for video and reference, token-axis concatenation.
pub fn inject_a<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    reference: &ImageLatent,
    video: &VideoLatent,
    tokenizer: &Tokenizer,
) -> Result<InjectedTokens> {
    check_extents(reference, video)?;
    let v = latent_input(tape, video.tokens())?;
    let r = latent_input(tape, reference.tokens())?;
    Ok(InjectedTokens {
        video: tokenizer.forward(tape, store, v)?,
        reference: tokenizer.forward(tape, store, r)?,
    })
}

/// Channel-stacked video ‖ repeated reference through tokenizer 1,
/// reference alone through tokenizer 2.
pub fn inject_b<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    reference: &ImageLatent,
    video: &VideoLatent,
    tokenizer1: &Tokenizer,
    tokenizer2: &Tokenizer,
) -> Result<InjectedTokens> {
    check_extents(reference, video)?;
    if tokenizer1.in_channels() != 2 * video.channels {
        return Err(Error::shape(
            "inject_b",
            &[tokenizer1.in_channels()],
            &[2 * video.channels],
        ));
    }
    let v = latent_input(tape, video.tokens())?;
    let rep = latent_input(tape, reference.repeat(video.frames).tokens())?;
    let stacked = tape.concat_cols(&[v, rep])?;
    let r = latent_input(tape, reference.tokens())?;
    Ok(InjectedTokens {
        video: tokenizer1.forward(tape, store, stacked)?,
        reference: tokenizer2.forward(tape, store, r)?,
    })
}

/// `Projection(K₁(repeated ref)) + K₂(noise latent)`, reference tokens from K₂.
pub fn inject_c<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    reference: &ImageLatent,
    noise_latent: &VideoLatent,
    tokenizer1: &Tokenizer,
    tokenizer2: &Tokenizer,
    projection: &Projection,
) -> Result<InjectedTokens> {
    check_extents(reference, noise_latent)?;
    let rep = latent_input(tape, reference.repeat(noise_latent.frames).tokens())?;
    let rep_tokens = tokenizer1.forward(tape, store, rep)?;
    let added = projection.forward(tape, store, rep_tokens)?;
    let z = latent_input(tape, noise_latent.tokens())?;
    let noise_tokens = tokenizer2.forward(tape, store, z)?;
    let r = latent_input(tape, reference.tokens())?;
    Ok(InjectedTokens {
        video: tape.add(added, noise_tokens)?,
        reference: tokenizer2.forward(tape, store, r)?,
    })
}

/// Tokenizes a bare latent with one tokenizer (no injection).
pub fn tokenize<T: Scalar>(store: &ParamStore<T>, tokens: Tensor<f32>, tokenizer: &Tokenizer) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = latent_input(&mut tape, tokens)?;
    let y = tokenizer.forward(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}

/// Concatenates video then reference tokens with their positions.
pub fn assemble<T: Scalar>(tape: &mut Tape<T>, inj: InjectedTokens, video: &VideoLatent) -> Result<TokenSequence<T>> {
    let all = tape.concat_rows(&[inj.video, inj.reference])?;
    let mut positions = video_positions(video.frames, video.width, video.height);
    let mut labels = vec![SegmentLabel::Video; positions.len()];
    positions.extend(image_latent_positions(video.width, video.height));
    labels.resize(positions.len(), SegmentLabel::RefImage);
    Ok(TokenSequence {
        tokens: tape.value(all).clone(),
        positions,
        labels,
    })
}
