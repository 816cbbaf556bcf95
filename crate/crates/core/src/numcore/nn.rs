//! Layers built from tape primitives.

use super::params::{ParamId, ParamStore};
use super::rng::SeededRng;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
    /// Uniform in `±bound`.
    Uniform(f64),
    Zeros,
}

/// `y = x W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let w = match init {
            Init::FanIn => rng.uniform_tensor(&[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt()),
            Init::Uniform(b) => rng.uniform_tensor(&[in_dim, out_dim], b),
            Init::Zeros => Tensor::zeros(&[in_dim, out_dim]),
        };
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Query/key/value/output projections of one attention layer (no biases).
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl AttentionWeights {
    /// Queries come from `d_model` tokens, keys/values from `d_kv` tokens.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_kv: usize,
        n_heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        Ok(AttentionWeights {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, false, Init::FanIn, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_model, false, Init::FanIn, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_model, false, Init::FanIn, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, false, Init::FanIn, rng)?,
            n_heads,
        })
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.out.num_params()
    }
}

/// Multi-head scaled dot-product attention on already projected tokens.
///
/// `q: Tq×d`, `k, v: Tk×d`; heads split the channel axis evenly.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
    let (_, d) = tape.value(q).dims2()?;
    let (tk, dk) = tape.value(k).dims2()?;
    let (tv, dv) = tape.value(v).dims2()?;
    if dk != d || dv != d || tk != tv {
        return Err(Error::shape("attend", tape.shape(q), tape.shape(k)));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::invalid_shape("attend", format!("{d} channels, {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh, false, true)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax(scores)?;
        heads.push(tape.matmul(p, vh)?);
    }
    if heads.len() == 1 {
        Ok(heads[0])
    } else {
        tape.concat_cols(&heads)
    }
}

/// `softmax(Q Kᵀ/√d_head) V` followed by the output projection.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    q_tokens: Var,
    kv_tokens: Var,
    w: &AttentionWeights,
) -> Result<Var> {
    let (_, dq) = tape.value(q_tokens).dims2()?;
    let (_, dkv) = tape.value(kv_tokens).dims2()?;
    if dq != w.q.in_dim || dkv != w.k.in_dim {
        return Err(Error::shape("cross_attention", tape.shape(q_tokens), tape.shape(kv_tokens)));
    }
    let q = w.q.forward(tape, store, q_tokens)?;
    let k = w.k.forward(tape, store, kv_tokens)?;
    let v = w.v.forward(tape, store, kv_tokens)?;
    let a = attend(tape, q, k, v, w.n_heads)?;
    w.out.forward(tape, store, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_key_example_matches_scalar_oracle() {
        let mut tape = Tape::<f64>::new();
        let q = tape.input(Tensor::from_rows(&[&[1.0, 0.0]])).unwrap();
        let k = tape.input(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let v = tape.input(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]])).unwrap();
        let out = attend(&mut tape, q, k, v, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let p0 = s.exp() / (s.exp() + 1.0);
        let got = tape.value(out).data();
        assert!((got[0] - p0).abs() < 1e-12);
        assert!((got[1] - 2.0 * (1.0 - p0)).abs() < 1e-12);
        assert!((got[0] - 0.6698).abs() < 1e-4 && (got[1] - 0.6604).abs() < 1e-4);
    }

    #[test]
    fn single_key_is_a_copy_through_output_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(9);
        let w = AttentionWeights::new(&mut store, "a", 3, 3, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[&[0.3, -1.0, 2.0]])).unwrap();
        let out = cross_attention(&mut tape, &store, x, x, &w).unwrap();
        // output = (x Wv) Wout
        let xv = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]);
        let expect = xv
            .matmul(store.value(w.v.weight))
            .unwrap()
            .matmul(store.value(w.out.weight))
            .unwrap();
        assert!(tape.value(out).max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn equal_values_give_that_value_for_any_query() {
        let mut rng = SeededRng::new(3);
        for _ in 0..5 {
            let mut tape = Tape::<f64>::new();
            let q = tape.input(rng.normal_tensor(&[3, 2], 2.0)).unwrap();
            let k = tape.input(rng.normal_tensor(&[2, 2], 1.0)).unwrap();
            let v = tape.input(Tensor::from_rows(&[&[0.5, -1.5], &[0.5, -1.5]])).unwrap();
            let out = attend(&mut tape, q, k, v, 1).unwrap();
            for row in tape.value(out).data().chunks(2) {
                assert!((row[0] - 0.5).abs() < 1e-12 && (row[1] + 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(0);
        let w = AttentionWeights::new(&mut store, "a", 4, 4, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        let kv = tape.input(Tensor::zeros(&[2, 4])).unwrap();
        assert!(cross_attention(&mut tape, &store, q, kv, &w).is_err());
        assert!(AttentionWeights::new(&mut store, "b", 5, 5, 2, &mut rng).is_err());
    }
}
