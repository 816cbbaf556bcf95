//! 3D rotary positions over (time, width, height).
//!
//! Head channels are split into three contiguous groups of rotation pairs.
//! The reference image sits at time −1 and is shifted by the latent extents
//! in both spatial axes, so its positions never coincide with video ones.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::rotate;
use crate::numcore::{RotationTable, Scalar, Tensor};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Position `(l, i, j)`: frame, width index, height index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PositionTriple {
    pub time: i64,
    pub width: i64,
    pub height: i64,
}

impl PositionTriple {
    pub const ORIGIN: PositionTriple = PositionTriple::new(0, 0, 0);

    pub const fn new(time: i64, width: i64, height: i64) -> Self {
        PositionTriple { time, width, height }
    }

    pub fn shifted(self, d: PositionTriple) -> Self {
        PositionTriple::new(self.time + d.time, self.width + d.width, self.height + d.height)
    }
}

/// Channel split of one attention head across the three axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotaryTable {
    pub d_head: usize,
    pub d_time: usize,
    pub d_width: usize,
    pub d_height: usize,
    pub base: f64,
}

impl RotaryTable {
    /// Even split with `d_time ≥ d_width = d_height`, all components even.
    pub fn new(d_head: usize, base: f64) -> Result<Self> {
        let spatial = (d_head / 3) & !1;
        Self::with_split(d_head - 2 * spatial, spatial, spatial, base)
    }

    pub fn with_split(d_time: usize, d_width: usize, d_height: usize, base: f64) -> Result<Self> {
        let d_head = d_time + d_width + d_height;
        if d_head == 0 || [d_time, d_width, d_height].iter().any(|d| d % 2 != 0) {
            return Err(Error::Config(format!(
                "rotary split ({d_time}, {d_width}, {d_height}) must be even and non-empty"
            )));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("rotary base {base} must exceed 1")));
        }
        Ok(RotaryTable {
            d_head,
            d_time,
            d_width,
            d_height,
            base,
        })
    }

    pub fn pairs(&self) -> usize {
        self.d_head / 2
    }

    /// Rotation angle of every channel pair for position `p`.
    pub fn angles(&self, p: PositionTriple) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.pairs());
        for (coord, dim) in [(p.time, self.d_time), (p.width, self.d_width), (p.height, self.d_height)] {
            for k in 0..dim / 2 {
                let freq = self.base.powf(-2.0 * k as f64 / dim as f64);
                out.push(coord as f64 * freq);
            }
        }
        out
    }

    /// Cos/sin table for a token sequence, one row per position.
    pub fn rotation_table<T: Scalar>(&self, positions: &[PositionTriple]) -> Rc<RotationTable<T>> {
        let pairs = self.pairs();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &p in positions {
            for a in self.angles(p) {
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        Rc::new(RotationTable { pairs, cos, sin })
    }
}

/// Rotates each token (row) by its position; `tokens` is `T × d_head`
/// (or a multiple of `d_head`, rotating every head chunk alike).
pub fn apply_rope<T: Scalar>(tokens: &Tensor<T>, positions: &[PositionTriple], table: &RotaryTable) -> Result<Tensor<T>> {
    let (rows, cols) = tokens.dims2()?;
    if positions.len() != rows {
        return Err(Error::shape("apply_rope", &[rows], &[positions.len()]));
    }
    if cols % table.d_head != 0 {
        return Err(Error::shape("apply_rope", tokens.shape(), &[rows, table.d_head]));
    }
    let rt = table.rotation_table::<T>(positions);
    let mut out = tokens.clone();
    rotate(out.data_mut(), rows, cols, &rt, false);
    Ok(out)
}

/// Video token positions in `(frame, height, width)` order.
pub fn video_positions(frames: usize, width: usize, height: usize) -> Vec<PositionTriple> {
    let mut out = Vec::with_capacity(frames * width * height);
    for l in 0..frames {
        for j in 0..height {
            for i in 0..width {
                out.push(PositionTriple::new(l as i64, i as i64, j as i64));
            }
        }
    }
    out
}

/// Reference-image token positions: `(−1, i + w, j + h)` in `(height, width)` order.
pub fn image_latent_positions(width: usize, height: usize) -> Vec<PositionTriple> {
    let (w, h) = (width as i64, height as i64);
    let mut out = Vec::with_capacity(width * height);
    for j in 0..h {
        for i in 0..w {
            out.push(PositionTriple::new(-1, i + w, j + h));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;
    use std::collections::HashSet;

    #[test]
    fn default_split() {
        let t = RotaryTable::new(16, DEFAULT_BASE).unwrap();
        assert_eq!((t.d_time, t.d_width, t.d_height), (8, 4, 4));
        let t = RotaryTable::new(24, DEFAULT_BASE).unwrap();
        assert_eq!((t.d_time, t.d_width, t.d_height), (8, 8, 8));
        let t = RotaryTable::new(6, DEFAULT_BASE).unwrap();
        assert_eq!((t.d_time, t.d_width, t.d_height), (2, 2, 2));
        assert!(RotaryTable::with_split(3, 2, 2, DEFAULT_BASE).is_err());
    }

    #[test]
    fn angle_examples() {
        let t = RotaryTable::with_split(4, 2, 2, DEFAULT_BASE).unwrap();
        assert!(t.angles(PositionTriple::ORIGIN).iter().all(|&a| a == 0.0));
        let pos = t.angles(PositionTriple::new(1, 0, 0));
        let neg = t.angles(PositionTriple::new(-1, 0, 0));
        for (a, b) in pos.iter().zip(&neg) {
            assert_eq!(*a, -*b);
        }
        let a = t.angles(PositionTriple::new(2, 0, 0));
        assert_eq!(a[0], 2.0);
        assert!((a[1] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn origin_is_identity() {
        let t = RotaryTable::new(12, DEFAULT_BASE).unwrap();
        let x = SeededRng::new(1).normal_tensor::<f64>(&[3, 12], 1.0);
        let y = apply_rope(&x, &[PositionTriple::ORIGIN; 3], &t).unwrap();
        assert_eq!(x, y);
        assert!(apply_rope(&x, &[PositionTriple::ORIGIN; 2], &t).is_err());
    }

    #[test]
    fn image_positions() {
        let p = image_latent_positions(4, 3);
        assert_eq!(p[0], PositionTriple::new(-1, 4, 3));
        assert_eq!(image_latent_positions(1, 1), vec![PositionTriple::new(-1, 1, 1)]);
    }

    #[test]
    fn image_and_video_positions_disjoint() {
        for w in 1..=8 {
            for h in 1..=8 {
                let video: HashSet<_> = video_positions(3, w, h).into_iter().collect();
                assert!(image_latent_positions(w, h).iter().all(|p| !video.contains(p)));
            }
        }
    }
}
