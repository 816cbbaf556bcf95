use serde::{Deserialize, Serialize};

use super::vae::{latent_frames, TIME_FACTOR};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl FaceBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        FaceBox { x0, y0, x1, y1 }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Binary audio gate per latent frame and cell, layout `[(n+1)][h][w]`.
/// Frame 0 is the identity frame and is always fully open.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMaskGrid {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub data: Tensor<f32>,
}

impl FaceMaskGrid {
    /// Builds a grid from raw values, enforcing the binary and frame-0 rules.
    pub fn new(frames: usize, width: usize, height: usize, data: Tensor<f32>) -> Result<Self> {
        let expect = [frames, height, width];
        if data.shape() != expect {
            return Err(Error::shape("face_mask", data.shape(), &expect));
        }
        if frames == 0 {
            return Err(Error::Invalid("face mask needs at least the identity frame".into()));
        }
        if data.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("face mask values must be 0 or 1".into()));
        }
        if data.data()[..width * height].iter().any(|&v| v != 1.0) {
            return Err(Error::Invalid("identity frame of a face mask must be all ones".into()));
        }
        Ok(FaceMaskGrid {
            frames,
            width,
            height,
            data,
        })
    }

    /// All cells open in every frame.
    pub fn ones(frames: usize, width: usize, height: usize) -> Self {
        FaceMaskGrid {
            frames,
            width,
            height,
            data: Tensor::ones(&[frames, height, width]),
        }
    }

    /// Identity frame open, everything else closed.
    pub fn closed(frames: usize, width: usize, height: usize) -> Self {
        let mut data = Tensor::zeros(&[frames, height, width]);
        data.data_mut()[..width * height].fill(1.0);
        FaceMaskGrid {
            frames,
            width,
            height,
            data,
        }
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data.data()[f * n..(f + 1) * n]
    }

    /// Builds a segment mask: identity frame plus the listed video frames
    /// (indices refer to video frames, i.e. mask frame `i + 1`).
    pub fn select_video_frames(&self, frames: &[usize]) -> FaceMaskGrid {
        let n = self.width * self.height;
        let mut data = vec![1.0f32; n];
        let video = self.frames - 1;
        for &f in frames {
            data.extend_from_slice(self.frame(1 + f % video));
        }
        FaceMaskGrid {
            frames: frames.len() + 1,
            width: self.width,
            height: self.height,
            data: Tensor::new(vec![frames.len() + 1, self.height, self.width], data).expect("layout"),
        }
    }
}

/// Rasterizes per-frame face boxes and reduces them onto the latent grid.
///
/// The `f′` pixel masks are padded in front to `(n+1)·4` frames by
/// replicating frame 0, the leading group (the identity frame) is forced to
/// one, each group of four is reduced by union and each `s×s` block by max.
pub fn align_face_mask(
    boxes: &[Vec<FaceBox>],
    pixel_frames: usize,
    width: usize,
    height: usize,
    spatial: usize,
) -> Result<FaceMaskGrid> {
    if pixel_frames == 0 || !(pixel_frames - 1).is_multiple_of(TIME_FACTOR) {
        return Err(Error::Invalid(format!(
            "frame count {pixel_frames} must satisfy (f - 1) mod 4 == 0"
        )));
    }
    if spatial == 0 || !width.is_multiple_of(spatial) || !height.is_multiple_of(spatial) {
        return Err(Error::Invalid(format!(
            "frame {width}x{height} not divisible by spatial factor {spatial}"
        )));
    }
    if boxes.len() != pixel_frames {
        return Err(Error::Invalid(format!(
            "expected boxes for {pixel_frames} frames, got {}",
            boxes.len()
        )));
    }
    for (f, frame_boxes) in boxes.iter().enumerate() {
        for b in frame_boxes {
            if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > width || b.y1 > height {
                return Err(Error::Invalid(format!(
                    "face box {b:?} in frame {f} outside {width}x{height}"
                )));
            }
        }
    }

    let n = latent_frames(pixel_frames);
    let (lw, lh) = (width / spatial, height / spatial);
    let padded = (n + 1) * TIME_FACTOR;
    let pad = padded - pixel_frames;
    let mut data = vec![0f32; (n + 1) * lh * lw];
    data[..lh * lw].fill(1.0);
    for p in TIME_FACTOR..padded {
        let src = p.saturating_sub(pad);
        let group = p / TIME_FACTOR;
        for frame_box in &boxes[src] {
            // union over time, max over each s×s block: a cell is on when the
            // box touches any of its pixels
            let (cx0, cx1) = (frame_box.x0 / spatial, frame_box.x1.div_ceil(spatial));
            let (cy0, cy1) = (frame_box.y0 / spatial, frame_box.y1.div_ceil(spatial));
            for cy in cy0..cy1 {
                for cx in cx0..cx1 {
                    data[(group * lh + cy) * lw + cx] = 1.0;
                }
            }
        }
    }
    FaceMaskGrid::new(n + 1, lw, lh, Tensor::new(vec![n + 1, lh, lw], data)?)
}
