//! Parameter-free packing "VAE".
//!
//! Frame 0 is replicated four times so that it forms a full temporal group,
//! then every group of four frames is folded into channels together with an
//! `s×s` spatial block (time-to-depth and space-to-depth). The mapping is a
//! permutation of values, so decoding is exact.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Temporal compression ratio.
pub const TIME_FACTOR: usize = 4;

/// Default spatial compression factor.
pub const DEFAULT_SPATIAL: usize = 4;

/// Latent frame count for `pixel_frames` input frames: `⌊f/4⌋ + 1`.
pub fn latent_frames(pixel_frames: usize) -> usize {
    pixel_frames / TIME_FACTOR + 1
}

/// Pixel frame count that a latent of `n` frames decodes to.
pub fn pixel_frames(latent_frames: usize) -> usize {
    TIME_FACTOR * latent_frames.saturating_sub(1) + 1
}

/// Pixel video, layout `[frames][height][width][channels]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PixelVideo {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * channels {
            return Err(Error::Invalid(format!(
                "pixel video {frames}x{height}x{width}x{channels} needs {} values, got {}",
                frames * height * width * channels,
                data.len()
            )));
        }
        Ok(PixelVideo {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        PixelVideo {
            frames,
            height,
            width,
            channels,
            data: vec![0.0; frames * height * width * channels],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    pub fn pixel(&self, f: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((f * self.height + y) * self.width + x) * self.channels + c]
    }

    /// Checks the frame-count and divisibility constraints of the encoder.
    pub fn validate(&self, spatial: usize) -> Result<()> {
        if self.frames == 0 || !(self.frames - 1).is_multiple_of(TIME_FACTOR) {
            return Err(Error::Invalid(format!(
                "frame count {} must satisfy (f - 1) mod 4 == 0",
                self.frames
            )));
        }
        check_spatial(self.height, self.width, spatial)
    }
}

fn check_spatial(height: usize, width: usize, spatial: usize) -> Result<()> {
    if spatial == 0 || height == 0 || width == 0 || !height.is_multiple_of(spatial) || !width.is_multiple_of(spatial) {
        return Err(Error::Invalid(format!(
            "spatial extents {height}x{width} must be positive multiples of {spatial}"
        )));
    }
    Ok(())
}

/// Single image, layout `[height][width][channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PixelImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(PixelImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn as_video(&self) -> PixelVideo {
        PixelVideo {
            frames: 1,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.clone(),
        }
    }
}

/// Latent video, tensor layout `[frames][height][width][channels]`.
///
/// Tokens are read in `(frame, height, width)` row-major order, so the
/// tensor reshapes directly to `[frames·h·w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoLatent {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Tensor<f32>,
}

impl VideoLatent {
    pub fn new(frames: usize, width: usize, height: usize, channels: usize, data: Tensor<f32>) -> Result<Self> {
        let expect = [frames, height, width, channels];
        if data.shape() != expect {
            return Err(Error::shape("video_latent", data.shape(), &expect));
        }
        Ok(VideoLatent {
            frames,
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(frames: usize, width: usize, height: usize, channels: usize) -> Self {
        VideoLatent {
            frames,
            width,
            height,
            channels,
            data: Tensor::zeros(&[frames, height, width, channels]),
        }
    }

    pub fn cells_per_frame(&self) -> usize {
        self.width * self.height
    }

    pub fn frame_len(&self) -> usize {
        self.cells_per_frame() * self.channels
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data.data()[f * n..(f + 1) * n]
    }

    /// Tokens as a `[frames·h·w, c]` matrix.
    pub fn tokens(&self) -> Tensor<f32> {
        self.data
            .clone()
            .reshape(&[self.frames * self.cells_per_frame(), self.channels])
            .expect("layout invariant")
    }

    /// Frames at the given indices, each taken modulo `self.frames`.
    pub fn gather_frames(&self, frames: &[usize]) -> VideoLatent {
        let n = self.frame_len();
        let mut data = Vec::with_capacity(frames.len() * n);
        for &f in frames {
            data.extend_from_slice(self.frame(f % self.frames));
        }
        VideoLatent {
            frames: frames.len(),
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: Tensor::new(vec![frames.len(), self.height, self.width, self.channels], data)
                .expect("layout invariant"),
        }
    }

    pub fn same_extents(&self, other: &VideoLatent) -> bool {
        self.frames == other.frames
            && self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
    }
}

/// Single-frame latent of a reference image, layout `[height][width][channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageLatent {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Tensor<f32>,
}

impl ImageLatent {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageLatent {
            width,
            height,
            channels,
            data: Tensor::zeros(&[height, width, channels]),
        }
    }

    /// Tokens as a `[h·w, c]` matrix.
    pub fn tokens(&self) -> Tensor<f32> {
        self.data
            .clone()
            .reshape(&[self.width * self.height, self.channels])
            .expect("layout invariant")
    }

    /// The image repeated `frames` times as a video latent.
    pub fn repeat(&self, frames: usize) -> VideoLatent {
        let mut data = Vec::with_capacity(frames * self.data.numel());
        for _ in 0..frames {
            data.extend_from_slice(self.data.data());
        }
        VideoLatent {
            frames,
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: Tensor::new(vec![frames, self.height, self.width, self.channels], data)
                .expect("layout invariant"),
        }
    }

    pub fn from_video_frame(v: &VideoLatent, frame: usize) -> ImageLatent {
        ImageLatent {
            width: v.width,
            height: v.height,
            channels: v.channels,
            data: Tensor::new(vec![v.height, v.width, v.channels], v.frame(frame).to_vec())
                .expect("layout invariant"),
        }
    }
}

/// Channel index of `(time offset, dy, dx, pixel channel)` inside a latent cell.
#[inline]
fn packed_channel(dt: usize, dy: usize, dx: usize, ch: usize, spatial: usize, channels: usize) -> usize {
    ((dt * spatial + dy) * spatial + dx) * channels + ch
}

/// Source pixel frame of latent frame `k`, time offset `dt`.
#[inline]
fn source_frame(k: usize, dt: usize) -> usize {
    if k == 0 {
        0
    } else {
        TIME_FACTOR * (k - 1) + 1 + dt
    }
}

pub fn encode_video(v: &PixelVideo, spatial: usize) -> Result<VideoLatent> {
    v.validate(spatial)?;
    let n = latent_frames(v.frames);
    let (h, w) = (v.height / spatial, v.width / spatial);
    let c = v.channels * TIME_FACTOR * spatial * spatial;
    let mut out = vec![0f32; n * h * w * c];
    for k in 0..n {
        for j in 0..h {
            for i in 0..w {
                let cell = &mut out[((k * h + j) * w + i) * c..((k * h + j) * w + i + 1) * c];
                for dt in 0..TIME_FACTOR {
                    let f = source_frame(k, dt);
                    for dy in 0..spatial {
                        for dx in 0..spatial {
                            let (y, x) = (j * spatial + dy, i * spatial + dx);
                            for ch in 0..v.channels {
                                cell[packed_channel(dt, dy, dx, ch, spatial, v.channels)] = v.pixel(f, y, x, ch);
                            }
                        }
                    }
                }
            }
        }
    }
    VideoLatent::new(n, w, h, c, Tensor::new(vec![n, h, w, c], out)?)
}

/// Exact inverse of [`encode_video`]; the replicated copies of frame 0
/// beyond the first are dropped.
pub fn decode_video(z: &VideoLatent, spatial: usize) -> Result<PixelVideo> {
    let per_cell = TIME_FACTOR * spatial * spatial;
    if z.frames == 0 || spatial == 0 || !z.channels.is_multiple_of(per_cell) || z.channels == 0 {
        return Err(Error::Invalid(format!(
            "latent with {} channels cannot be unpacked with spatial factor {spatial}",
            z.channels
        )));
    }
    let channels = z.channels / per_cell;
    let frames = pixel_frames(z.frames);
    let (height, width) = (z.height * spatial, z.width * spatial);
    let mut out = PixelVideo::zeros(frames, height, width, channels);
    let zd = z.data.data();
    for f in 0..frames {
        let (k, dt) = if f == 0 { (0, 0) } else { ((f - 1) / TIME_FACTOR + 1, (f - 1) % TIME_FACTOR) };
        for y in 0..height {
            for x in 0..width {
                let (j, dy, i, dx) = (y / spatial, y % spatial, x / spatial, x % spatial);
                let base = ((k * z.height + j) * z.width + i) * z.channels;
                for ch in 0..channels {
                    out.data[((f * height + y) * width + x) * channels + ch] =
                        zd[base + packed_channel(dt, dy, dx, ch, spatial, channels)];
                }
            }
        }
    }
    Ok(out)
}

pub fn encode_image(img: &PixelImage, spatial: usize) -> Result<ImageLatent> {
    let z = encode_video(&img.as_video(), spatial)?;
    Ok(ImageLatent::from_video_frame(&z, 0))
}

pub fn decode_image(z: &ImageLatent, spatial: usize) -> Result<PixelImage> {
    let v = decode_video(&z.repeat(1), spatial)?;
    PixelImage::new(v.height, v.width, v.channels, v.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    fn random_video(rng: &mut SeededRng, f: usize, h: usize, w: usize, c: usize) -> PixelVideo {
        let data = (0..f * h * w * c).map(|_| rng.uniform() as f32).collect();
        PixelVideo::new(f, h, w, c, data).unwrap()
    }

    #[test]
    fn shape_examples() {
        assert_eq!(latent_frames(129), 33);
        let z = encode_video(&PixelVideo::zeros(1, 4, 4, 3), 4).unwrap();
        assert_eq!((z.frames, z.width, z.height, z.channels), (1, 1, 1, 192));
        let z = encode_video(&PixelVideo::zeros(9, 8, 8, 1), 4).unwrap();
        assert_eq!((z.frames, z.width, z.height, z.channels), (3, 2, 2, 64));
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = SeededRng::new(11);
        for (f, h, w, c, s) in [(5, 8, 8, 3, 4), (1, 4, 8, 2, 4), (9, 6, 4, 1, 2), (13, 4, 4, 3, 1)] {
            let v = random_video(&mut rng, f, h, w, c);
            let back = decode_video(&encode_video(&v, s).unwrap(), s).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn zero_latent_decodes_to_zero_video() {
        let v = decode_video(&VideoLatent::zeros(3, 2, 2, 64), 4).unwrap();
        assert_eq!((v.frames, v.height, v.width, v.channels), (9, 8, 8, 1));
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(encode_video(&PixelVideo::zeros(4, 4, 4, 1), 4).is_err());
        assert!(encode_video(&PixelVideo::zeros(5, 6, 4, 1), 4).is_err());
        assert!(decode_video(&VideoLatent::zeros(2, 1, 1, 65), 4).is_err());
    }

    #[test]
    fn frame_zero_is_replicated() {
        let mut rng = SeededRng::new(2);
        let v = random_video(&mut rng, 5, 4, 4, 1);
        let z = encode_video(&v, 4).unwrap();
        let cell = z.frame(0);
        for dt in 1..4 {
            assert_eq!(&cell[dt * 16..(dt + 1) * 16], &cell[..16]);
        }
    }

    #[test]
    fn emotion_sized_image_packs_to_four_tokens() {
        let z = encode_image(&PixelImage::new(8, 8, 1, vec![0.0; 64]).unwrap(), 4).unwrap();
        assert_eq!(z.tokens().shape(), &[4, 64]);
    }
}
