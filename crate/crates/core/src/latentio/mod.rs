//! Packing VAE stand-in, latent containers, face-mask alignment and the
//! `.avdt` file format.

pub mod container;
pub mod mask;
pub mod vae;

pub use container::{Entry, TensorFile};
pub use mask::{align_face_mask, FaceBox, FaceMaskGrid};
pub use vae::{
    decode_image, decode_video, encode_image, encode_video, latent_frames, pixel_frames, ImageLatent, PixelImage,
    PixelVideo, VideoLatent, DEFAULT_SPATIAL, TIME_FACTOR,
};

/// Writes a latent video to a container under `name` with its extents.
pub fn video_latent_to_file(file: &mut TensorFile, name: &str, z: &VideoLatent) {
    file.insert_f32(name, z.data.clone());
}

/// Reads a latent video stored by [`video_latent_to_file`].
pub fn video_latent_from_file(file: &TensorFile, name: &str) -> crate::Result<VideoLatent> {
    let t = file.f32(name)?.clone();
    match *t.shape() {
        [n, h, w, c] => VideoLatent::new(n, w, h, c, t),
        _ => Err(crate::Error::Format(format!("`{name}` is not a rank-4 latent"))),
    }
}
