//! 8-bit PNG reading and writing for reference images and frame dumps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::latentio::{PixelImage, PixelVideo};

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

pub fn write_png(path: impl AsRef<Path>, img: &PixelImage) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Invalid(format!("cannot write a {c}-channel image as PNG"))),
    };
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    enc.write_header().map_err(png_err)?.write_image_data(&bytes).map_err(png_err)?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<PixelImage> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::Format("indexed PNG was not expanded".into())),
    };
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    PixelImage::new(info.height as usize, info.width as usize, channels, data)
}

/// Writes `frame_00000.png`, ... into `dir`.
pub fn dump_frames(dir: impl AsRef<Path>, v: &PixelVideo) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for f in 0..v.frames {
        let img = PixelImage::new(v.height, v.width, v.channels, v.frame(f).to_vec())?;
        write_png(dir.join(format!("frame_{f:05}.png")), &img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..4 * 3 * 3).map(|i| i as f32 / 35.0).collect();
        let img = PixelImage::new(4, 3, 3, data.clone()).unwrap();
        let p = dir.path().join("x.png");
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!((back.height, back.width, back.channels), (4, 3, 3));
        for (a, b) in data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let v = PixelVideo::new(2, 4, 3, 3, [data.clone(), data].concat()).unwrap();
        dump_frames(dir.path().join("frames"), &v).unwrap();
        assert!(dir.path().join("frames/frame_00001.png").exists());
    }
}
