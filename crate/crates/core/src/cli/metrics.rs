//! Proxy metrics on decoded pixel videos.

use crate::latentio::{FaceBox, PixelImage, PixelVideo};

/// Pearson correlation; 0 when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson needs equal lengths");
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Channel-averaged intensity of the pixels inside `b` for frame `f`.
fn box_values(v: &PixelVideo, f: usize, b: FaceBox) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.area());
    for y in b.y0..b.y1.min(v.height) {
        for x in b.x0..b.x1.min(v.width) {
            let s: f64 = (0..v.channels).map(|c| v.pixel(f, y, x, c) as f64).sum();
            out.push(s / v.channels as f64);
        }
    }
    out
}

/// Per-frame spatial variance of intensity inside the mouth box.
pub fn mouth_box_variance(v: &PixelVideo, mouth: FaceBox) -> Vec<f64> {
    (0..v.frames).map(|f| variance(&box_values(v, f, mouth))).collect()
}

/// Mean over the box pixels of each pixel's variance across frames.
pub fn region_temporal_variance(v: &PixelVideo, region: FaceBox) -> f64 {
    let per_frame: Vec<Vec<f64>> = (0..v.frames).map(|f| box_values(v, f, region)).collect();
    let pixels = per_frame.first().map_or(0, Vec::len);
    if pixels == 0 {
        return 0.0;
    }
    (0..pixels)
        .map(|p| variance(&per_frame.iter().map(|fr| fr[p]).collect::<Vec<_>>()))
        .sum::<f64>()
        / pixels as f64
}

/// Envelope vs mouth-box variance correlation of one video.
pub fn sync_score(v: &PixelVideo, mouth: FaceBox, envelope: &[f32]) -> f64 {
    let env: Vec<f64> = envelope.iter().map(|&e| e as f64).collect();
    pearson(&env, &mouth_box_variance(v, mouth))
}

/// Mean absolute pixel difference between each frame and the reference.
pub fn identity_distance(v: &PixelVideo, reference: &PixelImage) -> f64 {
    let fl = v.frame_len();
    assert_eq!(fl, reference.data.len(), "reference and frame sizes differ");
    let total: f64 = (0..v.frames)
        .map(|f| {
            v.frame(f).iter().zip(&reference.data).map(|(&a, &b)| (a - b).abs() as f64).sum::<f64>() / fl as f64
        })
        .sum();
    total / v.frames.max(1) as f64
}

/// Mean per-pixel variance across frames.
pub fn motion_energy(v: &PixelVideo) -> f64 {
    let all = FaceBox::new(0, 0, v.width, v.height);
    let mut acc = 0.0;
    for c in 0..v.channels {
        let series: Vec<Vec<f64>> = (0..v.frames)
            .map(|f| {
                (0..v.height)
                    .flat_map(|y| (0..v.width).map(move |x| (y, x)))
                    .map(|(y, x)| v.pixel(f, y, x, c) as f64)
                    .collect()
            })
            .collect();
        let n = all.area();
        acc += (0..n).map(|p| variance(&series.iter().map(|s| s[p]).collect::<Vec<_>>())).sum::<f64>() / n as f64;
    }
    acc / v.channels as f64
}
