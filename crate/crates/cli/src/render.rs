//! PNG rendering of axial slices.

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use curvereg::volume::SliceImage;

/// Full value range of `data`, widened to a non-empty interval.
pub fn data_window(data: &[f32]) -> (f32, f32) {
    let (lo, hi) = data
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Parses `"lo,hi"`.
pub fn parse_window(s: &str) -> Option<(f32, f32)> {
    let (lo, hi) = s.split_once(',')?;
    let lo: f32 = lo.trim().parse().ok()?;
    let hi: f32 = hi.trim().parse().ok()?;
    (lo.is_finite() && hi.is_finite() && hi > lo).then_some((lo, hi))
}

fn encode(bytes: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(bytes, width as u32, height as u32, color)
        .expect("in-memory png encoding");
    out
}

/// 8-bit grayscale PNG of the windowed slice.
pub fn slice_png(slice: &SliceImage) -> Vec<u8> {
    encode(&slice.to_gray8(), slice.width, slice.height, ExtendedColorType::L8)
}

/// Black-red-yellow-white ramp for `t` in [0, 1].
pub fn hot(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
}

/// RGB PNG of the colormapped PET slice blended over the gray CT slice.
/// Both slices carry their own windows.
pub fn overlay_png(ct: &SliceImage, pet: &SliceImage, alpha: f32) -> Vec<u8> {
    let gray = ct.to_gray8();
    let heat = pet.to_gray8();
    let mut rgb = Vec::with_capacity(gray.len() * 3);
    for (&g, &h) in gray.iter().zip(&heat) {
        let color = hot(h as f32 / 255.0);
        let base = g as f32 / 255.0;
        for c in color {
            let v = (1.0 - alpha) * base + alpha * c;
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode(&rgb, ct.width, ct.height, ExtendedColorType::Rgb8)
}
