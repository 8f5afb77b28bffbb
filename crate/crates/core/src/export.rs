//! Display conversion and image files: 8-bit sRGB frames (PNG, PPM) and
//! 16-bit depth maps (PGM).

use std::io::{self, Write};

use crate::image::{ColorImage, DepthImage, Image};

pub type Rgba8Image = Image<[u8; 4]>;

/// Depth that maps to full scale in PGM16 exports unless overridden.
pub const DEFAULT_DEPTH_VIS_MAX: f32 = 100.0;

/// Linear to sRGB transfer function on [0, 1].
pub fn srgb_encode(linear: f64) -> f64 {
    let c = linear.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Quantizes [0, 1] to 8 bits, rounding halves up.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Converts a premultiplied linear RGBA pixel to straight-alpha sRGB.
/// Fully transparent pixels take the background color.
pub fn tonemap_pixel(px: [f32; 4], background: [f32; 3]) -> [u8; 4] {
    let a = f64::from(px[3]).clamp(0.0, 1.0);
    let rgb: [f64; 3] = if a > 0.0 {
        [0, 1, 2].map(|c| f64::from(px[c]) / a)
    } else {
        background.map(f64::from)
    };
    [
        quantize_u8(srgb_encode(rgb[0])),
        quantize_u8(srgb_encode(rgb[1])),
        quantize_u8(srgb_encode(rgb[2])),
        quantize_u8(a),
    ]
}

pub fn tonemap_to_rgba8(color: &ColorImage, background: [f32; 3]) -> Rgba8Image {
    color.map(|px| tonemap_pixel(*px, background))
}

/// 16-bit depth code: `round(65535 * clamp(z / vis_max, 0, 1))`.
pub fn depth_to_u16(z: f32, vis_max: f32) -> u16 {
    let v = (f64::from(z) / f64::from(vis_max)).clamp(0.0, 1.0);
    (v * 65535.0 + 0.5).floor() as u16
}

/// 8-bit depth preview, brighter when nearer: `255 - round(255 * clamp(z / vis_max, 0, 1))`.
pub fn depth_preview_u8(z: f32, vis_max: f32) -> u8 {
    let v = (f64::from(z) / f64::from(vis_max)).clamp(0.0, 1.0);
    255 - quantize_u8(v)
}

pub fn depth_preview(depth: &DepthImage, vis_max: f32) -> Image<u8> {
    depth.map(|z| depth_preview_u8(*z, vis_max))
}

pub fn encode_png(image: &Rgba8Image) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width(), image.height());
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(image.pixels().as_flattened())?;
    }
    Ok(out)
}

pub fn write_png<W: Write>(mut w: W, image: &Rgba8Image) -> io::Result<()> {
    let bytes = encode_png(image).map_err(io::Error::other)?;
    w.write_all(&bytes)
}

/// Binary PPM (P6); alpha is dropped.
pub fn write_ppm<W: Write>(mut w: W, image: &Rgba8Image) -> io::Result<()> {
    write!(w, "P6\n{} {}\n255\n", image.width(), image.height())?;
    let rgb: Vec<u8> = image.pixels().iter().flat_map(|p| [p[0], p[1], p[2]]).collect();
    w.write_all(&rgb)
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples).
pub fn write_pgm16<W: Write>(mut w: W, depth: &DepthImage, vis_max: f32) -> io::Result<()> {
    write!(w, "P5\n{} {}\n65535\n", depth.width(), depth.height())?;
    let bytes: Vec<u8> = depth
        .pixels()
        .iter()
        .flat_map(|z| depth_to_u16(*z, vis_max).to_be_bytes())
        .collect();
    w.write_all(&bytes)
}
