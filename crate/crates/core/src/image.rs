//! Dense row-major images shared by the renderer, the frame bus and the
//! compositor.

use std::fmt;

/// A `width × height` grid of pixels stored row-major without padding.
#[derive(Clone, PartialEq)]
pub struct Image<T> {
    width: u32,
    height: u32,
    pixels: Vec<T>,
}

/// Premultiplied linear RGBA, 32-bit float per channel.
pub type ColorImage = Image<[f32; 4]>;

/// Single-channel 32-bit float image (inverse or linear depth).
pub type DepthImage = Image<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("pixel buffer holds {actual} pixels, expected {expected}")]
pub struct SizeMismatch {
    pub expected: usize,
    pub actual: usize,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }
}

impl<T> Image<T> {
    pub fn from_pixels(width: u32, height: u32, pixels: Vec<T>) -> Result<Self, SizeMismatch> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(SizeMismatch {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> T) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [T] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> &T {
        &self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn get_mut(&mut self, x: u32, y: u32) -> &mut T {
        &mut self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn row(&self, y: u32) -> &[T] {
        let w = self.width as usize;
        &self.pixels[y as usize * w..(y as usize + 1) * w]
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(f).collect(),
        }
    }
}

impl<T> fmt::Debug for Image<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

/// 64-bit FNV-1a over the little-endian bytes of the packed color plane
/// followed by the packed depth plane. Used as the per-frame checksum the
/// writer stamps into the region header.
pub fn frame_checksum(color: &[[f32; 4]], depth: &[f32]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut hash = OFFSET;
    let mut eat = |word: u32| {
        for b in word.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(PRIME);
        }
    };
    for px in color {
        for c in px {
            eat(c.to_bits());
        }
    }
    for d in depth {
        eat(d.to_bits());
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_pixels_checks_length() {
        assert!(Image::from_pixels(2, 2, vec![0.0f32; 3]).is_err());
        let img = Image::from_pixels(2, 2, vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(*img.get(1, 1), 3.0);
        assert_eq!(img.row(1), &[2.0, 3.0]);
    }

    #[test]
    fn checksum_sees_single_bit_changes() {
        let color = vec![[0.25f32, 0.5, 0.75, 1.0]; 16];
        let mut depth = vec![2.0f32; 16];
        let a = frame_checksum(&color, &depth);
        depth[7] = f32::from_bits(depth[7].to_bits() ^ 1);
        assert_ne!(a, frame_checksum(&color, &depth));
    }

    #[test]
    fn checksum_of_nothing_is_the_fnv_offset() {
        assert_eq!(frame_checksum(&[], &[]), 0xcbf2_9ce4_8422_2325);
    }
}
