//! Byte layout of the frame region (layout version 1).
//!
//! All multi-byte header fields are little-endian at fixed offsets. The
//! header occupies the first [`HEADER_SIZE`] bytes; the color plane follows
//! immediately and the depth plane follows the color plane. LAYOUT.md at the
//! repository root mirrors this table for non-Rust readers.

use serde::{Deserialize, Serialize};

use super::FrameBusError;

pub const MAGIC: [u8; 8] = *b"SPLATBUS";
pub const LAYOUT_VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 4096;
pub const ROW_ALIGNMENT: u32 = 64;

pub const COLOR_BYTES_PER_PIXEL: u32 = 16;
pub const DEPTH_BYTES_PER_PIXEL: u32 = 4;

pub const OFF_MAGIC: usize = 0;
pub const OFF_LAYOUT_VERSION: usize = 8;
pub const OFF_HEADER_SIZE: usize = 12;
pub const OFF_SEQ: usize = 16;
pub const OFF_FRAME_INDEX: usize = 24;
pub const OFF_TIMESTAMP_NS: usize = 32;
pub const OFF_CHECKSUM: usize = 40;
pub const OFF_WIDTH: usize = 48;
pub const OFF_HEIGHT: usize = 52;
pub const OFF_COLOR_FORMAT: usize = 56;
pub const OFF_DEPTH_FORMAT: usize = 60;
pub const OFF_COLOR_PITCH: usize = 64;
pub const OFF_DEPTH_PITCH: usize = 68;
pub const OFF_COLOR_OFFSET: usize = 72;
pub const OFF_DEPTH_OFFSET: usize = 80;
pub const OFF_TOTAL_SIZE: usize = 88;
pub const OFF_WRITER_PID: usize = 96;
pub const OFF_FLAGS: usize = 100;
/// Bumped after every publish and at teardown; readers block on it.
pub const OFF_NOTIFY: usize = 104;

/// Set in the flags word once the writer has torn the region down.
pub const FLAG_WRITER_CLOSED: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorFormat {
    Rgba32f,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthFormat {
    R32f,
}

impl ColorFormat {
    pub(crate) fn code(self) -> u32 {
        1
    }
}

impl DepthFormat {
    pub(crate) fn code(self) -> u32 {
        1
    }
}

/// Smallest multiple of [`ROW_ALIGNMENT`] that holds `width` pixels.
pub fn compute_pitch(width: u32, bytes_per_pixel: u32) -> u32 {
    let raw = width * bytes_per_pixel;
    raw.div_ceil(ROW_ALIGNMENT) * ROW_ALIGNMENT
}

/// Geometry of the color and depth planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameDescriptor {
    pub width: u32,
    pub height: u32,
    pub color_format: ColorFormat,
    pub depth_format: DepthFormat,
    pub color_pitch: u32,
    pub depth_pitch: u32,
}

impl FrameDescriptor {
    /// Descriptor with the tightest aligned pitches.
    pub fn new(width: u32, height: u32) -> Result<Self, FrameBusError> {
        if width == 0 || height == 0 {
            return Err(FrameBusError::InvalidDescriptor(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        // Keep the row pitch inside u32 and the planes addressable.
        if width > 1 << 24 || height > 1 << 24 {
            return Err(FrameBusError::InvalidDescriptor(format!(
                "dimensions {width}x{height} are too large"
            )));
        }
        let desc = Self {
            width,
            height,
            color_format: ColorFormat::Rgba32f,
            depth_format: DepthFormat::R32f,
            color_pitch: compute_pitch(width, COLOR_BYTES_PER_PIXEL),
            depth_pitch: compute_pitch(width, DEPTH_BYTES_PER_PIXEL),
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<(), FrameBusError> {
        let bad = |m: String| Err(FrameBusError::InvalidDescriptor(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!(
                "dimensions must be positive, got {}x{}",
                self.width, self.height
            ));
        }
        if (self.color_pitch as u64) < self.width as u64 * COLOR_BYTES_PER_PIXEL as u64
            || !self.color_pitch.is_multiple_of(ROW_ALIGNMENT)
        {
            return bad(format!("bad color pitch {}", self.color_pitch));
        }
        if (self.depth_pitch as u64) < self.width as u64 * DEPTH_BYTES_PER_PIXEL as u64
            || !self.depth_pitch.is_multiple_of(ROW_ALIGNMENT)
        {
            return bad(format!("bad depth pitch {}", self.depth_pitch));
        }
        Ok(())
    }

    pub fn color_offset(&self) -> usize {
        HEADER_SIZE
    }

    pub fn depth_offset(&self) -> usize {
        HEADER_SIZE + self.height as usize * self.color_pitch as usize
    }

    pub fn region_bytes(&self) -> usize {
        self.depth_offset() + self.height as usize * self.depth_pitch as usize
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Decoded contents of an attachment token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub name: String,
    pub layout_version: u32,
    pub total_size: u64,
    pub transport: super::TransportKind,
}

impl TokenInfo {
    pub fn encode(&self) -> String {
        use base64::Engine as _;
        let json = serde_json::to_vec(self).expect("token serializes");
        base64::engine::general_purpose::STANDARD.encode(json)
    }

    pub fn decode(token: &str) -> Result<Self, FrameBusError> {
        use base64::Engine as _;
        let raw = base64::engine::general_purpose::STANDARD
            .decode(token.trim())
            .map_err(|e| FrameBusError::Attach(format!("token is not base64: {e}")))?;
        serde_json::from_slice(&raw)
            .map_err(|e| FrameBusError::Attach(format!("token payload is invalid: {e}")))
    }
}
