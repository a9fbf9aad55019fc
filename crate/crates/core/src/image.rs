//! 8-bit grayscale rasters and the binary PGM (P5) codec used on the wire.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::clock::Millis;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("pixel buffer holds {len} bytes, expected {width}x{height}")]
    BadLength { width: usize, height: usize, len: usize },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("malformed PGM: {0}")]
    Pgm(&'static str),
}

/// Row-major 8-bit grayscale image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GrayImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if pixels.len() != width * height {
            return Err(ImageError::BadLength {
                width,
                height,
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
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

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel lookup with coordinates clamped into the image (border replication).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    pub fn ensure_same_size(&self, other: &GrayImage) -> Result<(), ImageError> {
        if self.dimensions() != other.dimensions() {
            return Err(ImageError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Copies out the rectangle `[x, x+w) x [y, y+h)`, clipped to the image.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> GrayImage {
        let x1 = (x + w).min(self.width);
        let y1 = (y + h).min(self.height);
        let x0 = x.min(x1);
        let y0 = y.min(y1);
        GrayImage::from_fn(x1 - x0, y1 - y0, |cx, cy| self.get(x0 + cx, y0 + cy))
    }

    pub fn crop_roi(&self, roi: Roi) -> GrayImage {
        self.crop(roi.x, roi.y, roi.w, roi.h)
    }

    pub fn count_nonzero(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    /// Encodes as binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let header = format!("P5\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut cursor = 0usize;
        let magic = next_token(bytes, &mut cursor).ok_or(ImageError::Pgm("missing magic"))?;
        if magic != b"P5" {
            return Err(ImageError::Pgm("not a binary PGM"));
        }
        let mut field = |what| -> Result<usize, ImageError> {
            let tok = next_token(bytes, &mut cursor).ok_or(ImageError::Pgm(what))?;
            std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or(ImageError::Pgm(what))
        };
        let width = field("bad width")?;
        let height = field("bad height")?;
        let maxval = field("bad maxval")?;
        if maxval != 255 {
            return Err(ImageError::Pgm("only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        cursor += 1;
        let end = cursor + width * height;
        if bytes.len() < end {
            return Err(ImageError::Pgm("truncated raster"));
        }
        Self::from_pixels(width, height, bytes[cursor..end].to_vec())
    }
}

fn next_token<'a>(bytes: &'a [u8], cursor: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
            continue;
        }
        break;
    }
    let start = *cursor;
    while *cursor < bytes.len() && !bytes[*cursor].is_ascii_whitespace() {
        *cursor += 1;
    }
    (start < *cursor).then(|| &bytes[start..*cursor])
}

/// Axis-aligned pixel rectangle `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Roi {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// One captured camera frame.
///
/// The raster is reference counted: a camera that keeps seeing the same scene
/// hands out the same buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: Arc<GrayImage>,
    pub timestamp_ms: Millis,
    pub camera_id: String,
}

impl Frame {
    pub fn new(image: impl Into<Arc<GrayImage>>, timestamp_ms: Millis, camera_id: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            timestamp_ms,
            camera_id: camera_id.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// Binary PGM tagged with the camera id and capture time.
    pub fn to_tagged_pgm(&self, extra: &[(&str, String)]) -> Vec<u8> {
        let mut tags = vec![("camera", self.camera_id.clone()), ("ts", self.timestamp_ms.to_string())];
        tags.extend(extra.iter().cloned());
        encode_tagged_pgm(&self.image, &tags)
    }

    /// Inverse of [`Frame::to_tagged_pgm`]; also returns every tag.
    pub fn from_tagged_pgm(bytes: &[u8]) -> Result<(Frame, BTreeMap<String, String>), ImageError> {
        let (image, tags) = decode_tagged_pgm(bytes)?;
        let camera = tags.get("camera").cloned().ok_or(ImageError::Pgm("missing camera tag"))?;
        let ts = tags
            .get("ts")
            .and_then(|t| t.parse().ok())
            .ok_or(ImageError::Pgm("missing ts tag"))?;
        Ok((Frame::new(image, ts, camera), tags))
    }
}

/// Binary PGM whose first comment line carries `key=value` pairs. Values
/// must not contain whitespace.
pub fn encode_tagged_pgm(image: &GrayImage, tags: &[(&str, String)]) -> Vec<u8> {
    let line: Vec<String> = tags.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let header = format!("P5\n# {}\n{} {}\n255\n", line.join(" "), image.width(), image.height());
    let mut out = Vec::with_capacity(header.len() + image.pixels().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(image.pixels());
    out
}

/// The image and the `key=value` pairs of its first header comment.
pub fn decode_tagged_pgm(bytes: &[u8]) -> Result<(GrayImage, BTreeMap<String, String>), ImageError> {
    let image = GrayImage::from_pgm(bytes)?;
    let mut tags = BTreeMap::new();
    if let Some(start) = bytes.iter().position(|&b| b == b'#') {
        let end = bytes[start..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| start + e);
        let line = String::from_utf8_lossy(&bytes[start + 1..end]);
        for pair in line.split_whitespace() {
            if let Some((k, v)) = pair.split_once('=') {
                tags.insert(k.to_string(), v.to_string());
            }
        }
    }
    Ok((image, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tagged_frame_round_trip() {
        let img = GrayImage::from_fn(5, 3, |x, y| (x * 40 + y) as u8);
        let f = Frame::new(img, 1234, "fl-1/side");
        let bytes = f.to_tagged_pgm(&[("seq", "7".into())]);
        let (back, tags) = Frame::from_tagged_pgm(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(tags["seq"], "7");
        assert_eq!(GrayImage::from_pgm(&bytes).unwrap(), *f.image);
    }

    #[test]
    fn length_invariant_is_enforced() {
        assert!(GrayImage::from_pixels(3, 2, vec![0; 5]).is_err());
        assert!(GrayImage::from_pixels(3, 2, vec![0; 6]).is_ok());
    }

    #[test]
    fn pgm_header_is_p5() {
        let img = GrayImage::filled(4, 2, 7);
        let bytes = img.to_pgm();
        assert!(bytes.starts_with(b"P5\n4 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 8);
    }

    #[test]
    fn pgm_with_comment_parses() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20]);
        let img = GrayImage::from_pgm(&bytes).unwrap();
        assert_eq!(img.pixels(), &[10, 20]);
    }

    #[test]
    fn truncated_pgm_is_rejected() {
        let bytes = b"P5\n2 2\n255\n\x01\x02".to_vec();
        assert_eq!(
            GrayImage::from_pgm(&bytes),
            Err(ImageError::Pgm("truncated raster"))
        );
    }

    proptest! {
        #[test]
        fn pgm_round_trip(w in 1usize..16, h in 1usize..16, seed in any::<u8>()) {
            let img = GrayImage::from_fn(w, h, |x, y| (x * 31 + y * 7) as u8 ^ seed);
            prop_assert_eq!(GrayImage::from_pgm(&img.to_pgm()).unwrap(), img);
        }
    }
}
