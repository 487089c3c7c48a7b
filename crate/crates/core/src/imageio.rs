//! Raster I/O and resampling.
//!
//! Everything here works on 8-bit RGB buffers. Binary PPM (P6) is always
//! available, grayscale PGM (P5) is decoded by channel replication, and PNG is
//! available with the `png` feature.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Largest accepted pixel count (width * height).
const MAX_PIXELS: u64 = 1 << 28;

/// A decoded 3-channel, row-major 8-bit raster.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!("{width}x{height}")));
        }
        check_pixel_count(width as u64, height as u64)?;
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidDimensions(format!(
                "{width}x{height} needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// A constant-colour image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!("{width}x{height}")));
        }
        check_pixel_count(width as u64, height as u64)?;
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!("{width}x{height}")));
        }
        check_pixel_count(width as u64, height as u64)?;
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::new_unchecked(0.0, 0.0, self.width as f64, self.height as f64)
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

fn check_pixel_count(width: u64, height: u64) -> Result<()> {
    match width.checked_mul(height) {
        Some(n) if n <= MAX_PIXELS => Ok(()),
        _ => Err(Error::DimensionOverflow { width, height }),
    }
}

/// Loads a PPM (P6), PGM (P5) or, with the `png` feature, PNG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode(bytes: &[u8]) -> Result<ImageBuffer> {
    match bytes {
        [b'P', b'6', ..] | [b'P', b'5', ..] => decode_pnm(bytes),
        #[cfg(feature = "png")]
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        _ => Err(Error::Format("unrecognized magic".into())),
    }
}

/// Writes `img` as PPM, or as PNG when the extension is `.png` and the `png`
/// feature is enabled.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        #[cfg(feature = "png")]
        Some(ext) if ext.eq_ignore_ascii_case("png") => encode_png(img)?,
        Some(ext) if ext.eq_ignore_ascii_case("png") => {
            return Err(Error::Format(
                "PNG output requires the `png` feature".into(),
            ))
        }
        _ => encode_ppm(img),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("truncated header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header field out of range".into()))
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    let gray = bytes[1] == b'5';
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Format("truncated header".into()));
    }
    cur.pos += 1;
    if width == 0 || height == 0 {
        return Err(Error::InvalidDimensions(format!("{width}x{height}")));
    }
    check_pixel_count(width, height)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let (w, h) = (width as usize, height as usize);
    let samples = w * h * if gray { 1 } else { 3 };
    let data = bytes
        .get(cur.pos..cur.pos + samples)
        .ok_or_else(|| Error::Format("truncated raster".into()))?;
    let scale = |v: u8| -> u8 {
        if maxval == 255 {
            v
        } else {
            let v = u64::from(v).min(maxval);
            ((v * 255 * 2 + maxval) / (2 * maxval)) as u8
        }
    };
    let pixels = if gray {
        data.iter()
            .flat_map(|&v| {
                let v = scale(v);
                [v, v, v]
            })
            .collect()
    } else {
        data.iter().map(|&v| scale(v)).collect()
    };
    ImageBuffer::from_raw(w, h, pixels)
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    use png::{ColorType, Transformations};

    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    check_pixel_count(w as u64, h as u64)?;
    let data = &buf[..info.buffer_size()];
    let pixels: Vec<u8> = match info.color_type {
        ColorType::Rgb => data.to_vec(),
        ColorType::Rgba => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        ColorType::Grayscale => data.iter().flat_map(|&v| [v, v, v]).collect(),
        ColorType::GrayscaleAlpha => data.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        ColorType::Indexed => return Err(Error::Format("unexpanded palette".into())),
    };
    ImageBuffer::from_raw(w, h, pixels)
}

#[cfg(feature = "png")]
fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer
            .write_image_data(&img.pixels)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

#[inline]
fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Bilinear resampling with half-pixel centres and edge clamping.
///
/// Output pixel `(x, y)` samples the source at
/// `((x + 0.5) * sw / dw - 0.5, (y + 0.5) * sh / dh - 0.5)`; the result is
/// rounded half-up.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidDimensions(format!(
            "resize target {out_w}x{out_h}"
        )));
    }
    check_pixel_count(out_w as u64, out_h as u64)?;
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let taps = |src: usize, dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(img.width, out_w);
    let ys = taps(img.height, out_h);
    let mut pixels = Vec::with_capacity(out_w * out_h * 3);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p00 = img.get(x0, y0);
            let p10 = img.get(x1, y0);
            let p01 = img.get(x0, y1);
            let p11 = img.get(x1, y1);
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
                let bot = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                pixels.push(round_half_up(v).clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::from_raw(out_w, out_h, pixels)
}

/// Integer pixel bounds `[x0, x1) x [y0, y1)` covered by `b` after rounding
/// each edge half-up and clamping to the image.
pub fn pixel_bounds(b: &BoundingBox, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    let clamp = |v: f64, hi: usize| round_half_up(v).clamp(0.0, hi as f64) as usize;
    let x0 = clamp(b.x_min, width);
    let x1 = clamp(b.x_max(), width);
    let y0 = clamp(b.y_min, height);
    let y1 = clamp(b.y_max(), height);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::EmptyCrop(format!("{b:?} on {width}x{height}")));
    }
    Ok((x0, y0, x1, y1))
}

pub fn crop_region(img: &ImageBuffer, b: &BoundingBox) -> Result<ImageBuffer> {
    let (x0, y0, x1, y1) = pixel_bounds(b, img.width, img.height)?;
    if (x0, y0, x1, y1) == (0, 0, img.width, img.height) {
        return Ok(img.clone());
    }
    let w = x1 - x0;
    let mut pixels = Vec::with_capacity(w * (y1 - y0) * 3);
    for y in y0..y1 {
        let row = (y * img.width + x0) * 3;
        pixels.extend_from_slice(&img.pixels[row..row + w * 3]);
    }
    ImageBuffer::from_raw(w, y1 - y0, pixels)
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: u64,
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
}

/// The ordered list of images in a dataset. Relative paths are resolved
/// against `root` (the directory holding the manifest file).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            entries,
        };
        m.validate_ids()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn validate_ids(&self) -> Result<()> {
        let n = self.entries.len();
        let mut seen = vec![false; n];
        for e in &self.entries {
            let id = usize::try_from(e.image_id).ok().filter(|&i| i < n);
            match id {
                Some(i) if !seen[i] => seen[i] = true,
                _ => {
                    return Err(Error::Invalid(format!(
                        "manifest image ids must be unique and dense in 0..{n}; offending id {}",
                        e.image_id
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn entry(&self, image_id: u64) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Loads the image for `entry` and checks its recorded dimensions.
    pub fn load(&self, entry: &ManifestEntry) -> Result<ImageBuffer> {
        let path = self.resolve(entry);
        let img = load_image(&path)?;
        if img.width != entry.width || img.height != entry.height {
            return Err(Error::Invalid(format!(
                "{}: manifest says {}x{}, file is {}x{}",
                path.display(),
                entry.width,
                entry.height,
                img.width,
                img.height
            )));
        }
        Ok(img)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, entries)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("manifest entry serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
