//! Raw video ingestion, color conversion and GOP segmentation.
//!
//! Frames are held as planar RGB `f32` in `[0, 1]`; 8-bit quantization only
//! happens at file boundaries.
//!
//! Color conversion is BT.601 limited range. With `Kr = 0.299`,
//! `Kb = 0.114`, `Kg = 1 - Kr - Kb` and RGB in `[0, 1]`:
//!
//! ```text
//! Y' = Kr*R + Kg*G + Kb*B
//! Pb = (B - Y') / (2 * (1 - Kb))
//! Pr = (R - Y') / (2 * (1 - Kr))
//! Y  = 16  + 219 * Y'
//! Cb = 128 + 224 * Pb
//! Cr = 128 + 224 * Pr
//! ```
//!
//! The inverse solves the same system exactly, and RGB outputs are clamped
//! to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const KR: f64 = 0.299;
const KB: f64 = 0.114;
const KG: f64 = 1.0 - KR - KB;

/// One RGB frame, planar `[3, H, W]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FrameTensor {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!("frame dimensions must be positive, got {width}x{height}")));
        }
        if data.len() != 3 * width * height {
            return Err(Error::Argument(format!(
                "frame buffer holds {} values, expected 3*{width}*{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    /// Builds a frame from a closure over `(channel, y, x)`; values are clamped.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::from_fn(width, height, |_, _, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &FrameTensor) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Pads right/bottom by reflection (edge sample not repeated) so both
    /// dims are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> FrameTensor {
        let w = self.width.div_ceil(m) * m;
        let h = self.height.div_ceil(m) * m;
        if w == self.width && h == self.height {
            return self.clone();
        }
        FrameTensor::from_fn(w, h, |c, y, x| self.get(c, reflect_index(y, self.height), reflect_index(x, self.width)))
    }

    /// Crops the top-left `width x height` window.
    pub fn crop(&self, width: usize, height: usize) -> Result<FrameTensor> {
        if width > self.width || height > self.height || width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "cannot crop {width}x{height} from a {}x{} frame",
                self.width, self.height
            )));
        }
        self.crop_at(0, 0, width, height)
    }

    pub fn crop_at(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<FrameTensor> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Argument("crop window exceeds frame".into()));
        }
        Ok(FrameTensor::from_fn(width, height, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Rounds every sample to the nearest 8-bit level.
    pub fn quantize_8bit(&self) -> FrameTensor {
        let data = self.data.iter().map(|v| (v * 255.0).round() / 255.0).collect();
        FrameTensor { width: self.width, height: self.height, data }
    }

    /// `[1, 3, H, W]` tensor in the requested dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `[1, 3, H, W]` or `[3, H, W]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<FrameTensor> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Argument(format!("expected a rank 3 or 4 tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Argument(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(FrameTensor { width: w, height: h, data })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> FrameTensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        FrameTensor::from_fn(w, h, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// Ordered frames of identical dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<FrameTensor>,
    pub frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<FrameTensor>, frame_rate: f64) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::EmptyInput("sequence has no frames".into()))?;
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| !f.same_dims(first)) {
            return Err(Error::MalformedInput(format!(
                "frame {i} is {}x{}, expected {}x{}",
                f.width(),
                f.height(),
                first.width(),
                first.height()
            )));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[FrameTensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<FrameTensor> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRole {
    I,
    P,
}

/// Role assignment of a sequence split into groups of pictures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GopStructure {
    pub gop_size: usize,
    pub frame_roles: Vec<FrameRole>,
}

impl GopStructure {
    /// Frame index ranges, one per GOP.
    pub fn gops(&self) -> Vec<std::ops::Range<usize>> {
        let n = self.frame_roles.len();
        (0..n).step_by(self.gop_size).map(|s| s..(s + self.gop_size).min(n)).collect()
    }

    pub fn intra_count(&self) -> usize {
        self.frame_roles.iter().filter(|r| **r == FrameRole::I).count()
    }
}

pub fn segment_gops(seq: &FrameSequence, gop_size: usize) -> Result<GopStructure> {
    segment_len(seq.len(), gop_size)
}

pub fn segment_len(frames: usize, gop_size: usize) -> Result<GopStructure> {
    if gop_size < 1 {
        return Err(Error::Argument("gop size must be at least 1".into()));
    }
    let frame_roles = (0..frames)
        .map(|i| if i % gop_size == 0 { FrameRole::I } else { FrameRole::P })
        .collect();
    Ok(GopStructure { gop_size, frame_roles })
}

/// Full-resolution 8-bit BT.601 limited-range YUV of a single pixel.
pub fn rgb_to_yuv8(r: f32, g: f32, b: f32) -> [u8; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let y = KR * r + KG * g + KB * b;
    let pb = (b - y) / (2.0 * (1.0 - KB));
    let pr = (r - y) / (2.0 * (1.0 - KR));
    let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    [q(16.0 + 219.0 * y), q(128.0 + 224.0 * pb), q(128.0 + 224.0 * pr)]
}

pub fn yuv8_to_rgb(y: u8, u: u8, v: u8) -> [f32; 3] {
    let yl = (y as f64 - 16.0) / 219.0;
    let pb = (u as f64 - 128.0) / 224.0;
    let pr = (v as f64 - 128.0) / 224.0;
    let r = yl + 2.0 * (1.0 - KR) * pr;
    let b = yl + 2.0 * (1.0 - KB) * pb;
    let g = (yl - KR * r - KB * b) / KG;
    [r, g, b].map(|c| c.clamp(0.0, 1.0) as f32)
}

fn check_even(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
        return Err(Error::Argument(format!("YUV420 dimensions must be positive and even, got {width}x{height}")));
    }
    Ok(())
}

/// Decodes planar YUV420 bytes (Y, then U, then V per frame).
pub fn decode_yuv420(bytes: &[u8], width: usize, height: usize, max_frames: usize) -> Result<FrameSequence> {
    check_even(width, height)?;
    let luma = width * height;
    let frame_bytes = luma * 3 / 2;
    if bytes.len() % frame_bytes != 0 {
        return Err(Error::MalformedInput(format!(
            "{} bytes is not a multiple of the {frame_bytes}-byte {width}x{height} YUV420 frame",
            bytes.len()
        )));
    }
    let available = bytes.len() / frame_bytes;
    let n = available.min(max_frames);
    if n == 0 {
        return Err(Error::EmptyInput("no YUV420 frames available".into()));
    }
    let (cw, ch) = (width / 2, height / 2);
    let frames = bytes
        .chunks_exact(frame_bytes)
        .take(n)
        .map(|buf| {
            let (yp, rest) = buf.split_at(luma);
            let (up, vp) = rest.split_at(cw * ch);
            let mut data = vec![0f32; 3 * luma];
            for y in 0..height {
                for x in 0..width {
                    let ci = (y / 2) * cw + x / 2;
                    let rgb = yuv8_to_rgb(yp[y * width + x], up[ci], vp[ci]);
                    for (c, v) in rgb.into_iter().enumerate() {
                        data[c * luma + y * width + x] = v;
                    }
                }
            }
            FrameTensor { width, height, data }
        })
        .collect();
    FrameSequence::new(frames, 30.0)
}

pub fn load_yuv420(path: &Path, width: usize, height: usize, max_frames: usize) -> Result<FrameSequence> {
    check_even(width, height)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_yuv420(&bytes, width, height, max_frames)
}

/// Encodes frames as planar YUV420; chroma is the 2x2 mean of full-resolution chroma.
pub fn encode_yuv420(seq: &FrameSequence) -> Result<Vec<u8>> {
    let (width, height) = (seq.width(), seq.height());
    check_even(width, height)?;
    let (cw, ch) = (width / 2, height / 2);
    let mut out = Vec::with_capacity(seq.len() * width * height * 3 / 2);
    for f in seq.frames() {
        let mut yp = vec![0u8; width * height];
        let mut us = vec![0u32; cw * ch];
        let mut vs = vec![0u32; cw * ch];
        for y in 0..height {
            for x in 0..width {
                let [yy, u, v] = rgb_to_yuv8(f.get(0, y, x), f.get(1, y, x), f.get(2, y, x));
                yp[y * width + x] = yy;
                us[(y / 2) * cw + x / 2] += u as u32;
                vs[(y / 2) * cw + x / 2] += v as u32;
            }
        }
        out.extend_from_slice(&yp);
        out.extend(us.iter().map(|s| ((s + 2) / 4) as u8));
        out.extend(vs.iter().map(|s| ((s + 2) / 4) as u8));
    }
    Ok(out)
}

/// Loads every file in `dir` matching `pattern`, in lexicographic filename order.
pub fn load_image_sequence(dir: &Path, pattern: &str) -> Result<FrameSequence> {
    let full = dir.join(pattern);
    let full = full.to_str().ok_or_else(|| Error::Argument("non UTF-8 path".into()))?;
    let mut paths: Vec<PathBuf> = glob::glob(full)
        .map_err(|e| Error::Argument(format!("bad pattern {pattern}: {e}")))?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!("no files match {}", full)));
    }
    let frames = paths
        .iter()
        .map(|p| {
            let img = image::open(p)?.to_rgb8();
            Ok(FrameTensor::from_rgb8(&img))
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, 30.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    Yuv420,
    Png,
    Ppm,
}

/// One entry of a dataset manifest (a JSON list of these).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub path: PathBuf,
    pub format: SourceFormat,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub height: usize,
    pub frames: usize,
    pub gop: usize,
}

impl DatasetEntry {
    pub fn load(&self) -> Result<FrameSequence> {
        let seq = match self.format {
            SourceFormat::Yuv420 => load_yuv420(&self.path, self.width, self.height, self.frames)?,
            SourceFormat::Png => load_image_sequence(&self.path, "*.png")?,
            SourceFormat::Ppm => load_image_sequence(&self.path, "*.ppm")?,
        };
        if seq.len() > self.frames {
            let fr = seq.frame_rate;
            let mut frames = seq.into_frames();
            frames.truncate(self.frames);
            return FrameSequence::new(frames, fr);
        }
        Ok(seq)
    }
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<DatasetEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        if e.gop == 0 {
            return Err(Error::Config(format!("manifest entry {} has gop 0", e.name)));
        }
    }
    Ok(entries)
}

/// Index `i` mirrored into `[0, n)`, periodic with period `2(n - 1)`.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_black_frames() {
        let mut bytes = vec![0u8; 768];
        for frame in bytes.chunks_mut(384) {
            frame[256..].fill(128);
        }
        let seq = decode_yuv420(&bytes, 16, 16, 10).unwrap();
        assert_eq!(seq.len(), 2);
        for f in seq.frames() {
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn size_mismatch_is_malformed() {
        let err = decode_yuv420(&[0u8; 769], 16, 16, 10).unwrap_err();
        assert!(matches!(err, Error::MalformedInput(_)));
        assert!(matches!(decode_yuv420(&[], 16, 16, 10), Err(Error::EmptyInput(_))));
        assert!(matches!(decode_yuv420(&[0u8; 768], 15, 16, 10), Err(Error::Argument(_))));
    }

    #[test]
    fn max_frames_truncates() {
        let seq = decode_yuv420(&vec![128u8; 384 * 5], 16, 16, 3).unwrap();
        assert_eq!(seq.len(), 3);
    }

    #[test]
    fn gradient_round_trip_within_two_levels() {
        let f = FrameTensor::from_fn(64, 64, |c, y, x| ((x + 2 * y + 37 * c) % 64) as f32 / 63.0);
        let mut worst = 0f32;
        for y in 0..64 {
            for x in 0..64 {
                let [yy, u, v] = rgb_to_yuv8(f.get(0, y, x), f.get(1, y, x), f.get(2, y, x));
                let back = yuv8_to_rgb(yy, u, v);
                for c in 0..3 {
                    worst = worst.max((back[c] - f.get(c, y, x)).abs());
                }
            }
        }
        assert!(worst <= 2.0 / 255.0, "worst {worst}");
    }

    #[test]
    fn gop_segmentation() {
        let g = segment_len(100, 10).unwrap();
        assert_eq!(g.gops().len(), 10);
        for r in g.gops() {
            assert_eq!(g.frame_roles[r.start], FrameRole::I);
            assert!(g.frame_roles[r.start + 1..r.end].iter().all(|r| *r == FrameRole::P));
            assert_eq!(r.len(), 10);
        }
        assert_eq!(segment_len(12, 12).unwrap().gops().len(), 1);
        let sizes: Vec<usize> = segment_len(25, 10).unwrap().gops().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        assert!(matches!(segment_len(5, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn image_sequences() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            let f = FrameTensor::from_fn(64, 64, |c, y, x| ((x + y + c + i) % 7) as f32 / 6.0);
            f.save_png(&dir.path().join(format!("f{i:03}.png"))).unwrap();
        }
        let seq = load_image_sequence(dir.path(), "*.png").unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.frames()[2].get(0, 0, 0), 2.0 / 6.0);

        let odd = tempfile::tempdir().unwrap();
        FrameTensor::filled(8, 8, 0.5).save_png(&odd.path().join("a.png")).unwrap();
        FrameTensor::filled(16, 8, 0.5).save_png(&odd.path().join("b.png")).unwrap();
        assert!(matches!(load_image_sequence(odd.path(), "*.png"), Err(Error::MalformedInput(_))));
        assert!(matches!(load_image_sequence(odd.path(), "*.ppm"), Err(Error::EmptyInput(_))));

        let white = tempfile::tempdir().unwrap();
        FrameTensor::filled(8, 8, 1.0).save_png(&white.path().join("w.png")).unwrap();
        let seq = load_image_sequence(white.path(), "*.png").unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.frames()[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pad_and_crop() {
        let f = FrameTensor::from_fn(10, 6, |c, y, x| (c + y + x) as f32 / 20.0);
        let p = f.pad_to_multiple(8);
        assert_eq!((p.width(), p.height()), (16, 8));
        assert_eq!(p.get(1, 7, 15), f.get(1, 3, 3));
        assert_eq!(p.get(0, 6, 10), f.get(0, 4, 8));
        assert_eq!(reflect_index(9, 4), 3);
        let single = FrameTensor::filled(1, 1, 0.25).pad_to_multiple(4);
        assert!(single.data().iter().all(|&v| v == 0.25));
        assert_eq!(p.crop(10, 6).unwrap(), f);
    }

    #[test]
    fn manifest_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(
            &path,
            r#"[{"name":"a","path":"a.yuv","format":"yuv420","width":16,"height":16,"frames":2,"gop":10}]"#,
        )
        .unwrap();
        fs::write(dir.path().join("a.yuv"), vec![128u8; 384 * 3]).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m[0].format, SourceFormat::Yuv420);
        assert_eq!(m[0].load().unwrap().len(), 2);
    }
}
