//! Pluggable intra (I-frame) codecs.

use std::io::{Read, Write};

use candle_core::{DType, Device, Tensor};
use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entropy_model::{bits_of, EntropyMode, EntropyWidths, LatentEntropyModel};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Gdn, SubpelConv};
use crate::quant::round_canonical;
use crate::video_io::FrameTensor;

pub const LOSSLESS_DEFLATE_ID: u8 = 0;
pub const TOY_HYPERPRIOR_ID: u8 = 1;

/// An I-frame codec. `encode` also returns the reconstruction the decoder
/// will produce, which P frames use as their reference.
pub trait IntraCodec {
    fn id(&self) -> u8;
    fn name(&self) -> &'static str;
    fn encode(&self, frame: &FrameTensor) -> Result<(Vec<u8>, FrameTensor)>;
    fn decode(&self, payload: &[u8]) -> Result<FrameTensor>;
}

/// 8-bit RGB, zlib-deflated. Lossless for 8-bit content.
#[derive(Clone, Copy, Debug, Default)]
pub struct LosslessDeflate;

impl IntraCodec for LosslessDeflate {
    fn id(&self) -> u8 {
        LOSSLESS_DEFLATE_ID
    }

    fn name(&self) -> &'static str {
        "lossless-deflate"
    }

    fn encode(&self, frame: &FrameTensor) -> Result<(Vec<u8>, FrameTensor)> {
        let img = frame.to_rgb8();
        let mut out = Vec::new();
        out.extend_from_slice(&(frame.width() as u32).to_be_bytes());
        out.extend_from_slice(&(frame.height() as u32).to_be_bytes());
        let mut z = ZlibEncoder::new(out, Compression::best());
        z.write_all(img.as_raw()).map_err(|e| Error::io("<deflate>", e))?;
        let out = z.finish().map_err(|e| Error::io("<deflate>", e))?;
        Ok((out, FrameTensor::from_rgb8(&img)))
    }

    fn decode(&self, payload: &[u8]) -> Result<FrameTensor> {
        if payload.len() < 8 {
            return Err(Error::corrupt(0, "intra payload shorter than its header"));
        }
        let w = u32::from_be_bytes(payload[0..4].try_into().unwrap()) as usize;
        let h = u32::from_be_bytes(payload[4..8].try_into().unwrap()) as usize;
        let expected = w.checked_mul(h).and_then(|n| n.checked_mul(3)).filter(|&n| n > 0 && n <= 1 << 30);
        let expected = expected.ok_or_else(|| Error::corrupt(0, format!("invalid intra frame size {w}x{h}")))?;
        let mut raw = Vec::with_capacity(expected);
        ZlibDecoder::new(&payload[8..])
            .take(expected as u64 + 1)
            .read_to_end(&mut raw)
            .map_err(|e| Error::corrupt(0, format!("deflate stream: {e}")))?;
        if raw.len() != expected {
            return Err(Error::corrupt(0, format!("intra payload holds {} bytes, expected {expected}", raw.len())));
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("length checked");
        Ok(FrameTensor::from_rgb8(&img))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyIntraConfig {
    pub hidden: usize,
    pub latent: usize,
    pub hyper: usize,
}

impl Default for ToyIntraConfig {
    fn default() -> Self {
        Self { hidden: 32, latent: 32, hyper: 16 }
    }
}

/// Small learned hyperprior image codec (weights in the `intra` group).
#[derive(Clone, Debug)]
pub struct ToyIntra {
    enc: Vec<Conv2d>,
    enc_gdn: Vec<Gdn>,
    dec: Vec<SubpelConv>,
    dec_igdn: Vec<Gdn>,
    pub entropy: LatentEntropyModel,
    latent: usize,
}

const INTRA_MODE: EntropyMode = EntropyMode::HyperOnly;

impl ToyIntra {
    pub fn new(b: &mut Builder, cfg: &ToyIntraConfig) -> Result<Self> {
        let mut b = b.sub("intra");
        let (h, l) = (cfg.hidden, cfg.latent);
        let ew = [3, h, h, h, l];
        let dw = [l, h, h, h, 3];
        let enc = (0..4).map(|i| Conv2d::new(&mut b, &format!("enc{i}"), ew[i], ew[i + 1], 5, 2)).collect::<Result<_>>()?;
        let enc_gdn = (0..3).map(|i| Gdn::new(&mut b, &format!("gdn{i}"), h, false)).collect::<Result<_>>()?;
        let dec = (0..4).map(|i| SubpelConv::new(&mut b, &format!("dec{i}"), dw[i], dw[i + 1])).collect::<Result<_>>()?;
        let dec_igdn = (0..3).map(|i| Gdn::new(&mut b, &format!("igdn{i}"), h, true)).collect::<Result<_>>()?;
        let widths = EntropyWidths { latent: l, hyper: cfg.hyper, temporal: None, fusion_hidden: 2 * l };
        let entropy = LatentEntropyModel::new(&mut b, widths, &[INTRA_MODE])?;
        Ok(Self { enc, enc_gdn, dec, dec_igdn, entropy, latent: l })
    }

    fn dtype(&self) -> DType {
        self.enc[0].weight.dtype()
    }

    fn device(&self) -> Device {
        self.enc[0].weight.device().clone()
    }

    pub fn analysis(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, c) in self.enc.iter().enumerate() {
            h = c.forward(&h)?;
            if let Some(g) = self.enc_gdn.get(i) {
                h = g.forward(&h)?;
            }
        }
        Ok(h)
    }

    pub fn synthesis(&self, y_hat: &Tensor) -> Result<Tensor> {
        let mut h = y_hat.clone();
        for (i, s) in self.dec.iter().enumerate() {
            h = s.forward(&h)?;
            if let Some(g) = self.dec_igdn.get(i) {
                h = g.forward(&h)?;
            }
        }
        Ok(h.clamp(0.0, 1.0)?)
    }

    /// `(x_hat, bits_y, bits_z)` under the training relaxation.
    pub fn forward_train(&self, x: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Tensor, Tensor)> {
        let y = self.analysis(x)?;
        let lat = self.entropy.forward_train(&y, None, INTRA_MODE, rng)?;
        Ok((self.synthesis(&lat.y_hat)?, bits_of(&lat.y_likelihood)?, bits_of(&lat.z_likelihood)?))
    }
}

impl IntraCodec for ToyIntra {
    fn id(&self) -> u8 {
        TOY_HYPERPRIOR_ID
    }

    fn name(&self) -> &'static str {
        "toy-hyperprior"
    }

    fn encode(&self, frame: &FrameTensor) -> Result<(Vec<u8>, FrameTensor)> {
        let padded = frame.pad_to_multiple(64);
        let x = padded.to_tensor(self.dtype(), &self.device())?;
        let y = self.analysis(&x)?;
        let y_hat = round_canonical(&y)?;
        let (ys, zs) = self.entropy.compress(&y, &y_hat, None, INTRA_MODE)?;
        let mut out = Vec::new();
        for v in [frame.width(), frame.height()] {
            out.extend_from_slice(&(v as u32).to_be_bytes());
        }
        for s in [&ys, &zs] {
            out.extend_from_slice(&(s.len() as u32).to_be_bytes());
            out.extend_from_slice(s);
        }
        let recon = FrameTensor::from_tensor(&self.synthesis(&y_hat)?)?.crop(frame.width(), frame.height())?;
        Ok((out, recon))
    }

    fn decode(&self, payload: &[u8]) -> Result<FrameTensor> {
        let mut r = ByteReader::new(payload);
        let w = r.u32()? as usize;
        let h = r.u32()? as usize;
        if w == 0 || h == 0 || w > 1 << 15 || h > 1 << 15 {
            return Err(Error::corrupt(0, format!("invalid intra frame size {w}x{h}")));
        }
        let ys = r.prefixed()?;
        let zs = r.prefixed()?;
        r.finish()?;
        let (pw, ph) = (w.div_ceil(64) * 64, h.div_ceil(64) * 64);
        let (y_hat, _) = self.entropy.decompress(ys, zs, (ph / 16, pw / 16), None, INTRA_MODE, None, 0)?;
        if y_hat.dim(1)? != self.latent {
            return Err(Error::corrupt(0, "intra latent width mismatch"));
        }
        FrameTensor::from_tensor(&self.synthesis(&y_hat)?)?.crop(w, h)
    }
}

/// Big-endian cursor over a byte slice; reads past the end are corruption.
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::corrupt(0, format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    /// `u32` length followed by that many bytes.
    pub fn prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.bytes(n)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::corrupt(0, format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Intra codecs available to a decoder, by id.
#[derive(Default)]
pub struct IntraRegistry<'a> {
    codecs: Vec<&'a dyn IntraCodec>,
}

impl<'a> IntraRegistry<'a> {
    pub fn new() -> Self {
        Self { codecs: Vec::new() }
    }

    pub fn register(&mut self, codec: &'a dyn IntraCodec) {
        self.codecs.retain(|c| c.id() != codec.id());
        self.codecs.push(codec);
    }

    pub fn get(&self, id: u8) -> Result<&'a dyn IntraCodec> {
        self.codecs.iter().copied().find(|c| c.id() == id).ok_or(Error::UnsupportedCodec(id))
    }

    pub fn by_name(&self, name: &str) -> Result<&'a dyn IntraCodec> {
        self.codecs
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("no intra codec named {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn pattern(w: usize, h: usize) -> FrameTensor {
        FrameTensor::from_fn(w, h, |c, y, x| ((x * 7 + y * 3 + c * 50) % 256) as f32 / 255.0)
    }

    #[test]
    fn deflate_is_lossless_on_8bit() {
        let f = pattern(37, 21);
        let codec = LosslessDeflate;
        let (bytes, recon) = codec.encode(&f).unwrap();
        assert_eq!(recon, f);
        assert_eq!(codec.decode(&bytes).unwrap(), f);
        assert!(matches!(codec.decode(&bytes[..bytes.len() - 2]), Err(Error::Corruption { .. })));
    }

    #[test]
    fn toy_intra_round_trip() {
        let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
        let codec = ToyIntra::new(&mut store.root(), &ToyIntraConfig { hidden: 8, latent: 8, hyper: 4 }).unwrap();
        let f = pattern(70, 64);
        let (bytes, recon) = codec.encode(&f).unwrap();
        let dec = codec.decode(&bytes).unwrap();
        assert_eq!(dec, recon);
        assert_eq!((dec.width(), dec.height()), (70, 64));
        assert!(store.names().all(|n| n.starts_with("intra.")));
    }

    #[test]
    fn registry_lookup() {
        let d = LosslessDeflate;
        let mut reg = IntraRegistry::new();
        reg.register(&d);
        assert_eq!(reg.get(0).unwrap().name(), "lossless-deflate");
        assert!(matches!(reg.get(9), Err(Error::UnsupportedCodec(9))));
        assert!(reg.by_name("toy-hyperprior").is_err());
    }
}
