//! Frame and sequence encode/decode on top of the model and the container.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::bitstream::container::{BitstreamContainer, ContainerHeader, FrameBitstream, SUBSTREAM_G, SUBSTREAM_S, SUBSTREAM_Y, SUBSTREAM_Z};
use crate::bitstream::intra::{IntraCodec, IntraRegistry};
use crate::contextual_codec::{encoder_input, CodecConfig, MotionMode};
use crate::entropy_model::EntropyMode;
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::motion::MotionField;
use crate::quant::round_canonical;
use crate::video_io::{segment_len, FrameRole, FrameSequence, FrameTensor, GopStructure};

/// Checks that `config` is codable by `model` (same architecture, a head for the entropy mode).
pub fn check_config(model: &CodecModel, config: &CodecConfig) -> Result<()> {
    let m = model.codec();
    if m.condition_mode != config.condition_mode || m.motion_mode != config.motion_mode || m.context_dim != config.context_dim {
        return Err(Error::Config(format!(
            "model was built for {}/{}/context {}, requested {}/{}/context {}",
            m.condition_mode, m.motion_mode, m.context_dim, config.condition_mode, config.motion_mode, config.context_dim
        )));
    }
    if !model.config.entropy_modes.contains(&config.entropy_mode) {
        return Err(Error::Config(format!("model has no fusion head for entropy mode {}", config.entropy_mode)));
    }
    Ok(())
}

fn check_padded(x: &FrameTensor) -> Result<()> {
    if x.width() % 64 != 0 || x.height() % 64 != 0 {
        return Err(Error::Argument(format!("frame {}x{} is not padded to a multiple of 64", x.width(), x.height())));
    }
    Ok(())
}

fn temporal_for(model: &CodecModel, cond: &Tensor, mode: EntropyMode) -> Result<Option<Tensor>> {
    Ok(if mode.uses_temporal() { Some(model.entropy.temporal_prior(cond)?) } else { None })
}

/// Encodes a padded P frame against the padded previous reconstruction.
///
/// Returns the record and the encoder-side reconstruction, which equals the
/// decoder output bit for bit.
pub fn encode_frame_p(
    model: &CodecModel,
    x: &FrameTensor,
    reference: &FrameTensor,
    config: &CodecConfig,
) -> Result<(FrameBitstream, FrameTensor)> {
    check_config(model, config)?;
    check_padded(x)?;
    if !x.same_dims(reference) {
        return Err(Error::Argument("current and reference frames differ in size".into()));
    }
    let (dtype, dev) = (model.dtype(), model.device());
    let xt = x.to_tensor(dtype, dev)?;
    let rt = reference.to_tensor(dtype, dev)?;
    let (w, h) = (x.width(), x.height());

    let (g, s, mv_hat) = match config.motion_mode {
        MotionMode::Memc => {
            let flow = MotionField::new(model.flow.estimate(&rt, &xt)?)?;
            let block = model.mv.encode(&flow)?;
            let (g, s) = model.mv.compress(&block)?;
            (g, s, model.mv.synthesis(&block.g_hat)?)
        }
        MotionMode::None => (Vec::new(), Vec::new(), Tensor::zeros((1, 2, h, w), dtype, dev)?),
    };
    let cond = model.condition(&rt, &mv_hat)?;
    let y = model.encoder.forward(&encoder_input(&xt, &cond, config.condition_mode)?)?;
    let y_hat = round_canonical(&y)?;
    let temporal = temporal_for(model, &cond, config.entropy_mode)?;
    let (ys, zs) = model.entropy.compress(&y, &y_hat, temporal.as_ref(), config.entropy_mode)?;
    let recon = FrameTensor::from_tensor(&model.decoder.decode_quantized(&y_hat, &cond)?)?;
    Ok((FrameBitstream::Inter { substreams: [g, s, ys, zs] }, recon))
}

/// Decodes a P record. `table_order`, valid only without the spatial
/// prior, permutes the order in which per-element tables are prepared.
pub fn decode_frame_p(
    model: &CodecModel,
    bits: &FrameBitstream,
    reference: &FrameTensor,
    config: &CodecConfig,
    table_order: Option<&[usize]>,
) -> Result<FrameTensor> {
    check_config(model, config)?;
    check_padded(reference)?;
    let FrameBitstream::Inter { substreams } = bits else {
        return Err(Error::Argument("decode_frame_p needs a P record".into()));
    };
    let (dtype, dev) = (model.dtype(), model.device());
    let (w, h) = (reference.width(), reference.height());
    let rt = reference.to_tensor(dtype, dev)?;
    let mv_hat = match config.motion_mode {
        MotionMode::Memc => {
            let block = model.mv.decompress(&substreams[SUBSTREAM_G], &substreams[SUBSTREAM_S], w, h)?;
            model.mv.synthesis(&block.g_hat)?
        }
        MotionMode::None => {
            if !substreams[SUBSTREAM_G].is_empty() || !substreams[SUBSTREAM_S].is_empty() {
                return Err(Error::corrupt(SUBSTREAM_G, "motion substreams present with motion disabled"));
            }
            Tensor::zeros((1, 2, h, w), dtype, dev)?
        }
    };
    let cond = model.condition(&rt, &mv_hat)?;
    let temporal = temporal_for(model, &cond, config.entropy_mode)?;
    let (y_hat, _) = model.entropy.decompress(
        &substreams[SUBSTREAM_Y],
        &substreams[SUBSTREAM_Z],
        (h / 16, w / 16),
        temporal.as_ref(),
        config.entropy_mode,
        table_order,
        SUBSTREAM_Y,
    )?;
    FrameTensor::from_tensor(&model.decoder.decode_quantized(&y_hat, &cond)?)
}

/// One line of the per-frame rate report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRate {
    pub frame: usize,
    #[serde(rename = "type")]
    pub frame_type: String,
    pub bits_g: u64,
    pub bits_s: u64,
    pub bits_y: u64,
    pub bits_z: u64,
    pub bpp: f64,
}

impl FrameRate {
    pub fn of(frame: usize, record: &FrameBitstream, pixels: usize) -> Self {
        Self {
            frame,
            frame_type: match record.role() {
                FrameRole::I => "I".into(),
                FrameRole::P => "P".into(),
            },
            bits_g: record.substream_bits(SUBSTREAM_G),
            bits_s: record.substream_bits(SUBSTREAM_S),
            bits_y: record.substream_bits(SUBSTREAM_Y),
            bits_z: record.substream_bits(SUBSTREAM_Z),
            bpp: record.total_bits() as f64 / pixels as f64,
        }
    }
}

pub struct SequenceEncoding {
    pub container: BitstreamContainer,
    /// Encoder-side reconstructions at the original size.
    pub reconstructions: Vec<FrameTensor>,
    pub rates: Vec<FrameRate>,
}

impl SequenceEncoding {
    /// Container bits over all frames and original pixels.
    pub fn bpp(&self) -> Result<f64> {
        let h = &self.container.header;
        let px = h.orig_width as f64 * h.orig_height as f64 * h.frame_count as f64;
        Ok(8.0 * self.container.byte_len()? as f64 / px)
    }
}

/// Encodes a sequence: I frames through `intra`, P frames through the model,
/// each P frame referencing the previous reconstruction.
pub fn encode_sequence(
    seq: &FrameSequence,
    gop: &GopStructure,
    model: &CodecModel,
    config: &CodecConfig,
    intra: &dyn IntraCodec,
) -> Result<SequenceEncoding> {
    check_config(model, config)?;
    if gop.frame_roles.len() != seq.len() {
        return Err(Error::Argument("GOP structure does not cover the sequence".into()));
    }
    let (ow, oh) = (seq.width(), seq.height());
    let mut frames = Vec::with_capacity(seq.len());
    let mut recons = Vec::with_capacity(seq.len());
    let mut rates = Vec::with_capacity(seq.len());
    let mut reference: Option<FrameTensor> = None;
    for (i, (frame, role)) in seq.frames().iter().zip(&gop.frame_roles).enumerate() {
        let (record, padded_recon) = match (role, &reference) {
            (FrameRole::I, _) | (FrameRole::P, None) => {
                let (payload, recon) = intra.encode(frame)?;
                (FrameBitstream::Intra { codec_id: intra.id(), payload }, recon.pad_to_multiple(64))
            }
            (FrameRole::P, Some(r)) => encode_frame_p(model, &frame.pad_to_multiple(64), r, config)?,
        };
        rates.push(FrameRate::of(i, &record, ow * oh));
        recons.push(padded_recon.crop(ow, oh)?);
        reference = Some(padded_recon);
        frames.push(record);
    }
    let header = ContainerHeader {
        orig_width: ow as u32,
        orig_height: oh as u32,
        padded_width: ow.div_ceil(64) as u32 * 64,
        padded_height: oh.div_ceil(64) as u32 * 64,
        gop_size: gop.gop_size as u32,
        entropy_mode: config.entropy_mode,
        context_dim: config.context_dim as u16,
        condition_mode: config.condition_mode,
        motion_mode: config.motion_mode,
        intra_id: intra.id(),
        frame_count: frames.len() as u32,
    };
    Ok(SequenceEncoding { container: BitstreamContainer { header, frames }, reconstructions: recons, rates })
}

/// Convenience wrapper segmenting with a fixed GOP size.
pub fn encode_sequence_gop(
    seq: &FrameSequence,
    gop_size: usize,
    model: &CodecModel,
    config: &CodecConfig,
    intra: &dyn IntraCodec,
) -> Result<SequenceEncoding> {
    encode_sequence(seq, &segment_len(seq.len(), gop_size)?, model, config, intra)
}

/// Decodes a container; only the weights come from outside the stream.
pub fn decode_sequence(container: &BitstreamContainer, model: &CodecModel, intra: &IntraRegistry) -> Result<FrameSequence> {
    let h = &container.header;
    h.validate()?;
    let config = CodecConfig {
        condition_mode: h.condition_mode,
        motion_mode: h.motion_mode,
        entropy_mode: h.entropy_mode,
        context_dim: h.context_dim as usize,
        ..*model.codec()
    };
    let (ow, oh) = (h.orig_width as usize, h.orig_height as usize);
    let mut reference: Option<FrameTensor> = None;
    let mut out = Vec::with_capacity(container.frames.len());
    for record in &container.frames {
        let padded = match (record, &reference) {
            (FrameBitstream::Intra { codec_id, payload }, _) => {
                let f = intra.get(*codec_id)?.decode(payload)?;
                if (f.width(), f.height()) != (ow, oh) {
                    return Err(Error::corrupt(0, "intra frame size disagrees with the header"));
                }
                f.pad_to_multiple(64)
            }
            (FrameBitstream::Inter { .. }, None) => {
                return Err(Error::MalformedInput("P record without a preceding I record".into()))
            }
            (p, Some(r)) => decode_frame_p(model, p, r, &config, None)?,
        };
        out.push(padded.crop(ow, oh)?);
        reference = Some(padded);
    }
    FrameSequence::new(out, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::intra::LosslessDeflate;
    use crate::model::ModelConfig;
    use candle_core::{DType, Device};

    fn clip(n: usize, w: usize, h: usize) -> FrameSequence {
        let frames = (0..n)
            .map(|t| {
                FrameTensor::from_fn(w, h, |c, y, x| {
                    let v = ((x + 2 * t) as f32 * 0.3).sin() * 0.3 + (y as f32 * 0.2).cos() * 0.2 + 0.5;
                    (v + c as f32 * 0.05).clamp(0.0, 1.0)
                })
                .quantize_8bit()
            })
            .collect();
        FrameSequence::new(frames, 30.0).unwrap()
    }

    #[test]
    fn sequence_round_trip_all_modes() {
        let model = CodecModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
        let seq = clip(3, 70, 64);
        let intra = LosslessDeflate;
        let mut reg = IntraRegistry::new();
        reg.register(&intra);
        for mode in [EntropyMode::HyperTemporal, EntropyMode::HyperSpatialTemporal] {
            let cfg = CodecConfig { entropy_mode: mode, ..*model.codec() };
            let enc = encode_sequence_gop(&seq, 10, &model, &cfg, &intra).unwrap();
            assert_eq!(enc.container.frames.len(), 3);
            assert_eq!(enc.container.frames[1].role(), FrameRole::P);
            let bytes = enc.container.to_bytes().unwrap();
            let parsed = BitstreamContainer::from_bytes(&bytes).unwrap();
            let dec = decode_sequence(&parsed, &model, &reg).unwrap();
            assert_eq!(dec.len(), 3);
            for (a, b) in dec.frames().iter().zip(&enc.reconstructions) {
                assert_eq!(a, b);
            }
            let again = encode_sequence_gop(&seq, 10, &model, &cfg, &intra).unwrap();
            assert_eq!(again.container.to_bytes().unwrap(), bytes);
            let p = &enc.rates[1];
            assert_eq!(p.frame_type, "P");
            let rec = &enc.container.frames[1];
            assert_eq!(rec.total_bits(), 128 + p.bits_g + p.bits_s + p.bits_y + p.bits_z);
        }
    }

    #[test]
    fn corrupted_substream_reports_index() {
        let model = CodecModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
        let seq = clip(2, 64, 64);
        let cfg = CodecConfig { entropy_mode: EntropyMode::HyperTemporal, ..*model.codec() };
        let reference = seq.frames()[0].clone();
        let (bits, _) = encode_frame_p(&model, &seq.frames()[1], &reference, &cfg).unwrap();
        let FrameBitstream::Inter { mut substreams } = bits else { unreachable!() };
        for (i, expect) in [(SUBSTREAM_Y, 2usize), (SUBSTREAM_S, 1)] {
            let mut s = substreams.clone();
            s[i].truncate(s[i].len() - 1);
            let err = decode_frame_p(&model, &FrameBitstream::Inter { substreams: s }, &reference, &cfg, None).unwrap_err();
            assert!(matches!(err, Error::Corruption { substream, .. } if substream == expect), "{err}");
        }
        substreams[SUBSTREAM_Z].clear();
        let err = decode_frame_p(&model, &FrameBitstream::Inter { substreams }, &reference, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Corruption { substream: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_intra_id_is_unsupported() {
        let model = CodecModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
        let seq = clip(1, 64, 64);
        let intra = LosslessDeflate;
        let enc = encode_sequence_gop(&seq, 10, &model, model.codec(), &intra).unwrap();
        let reg = IntraRegistry::new();
        assert!(matches!(decode_sequence(&enc.container, &model, &reg), Err(Error::UnsupportedCodec(0))));
    }
}
