//! Sequence container.
//!
//! ```text
//! "DCV1" version:u8
//! orig_w:u32 orig_h:u32 padded_w:u32 padded_h:u32 gop:u32
//! entropy_mode:u8 context_dim:u16 condition_mode:u8 motion_mode:u8 intra_id:u8 frame_count:u32
//! frame_count records:
//!   I: 0x00 intra_id:u8 len:u32 payload
//!   P: 0x01 (len:u32 bytes) x 4 in the order g, s, y, z
//! ```
//! All integers are big-endian.

use crate::bitstream::intra::ByteReader;
use crate::contextual_codec::{ConditionMode, MotionMode};
use crate::entropy_model::EntropyMode;
use crate::error::{Error, Result};
use crate::video_io::FrameRole;

pub const MAGIC: &[u8; 4] = b"DCV1";
pub const FORMAT_VERSION: u8 = 1;
/// Substream indices inside a P record.
pub const SUBSTREAM_G: usize = 0;
pub const SUBSTREAM_S: usize = 1;
pub const SUBSTREAM_Y: usize = 2;
pub const SUBSTREAM_Z: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub orig_width: u32,
    pub orig_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub gop_size: u32,
    pub entropy_mode: EntropyMode,
    pub context_dim: u16,
    pub condition_mode: ConditionMode,
    pub motion_mode: MotionMode,
    pub intra_id: u8,
    pub frame_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameBitstream {
    Intra { codec_id: u8, payload: Vec<u8> },
    /// Substreams in the order g, s, y, z.
    Inter { substreams: [Vec<u8>; 4] },
}

impl FrameBitstream {
    pub fn role(&self) -> FrameRole {
        match self {
            FrameBitstream::Intra { .. } => FrameRole::I,
            FrameBitstream::Inter { .. } => FrameRole::P,
        }
    }

    /// Bits of the record after its type byte. For P records this is
    /// `4 * 32` length-prefix bits plus the substream bits.
    pub fn total_bits(&self) -> u64 {
        match self {
            FrameBitstream::Intra { payload, .. } => 8 + 32 + 8 * payload.len() as u64,
            FrameBitstream::Inter { substreams } => 128 + substreams.iter().map(|s| 8 * s.len() as u64).sum::<u64>(),
        }
    }

    /// Bits of substream `i` of a P record (0 for I records).
    pub fn substream_bits(&self, i: usize) -> u64 {
        match self {
            FrameBitstream::Inter { substreams } => 8 * substreams[i].len() as u64,
            FrameBitstream::Intra { .. } => 0,
        }
    }

    fn write(&self, out: &mut Vec<u8>) -> Result<()> {
        let put = |out: &mut Vec<u8>, s: &[u8]| -> Result<()> {
            let n = u32::try_from(s.len()).map_err(|_| Error::Range("substream exceeds 4 GiB".into()))?;
            out.extend_from_slice(&n.to_be_bytes());
            out.extend_from_slice(s);
            Ok(())
        };
        match self {
            FrameBitstream::Intra { codec_id, payload } => {
                out.push(0);
                out.push(*codec_id);
                put(out, payload)
            }
            FrameBitstream::Inter { substreams } => {
                out.push(1);
                substreams.iter().try_for_each(|s| put(out, s))
            }
        }
    }

    fn read(r: &mut ByteReader) -> Result<Self> {
        match r.u8()? {
            0 => {
                let codec_id = r.u8()?;
                Ok(FrameBitstream::Intra { codec_id, payload: r.prefixed()?.to_vec() })
            }
            1 => {
                let mut subs: [Vec<u8>; 4] = Default::default();
                for (i, s) in subs.iter_mut().enumerate() {
                    *s = r.prefixed().map_err(|e| reindex(e, i))?.to_vec();
                }
                Ok(FrameBitstream::Inter { substreams: subs })
            }
            t => Err(Error::MalformedInput(format!("unknown frame record type {t}"))),
        }
    }
}

fn reindex(e: Error, substream: usize) -> Error {
    match e {
        Error::Corruption { reason, .. } => Error::Corruption { substream, reason },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamContainer {
    pub header: ContainerHeader,
    pub frames: Vec<FrameBitstream>,
}

impl BitstreamContainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        if h.frame_count as usize != self.frames.len() {
            return Err(Error::Contract("header frame count disagrees with the records".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        for v in [h.orig_width, h.orig_height, h.padded_width, h.padded_height, h.gop_size] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.push(h.entropy_mode.to_byte());
        out.extend_from_slice(&h.context_dim.to_be_bytes());
        out.push(h.condition_mode.to_byte());
        out.push(h.motion_mode.to_byte());
        out.push(h.intra_id);
        out.extend_from_slice(&h.frame_count.to_be_bytes());
        for f in &self.frames {
            f.write(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::MalformedInput("not a DCV1 container".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::MalformedInput(format!("unsupported container version {}", bytes[4])));
        }
        let mut r = ByteReader::new(&bytes[5..]);
        let mut u32s = [0u32; 5];
        for v in &mut u32s {
            *v = r.u32()?;
        }
        let [orig_width, orig_height, padded_width, padded_height, gop_size] = u32s;
        let entropy_mode = EntropyMode::from_byte(r.u8()?).ok_or_else(|| Error::MalformedInput("bad entropy mode".into()))?;
        let context_dim = r.u16()?;
        let condition_mode =
            ConditionMode::from_byte(r.u8()?).ok_or_else(|| Error::MalformedInput("bad condition mode".into()))?;
        let motion_mode = MotionMode::from_byte(r.u8()?).ok_or_else(|| Error::MalformedInput("bad motion mode".into()))?;
        let intra_id = r.u8()?;
        let frame_count = r.u32()?;
        let header = ContainerHeader {
            orig_width,
            orig_height,
            padded_width,
            padded_height,
            gop_size,
            entropy_mode,
            context_dim,
            condition_mode,
            motion_mode,
            intra_id,
            frame_count,
        };
        header.validate()?;
        let mut frames = Vec::new();
        for _ in 0..frame_count {
            frames.push(FrameBitstream::read(&mut r)?);
        }
        r.finish()?;
        Ok(Self { header, frames })
    }

    pub fn byte_len(&self) -> Result<usize> {
        Ok(self.to_bytes()?.len())
    }
}

impl ContainerHeader {
    pub fn validate(&self) -> Result<()> {
        let ok = self.orig_width > 0
            && self.orig_height > 0
            && self.padded_width % 64 == 0
            && self.padded_height % 64 == 0
            && self.padded_width >= self.orig_width
            && self.padded_height >= self.orig_height
            && self.padded_width - self.orig_width < 64
            && self.padded_height - self.orig_height < 64
            && self.gop_size > 0;
        if !ok {
            return Err(Error::MalformedInput("inconsistent container header dimensions".into()));
        }
        Ok(())
    }
}
