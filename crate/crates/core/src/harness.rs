//! Benchmark orchestration and RD-curve emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::bitstream::codec::encode_sequence_gop;
use crate::bitstream::intra::{IntraCodec, LosslessDeflate};
use crate::contextual_codec::CodecConfig;
use crate::entropy_model::EntropyMode;
use crate::error::{Error, Result};
use crate::metrics::{bd_rate, ms_ssim, psnr, RDCurve, RDPoint, MS_SSIM_MIN_SIDE};
use crate::training::load_checkpoint;
use crate::video_io::{DatasetEntry, FrameSequence};

/// One row of the RD CSV: `codec,sequence,lambda,bpp,psnr,msssim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub codec: String,
    pub sequence: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityMetric {
    Psnr,
    Msssim,
}

impl std::str::FromStr for QualityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(Self::Psnr),
            "msssim" | "ms-ssim" | "ms_ssim" => Ok(Self::Msssim),
            _ => Err(Error::Argument(format!("unknown metric {s}"))),
        }
    }
}

pub fn write_rd_csv(path: &Path, rows: &[RdRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<std::result::Result<Vec<RdRow>, _>>().map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::MalformedInput(format!("{}: {e}", path.display()))
    }
}

/// Groups rows into curves by `(codec, sequence)`.
pub fn curves_from_rows(rows: &[RdRow], metric: QualityMetric) -> Result<Vec<RDCurve>> {
    let mut groups: BTreeMap<(String, String), Vec<RDPoint>> = BTreeMap::new();
    for r in rows {
        let quality = match metric {
            QualityMetric::Psnr => r.psnr,
            QualityMetric::Msssim => {
                r.msssim.ok_or_else(|| Error::MalformedInput(format!("row {}/{} has no MS-SSIM", r.codec, r.sequence)))?
            }
        };
        groups.entry((r.codec.clone(), r.sequence.clone())).or_default().push(RDPoint { bpp: r.bpp, quality });
    }
    groups.into_iter().map(|((c, s), pts)| RDCurve::new(c, s, pts)).collect()
}

/// Per-sequence BD-rate of `test` against `anchor` and their mean.
pub fn bd_rate_table(anchor: &[RDCurve], test: &[RDCurve]) -> Result<(Vec<(String, f64)>, f64)> {
    let mut out = Vec::new();
    for t in test {
        let a = anchor
            .iter()
            .find(|a| a.sequence == t.sequence)
            .ok_or_else(|| Error::Argument(format!("anchor has no curve for sequence {}", t.sequence)))?;
        out.push((t.sequence.clone(), bd_rate(a, t)?));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("no test curves".into()));
    }
    let mean = out.iter().map(|p| p.1).sum::<f64>() / out.len() as f64;
    Ok((out, mean))
}

/// Per-frame quality of a reconstruction against its reference.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualityReport {
    pub frames: usize,
    pub psnr: Option<Vec<f64>>,
    pub msssim: Option<Vec<f64>>,
    pub mean_psnr: Option<f64>,
    /// Frame-averaged.
    pub mean_msssim: Option<f64>,
}

pub fn evaluate(recon: &FrameSequence, reference: &FrameSequence, metrics: &[QualityMetric]) -> Result<QualityReport> {
    if recon.len() != reference.len() || recon.is_empty() {
        return Err(Error::Argument(format!("{} reconstructed frames for {} reference frames", recon.len(), reference.len())));
    }
    let per = |f: fn(&crate::video_io::FrameTensor, &crate::video_io::FrameTensor) -> Result<f64>| -> Result<Vec<f64>> {
        recon.frames().iter().zip(reference.frames()).map(|(a, b)| f(a, b)).collect()
    };
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let psnr_v = if metrics.contains(&QualityMetric::Psnr) { Some(per(psnr)?) } else { None };
    let ms_v = if metrics.contains(&QualityMetric::Msssim) { Some(per(ms_ssim)?) } else { None };
    Ok(QualityReport {
        frames: recon.len(),
        mean_psnr: psnr_v.as_ref().map(mean),
        mean_msssim: ms_v.as_ref().map(mean),
        psnr: psnr_v,
        msssim: ms_v,
    })
}

/// One codec of a benchmark: a checkpoint per lambda.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchCodec {
    pub label: String,
    /// Keyed by the lambda's decimal string.
    pub checkpoints: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub entropy_mode: Option<EntropyMode>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lambdas: Vec<f64>,
    pub codecs: Vec<BenchCodec>,
    /// Use the checkpoint's learned intra codec when present; otherwise lossless.
    #[serde(default)]
    pub learned_intra: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<RdRow>,
    pub curves: Vec<RDCurve>,
}

impl BenchReport {
    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_rd_csv(csv_path, &self.rows)?;
        std::fs::write(json_path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(json_path, e))
    }
}

fn lambda_key(l: f64) -> String {
    format!("{l}")
}

/// Encodes every sequence with every codec at every lambda.
pub fn run_benchmark(entries: &[DatasetEntry], cfg: &BenchConfig, dtype: DType, device: &Device) -> Result<BenchReport> {
    for c in &cfg.codecs {
        let missing: Vec<String> =
            cfg.lambdas.iter().map(|&l| lambda_key(l)).filter(|k| !c.checkpoints.contains_key(k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("codec {} has no checkpoint for lambda {}", c.label, missing.join(", "))));
        }
    }
    let seqs = entries.iter().map(|e| Ok((e, e.load()?))).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for c in &cfg.codecs {
        for &lambda in &cfg.lambdas {
            let ck = load_checkpoint(&c.checkpoints[&lambda_key(lambda)], dtype, device)?;
            let model = ck.model;
            let config = CodecConfig { entropy_mode: c.entropy_mode.unwrap_or(model.codec().entropy_mode), ..*model.codec() };
            let lossless = LosslessDeflate;
            let intra: &dyn IntraCodec = match (&model.intra, cfg.learned_intra) {
                (Some(t), true) => t,
                _ => &lossless,
            };
            for (entry, seq) in &seqs {
                let enc = encode_sequence_gop(seq, entry.gop, &model, &config, intra)?;
                let with_ms = seq.width().min(seq.height()) >= MS_SSIM_MIN_SIDE;
                let mut metrics = vec![QualityMetric::Psnr];
                if with_ms {
                    metrics.push(QualityMetric::Msssim);
                }
                let recon = FrameSequence::new(enc.reconstructions.clone(), seq.frame_rate)?;
                let q = evaluate(&recon, seq, &metrics)?;
                rows.push(RdRow {
                    codec: c.label.clone(),
                    sequence: entry.name.clone(),
                    lambda,
                    bpp: enc.bpp()?,
                    psnr: q.mean_psnr.unwrap_or(f64::NAN),
                    msssim: q.mean_msssim,
                });
            }
        }
    }
    let curves = curves_from_rows(&rows, QualityMetric::Psnr).or_else(|_| Ok::<_, Error>(Vec::new()))?;
    Ok(BenchReport { rows, curves })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(codec: &str, scale: f64) -> Vec<RdRow> {
        [(256.0, 0.05, 30.0), (512.0, 0.1, 32.5), (1024.0, 0.2, 35.0), (2048.0, 0.4, 37.2)]
            .iter()
            .map(|&(lambda, bpp, q)| RdRow {
                codec: codec.into(),
                sequence: "seq".into(),
                lambda,
                bpp: bpp * scale,
                psnr: q,
                msssim: None,
            })
            .collect()
    }

    #[test]
    fn csv_round_trip_and_bd() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rd.csv");
        let r = rows("x265", 1.0);
        write_rd_csv(&p, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("codec,sequence,lambda,bpp,psnr,msssim\n"));
        assert_eq!(read_rd_csv(&p).unwrap(), r);
        let a = curves_from_rows(&r, QualityMetric::Psnr).unwrap();
        let t = curves_from_rows(&rows("ours", 0.5), QualityMetric::Psnr).unwrap();
        let (per, mean) = bd_rate_table(&a, &t).unwrap();
        assert_eq!(per.len(), 1);
        assert!((mean + 50.0).abs() < 1e-6);
        assert!(curves_from_rows(&r, QualityMetric::Msssim).is_err());
    }

    #[test]
    fn missing_checkpoint_names_lambda() {
        let cfg = BenchConfig {
            lambdas: vec![256.0, 512.0],
            codecs: vec![BenchCodec {
                label: "a".into(),
                checkpoints: [("256".to_string(), PathBuf::from("x"))].into(),
                entropy_mode: None,
            }],
            learned_intra: false,
        };
        let err = run_benchmark(&[], &cfg, DType::F32, &Device::Cpu).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("512")), "{err}");
    }
}
