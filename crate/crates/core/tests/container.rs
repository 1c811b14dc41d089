use ctxvc::bitstream::container::{BitstreamContainer, ContainerHeader, FrameBitstream};
use ctxvc::bitstream::range_coder::{range_decode, range_encode};
use ctxvc::bitstream::{build_cdf, CdfTable};
use ctxvc::contextual_codec::{ConditionMode, MotionMode};
use ctxvc::entropy_model::EntropyMode;
use ctxvc::video_io::{decode_yuv420, encode_yuv420, segment_len, FrameRole, FrameSequence, FrameTensor};
use ctxvc::Error;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = FrameBitstream> {
    let bytes = || prop::collection::vec(any::<u8>(), 0..40);
    prop_oneof![
        (any::<u8>(), bytes()).prop_map(|(codec_id, payload)| FrameBitstream::Intra { codec_id, payload }),
        (bytes(), bytes(), bytes(), bytes()).prop_map(|(g, s, y, z)| FrameBitstream::Inter { substreams: [g, s, y, z] }),
    ]
}

fn container() -> impl Strategy<Value = BitstreamContainer> {
    (
        1u32..500,
        1u32..500,
        1u32..20,
        prop::sample::select(EntropyMode::ALL.to_vec()),
        prop::sample::select(vec![3u16, 16, 64, 256]),
        prop::collection::vec(record(), 0..6),
    )
        .prop_map(|(w, h, gop, entropy_mode, context_dim, frames)| BitstreamContainer {
            header: ContainerHeader {
                orig_width: w,
                orig_height: h,
                padded_width: w.div_ceil(64) * 64,
                padded_height: h.div_ceil(64) * 64,
                gop_size: gop,
                entropy_mode,
                context_dim,
                condition_mode: ConditionMode::ContextFeature,
                motion_mode: MotionMode::Memc,
                intra_id: 0,
                frame_count: frames.len() as u32,
            },
            frames,
        })
}

proptest! {
    #[test]
    fn container_round_trips(c in container()) {
        let bytes = c.to_bytes().unwrap();
        prop_assert_eq!(BitstreamContainer::from_bytes(&bytes).unwrap(), c.clone());
        prop_assert_eq!(c.byte_len().unwrap(), bytes.len());
        let record_bytes: u64 = c.frames.iter().map(|f| 1 + f.total_bits() / 8).sum();
        prop_assert_eq!(bytes.len() as u64, 35 + record_bytes);
    }

    #[test]
    fn truncation_is_detected(c in container(), cut in 1usize..20) {
        let bytes = c.to_bytes().unwrap();
        let n = bytes.len().saturating_sub(cut);
        let err = BitstreamContainer::from_bytes(&bytes[..n]).unwrap_err();
        prop_assert!(matches!(err, Error::MalformedInput(_) | Error::Corruption { .. }), "{}", err);
    }

    #[test]
    fn range_coder_round_trips(
        spec in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 2..40), any::<prop::sample::Index>()), 1..300)
    ) {
        let mut tables: Vec<CdfTable> = Vec::new();
        let mut symbols = Vec::new();
        for (mut m, idx) in spec {
            m[0] += 1e-3;
            tables.push(build_cdf(&m).unwrap());
            symbols.push(idx.index(m.len()));
        }
        let bytes = range_encode(&symbols, &tables).unwrap();
        prop_assert_eq!(range_decode(&bytes, &tables).unwrap(), symbols);
    }

    #[test]
    fn gop_roles(frames in 1usize..200, gop in 1usize..30) {
        let g = segment_len(frames, gop).unwrap();
        prop_assert_eq!(g.intra_count(), frames.div_ceil(gop));
        prop_assert_eq!(g.frame_roles[0], FrameRole::I);
        prop_assert_eq!(g.gops().len(), frames.div_ceil(gop));
    }
}

#[test]
fn yuv_round_trip_within_two_levels() {
    let frames: Vec<FrameTensor> = (0..3)
        .map(|t| {
            FrameTensor::from_fn(48, 32, |c, y, x| {
                let v = ((x + 3 * y + 7 * c + 5 * t) % 64) as f32 / 63.0;
                (0.2 + 0.6 * v).clamp(0.0, 1.0)
            })
        })
        .collect();
    // Constant over 2x2 blocks so chroma subsampling loses nothing.
    let frames: Vec<FrameTensor> = frames
        .iter()
        .map(|f| FrameTensor::from_fn(48, 32, |c, y, x| f.get(c, y & !1, x & !1)))
        .collect();
    let seq = FrameSequence::new(frames, 30.0).unwrap();
    let back = decode_yuv420(&encode_yuv420(&seq).unwrap(), 48, 32, usize::MAX).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in seq.frames().iter().zip(back.frames()) {
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(worst <= 2.0 / 255.0 + 1e-6, "max error {worst}");
    }
}
