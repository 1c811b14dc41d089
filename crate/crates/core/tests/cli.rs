use std::path::Path;
use std::process::{Command, Output};

use candle_core::{DType, Device};
use ctxvc::model::{CodecModel, ModelConfig};
use ctxvc::training::save_checkpoint;
use ctxvc::video_io::FrameTensor;

fn ctxvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxvc")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn demo_entropy_reports_the_worked_example() {
    let o = ctxvc(&["demo-entropy", "--alphabet", "4", "--trials", "200", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    assert!(s.contains("H(x - x~) = 2.6556 bits"), "{s}");
    assert!(s.contains("H(x | x~) = 2.0000 bits"), "{s}");
    assert!(s.contains("200 random joint pmfs: 0 violations"), "{s}");
    assert_eq!(code(&ctxvc(&["demo-entropy", "--alphabet", "1"])), 2);
}

fn write_csv(path: &Path, codec: &str, scale: f64) {
    let mut text = String::from("codec,sequence,lambda,bpp,psnr,msssim\n");
    for (l, b, q) in [(256, 0.05, 30.0), (512, 0.1, 32.4), (1024, 0.2, 34.9), (2048, 0.4, 37.1)] {
        text.push_str(&format!("{codec},seq,{l},{},{q},\n", b * scale));
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn bdrate_of_half_rate_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (a, t) = (dir.path().join("a.csv"), dir.path().join("t.csv"));
    write_csv(&a, "anchor", 1.0);
    write_csv(&t, "test", 0.5);
    let o = ctxvc(&["bdrate", "--anchor", p(&a), "--test", p(&t)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("average: -50.00%"), "{}", stdout(&o));
    // Too few points overlapping is a data error; a bad metric an argument error.
    assert_eq!(code(&ctxvc(&["bdrate", "--anchor", p(&a), "--test", p(&t), "--metric", "vmaf"])), 2);
    assert_eq!(code(&ctxvc(&["bdrate", "--anchor", p(&a), "--test", p(&t), "--metric", "msssim"])), 3);
}

#[test]
fn encode_decode_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("tiny.safetensors");
    let model = CodecModel::new(ModelConfig::tiny(), DType::F32, &Device::Cpu).unwrap();
    save_checkpoint(&ck, &model, None).unwrap();
    let frames = dir.path().join("frames");
    std::fs::create_dir(&frames).unwrap();
    for t in 0..3 {
        let f = FrameTensor::from_fn(64, 48, |c, y, x| ((x + 2 * t + y + 20 * c) % 64) as f32 / 80.0 + 0.1);
        f.save_png(&frames.join(format!("f{t}.png"))).unwrap();
    }
    let bin = dir.path().join("out.dcv");
    let report = dir.path().join("rates.jsonl");
    let o = ctxvc(&["encode", "--input", p(&frames), "--checkpoint", p(&ck), "--out", p(&bin), "--rate-report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 3);
    let dec = dir.path().join("dec");
    let o = ctxvc(&["decode", "--in", p(&bin), "--checkpoint", p(&ck), "--out", p(&dec)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dec.join("frame_00002.png").exists());
    let q = dir.path().join("q.json");
    let o = ctxvc(&["eval", "--recon", p(&dec), "--ref", p(&frames), "--report", p(&q)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&q).unwrap()).unwrap();
    assert_eq!(v["frames"], 3);
    // The first frame is coded losslessly.
    assert_eq!(v["psnr"][0].as_f64().unwrap(), 100.0);

    // Exit codes: config mismatch, corruption, bad arguments, missing files.
    let o = ctxvc(&["encode", "--input", p(&frames), "--checkpoint", p(&ck), "--out", p(&bin), "--context-dim", "64"]);
    assert_eq!(code(&o), 4);
    let mut bytes = std::fs::read(&bin).unwrap();
    let n = bytes.len();
    bytes.truncate(n - 3);
    let bad = dir.path().join("bad.dcv");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(code(&ctxvc(&["decode", "--in", p(&bad), "--checkpoint", p(&ck), "--out", p(&dec)])), 3);
    let yuv = dir.path().join("x.yuv");
    std::fs::write(&yuv, [0u8; 96]).unwrap();
    let o = ctxvc(&["encode", "--input", p(&yuv), "--size", "8by8", "--checkpoint", p(&ck), "--out", p(&bin)]);
    assert_eq!(code(&o), 2);
    let o = ctxvc(&["encode", "--input", p(&yuv), "--size", "8x6", "--checkpoint", p(&ck), "--out", p(&bin)]);
    assert_eq!(code(&o), 3);
    let missing = dir.path().join("nope.safetensors");
    let o = ctxvc(&["decode", "--in", p(&bin), "--checkpoint", p(&missing), "--out", p(&dec)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_rejects_invalid_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, "[]").unwrap();
    let cfg = dir.path().join("c.json");
    let text = serde_json::json!({
        "schedule": {"lambda": 300.0},
        "manifest": manifest,
        "out": dir.path().join("o.safetensors"),
    });
    std::fs::write(&cfg, text.to_string()).unwrap();
    assert_eq!(code(&ctxvc(&["train", "--config", p(&cfg)])), 4);
    assert_eq!(code(&ctxvc(&["train", "--config", p(&cfg), "--stage", "7"])), 2);
}
