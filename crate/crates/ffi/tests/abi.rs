use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use ctxvc_ffi::*;

fn frames(n: usize, w: usize, h: usize) -> Vec<u8> {
    (0..n * w * h * 3).map(|i| ((i * 7 + i / 97) % 251) as u8).collect()
}

#[test]
fn encode_decode_round_trip() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(ctxvc_model_new_random(1, &mut model), CtxvcStatus::Ok);
        let (w, h) = (64, 64);
        let input = frames(2, w, h);
        let mut buf = CtxvcBuffer { data: ptr::null_mut(), len: 0 };
        assert_eq!(ctxvc_encode_rgb8(model, input.as_ptr(), 2, w, h, 10, 1, &mut buf), CtxvcStatus::Ok);
        assert!(buf.len > 0);
        let mut dec = ptr::null_mut();
        assert_eq!(ctxvc_decode(model, buf.data, buf.len, &mut dec), CtxvcStatus::Ok);
        let (mut n, mut dw, mut dh) = (0, 0, 0);
        assert_eq!(ctxvc_frames_info(dec, &mut n, &mut dw, &mut dh), CtxvcStatus::Ok);
        assert_eq!((n, dw, dh), (2, w, h));
        let mut first = vec![0u8; w * h * 3];
        assert_eq!(ctxvc_frames_copy_rgb8(dec, 0, first.as_mut_ptr(), first.len()), CtxvcStatus::Ok);
        assert_eq!(&first[..], &input[..w * h * 3]);
        assert_eq!(ctxvc_frames_copy_rgb8(dec, 5, first.as_mut_ptr(), first.len()), CtxvcStatus::Argument);

        let mut p = 0.0;
        assert_eq!(ctxvc_psnr_rgb8(first.as_ptr(), input.as_ptr(), w, h, &mut p), CtxvcStatus::Ok);
        assert_eq!(p, 100.0);

        *buf.data.add(buf.len - 1) ^= 0xff;
        let mut bad = ptr::null_mut();
        let st = ctxvc_decode(model, buf.data, buf.len - 3, &mut bad);
        assert!(matches!(st, CtxvcStatus::Corruption | CtxvcStatus::MalformedInput), "{st:?}");
        assert!(!ctxvc_last_error().is_null());
        ctxvc_buffer_free(&mut buf);
        assert!(buf.data.is_null());
        ctxvc_frames_free(dec);
        ctxvc_model_free(model);
    }
}

#[test]
fn null_and_argument_errors() {
    unsafe {
        assert_eq!(ctxvc_model_new_random(0, ptr::null_mut()), CtxvcStatus::NullPointer);
        let msg = CStr::from_ptr(ctxvc_last_error()).to_str().unwrap();
        assert!(msg.contains("out"));
        let mut m = ptr::null_mut();
        let missing = c"/nonexistent/model.safetensors";
        assert_eq!(ctxvc_model_load(missing.as_ptr(), &mut m), CtxvcStatus::Io);
        let b = [0.1, 0.2, 0.4, 0.8];
        let q = [30.0, 32.0, 34.0, 36.0];
        let b2 = [0.2, 0.4, 0.8, 1.6];
        let mut out = 0.0;
        assert_eq!(ctxvc_bd_rate(b.as_ptr(), q.as_ptr(), 4, b2.as_ptr(), q.as_ptr(), 4, &mut out), CtxvcStatus::Ok);
        assert!((out - 100.0).abs() < 1e-6);
        assert_eq!(ctxvc_bd_rate(b.as_ptr(), q.as_ptr(), 3, b2.as_ptr(), q.as_ptr(), 4, &mut out), CtxvcStatus::Argument);
        assert!(!CStr::from_ptr(ctxvc_version()).to_bytes().is_empty());
    }
}

#[test]
fn header_is_generated_and_valid_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ctxvc.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["ctxvc_model_load", "ctxvc_encode_rgb8", "ctxvc_decode", "CTXVC_STATUS_CORRUPTION", "typedef struct CtxvcModel CtxvcModel"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, format!("#include \"{}\"\nint main(void) {{ return ctxvc_version() == 0; }}\n", header.display())).unwrap();
    if let Ok(st) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror"]).arg(&src).status() {
        assert!(st.success(), "header does not compile as C");
    }
}
