use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use flowreg::flow::FlowConfig;
use flowreg::train::{Mode, PhantomConfig, TrainConfig, Trainer};
use flowreg_ffi::*;

fn last_error() -> String {
    let p = flowreg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_checkpoint(dir: &Path, mode: Mode) -> CString {
    let cfg = TrainConfig {
        mode,
        disc_width: 4,
        generator_width: 4,
        regnet_width: 4,
        regnet_levels: 1,
        flow: FlowConfig { hidden: 8, ..Default::default() },
        phantom: Some(PhantomConfig { seed: 2, subjects: 1, slices: 3 }),
        ..TrainConfig::default()
    };
    let mut t = Trainer::<f32>::from_config(cfg).unwrap();
    t.run_steps(1, &mut std::io::sink()).unwrap();
    let path = dir.join("model.flwr");
    t.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i as f32) * 0.37).sin() * 0.8).collect()
}

#[test]
fn flow_checkpoint_round_trips_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), Mode::Alignflow);
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(flowreg_translator_open(path.as_ptr(), &mut t), FlowregStatus::Ok);
        let mut size = 0usize;
        assert_eq!(flowreg_translator_image_size(t, &mut size), FlowregStatus::Ok);
        assert_eq!(size, 32);

        let x = ramp(2 * 32 * 32);
        let mut y = vec![0f32; x.len()];
        let mut back = vec![0f32; x.len()];
        let dir_ab = FlowregDirection::A2b;
        assert_eq!(flowreg_translator_translate(t, dir_ab, x.as_ptr(), 2, 32, 32, y.as_mut_ptr()), FlowregStatus::Ok);
        let dir_ba = FlowregDirection::B2a;
        assert_eq!(flowreg_translator_translate(t, dir_ba, y.as_ptr(), 2, 32, 32, back.as_mut_ptr()), FlowregStatus::Ok);
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(err < 1e-4, "{err}");
        flowreg_translator_free(t);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(flowreg_translator_open(ptr::null(), &mut t), FlowregStatus::NullPointer);
        assert!(last_error().contains("path"));

        let missing = CString::new("/nonexistent/model.flwr").unwrap();
        assert_eq!(flowreg_translator_open(missing.as_ptr(), &mut t), FlowregStatus::Io);
        assert!(last_error().contains("nonexistent"));
        assert!(t.is_null());

        let x = [0f32; 4];
        let mut y = [0f32; 4];
        assert_eq!(
            flowreg_translator_translate(ptr::null(), FlowregDirection::A2b, x.as_ptr(), 1, 2, 2, y.as_mut_ptr()),
            FlowregStatus::NullPointer
        );
        flowreg_translator_free(ptr::null_mut());
    }
}

#[test]
fn odd_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), Mode::Cycleflow);
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(flowreg_translator_open(path.as_ptr(), &mut t), FlowregStatus::Ok);
        let x = ramp(9);
        let mut y = vec![0f32; 9];
        let s = flowreg_translator_translate(t, FlowregDirection::A2b, x.as_ptr(), 1, 3, 3, y.as_mut_ptr());
        assert_eq!(s, FlowregStatus::InvalidArgument);
        assert!(last_error().contains("even"));
        flowreg_translator_free(t);
    }
}

#[test]
fn corrupt_checkpoint_reports_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), Mode::Alignflow);
    let file = Path::new(path.to_str().unwrap());
    let mut bytes = std::fs::read(file).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(file, bytes).unwrap();
    let mut t = ptr::null_mut();
    unsafe {
        assert_eq!(flowreg_translator_open(path.as_ptr(), &mut t), FlowregStatus::Checkpoint);
    }
}

#[test]
fn metrics_match_the_library() {
    let a = ramp(16 * 16);
    let b: Vec<f32> = a.iter().map(|v| v * 0.5 + 0.1).collect();
    let (mut mse, mut p, mut s, mut same) = (0.0, 0.0, 0.0, 0.0);
    unsafe {
        assert_eq!(flowreg_mse(a.as_ptr(), b.as_ptr(), 16, 16, &mut mse), FlowregStatus::Ok);
        assert_eq!(flowreg_psnr(0.01, 1.0, &mut p), FlowregStatus::Ok);
        assert_eq!(flowreg_ssim(a.as_ptr(), b.as_ptr(), 16, 16, 2.0, &mut s), FlowregStatus::Ok);
        assert_eq!(flowreg_ssim(a.as_ptr(), a.as_ptr(), 16, 16, 2.0, &mut same), FlowregStatus::Ok);
        assert_eq!(flowreg_psnr(-1.0, 2.0, &mut p), FlowregStatus::InvalidArgument);
        assert_eq!(flowreg_ssim(a.as_ptr(), b.as_ptr(), 4, 4, 2.0, &mut s), FlowregStatus::InvalidArgument);
    }
    let direct: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / 256.0;
    assert!((mse - direct).abs() < 1e-12);
    assert!((same - 1.0).abs() < 1e-12);
    assert!(s < 1.0 && s > 0.0);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/flowreg.h")).unwrap();
    for sym in [
        "FlowregStatus",
        "FlowregTranslator",
        "flowreg_translator_open",
        "flowreg_translator_translate",
        "flowreg_translator_free",
        "flowreg_last_error",
        "flowreg_ssim",
        "FLOWREG_STATUS_CHECKPOINT",
    ] {
        assert!(header.contains(sym), "missing {sym}");
    }
    assert!(unsafe { CStr::from_ptr(flowreg_version()) }.to_str().unwrap().starts_with("0."));
}
