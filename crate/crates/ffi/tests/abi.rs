use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use drkf_ffi::*;

fn spec(seed: u64) -> DrkfSyntheticSpec {
    DrkfSyntheticSpec {
        classes: 4,
        d_z: 8,
        records: 16,
        speech_len: 3,
        text_len: 2,
        separation: 3.0,
        inconsistency_rate: 0.2,
        seed,
    }
}

const SMALL: &str = r#"{"d_z": 8, "d_p": 16, "d_h": 16, "fe_heads": 2, "lr": 0.001, "seed": 3}"#;

fn last_error() -> String {
    let p = drkf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn trainer(config: &str) -> *mut DrkfTrainer {
    let cfg = CString::new(config).unwrap();
    let mut t = ptr::null_mut();
    assert_eq!(drkf_trainer_new(cfg.as_ptr(), &mut t), DrkfStatus::Ok);
    t
}

unsafe fn dataset(seed: u64) -> *mut DrkfDataset {
    let mut d = ptr::null_mut();
    assert_eq!(drkf_dataset_generate(&spec(seed), &mut d), DrkfStatus::Ok);
    d
}

#[test]
fn train_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = CString::new(dir.path().join("m.drkf").to_str().unwrap()).unwrap();
    unsafe {
        let d = dataset(1);
        assert_eq!(drkf_dataset_len(d), 16);
        let a = trainer(SMALL);
        let mut l = DrkfLosses::default();
        for _ in 0..3 {
            assert_eq!(drkf_trainer_step(a, d, &mut l), DrkfStatus::Ok);
        }
        assert!(l.total.is_finite() && l.total > 0.0);
        assert_eq!(drkf_trainer_save(a, ckpt.as_ptr()), DrkfStatus::Ok);

        let b = trainer(SMALL);
        assert_eq!(drkf_trainer_load(b, ckpt.as_ptr()), DrkfStatus::Ok);
        assert_eq!(drkf_trainer_steps_done(b), 3);
        let (mut la, mut lb) = (DrkfLosses::default(), DrkfLosses::default());
        assert_eq!(drkf_trainer_step(a, d, &mut la), DrkfStatus::Ok);
        assert_eq!(drkf_trainer_step(b, d, &mut lb), DrkfStatus::Ok);
        assert_eq!(la, lb);

        let mut m = DrkfMetrics::default();
        assert_eq!(drkf_trainer_evaluate(b, d, &mut m), DrkfStatus::Ok);
        assert_eq!(m.samples, 16);
        assert!((m.micro_f1 - m.acc_weighted).abs() < 1e-12);

        drkf_trainer_free(a);
        drkf_trainer_free(b);
        drkf_dataset_free(d);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut t = ptr::null_mut();
        let bad = CString::new(r#"{"fe_heads": 5}"#).unwrap();
        assert_eq!(drkf_trainer_new(bad.as_ptr(), &mut t), DrkfStatus::Config);
        assert!(last_error().contains("divisible"));
        let unknown = CString::new(r#"{"learning_rate": 1}"#).unwrap();
        assert_eq!(drkf_trainer_new(unknown.as_ptr(), &mut t), DrkfStatus::Config);
        assert!(t.is_null());

        assert_eq!(drkf_trainer_new(ptr::null(), ptr::null_mut()), DrkfStatus::NullPointer);
        assert_eq!(drkf_trainer_step(ptr::null_mut(), ptr::null(), ptr::null_mut()), DrkfStatus::NullPointer);

        let missing = CString::new("/nonexistent/data.jsonl").unwrap();
        let mut d = ptr::null_mut();
        assert_eq!(drkf_dataset_load(missing.as_ptr(), &mut d), DrkfStatus::Io);

        let mut wide = spec(2);
        wide.d_z = 16;
        let mut d16 = ptr::null_mut();
        assert_eq!(drkf_dataset_generate(&wide, &mut d16), DrkfStatus::Ok);
        let t8 = trainer(SMALL);
        assert_eq!(drkf_trainer_step(t8, d16, ptr::null_mut()), DrkfStatus::Shape);
        assert!(last_error().contains("width 16"));

        let mut bad_spec = spec(0);
        bad_spec.inconsistency_rate = 1.5;
        assert_eq!(drkf_dataset_generate(&bad_spec, &mut d), DrkfStatus::InvalidArgument);

        drkf_trainer_free(t8);
        drkf_dataset_free(d16);
        drkf_dataset_free(ptr::null_mut());
        drkf_trainer_free(ptr::null_mut());
    }
}

#[test]
fn dataset_files_and_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = CString::new(dir.path().join("d.jsonl").to_str().unwrap()).unwrap();
    let csv = dir.path().join("e.csv");
    let csv_c = CString::new(csv.to_str().unwrap()).unwrap();
    unsafe {
        let d = dataset(4);
        assert_eq!(drkf_dataset_save(d, data_path.as_ptr()), DrkfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(drkf_dataset_load(data_path.as_ptr(), &mut back), DrkfStatus::Ok);
        assert_eq!(drkf_dataset_len(back), 16);
        let t = trainer(SMALL);
        assert_eq!(drkf_trainer_export_embeddings(t, back, csv_c.as_ptr()), DrkfStatus::Ok);
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 17);
        drkf_trainer_free(t);
        drkf_dataset_free(d);
        drkf_dataset_free(back);
    }
    let v = unsafe { CStr::from_ptr(drkf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Directory holding this test binary's sibling library artifacts.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header_and_static_library() {
    let lib = artifact_dir().join("libdrkf_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.exists() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: {} or a C compiler is unavailable", lib.display());
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).arg(dir.path().join("c.drkf")).output().unwrap();
    assert!(out.status.success(), "{:?}: {}", out.status, String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("steps=5 samples=24"), "{stdout}");
    assert!(dir.path().join("c.drkf").exists());
}
