use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use emoe_core::cli::commands::load_bundle;
use emoe_core::cli::RunConfig;
use emoe_core::engine::LatentSpace;
use emoe_core::text::{Prompt, REMAP_TAG};
use emoe_ffi::*;

const TINY: &str = r#"{
  "seed": 3,
  "train": { "pool_size": 40, "backbone_epochs": 3, "expert_epochs": 2 }
}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { emoe_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn trained(dir: &Path) -> *mut EmoeBundle {
    let cfg = c(TINY);
    let d = c(dir.to_str().unwrap());
    assert_eq!(unsafe { emoe_train(cfg.as_ptr(), d.as_ptr()) }, EmoeStatus::Ok);
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { emoe_bundle_load(cfg.as_ptr(), d.as_ptr(), &mut b) }, EmoeStatus::Ok);
    assert!(!b.is_null());
    b
}

fn core_bundle(dir: &Path) -> emoe_core::engine::ExpertBundle {
    let mut cfg: RunConfig = serde_json::from_str(TINY).unwrap();
    cfg.checkpoint_dir = Some(dir.to_path_buf());
    load_bundle(&cfg).unwrap()
}

#[test]
fn estimates_match_the_core_api() {
    let dir = tempfile::tempdir().unwrap();
    let b = trained(dir.path());
    let core = core_bundle(dir.path());
    assert_eq!(unsafe { emoe_bundle_num_experts(b) }, 4);
    assert_eq!(unsafe { emoe_bundle_latent_len(b) }, 128);

    let prompt = c("a red circle big");
    let tag = c(REMAP_TAG);
    for (lang, space, core_space) in [
        (ptr::null(), EmoeSpace::MidPost, LatentSpace::MidPost),
        (tag.as_ptr(), EmoeSpace::MidPre, LatentSpace::MidPre),
        (tag.as_ptr(), EmoeSpace::ZNext, LatentSpace::ZNext),
    ] {
        let mut out = EmoeEstimate { eu: -1.0, reported: -1.0, d_mid: 0 };
        assert_eq!(unsafe { emoe_estimate(b, prompt.as_ptr(), lang, 7, space, &mut out) }, EmoeStatus::Ok);
        let tag = if lang.is_null() { "en" } else { REMAP_TAG };
        let expected = core
            .estimate_uncertainty(&Prompt::new("a red circle big", tag).unwrap(), 7, core_space)
            .unwrap();
        assert_eq!(out.eu.to_bits(), expected.eu.to_bits());
        assert_eq!(out.reported.to_bits(), expected.reported.to_bits());
        assert_eq!(out.d_mid as usize, expected.d_mid);
    }
    assert!(unsafe { emoe_bundle_forward_passes(b) } >= 3);
    unsafe { emoe_bundle_free(b) };
}

#[test]
fn fast_path_halts_or_matches_the_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let b = trained(dir.path());
    let core = core_bundle(dir.path());
    let prompt = c("a green dot");
    let mut out = EmoeEstimate { eu: 0.0, reported: 0.0, d_mid: 0 };
    let mut image = vec![f64::NAN; 128];
    let mut halted = -1;

    let s = unsafe {
        emoe_fast(b, prompt.as_ptr(), ptr::null(), 5, EmoeSpace::MidPost, 0.0, &mut out, image.as_mut_ptr(), image.len(), &mut halted)
    };
    assert_eq!(s, EmoeStatus::Ok);
    assert_eq!(halted, 1);
    assert!(image.iter().all(|v| v.is_nan()));

    let s = unsafe {
        emoe_fast(b, prompt.as_ptr(), ptr::null(), 5, EmoeSpace::MidPost, f64::NAN, &mut out, image.as_mut_ptr(), image.len(), &mut halted)
    };
    assert_eq!(s, EmoeStatus::Ok);
    assert_eq!(halted, 0);
    let sample = core.sample(&Prompt::english("a green dot").unwrap(), 5).unwrap();
    assert_eq!(image, sample.data());

    let s = unsafe {
        emoe_fast(b, prompt.as_ptr(), ptr::null(), 5, EmoeSpace::MidPost, f64::NAN, &mut out, image.as_mut_ptr(), 10, &mut halted)
    };
    assert_eq!(s, EmoeStatus::BufferTooSmall);
    unsafe { emoe_bundle_free(b) };
}

#[test]
fn errors_are_reported() {
    let mut out = EmoeEstimate { eu: 0.0, reported: 0.0, d_mid: 0 };
    let prompt = c("a red dot");
    let s = unsafe { emoe_estimate(ptr::null(), prompt.as_ptr(), ptr::null(), 1, EmoeSpace::MidPost, &mut out) };
    assert_eq!(s, EmoeStatus::NullPointer);
    assert!(last_error().contains("null"));

    let missing = c("/nonexistent/emoe/checkpoints");
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { emoe_bundle_load(ptr::null(), missing.as_ptr(), &mut b) }, EmoeStatus::Checkpoint);
    assert!(b.is_null());

    let bad = c("{\"bogus\": true}");
    assert_eq!(unsafe { emoe_bundle_load(bad.as_ptr(), ptr::null(), &mut b) }, EmoeStatus::Config);
    assert!(last_error().contains("bogus"));

    let invalid = [0xffu8, 0xfe, 0];
    let s = unsafe { emoe_bundle_load(invalid.as_ptr().cast(), ptr::null(), &mut b) };
    assert_eq!(s, EmoeStatus::InvalidUtf8);

    assert_eq!(unsafe { emoe_bundle_num_experts(ptr::null()) }, 0);
    unsafe { emoe_bundle_free(ptr::null_mut()) };
    let name = unsafe { CStr::from_ptr(emoe_status_name(EmoeStatus::Crc)) };
    assert_eq!(name.to_str().unwrap(), "checkpoint crc mismatch");
}

#[test]
fn corrupted_checkpoint_fails_with_crc_status() {
    let dir = tempfile::tempdir().unwrap();
    let b = trained(dir.path());
    unsafe { emoe_bundle_free(b) };
    let path = dir.path().join("expert_2.emoe");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[100] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let cfg = c(TINY);
    let d = c(dir.path().to_str().unwrap());
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { emoe_bundle_load(cfg.as_ptr(), d.as_ptr(), &mut b) }, EmoeStatus::Crc);
    assert!(last_error().contains("CRC"));

    let prompt = c("a red dot");
    let mut out = EmoeEstimate { eu: 0.0, reported: 0.0, d_mid: 0 };
    let s = unsafe { emoe_estimate(b, prompt.as_ptr(), ptr::null(), 1, EmoeSpace::MidPost, &mut out) };
    assert_eq!(s, EmoeStatus::NullPointer);
}

#[test]
fn unparseable_prompt_is_an_invalid_argument() {
    let dir = tempfile::tempdir().unwrap();
    let b = trained(dir.path());
    let empty = c("   ");
    let mut out = EmoeEstimate { eu: 0.0, reported: 0.0, d_mid: 0 };
    let s = unsafe { emoe_estimate(b, empty.as_ptr(), ptr::null(), 1, EmoeSpace::MidPost, &mut out) };
    assert_eq!(s, EmoeStatus::InvalidArgument);
    unsafe { emoe_bundle_free(b) };
}
