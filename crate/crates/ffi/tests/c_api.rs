use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use sfanet::autodiff::Mode;
use sfanet::checkpoint::save_checkpoint;
use sfanet::model::{Model, ModelConfig};
use sfanet::Tensor;
use sfanet_ffi::*;

fn last_error() -> String {
    let p = sfa_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(width: f64, amp: bool) -> *mut SfaModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sfa_model_new(width, amp, 0, &mut m) }, SfaStatus::Ok);
    assert!(!m.is_null());
    m
}

/// A checkpoint whose batch norm statistics have been initialized.
fn warmed_checkpoint(dir: &std::path::Path) -> CString {
    let mut model = Model::<f32>::new(ModelConfig {
        width_multiplier: 0.125,
        ..Default::default()
    })
    .unwrap();
    let x = Tensor::from_fn([2, 3, 32, 32], |i| ((i * 37) % 101) as f32 / 101.0);
    model.predict(&x, Mode::Train).unwrap();
    let path = dir.join("warm.sfac");
    save_checkpoint(&model, None, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(sfa_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn param_count_matches_core() {
    let m = new_model(0.125, true);
    let mut n = 0usize;
    assert_eq!(unsafe { sfa_model_param_count(m, &mut n) }, SfaStatus::Ok);
    let core = Model::<f32>::new(ModelConfig {
        width_multiplier: 0.125,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(n, core.parameter_count());
    unsafe { sfa_model_free(m) };
}

#[test]
fn bad_arguments_report_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { sfa_model_new(0.0, true, 0, &mut m) },
        SfaStatus::InvalidArgument
    );
    assert!(last_error().contains("width_multiplier"));
    assert_eq!(unsafe { sfa_model_new(1.0, true, 0, ptr::null_mut()) }, SfaStatus::NullPointer);
    let mut n = 0usize;
    assert_eq!(unsafe { sfa_model_param_count(ptr::null(), &mut n) }, SfaStatus::NullPointer);
    unsafe {
        sfa_model_free(ptr::null_mut());
        sfa_maps_free(ptr::null_mut());
    }
}

#[test]
fn fresh_model_refuses_inference() {
    let m = new_model(0.125, true);
    let rgb = vec![0.5f32; 3 * 32 * 32];
    let mut count = 0.0;
    let s = unsafe { sfa_model_infer(m, rgb.as_ptr(), 32, 32, &mut count, ptr::null_mut()) };
    assert_eq!(s, SfaStatus::UninitializedStats);
    assert!(last_error().contains("fme.conv1_1"));
    unsafe { sfa_model_free(m) };
}

#[test]
fn load_infer_and_save() {
    let dir = tempfile::tempdir().unwrap();
    let ck = warmed_checkpoint(dir.path());
    let m = new_model(0.125, true);
    assert_eq!(unsafe { sfa_model_load(m, ck.as_ptr(), true) }, SfaStatus::Ok);

    let (w, h) = (40usize, 33usize);
    let rgb: Vec<f32> = (0..3 * w * h).map(|i| (i % 17) as f32 / 17.0).collect();
    let mut count = f64::NAN;
    let mut maps = ptr::null_mut();
    let s = unsafe { sfa_model_infer(m, rgb.as_ptr(), w, h, &mut count, &mut maps) };
    assert_eq!(s, SfaStatus::Ok, "{}", last_error());
    assert!(count.is_finite());
    unsafe {
        assert_eq!((sfa_maps_width(maps), sfa_maps_height(maps)), (20, 17));
        let d = std::slice::from_raw_parts(sfa_maps_density(maps), 20 * 17);
        let a = std::slice::from_raw_parts(sfa_maps_attention(maps), 20 * 17);
        let sum: f64 = d.iter().map(|&v| v as f64).sum();
        assert!((sum - count).abs() < 1e-4 * (1.0 + count.abs()));
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        sfa_maps_free(maps);
    }

    let out = CString::new(dir.path().join("copy.sfac").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sfa_model_save(m, out.as_ptr()) }, SfaStatus::Ok);
    let m2 = new_model(0.125, true);
    assert_eq!(unsafe { sfa_model_load(m2, out.as_ptr(), true) }, SfaStatus::Ok);
    let mut count2 = 0.0;
    unsafe { sfa_model_infer(m2, rgb.as_ptr(), w, h, &mut count2, ptr::null_mut()) };
    assert_eq!(count.to_bits(), count2.to_bits());
    unsafe {
        sfa_model_free(m);
        sfa_model_free(m2);
    }
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ck = warmed_checkpoint(dir.path());
    let wide = new_model(0.25, true);
    assert_eq!(unsafe { sfa_model_load(wide, ck.as_ptr(), true) }, SfaStatus::Checkpoint);
    let missing = CString::new("/no/such/file.sfac").unwrap();
    assert_eq!(unsafe { sfa_model_load(wide, missing.as_ptr(), true) }, SfaStatus::Io);
    assert!(last_error().contains("/no/such/file.sfac"));
    unsafe { sfa_model_free(wide) };
}

#[test]
fn ground_truth_helpers() {
    let (mut size, mut sigma) = (0usize, 0.0f64);
    assert_eq!(unsafe { sfa_adaptive_kernel(2048, &mut size, &mut sigma) }, SfaStatus::Ok);
    assert_eq!((size, sigma), (31, 8.75));

    let pts = [0.0, 0.0, 10.4, 7.6, 31.0, 23.0];
    let mut out = vec![0.0f32; 32 * 24];
    let s = unsafe { sfa_render_density(pts.as_ptr(), 3, 32, 24, 15, 4.0, out.as_mut_ptr()) };
    assert_eq!(s, SfaStatus::Ok);
    let sum: f64 = out.iter().map(|&v| v as f64).sum();
    assert!((sum - 3.0).abs() < 1e-5);
    let s = unsafe { sfa_render_density(pts.as_ptr(), 3, 32, 24, 4, 4.0, out.as_mut_ptr()) };
    assert_eq!(s, SfaStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/sfanet.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["sfa_model_new", "sfa_model_infer", "sfa_render_density", "SFA_STATUS_PANIC"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"sfanet.h\"\nint main(void) { SfaModel *m = 0; \
         return sfa_model_new(0.125, true, 0, &m) == SFA_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", concat!(env!("CARGO_MANIFEST_DIR"), "/include")))
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(e) => {
            eprintln!("no C compiler available ({e}); header syntax not checked");
            return;
        }
    };
    assert!(status.success());
}
