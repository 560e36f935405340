use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use vaekit_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(vaekit_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn dataset_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("e.vaed").to_str().unwrap()).unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(vaekit_dataset_gen_ellipse(20, 8, 3, &mut ds), VaekitStatus::Ok);
        assert_eq!(vaekit_dataset_len(ds), 20);
        assert_eq!(vaekit_dataset_sample_len(ds), 64);
        assert_eq!(vaekit_dataset_save(ds, path.as_ptr()), VaekitStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(vaekit_dataset_load(path.as_ptr(), &mut back), VaekitStatus::Ok);
        let mut a = vec![0.0; 20 * 64];
        let mut b = vec![0.0; 20 * 64];
        assert_eq!(vaekit_dataset_samples(ds, a.as_mut_ptr(), a.len()), VaekitStatus::Ok);
        assert_eq!(vaekit_dataset_samples(back, b.as_mut_ptr(), b.len()), VaekitStatus::Ok);
        assert_eq!(a, b);
        let mut t = vec![0.0; 20];
        assert_eq!(vaekit_dataset_targets(back, t.as_mut_ptr(), 20), VaekitStatus::Ok);
        assert!(t.iter().all(|&r| r > 0.0));
        assert_eq!(vaekit_dataset_samples(ds, a.as_mut_ptr(), 10), VaekitStatus::Contract);
        vaekit_dataset_free(ds);
        vaekit_dataset_free(back);
        vaekit_dataset_free(ptr::null_mut());
    }
}

#[test]
fn missing_and_corrupt_files_map_to_io_and_format() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.vaec").to_str().unwrap()).unwrap();
    let bad = dir.path().join("bad.vaec");
    std::fs::write(&bad, b"NOPE and more bytes").unwrap();
    let bad = CString::new(bad.to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(vaekit_model_load(missing.as_ptr(), &mut m), VaekitStatus::Io);
        assert!(m.is_null());
        assert_eq!(vaekit_model_load(bad.as_ptr(), &mut m), VaekitStatus::Format);
        assert!(last_error().contains("magic"));
        assert_eq!(vaekit_model_load(ptr::null(), &mut m), VaekitStatus::NullPointer);
    }
}

#[test]
fn encode_decode_shapes_and_zero_input() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(vaekit_model_init_mlp(6, 2, 1, &mut m), VaekitStatus::Ok);
        assert_eq!(vaekit_model_latent_dim(m), 2);
        assert_eq!(vaekit_model_input_len(m), 6);
        let x = [0.0; 3 * 6];
        let (mut mu, mut lv) = (vec![1.0; 6], vec![1.0; 6]);
        assert_eq!(vaekit_model_encode(m, x.as_ptr(), 3, mu.as_mut_ptr(), lv.as_mut_ptr()), VaekitStatus::Ok);
        assert!(mu.iter().chain(&lv).all(|&v| v == 0.0));
        let mut xh = vec![f64::NAN; 3 * 6];
        assert_eq!(vaekit_model_decode(m, mu.as_ptr(), 3, xh.as_mut_ptr()), VaekitStatus::Ok);
        assert!(xh.iter().all(|v| v.is_finite()));
        assert_eq!(vaekit_model_decode(m, ptr::null(), 3, xh.as_mut_ptr()), VaekitStatus::NullPointer);
        vaekit_model_free(m);
    }
}

#[test]
fn math_entry_points() {
    unsafe {
        let (mu, lv) = ([1.0, 0.0], [0.0, 2f64.ln()]);
        let (mut total, mut per) = (0.0, [0.0; 2]);
        assert_eq!(vaekit_kl_standard_normal(mu.as_ptr(), lv.as_ptr(), 1, 2, &mut total, per.as_mut_ptr()), VaekitStatus::Ok);
        assert!((per[0] - 0.5).abs() < 1e-15);
        assert!((per[1] - (1.0 - 2f64.ln()) / 2.0).abs() < 1e-15);
        assert!((total - per[0] - per[1]).abs() < 1e-15);

        let x = [0.0, 1.0, 2.0, 3.0];
        let mut mmd = 1.0;
        assert_eq!(vaekit_mmd_rbf(x.as_ptr(), 2, x.as_ptr(), 2, 2, ptr::null(), 0, &mut mmd), VaekitStatus::Ok);
        assert!(mmd.abs() < 1e-12);

        let img: Vec<f64> = (0..64).map(|i| (i % 7) as f64 / 7.0).collect();
        let mut s = 0.0;
        assert_eq!(vaekit_ssim(img.as_ptr(), img.as_ptr(), 8, 8, 7, 1e-4, 9e-4, &mut s), VaekitStatus::Ok);
        assert!((s - 1.0).abs() < 1e-12);

        let mut v = 0.0;
        assert_eq!(vaekit_ball_volume(2, 1.0, &mut v), VaekitStatus::Ok);
        assert!((v - std::f64::consts::PI).abs() < 1e-12);
        let mut shell = VaekitShellResult::default();
        assert_eq!(vaekit_shell_ratio(100, 1.0, 0.001, &mut shell), VaekitStatus::Ok);
        assert!((shell.ratio_exact - 0.09521).abs() < 1e-5 && shell.ratio_approx == 0.1);
        assert_eq!(vaekit_shell_ratio(3, 1.0, 2.0, &mut shell), VaekitStatus::Contract);

        let z: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 + 0.1 * (i / 2) as f64).collect();
        let t: Vec<f64> = z.chunks(2).map(|r| 3.0 * r[1] - 1.0).collect();
        let (mut coef, mut r2) = ([0.0; 3], 0.0);
        assert_eq!(vaekit_fit_glm(z.as_ptr(), 20, 2, t.as_ptr(), false, coef.as_mut_ptr(), &mut r2), VaekitStatus::Ok);
        assert!((coef[1] - 3.0).abs() < 1e-8 && (coef[2] + 1.0).abs() < 1e-8 && (r2 - 1.0).abs() < 1e-12);
        assert_eq!(vaekit_fit_glm(z.as_ptr(), 20, 2, t.as_ptr(), true, coef.as_mut_ptr(), &mut r2), VaekitStatus::Contract);
    }
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("vaekit.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "vaekit_last_error",
        "vaekit_model_load",
        "vaekit_model_encode",
        "vaekit_model_decode",
        "vaekit_model_free",
        "vaekit_dataset_load",
        "vaekit_dataset_free",
        "vaekit_kl_standard_normal",
        "vaekit_mmd_rbf",
        "vaekit_ssim",
        "vaekit_ball_volume",
        "vaekit_shell_ratio",
        "vaekit_fit_glm",
        "VAEKIT_STATUS_OK = 0",
        "typedef struct VaekitModel VaekitModel;",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
}

/// Compiles and runs a small C client against the static library when a C
/// compiler is on PATH.
#[test]
fn c_client_links_and_runs() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping C client check");
        return;
    };
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap();
    let lib = profile_dir.join("libvaekit_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <math.h>
#include "vaekit.h"
int main(void) {
    double v = 0.0;
    if (vaekit_ball_volume(3, 1.0, &v) != VAEKIT_STATUS_OK) return 1;
    if (fabs(v - 4.0 * 3.14159265358979323846 / 3.0) > 1e-12) return 2;
    VaekitShellResult s;
    if (vaekit_shell_ratio(5, 1.0, 1.5, &s) != VAEKIT_STATUS_CONTRACT) return 3;
    if (vaekit_last_error()[0] == '\0') return 4;
    VaekitModel *m = NULL;
    if (vaekit_model_init_mlp(4, 2, 7, &m) != VAEKIT_STATUS_OK) return 5;
    double x[4] = {0.1, 0.2, 0.3, 0.4}, mu[2], lv[2];
    if (vaekit_model_encode(m, x, 1, mu, lv) != VAEKIT_STATUS_OK) return 6;
    vaekit_model_free(m);
    printf("ok %s\n", vaekit_version());
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("client");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C client failed to compile");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C client exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
