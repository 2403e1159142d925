use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use advdepth::depth_net::{Architecture, DepthModel, DepthRange};
use advdepth::scenegen::{generate, SceneParams};
use advdepth_ffi::*;

const H: usize = 16;
const W: usize = 32;

fn last_error() -> String {
    let p = advdepth_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(arch: AdvdepthArchitecture, seed: u64) -> *mut AdvdepthModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { advdepth_model_new(arch as u32, seed, &mut m) }, AdvdepthStatus::Ok);
    assert!(!m.is_null());
    m
}

fn scene_buffers(seed: u64) -> (Vec<f32>, Vec<f32>) {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { advdepth_scene_generate(seed, H, W, &mut s) }, AdvdepthStatus::Ok);
    let (mut img, mut depth) = (vec![0.0f32; 3 * H * W], vec![0.0f32; H * W]);
    let st = unsafe { advdepth_scene_copy(s, img.as_mut_ptr(), img.len(), depth.as_mut_ptr(), depth.len()) };
    assert_eq!(st, AdvdepthStatus::Ok);
    unsafe { advdepth_scene_free(s) };
    (img, depth)
}

#[test]
fn scene_matches_core() {
    let (img, depth) = scene_buffers(5);
    let params = SceneParams { height: H, width: W, ..SceneParams::default() };
    let s = generate(5, &params).unwrap();
    assert_eq!(img, s.image.data());
    assert_eq!(depth, s.depth.data());
}

#[test]
fn predict_matches_core() {
    let (img, _) = scene_buffers(1);
    let m = new_model(AdvdepthArchitecture::ModelB, 9);
    let mut out = vec![0.0f32; H * W];
    assert_eq!(unsafe { advdepth_model_predict(m, img.as_ptr(), H, W, out.as_mut_ptr()) }, AdvdepthStatus::Ok);
    unsafe { advdepth_model_free(m) };

    let core = DepthModel::new(Architecture::ModelB, DepthRange::default(), 9);
    let x = advdepth::Tensor::new(vec![3, H, W], img).unwrap();
    assert_eq!(out, core.predict(&x).unwrap().data());
}

#[test]
fn craft_respects_budget() {
    let (img, _) = scene_buffers(2);
    let m = new_model(AdvdepthArchitecture::ModelA, 1);
    let mut v = vec![0.0f32; 3 * H * W];
    let mut loss = -1.0;
    let st = unsafe { advdepth_craft_scale(m, img.as_ptr(), H, W, -0.1, 0.01, -1.0, 5, v.as_mut_ptr(), &mut loss) };
    assert_eq!(st, AdvdepthStatus::Ok);
    assert!(v.iter().all(|x| x.abs() <= 0.01));
    assert!(v.iter().any(|&x| x != 0.0));
    assert!(loss.is_finite() && loss >= 0.0);

    let st = unsafe { advdepth_craft_scale(m, img.as_ptr(), H, W, -1.5, 0.01, -1.0, 5, v.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, AdvdepthStatus::ConfigError);
    unsafe { advdepth_model_free(m) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { advdepth_model_new(7, 0, &mut m) }, AdvdepthStatus::ConfigError);
    assert!(last_error().contains("architecture"));
    assert!(m.is_null());

    assert_eq!(unsafe { advdepth_model_new(0, 0, ptr::null_mut()) }, AdvdepthStatus::NullPointer);

    let dir = CString::new("/nonexistent/advdepth/model").unwrap();
    assert_eq!(unsafe { advdepth_model_load(dir.as_ptr(), &mut m) }, AdvdepthStatus::IoError);
    assert_eq!(unsafe { advdepth_model_load(ptr::null(), &mut m) }, AdvdepthStatus::NullPointer);

    let m = new_model(AdvdepthArchitecture::ModelA, 0);
    let img = vec![0.5f32; 3 * 5 * 7];
    let mut out = vec![0.0f32; 5 * 7];
    let st = unsafe { advdepth_model_predict(m, img.as_ptr(), 5, 7, out.as_mut_ptr()) };
    assert_eq!(st, AdvdepthStatus::ShapeError);
    unsafe { advdepth_model_free(m) };

    let (p, t) = ([1.0f32, 2.0], [1.0f32, 0.0]);
    let mut are = 0.0;
    assert_eq!(unsafe { advdepth_are(p.as_ptr(), t.as_ptr(), 2, &mut are) }, AdvdepthStatus::NumericsError);

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { advdepth_scene_generate(0, H, W, &mut s) }, AdvdepthStatus::Ok);
    let mut small = vec![0.0f32; 4];
    let st = unsafe { advdepth_scene_copy(s, small.as_mut_ptr(), small.len(), ptr::null_mut(), 0) };
    assert_eq!(st, AdvdepthStatus::ShapeError);
    unsafe { advdepth_scene_free(s) };
}

#[test]
fn are_value() {
    let (p, t) = ([1.1f32, 1.8], [1.0f32, 2.0]);
    let mut are = 0.0;
    assert_eq!(unsafe { advdepth_are(p.as_ptr(), t.as_ptr(), 2, &mut are) }, AdvdepthStatus::Ok);
    assert!((are - 0.1).abs() < 1e-6);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m").to_str().unwrap()).unwrap();
    let m = new_model(AdvdepthArchitecture::ModelA, 4);
    assert_eq!(unsafe { advdepth_model_save(m, path.as_ptr()) }, AdvdepthStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { advdepth_model_load(path.as_ptr(), &mut back) }, AdvdepthStatus::Ok);

    let (img, _) = scene_buffers(0);
    let (mut a, mut b) = (vec![0.0f32; H * W], vec![0.0f32; H * W]);
    unsafe {
        advdepth_model_predict(m, img.as_ptr(), H, W, a.as_mut_ptr());
        advdepth_model_predict(back, img.as_ptr(), H, W, b.as_mut_ptr());
        advdepth_model_free(m);
        advdepth_model_free(back);
        advdepth_model_free(ptr::null_mut());
        advdepth_scene_free(ptr::null_mut());
    }
    assert_eq!(a, b);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(advdepth_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_lists_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/advdepth.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 10);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct AdvdepthModel AdvdepthModel;"));
    assert!(header.contains("ADVDEPTH_STATUS_IO_ERROR = 7"));
}

/// Builds the C smoke program against the static library when a C compiler
/// is available.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let profile_dir: PathBuf = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().into();
    let lib = profile_dir.join("libadvdepth_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let st = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("version="));
}
