use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use skelgnn::checkpoint::save_checkpoint;
use skelgnn::model::{build_model, ModelConfig};
use skelgnn::{SkeletonTopology, Tensor};
use skelgnn_ffi::*;

fn last_error() -> String {
    let p = skg_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn topology_handles() {
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(skg_topology_h36m(&mut t), SkgStatus::Ok);
        let mut n = 0;
        assert_eq!(skg_topology_num_nodes(t, &mut n), SkgStatus::Ok);
        assert_eq!(n, 17);
        let mut d = vec![0u32; n * n];
        assert_eq!(
            skg_topology_hop_distances(t, d.as_mut_ptr(), 10),
            SkgStatus::ShapeMismatch
        );
        assert!(last_error().contains("289"));
        assert_eq!(skg_topology_hop_distances(t, d.as_mut_ptr(), d.len()), SkgStatus::Ok);
        assert_eq!(d[14 * n + 15], 1);
        assert_eq!(*d.iter().max().unwrap(), 8);
        skg_topology_free(t);
        skg_topology_free(ptr::null_mut());

        let missing = CString::new("/no/such/topology.json").unwrap();
        assert_eq!(skg_topology_load(missing.as_ptr(), &mut t), SkgStatus::Io);
        assert!(last_error().contains("/no/such/topology.json"));
        assert_eq!(skg_topology_load(ptr::null(), &mut t), SkgStatus::NullPointer);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chain.json");
        std::fs::write(
            &p,
            r#"{"num_nodes":3,"edges":[[0,1],[1,2]],"left_right_pairs":[],"root":0}"#,
        )
        .unwrap();
        let cp = CString::new(p.to_str().unwrap()).unwrap();
        assert_eq!(skg_topology_load(cp.as_ptr(), &mut t), SkgStatus::Ok);
        let mut d = [0u32; 9];
        assert_eq!(skg_topology_hop_distances(t, d.as_mut_ptr(), 9), SkgStatus::Ok);
        assert_eq!(d, [0, 1, 2, 1, 0, 1, 2, 1, 0]);
        skg_topology_free(t);
    }
}

#[test]
fn metrics_and_normalization() {
    let gt: Vec<f64> = (0..15).map(|i| ((i * 7) % 11) as f64).collect();
    let pred: Vec<f64> = gt
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % 3 == 0 { 3.0 } else { 0.0 })
        .collect();
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(skg_mpjpe(pred.as_ptr(), gt.as_ptr(), 5, &mut out), SkgStatus::Ok);
        assert_eq!(out, 3.0);
        assert_eq!(skg_pa_mpjpe(pred.as_ptr(), gt.as_ptr(), 5, &mut out), SkgStatus::Ok);
        assert!(out < 1e-9, "{out}");
        let flat = [0.0; 6];
        assert_eq!(
            skg_pa_mpjpe(flat.as_ptr(), flat.as_ptr(), 2, &mut out),
            SkgStatus::Degenerate
        );
        assert_eq!(skg_mpjpe(ptr::null(), gt.as_ptr(), 5, &mut out), SkgStatus::NullPointer);

        let mut px = [0.0, 0.0, 500.0, 250.0];
        let p = px.as_mut_ptr();
        assert_eq!(skg_normalize_2d(p, 2, 1000, 500, p), SkgStatus::Ok);
        assert_eq!(px, [-1.0, -1.0, 0.0, 0.0]);
        assert_eq!(skg_normalize_2d(p, 2, 0, 500, p), SkgStatus::InvalidArgument);
    }
    let v = unsafe { CStr::from_ptr(skg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_predict_matches_library() {
    let topo = SkeletonTopology::h36m17();
    let cfg = ModelConfig {
        channels: 8,
        seed: 5,
        ..ModelConfig::default()
    };
    let model = build_model(&cfg, &topo).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&model, &path).unwrap();
    let input: Vec<f64> = (0..3 * 17 * 2).map(|i| ((i as f64) * 0.37).sin()).collect();
    let expected = model
        .predict(&Tensor::new(vec![3, 17, 2], input.clone()).unwrap())
        .unwrap();
    unsafe {
        let cp = CString::new(path.to_str().unwrap()).unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(skg_model_load(cp.as_ptr(), &mut m), SkgStatus::Ok);
        let mut len = 0;
        assert_eq!(skg_model_input_len(m, 3, &mut len), SkgStatus::Ok);
        assert_eq!(len, input.len());
        let mut out = vec![0.0; 3 * 17 * 3];
        assert_eq!(
            skg_model_predict(m, input.as_ptr(), len, 3, out.as_mut_ptr(), out.len()),
            SkgStatus::Ok
        );
        assert_eq!(out, expected.data());
        assert_eq!(
            skg_model_predict(m, input.as_ptr(), len - 1, 3, out.as_mut_ptr(), out.len()),
            SkgStatus::ShapeMismatch
        );
        skg_model_free(m);

        std::fs::write(&path, "{}").unwrap();
        assert_eq!(skg_model_load(cp.as_ptr(), &mut m), SkgStatus::Parse);
    }
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "skelgnn.h"

int main(void) {
    SkgTopology *t = NULL;
    if (skg_topology_h36m(&t) != SKG_STATUS_OK) return 1;
    size_t n = 0;
    skg_topology_num_nodes(t, &n);
    uint32_t d[17 * 17];
    if (skg_topology_hop_distances(t, d, 17 * 17) != SKG_STATUS_OK) return 2;
    skg_topology_free(t);
    double a[9] = {0, 0, 0, 1, 0, 0, 0, 1, 0};
    double b[9] = {0, 0, 0, 1, 0, 0, 0, 1, 4};
    double e = 0;
    if (skg_mpjpe(a, b, 3, &e) != SKG_STATUS_OK) return 3;
    if (skg_mpjpe(NULL, b, 3, &e) != SKG_STATUS_NULL_POINTER || skg_last_error() == NULL) return 4;
    printf("%zu %u %.6f %s\n", n, d[0 * 17 + 16], e, skg_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .parent()
        .unwrap()
        .join(if cfg!(debug_assertions) { "debug" } else { "release" });
    let lib = lib_dir.join("libskelgnn_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cc runs");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    let text = String::from_utf8(out.stdout).unwrap();
    // Pelvis to right wrist is five bones.
    assert_eq!(text, format!("17 5 1.333333 {}\n", env!("CARGO_PKG_VERSION")));
}
