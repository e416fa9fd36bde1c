//! C ABI over the skelgnn toolkit.
//!
//! Handles are opaque pointers created by `skg_*_load`/`skg_topology_h36m`
//! and released with the matching `_free`. Every fallible call returns a
//! [`SkgStatus`]; on failure `skg_last_error` describes the most recent
//! error on the calling thread. Arrays are flat, row-major `double`s.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use skelgnn::checkpoint::load_checkpoint_standalone;
use skelgnn::data::normalize_2d;
use skelgnn::metrics::{mpjpe, pa_mpjpe, Joint};
use skelgnn::model::Model;
use skelgnn::{compute_hop_partition, SkeletonTopology, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    ShapeMismatch = 5,
    Degenerate = 6,
    Internal = 7,
}

/// A skeleton graph.
pub struct SkgTopology {
    inner: SkeletonTopology,
}

/// A trained model loaded from a checkpoint.
pub struct SkgModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: SkgStatus, msg: impl Into<String>) -> SkgStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> SkgStatus) -> SkgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(SkgStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, SkgStatus> {
    if p.is_null() {
        return Err(fail(SkgStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(SkgStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn joints3(p: *const f64, n: usize, what: &str) -> Result<Vec<Joint>, SkgStatus> {
    if p.is_null() {
        return Err(fail(SkgStatus::NullPointer, format!("{what} is null")));
    }
    let s: &[f64] = std::slice::from_raw_parts(p, n * 3);
    Ok(s.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next `skg_*` call on the same thread.
#[no_mangle]
pub extern "C" fn skg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn skg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates the built-in 17-joint topology.
///
/// # Safety
/// `out` must be a valid pointer to write a handle to.
#[no_mangle]
pub unsafe extern "C" fn skg_topology_h36m(out: *mut *mut SkgTopology) -> SkgStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkgStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(SkgTopology {
            inner: SkeletonTopology::h36m17(),
        }));
        SkgStatus::Ok
    })
}

/// Loads a topology file (TOML by extension, JSON otherwise).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skg_topology_load(path: *const c_char, out: *mut *mut SkgTopology) -> SkgStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkgStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        if !path.exists() {
            return fail(SkgStatus::Io, format!("no such file: {}", path.display()));
        }
        match SkeletonTopology::load(path) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(SkgTopology { inner: t }));
                SkgStatus::Ok
            }
            Err(e) => fail(SkgStatus::Parse, format!("{e:#}")),
        }
    })
}

/// Releases a topology. Null is ignored.
///
/// # Safety
/// `t` must come from a topology constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn skg_topology_free(t: *mut SkgTopology) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skg_topology_num_nodes(t: *const SkgTopology, out: *mut usize) -> SkgStatus {
    guard(|| {
        if t.is_null() || out.is_null() {
            return fail(SkgStatus::NullPointer, "null argument");
        }
        *out = (*t).inner.num_nodes();
        SkgStatus::Ok
    })
}

/// Writes the `N*N` hop-distance matrix into `out`, which holds `len`
/// entries.
///
/// # Safety
/// `t` must be a live handle and `out` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn skg_topology_hop_distances(t: *const SkgTopology, out: *mut u32, len: usize) -> SkgStatus {
    guard(|| {
        if t.is_null() || out.is_null() {
            return fail(SkgStatus::NullPointer, "null argument");
        }
        let topo = &(*t).inner;
        let n = topo.num_nodes();
        if len < n * n {
            return fail(SkgStatus::ShapeMismatch, format!("need {} entries, got {len}", n * n));
        }
        let hops = match compute_hop_partition(topo, 1) {
            Ok(h) => h,
            Err(e) => return fail(SkgStatus::InvalidArgument, e.to_string()),
        };
        let dst = std::slice::from_raw_parts_mut(out, n * n);
        for i in 0..n {
            for j in 0..n {
                dst[i * n + j] = hops.dist(i, j) as u32;
            }
        }
        SkgStatus::Ok
    })
}

/// Loads a checkpoint written by `skelgnn train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skg_model_load(path: *const c_char, out: *mut *mut SkgModel) -> SkgStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkgStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint_standalone(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(SkgModel { inner: m }));
                SkgStatus::Ok
            }
            Err(e @ skelgnn::error::ModelError::IoFailure { .. }) => fail(SkgStatus::Io, e.to_string()),
            Err(e) => fail(SkgStatus::Parse, e.to_string()),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from `skg_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn skg_model_free(m: *mut SkgModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of input values for a batch of `batch` samples: `batch*N*2` for
/// single-frame models, `batch*2*T*N` for temporal ones.
///
/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn skg_model_input_len(m: *const SkgModel, batch: usize, out: *mut usize) -> SkgStatus {
    guard(|| {
        if m.is_null() || out.is_null() {
            return fail(SkgStatus::NullPointer, "null argument");
        }
        *out = (*m).inner.input_shape(batch).iter().product();
        SkgStatus::Ok
    })
}

/// Eval-mode prediction. `input` holds normalized 2D joints in the layout
/// given by `skg_model_input_len`; `out` receives `batch*N*3` root-relative
/// coordinates.
///
/// # Safety
/// `m` must be a live handle; `input` and `out` must hold `input_len` and
/// `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn skg_model_predict(
    m: *const SkgModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    out: *mut f64,
    out_len: usize,
) -> SkgStatus {
    guard(|| {
        if m.is_null() || input.is_null() || out.is_null() {
            return fail(SkgStatus::NullPointer, "null argument");
        }
        let model = &(*m).inner;
        if batch == 0 {
            return fail(SkgStatus::InvalidArgument, "batch must be positive");
        }
        let shape = model.input_shape(batch);
        let need: usize = shape.iter().product();
        let produced = batch * model.num_nodes() * 3;
        if input_len != need || out_len < produced {
            return fail(
                SkgStatus::ShapeMismatch,
                format!("input needs {need} values (got {input_len}), output {produced} (got {out_len})"),
            );
        }
        let data = std::slice::from_raw_parts(input, input_len).to_vec();
        let x = match Tensor::new(shape, data) {
            Ok(x) => x,
            Err(e) => return fail(SkgStatus::ShapeMismatch, e.to_string()),
        };
        match model.predict(&x) {
            Ok(y) => {
                std::slice::from_raw_parts_mut(out, produced).copy_from_slice(y.data());
                SkgStatus::Ok
            }
            Err(e) => fail(SkgStatus::Internal, e.to_string()),
        }
    })
}

/// Mean per-joint position error between two `num_joints x 3` poses.
///
/// # Safety
/// `pred` and `gt` must hold `3*num_joints` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn skg_mpjpe(pred: *const f64, gt: *const f64, num_joints: usize, out: *mut f64) -> SkgStatus {
    metric(pred, gt, num_joints, out, mpjpe)
}

/// MPJPE after similarity (Procrustes) alignment of `pred` onto `gt`.
///
/// # Safety
/// As for [`skg_mpjpe`].
#[no_mangle]
pub unsafe extern "C" fn skg_pa_mpjpe(pred: *const f64, gt: *const f64, num_joints: usize, out: *mut f64) -> SkgStatus {
    metric(pred, gt, num_joints, out, pa_mpjpe)
}

unsafe fn metric(
    pred: *const f64,
    gt: *const f64,
    n: usize,
    out: *mut f64,
    f: fn(&[Joint], &[Joint]) -> Result<f64, skelgnn::error::MetricError>,
) -> SkgStatus {
    guard(|| {
        if out.is_null() {
            return fail(SkgStatus::NullPointer, "out is null");
        }
        if n == 0 {
            return fail(SkgStatus::InvalidArgument, "num_joints must be positive");
        }
        let (p, g) = match (joints3(pred, n, "pred"), joints3(gt, n, "gt")) {
            (Ok(p), Ok(g)) => (p, g),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match f(&p, &g) {
            Ok(v) => {
                *out = v;
                SkgStatus::Ok
            }
            Err(e) => fail(SkgStatus::Degenerate, e.to_string()),
        }
    })
}

/// Maps pixel coordinates to `[-1, 1]` for a `width x height` image.
/// `joints` and `out` hold `2*num_joints` values and may alias.
///
/// # Safety
/// Both pointers must reference `2*num_joints` values.
#[no_mangle]
pub unsafe extern "C" fn skg_normalize_2d(
    joints: *const f64,
    num_joints: usize,
    width: u32,
    height: u32,
    out: *mut f64,
) -> SkgStatus {
    guard(|| {
        if joints.is_null() || out.is_null() {
            return fail(SkgStatus::NullPointer, "null argument");
        }
        let src: Vec<[f64; 2]> = std::slice::from_raw_parts(joints, 2 * num_joints)
            .chunks_exact(2)
            .map(|c| [c[0], c[1]])
            .collect();
        match normalize_2d(&src, [width, height]) {
            Ok(v) => {
                let dst = std::slice::from_raw_parts_mut(out, 2 * num_joints);
                for (d, p) in dst.chunks_exact_mut(2).zip(v) {
                    d.copy_from_slice(&p);
                }
                SkgStatus::Ok
            }
            Err(e) => fail(SkgStatus::InvalidArgument, e.to_string()),
        }
    })
}
