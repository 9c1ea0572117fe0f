//! C interface to the linear-slam map joining library.
//!
//! Maps are passed around as opaque `LsMap` pointers that the caller owns
//! and releases with `ls_map_free`. Every fallible call returns an
//! `LsStatus`; on failure `ls_last_error` describes the problem for the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use linear_slam::strategy::{complexity_model, run_plan, ComplexityParams, JoinMode, JoinPlan};
use linear_slam::{eval, io, Error, LocalMap, StateKey};

/// Opaque local map handle.
pub struct LsMap {
    inner: LocalMap,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, undersized buffer or rejected parameter.
    InvalidArgument = 1,
    /// Malformed or invalid file content. `ls_last_error_line` gives the line.
    Parse = 2,
    Io = 3,
    /// Singular system, degenerate frame or failed convergence.
    Numeric = 4,
    /// The maps share no usable common elements or disagree on their frames.
    NotJoinable = 5,
    /// An internal panic was caught.
    Internal = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsStrategy {
    Sequential = 0,
    DivideConquer = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsEntityKind {
    Pose = 0,
    Feature = 1,
}

/// Operation counts relative to a batch nonlinear solve.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LsComplexity {
    pub local_build: f64,
    pub seq_join: f64,
    pub seq_total: f64,
    pub dc_join: f64,
    pub dc_total: f64,
    pub nonlinear_seq_join: f64,
    pub nonlinear_seq_total: f64,
    pub nonlinear_dc_join: f64,
    pub nonlinear_dc_total: f64,
}

struct LastError {
    message: CString,
    line: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<LastError>> = const { RefCell::new(None) };
}

fn set_error(message: String, line: usize) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(LastError { message, line }));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> LsStatus {
    match err.root() {
        Error::InvalidInput(_) => LsStatus::InvalidArgument,
        Error::Parse { .. } | Error::InvalidRecord { .. } => LsStatus::Parse,
        Error::Io(_) => LsStatus::Io,
        Error::NotJoinable(_) | Error::FrameMismatch(..) | Error::MissingEntity(_) => LsStatus::NotJoinable,
        _ => LsStatus::Numeric,
    }
}

struct Failure {
    status: LsStatus,
    message: String,
    line: usize,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure {
            status: status_of(&e),
            line: e.root().line().unwrap_or(0),
            message: e.to_string(),
        }
    }
}

fn invalid(msg: &str) -> Failure {
    Failure {
        status: LsStatus::InvalidArgument,
        message: msg.to_owned(),
        line: 0,
    }
}

/// Runs `f`, records any failure for `ls_last_error` and converts panics.
fn guard<F>(f: F) -> LsStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LsStatus::Ok,
        Ok(Err(f)) => {
            set_error(f.message, f.line);
            f.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"), 0);
            LsStatus::Internal
        }
    }
}

unsafe fn map_ref<'a>(map: *const LsMap) -> Result<&'a LocalMap, Failure> {
    map.as_ref().map(|m| &m.inner).ok_or_else(|| invalid("null map handle"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Failure> {
    if path.is_null() {
        return Err(invalid("null path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn map_list(maps: *const *const LsMap, count: usize) -> Result<Vec<LocalMap>, Failure> {
    if count == 0 {
        return Err(invalid("no maps given"));
    }
    if maps.is_null() {
        return Err(invalid("null map array"));
    }
    std::slice::from_raw_parts(maps, count)
        .iter()
        .map(|&m| map_ref(m).cloned())
        .collect()
}

unsafe fn store(out: *mut *mut LsMap, map: LocalMap) {
    *out = Box::into_raw(Box::new(LsMap { inner: map }));
}

/// Message describing the last failure on this thread, or null if the last
/// call succeeded. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ls_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |err| err.message.as_ptr()))
}

/// Input line of the last parse failure on this thread, or 0.
#[no_mangle]
pub extern "C" fn ls_last_error_line() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |err| err.line))
}

/// Reads a local map file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ls_map_read(path: *const c_char, out: *mut *mut LsMap) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = ptr::null_mut();
        let map = io::read_map_file(path_arg(path)?)?;
        store(out, map);
        Ok(())
    })
}

/// Parses a local map from `len` bytes of text.
///
/// # Safety
/// `text` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_map_parse(text: *const u8, len: usize, out: *mut *mut LsMap) -> LsStatus {
    guard(|| {
        if out.is_null() || (text.is_null() && len > 0) {
            return Err(invalid("null pointer"));
        }
        *out = ptr::null_mut();
        let bytes = if len == 0 { &[][..] } else { std::slice::from_raw_parts(text, len) };
        store(out, io::parse_map_bytes(bytes)?);
        Ok(())
    })
}

/// Writes a map to a file in the text format.
///
/// # Safety
/// `map` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ls_map_write(map: *const LsMap, path: *const c_char) -> LsStatus {
    guard(|| {
        let m = map_ref(map)?;
        io::write_map_file(m, path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_map_free(map: *mut LsMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Spatial dimension of the map (2 or 3), or 0 for a null handle.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_map_dim(map: *const LsMap) -> u32 {
    map.as_ref().map_or(0, |m| m.inner.dim().spatial() as u32)
}

/// Number of entities (poses and features) in the estimate.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_map_entity_count(map: *const LsMap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.estimate().len())
}

/// Total number of scalar coordinates in the estimate.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_map_state_len(map: *const LsMap) -> usize {
    map.as_ref().map_or(0, |m| m.inner.estimate().dim())
}

/// Writes the entities defining the map frame to `ids` (room for three) and
/// their number to `count`. `is_pose` tells whether the frame is a pose frame
/// (one pose id) or a feature frame (two or three feature ids).
///
/// # Safety
/// `map` must be a live handle, `ids` writable for three values and the
/// other output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn ls_map_frame(map: *const LsMap, is_pose: *mut bool, ids: *mut u64, count: *mut usize) -> LsStatus {
    guard(|| {
        let frame = map_ref(map)?.frame();
        if is_pose.is_null() || ids.is_null() || count.is_null() {
            return Err(invalid("null output pointer"));
        }
        let entities = frame.entities();
        for (i, k) in entities.iter().enumerate() {
            *ids.add(i) = k.id();
        }
        *count = entities.len();
        *is_pose = frame.is_pose_frame();
        Ok(())
    })
}

/// Describes entity `index`: its kind, id, offset in the estimate vector and
/// number of coordinates.
///
/// # Safety
/// `map` must be a live handle and the output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn ls_map_entity(
    map: *const LsMap,
    index: usize,
    kind: *mut LsEntityKind,
    id: *mut u64,
    offset: *mut usize,
    len: *mut usize,
) -> LsStatus {
    guard(|| {
        let m = map_ref(map)?;
        if kind.is_null() || id.is_null() || offset.is_null() || len.is_null() {
            return Err(invalid("null output pointer"));
        }
        let est = m.estimate();
        if index >= est.len() {
            return Err(invalid("entity index out of range"));
        }
        let (key, _) = est.entry(index);
        let (o, l) = est.span(key).expect("key from the estimate");
        *kind = match key {
            StateKey::Pose(_) => LsEntityKind::Pose,
            StateKey::Feature(_) => LsEntityKind::Feature,
        };
        *id = key.id();
        *offset = o;
        *len = l;
        Ok(())
    })
}

/// Copies the estimate into `buf`, which must hold `ls_map_state_len` values.
///
/// # Safety
/// `map` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ls_map_estimate(map: *const LsMap, buf: *mut f64, len: usize) -> LsStatus {
    guard(|| {
        let values = map_ref(map)?.estimate().values();
        copy_out(values, buf, len)
    })
}

/// Copies the dense information matrix, row-major, into `buf`, which must
/// hold the square of `ls_map_state_len` values.
///
/// # Safety
/// `map` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ls_map_information(map: *const LsMap, buf: *mut f64, len: usize) -> LsStatus {
    guard(|| {
        let dense = map_ref(map)?.info().to_dense();
        // Symmetric, so column-major storage reads the same row-major.
        copy_out(dense.as_slice(), buf, len)
    })
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> Result<(), Failure> {
    if len < values.len() {
        return Err(invalid(&format!("buffer holds {len} values, {} needed", values.len())));
    }
    if !values.is_empty() {
        if buf.is_null() {
            return Err(invalid("null buffer"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    }
    Ok(())
}

/// Joins two maps after bringing them into a common frame. The result is
/// expressed in the frame of the newest pose of `m2` when the maps hold
/// poses, otherwise in a frame built from their common features.
///
/// # Safety
/// `m1` and `m2` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_join(m1: *const LsMap, m2: *const LsMap, out: *mut *mut LsMap) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = ptr::null_mut();
        let joined = linear_slam::strategy::join_pair(map_ref(m1)?, map_ref(m2)?)?;
        store(out, joined);
        Ok(())
    })
}

/// Joins `count` maps with the given strategy. `threads` bounds the
/// parallelism of the divide and conquer strategy; 0 means one thread.
///
/// # Safety
/// `maps` must point to `count` live handles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_join_all(
    maps: *const *const LsMap,
    count: usize,
    strategy: LsStrategy,
    threads: usize,
    out: *mut *mut LsMap,
) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        *out = ptr::null_mut();
        let list = map_list(maps, count)?;
        let mode = match strategy {
            LsStrategy::Sequential => JoinMode::Sequential,
            LsStrategy::DivideConquer => JoinMode::DivideConquer,
        };
        let outcome = run_plan(&JoinPlan::new(mode, list.len()), &list, threads.max(1))?;
        store(out, outcome.map);
        Ok(())
    })
}

/// Weighted squared residual of `solution` against `count` local maps.
///
/// # Safety
/// `solution` and each of `maps` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_chi2(
    solution: *const LsMap,
    maps: *const *const LsMap,
    count: usize,
    out: *mut f64,
) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let s = map_ref(solution)?.framed_state();
        let list = map_list(maps, count)?;
        *out = eval::chi2(&s, &list)?;
        Ok(())
    })
}

/// Evaluates the operation-count model for `n` maps, `og` observations,
/// `sg` state entities and `m` nonlinear iterations.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_complexity(og: f64, sg: f64, m: f64, n: u64, out: *mut LsComplexity) -> LsStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("null output pointer"));
        }
        let r = complexity_model(&ComplexityParams { og, sg, m, n })?;
        *out = LsComplexity {
            local_build: r.local_build,
            seq_join: r.seq_join,
            seq_total: r.seq_total,
            dc_join: r.dc_join,
            dc_total: r.dc_total,
            nonlinear_seq_join: r.nonlinear_seq_join,
            nonlinear_seq_total: r.nonlinear_seq_total,
            nonlinear_dc_join: r.nonlinear_dc_join,
            nonlinear_dc_total: r.nonlinear_dc_total,
        };
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
