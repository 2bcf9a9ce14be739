//! C ABI over the `munet` library.
//!
//! Every fallible function returns a [`MunetStatus`]; on failure a message is
//! available from [`munet_last_error`] on the same thread. Handles are opaque
//! and must be released with [`munet_system_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use munet::data::Dataset;
use munet::evolution::{load_tasks, predict, run_experiment, RunConfig, RunLog};
use munet::report::{load_checkpoint, write_run_outputs, Checkpoint};
use munet::Error;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MunetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Checkpoint = 5,
    UnknownTask = 6,
    BufferTooSmall = 7,
    Internal = 8,
}

/// A loaded multitask system.
pub struct MunetSystem {
    ck: Checkpoint,
    task_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> MunetStatus {
    match e {
        Error::Config(_) | Error::UnknownHyperparam(_) => MunetStatus::Config,
        Error::Io { .. } => MunetStatus::Io,
        Error::Checkpoint(_)
        | Error::HashMismatch { .. }
        | Error::DanglingLayer(_)
        | Error::Json(_) => MunetStatus::Checkpoint,
        Error::UnknownTask(_) => MunetStatus::UnknownTask,
        _ => MunetStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (MunetStatus, String)>) -> MunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MunetStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MunetStatus::Internal
        }
    }
}

fn lib(e: Error) -> (MunetStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MunetStatus, String) {
    (MunetStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, (MunetStatus, String)> {
    Ok(PathBuf::from(str_arg(p, what)?))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MunetStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        (
            MunetStatus::InvalidArgument,
            format!("`{what}` is not UTF-8"),
        )
    })
}

/// # Safety
/// `h` must be null or a handle from [`munet_system_load`] that has not been freed.
unsafe fn handle<'a>(h: *const MunetSystem) -> Result<&'a MunetSystem, (MunetStatus, String)> {
    h.as_ref().ok_or_else(|| null("system"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn munet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn munet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint directory into a new handle written to `out`.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn munet_system_load(
    dir: *const c_char,
    out: *mut *mut MunetSystem,
) -> MunetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = load_checkpoint(&path_arg(dir, "dir")?).map_err(lib)?;
        let task_names = ck
            .system
            .best
            .keys()
            .map(|k| {
                CString::new(k.as_str())
                    .map_err(|_| (MunetStatus::Checkpoint, "task name has NUL".into()))
            })
            .collect::<Result<_, _>>()?;
        *out = Box::into_raw(Box::new(MunetSystem { ck, task_names }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `h` must be null or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn munet_system_free(h: *mut MunetSystem) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of tasks with a best model.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn munet_task_count(h: *const MunetSystem, out: *mut usize) -> MunetStatus {
    guard(|| {
        let s = handle(h)?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.task_names.len();
        Ok(())
    })
}

/// Name of task `index` (sorted order). The string lives as long as the handle.
///
/// # Safety
/// `h` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn munet_task_name(
    h: *const MunetSystem,
    index: usize,
    out: *mut *const c_char,
) -> MunetStatus {
    guard(|| {
        let s = handle(h)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let name = s.task_names.get(index).ok_or_else(|| {
            (
                MunetStatus::InvalidArgument,
                format!("task index {index} out of range"),
            )
        })?;
        *out = name.as_ptr();
        Ok(())
    })
}

/// Number of output classes of the best model for `task`.
///
/// # Safety
/// `h` must be a live handle; `task` a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn munet_task_num_classes(
    h: *const MunetSystem,
    task: *const c_char,
    out: *mut usize,
) -> MunetStatus {
    guard(|| {
        let s = handle(h)?;
        let task = str_arg(task, "task")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m =
            s.ck.system
                .best
                .get(task)
                .ok_or_else(|| lib(Error::UnknownTask(task.into())))?;
        let head = s.ck.system.store.get(m.head()).map_err(lib)?;
        *out = head.config().num_classes;
        Ok(())
    })
}

/// Accounted parameter count of the best model for `task`.
///
/// # Safety
/// `h` must be a live handle; `task` a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn munet_accounted_params(
    h: *const MunetSystem,
    task: *const c_char,
    out: *mut f64,
) -> MunetStatus {
    guard(|| {
        let s = handle(h)?;
        let task = str_arg(task, "task")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m =
            s.ck.system
                .best
                .get(task)
                .ok_or_else(|| lib(Error::UnknownTask(task.into())))?;
        *out = s.ck.system.accounted_params(m, task).map_err(lib)?;
        Ok(())
    })
}

/// Logits of the best model for `task` on `count` images of
/// `height × width × channels` bytes each (row-major, channels last).
///
/// Writes `count × classes` floats to `out` when `out_capacity` suffices;
/// `out_len` always receives the required length.
///
/// # Safety
/// `pixels` must hold `count·height·width·channels` bytes; `out` must hold
/// `out_capacity` floats; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn munet_eval_logits(
    h: *const MunetSystem,
    task: *const c_char,
    pixels: *const u8,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    out: *mut f32,
    out_capacity: usize,
    out_len: *mut usize,
) -> MunetStatus {
    guard(|| {
        let s = handle(h)?;
        let task = str_arg(task, "task")?;
        let out_len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let m =
            s.ck.system
                .best
                .get(task)
                .ok_or_else(|| lib(Error::UnknownTask(task.into())))?;
        let classes =
            s.ck.system
                .store
                .get(m.head())
                .map_err(lib)?
                .config()
                .num_classes;
        let need = count * classes;
        *out_len = need;
        if count == 0 {
            return Ok(());
        }
        if out.is_null() || out_capacity < need {
            return Err((
                MunetStatus::BufferTooSmall,
                format!("need {need} floats, got {out_capacity}"),
            ));
        }
        let bytes = std::slice::from_raw_parts(pixels, count * height * width * channels).to_vec();
        let ds = Dataset::new(height, width, channels, bytes, vec![0; count]).map_err(lib)?;
        let layers = m
            .layers
            .iter()
            .map(|&id| s.ck.system.store.get(id).map(|l| (l.config(), l.params())))
            .collect::<munet::Result<Vec<_>>>()
            .map_err(lib)?;
        let batch = s.ck.config.as_ref().map_or(256, |c| c.eval_batch_size);
        let logits = predict(&layers, &ds, &m.hparams, batch).map_err(lib)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(logits.data());
        Ok(())
    })
}

/// Runs the evolutionary search for the config file at `config_path` and
/// writes `run.jsonl`, `summary.json` and `checkpoint/` under `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated paths.
#[no_mangle]
pub unsafe extern "C" fn munet_evolve(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> MunetStatus {
    guard(|| {
        let cfg = RunConfig::from_path(&path_arg(config_path, "config_path")?).map_err(lib)?;
        let out = path_arg(out_dir, "out_dir")?;
        std::fs::create_dir_all(&out)
            .map_err(|e| (MunetStatus::Io, format!("{}: {e}", out.display())))?;
        let tasks = load_tasks(&cfg).map_err(lib)?;
        let log = RunLog::to_file(&out.join("run.jsonl")).map_err(lib)?;
        let run = run_experiment(&cfg, &tasks, log).map_err(lib)?;
        write_run_outputs(&out, &cfg, &tasks, &run).map_err(lib)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_and_null_handling() {
        let v = unsafe { CStr::from_ptr(munet_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
        let mut n = 0usize;
        assert_eq!(
            unsafe { munet_task_count(ptr::null(), &mut n) },
            MunetStatus::NullPointer
        );
        let msg = unsafe { CStr::from_ptr(munet_last_error()) }
            .to_str()
            .unwrap();
        assert!(msg.contains("system"), "{msg}");
        unsafe { munet_system_free(ptr::null_mut()) };
    }

    #[test]
    fn load_missing_dir_is_io_error() {
        let dir = CString::new("/nonexistent/munet-checkpoint").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(
            unsafe { munet_system_load(dir.as_ptr(), &mut h) },
            MunetStatus::Io
        );
        assert!(h.is_null());
    }

    #[test]
    fn bad_config_is_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tmp.path().join("bad.toml");
        std::fs::write(&cfg, "generations = 1\n").unwrap();
        let (c, o) = (
            CString::new(cfg.to_str().unwrap()).unwrap(),
            CString::new(tmp.path().join("out").to_str().unwrap()).unwrap(),
        );
        assert_eq!(
            unsafe { munet_evolve(c.as_ptr(), o.as_ptr()) },
            MunetStatus::Config
        );
    }
}
