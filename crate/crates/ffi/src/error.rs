use std::cell::RefCell;
use std::ffi::CString;
use std::os::raw::c_char;
use std::panic::{catch_unwind, UnwindSafe};

use cachetrap::Error;

/// Status returned by every fallible call. `Ok` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Input = 4,
    Load = 5,
    Injection = 6,
    Address = 7,
    UndefinedPrediction = 8,
    Guard = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&Error> for CtStatus {
    fn from(err: &Error) -> Self {
        match err {
            Error::Config(_) => CtStatus::Config,
            Error::Input(_) | Error::Dataset(_) | Error::Json(_) => CtStatus::Input,
            Error::Load(_) => CtStatus::Load,
            Error::Injection(_) => CtStatus::Injection,
            Error::Address(_) => CtStatus::Address,
            Error::UndefinedPrediction { .. } => CtStatus::UndefinedPrediction,
            Error::Guard { .. } => CtStatus::Guard,
            Error::Io(_) => CtStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

pub(crate) fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

pub(crate) fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// A failed call: status plus the message stored for `ct_last_error`.
pub(crate) struct Failure(pub CtStatus, pub String);

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure(CtStatus::from(&err), err.to_string())
    }
}

pub(crate) fn fail<T>(status: CtStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, records any error or panic, and converts to a status.
pub(crate) fn guard<F: FnOnce() -> Result<(), Failure> + UnwindSafe>(f: F) -> CtStatus {
    clear_last_error();
    match catch_unwind(f) {
        Ok(Ok(())) => CtStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside cachetrap");
            CtStatus::Panic
        }
    }
}

/// Message for the most recent failed call on this thread, or NULL. Valid
/// until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}
