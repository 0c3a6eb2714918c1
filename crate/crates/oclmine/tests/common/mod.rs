//! Access to the stub OpenCL driver built alongside the tests.

#![allow(dead_code)]

use std::env::consts::{DLL_PREFIX, DLL_SUFFIX};
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, PoisonError};

pub const KIND_CONTEXT: usize = 0;
pub const KIND_QUEUE: usize = 1;
pub const KIND_MEM: usize = 2;
pub const KIND_PROGRAM: usize = 3;
pub const KIND_KERNEL: usize = 4;
pub const KINDS: usize = 5;

/// Mirror of the driver's counter block.
#[repr(C)]
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Stats {
    pub total_calls: u64,
    pub in_flight: u64,
    pub max_in_flight: u64,
    pub kernel_launches: u64,
    pub invalid_releases: u64,
    pub created: [u64; KINDS],
    pub released: [u64; KINDS],
    pub live: [u64; KINDS],
}

/// The stub shared library, next to the test executable's dependencies.
pub fn stub_path() -> PathBuf {
    let exe = std::env::current_exe().expect("test executable path");
    let deps = exe.parent().expect("executable directory");
    let name = format!("{DLL_PREFIX}clstub{DLL_SUFFIX}");
    [deps.join(&name), deps.join("..").join(&name)]
        .into_iter()
        .find(|p| p.exists())
        .unwrap_or_else(|| panic!("{name} not found near {}", deps.display()))
}

/// The driver keeps process-wide state, so tests touching it take turns.
pub fn serial() -> MutexGuard<'static, ()> {
    static TURN: Mutex<()> = Mutex::new(());
    TURN.lock().unwrap_or_else(PoisonError::into_inner)
}

/// A second handle on the stub, used only for its instrumentation exports.
pub struct Stub {
    lib: libloading::Library,
}

impl Stub {
    pub fn open() -> Stub {
        let lib = unsafe { libloading::Library::new(stub_path()) }.expect("load stub driver");
        let stub = Stub { lib };
        stub.reset();
        stub
    }

    fn sym<T: Copy>(&self, name: &str) -> T {
        *unsafe { self.lib.get::<T>(name.as_bytes()) }.unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    pub fn reset(&self) {
        let f: unsafe extern "C" fn() = self.sym("clstub_reset");
        unsafe { f() }
    }

    pub fn stats(&self) -> Stats {
        let f: unsafe extern "C" fn(*mut Stats) = self.sym("clstub_stats");
        let mut s = Stats::default();
        unsafe { f(&mut s) };
        s
    }

    pub fn set_device_type(&self, ty: u64) {
        let f: unsafe extern "C" fn(u64) = self.sym("clstub_set_device_type");
        unsafe { f(ty) }
    }

    pub fn set_platform_count(&self, count: u32) {
        let f: unsafe extern "C" fn(u32) = self.sym("clstub_set_platform_count");
        unsafe { f(count) }
    }

    pub fn set_call_delay_us(&self, micros: u64) {
        let f: unsafe extern "C" fn(u64) = self.sym("clstub_set_call_delay_us");
        unsafe { f(micros) }
    }

    pub fn fail_releases(&self, kind: i32) {
        let f: unsafe extern "C" fn(i32) = self.sym("clstub_fail_releases");
        unsafe { f(kind) }
    }

    /// (kind, handle) for every destroyed object, in order.
    pub fn release_log(&self) -> Vec<(u32, u64)> {
        let f: unsafe extern "C" fn(*mut u32, *mut u64, usize) -> usize =
            self.sym("clstub_release_log");
        let len = unsafe { f(std::ptr::null_mut(), std::ptr::null_mut(), 0) };
        let mut kinds = vec![0u32; len];
        let mut handles = vec![0u64; len];
        let len = unsafe { f(kinds.as_mut_ptr(), handles.as_mut_ptr(), len) }.min(len);
        kinds.into_iter().zip(handles).take(len).collect()
    }
}
