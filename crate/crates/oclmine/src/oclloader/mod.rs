//! Runtime loader for the system OpenCL library.
//!
//! [`OpenCl::load`] opens the shared library but resolves nothing. Each
//! wrapped entry point (see [`api`]) looks its symbol up immediately before
//! its first call and caches it; [`OpenCl::unload`] drops the library and the
//! cache together. Every call checks the load status under the read side of a
//! [`RwLockWp`] and keeps holding it while the native function runs, so an
//! unload waits for in-flight calls and no call is forwarded once unload has
//! started. Loaded calls are forwarded unchanged and return exactly what the
//! native function returns.

pub mod api;
pub mod sys;

use std::env;
use std::ffi::c_void;
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::atomic::{AtomicPtr, Ordering};
use std::sync::OnceLock;

pub use api::Entry;
use sys::cl_int;

use crate::concur::{LockError, RwLockWp};

/// Returned by every wrapped call while no library is loaded
/// (`CL_PLATFORM_NOT_FOUND_KHR`).
pub const NOT_LOADED: cl_int = -1001;

/// Returned when the loaded library does not export the requested entry.
pub const SYMBOL_MISSING: cl_int = -1999;

/// Environment variable naming the library to load before the default probes.
pub const LIB_PATH_ENV: &str = "OPENCL_LIB_PATH";

/// Conventional library locations, tried in order by [`OpenCl::load_default`].
pub const DEFAULT_CANDIDATES: &[&str] = &[
    "libOpenCL.so.1",
    "libOpenCL.so",
    "/system/vendor/lib64/libOpenCL.so",
    "/system/vendor/lib/libOpenCL.so",
    "/vendor/lib64/libOpenCL.so",
    "/vendor/lib/libOpenCL.so",
    "/system/vendor/lib64/egl/libGLES_mali.so",
    "/system/vendor/lib/egl/libGLES_mali.so",
    "/system/lib64/libOpenCL.so",
    "/system/lib/libOpenCL.so",
    "/usr/lib/x86_64-linux-gnu/libOpenCL.so.1",
    "/usr/lib/aarch64-linux-gnu/libOpenCL.so.1",
    "/System/Library/Frameworks/OpenCL.framework/OpenCL",
    "OpenCL.dll",
];

#[derive(Debug, thiserror::Error)]
pub enum LoaderError {
    #[error("cannot load OpenCL library {path}: {reason}")]
    NotFound { path: PathBuf, reason: String },
    #[error("no OpenCL library found; tried: {}", tried.join(", "))]
    NoCandidate { tried: Vec<String> },
    #[error(transparent)]
    Lock(#[from] LockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Unloaded,
    Loaded,
}

struct Loaded {
    path: PathBuf,
    library: libloading::Library,
    symbols: Box<[AtomicPtr<c_void>]>,
}

impl Loaded {
    fn resolve(&self, entry: Entry) -> Option<*mut c_void> {
        let slot = &self.symbols[entry as usize];
        let cached = slot.load(Ordering::Acquire);
        if !cached.is_null() {
            return Some(cached);
        }
        let mut name = entry.name().as_bytes().to_vec();
        name.push(0);
        // SAFETY: only the address is taken here; the caller casts it to the
        // entry's declared C signature.
        let sym = unsafe { self.library.get::<*mut c_void>(&name) }.ok()?;
        let addr = *sym;
        if addr.is_null() {
            return None;
        }
        // concurrent resolvers store the same address
        slot.store(addr, Ordering::Release);
        Some(addr)
    }
}

/// The wrapper library: load state plus lazily resolved entry points.
pub struct OpenCl {
    state: RwLockWp<Option<Loaded>>,
}

impl Default for OpenCl {
    fn default() -> Self {
        OpenCl::new()
    }
}

impl std::fmt::Debug for OpenCl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenCl")
            .field("status", &self.status())
            .field("path", &self.library_path())
            .field("resolved", &self.resolved_count())
            .finish()
    }
}

impl OpenCl {
    /// A fresh, unloaded loader. Most programs use [`OpenCl::global`].
    pub fn new() -> Self {
        OpenCl { state: RwLockWp::new(None) }
    }

    /// Process-wide loader instance.
    pub fn global() -> &'static OpenCl {
        static GLOBAL: OnceLock<OpenCl> = OnceLock::new();
        GLOBAL.get_or_init(OpenCl::new)
    }

    /// Loads the library at `path`. Loading the already-loaded path again is
    /// a no-op; loading a different path replaces the current library only
    /// once the new one has opened.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<Status, LoaderError> {
        let path = path.as_ref();
        let mut state = self.state.write()?;
        if let Some(current) = state.as_ref() {
            if current.path == path {
                return Ok(Status::Loaded);
            }
        }
        // SAFETY: loading a shared library runs its initialisers; the caller
        // vouches for the library by naming it.
        let library = unsafe { libloading::Library::new(path) }.map_err(|e| {
            LoaderError::NotFound { path: path.to_path_buf(), reason: e.to_string() }
        })?;
        let symbols = Entry::ALL.iter().map(|_| AtomicPtr::new(ptr::null_mut())).collect();
        *state = Some(Loaded { path: path.to_path_buf(), library, symbols });
        Ok(Status::Loaded)
    }

    /// Loads `$OPENCL_LIB_PATH` if set, otherwise the first of
    /// [`DEFAULT_CANDIDATES`] that opens.
    pub fn load_default(&self) -> Result<PathBuf, LoaderError> {
        let mut tried = Vec::new();
        let from_env = env::var_os(LIB_PATH_ENV).map(PathBuf::from);
        for candidate in from_env.into_iter().chain(DEFAULT_CANDIDATES.iter().map(PathBuf::from)) {
            match self.load(&candidate) {
                Ok(_) => return Ok(candidate),
                Err(LoaderError::NotFound { .. }) => tried.push(candidate.display().to_string()),
                Err(e) => return Err(e),
            }
        }
        Err(LoaderError::NoCandidate { tried })
    }

    /// Drops the library and every cached symbol. The OS decides whether the
    /// library's memory is actually released. No-op when unloaded.
    pub fn unload(&self) -> Result<Status, LoaderError> {
        let mut state = self.state.write()?;
        *state = None;
        Ok(Status::Unloaded)
    }

    pub fn status(&self) -> Status {
        if self.state.read().is_some() {
            Status::Loaded
        } else {
            Status::Unloaded
        }
    }

    pub fn library_path(&self) -> Option<PathBuf> {
        self.state.read().as_ref().map(|l| l.path.clone())
    }

    /// Number of entry points resolved since the last load.
    pub fn resolved_count(&self) -> usize {
        self.state.read().as_ref().map_or(0, |l| {
            l.symbols.iter().filter(|s| !s.load(Ordering::Acquire).is_null()).count()
        })
    }

    pub fn is_resolved(&self, entry: Entry) -> bool {
        self.state
            .read()
            .as_ref()
            .is_some_and(|l| !l.symbols[entry as usize].load(Ordering::Acquire).is_null())
    }

    /// Resolves `entry` and runs `call` with its address while holding read
    /// access, or runs `fail` with [`NOT_LOADED`] / [`SYMBOL_MISSING`].
    fn forward<R>(
        &self,
        entry: Entry,
        call: impl FnOnce(*mut c_void) -> R,
        fail: impl FnOnce(cl_int) -> R,
    ) -> R {
        let state = self.state.read();
        let Some(loaded) = state.as_ref() else {
            return fail(NOT_LOADED);
        };
        match loaded.resolve(entry) {
            Some(addr) => call(addr),
            None => fail(SYMBOL_MISSING),
        }
    }
}
