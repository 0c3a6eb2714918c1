//! OpenCL backend.
//!
//! [`GpuContext::setup`] picks a device, creates a context and an in-order
//! queue, and compiles the requested kernel programs from source.
//! [`GpuContext::bind`] wraps a dataset in device buffers created over host
//! memory (`CL_MEM_USE_HOST_PTR`); the host allocations behind them never move
//! while the buffers exist. Both count as setup.
//!
//! The algorithms reuse the shared drivers: Kmeans assigns on the device with
//! one launch per iteration and updates centres on the host, DBSCAN runs the
//! host traversal with one launch per region query. The token is polled
//! between launches.

use std::ffi::{c_void, CString};
use std::fmt;
use std::io;
use std::mem::size_of;
use std::path::Path;
use std::ptr;
use std::sync::Arc;
use std::time::Instant;

use oclmine_core::exact::CenterSums;
use oclmine_core::kmeans::{initial_centers, lloyd, Assigner, Iteration};
use oclmine_core::{
    dbscan_with, Cancel, ClusterError, Dataset, DbscanParams, KmeansInit, KmeansParams,
    KmeansResult, QueryPhase, RegionQuery,
};

use crate::oclloader::sys::*;
use crate::oclloader::OpenCl;
use crate::timing::{nanos, SetupTiming};

/// The three device programs, one kernel each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Program {
    KmeansAssign,
    DbscanMain,
    DbscanExpand,
}

impl Program {
    pub const ALL: [Program; 3] =
        [Program::KmeansAssign, Program::DbscanMain, Program::DbscanExpand];
    pub const KMEANS: &'static [Program] = &[Program::KmeansAssign];
    pub const DBSCAN: &'static [Program] = &[Program::DbscanMain, Program::DbscanExpand];

    pub const fn kernel_name(self) -> &'static str {
        match self {
            Program::KmeansAssign => "kmeans_assign",
            Program::DbscanMain => "dbscan_reach_main",
            Program::DbscanExpand => "dbscan_reach_expand",
        }
    }

    pub const fn file_name(self) -> &'static str {
        match self {
            Program::KmeansAssign => "kmeans_assign.cl",
            Program::DbscanMain => "dbscan_main.cl",
            Program::DbscanExpand => "dbscan_expand.cl",
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name())
    }
}

/// Kernel sources plus the compiler options they are built with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSourceBundle {
    pub kmeans_assign: String,
    pub dbscan_main: String,
    pub dbscan_expand: String,
    pub build_options: String,
}

impl Default for KernelSourceBundle {
    fn default() -> Self {
        KernelSourceBundle::embedded()
    }
}

impl KernelSourceBundle {
    /// Strict IEEE single precision: no fast-math or contraction options.
    pub const DEFAULT_BUILD_OPTIONS: &'static str = "-cl-std=CL1.1";

    /// The sources shipped in `kernels/`, compiled into the binary.
    pub fn embedded() -> Self {
        KernelSourceBundle {
            kmeans_assign: include_str!("../kernels/kmeans_assign.cl").to_owned(),
            dbscan_main: include_str!("../kernels/dbscan_main.cl").to_owned(),
            dbscan_expand: include_str!("../kernels/dbscan_expand.cl").to_owned(),
            build_options: Self::DEFAULT_BUILD_OPTIONS.to_owned(),
        }
    }

    /// Reads the three `.cl` files from `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> io::Result<Self> {
        let dir = dir.as_ref();
        let read = |p: Program| std::fs::read_to_string(dir.join(p.file_name()));
        Ok(KernelSourceBundle {
            kmeans_assign: read(Program::KmeansAssign)?,
            dbscan_main: read(Program::DbscanMain)?,
            dbscan_expand: read(Program::DbscanExpand)?,
            build_options: Self::DEFAULT_BUILD_OPTIONS.to_owned(),
        })
    }

    pub fn source(&self, program: Program) -> &str {
        match program {
            Program::KmeansAssign => &self.kmeans_assign,
            Program::DbscanMain => &self.dbscan_main,
            Program::DbscanExpand => &self.dbscan_expand,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GpuError {
    #[error("no usable OpenCL device (code {code})")]
    DeviceUnavailable { code: cl_int },
    #[error("building {program} failed:\n{log}")]
    CompileError { program: Program, log: String },
    #[error("{call} failed with code {code}")]
    Call { call: &'static str, code: cl_int },
    #[error("program {0} was not built in this context")]
    ProgramMissing(Program),
    #[error("dataset too large for the device kernels: {0}")]
    TooLarge(&'static str),
    #[error("device returned inconsistent results: {0}")]
    Inconsistent(&'static str),
    #[error("context used after teardown")]
    UseAfterTeardown,
}

fn check(call: &'static str, code: cl_int) -> Result<(), GpuError> {
    if code == CL_SUCCESS {
        Ok(())
    } else {
        Err(GpuError::Call { call, code })
    }
}

/// Setup choices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GpuOptions {
    /// Fall back to any device type when no GPU is present.
    pub allow_cpu_device: bool,
    /// Programs to build; the others stay unavailable in the context.
    pub programs: Vec<Program>,
}

impl Default for GpuOptions {
    fn default() -> Self {
        GpuOptions { allow_cpu_device: false, programs: Program::ALL.to_vec() }
    }
}

struct Built {
    program: Program,
    handle: cl_program,
    kernel: cl_kernel,
}

/// Device buffers over host memory that stays in place until release.
struct DeviceBufferSet {
    // creation order; released in reverse
    data: cl_mem,
    state: cl_mem,
    params: cl_mem,
    counter: cl_mem,
    host_data: Arc<[f32]>,
    _host_state: Box<[u16]>,
    _host_params: Box<[f32]>,
    _host_counter: Box<u32>,
    n: usize,
    d: usize,
    k: usize,
}

/// An OpenCL context with its queue, kernels and (once bound) buffers.
pub struct GpuContext<'cl> {
    cl: &'cl OpenCl,
    platform: cl_platform_id,
    device: cl_device_id,
    device_name: String,
    device_type: cl_device_type,
    context: cl_context,
    queue: cl_command_queue,
    built: Vec<Built>,
    buffers: Option<DeviceBufferSet>,
    setup_ns: u64,
    live: bool,
    release_failures: Vec<(&'static str, cl_int)>,
}

impl fmt::Debug for GpuContext<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GpuContext")
            .field("device", &self.device_name)
            .field("device_type", &self.device_type)
            .field("programs", &self.built.iter().map(|b| b.program).collect::<Vec<_>>())
            .field("bound", &self.buffers.as_ref().map(|b| (b.n, b.d, b.k)))
            .field("live", &self.live)
            .finish()
    }
}

impl<'cl> GpuContext<'cl> {
    pub fn setup(
        cl: &'cl OpenCl,
        bundle: &KernelSourceBundle,
        opts: &GpuOptions,
    ) -> Result<Self, GpuError> {
        let start = Instant::now();
        let (platform, device, device_type) = pick_device(cl, opts.allow_cpu_device)?;
        let device_name = device_string(cl, device, CL_DEVICE_NAME).unwrap_or_default();

        let mut ctx = GpuContext {
            cl,
            platform,
            device,
            device_name,
            device_type,
            context: ptr::null_mut(),
            queue: ptr::null_mut(),
            built: Vec::new(),
            buffers: None,
            setup_ns: 0,
            live: true,
            release_failures: Vec::new(),
        };
        // on any error below, Drop releases whatever was created
        let mut err = CL_SUCCESS;
        ctx.context =
            unsafe { cl.clCreateContext(ptr::null(), 1, &device, None, ptr::null_mut(), &mut err) };
        check("clCreateContext", err)?;
        ctx.queue = unsafe { cl.clCreateCommandQueue(ctx.context, device, 0, &mut err) };
        check("clCreateCommandQueue", err)?;

        let options = CString::new(bundle.build_options.as_str())
            .map_err(|_| GpuError::Call { call: "clBuildProgram", code: CL_INVALID_VALUE })?;
        for &program in &opts.programs {
            if ctx.built.iter().any(|b| b.program == program) {
                continue;
            }
            ctx.build(program, bundle.source(program), &options)?;
        }
        ctx.setup_ns = nanos(start.elapsed());
        Ok(ctx)
    }

    fn build(&mut self, program: Program, source: &str, options: &CString) -> Result<(), GpuError> {
        let cl = self.cl;
        let mut err = CL_SUCCESS;
        let text = source.as_ptr().cast::<std::ffi::c_char>();
        let len = source.len();
        let handle =
            unsafe { cl.clCreateProgramWithSource(self.context, 1, &text, &len, &mut err) };
        check("clCreateProgramWithSource", err)?;
        self.built.push(Built { program, handle, kernel: ptr::null_mut() });

        let code = unsafe {
            cl.clBuildProgram(handle, 1, &self.device, options.as_ptr(), None, ptr::null_mut())
        };
        if code == CL_BUILD_PROGRAM_FAILURE {
            let log = self.build_log(handle);
            return Err(GpuError::CompileError { program, log });
        }
        check("clBuildProgram", code)?;

        let name = CString::new(program.kernel_name()).expect("kernel names have no NUL");
        let kernel = unsafe { cl.clCreateKernel(handle, name.as_ptr(), &mut err) };
        check("clCreateKernel", err)?;
        self.built.last_mut().expect("just pushed").kernel = kernel;
        Ok(())
    }

    fn build_log(&self, program: cl_program) -> String {
        let cl = self.cl;
        let mut size = 0usize;
        let code = unsafe {
            cl.clGetProgramBuildInfo(
                program,
                self.device,
                CL_PROGRAM_BUILD_LOG,
                0,
                ptr::null_mut(),
                &mut size,
            )
        };
        if code != CL_SUCCESS || size == 0 {
            return format!("(build log unavailable, code {code})");
        }
        let mut buf = vec![0u8; size];
        let code = unsafe {
            cl.clGetProgramBuildInfo(
                program,
                self.device,
                CL_PROGRAM_BUILD_LOG,
                size,
                buf.as_mut_ptr().cast(),
                ptr::null_mut(),
            )
        };
        if code != CL_SUCCESS {
            return format!("(build log unavailable, code {code})");
        }
        while buf.last() == Some(&0) {
            buf.pop();
        }
        String::from_utf8_lossy(&buf).into_owned()
    }

    pub fn device_name(&self) -> &str {
        &self.device_name
    }

    pub fn device_type(&self) -> cl_device_type {
        self.device_type
    }

    pub fn platform(&self) -> cl_platform_id {
        self.platform
    }

    pub fn is_live(&self) -> bool {
        self.live
    }

    pub fn has_program(&self, program: Program) -> bool {
        self.built.iter().any(|b| b.program == program)
    }

    /// Setup time so far, including every [`bind`](Self::bind).
    pub fn setup_ns(&self) -> u64 {
        self.setup_ns
    }

    /// Release calls that failed during teardown, in order.
    pub fn release_failures(&self) -> &[(&'static str, cl_int)] {
        &self.release_failures
    }

    fn kernel(&self, program: Program) -> Result<cl_kernel, GpuError> {
        self.ensure_live()?;
        self.built
            .iter()
            .find(|b| b.program == program)
            .map(|b| b.kernel)
            .ok_or(GpuError::ProgramMissing(program))
    }

    fn ensure_live(&self) -> Result<(), GpuError> {
        if self.live {
            Ok(())
        } else {
            Err(GpuError::UseAfterTeardown)
        }
    }

    /// Creates the buffer set for `ds` with room for `k` centres. A no-op
    /// when the same dataset is bound with enough centre space.
    pub fn bind(&mut self, ds: &Dataset, k: usize) -> Result<(), GpuError> {
        self.ensure_live()?;
        if let Some(b) = &self.buffers {
            if Arc::ptr_eq(&b.host_data, &ds.shared()) && b.k >= k {
                return Ok(());
            }
        }
        let start = Instant::now();
        self.release_buffers();
        if u32::try_from(ds.len()).is_err() || u32::try_from(ds.features()).is_err() {
            return Err(GpuError::TooLarge("point count exceeds 32 bits"));
        }
        let k = k.max(1);
        let host_data = ds.shared();
        let mut set = DeviceBufferSet {
            data: ptr::null_mut(),
            state: ptr::null_mut(),
            params: ptr::null_mut(),
            counter: ptr::null_mut(),
            host_data,
            _host_state: vec![0u16; ds.len()].into_boxed_slice(),
            _host_params: vec![0f32; k * ds.features()].into_boxed_slice(),
            _host_counter: Box::new(0),
            n: ds.len(),
            d: ds.features(),
            k,
        };
        let result = self.create_buffers(&mut set);
        // partially created sets are still released in reverse order
        self.buffers = Some(set);
        if result.is_err() {
            self.release_buffers();
        }
        self.setup_ns += nanos(start.elapsed());
        result
    }

    fn create_buffers(&self, set: &mut DeviceBufferSet) -> Result<(), GpuError> {
        let cl = self.cl;
        let mut err = CL_SUCCESS;
        let create = |flags: cl_mem_flags, bytes: usize, host: *mut c_void, err: &mut cl_int| unsafe {
            cl.clCreateBuffer(self.context, flags | CL_MEM_USE_HOST_PTR, bytes, host, err)
        };
        // the device never writes through a read-only buffer, so handing out
        // the shared dataset's address mutably is sound
        set.data = create(
            CL_MEM_READ_ONLY,
            size_of_val(&*set.host_data),
            set.host_data.as_ptr().cast_mut().cast(),
            &mut err,
        );
        check("clCreateBuffer(data)", err)?;
        set.state = create(
            CL_MEM_READ_WRITE,
            size_of_val(&*set._host_state),
            set._host_state.as_mut_ptr().cast(),
            &mut err,
        );
        check("clCreateBuffer(state)", err)?;
        set.params = create(
            CL_MEM_READ_ONLY,
            size_of_val(&*set._host_params),
            set._host_params.as_mut_ptr().cast(),
            &mut err,
        );
        check("clCreateBuffer(params)", err)?;
        set.counter = create(
            CL_MEM_READ_WRITE,
            size_of::<u32>(),
            ptr::from_mut(&mut *set._host_counter).cast(),
            &mut err,
        );
        check("clCreateBuffer(counter)", err)
    }

    fn release_buffers(&mut self) {
        let Some(set) = self.buffers.take() else {
            return;
        };
        for mem in [set.counter, set.params, set.state, set.data] {
            if !mem.is_null() {
                let code = unsafe { self.cl.clReleaseMemObject(mem) };
                if code != CL_SUCCESS {
                    self.release_failures.push(("clReleaseMemObject", code));
                }
            }
        }
        // host memory is freed only now, after its buffers are gone
        drop(set);
    }

    /// Releases buffers (reverse creation order), kernels, programs, queue
    /// and context. Failed releases are recorded and skipped.
    pub fn teardown(&mut self) -> Result<SetupTiming, GpuError> {
        self.ensure_live()?;
        let start = Instant::now();
        self.live = false;
        self.release_buffers();
        let cl = self.cl;
        let mut failures = Vec::new();
        let mut note = |call: &'static str, code: cl_int| {
            if code != CL_SUCCESS {
                failures.push((call, code));
            }
        };
        for b in self.built.iter().rev() {
            if !b.kernel.is_null() {
                note("clReleaseKernel", unsafe { cl.clReleaseKernel(b.kernel) });
            }
        }
        for b in self.built.drain(..).rev() {
            note("clReleaseProgram", unsafe { cl.clReleaseProgram(b.handle) });
        }
        if !self.queue.is_null() {
            note("clReleaseCommandQueue", unsafe { cl.clReleaseCommandQueue(self.queue) });
            self.queue = ptr::null_mut();
        }
        if !self.context.is_null() {
            note("clReleaseContext", unsafe { cl.clReleaseContext(self.context) });
            self.context = ptr::null_mut();
        }
        self.release_failures.extend(failures);
        Ok(SetupTiming { setup_ns: self.setup_ns, teardown_ns: nanos(start.elapsed()) })
    }

    fn set_arg<T>(&self, kernel: cl_kernel, index: cl_uint, value: &T) -> Result<(), GpuError> {
        let code = unsafe {
            self.cl.clSetKernelArg(kernel, index, size_of::<T>(), ptr::from_ref(value).cast())
        };
        check("clSetKernelArg", code)
    }

    fn launch(&self, kernel: cl_kernel, global: usize) -> Result<(), GpuError> {
        let cl = self.cl;
        let code = unsafe {
            cl.clEnqueueNDRangeKernel(
                self.queue,
                kernel,
                1,
                ptr::null(),
                &global,
                ptr::null(),
                0,
                ptr::null(),
                ptr::null_mut(),
            )
        };
        check("clEnqueueNDRangeKernel", code)?;
        check("clFinish", unsafe { cl.clFinish(self.queue) })
    }

    fn write<T: Copy>(&self, mem: cl_mem, values: &[T]) -> Result<(), GpuError> {
        let code = unsafe {
            self.cl.clEnqueueWriteBuffer(
                self.queue,
                mem,
                CL_TRUE,
                0,
                size_of_val(values),
                values.as_ptr().cast(),
                0,
                ptr::null(),
                ptr::null_mut(),
            )
        };
        check("clEnqueueWriteBuffer", code)
    }

    fn read_counter(&self, mem: cl_mem) -> Result<u32, GpuError> {
        let mut value = 0u32;
        let code = unsafe {
            self.cl.clEnqueueReadBuffer(
                self.queue,
                mem,
                CL_TRUE,
                0,
                size_of::<u32>(),
                ptr::from_mut(&mut value).cast(),
                0,
                ptr::null(),
                ptr::null_mut(),
            )
        };
        check("clEnqueueReadBuffer", code).map(|()| value)
    }

    /// Maps the state buffer for reading and hands the `n` words to `f`.
    fn with_state<R>(&self, f: impl FnOnce(&[u16]) -> R) -> Result<R, GpuError> {
        let set = self.buffers.as_ref().expect("bound before use");
        let cl = self.cl;
        let mut err = CL_SUCCESS;
        let bytes = set.n * size_of::<u16>();
        let mapped = unsafe {
            cl.clEnqueueMapBuffer(
                self.queue,
                set.state,
                CL_TRUE,
                CL_MAP_READ,
                0,
                bytes,
                0,
                ptr::null(),
                ptr::null_mut(),
                &mut err,
            )
        };
        check("clEnqueueMapBuffer", err)?;
        if mapped.is_null() || !(mapped as usize).is_multiple_of(align_of::<u16>()) {
            return Err(GpuError::Inconsistent("state mapping is unusable"));
        }
        // SAFETY: the blocking map returned `bytes` readable bytes that stay
        // valid until the unmap below
        let words = unsafe { std::slice::from_raw_parts(mapped.cast::<u16>(), set.n) };
        let out = f(words);
        let code = unsafe {
            cl.clEnqueueUnmapMemObject(
                self.queue,
                set.state,
                mapped,
                0,
                ptr::null(),
                ptr::null_mut(),
            )
        };
        check("clEnqueueUnmapMemObject", code)?;
        Ok(out)
    }
}

impl Drop for GpuContext<'_> {
    fn drop(&mut self) {
        if self.live {
            let _ = self.teardown();
        }
    }
}

fn pick_device(
    cl: &OpenCl,
    allow_cpu: bool,
) -> Result<(cl_platform_id, cl_device_id, cl_device_type), GpuError> {
    let mut count: cl_uint = 0;
    let code = unsafe { cl.clGetPlatformIDs(0, ptr::null_mut(), &mut count) };
    if code != CL_SUCCESS || count == 0 {
        let code = if code == CL_SUCCESS { CL_DEVICE_NOT_FOUND } else { code };
        return Err(GpuError::DeviceUnavailable { code });
    }
    let mut platforms = vec![ptr::null_mut(); count as usize];
    let code = unsafe { cl.clGetPlatformIDs(count, platforms.as_mut_ptr(), ptr::null_mut()) };
    if code != CL_SUCCESS {
        return Err(GpuError::DeviceUnavailable { code });
    }
    let mut wanted = vec![CL_DEVICE_TYPE_GPU];
    if allow_cpu {
        wanted.push(CL_DEVICE_TYPE_ALL);
    }
    let mut last = CL_DEVICE_NOT_FOUND;
    for ty in wanted {
        for &platform in &platforms {
            let mut device = ptr::null_mut();
            let code = unsafe { cl.clGetDeviceIDs(platform, ty, 1, &mut device, ptr::null_mut()) };
            if code == CL_SUCCESS && !device.is_null() {
                let actual = device_type(cl, device).unwrap_or(ty);
                return Ok((platform, device, actual));
            }
            last = code;
        }
    }
    Err(GpuError::DeviceUnavailable { code: last })
}

fn device_type(cl: &OpenCl, device: cl_device_id) -> Option<cl_device_type> {
    let mut ty: cl_device_type = 0;
    let code = unsafe {
        cl.clGetDeviceInfo(
            device,
            CL_DEVICE_TYPE,
            size_of::<cl_device_type>(),
            ptr::from_mut(&mut ty).cast(),
            ptr::null_mut(),
        )
    };
    (code == CL_SUCCESS).then_some(ty)
}

fn device_string(cl: &OpenCl, device: cl_device_id, param: cl_device_info) -> Option<String> {
    let mut size = 0usize;
    let code = unsafe { cl.clGetDeviceInfo(device, param, 0, ptr::null_mut(), &mut size) };
    if code != CL_SUCCESS {
        return None;
    }
    let mut buf = vec![0u8; size];
    let code = unsafe {
        cl.clGetDeviceInfo(device, param, size, buf.as_mut_ptr().cast(), ptr::null_mut())
    };
    if code != CL_SUCCESS {
        return None;
    }
    while buf.last() == Some(&0) {
        buf.pop();
    }
    Some(String::from_utf8_lossy(&buf).into_owned())
}

struct GpuAssigner<'a, 'cl> {
    ctx: &'a GpuContext<'cl>,
    ds: &'a Dataset,
    kernel: cl_kernel,
}

impl Assigner for GpuAssigner<'_, '_> {
    type Error = GpuError;

    fn assign(
        &mut self,
        centers: &[f32],
        labels: &mut [u16],
        sums: &mut CenterSums,
    ) -> Result<(), GpuError> {
        let ctx = self.ctx;
        let set = ctx.buffers.as_ref().expect("bound before use");
        ctx.write(set.params, centers)?;
        ctx.launch(self.kernel, set.n)?;
        let k = centers.len() / set.d;
        let valid = ctx.with_state(|words| {
            labels.copy_from_slice(words);
            labels.iter().all(|&l| usize::from(l) < k)
        })?;
        if !valid {
            return Err(GpuError::Inconsistent("label outside 0..k"));
        }
        for (i, &l) in labels.iter().enumerate() {
            sums.add(usize::from(l), self.ds.point(i));
        }
        Ok(())
    }
}

/// Kmeans with device-side assignment; equal to
/// [`oclmine_core::kmeans_single`] for the same init.
pub fn kmeans_gpu<K: Cancel + ?Sized>(
    ctx: &mut GpuContext<'_>,
    ds: &Dataset,
    params: &KmeansParams,
    init: &KmeansInit,
    cancel: &K,
) -> Result<KmeansResult, ClusterError<GpuError>> {
    kmeans_gpu_with(ctx, ds, params, init, cancel, |_| {})
}

/// [`kmeans_gpu`] with a per-iteration observer.
pub fn kmeans_gpu_with<K, O>(
    ctx: &mut GpuContext<'_>,
    ds: &Dataset,
    params: &KmeansParams,
    init: &KmeansInit,
    cancel: &K,
    observe: O,
) -> Result<KmeansResult, ClusterError<GpuError>>
where
    K: Cancel + ?Sized,
    O: FnMut(&Iteration<'_>),
{
    params.validate(ds.len())?;
    let kernel = ctx.kernel(Program::KmeansAssign).map_err(ClusterError::Backend)?;
    ctx.bind(ds, params.k).map_err(ClusterError::Backend)?;
    let ctx = &*ctx;
    let set = ctx.buffers.as_ref().expect("bound above");
    let setup = || -> Result<(), GpuError> {
        ctx.set_arg(kernel, 0, &set.data)?;
        ctx.set_arg(kernel, 1, &set.params)?;
        ctx.set_arg(kernel, 2, &set.state)?;
        ctx.set_arg(kernel, 3, &(set.n as u32))?;
        ctx.set_arg(kernel, 4, &(set.d as u32))?;
        ctx.set_arg(kernel, 5, &(params.k as u32))
    };
    setup().map_err(ClusterError::Backend)?;
    let centers = initial_centers(ds, params.k, init)?;
    lloyd(ds, params, centers, &mut GpuAssigner { ctx, ds, kernel }, cancel, observe)
}

struct GpuQuery<'a, 'cl> {
    ctx: &'a GpuContext<'cl>,
    main: cl_kernel,
    expand: cl_kernel,
    last: QueryPhase,
    count: usize,
    found: Vec<u32>,
}

impl RegionQuery for GpuQuery<'_, '_> {
    type Error = GpuError;

    fn query(&mut self, q: usize, phase: QueryPhase) -> Result<usize, GpuError> {
        let ctx = self.ctx;
        let set = ctx.buffers.as_ref().expect("bound before use");
        let kernel = match phase {
            QueryPhase::Main => self.main,
            QueryPhase::Expand => self.expand,
        };
        ctx.write(set.counter, &[0u32])?;
        ctx.set_arg(kernel, 5, &(q as u32))?;
        ctx.launch(kernel, set.n)?;
        self.last = phase;
        self.count = ctx.read_counter(set.counter)? as usize;
        Ok(self.count)
    }

    fn neighbors(&mut self) -> Result<&[u32], GpuError> {
        let flag = self.last.flag();
        let found = &mut self.found;
        found.clear();
        self.ctx.with_state(|words| {
            found.extend(
                words.iter().enumerate().filter(|(_, &w)| w & flag != 0).map(|(j, _)| j as u32),
            );
        })?;
        if found.len() != self.count {
            return Err(GpuError::Inconsistent("neighbour flags disagree with the counter"));
        }
        Ok(&self.found)
    }
}

/// DBSCAN with device-side region queries; labels equal
/// [`oclmine_core::dbscan_single`].
pub fn dbscan_gpu<K: Cancel + ?Sized>(
    ctx: &mut GpuContext<'_>,
    ds: &Dataset,
    params: &DbscanParams,
    cancel: &K,
) -> Result<Vec<u16>, ClusterError<GpuError>> {
    params.validate()?;
    let main = ctx.kernel(Program::DbscanMain).map_err(ClusterError::Backend)?;
    let expand = ctx.kernel(Program::DbscanExpand).map_err(ClusterError::Backend)?;
    ctx.bind(ds, 1).map_err(ClusterError::Backend)?;
    let ctx = &*ctx;
    let set = ctx.buffers.as_ref().expect("bound above");
    let eps2 = params.eps2();
    let setup = || -> Result<(), GpuError> {
        for kernel in [main, expand] {
            ctx.set_arg(kernel, 0, &set.data)?;
            ctx.set_arg(kernel, 1, &set.state)?;
            ctx.set_arg(kernel, 2, &set.counter)?;
            ctx.set_arg(kernel, 3, &(set.n as u32))?;
            ctx.set_arg(kernel, 4, &(set.d as u32))?;
            ctx.set_arg(kernel, 5, &0u32)?;
            ctx.set_arg(kernel, 6, &eps2)?;
        }
        Ok(())
    };
    setup().map_err(ClusterError::Backend)?;
    let mut source =
        GpuQuery { ctx, main, expand, last: QueryPhase::Main, count: 0, found: Vec::new() };
    dbscan_with(ds.len(), params, &mut source, cancel)
}
