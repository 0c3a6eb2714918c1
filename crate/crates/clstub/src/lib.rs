//! A fake OpenCL 1.2 driver.
//!
//! Exports the subset of the OpenCL API the GPU backend uses, with one
//! platform and one device. Programs "build" by checking bracket balance and
//! the three oclmine kernels are emulated on the host with the same
//! single-precision arithmetic as the device sources. Everything else in the
//! API (images, events, samplers...) is deliberately absent so callers can
//! observe missing symbols.
//!
//! The `clstub_*` exports are instrumentation for tests: call counters,
//! object lifetimes, release order, and knobs for device type, platform
//! count, per-call latency and injected release failures.

#![allow(non_camel_case_types, clippy::missing_safety_doc)]

use std::collections::BTreeMap;
use std::ffi::{c_char, c_void, CStr};
use std::ptr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

type cl_int = i32;
type cl_uint = u32;
type cl_bitfield = u64;
type Handle = *mut c_void;

const CL_SUCCESS: cl_int = 0;
const CL_DEVICE_NOT_FOUND: cl_int = -1;
const CL_MEM_OBJECT_ALLOCATION_FAILURE: cl_int = -4;
const CL_BUILD_PROGRAM_FAILURE: cl_int = -11;
const CL_INVALID_VALUE: cl_int = -30;
const CL_INVALID_DEVICE_TYPE: cl_int = -31;
const CL_INVALID_PLATFORM: cl_int = -32;
const CL_INVALID_DEVICE: cl_int = -33;
const CL_INVALID_CONTEXT: cl_int = -34;
const CL_INVALID_COMMAND_QUEUE: cl_int = -36;
const CL_INVALID_HOST_PTR: cl_int = -37;
const CL_INVALID_MEM_OBJECT: cl_int = -38;
const CL_INVALID_PROGRAM: cl_int = -44;
const CL_INVALID_PROGRAM_EXECUTABLE: cl_int = -45;
const CL_INVALID_KERNEL_NAME: cl_int = -46;
const CL_INVALID_KERNEL: cl_int = -48;
const CL_INVALID_ARG_INDEX: cl_int = -49;
const CL_INVALID_ARG_VALUE: cl_int = -50;
const CL_INVALID_ARG_SIZE: cl_int = -51;
const CL_INVALID_KERNEL_ARGS: cl_int = -52;
const CL_INVALID_WORK_DIMENSION: cl_int = -53;
const CL_INVALID_GLOBAL_OFFSET: cl_int = -56;
const CL_INVALID_BUFFER_SIZE: cl_int = -61;
const CL_PLATFORM_NOT_FOUND_KHR: cl_int = -1001;

const CL_PLATFORM_PROFILE: cl_uint = 0x0900;
const CL_PLATFORM_VERSION: cl_uint = 0x0901;
const CL_PLATFORM_NAME: cl_uint = 0x0902;
const CL_PLATFORM_VENDOR: cl_uint = 0x0903;
const CL_DEVICE_TYPE: cl_uint = 0x1000;
const CL_DEVICE_NAME: cl_uint = 0x102B;
const CL_PROGRAM_BUILD_STATUS: cl_uint = 0x1181;
const CL_PROGRAM_BUILD_OPTIONS: cl_uint = 0x1182;
const CL_PROGRAM_BUILD_LOG: cl_uint = 0x1183;

const CL_DEVICE_TYPE_DEFAULT: cl_bitfield = 1;
const CL_DEVICE_TYPE_GPU: cl_bitfield = 1 << 2;

const CL_MEM_USE_HOST_PTR: cl_bitfield = 1 << 3;
const CL_MEM_ALLOC_HOST_PTR: cl_bitfield = 1 << 4;
const CL_MEM_COPY_HOST_PTR: cl_bitfield = 1 << 5;

const PLATFORM: usize = 0xA0;
const DEVICE: usize = 0xB0;

/// Object kinds, as reported by [`clstub_stats`] and [`clstub_release_log`].
pub const KIND_CONTEXT: u32 = 0;
pub const KIND_QUEUE: u32 = 1;
pub const KIND_MEM: u32 = 2;
pub const KIND_PROGRAM: u32 = 3;
pub const KIND_KERNEL: u32 = 4;
pub const KINDS: usize = 5;

/// Snapshot of the driver's counters.
#[repr(C)]
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ClStubStats {
    /// OpenCL entry-point calls since the last reset.
    pub total_calls: u64,
    /// Calls currently executing.
    pub in_flight: u64,
    pub max_in_flight: u64,
    pub kernel_launches: u64,
    /// Release calls on unknown or already destroyed handles.
    pub invalid_releases: u64,
    pub created: [u64; KINDS],
    /// Objects destroyed (reference count reached zero).
    pub released: [u64; KINDS],
    pub live: [u64; KINDS],
}

static TOTAL_CALLS: AtomicU64 = AtomicU64::new(0);
static IN_FLIGHT: AtomicU64 = AtomicU64::new(0);
static MAX_IN_FLIGHT: AtomicU64 = AtomicU64::new(0);
static CALL_DELAY_US: AtomicU64 = AtomicU64::new(0);

struct Call;

impl Call {
    fn enter() -> Call {
        TOTAL_CALLS.fetch_add(1, Ordering::SeqCst);
        let now = IN_FLIGHT.fetch_add(1, Ordering::SeqCst) + 1;
        MAX_IN_FLIGHT.fetch_max(now, Ordering::SeqCst);
        let delay = CALL_DELAY_US.load(Ordering::Relaxed);
        if delay > 0 {
            thread::sleep(Duration::from_micros(delay));
        }
        Call
    }
}

impl Drop for Call {
    fn drop(&mut self) {
        IN_FLIGHT.fetch_sub(1, Ordering::SeqCst);
    }
}

struct Buffer {
    base: *mut u8,
    size: usize,
    // backing storage when the caller did not supply host memory
    _owned: Option<Box<[u64]>>,
    maps: u32,
}

enum Body {
    Context,
    Queue,
    Mem(Buffer),
    Program { source: String, options: String, status: cl_int, log: String },
    Kernel { name: &'static str, args: Vec<Option<Vec<u8>>> },
}

struct Object {
    refs: u32,
    body: Body,
}

impl Object {
    fn kind(&self) -> u32 {
        match self.body {
            Body::Context => KIND_CONTEXT,
            Body::Queue => KIND_QUEUE,
            Body::Mem(_) => KIND_MEM,
            Body::Program { .. } => KIND_PROGRAM,
            Body::Kernel { .. } => KIND_KERNEL,
        }
    }
}

struct Registry {
    next_id: usize,
    objects: BTreeMap<usize, Object>,
    created: [u64; KINDS],
    released: [u64; KINDS],
    invalid_releases: u64,
    kernel_launches: u64,
    release_log: Vec<(u32, u64)>,
    device_type: cl_bitfield,
    platform_count: u32,
    failing_release: Option<u32>,
}

// Raw buffer pointers are only dereferenced under the registry lock.
unsafe impl Send for Registry {}

impl Registry {
    const fn new() -> Self {
        Registry {
            next_id: 0x1000,
            objects: BTreeMap::new(),
            created: [0; KINDS],
            released: [0; KINDS],
            invalid_releases: 0,
            kernel_launches: 0,
            release_log: Vec::new(),
            device_type: CL_DEVICE_TYPE_GPU,
            platform_count: 1,
            failing_release: None,
        }
    }

    fn insert(&mut self, body: Body) -> Handle {
        let id = self.next_id;
        self.next_id += 0x10;
        let object = Object { refs: 1, body };
        self.created[object.kind() as usize] += 1;
        self.objects.insert(id, object);
        id as Handle
    }

    fn get(&self, h: Handle, kind: u32) -> Option<&Object> {
        self.objects.get(&(h as usize)).filter(|o| o.kind() == kind)
    }

    fn get_mut(&mut self, h: Handle, kind: u32) -> Option<&mut Object> {
        self.objects.get_mut(&(h as usize)).filter(|o| o.kind() == kind)
    }

    fn retain(&mut self, h: Handle, kind: u32, invalid: cl_int) -> cl_int {
        match self.get_mut(h, kind) {
            Some(o) => {
                o.refs += 1;
                CL_SUCCESS
            }
            None => invalid,
        }
    }

    fn release(&mut self, h: Handle, kind: u32, invalid: cl_int) -> cl_int {
        if self.failing_release == Some(kind) && self.get(h, kind).is_some() {
            return invalid;
        }
        let Some(o) = self.get_mut(h, kind) else {
            self.invalid_releases += 1;
            return invalid;
        };
        o.refs -= 1;
        if o.refs == 0 {
            self.objects.remove(&(h as usize));
            self.released[kind as usize] += 1;
            self.release_log.push((kind, h as u64));
        }
        CL_SUCCESS
    }

    fn buffer(&self, h: Handle) -> Option<&Buffer> {
        match &self.get(h, KIND_MEM)?.body {
            Body::Mem(b) => Some(b),
            _ => None,
        }
    }

    fn live(&self) -> [u64; KINDS] {
        let mut live = [0; KINDS];
        for o in self.objects.values() {
            live[o.kind() as usize] += 1;
        }
        live
    }
}

static REGISTRY: Mutex<Registry> = Mutex::new(Registry::new());

fn registry() -> MutexGuard<'static, Registry> {
    REGISTRY.lock().unwrap_or_else(|e| e.into_inner())
}

unsafe fn set_err(errcode_ret: *mut cl_int, code: cl_int) {
    if !errcode_ret.is_null() {
        *errcode_ret = code;
    }
}

unsafe fn write_info(
    bytes: &[u8],
    size: usize,
    value: *mut c_void,
    size_ret: *mut usize,
) -> cl_int {
    if !value.is_null() {
        if size < bytes.len() {
            return CL_INVALID_VALUE;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), value.cast::<u8>(), bytes.len());
    }
    if !size_ret.is_null() {
        *size_ret = bytes.len();
    }
    CL_SUCCESS
}

fn c_string(s: &str) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    v.push(0);
    v
}

// ---------------------------------------------------------------- platform

#[no_mangle]
pub unsafe extern "system" fn clGetPlatformIDs(
    num_entries: cl_uint,
    platforms: *mut Handle,
    num_platforms: *mut cl_uint,
) -> cl_int {
    let _call = Call::enter();
    if (platforms.is_null() && num_platforms.is_null())
        || (num_entries == 0 && !platforms.is_null())
    {
        return CL_INVALID_VALUE;
    }
    let count = registry().platform_count.min(1);
    if !num_platforms.is_null() {
        *num_platforms = count;
    }
    if count == 0 {
        return CL_PLATFORM_NOT_FOUND_KHR;
    }
    if !platforms.is_null() {
        *platforms = PLATFORM as Handle;
    }
    CL_SUCCESS
}

#[no_mangle]
pub unsafe extern "system" fn clGetPlatformInfo(
    platform: Handle,
    param_name: cl_uint,
    param_value_size: usize,
    param_value: *mut c_void,
    param_value_size_ret: *mut usize,
) -> cl_int {
    let _call = Call::enter();
    if platform as usize != PLATFORM {
        return CL_INVALID_PLATFORM;
    }
    let text = match param_name {
        CL_PLATFORM_PROFILE => "FULL_PROFILE",
        CL_PLATFORM_VERSION => "OpenCL 1.2 clstub",
        CL_PLATFORM_NAME => "clstub",
        CL_PLATFORM_VENDOR => "oclmine",
        _ => return CL_INVALID_VALUE,
    };
    write_info(&c_string(text), param_value_size, param_value, param_value_size_ret)
}

#[no_mangle]
pub unsafe extern "system" fn clGetDeviceIDs(
    platform: Handle,
    device_type: cl_bitfield,
    num_entries: cl_uint,
    devices: *mut Handle,
    num_devices: *mut cl_uint,
) -> cl_int {
    let _call = Call::enter();
    if platform as usize != PLATFORM {
        return CL_INVALID_PLATFORM;
    }
    if device_type == 0 {
        return CL_INVALID_DEVICE_TYPE;
    }
    if (devices.is_null() && num_devices.is_null()) || (num_entries == 0 && !devices.is_null()) {
        return CL_INVALID_VALUE;
    }
    let ours = registry().device_type;
    let matches = device_type == CL_DEVICE_TYPE_DEFAULT || device_type & ours != 0;
    if !num_devices.is_null() {
        *num_devices = u32::from(matches);
    }
    if !matches {
        return CL_DEVICE_NOT_FOUND;
    }
    if !devices.is_null() {
        *devices = DEVICE as Handle;
    }
    CL_SUCCESS
}

#[no_mangle]
pub unsafe extern "system" fn clGetDeviceInfo(
    device: Handle,
    param_name: cl_uint,
    param_value_size: usize,
    param_value: *mut c_void,
    param_value_size_ret: *mut usize,
) -> cl_int {
    let _call = Call::enter();
    if device as usize != DEVICE {
        return CL_INVALID_DEVICE;
    }
    match param_name {
        CL_DEVICE_TYPE => {
            let ty = registry().device_type;
            write_info(&ty.to_ne_bytes(), param_value_size, param_value, param_value_size_ret)
        }
        CL_DEVICE_NAME => write_info(
            &c_string("clstub emulated device"),
            param_value_size,
            param_value,
            param_value_size_ret,
        ),
        _ => CL_INVALID_VALUE,
    }
}

// ------------------------------------------------------- context and queue

#[no_mangle]
pub unsafe extern "system" fn clCreateContext(
    _properties: *const isize,
    num_devices: cl_uint,
    devices: *const Handle,
    _pfn_notify: *const c_void,
    _user_data: *mut c_void,
    errcode_ret: *mut cl_int,
) -> Handle {
    let _call = Call::enter();
    if num_devices == 0 || devices.is_null() {
        set_err(errcode_ret, CL_INVALID_VALUE);
        return ptr::null_mut();
    }
    let list = std::slice::from_raw_parts(devices, num_devices as usize);
    if list.iter().any(|&d| d as usize != DEVICE) {
        set_err(errcode_ret, CL_INVALID_DEVICE);
        return ptr::null_mut();
    }
    let h = registry().insert(Body::Context);
    set_err(errcode_ret, CL_SUCCESS);
    h
}

#[no_mangle]
pub unsafe extern "system" fn clRetainContext(context: Handle) -> cl_int {
    let _call = Call::enter();
    registry().retain(context, KIND_CONTEXT, CL_INVALID_CONTEXT)
}

#[no_mangle]
pub unsafe extern "system" fn clReleaseContext(context: Handle) -> cl_int {
    let _call = Call::enter();
    registry().release(context, KIND_CONTEXT, CL_INVALID_CONTEXT)
}

#[no_mangle]
pub unsafe extern "system" fn clCreateCommandQueue(
    context: Handle,
    device: Handle,
    _properties: cl_bitfield,
    errcode_ret: *mut cl_int,
) -> Handle {
    let _call = Call::enter();
    let mut reg = registry();
    if reg.get(context, KIND_CONTEXT).is_none() {
        set_err(errcode_ret, CL_INVALID_CONTEXT);
        return ptr::null_mut();
    }
    if device as usize != DEVICE {
        set_err(errcode_ret, CL_INVALID_DEVICE);
        return ptr::null_mut();
    }
    let h = reg.insert(Body::Queue);
    set_err(errcode_ret, CL_SUCCESS);
    h
}

#[no_mangle]
pub unsafe extern "system" fn clRetainCommandQueue(queue: Handle) -> cl_int {
    let _call = Call::enter();
    registry().retain(queue, KIND_QUEUE, CL_INVALID_COMMAND_QUEUE)
}

#[no_mangle]
pub unsafe extern "system" fn clReleaseCommandQueue(queue: Handle) -> cl_int {
    let _call = Call::enter();
    registry().release(queue, KIND_QUEUE, CL_INVALID_COMMAND_QUEUE)
}

#[no_mangle]
pub unsafe extern "system" fn clFlush(queue: Handle) -> cl_int {
    let _call = Call::enter();
    queue_status(&registry(), queue)
}

#[no_mangle]
pub unsafe extern "system" fn clFinish(queue: Handle) -> cl_int {
    let _call = Call::enter();
    queue_status(&registry(), queue)
}

fn queue_status(reg: &Registry, queue: Handle) -> cl_int {
    if reg.get(queue, KIND_QUEUE).is_some() {
        CL_SUCCESS
    } else {
        CL_INVALID_COMMAND_QUEUE
    }
}

// ----------------------------------------------------------------- buffers

#[no_mangle]
pub unsafe extern "system" fn clCreateBuffer(
    context: Handle,
    flags: cl_bitfield,
    size: usize,
    host_ptr: *mut c_void,
    errcode_ret: *mut cl_int,
) -> Handle {
    let _call = Call::enter();
    let mut reg = registry();
    if reg.get(context, KIND_CONTEXT).is_none() {
        set_err(errcode_ret, CL_INVALID_CONTEXT);
        return ptr::null_mut();
    }
    if size == 0 {
        set_err(errcode_ret, CL_INVALID_BUFFER_SIZE);
        return ptr::null_mut();
    }
    let wants_host = flags & (CL_MEM_USE_HOST_PTR | CL_MEM_COPY_HOST_PTR) != 0;
    if wants_host == host_ptr.is_null() {
        set_err(errcode_ret, CL_INVALID_HOST_PTR);
        return ptr::null_mut();
    }
    if flags & CL_MEM_USE_HOST_PTR != 0
        && flags & (CL_MEM_COPY_HOST_PTR | CL_MEM_ALLOC_HOST_PTR) != 0
    {
        set_err(errcode_ret, CL_INVALID_VALUE);
        return ptr::null_mut();
    }
    let buffer = if flags & CL_MEM_USE_HOST_PTR != 0 {
        Buffer { base: host_ptr.cast(), size, _owned: None, maps: 0 }
    } else {
        let Ok(mut owned) =
            std::panic::catch_unwind(|| vec![0u64; size.div_ceil(8)].into_boxed_slice())
        else {
            set_err(errcode_ret, CL_MEM_OBJECT_ALLOCATION_FAILURE);
            return ptr::null_mut();
        };
        let base = owned.as_mut_ptr().cast::<u8>();
        if flags & CL_MEM_COPY_HOST_PTR != 0 {
            ptr::copy_nonoverlapping(host_ptr.cast::<u8>(), base, size);
        }
        Buffer { base, size, _owned: Some(owned), maps: 0 }
    };
    let h = reg.insert(Body::Mem(buffer));
    set_err(errcode_ret, CL_SUCCESS);
    h
}

#[no_mangle]
pub unsafe extern "system" fn clRetainMemObject(memobj: Handle) -> cl_int {
    let _call = Call::enter();
    registry().retain(memobj, KIND_MEM, CL_INVALID_MEM_OBJECT)
}

#[no_mangle]
pub unsafe extern "system" fn clReleaseMemObject(memobj: Handle) -> cl_int {
    let _call = Call::enter();
    registry().release(memobj, KIND_MEM, CL_INVALID_MEM_OBJECT)
}

unsafe fn transfer(
    queue: Handle,
    buffer: Handle,
    offset: usize,
    size: usize,
    host: *mut u8,
    to_device: bool,
) -> cl_int {
    let reg = registry();
    if reg.get(queue, KIND_QUEUE).is_none() {
        return CL_INVALID_COMMAND_QUEUE;
    }
    let Some(b) = reg.buffer(buffer) else {
        return CL_INVALID_MEM_OBJECT;
    };
    if host.is_null() || offset.checked_add(size).is_none_or(|end| end > b.size) {
        return CL_INVALID_VALUE;
    }
    if to_device {
        ptr::copy(host, b.base.add(offset), size);
    } else {
        ptr::copy(b.base.add(offset), host, size);
    }
    CL_SUCCESS
}

#[no_mangle]
pub unsafe extern "system" fn clEnqueueReadBuffer(
    queue: Handle,
    buffer: Handle,
    _blocking_read: cl_uint,
    offset: usize,
    size: usize,
    ptr: *mut c_void,
    _num_events_in_wait_list: cl_uint,
    _event_wait_list: *const Handle,
    event: *mut Handle,
) -> cl_int {
    let _call = Call::enter();
    if !event.is_null() {
        *event = ptr::null_mut();
    }
    transfer(queue, buffer, offset, size, ptr.cast(), false)
}

#[no_mangle]
pub unsafe extern "system" fn clEnqueueWriteBuffer(
    queue: Handle,
    buffer: Handle,
    _blocking_write: cl_uint,
    offset: usize,
    size: usize,
    ptr: *const c_void,
    _num_events_in_wait_list: cl_uint,
    _event_wait_list: *const Handle,
    event: *mut Handle,
) -> cl_int {
    let _call = Call::enter();
    if !event.is_null() {
        *event = ptr::null_mut();
    }
    transfer(queue, buffer, offset, size, ptr.cast_mut().cast(), true)
}

#[no_mangle]
pub unsafe extern "system" fn clEnqueueMapBuffer(
    queue: Handle,
    buffer: Handle,
    _blocking_map: cl_uint,
    _map_flags: cl_bitfield,
    offset: usize,
    size: usize,
    _num_events_in_wait_list: cl_uint,
    _event_wait_list: *const Handle,
    event: *mut Handle,
    errcode_ret: *mut cl_int,
) -> *mut c_void {
    let _call = Call::enter();
    if !event.is_null() {
        *event = ptr::null_mut();
    }
    let mut reg = registry();
    if reg.get(queue, KIND_QUEUE).is_none() {
        set_err(errcode_ret, CL_INVALID_COMMAND_QUEUE);
        return ptr::null_mut();
    }
    let Some(Object { body: Body::Mem(b), .. }) = reg.get_mut(buffer, KIND_MEM) else {
        set_err(errcode_ret, CL_INVALID_MEM_OBJECT);
        return ptr::null_mut();
    };
    if size == 0 || offset.checked_add(size).is_none_or(|end| end > b.size) {
        set_err(errcode_ret, CL_INVALID_VALUE);
        return ptr::null_mut();
    }
    b.maps += 1;
    set_err(errcode_ret, CL_SUCCESS);
    b.base.add(offset).cast()
}

#[no_mangle]
pub unsafe extern "system" fn clEnqueueUnmapMemObject(
    queue: Handle,
    memobj: Handle,
    mapped_ptr: *mut c_void,
    _num_events_in_wait_list: cl_uint,
    _event_wait_list: *const Handle,
    event: *mut Handle,
) -> cl_int {
    let _call = Call::enter();
    if !event.is_null() {
        *event = ptr::null_mut();
    }
    let mut reg = registry();
    if reg.get(queue, KIND_QUEUE).is_none() {
        return CL_INVALID_COMMAND_QUEUE;
    }
    let Some(Object { body: Body::Mem(b), .. }) = reg.get_mut(memobj, KIND_MEM) else {
        return CL_INVALID_MEM_OBJECT;
    };
    let inside = (mapped_ptr as usize).checked_sub(b.base as usize).is_some_and(|off| off < b.size);
    if b.maps == 0 || !inside {
        return CL_INVALID_VALUE;
    }
    b.maps -= 1;
    CL_SUCCESS
}

// ------------------------------------------------------ programs, kernels

/// Kernels the stub can emulate, with their argument counts.
const KERNELS: &[(&str, usize)] =
    &[("kmeans_assign", 6), ("dbscan_reach_main", 7), ("dbscan_reach_expand", 7)];

#[no_mangle]
pub unsafe extern "system" fn clCreateProgramWithSource(
    context: Handle,
    count: cl_uint,
    strings: *const *const c_char,
    lengths: *const usize,
    errcode_ret: *mut cl_int,
) -> Handle {
    let _call = Call::enter();
    let mut reg = registry();
    if reg.get(context, KIND_CONTEXT).is_none() {
        set_err(errcode_ret, CL_INVALID_CONTEXT);
        return ptr::null_mut();
    }
    if count == 0 || strings.is_null() {
        set_err(errcode_ret, CL_INVALID_VALUE);
        return ptr::null_mut();
    }
    let mut source = String::new();
    for i in 0..count as usize {
        let s = *strings.add(i);
        if s.is_null() {
            set_err(errcode_ret, CL_INVALID_VALUE);
            return ptr::null_mut();
        }
        let len = if lengths.is_null() { 0 } else { *lengths.add(i) };
        let bytes = if len == 0 {
            CStr::from_ptr(s).to_bytes()
        } else {
            std::slice::from_raw_parts(s.cast::<u8>(), len)
        };
        source.push_str(&String::from_utf8_lossy(bytes));
    }
    let h = reg.insert(Body::Program {
        source,
        options: String::new(),
        status: -1,
        log: String::new(),
    });
    set_err(errcode_ret, CL_SUCCESS);
    h
}

/// Checks bracket balance outside comments; the stub's whole "compiler".
fn check_source(source: &str) -> Result<(), String> {
    let mut stack: Vec<(char, usize)> = Vec::new();
    let mut line = 1;
    let mut chars = source.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\n' => line += 1,
            '/' if chars.peek() == Some(&'/') => {
                for c in chars.by_ref() {
                    if c == '\n' {
                        line += 1;
                        break;
                    }
                }
            }
            '/' if chars.peek() == Some(&'*') => {
                chars.next();
                let mut prev = ' ';
                for c in chars.by_ref() {
                    if c == '\n' {
                        line += 1;
                    }
                    if prev == '*' && c == '/' {
                        break;
                    }
                    prev = c;
                }
            }
            '(' | '{' | '[' => stack.push((c, line)),
            ')' | '}' | ']' => {
                let want = match c {
                    ')' => '(',
                    '}' => '{',
                    _ => '[',
                };
                match stack.pop() {
                    Some((open, _)) if open == want => {}
                    Some((open, at)) => {
                        return Err(format!(
                        "<source>:{line}: error: '{c}' does not match '{open}' opened on line {at}"
                    ))
                    }
                    None => return Err(format!("<source>:{line}: error: unexpected '{c}'")),
                }
            }
            _ => {}
        }
    }
    match stack.pop() {
        Some((open, at)) => Err(format!("<source>:{at}: error: unclosed '{open}'")),
        None => Ok(()),
    }
}

#[no_mangle]
pub unsafe extern "system" fn clBuildProgram(
    program: Handle,
    num_devices: cl_uint,
    device_list: *const Handle,
    options: *const c_char,
    pfn_notify: Option<unsafe extern "system" fn(Handle, *mut c_void)>,
    user_data: *mut c_void,
) -> cl_int {
    let _call = Call::enter();
    if (num_devices == 0) != device_list.is_null() {
        return CL_INVALID_VALUE;
    }
    if num_devices > 0 {
        let list = std::slice::from_raw_parts(device_list, num_devices as usize);
        if list.iter().any(|&d| d as usize != DEVICE) {
            return CL_INVALID_DEVICE;
        }
    }
    let code = {
        let mut reg = registry();
        let Some(Object { body: Body::Program { source, options: opts, status, log }, .. }) =
            reg.get_mut(program, KIND_PROGRAM)
        else {
            return CL_INVALID_PROGRAM;
        };
        *opts = if options.is_null() {
            String::new()
        } else {
            CStr::from_ptr(options).to_string_lossy().into_owned()
        };
        match check_source(source) {
            Ok(()) => {
                *status = 0;
                log.clear();
                CL_SUCCESS
            }
            Err(message) => {
                *status = -2;
                *log = message;
                CL_BUILD_PROGRAM_FAILURE
            }
        }
    };
    if let Some(notify) = pfn_notify {
        notify(program, user_data);
    }
    code
}

#[no_mangle]
pub unsafe extern "system" fn clGetProgramBuildInfo(
    program: Handle,
    device: Handle,
    param_name: cl_uint,
    param_value_size: usize,
    param_value: *mut c_void,
    param_value_size_ret: *mut usize,
) -> cl_int {
    let _call = Call::enter();
    let reg = registry();
    let Some(Object { body: Body::Program { options, status, log, .. }, .. }) =
        reg.get(program, KIND_PROGRAM)
    else {
        return CL_INVALID_PROGRAM;
    };
    if device as usize != DEVICE {
        return CL_INVALID_DEVICE;
    }
    match param_name {
        CL_PROGRAM_BUILD_STATUS => {
            write_info(&status.to_ne_bytes(), param_value_size, param_value, param_value_size_ret)
        }
        CL_PROGRAM_BUILD_OPTIONS => {
            write_info(&c_string(options), param_value_size, param_value, param_value_size_ret)
        }
        CL_PROGRAM_BUILD_LOG => {
            write_info(&c_string(log), param_value_size, param_value, param_value_size_ret)
        }
        _ => CL_INVALID_VALUE,
    }
}

#[no_mangle]
pub unsafe extern "system" fn clRetainProgram(program: Handle) -> cl_int {
    let _call = Call::enter();
    registry().retain(program, KIND_PROGRAM, CL_INVALID_PROGRAM)
}

#[no_mangle]
pub unsafe extern "system" fn clReleaseProgram(program: Handle) -> cl_int {
    let _call = Call::enter();
    registry().release(program, KIND_PROGRAM, CL_INVALID_PROGRAM)
}

#[no_mangle]
pub unsafe extern "system" fn clCreateKernel(
    program: Handle,
    kernel_name: *const c_char,
    errcode_ret: *mut cl_int,
) -> Handle {
    let _call = Call::enter();
    let mut reg = registry();
    let Some(Object { body: Body::Program { source, status, .. }, .. }) =
        reg.get(program, KIND_PROGRAM)
    else {
        set_err(errcode_ret, CL_INVALID_PROGRAM);
        return ptr::null_mut();
    };
    if *status != 0 {
        set_err(errcode_ret, CL_INVALID_PROGRAM_EXECUTABLE);
        return ptr::null_mut();
    }
    if kernel_name.is_null() {
        set_err(errcode_ret, CL_INVALID_VALUE);
        return ptr::null_mut();
    }
    let wanted = CStr::from_ptr(kernel_name).to_string_lossy();
    let declared = format!("void {wanted}(");
    let Some(&(name, arity)) =
        KERNELS.iter().find(|(n, _)| *n == wanted && source.contains(&declared))
    else {
        set_err(errcode_ret, CL_INVALID_KERNEL_NAME);
        return ptr::null_mut();
    };
    let h = reg.insert(Body::Kernel { name, args: vec![None; arity] });
    set_err(errcode_ret, CL_SUCCESS);
    h
}

#[no_mangle]
pub unsafe extern "system" fn clRetainKernel(kernel: Handle) -> cl_int {
    let _call = Call::enter();
    registry().retain(kernel, KIND_KERNEL, CL_INVALID_KERNEL)
}

#[no_mangle]
pub unsafe extern "system" fn clReleaseKernel(kernel: Handle) -> cl_int {
    let _call = Call::enter();
    registry().release(kernel, KIND_KERNEL, CL_INVALID_KERNEL)
}

#[no_mangle]
pub unsafe extern "system" fn clSetKernelArg(
    kernel: Handle,
    arg_index: cl_uint,
    arg_size: usize,
    arg_value: *const c_void,
) -> cl_int {
    let _call = Call::enter();
    let mut reg = registry();
    let Some(Object { body: Body::Kernel { args, .. }, .. }) = reg.get_mut(kernel, KIND_KERNEL)
    else {
        return CL_INVALID_KERNEL;
    };
    let Some(slot) = args.get_mut(arg_index as usize) else {
        return CL_INVALID_ARG_INDEX;
    };
    if arg_value.is_null() {
        return CL_INVALID_ARG_VALUE;
    }
    if arg_size == 0 {
        return CL_INVALID_ARG_SIZE;
    }
    *slot = Some(std::slice::from_raw_parts(arg_value.cast::<u8>(), arg_size).to_vec());
    CL_SUCCESS
}

fn arg_u32(args: &[Vec<u8>], i: usize) -> Result<u32, cl_int> {
    let bytes: [u8; 4] = args[i].as_slice().try_into().map_err(|_| CL_INVALID_ARG_SIZE)?;
    Ok(u32::from_ne_bytes(bytes))
}

fn arg_f32(args: &[Vec<u8>], i: usize) -> Result<f32, cl_int> {
    arg_u32(args, i).map(f32::from_bits)
}

fn arg_buffer<'r>(reg: &'r Registry, args: &[Vec<u8>], i: usize) -> Result<&'r Buffer, cl_int> {
    let bytes: [u8; size_of::<usize>()] =
        args[i].as_slice().try_into().map_err(|_| CL_INVALID_ARG_SIZE)?;
    reg.buffer(usize::from_ne_bytes(bytes) as Handle).ok_or(CL_INVALID_MEM_OBJECT)
}

/// Checks that `b` holds `count` elements of `T` and returns its base.
fn region<T>(b: &Buffer, count: usize) -> Result<*mut T, cl_int> {
    let bytes = count.checked_mul(size_of::<T>()).ok_or(CL_INVALID_KERNEL_ARGS)?;
    if bytes > b.size || !(b.base as usize).is_multiple_of(align_of::<T>()) {
        return Err(CL_INVALID_KERNEL_ARGS);
    }
    Ok(b.base.cast())
}

unsafe fn emulate(
    reg: &Registry,
    name: &str,
    args: &[Vec<u8>],
    global: usize,
) -> Result<(), cl_int> {
    if name == "kmeans_assign" {
        let (n, d, k) =
            (arg_u32(args, 3)? as usize, arg_u32(args, 4)? as usize, arg_u32(args, 5)? as usize);
        let data = region::<f32>(arg_buffer(reg, args, 0)?, n * d)?;
        let centers = region::<f32>(arg_buffer(reg, args, 1)?, k * d)?;
        let labels = region::<u16>(arg_buffer(reg, args, 2)?, n)?;
        for i in 0..global.min(n) {
            let p = data.add(i * d);
            let mut best = 0usize;
            let mut best_dist = f32::INFINITY;
            for j in 0..k {
                let c = centers.add(j * d);
                let mut acc = 0.0f32;
                for f in 0..d {
                    let t = *p.add(f) - *c.add(f);
                    acc += t * t;
                }
                if acc < best_dist {
                    best_dist = acc;
                    best = j;
                }
            }
            *labels.add(i) = best as u16;
        }
        return Ok(());
    }

    let mask: u16 = if name == "dbscan_reach_main" { 0x2 } else { 0x4 };
    let (n, d, q) =
        (arg_u32(args, 3)? as usize, arg_u32(args, 4)? as usize, arg_u32(args, 5)? as usize);
    let eps2 = arg_f32(args, 6)?;
    if q >= n {
        return Err(CL_INVALID_KERNEL_ARGS);
    }
    let data = region::<f32>(arg_buffer(reg, args, 0)?, n * d)?;
    let state = region::<u16>(arg_buffer(reg, args, 1)?, n)?;
    let counter = region::<u32>(arg_buffer(reg, args, 2)?, 1)?;
    let a = data.add(q * d);
    for j in 0..global.min(n) {
        let b = data.add(j * d);
        let mut acc = 0.0f32;
        for f in 0..d {
            let t = *a.add(f) - *b.add(f);
            acc += t * t;
        }
        let old = *state.add(j);
        if j != q && acc <= eps2 {
            *state.add(j) = old | mask;
            *counter += 1;
        } else {
            *state.add(j) = old & !mask;
        }
    }
    Ok(())
}

#[no_mangle]
pub unsafe extern "system" fn clEnqueueNDRangeKernel(
    queue: Handle,
    kernel: Handle,
    work_dim: cl_uint,
    global_work_offset: *const usize,
    global_work_size: *const usize,
    _local_work_size: *const usize,
    _num_events_in_wait_list: cl_uint,
    _event_wait_list: *const Handle,
    event: *mut Handle,
) -> cl_int {
    let _call = Call::enter();
    if !event.is_null() {
        *event = ptr::null_mut();
    }
    let mut reg = registry();
    if reg.get(queue, KIND_QUEUE).is_none() {
        return CL_INVALID_COMMAND_QUEUE;
    }
    let Some(Object { body: Body::Kernel { name, args }, .. }) = reg.get(kernel, KIND_KERNEL)
    else {
        return CL_INVALID_KERNEL;
    };
    if work_dim != 1 {
        return CL_INVALID_WORK_DIMENSION;
    }
    if global_work_size.is_null() {
        return CL_INVALID_VALUE;
    }
    if !global_work_offset.is_null() && *global_work_offset != 0 {
        return CL_INVALID_GLOBAL_OFFSET;
    }
    let Some(args) = args.iter().cloned().collect::<Option<Vec<_>>>() else {
        return CL_INVALID_KERNEL_ARGS;
    };
    let name = *name;
    if let Err(code) = emulate(&reg, name, &args, *global_work_size) {
        return code;
    }
    reg.kernel_launches += 1;
    CL_SUCCESS
}

// ---------------------------------------------------------- instrumentation

/// Forgets every object and zeroes the counters (except calls in flight),
/// and restores the default configuration.
#[no_mangle]
pub extern "C" fn clstub_reset() {
    *registry() = Registry::new();
    TOTAL_CALLS.store(0, Ordering::SeqCst);
    MAX_IN_FLIGHT.store(IN_FLIGHT.load(Ordering::SeqCst), Ordering::SeqCst);
    CALL_DELAY_US.store(0, Ordering::SeqCst);
}

#[no_mangle]
pub unsafe extern "C" fn clstub_stats(out: *mut ClStubStats) {
    if out.is_null() {
        return;
    }
    let reg = registry();
    *out = ClStubStats {
        total_calls: TOTAL_CALLS.load(Ordering::SeqCst),
        in_flight: IN_FLIGHT.load(Ordering::SeqCst),
        max_in_flight: MAX_IN_FLIGHT.load(Ordering::SeqCst),
        kernel_launches: reg.kernel_launches,
        invalid_releases: reg.invalid_releases,
        created: reg.created,
        released: reg.released,
        live: reg.live(),
    };
}

/// Device type advertised by the single device (GPU by default).
#[no_mangle]
pub extern "C" fn clstub_set_device_type(device_type: u64) {
    registry().device_type = device_type;
}

/// 0 hides the platform, anything else shows it.
#[no_mangle]
pub extern "C" fn clstub_set_platform_count(count: u32) {
    registry().platform_count = count;
}

/// Sleep inserted into every OpenCL call, to widen race windows.
#[no_mangle]
pub extern "C" fn clstub_set_call_delay_us(micros: u64) {
    CALL_DELAY_US.store(micros, Ordering::SeqCst);
}

/// Makes every release of `kind` fail (the object stays alive); a negative
/// value turns injection off.
#[no_mangle]
pub extern "C" fn clstub_fail_releases(kind: i32) {
    registry().failing_release = u32::try_from(kind).ok();
}

/// Copies up to `cap` entries of the destruction log (kind, handle) in
/// order and returns the total number of entries.
#[no_mangle]
pub unsafe extern "C" fn clstub_release_log(
    kinds: *mut u32,
    handles: *mut u64,
    cap: usize,
) -> usize {
    let reg = registry();
    let log = &reg.release_log;
    if !kinds.is_null() && !handles.is_null() {
        for (i, &(kind, handle)) in log.iter().take(cap).enumerate() {
            *kinds.add(i) = kind;
            *handles.add(i) = handle;
        }
    }
    log.len()
}
