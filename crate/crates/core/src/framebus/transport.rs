//! Backends that provide the raw bytes of a frame region.

use std::collections::HashMap;
use std::sync::atomic::AtomicU64;
use std::sync::{Arc, Mutex, OnceLock, Weak};

use serde::{Deserialize, Serialize};

use super::FrameBusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// Named POSIX shared-memory object; readers may live in other processes.
    SharedMemory,
    /// Heap allocation shared through a process-local registry.
    Inprocess,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared_memory" => Ok(TransportKind::SharedMemory),
            "inprocess" => Ok(TransportKind::Inprocess),
            other => Err(format!("unknown transport {other:?}")),
        }
    }
}

impl std::fmt::Display for TransportKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransportKind::SharedMemory => "shared_memory",
            TransportKind::Inprocess => "inprocess",
        })
    }
}

/// A contiguous, 8-byte aligned, zero-initialized block of memory that two
/// parties can map. Device-memory transports would plug in here.
///
/// # Safety
///
/// `as_ptr()` must stay valid for `len()` bytes for the lifetime of `self`,
/// and all concurrent access to it goes through atomics.
pub unsafe trait TransportBackend: Send + Sync {
    fn kind(&self) -> TransportKind;
    fn name(&self) -> &str;
    fn as_ptr(&self) -> *mut u8;
    fn len(&self) -> usize;
}

pub(crate) fn create(
    kind: TransportKind,
    name: &str,
    len: usize,
) -> Result<Arc<dyn TransportBackend>, FrameBusError> {
    match kind {
        TransportKind::Inprocess => Ok(InprocessRegion::create(name, len)?),
        TransportKind::SharedMemory => shm::create(name, len),
    }
}

pub(crate) fn open(
    kind: TransportKind,
    name: &str,
    len: usize,
) -> Result<Arc<dyn TransportBackend>, FrameBusError> {
    match kind {
        TransportKind::Inprocess => Ok(InprocessRegion::open(name, len)?),
        TransportKind::SharedMemory => shm::open(name, len),
    }
}

/// Removes a region's name so later attaches fail. Safe to call on a name
/// that no longer exists.
pub(crate) fn unlink(kind: TransportKind, name: &str) {
    match kind {
        TransportKind::Inprocess => {
            registry().lock().unwrap().remove(name);
        }
        TransportKind::SharedMemory => shm::unlink(name),
    }
}

pub(crate) struct InprocessRegion {
    name: String,
    words: Box<[AtomicU64]>,
    len: usize,
}

type Registry = Mutex<HashMap<String, Weak<InprocessRegion>>>;

fn registry() -> &'static Registry {
    static REGISTRY: OnceLock<Registry> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

impl InprocessRegion {
    fn create(name: &str, len: usize) -> Result<Arc<Self>, FrameBusError> {
        let mut reg = registry().lock().unwrap();
        if reg.get(name).is_some_and(|w| w.strong_count() > 0) {
            return Err(FrameBusError::AlreadyExists(name.to_owned()));
        }
        let words = (0..len.div_ceil(8)).map(|_| AtomicU64::new(0)).collect();
        let region = Arc::new(Self {
            name: name.to_owned(),
            words,
            len,
        });
        reg.insert(name.to_owned(), Arc::downgrade(&region));
        Ok(region)
    }

    fn open(name: &str, len: usize) -> Result<Arc<Self>, FrameBusError> {
        let reg = registry().lock().unwrap();
        let region = reg
            .get(name)
            .and_then(Weak::upgrade)
            .ok_or_else(|| FrameBusError::Stale(format!("no in-process region named {name:?}")))?;
        if region.len != len {
            return Err(FrameBusError::IncompatibleLayout(format!(
                "region is {} bytes, token says {len}",
                region.len
            )));
        }
        Ok(region)
    }
}

impl Drop for InprocessRegion {
    fn drop(&mut self) {
        let mut reg = registry().lock().unwrap();
        if reg.get(&self.name).is_some_and(|w| w.strong_count() == 0) {
            reg.remove(&self.name);
        }
    }
}

// SAFETY: the words live as long as the region and are only touched
// through atomics.
unsafe impl TransportBackend for InprocessRegion {
    fn kind(&self) -> TransportKind {
        TransportKind::Inprocess
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn as_ptr(&self) -> *mut u8 {
        self.words.as_ptr() as *mut u8
    }

    fn len(&self) -> usize {
        self.len
    }
}

/// Number of live in-process regions, for leak checks.
pub fn inprocess_region_count() -> usize {
    registry()
        .lock()
        .unwrap()
        .values()
        .filter(|w| w.strong_count() > 0)
        .count()
}

#[cfg(unix)]
mod shm {
    use std::ffi::CString;
    use std::io;
    use std::sync::Arc;

    use super::{FrameBusError, TransportBackend, TransportKind};

    pub(crate) struct ShmRegion {
        name: String,
        ptr: *mut u8,
        len: usize,
    }

    // SAFETY: the mapping is process-wide and all access goes through atomics.
    unsafe impl Send for ShmRegion {}
    unsafe impl Sync for ShmRegion {}

    fn os_name(name: &str) -> Result<CString, FrameBusError> {
        if name.is_empty() || name.contains('/') || name.len() > 200 {
            return Err(FrameBusError::InvalidDescriptor(format!(
                "region name {name:?} must be 1-200 characters without '/'"
            )));
        }
        CString::new(format!("/{name}"))
            .map_err(|_| FrameBusError::InvalidDescriptor("region name contains NUL".into()))
    }

    fn map(fd: libc::c_int, len: usize, writable: bool) -> io::Result<*mut u8> {
        let prot = if writable {
            libc::PROT_READ | libc::PROT_WRITE
        } else {
            libc::PROT_READ
        };
        // SAFETY: fd is a valid shared-memory descriptor of at least len bytes.
        let ptr = unsafe { libc::mmap(std::ptr::null_mut(), len, prot, libc::MAP_SHARED, fd, 0) };
        if ptr == libc::MAP_FAILED {
            Err(io::Error::last_os_error())
        } else {
            Ok(ptr as *mut u8)
        }
    }

    pub(crate) fn create(name: &str, len: usize) -> Result<Arc<dyn TransportBackend>, FrameBusError> {
        let cname = os_name(name)?;
        // SAFETY: cname is a valid C string.
        let fd = unsafe {
            libc::shm_open(
                cname.as_ptr(),
                libc::O_CREAT | libc::O_EXCL | libc::O_RDWR,
                0o600 as libc::mode_t,
            )
        };
        if fd < 0 {
            let err = io::Error::last_os_error();
            return Err(if err.raw_os_error() == Some(libc::EEXIST) {
                FrameBusError::AlreadyExists(name.to_owned())
            } else {
                FrameBusError::Resource(format!("shm_open({name}): {err}"))
            });
        }
        let result = (|| {
            // SAFETY: fd is open and owned here.
            if unsafe { libc::ftruncate(fd, len as libc::off_t) } != 0 {
                return Err(io::Error::last_os_error());
            }
            map(fd, len, true)
        })();
        // SAFETY: the mapping (if any) keeps the object alive without the fd.
        unsafe { libc::close(fd) };
        match result {
            Ok(ptr) => Ok(Arc::new(ShmRegion {
                name: name.to_owned(),
                ptr,
                len,
            })),
            Err(err) => {
                unlink(name);
                Err(FrameBusError::Resource(format!(
                    "cannot size or map region {name}: {err}"
                )))
            }
        }
    }

    pub(crate) fn open(name: &str, len: usize) -> Result<Arc<dyn TransportBackend>, FrameBusError> {
        let cname = os_name(name).map_err(|e| FrameBusError::Attach(e.to_string()))?;
        // SAFETY: cname is a valid C string.
        let fd = unsafe { libc::shm_open(cname.as_ptr(), libc::O_RDONLY, 0) };
        if fd < 0 {
            let err = io::Error::last_os_error();
            return Err(if err.raw_os_error() == Some(libc::ENOENT) {
                FrameBusError::Stale(format!("shared-memory region {name} no longer exists"))
            } else {
                FrameBusError::Attach(format!("shm_open({name}): {err}"))
            });
        }
        let result = (|| {
            // SAFETY: fd is open; stat is plain data.
            let mut st: libc::stat = unsafe { std::mem::zeroed() };
            if unsafe { libc::fstat(fd, &mut st) } != 0 {
                return Err(FrameBusError::Attach(io::Error::last_os_error().to_string()));
            }
            if (st.st_size as u64) < len as u64 {
                return Err(FrameBusError::IncompatibleLayout(format!(
                    "region is {} bytes, token says {len}",
                    st.st_size
                )));
            }
            map(fd, len, false).map_err(|e| FrameBusError::Attach(format!("mmap: {e}")))
        })();
        // SAFETY: fd no longer needed once mapped.
        unsafe { libc::close(fd) };
        let ptr = result?;
        Ok(Arc::new(ShmRegion {
            name: name.to_owned(),
            ptr,
            len,
        }))
    }

    pub(crate) fn unlink(name: &str) {
        if let Ok(cname) = os_name(name) {
            // SAFETY: cname is a valid C string; failure is ignored.
            unsafe { libc::shm_unlink(cname.as_ptr()) };
        }
    }

    impl Drop for ShmRegion {
        fn drop(&mut self) {
            // SAFETY: ptr/len came from a successful mmap.
            unsafe { libc::munmap(self.ptr as *mut libc::c_void, self.len) };
        }
    }

    // SAFETY: the mapping is valid until Drop.
    unsafe impl TransportBackend for ShmRegion {
        fn kind(&self) -> TransportKind {
            TransportKind::SharedMemory
        }

        fn name(&self) -> &str {
            &self.name
        }

        fn as_ptr(&self) -> *mut u8 {
            self.ptr
        }

        fn len(&self) -> usize {
            self.len
        }
    }
}

#[cfg(not(unix))]
mod shm {
    use std::sync::Arc;

    use super::{FrameBusError, TransportBackend};

    pub(crate) fn create(_: &str, _: usize) -> Result<Arc<dyn TransportBackend>, FrameBusError> {
        Err(FrameBusError::Resource(
            "shared_memory transport is only available on unix".into(),
        ))
    }

    pub(crate) fn open(_: &str, _: usize) -> Result<Arc<dyn TransportBackend>, FrameBusError> {
        Err(FrameBusError::Attach(
            "shared_memory transport is only available on unix".into(),
        ))
    }

    pub(crate) fn unlink(_: &str) {}
}
