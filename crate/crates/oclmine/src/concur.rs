//! Writer-preferred, reader-reentrant reader/writer lock and the
//! cancellation token built on it.
//!
//! Once a writer is waiting, threads that do not already hold read access
//! queue up behind it; only readers that were inside when the writer arrived
//! are waited for. A thread that already holds read access may take it again
//! without blocking, even while a writer waits. Blocking uses a mutex and
//! condition variables, never spinning.
//!
//! Read-to-write upgrade is refused with [`LockError::Upgrade`] instead of
//! deadlocking, and a thread holding write access cannot take it again.

use std::cell::UnsafeCell;
use std::collections::HashMap;
use std::fmt;
use std::marker::PhantomData;
use std::ops::{Deref, DerefMut};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, PoisonError};
use std::thread::{self, ThreadId};

use oclmine_core::Cancel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum LockError {
    #[error("write access requested while holding read access on the same lock")]
    Upgrade,
    #[error("write access requested while already holding it")]
    WriterReentry,
}

#[derive(Debug, Default)]
struct LockState {
    /// Read holds per thread; entries are removed when they drop to zero.
    holds: HashMap<ThreadId, usize>,
    writers_waiting: usize,
    writer: Option<ThreadId>,
    queued_readers: usize,
}

pub struct RwLockWp<T: ?Sized> {
    state: Mutex<LockState>,
    readers: Condvar,
    writers: Condvar,
    data: UnsafeCell<T>,
}

// SAFETY: access to `data` is serialised by the reader/writer protocol below,
// exactly as for `std::sync::RwLock`.
unsafe impl<T: ?Sized + Send> Send for RwLockWp<T> {}
unsafe impl<T: ?Sized + Send + Sync> Sync for RwLockWp<T> {}

impl<T: Default> Default for RwLockWp<T> {
    fn default() -> Self {
        RwLockWp::new(T::default())
    }
}

impl<T: ?Sized> fmt::Debug for RwLockWp<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = self.lock_state();
        f.debug_struct("RwLockWp")
            .field("readers", &s.holds.len())
            .field("writers_waiting", &s.writers_waiting)
            .field("write_locked", &s.writer.is_some())
            .finish_non_exhaustive()
    }
}

impl<T> RwLockWp<T> {
    pub fn new(value: T) -> Self {
        RwLockWp {
            state: Mutex::new(LockState::default()),
            readers: Condvar::new(),
            writers: Condvar::new(),
            data: UnsafeCell::new(value),
        }
    }

    pub fn into_inner(self) -> T {
        self.data.into_inner()
    }
}

impl<T: ?Sized> RwLockWp<T> {
    fn lock_state(&self) -> MutexGuard<'_, LockState> {
        // no code path panics while holding the state mutex
        self.state.lock().unwrap_or_else(PoisonError::into_inner)
    }

    /// Shared access. Blocks while a writer is active or waiting, unless the
    /// calling thread already holds read (or write) access.
    pub fn read(&self) -> ReadGuard<'_, T> {
        let me = thread::current().id();
        let mut s = self.lock_state();
        if let Some(count) = s.holds.get_mut(&me) {
            *count += 1;
        } else {
            if s.writer != Some(me) {
                s.queued_readers += 1;
                while s.writer.is_some() || s.writers_waiting > 0 {
                    s = self.readers.wait(s).unwrap_or_else(PoisonError::into_inner);
                }
                s.queued_readers -= 1;
            }
            s.holds.insert(me, 1);
        }
        ReadGuard { lock: self, _not_send: PhantomData }
    }

    /// Exclusive access. Waits for the readers that were inside when the
    /// request arrived; new readers queue behind it meanwhile.
    pub fn write(&self) -> Result<WriteGuard<'_, T>, LockError> {
        let me = thread::current().id();
        let mut s = self.lock_state();
        if s.holds.contains_key(&me) {
            return Err(LockError::Upgrade);
        }
        if s.writer == Some(me) {
            return Err(LockError::WriterReentry);
        }
        s.writers_waiting += 1;
        while s.writer.is_some() || !s.holds.is_empty() {
            s = self.writers.wait(s).unwrap_or_else(PoisonError::into_inner);
        }
        s.writers_waiting -= 1;
        s.writer = Some(me);
        Ok(WriteGuard { lock: self, _not_send: PhantomData })
    }

    fn release_read(&self) {
        let me = thread::current().id();
        let mut s = self.lock_state();
        let count = s.holds.get_mut(&me).expect("read guard released on a thread that holds none");
        *count -= 1;
        if *count == 0 {
            s.holds.remove(&me);
            if s.holds.is_empty() && s.writers_waiting > 0 {
                self.writers.notify_all();
            }
        }
    }

    fn release_write(&self) {
        let mut s = self.lock_state();
        s.writer = None;
        if s.writers_waiting > 0 {
            self.writers.notify_all();
        }
        self.readers.notify_all();
    }

    /// Number of writers blocked in [`write`](Self::write).
    pub fn writers_waiting(&self) -> usize {
        self.lock_state().writers_waiting
    }

    /// Number of threads blocked in [`read`](Self::read).
    pub fn queued_readers(&self) -> usize {
        self.lock_state().queued_readers
    }

    /// Number of threads currently holding read access.
    pub fn active_readers(&self) -> usize {
        self.lock_state().holds.len()
    }

    pub fn is_write_locked(&self) -> bool {
        self.lock_state().writer.is_some()
    }

    /// Read holds of the calling thread.
    pub fn read_depth(&self) -> usize {
        let me = thread::current().id();
        self.lock_state().holds.get(&me).copied().unwrap_or(0)
    }
}

/// Shared access; released on drop. Bound to the acquiring thread.
pub struct ReadGuard<'a, T: ?Sized> {
    lock: &'a RwLockWp<T>,
    _not_send: PhantomData<*const ()>,
}

impl<T: ?Sized> Deref for ReadGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        // SAFETY: while a read guard lives no writer is active.
        unsafe { &*self.lock.data.get() }
    }
}

impl<T: ?Sized> Drop for ReadGuard<'_, T> {
    fn drop(&mut self) {
        self.lock.release_read();
    }
}

/// Exclusive access; released on drop.
pub struct WriteGuard<'a, T: ?Sized> {
    lock: &'a RwLockWp<T>,
    _not_send: PhantomData<*const ()>,
}

impl<T: ?Sized> Deref for WriteGuard<'_, T> {
    type Target = T;
    fn deref(&self) -> &T {
        // SAFETY: the writer is the only thread with access.
        unsafe { &*self.lock.data.get() }
    }
}

impl<T: ?Sized> DerefMut for WriteGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        // SAFETY: as above.
        unsafe { &mut *self.lock.data.get() }
    }
}

impl<T: ?Sized> Drop for WriteGuard<'_, T> {
    fn drop(&mut self) {
        self.lock.release_write();
    }
}

/// Shared abort flag. Clones observe the same flag.
///
/// Polling takes the read side of the lock, cancelling takes the write side,
/// so a cancel request overtakes every poll that starts after it arrives.
#[derive(Clone, Default)]
pub struct CancellationToken {
    flag: Arc<RwLockWp<bool>>,
}

impl fmt::Debug for CancellationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("CancellationToken").field(&self.is_cancelled()).finish()
    }
}

impl CancellationToken {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the flag. Idempotent.
    pub fn cancel(&self) {
        self.set(true);
    }

    /// Clears the flag for the next run.
    pub fn reset(&self) {
        self.set(false);
    }

    pub fn is_cancelled(&self) -> bool {
        *self.flag.read()
    }

    fn set(&self, value: bool) {
        // the read side is only held inside is_cancelled, never across a call
        // into this method
        let mut guard = self.flag.write().expect("token lock held for reading by the caller");
        *guard = value;
    }

    /// The underlying lock, for introspection in tests.
    pub fn lock(&self) -> &RwLockWp<bool> {
        &self.flag
    }
}

impl Cancel for CancellationToken {
    fn is_cancelled(&self) -> bool {
        CancellationToken::is_cancelled(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::time::Duration;

    fn wait_until(mut cond: impl FnMut() -> bool) {
        for _ in 0..10_000 {
            if cond() {
                return;
            }
            thread::sleep(Duration::from_micros(100));
        }
        panic!("condition not reached");
    }

    #[test]
    fn uncontended_read_and_write() {
        let lock = RwLockWp::new(5);
        assert_eq!(*lock.read(), 5);
        *lock.write().unwrap() += 1;
        assert_eq!(*lock.read(), 6);
    }

    #[test]
    fn reentrant_reads() {
        let lock = RwLockWp::new(());
        let a = lock.read();
        let b = lock.read();
        assert_eq!(lock.read_depth(), 2);
        assert_eq!(lock.active_readers(), 1);
        drop((a, b));
        assert_eq!(lock.read_depth(), 0);
    }

    #[test]
    fn upgrade_and_writer_reentry_are_errors() {
        let lock = RwLockWp::new(());
        let r = lock.read();
        assert_eq!(lock.write().err(), Some(LockError::Upgrade));
        drop(r);
        let w = lock.write().unwrap();
        assert_eq!(lock.write().err(), Some(LockError::WriterReentry));
        // the writer may still read
        drop(lock.read());
        drop(w);
        assert!(!lock.is_write_locked());
    }

    #[test]
    fn writer_waits_for_existing_readers() {
        let lock = Arc::new(RwLockWp::new(0));
        let r1 = lock.read();
        let (tx, rx) = mpsc::channel();
        let l2 = Arc::clone(&lock);
        let h = thread::spawn(move || {
            let _r = l2.read();
            tx.send(()).unwrap();
            thread::sleep(Duration::from_millis(20));
        });
        rx.recv().unwrap();
        let l3 = Arc::clone(&lock);
        let w = thread::spawn(move || *l3.write().unwrap() = 1);
        wait_until(|| lock.writers_waiting() == 1);
        assert_eq!(*r1, 0);
        drop(r1);
        h.join().unwrap();
        w.join().unwrap();
        assert_eq!(*lock.read(), 1);
    }

    #[test]
    fn reentrant_reader_is_not_blocked_by_waiting_writer() {
        let lock = Arc::new(RwLockWp::new(()));
        let outer = lock.read();
        let l2 = Arc::clone(&lock);
        let w = thread::spawn(move || drop(l2.write().unwrap()));
        wait_until(|| lock.writers_waiting() == 1);
        let inner = lock.read();
        assert_eq!(lock.read_depth(), 2);
        drop(inner);
        drop(outer);
        w.join().unwrap();
    }

    #[test]
    fn token_lifecycle() {
        let t = CancellationToken::new();
        assert!(!t.is_cancelled());
        t.cancel();
        assert!(t.is_cancelled());
        t.cancel();
        assert!(t.clone().is_cancelled());
        t.reset();
        assert!(!t.is_cancelled());
    }
}
