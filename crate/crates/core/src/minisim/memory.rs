//! Mirrored host/device buffers and the runtime event log.
//!
//! Each array owns a host copy and a device copy plus two "modified" flags.
//! Correct code marks the side it wrote and syncs before reading the other
//! side; a clean run therefore never observes both flags set and never reads
//! a side whose counterpart holds pending writes.

use serde::{Deserialize, Serialize};

use super::units::Unit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Alloc,
    Dealloc,
    ParallelFor,
    ParallelScan,
    ParallelReduce,
    Fence,
    DeepCopy,
}

/// One record of the runtime's profiling log. `name` is the variable for
/// memory events and the launching unit for kernel events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeEvent {
    pub kind: EventKind,
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Host,
    Device,
}

#[derive(Debug, Clone)]
pub struct MirroredArray {
    pub name: &'static str,
    pub host: Vec<f64>,
    pub device: Vec<f64>,
    pub host_modified: bool,
    pub device_modified: bool,
}

impl MirroredArray {
    pub fn new(name: &'static str) -> Self {
        Self {
            name,
            host: Vec::new(),
            device: Vec::new(),
            host_modified: false,
            device_modified: false,
        }
    }

    pub fn len(&self) -> usize {
        self.host.len()
    }

    pub fn is_empty(&self) -> bool {
        self.host.is_empty()
    }

    fn bytes(&self) -> u64 {
        (self.host.len() * std::mem::size_of::<f64>()) as u64
    }
}

/// Buffer that kernels of `backend` execute on.
pub fn exec(device: bool, a: &MirroredArray) -> &[f64] {
    if device {
        &a.device
    } else {
        &a.host
    }
}

pub fn exec_mut(device: bool, a: &mut MirroredArray) -> &mut [f64] {
    if device {
        &mut a.device
    } else {
        &mut a.host
    }
}

/// Values a correctly synchronised reader would observe: pending host
/// writes win over the device copy.
pub fn logical(device: bool, a: &MirroredArray) -> &[f64] {
    if !device || a.host_modified {
        &a.host
    } else {
        &a.device
    }
}

#[derive(Debug)]
pub struct Runtime {
    backend: Backend,
    pub events: Vec<RuntimeEvent>,
    pub sync_violations: u64,
}

impl Runtime {
    pub fn new(backend: Backend) -> Self {
        Self {
            backend,
            events: Vec::new(),
            sync_violations: 0,
        }
    }

    pub fn is_device(&self) -> bool {
        self.backend == Backend::Device
    }

    fn push(&mut self, kind: EventKind, name: &str, bytes: u64) {
        self.events.push(RuntimeEvent {
            kind,
            name: name.to_string(),
            bytes,
        });
    }

    /// Resizes both copies, keeping the common prefix. Emits a dealloc for the
    /// old extent and an alloc for the new one; zero-sized extents are silent.
    pub fn resize(&mut self, a: &mut MirroredArray, len: usize) {
        if len == a.len() {
            return;
        }
        if !a.is_empty() {
            self.push(EventKind::Dealloc, a.name, a.bytes());
        }
        a.host.resize(len, 0.0);
        if self.is_device() {
            a.device.resize(len, 0.0);
        }
        if !a.is_empty() {
            self.push(EventKind::Alloc, a.name, a.bytes());
        }
    }

    pub fn free(&mut self, a: &mut MirroredArray) {
        if !a.is_empty() {
            self.push(EventKind::Dealloc, a.name, a.bytes());
        }
        a.host.clear();
        a.device.clear();
        a.host_modified = false;
        a.device_modified = false;
    }

    pub fn modify_host(&mut self, a: &mut MirroredArray) {
        if self.is_device() {
            a.host_modified = true;
        }
    }

    pub fn modify_device(&mut self, a: &mut MirroredArray) {
        if self.is_device() {
            a.device_modified = true;
        }
    }

    fn flag_conflict(&mut self, a: &MirroredArray) {
        if a.host_modified && a.device_modified {
            self.sync_violations += 1;
        }
    }

    /// Copies pending host writes to the device.
    pub fn sync_device(&mut self, a: &mut MirroredArray) {
        self.sync_device_prefix(a, usize::MAX);
    }

    /// Like [`Runtime::sync_device`] but copies at most `limit` elements.
    pub fn sync_device_prefix(&mut self, a: &mut MirroredArray, limit: usize) {
        if !self.is_device() || !a.host_modified {
            return;
        }
        self.flag_conflict(a);
        let n = limit.min(a.len());
        a.device[..n].copy_from_slice(&a.host[..n]);
        a.host_modified = false;
        a.device_modified = false;
        self.push(EventKind::DeepCopy, a.name, (n * 8) as u64);
    }

    /// Copies pending device writes to the host.
    pub fn sync_host(&mut self, a: &mut MirroredArray) {
        if !self.is_device() || !a.device_modified {
            return;
        }
        self.flag_conflict(a);
        a.host.copy_from_slice(&a.device);
        a.host_modified = false;
        a.device_modified = false;
        self.push(EventKind::DeepCopy, a.name, a.bytes());
    }

    /// Records a device read; counts a violation if host writes are pending.
    pub fn read_device(&mut self, a: &MirroredArray) {
        if self.is_device() && a.host_modified {
            self.sync_violations += 1;
        }
    }

    /// Records a host read; counts a violation if device writes are pending.
    pub fn read_host(&mut self, a: &MirroredArray) {
        if self.is_device() && a.device_modified {
            self.sync_violations += 1;
        }
    }

    pub fn launch(&mut self, kind: EventKind, unit: Unit) {
        self.push(kind, unit, 0);
        self.push(EventKind::Fence, unit, 0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sync_moves_pending_writes_once() {
        let mut rt = Runtime::new(Backend::Device);
        let mut a = MirroredArray::new("x");
        rt.resize(&mut a, 4);
        a.host.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        rt.modify_host(&mut a);
        assert_eq!(logical(true, &a), &[1.0, 2.0, 3.0, 4.0]);
        rt.sync_device(&mut a);
        rt.sync_device(&mut a);
        assert_eq!(a.device, a.host);
        let copies = rt.events.iter().filter(|e| e.kind == EventKind::DeepCopy).count();
        assert_eq!(copies, 1);
        assert_eq!(rt.sync_violations, 0);
    }

    #[test]
    fn prefix_sync_truncates() {
        let mut rt = Runtime::new(Backend::Device);
        let mut a = MirroredArray::new("x");
        rt.resize(&mut a, 3);
        a.host.copy_from_slice(&[1.0, 2.0, 3.0]);
        rt.modify_host(&mut a);
        rt.sync_device_prefix(&mut a, 2);
        assert_eq!(a.device, vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn host_backend_never_copies() {
        let mut rt = Runtime::new(Backend::Host);
        let mut a = MirroredArray::new("v");
        rt.resize(&mut a, 2);
        rt.modify_host(&mut a);
        rt.sync_device(&mut a);
        rt.sync_host(&mut a);
        assert!(a.device.is_empty());
        assert!(rt.events.iter().all(|e| e.kind == EventKind::Alloc));
    }

    #[test]
    fn both_sides_modified_is_a_violation() {
        let mut rt = Runtime::new(Backend::Device);
        let mut a = MirroredArray::new("f");
        rt.resize(&mut a, 1);
        rt.modify_host(&mut a);
        rt.modify_device(&mut a);
        rt.sync_host(&mut a);
        assert_eq!(rt.sync_violations, 1);
    }

    #[test]
    fn empty_resize_is_silent() {
        let mut rt = Runtime::new(Backend::Device);
        let mut a = MirroredArray::new("q");
        rt.resize(&mut a, 0);
        rt.free(&mut a);
        assert!(rt.events.is_empty());
    }
}
