//! Edge-coverage bitmap shared by every process of a traced tree.
//!
//! Byte `i` of the map is the saturating hit counter for probe `i`. Targets
//! attach the segment named by `FORKAWARE_SHM_ID` before forking, so every
//! descendant writes the same map and the counts survive child death.

use std::fmt;
use std::io;
use std::ptr::NonNull;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MAP_SIZE: usize = 1 << 16;

/// Environment variable carrying the decimal SysV shared-memory id.
pub const SHM_ENV_VAR: &str = "FORKAWARE_SHM_ID";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u16);

impl EdgeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// AFL hit-count class of a raw counter value.
pub const fn bucket_of(count: u8) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        _ => 128,
    }
}

const BUCKET_TABLE: [u8; 256] = {
    let mut table = [0u8; 256];
    let mut i = 0;
    while i < 256 {
        table[i] = bucket_of(i as u8);
        i += 1;
    }
    table
};

/// Raw 8-bit saturating counters.
#[derive(Clone, PartialEq, Eq)]
pub struct CoverageBitmap {
    counters: Box<[u8]>,
}

/// Counters mapped to their hit-count class masks.
#[derive(Clone, PartialEq, Eq)]
pub struct ClassifiedBitmap {
    buckets: Box<[u8]>,
}

macro_rules! map_common {
    ($ty:ident, $field:ident) => {
        impl $ty {
            pub fn new() -> Self {
                $ty {
                    $field: vec![0u8; MAP_SIZE].into_boxed_slice(),
                }
            }

            pub fn as_bytes(&self) -> &[u8] {
                &self.$field
            }

            pub fn get(&self, edge: EdgeId) -> u8 {
                self.$field[edge.index()]
            }

            /// Number of nonzero entries.
            pub fn count_edges(&self) -> usize {
                self.$field.iter().filter(|&&b| b != 0).count()
            }

            pub fn is_empty(&self) -> bool {
                self.$field.iter().all(|&b| b == 0)
            }

            /// Nonzero entries in index order.
            pub fn nonzero(&self) -> impl Iterator<Item = (EdgeId, u8)> + '_ {
                self.$field
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b != 0)
                    .map(|(i, &b)| (EdgeId(i as u16), b))
            }

            pub fn from_entries(entries: impl IntoIterator<Item = (EdgeId, u8)>) -> Self {
                let mut map = Self::new();
                for (edge, value) in entries {
                    map.$field[edge.index()] = value;
                }
                map
            }
        }

        impl Default for $ty {
            fn default() -> Self {
                Self::new()
            }
        }

        impl fmt::Debug for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.debug_map()
                    .entries(self.nonzero().map(|(e, v)| (e.0, v)))
                    .finish()
            }
        }

        // Sparse on the wire: a list of [edge, value] pairs.
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_seq(self.nonzero().map(|(e, v)| (e.0, v)))
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let pairs: Vec<(u16, u8)> = Vec::deserialize(d)?;
                if pairs.iter().any(|&(_, v)| v == 0) {
                    return Err(D::Error::custom("zero entries are implicit"));
                }
                Ok(Self::from_entries(
                    pairs.into_iter().map(|(e, v)| (EdgeId(e), v)),
                ))
            }
        }
    };
}

map_common!(CoverageBitmap, counters);
map_common!(ClassifiedBitmap, buckets);

impl CoverageBitmap {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        assert_eq!(
            bytes.len(),
            MAP_SIZE,
            "coverage map must be {MAP_SIZE} bytes"
        );
        CoverageBitmap {
            counters: bytes.into(),
        }
    }

    /// Adds `other`'s counters into this map, saturating.
    pub fn absorb(&mut self, other: &CoverageBitmap) {
        for (c, &o) in self.counters.iter_mut().zip(other.counters.iter()) {
            *c = c.saturating_add(o);
        }
    }

    /// Saturating increment.
    pub fn hit(&mut self, edge: EdgeId) {
        let c = &mut self.counters[edge.index()];
        *c = c.saturating_add(1);
    }
}

impl ClassifiedBitmap {
    pub fn bits_at(&self, edge: EdgeId) -> u8 {
        self.get(edge)
    }
}

pub fn bucketize(raw: &CoverageBitmap) -> ClassifiedBitmap {
    ClassifiedBitmap {
        buckets: raw
            .counters
            .iter()
            .map(|&c| BUCKET_TABLE[c as usize])
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Novelty {
    None,
    NewBucket,
    NewEdge,
}

pub fn has_new_bits(global: &ClassifiedBitmap, current: &ClassifiedBitmap) -> Novelty {
    let mut result = Novelty::None;
    for (&g, &c) in global.buckets.iter().zip(current.buckets.iter()) {
        if c & !g == 0 {
            continue;
        }
        if g == 0 {
            return Novelty::NewEdge;
        }
        result = Novelty::NewBucket;
    }
    result
}

pub fn merge(global: &ClassifiedBitmap, current: &ClassifiedBitmap) -> ClassifiedBitmap {
    let mut out = global.clone();
    merge_into(&mut out, current);
    out
}

pub fn merge_into(global: &mut ClassifiedBitmap, current: &ClassifiedBitmap) {
    for (g, &c) in global.buckets.iter_mut().zip(current.buckets.iter()) {
        *g |= c;
    }
}

#[derive(Debug, Error)]
pub enum ShmError {
    #[error("shared memory unavailable: {0}")]
    ShmUnavailable(#[source] io::Error),
}

/// A SysV shared-memory segment of exactly [`MAP_SIZE`] bytes. The segment
/// is marked for removal on creation, so it disappears once the monitor and
/// every attached target have detached.
pub struct SharedMap {
    id: i32,
    ptr: NonNull<u8>,
}

// The monitor only reads after the traced tree is quiescent.
unsafe impl Send for SharedMap {}

impl SharedMap {
    pub fn create() -> Result<Self, ShmError> {
        // SAFETY: plain syscalls; results are checked before use.
        unsafe {
            let id = libc::shmget(libc::IPC_PRIVATE, MAP_SIZE, libc::IPC_CREAT | 0o600);
            if id < 0 {
                return Err(ShmError::ShmUnavailable(io::Error::last_os_error()));
            }
            let addr = libc::shmat(id, std::ptr::null(), 0);
            if addr as isize == -1 {
                let err = io::Error::last_os_error();
                libc::shmctl(id, libc::IPC_RMID, std::ptr::null_mut());
                return Err(ShmError::ShmUnavailable(err));
            }
            // Linux keeps an IPC_RMID'd segment attachable until the last detach.
            libc::shmctl(id, libc::IPC_RMID, std::ptr::null_mut());
            let map = SharedMap {
                id,
                ptr: NonNull::new_unchecked(addr as *mut u8),
            };
            map.clear();
            Ok(map)
        }
    }

    pub fn id(&self) -> i32 {
        self.id
    }

    /// Value for [`SHM_ENV_VAR`].
    pub fn env_value(&self) -> String {
        self.id.to_string()
    }

    pub fn clear(&self) {
        // SAFETY: the mapping is MAP_SIZE bytes and owned by self.
        unsafe { std::ptr::write_bytes(self.ptr.as_ptr(), 0, MAP_SIZE) }
    }

    pub fn snapshot(&self) -> CoverageBitmap {
        // SAFETY: as above; writers are terminal when this is called.
        let bytes = unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), MAP_SIZE) };
        CoverageBitmap::from_bytes(bytes)
    }

    /// Monitor-side probe, used to exercise the mapping in tests.
    pub fn hit(&self, edge: EdgeId) {
        // SAFETY: index is < MAP_SIZE by construction of EdgeId.
        unsafe {
            let p = self.ptr.as_ptr().add(edge.index());
            *p = (*p).saturating_add(1);
        }
    }
}

impl Drop for SharedMap {
    fn drop(&mut self) {
        // SAFETY: ptr came from shmat.
        unsafe {
            libc::shmdt(self.ptr.as_ptr() as *const libc::c_void);
        }
    }
}

impl fmt::Debug for SharedMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SharedMap").field("id", &self.id).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_map_is_zero() {
        let map = CoverageBitmap::new();
        assert!(map.is_empty());
        assert_eq!(map.count_edges(), 0);
        assert_eq!(map.as_bytes().len(), MAP_SIZE);
    }

    #[test]
    fn single_hit() {
        let mut map = CoverageBitmap::new();
        map.hit(EdgeId(7));
        assert_eq!(map.get(EdgeId(7)), 1);
        assert_eq!(map.count_edges(), 1);
    }

    #[test]
    fn counters_saturate() {
        let mut map = CoverageBitmap::new();
        for _ in 0..300 {
            map.hit(EdgeId(7));
        }
        assert_eq!(map.get(EdgeId(7)), 255);
        map.hit(EdgeId(7));
        assert_eq!(map.get(EdgeId(7)), 255);
    }

    #[test]
    fn bucket_spot_checks() {
        assert_eq!(bucket_of(0), 0);
        assert_eq!(bucket_of(3), 4);
        assert_eq!(bucket_of(255), 128);
        assert_eq!(bucket_of(128), 128);
        assert_eq!(bucket_of(127), 64);
    }

    #[test]
    fn reclassifying_moves_middle_classes() {
        // the table sends class values 4, 8, 16 and 32 one class up, so a
        // classified map must never be fed back through bucketize
        let moved: Vec<u8> = (0..=255u8)
            .map(bucket_of)
            .filter(|&c| bucket_of(c) != c)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        assert_eq!(moved, [4, 8, 16, 32]);
    }

    #[test]
    fn novelty_cases() {
        let empty = ClassifiedBitmap::new();
        let e5 = ClassifiedBitmap::from_entries([(EdgeId(5), 1)]);
        assert_eq!(has_new_bits(&empty, &e5), Novelty::NewEdge);
        let e5b = ClassifiedBitmap::from_entries([(EdgeId(5), 2)]);
        assert_eq!(has_new_bits(&e5, &e5b), Novelty::NewBucket);
        assert_eq!(has_new_bits(&e5, &e5), Novelty::None);
        // a new edge anywhere outranks a new bucket elsewhere
        let both = ClassifiedBitmap::from_entries([(EdgeId(5), 2), (EdgeId(9), 1)]);
        assert_eq!(has_new_bits(&e5, &both), Novelty::NewEdge);
    }

    #[test]
    fn merge_identity_and_idempotence() {
        let x = ClassifiedBitmap::from_entries([(EdgeId(1), 4), (EdgeId(300), 128)]);
        assert_eq!(merge(&ClassifiedBitmap::new(), &x), x);
        assert_eq!(merge(&x, &x), x);
    }

    #[test]
    fn sparse_json() {
        let mut map = CoverageBitmap::new();
        map.hit(EdgeId(3));
        map.hit(EdgeId(3));
        map.hit(EdgeId(17));
        let json = serde_json::to_string(&map).unwrap();
        assert_eq!(json, "[[3,2],[17,1]]");
        let back: CoverageBitmap = serde_json::from_str(&json).unwrap();
        assert_eq!(back, map);
        assert!(serde_json::from_str::<CoverageBitmap>("[[3,0]]").is_err());
    }

    #[test]
    fn shared_map_roundtrip() {
        let shm = SharedMap::create().unwrap();
        assert!(shm.snapshot().is_empty());
        shm.hit(EdgeId(7));
        assert_eq!(shm.snapshot().get(EdgeId(7)), 1);
        shm.clear();
        assert!(shm.snapshot().is_empty());
        assert_eq!(shm.env_value().parse::<i32>().unwrap(), shm.id());
    }
}
