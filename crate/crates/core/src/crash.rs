//! Crash records written by the target-side fatal-signal handler.
//!
//! When `FORKAWARE_CRASHFILE=<path>` is set, the instrumentation runtime
//! appends one 16-byte record per fatal signal before re-raising it: the pid
//! as a little-endian u64 followed by the signal number as a little-endian
//! u64. This is the channel a crash-record monitor sees even when it never
//! observes the crashing child's exit status.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::process::{Pid, ProcessTree, SignalKind};

pub const CRASHFILE_ENV_VAR: &str = "FORKAWARE_CRASHFILE";
pub const RECORD_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawCrashRecord {
    pub pid: u64,
    pub signo: u64,
}

impl RawCrashRecord {
    pub fn encode(&self) -> [u8; RECORD_LEN] {
        let mut out = [0u8; RECORD_LEN];
        out[..8].copy_from_slice(&self.pid.to_le_bytes());
        out[8..].copy_from_slice(&self.signo.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; RECORD_LEN]) -> Self {
        let (pid, signo) = bytes.split_at(8);
        RawCrashRecord {
            pid: u64::from_le_bytes(pid.try_into().unwrap()),
            signo: u64::from_le_bytes(signo.try_into().unwrap()),
        }
    }
}

#[derive(Debug, Error)]
pub enum CrashFileError {
    #[error("crash file length {0} is not a multiple of {RECORD_LEN}")]
    Truncated(usize),
    #[error("crash record names pid {0}, which was never tracked")]
    UnknownPid(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn parse_records(bytes: &[u8]) -> Result<Vec<RawCrashRecord>, CrashFileError> {
    if !bytes.len().is_multiple_of(RECORD_LEN) {
        return Err(CrashFileError::Truncated(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(RECORD_LEN)
        .map(|c| RawCrashRecord::decode(c.try_into().unwrap()))
        .collect())
}

/// Reads a crash file; a missing file means no crashes were recorded.
pub fn read_crash_file(path: &Path) -> Result<Vec<RawCrashRecord>, CrashFileError> {
    match std::fs::read(path) {
        Ok(bytes) => parse_records(&bytes),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

/// A crash record located in the process tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub pid: Pid,
    pub signal: SignalKind,
    pub depth: u32,
    pub path: Vec<Pid>,
}

impl CrashRecord {
    pub fn attribute(raw: RawCrashRecord, tree: &ProcessTree) -> Result<Self, CrashFileError> {
        let pid = u32::try_from(raw.pid)
            .ok()
            .map(Pid)
            .filter(|p| tree.contains(*p))
            .ok_or(CrashFileError::UnknownPid(raw.pid))?;
        let path = tree.tree_path(pid).expect("pid is in tree");
        Ok(CrashRecord {
            pid,
            signal: SignalKind::from_raw(raw.signo as i32),
            depth: path.len() as u32 - 1,
            path,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::ExecEvent;

    #[test]
    fn record_layout_is_little_endian() {
        let rec = RawCrashRecord {
            pid: 0x0102,
            signo: 11,
        };
        let bytes = rec.encode();
        assert_eq!(bytes[0], 0x02);
        assert_eq!(bytes[1], 0x01);
        assert_eq!(bytes[8], 11);
        assert_eq!(RawCrashRecord::decode(&bytes), rec);
    }

    #[test]
    fn parse_rejects_partial_records() {
        assert!(parse_records(&[]).unwrap().is_empty());
        assert!(matches!(
            parse_records(&[0u8; 17]),
            Err(CrashFileError::Truncated(17))
        ));
        let mut two = RawCrashRecord { pid: 5, signo: 11 }.encode().to_vec();
        two.extend(RawCrashRecord { pid: 6, signo: 6 }.encode());
        assert_eq!(parse_records(&two).unwrap().len(), 2);
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_crash_file(&dir.path().join("nope"))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn attribution() {
        let mut tree = ProcessTree::new(Pid(10), 0);
        tree.apply(&ExecEvent::ForkObserved {
            parent: Pid(10),
            child: Pid(11),
            at: 1,
        })
        .unwrap();
        let rec = CrashRecord::attribute(
            RawCrashRecord {
                pid: 11,
                signo: libc::SIGSEGV as u64,
            },
            &tree,
        )
        .unwrap();
        assert_eq!(rec.depth, 1);
        assert_eq!(rec.path, vec![Pid(10), Pid(11)]);
        assert_eq!(rec.signal, SignalKind::Segv);
        assert!(CrashRecord::attribute(RawCrashRecord { pid: 99, signo: 11 }, &tree).is_err());
    }
}
