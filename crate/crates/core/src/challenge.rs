//! The three fork challenges: parameters, probe layout, and the reference
//! C programs used by the real backend.
//!
//! Both backends share one probe layout so a simulated run and a traced run
//! of the same challenge light up the same map indices:
//!
//! | edge            | placed at                                   |
//! |-----------------|---------------------------------------------|
//! | 1               | root entry                                  |
//! | 2               | parent side of the first fork               |
//! | 2 + level       | entry of the child at `level` (kinds A, B)  |
//! | 16 + 2i + odd   | arm of conditional `i` (kind C)             |

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coverage::EdgeId;

pub const ROOT_ENTRY: EdgeId = EdgeId(1);
pub const PARENT_BRANCH: EdgeId = EdgeId(2);

pub const MAX_FORK_DEPTH: u32 = 8;
pub const MAX_CONDITIONALS: u32 = 16;

pub fn child_entry(level: u32) -> EdgeId {
    EdgeId(2 + level as u16)
}

pub fn arm(conditional: u32, odd: bool) -> EdgeId {
    EdgeId(16 + 2 * conditional as u16 + odd as u16)
}

/// Probes the parent side executes on every run.
pub fn parent_edges() -> BTreeSet<EdgeId> {
    BTreeSet::from([ROOT_ENTRY, PARENT_BRANCH])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ChallengeKind {
    A,
    B,
    C,
}

impl ChallengeKind {
    pub const ALL: [ChallengeKind; 3] = [ChallengeKind::A, ChallengeKind::B, ChallengeKind::C];

    pub fn describe(self) -> &'static str {
        match self {
            ChallengeKind::A => "child crash",
            ChallengeKind::B => "child hang",
            ChallengeKind::C => "child branches",
        }
    }

    fn stem(self) -> &'static str {
        match self {
            ChallengeKind::A => "challenge_a",
            ChallengeKind::B => "challenge_b",
            ChallengeKind::C => "challenge_c",
        }
    }
}

impl fmt::Display for ChallengeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChallengeKind::A => "A",
            ChallengeKind::B => "B",
            ChallengeKind::C => "C",
        })
    }
}

impl FromStr for ChallengeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(ChallengeKind::A),
            "b" | "B" => Ok(ChallengeKind::B),
            "c" | "C" => Ok(ChallengeKind::C),
            other => Err(format!("unknown challenge `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopIn {
    #[default]
    Child,
    Grandchild,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChallengeParams {
    pub kind: ChallengeKind,
    /// Level of the faulting (A, B) or branching (C) descendant.
    pub fork_depth: u32,
    /// Number of input-driven conditionals (kind C).
    pub conditionals: u32,
    pub loop_in: LoopIn,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChallengeError {
    #[error("invalid challenge parameters: {0}")]
    InvalidParams(String),
    #[error("building {program} failed: {reason}")]
    BuildFailed { program: String, reason: String },
}

impl ChallengeParams {
    /// The challenge exactly as the original snippets have it.
    pub fn canonical(kind: ChallengeKind) -> Self {
        ChallengeParams {
            kind,
            fork_depth: 1,
            conditionals: 4,
            loop_in: LoopIn::Child,
        }
    }

    pub fn validate(&self) -> Result<(), ChallengeError> {
        if !(1..=MAX_FORK_DEPTH).contains(&self.fork_depth) {
            return Err(ChallengeError::InvalidParams(format!(
                "fork_depth {} outside 1..={MAX_FORK_DEPTH}",
                self.fork_depth
            )));
        }
        if !(1..=MAX_CONDITIONALS).contains(&self.conditionals) {
            return Err(ChallengeError::InvalidParams(format!(
                "conditionals {} outside 1..={MAX_CONDITIONALS}",
                self.conditionals
            )));
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        *self == Self::canonical(self.kind)
    }

    /// Depth of the process that crashes, loops, or branches.
    pub fn fault_depth(&self) -> u32 {
        match (self.kind, self.loop_in) {
            (ChallengeKind::B, LoopIn::Grandchild) => self.fork_depth + 1,
            _ => self.fork_depth,
        }
    }

    /// Child-side edges whose coverage demonstrates child coverage.
    pub fn required_child_edges(&self) -> BTreeSet<EdgeId> {
        match self.kind {
            ChallengeKind::A | ChallengeKind::B => {
                BTreeSet::from([child_entry(self.fault_depth())])
            }
            ChallengeKind::C => (0..self.conditionals)
                .flat_map(|i| [arm(i, false), arm(i, true)])
                .collect(),
        }
    }

    /// One input per parity class of the driving bytes (`2^conditionals`
    /// inputs); kinds A and B ignore input and get a single byte.
    pub fn parity_inputs(&self) -> Vec<Vec<u8>> {
        match self.kind {
            ChallengeKind::A | ChallengeKind::B => vec![vec![0]],
            ChallengeKind::C => (0u32..1 << self.conditionals)
                .map(|mask| {
                    (0..self.conditionals)
                        .map(|i| ((mask >> i) & 1) as u8)
                        .collect()
                })
                .collect(),
        }
    }
}

const RUNTIME_HEADER: (&str, &str) = (
    "forkaware_rt.h",
    include_str!("../challenges/forkaware_rt.h"),
);
const SOURCES: [(ChallengeKind, &str); 3] = [
    (
        ChallengeKind::A,
        include_str!("../challenges/challenge_a.c"),
    ),
    (
        ChallengeKind::B,
        include_str!("../challenges/challenge_b.c"),
    ),
    (
        ChallengeKind::C,
        include_str!("../challenges/challenge_c.c"),
    ),
];

/// Source of the bundled reference program for a canonical challenge.
/// Parameterized variants come from the challenge generator, not from here.
pub fn reference_source(params: &ChallengeParams) -> Result<&'static str, ChallengeError> {
    params.validate()?;
    if !params.is_canonical() {
        return Err(ChallengeError::InvalidParams(
            "only canonical challenges have bundled reference sources".into(),
        ));
    }
    Ok(SOURCES.iter().find(|(k, _)| *k == params.kind).unwrap().1)
}

/// Writes the runtime header and the three reference sources into `dir`.
pub fn write_reference_sources(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let header = dir.join(RUNTIME_HEADER.0);
    std::fs::write(&header, RUNTIME_HEADER.1)?;
    written.push(header);
    for (kind, src) in SOURCES {
        let path = dir.join(format!("{}.c", kind.stem()));
        std::fs::write(&path, src)?;
        written.push(path);
    }
    Ok(written)
}

/// Directory holding one executable per challenge (`challenge_a`, ...).
#[derive(Debug, Clone)]
pub struct ChallengeBinaries {
    dir: PathBuf,
}

impl ChallengeBinaries {
    /// Uses prebuilt binaries from `dir`; all three must exist.
    pub fn locate(dir: &Path) -> Result<Self, ChallengeError> {
        let bins = ChallengeBinaries {
            dir: dir.to_path_buf(),
        };
        for kind in ChallengeKind::ALL {
            if !bins.path(kind).is_file() {
                return Err(ChallengeError::BuildFailed {
                    program: bins.path(kind).display().to_string(),
                    reason: "not found".into(),
                });
            }
        }
        Ok(bins)
    }

    /// Compiles the reference sources into `out_dir` with `$CC` (default `cc`).
    pub fn build(out_dir: &Path) -> Result<Self, ChallengeError> {
        let src_dir = out_dir.join("src");
        write_reference_sources(&src_dir).map_err(|e| ChallengeError::BuildFailed {
            program: src_dir.display().to_string(),
            reason: e.to_string(),
        })?;
        let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_string());
        for kind in ChallengeKind::ALL {
            let src = src_dir.join(format!("{}.c", kind.stem()));
            let out = out_dir.join(kind.stem());
            compile_c(&cc, &src, &out)?;
        }
        Ok(ChallengeBinaries {
            dir: out_dir.to_path_buf(),
        })
    }

    pub fn path(&self, kind: ChallengeKind) -> PathBuf {
        self.dir.join(kind.stem())
    }
}

/// `cc -Wall -Wextra -Werror -O1 -o out src`.
pub fn compile_c(cc: &str, src: &Path, out: &Path) -> Result<(), ChallengeError> {
    let output = Command::new(cc)
        .args(["-Wall", "-Wextra", "-Werror", "-O1", "-o"])
        .arg(out)
        .arg(src)
        .output()
        .map_err(|e| ChallengeError::BuildFailed {
            program: src.display().to_string(),
            reason: format!("{cc}: {e}"),
        })?;
    if !output.status.success() {
        return Err(ChallengeError::BuildFailed {
            program: src.display().to_string(),
            reason: String::from_utf8_lossy(&output.stderr).into_owned(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_layout() {
        let c = ChallengeParams::canonical(ChallengeKind::C);
        let arms = c.required_child_edges();
        assert_eq!(arms.len(), 8);
        assert!(arms.is_disjoint(&parent_edges()));
        assert_eq!(c.parity_inputs().len(), 16);
        let a = ChallengeParams::canonical(ChallengeKind::A);
        assert_eq!(a.required_child_edges(), BTreeSet::from([EdgeId(3)]));
    }

    #[test]
    fn validation_bounds() {
        let mut p = ChallengeParams::canonical(ChallengeKind::A);
        p.fork_depth = 0;
        assert!(p.validate().is_err());
        p.fork_depth = 9;
        assert!(p.validate().is_err());
        p.fork_depth = 8;
        p.conditionals = 17;
        assert!(p.validate().is_err());
    }

    #[test]
    fn grandchild_loop_depth() {
        let mut p = ChallengeParams::canonical(ChallengeKind::B);
        p.loop_in = LoopIn::Grandchild;
        assert_eq!(p.fault_depth(), 2);
    }

    #[test]
    fn reference_sources_only_for_canonical() {
        assert!(
            reference_source(&ChallengeParams::canonical(ChallengeKind::A))
                .unwrap()
                .contains("raise(SIGSEGV)")
        );
        let mut p = ChallengeParams::canonical(ChallengeKind::C);
        p.conditionals = 5;
        assert!(reference_source(&p).is_err());
    }
}
