#![allow(dead_code)]

use std::path::{Path, PathBuf};

use forkaware::challenge::{compile_c, ChallengeBinaries};

pub mod scripts;

pub struct Built {
    _dir: tempfile::TempDir,
    pub path: PathBuf,
}

/// Compiles `tests/fixtures/<name>.c` into a fresh temp directory.
pub fn fixture(name: &str) -> Built {
    let src = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(format!("{name}.c"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    compile_c(&cc, &src, &path).unwrap();
    Built { _dir: dir, path }
}

pub struct Challenges {
    _dir: tempfile::TempDir,
    pub bins: ChallengeBinaries,
}

pub fn challenges() -> Challenges {
    let dir = tempfile::tempdir().unwrap();
    let bins = ChallengeBinaries::build(dir.path()).unwrap();
    Challenges { _dir: dir, bins }
}
