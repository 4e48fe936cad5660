//! Hit-count classes, novelty and merging on the edge map, plus the SysV
//! shared segment the real targets write into.
//!
//!     cargo run --example coverage_novelty

use forkaware::coverage::{bucket_of, bucketize, has_new_bits, merge, SharedMap};
use forkaware::{ClassifiedBitmap, CoverageBitmap, EdgeId};

fn run(hits: &[(u16, u8)]) -> ClassifiedBitmap {
    let mut raw = CoverageBitmap::new();
    for &(edge, n) in hits {
        for _ in 0..n {
            raw.hit(EdgeId(edge));
        }
    }
    bucketize(&raw)
}

fn main() -> Result<(), forkaware::Error> {
    for c in [0u8, 1, 2, 3, 5, 12, 100, 255] {
        println!("counter {c:>3} -> class {}", bucket_of(c));
    }

    let mut global = ClassifiedBitmap::new();
    for hits in [
        &[(5, 1)][..],
        &[(5, 1)],
        &[(5, 2)],
        &[(5, 2), (9, 1)],
        &[(5, 6)],
    ] {
        let current = run(hits);
        println!("{hits:?}: {:?}", has_new_bits(&global, &current));
        global = merge(&global, &current);
    }
    println!("global: {global:?}");

    // the map the challenges attach through FORKAWARE_SHM_ID
    let shm = SharedMap::create()?;
    shm.hit(EdgeId(7));
    shm.hit(EdgeId(7));
    println!("shm {}: {:?}", shm.env_value(), shm.snapshot());
    Ok(())
}
