//! A small coverage-guided mutational fuzzer driving any [`Executor`].
//!
//! Seeds run first and always join the corpus. After that each iteration
//! picks the next queue entry round-robin, mutates it, executes the mutant,
//! and keeps it only if the profile's view of its bitmap has new bits
//! against the global map.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::challenge::ChallengeKind;
use crate::coverage::{bucketize, has_new_bits, merge_into, ClassifiedBitmap, Novelty};
use crate::detect::{
    detect_bugs, detect_hangs, filter_view, Budgets, HangReason, MonitorProfile, ProfileName,
};
use crate::exec::{BackendKind, Executor};
use crate::process::SignalKind;
use crate::Error;

pub const MAX_INPUT_LEN: usize = 4096;
pub const MAX_STACK: u32 = 8;

pub type FuzzRng = Xoshiro256PlusPlus;

pub fn rng_from_seed(seed: u64) -> FuzzRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: u64,
    pub bytes: Vec<u8>,
    pub parent_id: Option<u64>,
    pub found_at_exec: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub execs: u64,
    pub corpus_size: u64,
    pub unique_bug_findings: u64,
    pub hang_findings: u64,
    pub global_map: ClassifiedBitmap,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationOp {
    BitFlip,
    ByteSet,
    ByteInc,
    ByteDec,
    ByteSwap,
    BlockDup,
    BlockDelete,
}

impl MutationOp {
    pub const ALL: [MutationOp; 7] = [
        MutationOp::BitFlip,
        MutationOp::ByteSet,
        MutationOp::ByteInc,
        MutationOp::ByteDec,
        MutationOp::ByteSwap,
        MutationOp::BlockDup,
        MutationOp::BlockDelete,
    ];

    /// Applies the operator in place. `bytes` must be nonempty and stays
    /// within `1..=MAX_INPUT_LEN`.
    pub fn apply(self, bytes: &mut Vec<u8>, rng: &mut impl Rng) {
        debug_assert!(!bytes.is_empty());
        let len = bytes.len();
        match self {
            MutationOp::BitFlip => {
                let bit = rng.gen_range(0..len * 8);
                bytes[bit / 8] ^= 1 << (bit % 8);
            }
            MutationOp::ByteSet => {
                let i = rng.gen_range(0..len);
                bytes[i] = rng.gen();
            }
            MutationOp::ByteInc => {
                let i = rng.gen_range(0..len);
                bytes[i] = bytes[i].wrapping_add(1);
            }
            MutationOp::ByteDec => {
                let i = rng.gen_range(0..len);
                bytes[i] = bytes[i].wrapping_sub(1);
            }
            MutationOp::ByteSwap => {
                let (i, j) = (rng.gen_range(0..len), rng.gen_range(0..len));
                bytes.swap(i, j);
            }
            MutationOp::BlockDup => {
                let room = MAX_INPUT_LEN - len;
                if room == 0 {
                    return;
                }
                let start = rng.gen_range(0..len);
                let n = rng.gen_range(1..=(len - start).min(room));
                let at = rng.gen_range(0..=len);
                let block: Vec<u8> = bytes[start..start + n].to_vec();
                bytes.splice(at..at, block);
            }
            MutationOp::BlockDelete => {
                if len == 1 {
                    return;
                }
                let start = rng.gen_range(0..len);
                let n = rng.gen_range(1..=(len - start).min(len - 1));
                bytes.drain(start..start + n);
            }
        }
    }
}

/// Applies 1 to 8 randomly chosen operators. Inputs longer than
/// `MAX_INPUT_LEN` are truncated first.
pub fn mutate(bytes: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    assert!(!bytes.is_empty(), "mutate needs a nonempty input");
    let mut out = bytes[..bytes.len().min(MAX_INPUT_LEN)].to_vec();
    for _ in 0..rng.gen_range(1..=MAX_STACK) {
        let op = MutationOp::ALL[rng.gen_range(0..MutationOp::ALL.len())];
        op.apply(&mut out, rng);
    }
    out
}

/// Round-robin selection; the cursor wraps.
pub fn select_next(queue: &[TestCase], cursor: usize) -> (&TestCase, usize) {
    assert!(!queue.is_empty(), "select_next needs a nonempty queue");
    let i = cursor % queue.len();
    (&queue[i], i + 1)
}

#[derive(Debug, Clone, Copy)]
pub struct CampaignConfig {
    pub budget_execs: u64,
    pub rng_seed: u64,
    pub profile: MonitorProfile,
    pub budgets: Budgets,
}

/// What happened to one executed test case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecOutcome {
    pub novelty: Novelty,
    pub admitted: bool,
    pub bugs: usize,
    pub hangs: usize,
}

pub struct Campaign<E> {
    target: E,
    config: CampaignConfig,
    rng: FuzzRng,
    corpus: Vec<TestCase>,
    seeds: Vec<Vec<u8>>,
    cursor: usize,
    execs: u64,
    global: ClassifiedBitmap,
    bugs: BTreeSet<(u32, SignalKind)>,
    hangs: BTreeSet<(u32, HangReason)>,
}

impl<E: Executor> Campaign<E> {
    pub fn new(target: E, seeds: Vec<Vec<u8>>, config: CampaignConfig) -> Result<Self, Error> {
        if seeds.is_empty() {
            return Err(Error::Precondition("at least one seed is required".into()));
        }
        if seeds
            .iter()
            .any(|s| s.is_empty() || s.len() > MAX_INPUT_LEN)
        {
            return Err(Error::Precondition(format!(
                "seed lengths must be within 1..={MAX_INPUT_LEN}"
            )));
        }
        if config.budget_execs < seeds.len() as u64 {
            return Err(Error::Precondition(format!(
                "budget of {} execs is smaller than the {} seeds",
                config.budget_execs,
                seeds.len()
            )));
        }
        Ok(Campaign {
            target,
            rng: rng_from_seed(config.rng_seed),
            config,
            corpus: Vec::new(),
            seeds,
            cursor: 0,
            execs: 0,
            global: ClassifiedBitmap::new(),
            bugs: BTreeSet::new(),
            hangs: BTreeSet::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.execs >= self.config.budget_execs
    }

    pub fn corpus(&self) -> &[TestCase] {
        &self.corpus
    }

    pub fn global_map(&self) -> &ClassifiedBitmap {
        &self.global
    }

    /// Runs one execution (a pending seed, else a mutant). `None` once the
    /// budget is spent.
    pub fn step(&mut self) -> Result<Option<ExecOutcome>, Error> {
        if self.is_done() {
            return Ok(None);
        }
        let seeded = (self.execs as usize) < self.seeds.len();
        let (bytes, parent_id) = if seeded {
            (self.seeds[self.execs as usize].clone(), None)
        } else {
            let (parent, cursor) = select_next(&self.corpus, self.cursor);
            let parent_id = parent.id;
            let bytes = mutate(&parent.bytes, &mut self.rng);
            self.cursor = cursor;
            (bytes, Some(parent_id))
        };

        let report = self.target.execute(&bytes)?;
        let exec = self.execs;
        self.execs += 1;

        let view = filter_view(&self.config.profile, &report);
        let bugs = detect_bugs(&view);
        let hangs = detect_hangs(
            &view,
            self.config.budgets.budget_ms,
            self.config.budgets.grace_ms,
        );
        self.bugs.extend(bugs.iter().map(|b| (b.depth, b.signal)));
        self.hangs.extend(hangs.iter().map(|h| (h.depth, h.reason)));

        let classified = bucketize(&view.bitmap);
        let novelty = has_new_bits(&self.global, &classified);
        let admitted = seeded || (novelty != Novelty::None && hangs.is_empty());
        if admitted {
            merge_into(&mut self.global, &classified);
            self.corpus.push(TestCase {
                id: self.corpus.len() as u64,
                bytes,
                parent_id,
                found_at_exec: exec,
            });
        }
        Ok(Some(ExecOutcome {
            novelty,
            admitted,
            bugs: bugs.len(),
            hangs: hangs.len(),
        }))
    }

    pub fn stats(&self) -> CampaignStats {
        CampaignStats {
            execs: self.execs,
            corpus_size: self.corpus.len() as u64,
            unique_bug_findings: self.bugs.len() as u64,
            hang_findings: self.hangs.len() as u64,
            global_map: self.global.clone(),
            rng_seed: self.config.rng_seed,
        }
    }

    pub fn run(mut self) -> Result<(CampaignStats, Vec<TestCase>), Error> {
        while self.step()?.is_some() {}
        Ok((self.stats(), self.corpus))
    }
}

/// Runs a whole campaign and returns its statistics.
pub fn run_campaign<E: Executor>(
    target: E,
    seeds: Vec<Vec<u8>>,
    config: CampaignConfig,
) -> Result<CampaignStats, Error> {
    Campaign::new(target, seeds, config)?
        .run()
        .map(|(stats, _)| stats)
}

/// Writes each test case to `dir/id_XXXXXX`.
pub fn persist_corpus(corpus: &[TestCase], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    corpus
        .iter()
        .map(|tc| {
            let path = dir.join(format!("id_{:06}", tc.id));
            std::fs::write(&path, &tc.bytes)?;
            Ok(path)
        })
        .collect()
}

/// Serialized result of one campaign.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub challenge: ChallengeKind,
    pub backend: BackendKind,
    pub profile: ProfileName,
    pub budget_execs: u64,
    pub stats: CampaignStats,
}

impl CampaignReport {
    pub fn to_markdown(&self) -> String {
        let s = &self.stats;
        format!(
            "# Campaign on challenge {}\n\n\
             | backend | profile | execs | corpus | bugs | hangs | edges |\n\
             |---|---|---|---|---|---|---|\n\
             | {} | {} | {} | {} | {} | {} | {} |\n",
            self.challenge,
            self.backend,
            self.profile,
            s.execs,
            s.corpus_size,
            s.unique_bug_findings,
            s.hang_findings,
            s.global_map.count_edges()
        )
    }
}
