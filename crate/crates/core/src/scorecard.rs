//! Evaluation matrix: profiles × challenges × backends, scored into a
//! versioned scorecard that renders as JSON or as a markdown table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::challenge::{ChallengeBinaries, ChallengeKind, ChallengeParams};
use crate::detect::{score, Budgets, ChallengeRun, ProfileName, Verdicts};
use crate::exec::{BackendKind, ExecutionReport, Executor};
use crate::process::Pid;
use crate::sim::{SimExecutor, SimPolicy};
use crate::tracer::{probe_support, RealExecutor, SpawnSpec};
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REPS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub profile: ProfileName,
    pub challenge: ChallengeKind,
    pub backend: BackendKind,
    pub verdicts: Verdicts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool_version: String,
    pub host: String,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
    pub budgets: Budgets,
    pub reps: u32,
    pub seed: u64,
    /// Pids found alive after teardown across the whole matrix.
    #[serde(default)]
    pub leaked_pids: Vec<Pid>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scorecard {
    pub schema_version: u32,
    pub rows: Vec<ScoreRow>,
    pub metadata: Metadata,
}

impl Scorecard {
    pub fn empty(budgets: Budgets) -> Self {
        let now = unix_now();
        Scorecard {
            schema_version: SCHEMA_VERSION,
            rows: Vec::new(),
            metadata: Metadata {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                host: hostname(),
                started_at_unix: now,
                finished_at_unix: now,
                budgets,
                reps: DEFAULT_REPS,
                seed: 0,
                leaked_pids: Vec::new(),
            },
        }
    }

    /// Verdicts of one profile on one backend, combined across challenges.
    pub fn combined(&self, profile: ProfileName, backend: BackendKind) -> Verdicts {
        self.rows
            .iter()
            .filter(|r| r.profile == profile && r.backend == backend && r.skipped.is_none())
            .fold(Verdicts::default(), |acc, r| acc.combine(r.verdicts))
    }

    /// Scored rows whose verdicts differ from their profile's expected pattern.
    pub fn mismatches(&self) -> Vec<&ScoreRow> {
        self.rows
            .iter()
            .filter(|r| r.skipped.is_none() && !r.verdicts.matches(r.profile.expected()))
            .collect()
    }

    /// Whether any scored fork_aware row misses a criterion.
    pub fn fork_aware_failed(&self) -> bool {
        self.rows.iter().any(|r| {
            r.profile == ProfileName::ForkAware
                && r.skipped.is_none()
                && r.verdicts.as_array().contains(&Some(false))
        })
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        let card: Scorecard = serde_json::from_str(s)?;
        if card.schema_version != SCHEMA_VERSION {
            return Err(Error::Precondition(format!(
                "unsupported schema_version {}",
                card.schema_version
            )));
        }
        Ok(card)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hostname() -> String {
    nix::unistd::gethostname()
        .ok()
        .and_then(|h| h.into_string().ok())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Where the real backend gets its challenge binaries.
#[derive(Debug, Clone, Default)]
pub enum ChallengeSource {
    /// Compile the bundled reference sources into a temp directory.
    #[default]
    Build,
    /// Prebuilt `challenge_a`, `challenge_b`, `challenge_c` in this directory.
    Dir(PathBuf),
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub profiles: Vec<ProfileName>,
    pub challenges: Vec<ChallengeKind>,
    pub backends: Vec<BackendKind>,
    pub budgets: Budgets,
    pub reps: u32,
    pub seed: u64,
    pub challenge_source: ChallengeSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            profiles: ProfileName::ALL.to_vec(),
            challenges: ChallengeKind::ALL.to_vec(),
            backends: vec![BackendKind::Sim],
            budgets: Budgets::default(),
            reps: DEFAULT_REPS,
            seed: 0,
            challenge_source: ChallengeSource::Build,
        }
    }
}

/// Executes every input of `params` `reps` times.
fn collect_runs<E: Executor>(
    target: &mut E,
    params: &ChallengeParams,
    reps: u32,
) -> Result<Vec<ExecutionReport>, Error> {
    let inputs = params.parity_inputs();
    let mut reports = Vec::with_capacity(inputs.len() * reps as usize);
    for _ in 0..reps {
        for input in &inputs {
            reports.push(target.execute(input)?);
        }
    }
    Ok(reports)
}

/// Runs the evaluation matrix. Each (challenge, backend) pair is executed
/// once per repetition and every profile is applied to the same reports.
pub fn evaluate(config: &EvalConfig) -> Result<Scorecard, Error> {
    if config.profiles.is_empty() || config.challenges.is_empty() || config.backends.is_empty() {
        return Err(Error::Precondition(
            "profiles, challenges and backends must each be nonempty".into(),
        ));
    }
    if config.reps == 0 {
        return Err(Error::Precondition("reps must be ≥ 1".into()));
    }
    let mut card = Scorecard::empty(config.budgets);
    card.metadata.reps = config.reps;
    card.metadata.seed = config.seed;

    for &backend in &config.backends {
        let mut runs: BTreeMap<ChallengeKind, Result<ChallengeRun, String>> = BTreeMap::new();
        match backend {
            BackendKind::Sim => {
                let policy = SimPolicy {
                    deadline_ms: config.budgets.budget_ms,
                };
                for &kind in &config.challenges {
                    let params = ChallengeParams::canonical(kind);
                    let mut target = SimExecutor::challenge(&params, policy)?;
                    let reports = collect_runs(&mut target, &params, config.reps)?;
                    runs.insert(kind, Ok(ChallengeRun { params, reports }));
                }
            }
            BackendKind::Real => {
                let unavailable = probe_support().err().map(|e| e.to_string());
                let _build_dir;
                let bins = match (&unavailable, &config.challenge_source) {
                    (Some(_), _) => None,
                    (None, ChallengeSource::Dir(dir)) => Some(ChallengeBinaries::locate(dir)?),
                    (None, ChallengeSource::Build) => {
                        let dir = tempfile::tempdir()?;
                        let bins = ChallengeBinaries::build(dir.path())?;
                        _build_dir = dir;
                        Some(bins)
                    }
                };
                for &kind in &config.challenges {
                    let params = ChallengeParams::canonical(kind);
                    let run = match &bins {
                        None => Err(format!(
                            "real backend unavailable: {}",
                            unavailable.as_deref().unwrap_or("unknown")
                        )),
                        Some(bins) => {
                            let mut spec = SpawnSpec::new(bins.path(kind));
                            spec.budget_ms = config.budgets.budget_ms;
                            spec.grace_ms = config.budgets.grace_ms;
                            let mut target = RealExecutor::new(spec)?;
                            let reports = collect_runs(&mut target, &params, config.reps)?;
                            for r in &reports {
                                if let Some(t) = &r.teardown {
                                    card.metadata.leaked_pids.extend(&t.leaked);
                                }
                            }
                            Ok(ChallengeRun { params, reports })
                        }
                    };
                    if let Err(reason) = &run {
                        warn!("skipping {kind} on real backend: {reason}");
                    }
                    runs.insert(kind, run);
                }
            }
        }

        for &profile in &config.profiles {
            for &kind in &config.challenges {
                let row = match &runs[&kind] {
                    Ok(run) => ScoreRow {
                        profile,
                        challenge: kind,
                        backend,
                        verdicts: score(&profile.profile(), kind, run, &config.budgets)?,
                        skipped: None,
                    },
                    Err(reason) => ScoreRow {
                        profile,
                        challenge: kind,
                        backend,
                        verdicts: Verdicts::default(),
                        skipped: Some(reason.clone()),
                    },
                };
                info!("{profile} {kind} {backend}: {:?}", row.verdicts.as_array());
                card.rows.push(row);
            }
        }
    }
    card.metadata.finished_at_unix = unix_now();
    Ok(card)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Markdown,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "markdown" | "md" => Ok(Format::Markdown),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

fn cell(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "✓",
        Some(false) => "✗",
        None => "–",
    }
}

pub fn render(card: &Scorecard, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(card).expect("scorecard serializes");
            s.push('\n');
            s
        }
        Format::Markdown => render_markdown(card),
    }
}

fn render_markdown(card: &Scorecard) -> String {
    let mut out = String::new();
    let m = &card.metadata;
    let _ = writeln!(
        out,
        "# Fork-awareness scorecard\n\nforkaware {} on `{}`, budget {} ms, grace {} ms, {} rep(s)\n",
        m.tool_version, m.host, m.budgets.budget_ms, m.budgets.grace_ms, m.reps
    );
    out.push_str("| profile | challenge | backend | C1 | C2 | C3 | note |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in &card.rows {
        let [c1, c2, c3] = r.verdicts.as_array();
        let note = match &r.skipped {
            Some(reason) => format!("skipped: {}", reason.replace('|', "/")),
            None => String::new(),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.profile,
            r.challenge,
            r.backend,
            cell(c1),
            cell(c2),
            cell(c3),
            note
        );
    }
    if !m.leaked_pids.is_empty() {
        let _ = writeln!(
            out,
            "\n**{} process(es) leaked after teardown**",
            m.leaked_pids.len()
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_profile_list_is_rejected() {
        let config = EvalConfig {
            profiles: vec![],
            ..EvalConfig::default()
        };
        assert!(matches!(evaluate(&config), Err(Error::Precondition(_))));
    }

    #[test]
    fn empty_scorecard_renders() {
        let card = Scorecard::empty(Budgets::default());
        let json = render(&card, Format::Json);
        assert_eq!(Scorecard::from_json(&json).unwrap(), card);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["rows"].as_array().unwrap().len(), 0);
        let md = render(&card, Format::Markdown);
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 1);
    }

    #[test]
    fn sim_matrix_has_nine_rows() {
        let card = evaluate(&EvalConfig::default()).unwrap();
        assert_eq!(card.rows.len(), 9);
        assert!(card.mismatches().is_empty());
        assert!(!card.fork_aware_failed());
        let md = render(&card, Format::Markdown);
        assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 10);
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let mut card = Scorecard::empty(Budgets::default());
        card.schema_version = 2;
        assert!(Scorecard::from_json(&render(&card, Format::Json)).is_err());
    }
}
