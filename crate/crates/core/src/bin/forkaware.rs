use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use forkaware::challenge::{write_reference_sources, ChallengeBinaries, ChallengeError, LoopIn};
use forkaware::detect::Budgets;
use forkaware::exec::Executor;
use forkaware::fuzz::{persist_corpus, Campaign, CampaignConfig, CampaignReport};
use forkaware::scorecard::{
    evaluate, render, ChallengeSource, EvalConfig, Format, Scorecard, SCHEMA_VERSION,
};
use forkaware::sim::{SimExecutor, SimPolicy};
use forkaware::tracer::{probe_support, RealExecutor, SpawnSpec, TraceError};
use forkaware::{BackendKind, ChallengeKind, ChallengeParams, Error, ProfileName};

#[derive(Parser)]
#[command(
    name = "forkaware",
    version,
    about = "Fork-aware execution monitor and fuzzing harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evaluation matrix and print the scorecard.
    Score(ScoreArgs),
    /// Run a coverage-guided campaign against one challenge.
    Fuzz(FuzzArgs),
    /// Write the reference challenge sources.
    Gen(GenArgs),
    /// Re-render a stored JSON scorecard or campaign report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Sim,
    Real,
    Both,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => Format::Json,
            FormatArg::Markdown => Format::Markdown,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Comma-separated monitor profiles [score: all; fuzz: fork_aware].
    #[arg(long, value_delimiter = ',')]
    profiles: Option<Vec<ProfileName>>,
    /// Comma-separated challenges [score, gen: all; fuzz: C].
    #[arg(long, value_delimiter = ',')]
    challenges: Option<Vec<ChallengeKind>>,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    #[arg(long, default_value_t = 1000)]
    budget_ms: u64,
    #[arg(long, default_value_t = 100)]
    grace_ms: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prebuilt challenge binaries; built from the bundled sources otherwise.
    #[arg(long)]
    challenge_dir: Option<PathBuf>,
}

impl Common {
    fn profiles_or(&self, default: &[ProfileName]) -> Vec<ProfileName> {
        self.profiles.clone().unwrap_or_else(|| default.to_vec())
    }

    fn challenges_or(&self, default: &[ChallengeKind]) -> Vec<ChallengeKind> {
        self.challenges.clone().unwrap_or_else(|| default.to_vec())
    }

    fn budgets(&self) -> Budgets {
        Budgets {
            budget_ms: self.budget_ms,
            grace_ms: self.grace_ms,
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Executions per (challenge, backend) pair.
    #[arg(long, default_value_t = 3)]
    reps: u32,
}

#[derive(Args)]
struct FuzzArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 500)]
    budget_execs: u64,
    /// Seed input as hex; repeatable.
    #[arg(long = "seed-input", value_parser = parse_hex)]
    seed_inputs: Vec<Vec<u8>>,
    /// Persist the final corpus here.
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    fork_depth: u32,
    #[arg(long, default_value_t = 4)]
    conditionals: u32,
    #[arg(long, value_enum, default_value = "child")]
    loop_in: LoopInArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum LoopInArg {
    Child,
    Grandchild,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored JSON produced by `score` or `fuzz`.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "markdown")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_hex(s: &str) -> Result<Vec<u8>, String> {
    if s.is_empty() || !s.len().is_multiple_of(2) {
        return Err("expected an even number of hex digits".into());
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| e.to_string()))
        .collect()
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn challenge_source(dir: &Option<PathBuf>) -> ChallengeSource {
    dir.clone()
        .map_or(ChallengeSource::Build, ChallengeSource::Dir)
}

fn score(args: ScoreArgs) -> Result<ExitCode, Error> {
    let c = &args.common;
    let backends = match c.backend {
        BackendArg::Sim => vec![BackendKind::Sim],
        BackendArg::Real => vec![BackendKind::Real],
        BackendArg::Both => vec![BackendKind::Sim, BackendKind::Real],
    };
    let card = evaluate(&EvalConfig {
        profiles: c.profiles_or(&ProfileName::ALL),
        challenges: c.challenges_or(&ChallengeKind::ALL),
        backends,
        budgets: c.budgets(),
        reps: args.reps,
        seed: c.seed,
        challenge_source: challenge_source(&c.challenge_dir),
    })?;
    emit(&render(&card, c.format.into()), c.out.as_deref())?;
    Ok(if card.fork_aware_failed() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn fuzz(args: FuzzArgs) -> Result<ExitCode, Error> {
    let c = &args.common;
    let [challenge] = c.challenges_or(&[ChallengeKind::C])[..] else {
        return Err(Error::Precondition(
            "fuzz takes exactly one challenge".into(),
        ));
    };
    let [profile] = c.profiles_or(&[ProfileName::ForkAware])[..] else {
        return Err(Error::Precondition("fuzz takes exactly one profile".into()));
    };
    let params = ChallengeParams::canonical(challenge);
    let seeds = if args.seed_inputs.is_empty() {
        vec![vec![0; params.conditionals as usize]]
    } else {
        args.seed_inputs.clone()
    };
    let config = CampaignConfig {
        budget_execs: args.budget_execs,
        rng_seed: c.seed,
        profile: profile.profile(),
        budgets: c.budgets(),
    };

    let mut backend = match c.backend {
        BackendArg::Sim => BackendKind::Sim,
        BackendArg::Real => BackendKind::Real,
        BackendArg::Both => {
            return Err(Error::Precondition("fuzz runs on a single backend".into()))
        }
    };
    if backend == BackendKind::Real {
        if let Err(e @ TraceError::TraceUnsupported(_)) = probe_support() {
            warn!("{e}; falling back to the simulated backend");
            backend = BackendKind::Sim;
        }
    }

    let _build_dir;
    let target: Box<dyn Executor> = match backend {
        BackendKind::Sim => Box::new(SimExecutor::challenge(
            &params,
            SimPolicy {
                deadline_ms: c.budget_ms,
            },
        )?),
        BackendKind::Real => {
            let bins = match &c.challenge_dir {
                Some(dir) => ChallengeBinaries::locate(dir)?,
                None => {
                    let dir = tempfile::tempdir()?;
                    let bins = ChallengeBinaries::build(dir.path())?;
                    _build_dir = dir;
                    bins
                }
            };
            let mut spec = SpawnSpec::new(bins.path(challenge));
            spec.budget_ms = c.budget_ms;
            spec.grace_ms = c.grace_ms;
            Box::new(RealExecutor::new(spec)?)
        }
    };

    let (stats, corpus) = Campaign::new(target, seeds, config)?.run()?;
    if let Some(dir) = &args.corpus_dir {
        persist_corpus(&corpus, dir)?;
    }
    let report = CampaignReport {
        schema_version: SCHEMA_VERSION,
        challenge,
        backend,
        profile,
        budget_execs: args.budget_execs,
        stats,
    };
    let text = match c.format {
        FormatArg::Json => serde_json::to_string_pretty(&report)? + "\n",
        FormatArg::Markdown => report.to_markdown(),
    };
    emit(&text, c.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn gen(args: GenArgs) -> Result<ExitCode, Error> {
    let Some(out) = &args.common.out else {
        return Err(Error::Precondition("gen needs --out <dir>".into()));
    };
    for kind in args.common.challenges_or(&ChallengeKind::ALL) {
        let params = ChallengeParams {
            kind,
            fork_depth: args.fork_depth,
            conditionals: args.conditionals,
            loop_in: match args.loop_in {
                LoopInArg::Child => LoopIn::Child,
                LoopInArg::Grandchild => LoopIn::Grandchild,
            },
        };
        params.validate()?;
        if !params.is_canonical() {
            return Err(ChallengeError::InvalidParams(
                "only the canonical challenges ship reference sources".into(),
            )
            .into());
        }
    }
    for path in write_reference_sources(out)? {
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn report(args: ReportArgs) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&args.input)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let rendered = if value.get("rows").is_some() {
        render(&Scorecard::from_json(&text)?, args.format.into())
    } else {
        let report: CampaignReport = serde_json::from_value(value)?;
        match args.format {
            FormatArg::Json => serde_json::to_string_pretty(&report)? + "\n",
            FormatArg::Markdown => report.to_markdown(),
        }
    };
    emit(&rendered, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score(a) => score(a),
        Command::Fuzz(a) => fuzz(a),
        Command::Gen(a) => gen(a),
        Command::Report(a) => report(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
