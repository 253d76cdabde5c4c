use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cachetrap::cli::{self, CommandOutcome, Session};
use cachetrap::{Error, Result};

/// Single-bit KV-cache Trojan search and evaluation.
///
/// Any config key can be overridden with a dotted flag, e.g. `--search.k 16`
/// or `--feasibility.arena_base=4096`; values are parsed as JSON when they
/// parse, else taken as strings.
#[derive(Parser)]
#[command(name = "cachetrap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Search seed (overrides `search.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Layer sensitivity scores and the selected layer subset.
    Lss(Common),
    /// Full search; writes the corruption map and ASR matrix.
    Search(Common),
    /// Trigger and no-trigger evaluation on the victim set.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        target_class: Option<usize>,
    },
    /// Hardware feasibility filtering of a corruption map.
    Feasible {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        map: PathBuf,
    },
    /// Exhaustive ASR over a scope: `candidates`, `full`, or
    /// `layers=0-1;heads=0;channels=0,3;bits=14`.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "candidates")]
        scope: String,
    },
    /// Compare engine logits with a reference-logit fixture.
    FixtureCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixture: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write a ready-to-run demo config with disjoint probe sets.
    DemoFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
}

/// Top-level config keys, overridable as flags without a dot.
const CONFIG_KEYS: &[&str] = &[
    "model",
    "calibration_path",
    "victim_path",
    "tokenizer",
    "verbalizer_path",
    "search",
    "feasibility",
    "output_dir",
];

fn is_override(flag: &str) -> bool {
    let key = flag.split('=').next().unwrap_or_default();
    key.contains('.') || CONFIG_KEYS.contains(&key)
}

/// Pulls `--a.b value` / `--a.b=value` pairs (and top-level config keys) out
/// of argv; clap sees the rest.
type Split = (Vec<String>, Vec<(String, String)>);

fn split_overrides(args: Vec<String>) -> std::result::Result<Split, String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--").filter(|f| is_override(f)) else {
            rest.push(arg);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("override --{flag} needs a value"))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn open(common: &Common, mut overrides: Vec<(String, String)>) -> Result<Session> {
    if let Some(seed) = common.seed {
        overrides.push(("search.seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        // Relative to the working directory, not the config file.
        let out = std::env::current_dir()?.join(out);
        overrides.push(("output_dir".into(), serde_json::to_string(&out)?));
    }
    Session::open(cli::load_config(&common.config, &overrides)?)
}

fn run(command: Command, overrides: Vec<(String, String)>) -> Result<CommandOutcome> {
    match command {
        Command::Lss(c) => cli::cmd_lss(&open(&c, overrides)?),
        Command::Search(c) => cli::cmd_search(&open(&c, overrides)?),
        Command::AttackEval {
            common,
            map,
            target_class,
        } => cli::cmd_attack_eval(&open(&common, overrides)?, &map, target_class),
        Command::Feasible { common, map } => cli::cmd_feasible(&open(&common, overrides)?, &map),
        Command::Oracle { common, scope } => cli::cmd_oracle(&open(&common, overrides)?, &scope),
        Command::FixtureCheck {
            common,
            fixture,
            tolerance,
        } => cli::cmd_fixture_check(&open(&common, overrides)?, &fixture, tolerance),
        Command::DemoFixtures { out, samples } => {
            if !overrides.is_empty() {
                return Err(Error::Config("demo-fixtures takes no config overrides".into()));
            }
            cli::cmd_demo_fixtures(&out, samples)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("CACHETRAP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("CACHETRAP_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(cli::EXIT_INPUT as u8);
        }
    };
    let parsed = Cli::parse_from(args);
    let result = configure_threads().and_then(|()| run(parsed.command, overrides));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for r in &outcome.reports {
                println!("wrote {}", r.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
