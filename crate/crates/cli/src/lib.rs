//! `policyscope` command-line driver.
//!
//! Results go to files (or stdout for `eval`); progress and errors go to
//! stderr. Exit status is 0 on success, 2 for usage errors and 3 for
//! failures at run time.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use policyscope::envs::make_env;
use policyscope::inference::{evaluate_posterior, run_discover, DiscoverConfig, RoundRecord};
use policyscope::rng::stream;
use policyscope::selection::{run_selection_experiment, BeliefDraw, SelectionConfig};
use policyscope::store::{
    load_certificate, load_config, pairgrid, save_certificate, write_pairgrid_csv,
    write_samples_csv,
};
use policyscope::{Error, PosteriorCertificate};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable consulted when `--seed` is absent.
pub const SEED_VAR: &str = "POLICYSCOPE_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "policyscope",
    version,
    about = "Fit and use reward-conditioned posteriors over simulator conditions"
)]
struct Cli {
    /// Worker threads for rollouts and selection trials.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a certificate for one policy on one environment.
    Fit(FitArgs),
    /// Draw posterior samples in original units.
    Sample(SampleArgs),
    /// Score posterior samples with the environment's noise-free oracle.
    Eval(EvalArgs),
    /// Compare learned task selection against random and fixed choices.
    Select(SelectArgs),
    /// Histogram and pairwise density grids of posterior samples.
    Pairgrid(PairgridArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    env: String,
    #[arg(long)]
    policy: String,
    /// TOML file of run settings; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Write per-round JSON lines here instead of stderr.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    cert: PathBuf,
    #[arg(short = 'n', long = "count")]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    cert: PathBuf,
    #[arg(short = 'n', long = "count")]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Comma-separated certificate files, one per policy.
    #[arg(long, value_delimiter = ',', required = true)]
    certs: Vec<PathBuf>,
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 1000)]
    beliefs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Variance of each trial's belief around its sampled mean.
    #[arg(long, default_value_t = 0.01, conflicts_with = "fixed_belief")]
    belief_variance: f64,
    /// Use the wide belief itself in every trial.
    #[arg(long)]
    fixed_belief: bool,
    /// Monte-Carlo samples per certificate score.
    #[arg(long, default_value_t = policyscope::selection::DEFAULT_SCORE_SAMPLES)]
    score_samples: usize,
    /// Also write the per-trial choices.
    #[arg(long)]
    choices: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PairgridArgs {
    #[arg(long)]
    cert: PathBuf,
    #[arg(short = 'n', long = "count")]
    n: usize,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownEnv(_) | Error::UnknownPolicy { .. } => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn resolve_seed(flag: Option<u64>) -> std::result::Result<Option<u64>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn create(path: &Path) -> std::result::Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> std::result::Result<PosteriorCertificate, Failure> {
    load_certificate(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn fit(args: FitArgs) -> Outcome {
    let env = make_env(&args.env)?;
    env.spec().check_policy(&args.policy)?;
    let mut config = match &args.config {
        Some(p) => load_config(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => DiscoverConfig::default(),
    };
    if let Some(seed) = resolve_seed(args.seed)? {
        config.seed = seed;
    }
    let mut sink: Box<dyn Write> = match &args.diagnostics {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stderr()),
    };
    let mut write_err: Option<io::Error> = None;
    let mut observer = |r: &RoundRecord| {
        let line = serde_json::to_string(r).expect("records serialize");
        if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
            write_err.get_or_insert(e);
        }
    };
    let cert = run_discover(env.as_ref(), &args.policy, &config, &mut observer)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if !cert.complete {
        eprintln!(
            "warning: training stopped after round {}; certificate is incomplete",
            cert.history.len()
        );
    }
    save_certificate(&cert, &args.out)?;
    Ok(())
}

fn sample(args: SampleArgs) -> Outcome {
    let cert = load(&args.cert)?;
    let seed = resolve_seed(args.seed)?.unwrap_or(0);
    let xs = cert.sample_bounded(args.n, &mut stream(seed, &[]))?;
    write_samples_csv(&cert.spec, &xs, create(&args.out)?)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let cert = load(&args.cert)?;
    let env = make_env(&cert.env_id)?;
    let seed = resolve_seed(args.seed)?.unwrap_or(0);
    let metrics = evaluate_posterior(&cert, env.as_ref(), &cert.policy_id, args.n, seed)?;
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    match &args.out {
        Some(p) => writeln!(create(p)?, "{text}")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn select(args: SelectArgs) -> Outcome {
    let env = make_env(&args.env)?;
    let certs = args
        .certs
        .iter()
        .map(|p| load(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let config = SelectionConfig {
        n_beliefs: args.beliefs,
        beliefs: if args.fixed_belief {
            BeliefDraw::Fixed
        } else {
            BeliefDraw::Sampled {
                variance: args.belief_variance,
            }
        },
        n_samples: args.score_samples,
        seed: resolve_seed(args.seed)?.unwrap_or(0),
        ..SelectionConfig::default()
    };
    let result = run_selection_experiment(&certs, env.as_ref(), &config)?;
    result.write_csv(create(&args.out)?)?;
    if let Some(p) = &args.choices {
        result.write_choices_csv(create(p)?)?;
    }
    Ok(())
}

fn grid(args: PairgridArgs) -> Outcome {
    let cert = load(&args.cert)?;
    let seed = resolve_seed(args.seed)?.unwrap_or(0);
    let xs = cert.sample_bounded(args.n, &mut stream(seed, &[]))?;
    let cells = pairgrid(&cert.spec, &xs, args.bins)?;
    write_pairgrid_csv(&cells, create(&args.out)?)?;
    Ok(())
}

/// Parse `argv` (program name first) and run the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let outcome = pool.install(|| match cli.command {
        Command::Fit(a) => fit(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Select(a) => select(a),
        Command::Pairgrid(a) => grid(a),
    });
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let _ = Cli::command().write_long_help(&mut io::stderr());
            EXIT_USAGE
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
