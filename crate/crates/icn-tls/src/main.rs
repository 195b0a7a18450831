use clap::{Parser, Subcommand, ValueEnum};
use icn_tls::cli::{cmd_eval, cmd_keys, run_demo, CliError, DemoKind, EvalConfig, KeysCommand};
use icn_tls::simnet::{EvalMode, Topology};
use std::path::PathBuf;
use std::process::ExitCode;

/// Content-oriented transport security: handshake demos, session migration,
/// middlebox interception and the first-byte latency evaluation.
#[derive(Parser)]
#[command(name = "icn-tls", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dummy,
    Middlebox,
    Direct,
}

impl From<ModeArg> for EvalMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Dummy => EvalMode::Dummy,
            ModeArg::Middlebox => EvalMode::Middlebox,
            ModeArg::Direct => EvalMode::Direct,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoArg {
    Handshake,
    Migrate,
    Intercept,
    Compromise,
}

impl From<DemoArg> for DemoKind {
    fn from(demo: DemoArg) -> Self {
        match demo {
            DemoArg::Handshake => DemoKind::Handshake,
            DemoArg::Migrate => DemoKind::Migrate,
            DemoArg::Intercept => DemoKind::Intercept,
            DemoArg::Compromise => DemoKind::Compromise,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sweep alpha and write first-byte delays (in multiples of L) as CSV.
    Eval {
        /// Subscriber-to-middlebox link latency in milliseconds.
        #[arg(long = "L", default_value_t = 1.0)]
        latency: f64,
        #[arg(long, default_value_t = 0.25)]
        alpha_min: f64,
        #[arg(long, default_value_t = 4.0)]
        alpha_max: f64,
        #[arg(long, default_value_t = 0.25)]
        alpha_step: f64,
        /// Comma-separated subset of dummy,middlebox,direct.
        #[arg(long, value_delimiter = ',', value_enum,
              default_values_t = [ModeArg::Dummy, ModeArg::Middlebox, ModeArg::Direct])]
        modes: Vec<ModeArg>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
    },
    /// Run a scripted scenario and verify its invariants (exit 0 on pass).
    Demo {
        #[arg(value_enum)]
        name: DemoArg,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Optional topology file for the handshake demo
        /// (`node <id> <role>` / `link <a> <b> <latency_ms>` lines).
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Generate key and certificate fixture files.
    Keys {
        #[command(subcommand)]
        action: KeysAction,
    },
}

#[derive(Subcommand)]
enum KeysAction {
    /// Generate a signing key pair file (usable as owner or publisher
    /// identity).
    GenOwner {
        #[arg(long)]
        id: String,
        /// Derive the key deterministically from this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Issue an owner-signed publisher certificate.
    IssueCert {
        #[arg(long)]
        owner_key: PathBuf,
        #[arg(long)]
        publisher_key: PathBuf,
        /// Authorized name prefix (repeatable), e.g. `--prefix movies/hd`.
        #[arg(long = "prefix")]
        prefixes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        not_before: u64,
        #[arg(long, default_value_t = u64::MAX / 2)]
        not_after: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn execute(cli: Cli) -> Result<Vec<String>, CliError> {
    match cli.command {
        Command::Eval {
            latency,
            alpha_min,
            alpha_max,
            alpha_step,
            modes,
            seed,
            out,
        } => cmd_eval(&EvalConfig {
            latency_ms: latency,
            alpha_min,
            alpha_max,
            alpha_step,
            modes: modes.into_iter().map(EvalMode::from).collect(),
            seed,
            out,
        }),
        Command::Demo { name, seed, topology } => {
            let parsed = match topology {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        CliError::Usage(format!("cannot read {}: {e}", path.display()))
                    })?;
                    Some(Topology::parse(&text).map_err(|e| CliError::Usage(e.to_string()))?)
                }
                None => None,
            };
            run_demo(name.into(), seed, parsed.as_ref())
        }
        Command::Keys { action } => cmd_keys(match action {
            KeysAction::GenOwner { id, seed, out, force } => KeysCommand::GenOwner {
                id,
                seed,
                out,
                force,
            },
            KeysAction::IssueCert {
                owner_key,
                publisher_key,
                prefixes,
                not_before,
                not_after,
                out,
                force,
            } => KeysCommand::IssueCert {
                owner_key,
                publisher_key,
                prefixes,
                not_before,
                not_after,
                out,
                force,
            },
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
