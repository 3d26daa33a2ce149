//! `wvsim`: runs the simulated DRM protocol end to end, manages key material
//! files, serves the license and provisioning endpoints, and reads traces.

mod commands;
mod config;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;
use wvsim_core::client::ClientError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Client(#[from] ClientError),
    #[error("{0}")]
    Protocol(String),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> CliError {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Client(ClientError::Transport { .. }) | CliError::Io { .. } => 3,
            CliError::Client(_) | CliError::Protocol(_) => 2,
            CliError::Config(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "wvsim", version, about = "Key-ladder DRM protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a fresh 128-byte keybox.
    GenKeybox {
        #[arg(long)]
        out: PathBuf,
        /// Seed for a reproducible keybox.
        #[arg(long)]
        seed: Option<u64>,
        /// Config file whose server should know this device.
        #[arg(long)]
        register: Option<PathBuf>,
    },
    /// Check a keybox file's magic and CRC.
    Validate { keybox: PathBuf },
    /// Provision (if needed), license, and decrypt a file.
    E2e {
        #[arg(long)]
        config: PathBuf,
        /// Plaintext sample; it is packaged with the configured content key.
        #[arg(long)]
        input: PathBuf,
        /// Where the decrypted bytes go.
        #[arg(long)]
        output: PathBuf,
        /// Subsample plan sidecar; defaults to `<input>.plan` when present.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Content key to package with; defaults to the first licensed key.
        #[arg(long)]
        key_id: Option<String>,
        /// Also write the encrypted package data here.
        #[arg(long)]
        encrypted: Option<PathBuf>,
    },
    /// License session plus a separate generic crypto session over a payload.
    GenericSession {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        payload: PathBuf,
    },
    /// Serve provisioning and license requests over TCP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `server.listen`; port 0 picks a free port.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Pretty-print a `.wvmsg` frame or a trace file.
    TraceDump { path: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenKeybox { out, seed, register } => commands::gen_keybox(&out, seed, register.as_deref()),
        Command::Validate { keybox } => commands::validate(&keybox),
        Command::E2e { config, input, output, plan, key_id, encrypted } => {
            let cfg = config::RunConfig::load(&config)?;
            commands::e2e(&cfg, &commands::E2eArgs { input, output, plan, key_id, encrypted })
        }
        Command::GenericSession { config, payload } => {
            commands::generic_session(&config::RunConfig::load(&config)?, &payload)
        }
        Command::Serve { config, listen } => commands::serve(&config::RunConfig::load(&config)?, listen),
        Command::TraceDump { path } => commands::trace_dump(&path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wvsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
