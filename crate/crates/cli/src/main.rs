use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcl::objective::TrainingMode;
use fedcl_cli::{self as cli, Overrides};

#[derive(Parser, Debug)]
#[command(name = "fedcl", version, about = "Federated contrastive learning simulator")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training mode: cl, cl_ff or cl_ff_nm.
    #[arg(long, global = true)]
    mode: Option<TrainingMode>,
    /// Number of rounds T, overriding the config.
    #[arg(long, global = true)]
    rounds: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as an FCLD file.
    Generate,
    /// Run the federation in process.
    Simulate,
    /// Compare cl, cl_ff and cl_ff_nm over several seeds.
    Ablate {
        #[arg(long, default_value_t = 3)]
        repeats: u32,
    },
    /// Run the server role over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Run one client role over TCP.
    Client {
        #[arg(long, default_value = "127.0.0.1:7878")]
        server: String,
        #[arg(long)]
        id: u32,
        /// FCLD file with this client's samples.
        #[arg(long)]
        shard: Option<PathBuf>,
    },
    /// Check a metrics.csv file.
    ValidateMetrics { path: PathBuf },
}

fn run(cli: Cli) -> fedcl::Result<()> {
    let ov = Overrides {
        seed: cli.seed,
        rounds: cli.rounds,
        mode: cli.mode,
        out: cli.out,
    };
    let config = || cli::resolve_config(cli.config.as_deref(), &ov);
    match cli.command {
        Command::Generate => {
            let path = cli::cmd_generate(&config()?)?;
            cli::emit(&format!("{}\n", path.display()));
        }
        Command::Simulate => {
            let s = cli::cmd_simulate(&config()?)?;
            cli::emit(&format!("{}\n", serde_json::to_string_pretty(&s).expect("summary serialises")));
        }
        Command::Ablate { repeats } => {
            let s = cli::cmd_ablate(&config()?, repeats)?;
            cli::emit(&cli::format_ablation(&s));
        }
        Command::Serve { bind } => {
            let s = cli::cmd_serve(&bind, &config()?)?;
            cli::emit(&format!("{}\n", serde_json::to_string_pretty(&s).expect("summary serialises")));
        }
        Command::Client { server, id, shard } => {
            let s = cli::cmd_client(server.as_str(), &config()?, id, shard.as_deref())?;
            cli::emit(&format!(
                "client {} trained {} rounds, uploaded {} times\n",
                s.client, s.rounds_trained, s.uploads
            ));
        }
        Command::ValidateMetrics { path } => {
            let rows = cli::cmd_validate_metrics(&path)?;
            cli::emit(&format!("{}: {rows} rows ok\n", path.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_VALIDATION as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(cli::EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
