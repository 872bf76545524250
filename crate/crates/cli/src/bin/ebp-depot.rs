use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Parser, Subcommand};
use ebp_cli::DEPOT_CONFIG_ENV;
use ebp_core::{DepotConfig, DepotServer};

#[derive(Parser)]
#[command(name = "ebp-depot", version, about = "Run a depot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve until interrupted.
    Serve {
        /// JSON config file; defaults to $EBP_DEPOT_CONFIG, then built-in defaults.
        #[arg(long, env = DEPOT_CONFIG_ENV)]
        config: Option<PathBuf>,
        /// Overrides the config's listen_addr.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let Command::Serve { config, listen } = Cli::parse().command;
    let mut config = match config {
        Some(path) => match DepotConfig::load(&path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("ebp-depot: InvalidArgument: {e}");
                std::process::exit(2);
            }
        },
        None => DepotConfig::default(),
    };
    if let Some(addr) = listen {
        config.listen_addr = addr;
    }
    let server = match DepotServer::start(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("ebp-depot: {e}");
            std::process::exit(1);
        }
    };
    println!("listening on {}", server.addr_string());
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        eprintln!("ebp-depot: cannot install signal handler: {e}");
        std::process::exit(1);
    }
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(50));
    }
    log::info!("shutting down");
    server.shutdown();
}
