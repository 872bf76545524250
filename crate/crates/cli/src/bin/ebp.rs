use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ebp_cli::{
    depot_list, parse_budget, parse_hardness, parse_param, parse_size, Failure, PutArgs,
    TransformArgs,
};
use ebp_core::{Capability, Hardness, ResourceBudget};

#[derive(Parser)]
#[command(name = "ebp", version, about = "Move files through depots and run transforms")]
struct Cli {
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upload a file and write its exNode.
    Put {
        file: PathBuf,
        /// Comma-separated host:port list; defaults to $EBP_DEFAULT_DEPOTS.
        #[arg(long)]
        depots: Option<String>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value = "4MiB", value_parser = parse_size)]
        chunk: u64,
        /// Lease in seconds.
        #[arg(long, default_value_t = 3600)]
        lease: u64,
        #[arg(long, default_value = "hard", value_parser = parse_hardness)]
        tier: Hardness,
        #[arg(long, default_value_t = 4)]
        parallel: usize,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Download the file an exNode describes.
    Get {
        exnode: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        parallel: usize,
    },
    /// Show an allocation (manage capability) or every replica of an exNode.
    Stat { target: String },
    /// Extend every lease in an exNode.
    Renew {
        exnode: PathBuf,
        /// Seconds.
        #[arg(long)]
        extend: u64,
    },
    /// Run a named operation on one depot.
    Transform {
        depot: String,
        op_name: String,
        #[arg(long = "in", num_args = 0..)]
        inputs: Vec<Capability>,
        #[arg(long = "out", num_args = 1..)]
        outputs: Vec<Capability>,
        #[arg(long, value_parser = parse_budget)]
        budget: ResourceBudget,
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, String)>,
    },
    /// Policy-driven lease renewal and repair.
    Lodn {
        #[command(subcommand)]
        command: LodnCommand,
    },
}

#[derive(Subcommand)]
enum LodnCommand {
    /// Manage every exNode in a directory that has a policy file.
    Run {
        #[arg(long)]
        dir: PathBuf,
        /// Run a single round and exit.
        #[arg(long)]
        once: bool,
    },
}

fn run(cli: Cli) -> Result<Option<String>, Failure> {
    let json = cli.json;
    let out = match cli.command {
        Command::Put {
            file,
            depots,
            k,
            chunk,
            lease,
            tier,
            parallel,
            output,
        } => ebp_cli::put(
            PutArgs {
                file: &file,
                depots: depot_list(depots.as_deref())?,
                replicas: k,
                chunk,
                lease,
                hardness: tier,
                parallel,
                output,
            },
            json,
        )?,
        Command::Get {
            exnode,
            output,
            parallel,
        } => ebp_cli::get(&exnode, &output, parallel, json)?,
        Command::Stat { target } => ebp_cli::stat(&target, json)?,
        Command::Renew { exnode, extend } => ebp_cli::renew(&exnode, extend, json)?,
        Command::Transform {
            depot,
            op_name,
            inputs,
            outputs,
            budget,
            params,
        } => ebp_cli::transform(
            TransformArgs {
                depot,
                op_name,
                inputs,
                outputs,
                budget,
                params: params.into_iter().collect::<BTreeMap<_, _>>(),
            },
            json,
        )?,
        Command::Lodn {
            command: LodnCommand::Run { dir, once },
        } => {
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
                .map_err(|e| Failure::op("Io", e))?;
            ebp_cli::lodn_run(&dir, once, &stop)?;
            return Ok(None);
        }
    };
    Ok(Some(out))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(Some(out)) => println!("{out}"),
        Ok(None) => {}
        Err(e) => {
            eprintln!("ebp: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
