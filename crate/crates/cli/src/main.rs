//! `acre`: validate and describe protocol definitions, export FSM diagrams,
//! and replay message traces through a conversation manager.

mod inspect;
mod output;
mod replay;
mod trace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub(crate) const EXIT_OK: i32 = 0;
pub(crate) const EXIT_INVALID: i32 = 1;
pub(crate) const EXIT_IO: i32 = 2;

#[derive(Parser)]
#[command(
    name = "acre",
    version,
    about = "Interaction protocol validation, inspection and conversation trace replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and resolve protocol definition files; exit 0 only if all are valid.
    Validate {
        /// Protocol definition files to check.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Directory (or file) searched for imported protocols; repeatable.
        #[arg(long = "import-path", value_name = "DIR")]
        import_path: Vec<PathBuf>,
    },
    /// Print a protocol's identity, states, transitions and imports.
    Describe {
        file: PathBuf,
        /// Directory (or file) searched for imported protocols; repeatable.
        #[arg(long = "import-path", value_name = "DIR")]
        import_path: Vec<PathBuf>,
    },
    /// Write the protocol state machine as Graphviz DOT.
    #[command(name = "export-dot")]
    ExportDot {
        file: PathBuf,
        /// Output path for the DOT text.
        #[arg(short, long, value_name = "OUT")]
        output: PathBuf,
        /// Merge the import closure into the exported machine.
        #[arg(long)]
        resolve: bool,
        /// Directory (or file) searched for imported protocols; repeatable.
        #[arg(long = "import-path", value_name = "DIR")]
        import_path: Vec<PathBuf>,
    },
    /// Replay a JSON-lines message trace through a conversation manager.
    Replay {
        /// Protocol definition file or directory of files; repeatable. May be
        /// omitted when ACRE_CACHE_DIR points at a populated cache.
        #[arg(short = 'p', long = "protocol", value_name = "FILE|DIR")]
        protocols: Vec<PathBuf>,
        /// Trace file, one JSON message record per line.
        #[arg(short = 't', long = "trace", value_name = "FILE")]
        trace: PathBuf,
        /// Exit 1 if any message goes unmatched, is ambiguous or fails a conversation.
        #[arg(long)]
        strict: bool,
        /// Identifier mode; `fixed` makes output byte-reproducible.
        #[arg(long, value_enum, value_name = "MODE")]
        ids: Option<IdsMode>,
        /// Emit the event log as JSON lines instead of the human report.
        #[arg(long)]
        json: bool,
        /// Replay only messages sent or received by this agent.
        #[arg(long, value_name = "NAME")]
        agent: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IdsMode {
    /// Deterministic ids and timestamps.
    Fixed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { files, import_path } => inspect::validate(&files, &import_path),
        Command::Describe { file, import_path } => inspect::describe(&file, &import_path),
        Command::ExportDot {
            file,
            output,
            resolve,
            import_path,
        } => inspect::export(&file, &output, resolve, &import_path),
        Command::Replay {
            protocols,
            trace,
            strict,
            ids,
            json,
            agent,
        } => {
            let options = replay::ReplayOptions {
                protocols,
                trace,
                strict,
                fixed_ids: matches!(ids, Some(IdsMode::Fixed)),
                json,
                agent,
            };
            match replay::replay(&options) {
                Ok(code) => code,
                Err(error) => {
                    eprintln!("error: {error:#}");
                    EXIT_IO
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
