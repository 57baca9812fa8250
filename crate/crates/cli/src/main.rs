//! `enav`: check specifications, import logger data, run the evaluation
//! pipeline and render reports over a workspace directory.
//!
//! Exit codes: 0 success, 1 problems with the inputs (specification,
//! mapping, data, references), 2 environment failures (I/O, lock).

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::Utc;
use clap::{Parser, Subcommand};
use enav::ingest::format_timestamp;
use enav::workspace::{parse_instant, Workspace, WorkspaceError};

#[derive(Parser)]
#[command(name = "enav", version, about = "Continuous commissioning against an active functional specification")]
struct Cli {
    /// Workspace directory.
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    /// Config file; defaults to `<workspace>/config.json` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, resolve and type-check specification files (default: spec/*.afs).
    Check { paths: Vec<PathBuf> },
    /// Import a `timestamp,point,value` CSV into the raw store.
    Import {
        file: PathBuf,
        /// Point mapping JSON; without it points map to declared sensors by name.
        #[arg(long)]
        map: Option<PathBuf>,
        /// The file holds `timestamp,point,label` mode markers.
        #[arg(long)]
        markers: bool,
    },
    /// Preprocess, evaluate, update tickets, metrics and summaries.
    Run {
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        /// Print every sub-expression series of this artifact as CSV.
        #[arg(long)]
        explain: Option<String>,
    },
    /// Render a report from reports/<id>/template.json.
    Report {
        id: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
    },
    /// Attach a comment to a report section.
    Comment {
        report: String,
        section: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        author: Option<String>,
    },
    /// Dump a stored series as CSV.
    Export {
        sensor: String,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        /// Export imported raw points instead of the grid series.
        #[arg(long)]
        raw: bool,
    },
    /// Acknowledge a ticket.
    Ack { ticket: String },
}

fn fail(e: WorkspaceError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn range(ws: &Workspace, from: &str, to: &str) -> Result<(i64, i64), WorkspaceError> {
    let parse = |s: &str| {
        parse_instant(s, ws.tz()).ok_or_else(|| WorkspaceError::Invalid(format!("cannot parse time `{s}` (use RFC 3339 or YYYY-MM-DD)")))
    };
    Ok((parse(from)?, parse(to)?))
}

fn run(cli: Cli) -> Result<ExitCode, WorkspaceError> {
    let ws = Workspace::open(&cli.workspace, cli.config.as_deref())?;
    match cli.command {
        Command::Check { paths } => {
            let spec = ws.load_spec(&paths)?;
            for d in &spec.diagnostics {
                eprintln!("{d}");
            }
            Ok(if spec.has_errors() { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Import { file, map, markers } => {
            let r = ws.import(&file, map.as_deref(), markers)?;
            for d in &r.diagnostics {
                eprintln!("{}:{}: rejected `{}`: {}", file.display(), d.line, d.point, d.reason);
            }
            for (p, n) in &r.skipped_points {
                eprintln!("{}: skipped {n} rows of unmapped point `{p}`", file.display());
            }
            println!("{} rows: {} accepted, {} rejected, {} skipped", r.total, r.accepted, r.rejected, r.skipped);
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { from, to, explain } => {
            let (from, to) = range(&ws, &from, &to)?;
            let out = ws.run(from, to, explain.as_deref())?;
            for d in &out.diagnostics {
                eprintln!("{d}");
            }
            if let Some(csv) = &out.explain {
                print!("{csv}");
            } else {
                let open = out.tickets.iter().filter(|t| t.is_active()).count();
                println!(
                    "evaluated {} artifacts, {} metrics; {} tickets ({} open)",
                    out.evaluated.len(),
                    out.metrics.len(),
                    out.tickets.len(),
                    open
                );
            }
            Ok(if out.failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Command::Report { id, from, to } => {
            let (from, to) = range(&ws, &from, &to)?;
            let path = ws.report(&id, from, to)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Comment { report, section, text, author } => {
            let author = author
                .or_else(|| std::env::var("USER").ok())
                .unwrap_or_else(|| "anonymous".into());
            ws.comment(&report, &section, &author, &text, Utc::now().timestamp())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { sensor, from, to, raw } => {
            let (from, to) = range(&ws, &from, &to)?;
            print!("{}", ws.export(&sensor, from, to, raw)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Ack { ticket } => {
            let t = ws.acknowledge(&ticket)?;
            println!("{} {:?} since {}", t.id, t.state, format_timestamp(t.updated));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    run(Cli::parse()).unwrap_or_else(fail)
}
