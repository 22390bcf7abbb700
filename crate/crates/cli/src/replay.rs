//! The `replay` command: feed a message trace through a conversation manager
//! and report what each message did.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use acre_core::repository::Location;
use acre_core::{ConversationManager, EngineEvent, Registry, SnapshotRow};
use anyhow::{bail, Context, Result};

use crate::output::{event_json_line, render_table, Clock};
use crate::trace::parse_trace;
use crate::{EXIT_INVALID, EXIT_OK};

pub struct ReplayOptions {
    pub protocols: Vec<PathBuf>,
    pub trace: PathBuf,
    pub strict: bool,
    pub fixed_ids: bool,
    pub json: bool,
    pub agent: Option<String>,
}

/// Replays the trace through one manager (the external-observer view, or one
/// agent's view with `--agent`). Returns the process exit code; hard errors
/// (unreadable inputs, malformed records) surface as `Err`.
pub fn replay(options: &ReplayOptions) -> Result<i32> {
    // With ACRE_CACHE_DIR set, previously cached protocols are recovered and
    // new loads are cached there; otherwise nothing touches the filesystem.
    let mut registry = match std::env::var_os("ACRE_CACHE_DIR") {
        Some(dir) => {
            let mut registry = Registry::new(PathBuf::from(dir));
            let recovery = registry.recover_cache();
            for warning in recovery.warnings {
                eprintln!("warning: {warning}");
            }
            registry
        }
        None => Registry::ephemeral(),
    };

    load_protocols(&mut registry, &options.protocols)?;
    if registry.is_empty() {
        bail!(
            "no protocols available: pass --protocol or point ACRE_CACHE_DIR at a populated cache"
        );
    }

    let mut manager = ConversationManager::new();
    let mut clock = if options.fixed_ids {
        Clock::fixed()
    } else {
        Clock::System
    };
    let mut strict_violations = 0usize;

    let emit = |event: &EngineEvent, clock: &mut Clock, indent: bool| {
        let timestamp = clock.next_timestamp();
        if options.json {
            println!("{}", event_json_line(event, &timestamp));
        } else if indent {
            println!("    {}", event.log_line(&timestamp));
        } else {
            println!("{}", event.log_line(&timestamp));
        }
    };

    for resolved in registry.resolved_protocols() {
        for warning in resolved.warnings() {
            eprintln!("warning: {}: {warning}", resolved.id());
        }
        let event = manager.add_protocol(Arc::clone(resolved));
        emit(&event, &mut clock, false);
    }

    let text = fs::read_to_string(&options.trace)
        .with_context(|| format!("cannot read trace {}", options.trace.display()))?;
    let records = parse_trace(&text)?;

    let mut shown = 0usize;
    for (line_no, record) in records {
        let message = record
            .to_message()
            .unwrap_or_else(|_| panic!("trace line {line_no} was validated by parse_trace"));
        if let Some(agent) = &options.agent {
            if message.sender() != agent && message.receiver() != agent {
                continue;
            }
        }
        shown += 1;
        let direction: acre_core::Direction = record.direction.into();
        if !options.json {
            println!("[{shown}] {direction} {}", message.summary());
        }
        let events = manager.ingest(message, direction);
        for event in &events {
            if matches!(
                event,
                EngineEvent::Failed { .. }
                    | EngineEvent::Unmatched { .. }
                    | EngineEvent::Ambiguous { .. }
            ) {
                strict_violations += 1;
            }
            emit(event, &mut clock, true);
        }
    }

    if !options.json {
        println!();
        println!("conversations:");
        let rows = manager.snapshot();
        if rows.is_empty() {
            println!("  (none)");
        } else {
            print_snapshot(&rows, options.agent.as_deref());
        }
    }

    if options.strict && strict_violations > 0 {
        eprintln!("strict: {strict_violations} unmatched/ambiguous/failed event(s)");
        return Ok(EXIT_INVALID);
    }
    Ok(EXIT_OK)
}

// Loads protocol files (or directories of files) with a retry loop so that
// listing order does not matter for imports.
fn load_protocols(registry: &mut Registry, args: &[PathBuf]) -> Result<()> {
    let mut files: Vec<PathBuf> = Vec::new();
    for arg in args {
        if arg.is_dir() {
            let entries = fs::read_dir(arg)
                .with_context(|| format!("cannot read protocol directory {}", arg.display()))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|ext| ext == "xml"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(arg.clone());
        }
    }

    // Retry rounds resolve files in any listing order: a file whose import
    // is satisfied by a later file loads on the next pass.
    let mut pending = files;
    loop {
        if pending.is_empty() {
            return Ok(());
        }
        let before = pending.len();
        let mut unresolved = Vec::new();
        let mut first_error = None;
        for file in pending {
            match registry.load_protocol(&Location::from(file.as_path())) {
                Ok(_) => {}
                Err(error) => {
                    if first_error.is_none() {
                        first_error = Some(format!("{}: {error}", file.display()));
                    }
                    unresolved.push(file);
                }
            }
        }
        if unresolved.len() == before {
            bail!(
                "cannot load protocols: {}",
                first_error.expect("a stuck round has at least one error")
            );
        }
        pending = unresolved;
    }
}

fn print_snapshot(rows: &[SnapshotRow], agent: Option<&str>) {
    let header_participant = if agent.is_some() {
        "COUNTERPART"
    } else {
        "PARTICIPANTS"
    };
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let who = match agent {
                Some(agent) => row.counterpart(agent).unwrap_or("-").to_string(),
                None => format!("{},{}", row.participants.0, row.participants.1),
            };
            let bindings = if row.bindings.is_empty() {
                "-".to_string()
            } else {
                row.bindings
                    .iter()
                    .map(|(name, value)| format!("{name}={value}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            vec![
                row.conversation_id.clone(),
                row.protocol_id.to_string(),
                who,
                row.current_state.clone(),
                row.status.to_string(),
                bindings,
            ]
        })
        .collect();
    let table = render_table(
        &[
            "ID",
            "PROTOCOL",
            header_participant,
            "STATE",
            "STATUS",
            "BINDINGS",
        ],
        &table_rows,
    );
    for line in table.lines() {
        println!("  {line}");
    }
}
