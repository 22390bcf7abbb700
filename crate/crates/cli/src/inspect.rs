//! The `validate`, `describe` and `export-dot` commands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use acre_core::protocol::ProtocolLookup;
use acre_core::{export_dot, parse_protocol, resolve, Protocol, ProtocolId, ResolvedProtocol};

use crate::output::render_table;
use crate::{EXIT_INVALID, EXIT_IO, EXIT_OK};

/// Parses every definition under the given import paths into a lookup for
/// resolving imports. Unreadable or invalid files are skipped with warnings:
/// they only matter if something imports them.
fn import_registry(paths: &[PathBuf]) -> BTreeMap<ProtocolId, Protocol> {
    let mut registry = BTreeMap::new();
    let mut files: Vec<PathBuf> = Vec::new();
    for path in paths {
        if path.is_dir() {
            match fs::read_dir(path) {
                Ok(entries) => {
                    let mut found: Vec<PathBuf> = entries
                        .filter_map(|e| e.ok())
                        .map(|e| e.path())
                        .filter(|p| p.extension().is_some_and(|ext| ext == "xml"))
                        .collect();
                    found.sort();
                    files.extend(found);
                }
                Err(error) => {
                    eprintln!(
                        "warning: cannot read import path {}: {error}",
                        path.display()
                    )
                }
            }
        } else {
            files.push(path.clone());
        }
    }
    for file in files {
        match fs::read(&file)
            .map_err(|e| e.to_string())
            .and_then(|bytes| parse_protocol(&bytes).map_err(|e| e.to_string()))
        {
            Ok(protocol) => {
                registry.entry(protocol.id.clone()).or_insert(protocol);
            }
            Err(error) => {
                eprintln!(
                    "warning: skipping import candidate {}: {error}",
                    file.display()
                )
            }
        }
    }
    registry
}

fn load_and_resolve(
    file: &Path,
    registry: &impl ProtocolLookup,
) -> Result<Result<(Protocol, ResolvedProtocol), String>, String> {
    let bytes = fs::read(file).map_err(|e| e.to_string())?;
    Ok(parse_protocol(&bytes)
        .and_then(|protocol| {
            let resolved = resolve(&protocol, registry)?;
            Ok((protocol, resolved))
        })
        .map_err(|e| e.to_string()))
}

/// Parses and resolves each file, printing one OK/error line per file.
/// Exit 0 when everything is valid, 1 on any invalid file, 2 on I/O errors.
pub fn validate(files: &[PathBuf], import_path: &[PathBuf]) -> i32 {
    let registry = import_registry(import_path);
    let mut any_io = false;
    let mut any_invalid = false;
    for file in files {
        match load_and_resolve(file, &registry) {
            Err(io) => {
                println!("{}: error: {io}", file.display());
                any_io = true;
            }
            Ok(Err(invalid)) => {
                println!("{}: error: {invalid}", file.display());
                any_invalid = true;
            }
            Ok(Ok((_, resolved))) => {
                for warning in resolved.warnings() {
                    eprintln!("{}: warning: {warning}", file.display());
                }
                println!("{}: OK", file.display());
            }
        }
    }
    if any_io {
        EXIT_IO
    } else if any_invalid {
        EXIT_INVALID
    } else {
        EXIT_OK
    }
}

/// Prints the identity triple, import list, state table with derived
/// classification (imported states flagged with their origin triple) and the
/// transition table.
pub fn describe(file: &Path, import_path: &[PathBuf]) -> i32 {
    let registry = import_registry(import_path);
    let (protocol, resolved) = match load_and_resolve(file, &registry) {
        Err(io) => {
            eprintln!("{}: error: {io}", file.display());
            return EXIT_IO;
        }
        Ok(Err(invalid)) => {
            eprintln!("{}: error: {invalid}", file.display());
            return EXIT_INVALID;
        }
        Ok(Ok(pair)) => pair,
    };
    for warning in resolved.warnings() {
        eprintln!("{}: warning: {warning}", file.display());
    }

    println!("Protocol: {}", resolved.id());
    if protocol.imports.is_empty() {
        println!("Imports:  (none)");
    } else {
        for (i, import) in protocol.imports.iter().enumerate() {
            if i == 0 {
                println!("Imports:  {import}");
            } else {
                println!("          {import}");
            }
        }
    }

    let initial_count = resolved
        .states()
        .filter(|s| s.classification().is_initial())
        .count();
    let terminal_count = resolved
        .states()
        .filter(|s| s.classification().is_terminal())
        .count();
    println!();
    println!(
        "States ({}): {initial_count} initial, {terminal_count} terminal",
        resolved.state_count()
    );
    let state_rows: Vec<Vec<String>> = resolved
        .states()
        .map(|state| {
            let origin = if state.owner() == resolved.id() {
                "-".to_string()
            } else {
                state.owner().to_string()
            };
            vec![
                state.name().to_string(),
                state.classification().label().to_string(),
                origin,
            ]
        })
        .collect();
    print!(
        "{}",
        indent(&render_table(
            &["NAME", "CLASSIFICATION", "ORIGIN"],
            &state_rows
        ))
    );

    println!();
    println!("Transitions ({}):", resolved.transitions().len());
    let transition_rows: Vec<Vec<String>> = resolved
        .transitions()
        .iter()
        .map(|t| {
            vec![
                t.from_state.clone(),
                t.performative.clone(),
                t.to_state.clone(),
                t.sender.to_string(),
                t.receiver.to_string(),
                t.content.to_string(),
            ]
        })
        .collect();
    print!(
        "{}",
        indent(&render_table(
            &[
                "FROM",
                "PERFORMATIVE",
                "TO",
                "SENDER",
                "RECEIVER",
                "CONTENT"
            ],
            &transition_rows
        ))
    );
    EXIT_OK
}

/// Writes the FSM as Graphviz DOT. By default the protocol's own states and
/// transitions are exported; `--resolve` merges the import closure first.
pub fn export(file: &Path, output: &Path, inline_imports: bool, import_path: &[PathBuf]) -> i32 {
    let bytes = match fs::read(file) {
        Ok(bytes) => bytes,
        Err(error) => {
            eprintln!("{}: error: {error}", file.display());
            return EXIT_IO;
        }
    };
    let protocol = match parse_protocol(&bytes) {
        Ok(protocol) => protocol,
        Err(error) => {
            eprintln!("{}: error: {error}", file.display());
            return EXIT_INVALID;
        }
    };
    let resolved = if inline_imports {
        let registry = import_registry(import_path);
        resolve(&protocol, &registry)
    } else {
        let (local, dropped) = local_view(&protocol);
        if dropped > 0 {
            eprintln!(
                "warning: {dropped} transition(s) reference imported states; pass --resolve to include them",
            );
        }
        resolve(&local, &())
    };
    let resolved = match resolved {
        Ok(resolved) => resolved,
        Err(error) => {
            eprintln!("{}: error: {error}", file.display());
            return EXIT_INVALID;
        }
    };
    for warning in resolved.warnings() {
        eprintln!("{}: warning: {warning}", file.display());
    }
    let dot = export_dot(&resolved);
    if let Err(error) = fs::write(output, dot) {
        eprintln!("{}: error: {error}", output.display());
        return EXIT_IO;
    }
    println!("wrote {}", output.display());
    EXIT_OK
}

// The protocol as declared in its own file: imports stripped, transitions
// referencing states it does not declare dropped. Returns the number of
// dropped transitions.
fn local_view(protocol: &Protocol) -> (Protocol, usize) {
    let own: BTreeSet<&str> = protocol.states.iter().map(String::as_str).collect();
    let transitions: Vec<_> = protocol
        .transitions
        .iter()
        .filter(|t| {
            let from_known = t.from_state_regex().is_some() || own.contains(t.from_state.as_str());
            from_known && own.contains(t.to_state.as_str())
        })
        .cloned()
        .collect();
    let dropped = protocol.transitions.len() - transitions.len();
    (
        Protocol {
            id: protocol.id.clone(),
            imports: Vec::new(),
            states: protocol.states.clone(),
            transitions,
        },
        dropped,
    )
}

fn indent(text: &str) -> String {
    text.lines().map(|line| format!("  {line}\n")).collect()
}
