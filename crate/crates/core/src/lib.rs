//! A conversation reasoning engine for agent communication.
//!
//! Interaction protocols are finite state machines whose transitions are
//! triggered by messages; a conversation is one live instance of a protocol
//! between two agents. The engine matches each sent or received message to a
//! conversation using first-order pattern matching with three variable
//! semantics (anonymous `?`, immutable `?name`, mutable `??name`), advances
//! the matched conversation and raises events describing the outcome.
//!
//! Modules:
//! - [`term`]: the first-order term language and the matching primitives.
//! - [`protocol`]: the protocol FSM model, its XML format, import resolution
//!   and DOT export.
//! - [`conversation`]: the per-agent conversation manager.
//! - [`repository`]: the protocol manager that loads, registers and caches
//!   definitions.

pub mod conversation;
pub mod protocol;
pub mod repository;
pub mod term;

pub use conversation::{
    ConversationManager, ConversationStatus, Direction, EngineError, EngineEvent, Message,
    SnapshotRow,
};
pub use protocol::{
    export_dot, parse_protocol, resolve, write_protocol, Protocol, ProtocolError, ProtocolId,
    ResolvedProtocol, StateClass, Transition,
};
pub use repository::{Location, Registry, RepositoryError};
pub use term::{
    apply, get_bindings, matches, parse_term, render_term, BindingSet, Mutability, Term,
    TermParseError,
};
