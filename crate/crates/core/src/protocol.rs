//! Protocol finite state machines: identity triples, transitions, import
//! resolution, regex from-state expansion and derived state classification.
//!
//! A protocol arrives from XML as a [`Protocol`] (declared form, imports not
//! yet merged). [`resolve`] folds in the import closure, expands regex
//! from-states, validates the machine and derives which states are initial
//! and terminal, producing an immutable [`ResolvedProtocol`] that the
//! conversation engine runs against.

pub mod dot;
pub mod xml;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::term::{Term, TermParseError};

pub use dot::export_dot;
pub use xml::{parse_protocol, write_protocol};

/// Protocol identity: namespace, name and version. Two versions of the same
/// name are distinct protocols and coexist.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProtocolId {
    namespace: String,
    name: String,
    version: String,
}

impl ProtocolId {
    /// Builds an identity triple. All three parts must be non-empty.
    pub fn new(
        namespace: impl Into<String>,
        name: impl Into<String>,
        version: impl Into<String>,
    ) -> Self {
        let id = ProtocolId {
            namespace: namespace.into(),
            name: name.into(),
            version: version.into(),
        };
        assert!(
            !id.namespace.is_empty() && !id.name.is_empty() && !id.version.is_empty(),
            "protocol identity parts must be non-empty"
        );
        id
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.namespace, self.name, self.version)
    }
}

impl FromStr for ProtocolId {
    type Err = ProtocolError;

    /// Parses the canonical `namespace/name/version` rendering.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [namespace, name, version]
                if !namespace.is_empty() && !name.is_empty() && !version.is_empty() =>
            {
                Ok(ProtocolId::new(*namespace, *name, *version))
            }
            _ => Err(ProtocolError::InvalidIdentity(s.to_string())),
        }
    }
}

/// A transition pattern: the message shape that moves a conversation from
/// one state to another.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Transition {
    /// Literal state name, or `/regex/` before expansion.
    pub from_state: String,
    /// Literal state name; regular expressions are not permitted here.
    pub to_state: String,
    pub sender: Term,
    pub receiver: Term,
    /// Bare constant token, lowercase. Variables are not permitted.
    pub performative: String,
    pub content: Term,
}

impl Transition {
    /// Builds a transition with sender, receiver and content defaulted to
    /// the anonymous variable.
    pub fn new(
        performative: impl Into<String>,
        from_state: impl Into<String>,
        to_state: impl Into<String>,
    ) -> Self {
        Transition {
            from_state: from_state.into(),
            to_state: to_state.into(),
            sender: Term::Anonymous,
            receiver: Term::Anonymous,
            performative: performative.into().to_lowercase(),
            content: Term::Anonymous,
        }
    }

    pub fn with_sender(mut self, sender: Term) -> Self {
        self.sender = sender;
        self
    }

    pub fn with_receiver(mut self, receiver: Term) -> Self {
        self.receiver = receiver;
        self
    }

    pub fn with_content(mut self, content: Term) -> Self {
        self.content = content;
        self
    }

    /// The regex body when the from-state is of the `/regex/` form.
    pub fn from_state_regex(&self) -> Option<&str> {
        let s = self.from_state.as_str();
        if s.len() >= 2 && s.starts_with('/') && s.ends_with('/') {
            Some(&s[1..s.len() - 1])
        } else {
            None
        }
    }
}

/// A protocol as declared in one definition file: states and transitions of
/// the file itself, with imports referenced but not merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocol {
    pub id: ProtocolId,
    pub imports: Vec<ProtocolId>,
    /// Declared state names in file order, duplicates removed.
    pub states: Vec<String>,
    /// Transitions in file order; from-states may be regexes.
    pub transitions: Vec<Transition>,
}

impl Protocol {
    pub fn new(id: ProtocolId) -> Self {
        Protocol {
            id,
            imports: Vec::new(),
            states: Vec::new(),
            transitions: Vec::new(),
        }
    }
}

/// Derived role of a state in the resolved transition graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StateClass {
    /// No transition ends here.
    Initial,
    /// No transition begins here.
    Terminal,
    Intermediate,
    /// Degenerate case: no transition touches the state at all.
    InitialAndTerminal,
}

impl StateClass {
    pub fn is_initial(self) -> bool {
        matches!(self, StateClass::Initial | StateClass::InitialAndTerminal)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, StateClass::Terminal | StateClass::InitialAndTerminal)
    }

    pub fn label(self) -> &'static str {
        match self {
            StateClass::Initial => "initial",
            StateClass::Terminal => "terminal",
            StateClass::Intermediate => "intermediate",
            StateClass::InitialAndTerminal => "initial+terminal",
        }
    }
}

/// A state of a resolved protocol, with its derived classification and the
/// protocol that declared it (which differs from the resolved protocol's own
/// id for imported states).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    name: String,
    classification: StateClass,
    owner: ProtocolId,
}

impl State {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classification(&self) -> StateClass {
        self.classification
    }

    pub fn owner(&self) -> &ProtocolId {
        &self.owner
    }
}

/// A validated protocol FSM with its import closure merged, regex
/// from-states expanded and classification computed. Immutable after
/// construction; safe to share between threads.
#[derive(Debug, Clone)]
pub struct ResolvedProtocol {
    id: ProtocolId,
    imports: Vec<ProtocolId>,
    states: BTreeMap<String, State>,
    transitions: Vec<Transition>,
    initial_state: String,
    terminal_states: BTreeSet<String>,
    warnings: Vec<String>,
}

impl ResolvedProtocol {
    pub fn id(&self) -> &ProtocolId {
        &self.id
    }

    pub fn imports(&self) -> &[ProtocolId] {
        &self.imports
    }

    /// States keyed by name, iteration sorted by name.
    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.states.values()
    }

    pub fn state(&self, name: &str) -> Option<&State> {
        self.states.get(name)
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    /// Transitions in canonical order, regexes expanded, duplicates removed.
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transitions_from<'p>(&'p self, state: &'p str) -> impl Iterator<Item = &'p Transition> {
        self.transitions
            .iter()
            .filter(move |t| t.from_state == state)
    }

    pub fn initial_state(&self) -> &str {
        &self.initial_state
    }

    pub fn terminal_states(&self) -> &BTreeSet<String> {
        &self.terminal_states
    }

    pub fn is_terminal(&self, state: &str) -> bool {
        self.terminal_states.contains(state)
    }

    /// Messages produced while resolving, e.g. a regex from-state that
    /// matched no states.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Source of declared protocols for import resolution.
pub trait ProtocolLookup {
    fn lookup(&self, id: &ProtocolId) -> Option<&Protocol>;
}

/// The empty registry, for protocols without imports.
impl ProtocolLookup for () {
    fn lookup(&self, _id: &ProtocolId) -> Option<&Protocol> {
        None
    }
}

impl ProtocolLookup for BTreeMap<ProtocolId, Protocol> {
    fn lookup(&self, id: &ProtocolId) -> Option<&Protocol> {
        self.get(id)
    }
}

impl<T: ProtocolLookup + ?Sized> ProtocolLookup for &T {
    fn lookup(&self, id: &ProtocolId) -> Option<&Protocol> {
        (**self).lookup(id)
    }
}

/// Errors raised while reading, resolving or validating a protocol.
#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("missing <{0}> element")]
    MissingElement(&'static str),
    #[error("unexpected <{0}> element")]
    UnexpectedElement(String),
    #[error("missing mandatory attribute `{attribute}` on <{element}>")]
    MissingAttribute {
        element: &'static str,
        attribute: &'static str,
    },
    #[error("unknown attribute `{attribute}` on <{element}>")]
    UnknownAttribute {
        element: &'static str,
        attribute: String,
    },
    #[error(
        "invalid performative `{0}`: must be a bare constant token, variables are not permitted"
    )]
    InvalidPerformative(String),
    #[error("to-state `{0}` may not contain a regular expression")]
    RegexInToState(String),
    #[error("invalid term in attribute `{attribute}`: {source}")]
    InvalidTerm {
        attribute: String,
        #[source]
        source: TermParseError,
    },
    #[error("invalid protocol identity `{0}`")]
    InvalidIdentity(String),
    #[error("import cycle: {}", join_ids(.0))]
    ImportCycle(Vec<ProtocolId>),
    #[error("unresolvable import {missing} (imported by {importer})")]
    UnresolvedImport {
        importer: Box<ProtocolId>,
        missing: Box<ProtocolId>,
    },
    #[error("state `{name}` is declared by both {first} and {second}")]
    DuplicateState {
        name: String,
        first: Box<ProtocolId>,
        second: Box<ProtocolId>,
    },
    #[error("transition references unknown state `{0}`")]
    UnknownState(String),
    #[error("invalid from-state regex `/{pattern}/`: {message}")]
    InvalidRegex { pattern: String, message: String },
    #[error("no initial state: every state has an incoming transition")]
    NoInitialState,
    #[error("multiple initial states: {}", .0.join(", "))]
    MultipleInitialStates(Vec<String>),
}

fn join_ids(ids: &[ProtocolId]) -> String {
    ids.iter()
        .map(ProtocolId::to_string)
        .collect::<Vec<_>>()
        .join(" -> ")
}

/// Merges the import closure of `protocol`, expands regex from-states over
/// the merged state set, validates the machine and derives classification.
pub fn resolve(
    protocol: &Protocol,
    registry: &impl ProtocolLookup,
) -> Result<ResolvedProtocol, ProtocolError> {
    let mut closure: Vec<&Protocol> = Vec::new();
    let mut visiting: Vec<ProtocolId> = Vec::new();
    collect_closure(protocol, registry, &mut closure, &mut visiting)?;

    // States keep the id of the protocol that declared them; the same name
    // from two different declarers is a conflict.
    let mut owners: BTreeMap<String, ProtocolId> = BTreeMap::new();
    for member in &closure {
        for name in &member.states {
            match owners.get(name) {
                Some(owner) if *owner != member.id => {
                    return Err(ProtocolError::DuplicateState {
                        name: name.clone(),
                        first: Box::new(owner.clone()),
                        second: Box::new(member.id.clone()),
                    });
                }
                _ => {
                    owners.insert(name.clone(), member.id.clone());
                }
            }
        }
    }
    let state_names: BTreeSet<String> = owners.keys().cloned().collect();

    let merged: Vec<Transition> = closure
        .iter()
        .flat_map(|member| member.transitions.iter().cloned())
        .collect();

    let mut warnings = Vec::new();
    let expanded = expand_into(&merged, &state_names, &mut warnings)?;

    for transition in &expanded {
        if !state_names.contains(&transition.from_state) {
            return Err(ProtocolError::UnknownState(transition.from_state.clone()));
        }
        if !state_names.contains(&transition.to_state) {
            return Err(ProtocolError::UnknownState(transition.to_state.clone()));
        }
    }

    let transitions: Vec<Transition> = expanded
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let classification = classify(&state_names, &transitions)?;
    let initial_state = classification
        .iter()
        .find(|(_, class)| class.is_initial())
        .map(|(name, _)| name.clone())
        .expect("classification always yields exactly one initial state");
    let terminal_states: BTreeSet<String> = classification
        .iter()
        .filter(|(_, class)| class.is_terminal())
        .map(|(name, _)| name.clone())
        .collect();

    let states: BTreeMap<String, State> = classification
        .into_iter()
        .map(|(name, class)| {
            let owner = owners.remove(&name).expect("classified states are owned");
            (
                name.clone(),
                State {
                    name,
                    classification: class,
                    owner,
                },
            )
        })
        .collect();

    Ok(ResolvedProtocol {
        id: protocol.id.clone(),
        imports: protocol.imports.clone(),
        states,
        transitions,
        initial_state,
        terminal_states,
        warnings,
    })
}

fn collect_closure<'p>(
    protocol: &'p Protocol,
    registry: &'p impl ProtocolLookup,
    closure: &mut Vec<&'p Protocol>,
    visiting: &mut Vec<ProtocolId>,
) -> Result<(), ProtocolError> {
    if visiting.contains(&protocol.id) {
        let mut cycle = visiting.clone();
        cycle.push(protocol.id.clone());
        return Err(ProtocolError::ImportCycle(cycle));
    }
    if closure.iter().any(|member| member.id == protocol.id) {
        return Ok(());
    }
    visiting.push(protocol.id.clone());
    for import in &protocol.imports {
        let imported = registry
            .lookup(import)
            .ok_or_else(|| ProtocolError::UnresolvedImport {
                importer: Box::new(protocol.id.clone()),
                missing: Box::new(import.clone()),
            })?;
        collect_closure(imported, registry, closure, visiting)?;
    }
    visiting.pop();
    closure.push(protocol);
    Ok(())
}

/// Expands every `/regex/` from-state of `protocol` over its own declared
/// state set, duplicating the transition once per full-match state name.
/// Imports must already be merged for the expansion to see all names.
///
/// Returns the expanded protocol plus a warning for each regex that matched
/// no state.
pub fn expand_regex_states(protocol: &Protocol) -> Result<(Protocol, Vec<String>), ProtocolError> {
    let names: BTreeSet<String> = protocol.states.iter().cloned().collect();
    let mut warnings = Vec::new();
    let transitions = expand_into(&protocol.transitions, &names, &mut warnings)?;
    Ok((
        Protocol {
            id: protocol.id.clone(),
            imports: protocol.imports.clone(),
            states: protocol.states.clone(),
            transitions,
        },
        warnings,
    ))
}

// Regexes are anchored: the pattern must match the whole state name.
fn expand_into(
    transitions: &[Transition],
    state_names: &BTreeSet<String>,
    warnings: &mut Vec<String>,
) -> Result<Vec<Transition>, ProtocolError> {
    let mut out = Vec::new();
    for transition in transitions {
        match transition.from_state_regex() {
            None => out.push(transition.clone()),
            Some(pattern) => {
                let regex = fancy_regex::Regex::new(&format!("^(?:{pattern})$")).map_err(|e| {
                    ProtocolError::InvalidRegex {
                        pattern: pattern.to_string(),
                        message: e.to_string(),
                    }
                })?;
                let mut matched_any = false;
                for name in state_names {
                    let is_match =
                        regex
                            .is_match(name)
                            .map_err(|e| ProtocolError::InvalidRegex {
                                pattern: pattern.to_string(),
                                message: e.to_string(),
                            })?;
                    if is_match {
                        matched_any = true;
                        let mut copy = transition.clone();
                        copy.from_state = name.clone();
                        out.push(copy);
                    }
                }
                if !matched_any {
                    warnings.push(format!(
                        "from-state regex `/{pattern}/` on performative `{}` matched no states",
                        transition.performative
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Derives the classification of every state from the transition endpoint
/// sets: initial = no incoming, terminal = no outgoing. Exactly one initial
/// state is required.
pub fn classify(
    state_names: &BTreeSet<String>,
    transitions: &[Transition],
) -> Result<BTreeMap<String, StateClass>, ProtocolError> {
    let incoming: BTreeSet<&str> = transitions.iter().map(|t| t.to_state.as_str()).collect();
    let outgoing: BTreeSet<&str> = transitions.iter().map(|t| t.from_state.as_str()).collect();

    let initials: Vec<&String> = state_names
        .iter()
        .filter(|name| !incoming.contains(name.as_str()))
        .collect();
    if initials.is_empty() {
        return Err(ProtocolError::NoInitialState);
    }
    if initials.len() > 1 {
        return Err(ProtocolError::MultipleInitialStates(
            initials.into_iter().cloned().collect(),
        ));
    }

    Ok(state_names
        .iter()
        .map(|name| {
            let is_initial = !incoming.contains(name.as_str());
            let is_terminal = !outgoing.contains(name.as_str());
            let class = match (is_initial, is_terminal) {
                (true, true) => StateClass::InitialAndTerminal,
                (true, false) => StateClass::Initial,
                (false, true) => StateClass::Terminal,
                (false, false) => StateClass::Intermediate,
            };
            (name.clone(), class)
        })
        .collect())
}
