//! The conversation manager: matches sent and received messages against the
//! transitions of live conversations, starts new conversations when a message
//! fits the initial transition of a known protocol, advances state and
//! bindings, and raises events describing each outcome.
//!
//! A manager is single-owner: all mutating calls are externally serialized.
//! Snapshots and events are immutable values that are safe to hand to other
//! threads; independent managers operate concurrently.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::protocol::{ProtocolId, ResolvedProtocol, Transition};
use crate::term::{self, BindingSet, Term};

/// The message tuple: sender, receiver, optional conversation id, optional
/// protocol id, performative and ground content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    sender: String,
    receiver: String,
    conversation_id: Option<String>,
    protocol_id: Option<ProtocolId>,
    performative: String,
    content: Term,
}

impl Message {
    /// Builds a message. The content must be ground (a message containing
    /// variables is malformed) and the agent identifiers non-empty. The
    /// performative is lowercase-normalized.
    pub fn new(
        sender: impl Into<String>,
        receiver: impl Into<String>,
        performative: impl Into<String>,
        content: Term,
    ) -> Result<Self, EngineError> {
        let sender = sender.into();
        let receiver = receiver.into();
        if sender.is_empty() || receiver.is_empty() {
            return Err(EngineError::EmptyAgentId);
        }
        if !content.is_ground() {
            return Err(EngineError::NonGroundContent(content));
        }
        Ok(Message {
            sender,
            receiver,
            conversation_id: None,
            protocol_id: None,
            performative: performative.into().to_lowercase(),
            content,
        })
    }

    pub fn with_conversation_id(mut self, id: impl Into<String>) -> Self {
        self.conversation_id = Some(id.into());
        self
    }

    pub fn with_protocol(mut self, protocol: ProtocolId) -> Self {
        self.protocol_id = Some(protocol);
        self
    }

    pub fn sender(&self) -> &str {
        &self.sender
    }

    pub fn receiver(&self) -> &str {
        &self.receiver
    }

    pub fn conversation_id(&self) -> Option<&str> {
        self.conversation_id.as_deref()
    }

    pub fn protocol_id(&self) -> Option<&ProtocolId> {
        self.protocol_id.as_ref()
    }

    pub fn performative(&self) -> &str {
        &self.performative
    }

    pub fn content(&self) -> &Term {
        &self.content
    }

    /// Short single-line rendering used in event details and reports.
    pub fn summary(&self) -> String {
        format!(
            "{} {} -> {} {}",
            self.performative, self.sender, self.receiver, self.content
        )
    }
}

/// Whether the owning agent sent or received a message. Recorded in history;
/// matching treats both directions alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Sent => "sent",
            Direction::Received => "received",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConversationStatus {
    Active,
    Completed,
    Failed,
}

impl fmt::Display for ConversationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConversationStatus::Active => "active",
            ConversationStatus::Completed => "completed",
            ConversationStatus::Failed => "failed",
        })
    }
}

/// One step of a conversation: the message exchanged and the transition it
/// triggered.
#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub direction: Direction,
    pub message: Message,
    pub transition: Transition,
}

/// A live protocol instance between two agents.
#[derive(Debug, Clone)]
pub struct Conversation {
    id: String,
    protocol_id: ProtocolId,
    participants: (String, String),
    current_state: String,
    bindings: BindingSet,
    status: ConversationStatus,
    history: Vec<HistoryEntry>,
}

impl Conversation {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn protocol_id(&self) -> &ProtocolId {
        &self.protocol_id
    }

    /// The two participants in initiation order: the sender of the first
    /// message, then the receiver.
    pub fn participants(&self) -> (&str, &str) {
        (&self.participants.0, &self.participants.1)
    }

    /// The other participant, from `agent`'s point of view.
    pub fn counterpart(&self, agent: &str) -> Option<&str> {
        let (a, b) = (&self.participants.0, &self.participants.1);
        if agent == a {
            Some(b)
        } else if agent == b {
            Some(a)
        } else {
            None
        }
    }

    pub fn current_state(&self) -> &str {
        &self.current_state
    }

    pub fn bindings(&self) -> &BindingSet {
        &self.bindings
    }

    pub fn status(&self) -> ConversationStatus {
        self.status
    }

    pub fn is_active(&self) -> bool {
        self.status == ConversationStatus::Active
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }
}

/// Outcome notification raised while ingesting a message or loading a
/// protocol. Every ingested message produces exactly one of `Advanced`,
/// `Completed`, `Unmatched` or `Ambiguous` as its final event, optionally
/// preceded by `ConversationBegun` and by `Failed` events for conversations
/// failed during the candidate scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    ProtocolLoaded {
        protocol: ProtocolId,
    },
    ConversationBegun {
        conversation: String,
        protocol: ProtocolId,
        initiator: String,
        respondent: String,
    },
    Advanced {
        conversation: String,
        protocol: ProtocolId,
        from_state: String,
        to_state: String,
    },
    Completed {
        conversation: String,
        protocol: ProtocolId,
        from_state: String,
        to_state: String,
    },
    Failed {
        conversation: String,
        protocol: ProtocolId,
        state: String,
        reason: String,
    },
    Unmatched {
        message: String,
        diagnostics: Vec<String>,
    },
    Ambiguous {
        message: String,
        candidates: Vec<String>,
    },
}

impl EngineEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            EngineEvent::ProtocolLoaded { .. } => "protocol_loaded",
            EngineEvent::ConversationBegun { .. } => "conversation_begun",
            EngineEvent::Advanced { .. } => "advanced",
            EngineEvent::Completed { .. } => "completed",
            EngineEvent::Failed { .. } => "failed",
            EngineEvent::Unmatched { .. } => "unmatched",
            EngineEvent::Ambiguous { .. } => "ambiguous",
        }
    }

    pub fn conversation_id(&self) -> Option<&str> {
        match self {
            EngineEvent::ConversationBegun { conversation, .. }
            | EngineEvent::Advanced { conversation, .. }
            | EngineEvent::Completed { conversation, .. }
            | EngineEvent::Failed { conversation, .. } => Some(conversation),
            _ => None,
        }
    }

    pub fn protocol_id(&self) -> Option<&ProtocolId> {
        match self {
            EngineEvent::ProtocolLoaded { protocol }
            | EngineEvent::ConversationBegun { protocol, .. }
            | EngineEvent::Advanced { protocol, .. }
            | EngineEvent::Completed { protocol, .. }
            | EngineEvent::Failed { protocol, .. } => Some(protocol),
            _ => None,
        }
    }

    pub fn detail(&self) -> String {
        match self {
            EngineEvent::ProtocolLoaded { .. } => "protocol loaded".to_string(),
            EngineEvent::ConversationBegun {
                initiator,
                respondent,
                ..
            } => format!("begun by {initiator} with {respondent}"),
            EngineEvent::Advanced {
                from_state,
                to_state,
                ..
            } => format!("{from_state} -> {to_state}"),
            EngineEvent::Completed {
                from_state,
                to_state,
                ..
            } => format!("{from_state} -> {to_state} (terminal)"),
            EngineEvent::Failed { reason, .. } => reason.clone(),
            EngineEvent::Unmatched {
                message,
                diagnostics,
            } => {
                if diagnostics.is_empty() {
                    format!("no conversation or protocol matches {message}")
                } else {
                    format!("{message}: {}", diagnostics.join("; "))
                }
            }
            EngineEvent::Ambiguous {
                message,
                candidates,
            } => format!(
                "{message}: {} candidates ({})",
                candidates.len(),
                candidates.join(", ")
            ),
        }
    }

    /// One event-log line: timestamp, kind, conversation id (or `-`),
    /// protocol id (or `-`), detail.
    pub fn log_line(&self, timestamp: &str) -> String {
        format!(
            "{timestamp} {} {} {} {}",
            self.kind(),
            self.conversation_id().unwrap_or("-"),
            self.protocol_id()
                .map(ProtocolId::to_string)
                .unwrap_or_else(|| "-".to_string()),
            self.detail()
        )
    }
}

/// Source of fresh conversation identifiers. Implementations must eventually
/// produce identifiers not already in use by the manager.
pub trait IdGenerator {
    fn next_id(&mut self) -> String;
}

/// The default generator: `acre-1`, `acre-2`, ...
#[derive(Debug, Default)]
pub struct CounterIdGenerator {
    issued: u64,
}

impl IdGenerator for CounterIdGenerator {
    fn next_id(&mut self) -> String {
        self.issued += 1;
        format!("acre-{}", self.issued)
    }
}

/// Candidate pairs found by the stage-one scan over live conversations, plus
/// the named conversations that matched nothing and must therefore fail.
#[derive(Debug, Clone)]
pub struct CandidateScan {
    /// (conversation id, matching transition) pairs.
    pub candidates: Vec<(String, Transition)>,
    /// (conversation id, reason) for conversations the message named but
    /// could not advance.
    pub failures: Vec<(String, String)>,
}

/// Candidate initial transitions found by the stage-two scan over known
/// protocols.
#[derive(Debug, Clone)]
pub struct NewConversationScan {
    pub candidates: Vec<(ProtocolId, Transition)>,
    /// Why no candidate could be produced, when that is the case.
    pub diagnostics: Vec<String>,
}

enum Choice {
    Existing(String, Transition),
    Fresh(ProtocolId, Transition),
}

/// Per-agent conversation tracker over a set of resolved protocols.
pub struct ConversationManager {
    protocols: BTreeMap<ProtocolId, Arc<ResolvedProtocol>>,
    conversations: Vec<Conversation>,
    index: BTreeMap<String, usize>,
    id_gen: Box<dyn IdGenerator + Send>,
    history_cap: Option<usize>,
}

impl Default for ConversationManager {
    fn default() -> Self {
        Self::new()
    }
}

impl ConversationManager {
    pub fn new() -> Self {
        Self::with_id_generator(Box::new(CounterIdGenerator::default()))
    }

    /// A manager with an injected identifier generator, for deterministic
    /// replay transcripts.
    pub fn with_id_generator(id_gen: Box<dyn IdGenerator + Send>) -> Self {
        ConversationManager {
            protocols: BTreeMap::new(),
            conversations: Vec::new(),
            index: BTreeMap::new(),
            id_gen,
            history_cap: None,
        }
    }

    /// Caps per-conversation history length; oldest entries are dropped
    /// first. `None` (the default) retains everything.
    pub fn set_history_cap(&mut self, cap: Option<usize>) {
        self.history_cap = cap;
    }

    /// Registers a resolved protocol for matching.
    pub fn add_protocol(&mut self, protocol: impl Into<Arc<ResolvedProtocol>>) -> EngineEvent {
        let protocol = protocol.into();
        let id = protocol.id().clone();
        self.protocols.insert(id.clone(), protocol);
        EngineEvent::ProtocolLoaded { protocol: id }
    }

    pub fn protocol(&self, id: &ProtocolId) -> Option<&Arc<ResolvedProtocol>> {
        self.protocols.get(id)
    }

    pub fn protocol_ids(&self) -> impl Iterator<Item = &ProtocolId> {
        self.protocols.keys()
    }

    pub fn conversations(&self) -> impl Iterator<Item = &Conversation> {
        self.conversations.iter()
    }

    pub fn conversation(&self, id: &str) -> Option<&Conversation> {
        self.index.get(id).map(|&i| &self.conversations[i])
    }

    /// A fresh conversation identifier, unique for the manager lifetime even
    /// against externally supplied ids.
    pub fn next_id(&mut self) -> String {
        loop {
            let candidate = self.id_gen.next_id();
            if !self.index.contains_key(&candidate) {
                return candidate;
            }
        }
    }

    /// Runs a message through the three-stage algorithm: scan live
    /// conversations, otherwise scan protocols for a new conversation, then
    /// advance if exactly one candidate emerged. Returns the raised events in
    /// order.
    pub fn ingest(&mut self, message: Message, direction: Direction) -> Vec<EngineEvent> {
        let mut events = Vec::new();

        let scan = self.candidate_conversations(&message);
        for (id, reason) in scan.failures {
            let conversation = &mut self.conversations[self.index[&id]];
            conversation.status = ConversationStatus::Failed;
            events.push(EngineEvent::Failed {
                conversation: id,
                protocol: conversation.protocol_id.clone(),
                state: conversation.current_state.clone(),
                reason,
            });
        }

        let mut diagnostics = Vec::new();
        let mut choices: Vec<Choice> = scan
            .candidates
            .into_iter()
            .map(|(id, t)| Choice::Existing(id, t))
            .collect();
        if choices.is_empty() {
            let fresh = self.candidate_new_conversations(&message);
            diagnostics = fresh.diagnostics;
            choices = fresh
                .candidates
                .into_iter()
                .map(|(pid, t)| Choice::Fresh(pid, t))
                .collect();
        }

        match choices.len() {
            0 => events.push(EngineEvent::Unmatched {
                message: message.summary(),
                diagnostics,
            }),
            1 => {
                let choice = choices.pop().expect("one choice");
                events.extend(self.advance(choice, message, direction));
            }
            _ => {
                let candidates = choices
                    .iter()
                    .map(|c| match c {
                        Choice::Existing(id, _) => id.clone(),
                        Choice::Fresh(pid, _) => format!("new:{pid}"),
                    })
                    .collect();
                events.push(EngineEvent::Ambiguous {
                    message: message.summary(),
                    candidates,
                });
            }
        }
        events
    }

    /// Stage one: every live conversation the message could advance, paired
    /// with the transition it would trigger. When the message names a
    /// conversation id, only that conversation is considered, and it is
    /// reported as a failure if it cannot be advanced. Pure: `ingest` applies
    /// the failures.
    pub fn candidate_conversations(&self, message: &Message) -> CandidateScan {
        let mut candidates = Vec::new();
        let mut failures = Vec::new();
        for conversation in &self.conversations {
            if !conversation.is_active() {
                continue;
            }
            let named = message.conversation_id() == Some(conversation.id());
            if message.conversation_id().is_some() && !named {
                continue;
            }
            // A message declaring a protocol can only speak to conversations
            // of that protocol.
            let protocol_consistent = message
                .protocol_id()
                .is_none_or(|p| p == &conversation.protocol_id);
            let mut matched = false;
            if protocol_consistent {
                let resolved = self
                    .protocols
                    .get(&conversation.protocol_id)
                    .expect("conversation protocol is registered");
                for transition in resolved.transitions_from(&conversation.current_state) {
                    if transition_matches(transition, &conversation.bindings, message) {
                        candidates.push((conversation.id.clone(), transition.clone()));
                        matched = true;
                    }
                }
            }
            if named && !matched {
                let reason = if protocol_consistent {
                    format!(
                        "no transition from state `{}` matches {}",
                        conversation.current_state,
                        message.summary()
                    )
                } else {
                    format!(
                        "message protocol {} contradicts conversation protocol {}",
                        message.protocol_id().expect("checked above"),
                        conversation.protocol_id
                    )
                };
                failures.push((conversation.id.clone(), reason));
            }
        }
        CandidateScan {
            candidates,
            failures,
        }
    }

    /// Stage two: protocols whose initial transitions the message matches,
    /// each yielding a fresh conversation candidate. Run only when stage one
    /// produced nothing. Pure.
    pub fn candidate_new_conversations(&self, message: &Message) -> NewConversationScan {
        let mut scan = NewConversationScan {
            candidates: Vec::new(),
            diagnostics: Vec::new(),
        };
        if let Some(id) = message.conversation_id() {
            if self.index.contains_key(id) {
                scan.diagnostics.push(format!(
                    "conversation id `{id}` already exists; refusing to begin a new conversation"
                ));
                return scan;
            }
        }
        if let Some(protocol_id) = message.protocol_id() {
            if !self.protocols.contains_key(protocol_id) {
                scan.diagnostics
                    .push(format!("unknown protocol {protocol_id}"));
                return scan;
            }
        }
        let no_bindings = BindingSet::new();
        for (protocol_id, resolved) in &self.protocols {
            if message.protocol_id().is_some_and(|p| p != protocol_id) {
                continue;
            }
            for transition in resolved.transitions_from(resolved.initial_state()) {
                if transition_matches(transition, &no_bindings, message) {
                    scan.candidates
                        .push((protocol_id.clone(), transition.clone()));
                }
            }
        }
        scan
    }

    // Stage three: commit the single surviving candidate. The new binding set
    // is the old one plus the bindings collected from the applied transition,
    // so bound immutable variables keep their values while mutable ones are
    // overwritten.
    fn advance(
        &mut self,
        choice: Choice,
        message: Message,
        direction: Direction,
    ) -> Vec<EngineEvent> {
        let mut events = Vec::new();
        let (index, transition) = match choice {
            Choice::Existing(id, transition) => (self.index[&id], transition),
            Choice::Fresh(protocol_id, transition) => {
                let id = match message.conversation_id() {
                    Some(given) => given.to_string(),
                    None => self.next_id(),
                };
                let resolved = &self.protocols[&protocol_id];
                let conversation = Conversation {
                    id: id.clone(),
                    protocol_id: protocol_id.clone(),
                    participants: (message.sender.clone(), message.receiver.clone()),
                    current_state: resolved.initial_state().to_string(),
                    bindings: BindingSet::new(),
                    status: ConversationStatus::Active,
                    history: Vec::new(),
                };
                events.push(EngineEvent::ConversationBegun {
                    conversation: id.clone(),
                    protocol: protocol_id,
                    initiator: message.sender.clone(),
                    respondent: message.receiver.clone(),
                });
                self.index.insert(id, self.conversations.len());
                self.conversations.push(conversation);
                (self.conversations.len() - 1, transition)
            }
        };

        let protocol_id = self.conversations[index].protocol_id.clone();
        let completes = self.protocols[&protocol_id].is_terminal(&transition.to_state);

        let conversation = &mut self.conversations[index];
        let from_state = conversation.current_state.clone();
        let collected = collect_bindings(&transition, &conversation.bindings, &message);
        conversation.bindings.merge(collected);
        conversation.current_state = transition.to_state.clone();
        conversation.history.push(HistoryEntry {
            direction,
            message,
            transition: transition.clone(),
        });
        if let Some(cap) = self.history_cap {
            let len = conversation.history.len();
            if len > cap {
                conversation.history.drain(..len - cap);
            }
        }

        if completes {
            conversation.status = ConversationStatus::Completed;
            events.push(EngineEvent::Completed {
                conversation: conversation.id.clone(),
                protocol: protocol_id,
                from_state,
                to_state: transition.to_state,
            });
        } else {
            events.push(EngineEvent::Advanced {
                conversation: conversation.id.clone(),
                protocol: protocol_id,
                from_state,
                to_state: transition.to_state,
            });
        }
        events
    }

    /// Synthesizes and ingests the outgoing message that advances
    /// `conversation_id` with the given performative and content. Sender and
    /// receiver are resolved from the conversation's bindings and
    /// participants; the conversation and protocol ids come from the
    /// conversation itself.
    pub fn advance_conversation(
        &mut self,
        conversation_id: &str,
        performative: &str,
        content: Term,
    ) -> Result<(Message, Vec<EngineEvent>), EngineError> {
        let conversation = self
            .conversation(conversation_id)
            .ok_or_else(|| EngineError::UnknownConversation(conversation_id.to_string()))?;
        if !conversation.is_active() {
            return Err(EngineError::ConversationNotActive {
                id: conversation_id.to_string(),
                status: conversation.status,
            });
        }
        if !content.is_ground() {
            return Err(EngineError::NonGroundContent(content));
        }
        let performative = performative.to_lowercase();
        let resolved = self
            .protocols
            .get(&conversation.protocol_id)
            .expect("conversation protocol is registered");

        let compatible: Vec<&Transition> = resolved
            .transitions_from(&conversation.current_state)
            .filter(|t| {
                t.performative.eq_ignore_ascii_case(&performative)
                    && term::matches(&term::apply(&conversation.bindings, &t.content), &content)
                        .expect("content is ground")
            })
            .collect();
        let transition = match compatible.len() {
            1 => compatible[0],
            0 => {
                let available = resolved
                    .transitions_from(&conversation.current_state)
                    .map(|t| {
                        format!(
                            "{} {}",
                            t.performative,
                            term::apply(&conversation.bindings, &t.content)
                        )
                    })
                    .collect();
                return Err(EngineError::NoCompatibleTransition(Box::new(
                    TransitionMismatch {
                        conversation: conversation_id.to_string(),
                        state: conversation.current_state.clone(),
                        performative,
                        content,
                        available,
                    },
                )));
            }
            n => {
                return Err(EngineError::AmbiguousTransition {
                    conversation: conversation_id.to_string(),
                    state: conversation.current_state.clone(),
                    count: n,
                })
            }
        };

        let sender_term = term::apply(&conversation.bindings, &transition.sender);
        let receiver_term = term::apply(&conversation.bindings, &transition.receiver);
        let unresolved = || EngineError::CannotResolveParticipants(conversation_id.to_string());
        let (sender, receiver) = match (sender_term.as_constant(), receiver_term.as_constant()) {
            (Some(s), Some(r)) => (s.to_string(), r.to_string()),
            (Some(s), None) => {
                let r = conversation.counterpart(s).ok_or_else(unresolved)?;
                (s.to_string(), r.to_string())
            }
            (None, Some(r)) => {
                let s = conversation.counterpart(r).ok_or_else(unresolved)?;
                (s.to_string(), r.to_string())
            }
            (None, None) => return Err(unresolved()),
        };

        let message = Message::new(sender, receiver, performative, content)?
            .with_conversation_id(conversation_id)
            .with_protocol(conversation.protocol_id.clone());
        let events = self.ingest(message.clone(), Direction::Sent);
        Ok((message, events))
    }

    /// A read-only view of every conversation, in creation order.
    pub fn snapshot(&self) -> Vec<SnapshotRow> {
        self.conversations
            .iter()
            .map(|c| SnapshotRow {
                conversation_id: c.id.clone(),
                protocol_id: c.protocol_id.clone(),
                participants: c.participants.clone(),
                current_state: c.current_state.clone(),
                status: c.status,
                bindings: c.bindings.clone(),
            })
            .collect()
    }

    /// Drops completed and failed conversations, freeing their ids for
    /// inspection-free reuse. Never invoked automatically.
    pub fn purge_terminated(&mut self) -> usize {
        let before = self.conversations.len();
        self.conversations.retain(|c| c.is_active());
        self.index = self
            .conversations
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id.clone(), i))
            .collect();
        before - self.conversations.len()
    }
}

/// One row of [`ConversationManager::snapshot`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotRow {
    pub conversation_id: String,
    pub protocol_id: ProtocolId,
    /// (first-message sender, first-message receiver).
    pub participants: (String, String),
    pub current_state: String,
    pub status: ConversationStatus,
    pub bindings: BindingSet,
}

impl SnapshotRow {
    /// The other participant, from `agent`'s point of view.
    pub fn counterpart(&self, agent: &str) -> Option<&str> {
        if agent == self.participants.0 {
            Some(&self.participants.1)
        } else if agent == self.participants.1 {
            Some(&self.participants.0)
        } else {
            None
        }
    }
}

// The candidate test: sender, receiver and content patterns with the
// conversation's bindings applied, plus performative equality. Performatives
// admit no variables, so no binding application is needed there.
fn transition_matches(transition: &Transition, bindings: &BindingSet, message: &Message) -> bool {
    if !transition
        .performative
        .eq_ignore_ascii_case(&message.performative)
    {
        return false;
    }
    let sender = Term::constant(message.sender.clone());
    let receiver = Term::constant(message.receiver.clone());
    let ground = "message fields are ground";
    term::matches(&term::apply(bindings, &transition.sender), &sender).expect(ground)
        && term::matches(&term::apply(bindings, &transition.receiver), &receiver).expect(ground)
        && term::matches(
            &term::apply(bindings, &transition.content),
            &message.content,
        )
        .expect(ground)
}

// Bindings collected from a fired transition, in sender, receiver, content
// order. Patterns are applied first, so already-bound immutable variables
// appear as constants and collect nothing.
fn collect_bindings(
    transition: &Transition,
    bindings: &BindingSet,
    message: &Message,
) -> BindingSet {
    let mut collected = BindingSet::new();
    let fields = [
        (&transition.sender, Term::constant(message.sender.clone())),
        (
            &transition.receiver,
            Term::constant(message.receiver.clone()),
        ),
        (&transition.content, message.content.clone()),
    ];
    for (pattern, value) in fields {
        let applied = term::apply(bindings, pattern);
        let found =
            term::get_bindings(&applied, &value).expect("candidate transition matches the message");
        collected.merge(found);
    }
    collected
}

/// Errors raised by message construction and the direct-advance operation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("message content `{0}` is not ground")]
    NonGroundContent(Term),
    #[error("agent identifiers must be non-empty")]
    EmptyAgentId,
    #[error("unknown conversation `{0}`")]
    UnknownConversation(String),
    #[error("conversation `{id}` is {status}, not active")]
    ConversationNotActive {
        id: String,
        status: ConversationStatus,
    },
    #[error(
        "no transition from state `{}` of conversation `{}` accepts `{}` with content `{}`; \
         available: {}",
        .0.state,
        .0.conversation,
        .0.performative,
        .0.content,
        format_available(&.0.available)
    )]
    NoCompatibleTransition(Box<TransitionMismatch>),
    #[error(
        "{count} transitions from state `{state}` of conversation `{conversation}` accept the \
         given performative and content; ambiguity must be resolved by the caller"
    )]
    AmbiguousTransition {
        conversation: String,
        state: String,
        count: usize,
    },
    #[error("cannot determine sender and receiver for conversation `{0}`: participants unbound")]
    CannotResolveParticipants(String),
}

/// Context for [`EngineError::NoCompatibleTransition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMismatch {
    pub conversation: String,
    pub state: String,
    pub performative: String,
    pub content: Term,
    pub available: Vec<String>,
}

fn format_available(available: &[String]) -> String {
    if available.is_empty() {
        "(none)".to_string()
    } else {
        available.join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{resolve, Protocol, Transition};
    use crate::term::parse_term;

    fn term(s: &str) -> Term {
        parse_term(s).unwrap()
    }

    fn pd_id() -> ProtocolId {
        ProtocolId::new("is.lill.acre", "acre-processdocuments", "0.1")
    }

    fn vickrey_id() -> ProtocolId {
        ProtocolId::new("is.lill.acre", "acre-vickreyauction", "0.1")
    }

    /// The worked-example protocol: ready/process/done with a refuse exit.
    fn process_documents() -> ResolvedProtocol {
        let mut p = Protocol::new(pd_id());
        p.states = vec![
            "Start".into(),
            "Waiting".into(),
            "Requested".into(),
            "End".into(),
        ];
        p.transitions = vec![
            Transition::new("inform", "Start", "Waiting")
                .with_sender(term("?initiator"))
                .with_receiver(term("?respondent"))
                .with_content(term("ready")),
            Transition::new("request", "Waiting", "Requested")
                .with_sender(term("?respondent"))
                .with_receiver(term("?initiator"))
                .with_content(term("process(??docid)")),
            Transition::new("inform", "Requested", "Waiting")
                .with_sender(term("?initiator"))
                .with_receiver(term("?respondent"))
                .with_content(term("done(?docid)")),
            Transition::new("refuse", "Requested", "End")
                .with_sender(term("?initiator"))
                .with_receiver(term("?respondent"))
                .with_content(term("refuse(?docid)")),
        ];
        resolve(&p, &()).unwrap()
    }

    fn vickrey() -> ResolvedProtocol {
        let mut p = Protocol::new(vickrey_id());
        p.states = vec![
            "start".into(),
            "awaiting_bid".into(),
            "bid".into(),
            "nobid".into(),
            "accepted".into(),
            "rejected".into(),
        ];
        p.transitions = vec![
            Transition::new("cfp", "start", "awaiting_bid")
                .with_sender(term("?initiator"))
                .with_receiver(term("?bidder"))
                .with_content(term("bidfor(?item)")),
            Transition::new("propose", "awaiting_bid", "bid")
                .with_sender(term("?bidder"))
                .with_receiver(term("?initiator"))
                .with_content(term("bid(?item,?amount)")),
            Transition::new("propose", "awaiting_bid", "nobid")
                .with_sender(term("?bidder"))
                .with_receiver(term("?initiator"))
                .with_content(term("nobid(?item)")),
            Transition::new("accept-proposal", "bid", "accepted")
                .with_sender(term("?initiator"))
                .with_receiver(term("?bidder"))
                .with_content(term("bid(?item,?amount)")),
            Transition::new("reject-proposal", "bid", "rejected")
                .with_sender(term("?initiator"))
                .with_receiver(term("?bidder"))
                .with_content(term("bid(?item,?amount)")),
        ];
        resolve(&p, &()).unwrap()
    }

    fn manager_with_pd() -> ConversationManager {
        let mut m = ConversationManager::new();
        m.add_protocol(process_documents());
        m
    }

    fn msg(performative: &str, sender: &str, receiver: &str, content: &str) -> Message {
        Message::new(sender, receiver, performative, term(content)).unwrap()
    }

    fn kinds(events: &[EngineEvent]) -> Vec<&'static str> {
        events.iter().map(EngineEvent::kind).collect()
    }

    #[test]
    fn golden_trace_walks_the_worked_example() {
        let mut m = manager_with_pd();

        let events = m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        assert_eq!(kinds(&events), vec!["conversation_begun", "advanced"]);
        let c = m.conversation("acre-1").unwrap();
        assert_eq!(c.current_state(), "Waiting");
        assert_eq!(c.bindings().get("initiator"), Some(&term("processor")));
        assert_eq!(c.bindings().get("respondent"), Some(&term("manager")));
        assert_eq!(c.bindings().len(), 2);

        let events = m.ingest(
            msg("request", "manager", "processor", "process(doc123)"),
            Direction::Sent,
        );
        assert_eq!(kinds(&events), vec!["advanced"]);
        let c = m.conversation("acre-1").unwrap();
        assert_eq!(c.current_state(), "Requested");
        assert_eq!(c.bindings().get("docid"), Some(&term("doc123")));

        let events = m.ingest(
            msg("inform", "processor", "manager", "done(doc123)"),
            Direction::Received,
        );
        assert_eq!(kinds(&events), vec!["advanced"]);
        assert_eq!(m.conversation("acre-1").unwrap().current_state(), "Waiting");

        let events = m.ingest(
            msg("request", "manager", "processor", "process(doc124)"),
            Direction::Sent,
        );
        assert_eq!(kinds(&events), vec!["advanced"]);
        let c = m.conversation("acre-1").unwrap();
        assert_eq!(c.current_state(), "Requested");
        // The mutable-context docid was overwritten.
        assert_eq!(c.bindings().get("docid"), Some(&term("doc124")));
        assert_eq!(c.history().len(), 4);
    }

    #[test]
    fn refusing_a_different_docid_fails_the_named_conversation() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("request", "manager", "processor", "process(doc123)"),
            Direction::Sent,
        );

        let refuse =
            msg("refuse", "processor", "manager", "refuse(doc124)").with_conversation_id("acre-1");
        let events = m.ingest(refuse, Direction::Received);
        assert_eq!(kinds(&events), vec!["failed", "unmatched"]);
        let c = m.conversation("acre-1").unwrap();
        assert_eq!(c.status(), ConversationStatus::Failed);
        // Failed conversations never change again.
        assert_eq!(c.current_state(), "Requested");
    }

    #[test]
    fn refusing_the_bound_docid_completes_the_conversation() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("request", "manager", "processor", "process(doc123)"),
            Direction::Sent,
        );

        let events = m.ingest(
            msg("refuse", "processor", "manager", "refuse(doc123)"),
            Direction::Received,
        );
        assert_eq!(kinds(&events), vec!["completed"]);
        let c = m.conversation("acre-1").unwrap();
        assert_eq!(c.status(), ConversationStatus::Completed);
        assert_eq!(c.current_state(), "End");
    }

    #[test]
    fn unrelated_message_is_unmatched() {
        let mut m = manager_with_pd();
        let events = m.ingest(
            msg("propose", "a", "b", "bid(lot1,40)"),
            Direction::Received,
        );
        assert_eq!(kinds(&events), vec!["unmatched"]);
        assert!(m.snapshot().is_empty());
    }

    #[test]
    fn initial_transitions_respect_the_performative() {
        // Without the performative gate a request could open the protocol
        // whose first transition demands inform.
        let mut m = manager_with_pd();
        let events = m.ingest(
            msg("request", "processor", "manager", "ready"),
            Direction::Received,
        );
        assert_eq!(kinds(&events), vec!["unmatched"]);
    }

    #[test]
    fn two_idless_conversations_make_an_idless_request_ambiguous() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        assert_eq!(m.snapshot().len(), 2);

        let before = m.snapshot();
        let events = m.ingest(
            msg("request", "manager", "processor", "process(doc9)"),
            Direction::Sent,
        );
        assert_eq!(kinds(&events), vec!["ambiguous"]);
        match &events[0] {
            EngineEvent::Ambiguous { candidates, .. } => {
                assert_eq!(
                    candidates,
                    &vec!["acre-1".to_string(), "acre-2".to_string()]
                )
            }
            other => panic!("unexpected event {other:?}"),
        }
        assert_eq!(m.snapshot(), before);
    }

    #[test]
    fn a_conversation_id_routes_between_idless_twins() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );

        let request =
            msg("request", "manager", "processor", "process(doc9)").with_conversation_id("acre-2");
        let events = m.ingest(request, Direction::Sent);
        assert_eq!(kinds(&events), vec!["advanced"]);
        assert_eq!(
            m.conversation("acre-2").unwrap().current_state(),
            "Requested"
        );
        assert_eq!(m.conversation("acre-1").unwrap().current_state(), "Waiting");
    }

    #[test]
    fn completed_conversation_ids_are_not_reusable() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready").with_conversation_id("c1"),
            Direction::Received,
        );
        m.ingest(
            msg("request", "manager", "processor", "process(d)"),
            Direction::Sent,
        );
        m.ingest(
            msg("refuse", "processor", "manager", "refuse(d)"),
            Direction::Received,
        );
        assert_eq!(
            m.conversation("c1").unwrap().status(),
            ConversationStatus::Completed
        );

        let replay = msg("inform", "processor", "manager", "ready").with_conversation_id("c1");
        let events = m.ingest(replay, Direction::Received);
        assert_eq!(kinds(&events), vec!["unmatched"]);
        match &events[0] {
            EngineEvent::Unmatched { diagnostics, .. } => {
                assert!(diagnostics[0].contains("already exists"))
            }
            other => panic!("unexpected event {other:?}"),
        }
        // Terminal absorption: the completed conversation is untouched.
        assert_eq!(
            m.conversation("c1").unwrap().status(),
            ConversationStatus::Completed
        );
    }

    #[test]
    fn message_naming_unknown_protocol_is_unmatched_with_diagnostic() {
        let mut m = manager_with_pd();
        let message = msg("inform", "processor", "manager", "ready")
            .with_protocol(ProtocolId::new("ns", "absent", "9"));
        let events = m.ingest(message, Direction::Received);
        assert_eq!(kinds(&events), vec!["unmatched"]);
        match &events[0] {
            EngineEvent::Unmatched { diagnostics, .. } => {
                assert!(diagnostics[0].contains("unknown protocol"))
            }
            other => panic!("unexpected event {other:?}"),
        }
    }

    #[test]
    fn protocol_mismatch_on_named_conversation_fails_it() {
        let mut m = manager_with_pd();
        m.add_protocol(vickrey());
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );

        let message = msg("request", "manager", "processor", "process(doc1)")
            .with_conversation_id("acre-1")
            .with_protocol(vickrey_id());
        let events = m.ingest(message, Direction::Received);
        assert_eq!(kinds(&events), vec!["failed", "unmatched"]);
        match &events[0] {
            EngineEvent::Failed { reason, .. } => assert!(reason.contains("contradicts")),
            other => panic!("unexpected event {other:?}"),
        }
    }

    #[test]
    fn message_protocol_field_selects_the_protocol_for_new_conversations() {
        let mut m = manager_with_pd();
        m.add_protocol(vickrey());
        let message = msg("cfp", "agent1", "agent2", "bidfor(lot1)").with_protocol(vickrey_id());
        let events = m.ingest(message, Direction::Sent);
        assert_eq!(kinds(&events), vec!["conversation_begun", "advanced"]);
        let c = m.conversation("acre-1").unwrap();
        assert_eq!(c.protocol_id(), &vickrey_id());
        assert_eq!(c.current_state(), "awaiting_bid");
    }

    #[test]
    fn idless_protocol_less_message_scans_all_protocols() {
        let mut m = manager_with_pd();
        m.add_protocol(vickrey());
        let scan = m.candidate_new_conversations(&msg("inform", "processor", "manager", "ready"));
        // Vickrey's initial transition requires cfp, so only one candidate.
        assert_eq!(scan.candidates.len(), 1);
        assert_eq!(scan.candidates[0].0, pd_id());
    }

    #[test]
    fn candidate_scans_are_pure() {
        let m = manager_with_pd();
        let message = msg("inform", "processor", "manager", "ready");
        let _ = m.candidate_conversations(&message);
        let _ = m.candidate_new_conversations(&message);
        assert!(m.snapshot().is_empty());
    }

    #[test]
    fn candidate_conversations_reports_both_idless_candidates() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        let scan =
            m.candidate_conversations(&msg("request", "manager", "processor", "process(doc9)"));
        assert_eq!(scan.candidates.len(), 2);
        assert!(scan.failures.is_empty());
    }

    #[test]
    fn next_id_counts_and_skips_taken_ids() {
        let mut m = manager_with_pd();
        assert_eq!(m.next_id(), "acre-1");
        // Occupy acre-2 via an explicit id, then generate.
        m.ingest(
            msg("inform", "processor", "manager", "ready").with_conversation_id("acre-2"),
            Direction::Received,
        );
        assert_eq!(m.next_id(), "acre-3");
    }

    #[test]
    fn next_id_produces_distinct_values() {
        let mut m = ConversationManager::new();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            assert!(seen.insert(m.next_id()));
        }
    }

    #[test]
    fn injected_id_generator_is_used() {
        struct Fixed(u64);
        impl IdGenerator for Fixed {
            fn next_id(&mut self) -> String {
                self.0 += 1;
                format!("replay-{:04}", self.0)
            }
        }
        let mut m = ConversationManager::with_id_generator(Box::new(Fixed(0)));
        m.add_protocol(process_documents());
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        assert!(m.conversation("replay-0001").is_some());
    }

    #[test]
    fn advance_conversation_synthesizes_the_outgoing_message() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );

        let (message, events) = m
            .advance_conversation("acre-1", "request", term("process(doc125)"))
            .unwrap();
        assert_eq!(message.sender(), "manager");
        assert_eq!(message.receiver(), "processor");
        assert_eq!(message.conversation_id(), Some("acre-1"));
        assert_eq!(message.protocol_id(), Some(&pd_id()));
        assert_eq!(kinds(&events), vec!["advanced"]);
        assert_eq!(
            m.conversation("acre-1").unwrap().current_state(),
            "Requested"
        );
    }

    #[test]
    fn advance_conversation_rejects_terminated_and_unknown_conversations() {
        let mut m = manager_with_pd();
        assert!(matches!(
            m.advance_conversation("nope", "inform", term("ready")),
            Err(EngineError::UnknownConversation(_))
        ));

        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("request", "manager", "processor", "process(d)"),
            Direction::Sent,
        );
        m.ingest(
            msg("refuse", "processor", "manager", "refuse(d)"),
            Direction::Received,
        );
        assert!(matches!(
            m.advance_conversation("acre-1", "inform", term("ready")),
            Err(EngineError::ConversationNotActive { .. })
        ));
    }

    #[test]
    fn advance_conversation_lists_available_transitions_on_mismatch() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("request", "manager", "processor", "process(doc1)"),
            Direction::Sent,
        );

        let err = m
            .advance_conversation("acre-1", "cfp", term("bidfor(lot1)"))
            .unwrap_err();
        match err {
            EngineError::NoCompatibleTransition(mismatch) => {
                assert_eq!(
                    mismatch.available,
                    vec![
                        "refuse refuse(doc1)".to_string(),
                        "inform done(doc1)".to_string()
                    ]
                );
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn snapshot_keeps_failed_conversations_in_creation_order() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready").with_conversation_id("c1"),
            Direction::Received,
        );
        m.ingest(
            msg("inform", "worker", "boss", "ready").with_conversation_id("c2"),
            Direction::Received,
        );
        let fail = msg("refuse", "processor", "manager", "refuse(x)").with_conversation_id("c1");
        m.ingest(fail, Direction::Received);

        let rows = m.snapshot();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].conversation_id, "c1");
        assert_eq!(rows[0].status, ConversationStatus::Failed);
        assert_eq!(rows[1].conversation_id, "c2");
        assert_eq!(rows[0].counterpart("manager"), Some("processor"));
        assert_eq!(rows[0].counterpart("stranger"), None);
    }

    #[test]
    fn purge_drops_terminated_conversations_only() {
        let mut m = manager_with_pd();
        m.ingest(
            msg("inform", "processor", "manager", "ready").with_conversation_id("c1"),
            Direction::Received,
        );
        m.ingest(
            msg("inform", "worker", "boss", "ready").with_conversation_id("c2"),
            Direction::Received,
        );
        m.ingest(
            msg("refuse", "processor", "manager", "refuse(x)").with_conversation_id("c1"),
            Direction::Received,
        );

        assert_eq!(m.purge_terminated(), 1);
        assert!(m.conversation("c1").is_none());
        assert_eq!(m.conversation("c2").unwrap().current_state(), "Waiting");
    }

    #[test]
    fn history_cap_drops_oldest_entries() {
        let mut m = manager_with_pd();
        m.set_history_cap(Some(2));
        m.ingest(
            msg("inform", "processor", "manager", "ready"),
            Direction::Received,
        );
        m.ingest(
            msg("request", "manager", "processor", "process(d1)"),
            Direction::Sent,
        );
        m.ingest(
            msg("inform", "processor", "manager", "done(d1)"),
            Direction::Received,
        );

        let history = m.conversation("acre-1").unwrap().history();
        assert_eq!(history.len(), 2);
        assert_eq!(history[0].message.performative(), "request");
        assert_eq!(history[0].direction, Direction::Sent);
    }

    #[test]
    fn non_ground_content_is_rejected_at_construction() {
        let err = Message::new("a", "b", "inform", term("f(?x)")).unwrap_err();
        assert!(matches!(err, EngineError::NonGroundContent(_)));
        assert!(matches!(
            Message::new("", "b", "inform", term("x")),
            Err(EngineError::EmptyAgentId)
        ));
    }

    #[test]
    fn vickrey_auction_runs_to_completion() {
        let mut m = ConversationManager::new();
        m.add_protocol(vickrey());

        m.ingest(
            msg("cfp", "agent1", "agent2", "bidfor(lot1)"),
            Direction::Sent,
        );
        m.ingest(
            msg("propose", "agent2", "agent1", "bid(lot1,40)"),
            Direction::Received,
        );
        let events = m.ingest(
            msg("accept-proposal", "agent1", "agent2", "bid(lot1,40)"),
            Direction::Sent,
        );
        assert_eq!(kinds(&events), vec!["completed"]);
        let c = m.conversation("acre-1").unwrap();
        assert_eq!(c.current_state(), "accepted");
        assert_eq!(c.bindings().get("item"), Some(&term("lot1")));
        assert_eq!(c.bindings().get("amount"), Some(&term("40")));
    }

    #[test]
    fn bound_immutable_variables_constrain_later_messages() {
        let mut m = ConversationManager::new();
        m.add_protocol(vickrey());
        m.ingest(
            msg("cfp", "agent1", "agent2", "bidfor(lot1)"),
            Direction::Sent,
        );
        // A bid for a different item cannot match bid(?item,?amount) with
        // item already bound to lot1.
        let events = m.ingest(
            msg("propose", "agent2", "agent1", "bid(lot2,40)"),
            Direction::Received,
        );
        assert_eq!(kinds(&events), vec!["unmatched"]);
        assert_eq!(
            m.conversation("acre-1").unwrap().current_state(),
            "awaiting_bid"
        );
    }

    #[test]
    fn event_log_line_format() {
        let event = EngineEvent::Advanced {
            conversation: "acre-1".into(),
            protocol: pd_id(),
            from_state: "Start".into(),
            to_state: "Waiting".into(),
        };
        assert_eq!(
            event.log_line("2026-01-01T00:00:00Z"),
            "2026-01-01T00:00:00Z advanced acre-1 is.lill.acre/acre-processdocuments/0.1 Start -> Waiting"
        );
        let unmatched = EngineEvent::Unmatched {
            message: "inform a -> b x".into(),
            diagnostics: vec![],
        };
        assert_eq!(
            unmatched.log_line("t"),
            "t unmatched - - no conversation or protocol matches inform a -> b x"
        );
    }
}
