//! A brute-force mirror of the conversation algorithm, written directly from
//! the documented matching rules and kept independent of the engine's code
//! paths. Used to cross-check the engine's (conversation, transition)
//! selections on randomized traces.

use std::collections::BTreeMap;
use std::sync::Arc;

use acre_core::protocol::Transition;
use acre_core::{Message, Mutability, ProtocolId, ResolvedProtocol, Term};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleConversation {
    pub id: String,
    pub protocol: ProtocolId,
    pub state: String,
    pub bindings: BTreeMap<String, Term>,
    pub status: &'static str,
}

/// Comparable summary of what one ingested message did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    /// Conversations failed by this message, in discovery order.
    pub failed: Vec<String>,
    /// Final event: advanced, completed, unmatched or ambiguous.
    pub kind: &'static str,
    /// The committed (conversation id, transition) when the message advanced
    /// or completed a conversation.
    pub selected: Option<(String, TransitionKey)>,
    pub begun: bool,
}

pub type TransitionKey = (String, String, String, String, String, String);

pub fn transition_key(t: &Transition) -> TransitionKey {
    (
        t.from_state.clone(),
        t.to_state.clone(),
        t.sender.to_string(),
        t.receiver.to_string(),
        t.performative.clone(),
        t.content.to_string(),
    )
}

fn naive_matches(pattern: &Term, value: &Term, seen: &mut Vec<(String, Term)>) -> bool {
    match pattern {
        Term::Constant(text) => matches!(value, Term::Constant(v) if v == text),
        Term::Anonymous => true,
        Term::Variable { name, .. } => {
            if let Some((_, prior)) = seen.iter().find(|(n, _)| n == name) {
                prior == value
            } else {
                seen.push((name.clone(), value.clone()));
                true
            }
        }
        Term::Function { functor, args } => match value {
            Term::Function {
                functor: value_functor,
                args: value_args,
            } => {
                functor == value_functor
                    && args.len() == value_args.len()
                    && args
                        .iter()
                        .zip(value_args)
                        .all(|(p, v)| naive_matches(p, v, seen))
            }
            _ => false,
        },
    }
}

fn naive_apply(bindings: &BTreeMap<String, Term>, term: &Term) -> Term {
    match term {
        Term::Variable {
            name,
            mutability: Mutability::Immutable,
        } => bindings.get(name).cloned().unwrap_or_else(|| term.clone()),
        Term::Function { functor, args } => Term::Function {
            functor: functor.clone(),
            args: args.iter().map(|a| naive_apply(bindings, a)).collect(),
        },
        _ => term.clone(),
    }
}

fn naive_collect(pattern: &Term, value: &Term, out: &mut BTreeMap<String, Term>) {
    match pattern {
        Term::Variable { name, .. } => {
            out.insert(name.clone(), value.clone());
        }
        Term::Function { args, .. } => {
            if let Term::Function {
                args: value_args, ..
            } = value
            {
                for (p, v) in args.iter().zip(value_args) {
                    naive_collect(p, v, out);
                }
            }
        }
        _ => {}
    }
}

fn field_matches(pattern: &Term, value: &Term, bindings: &BTreeMap<String, Term>) -> bool {
    naive_matches(&naive_apply(bindings, pattern), value, &mut Vec::new())
}

enum Candidate {
    Existing(usize, Transition),
    Fresh(ProtocolId, Transition),
}

pub struct OracleManager {
    protocols: BTreeMap<ProtocolId, Arc<ResolvedProtocol>>,
    pub conversations: Vec<OracleConversation>,
    issued: u64,
}

impl OracleManager {
    pub fn new(protocols: &[Arc<ResolvedProtocol>]) -> Self {
        OracleManager {
            protocols: protocols
                .iter()
                .map(|p| (p.id().clone(), Arc::clone(p)))
                .collect(),
            conversations: Vec::new(),
            issued: 0,
        }
    }

    fn next_id(&mut self) -> String {
        loop {
            self.issued += 1;
            let candidate = format!("acre-{}", self.issued);
            if !self.conversations.iter().any(|c| c.id == candidate) {
                return candidate;
            }
        }
    }

    pub fn ingest(&mut self, message: &Message) -> Outcome {
        let sender = Term::constant(message.sender());
        let receiver = Term::constant(message.receiver());

        // Stage one: live conversations that can be advanced; a named
        // conversation that cannot be advanced fails.
        let mut failed = Vec::new();
        let mut candidates: Vec<Candidate> = Vec::new();
        for (index, conversation) in self.conversations.iter().enumerate() {
            if conversation.status != "active" {
                continue;
            }
            let named = message.conversation_id() == Some(conversation.id.as_str());
            if message.conversation_id().is_some() && !named {
                continue;
            }
            let protocol_consistent = message
                .protocol_id()
                .is_none_or(|p| *p == conversation.protocol);
            let mut matched = false;
            if protocol_consistent {
                let protocol = &self.protocols[&conversation.protocol];
                for transition in protocol.transitions() {
                    if transition.from_state != conversation.state {
                        continue;
                    }
                    if transition.performative == message.performative()
                        && field_matches(&transition.sender, &sender, &conversation.bindings)
                        && field_matches(&transition.receiver, &receiver, &conversation.bindings)
                        && field_matches(
                            &transition.content,
                            message.content(),
                            &conversation.bindings,
                        )
                    {
                        candidates.push(Candidate::Existing(index, transition.clone()));
                        matched = true;
                    }
                }
            }
            if named && !matched {
                failed.push(conversation.id.clone());
            }
        }
        for id in &failed {
            let conversation = self
                .conversations
                .iter_mut()
                .find(|c| &c.id == id)
                .expect("failed id exists");
            conversation.status = "failed";
        }

        // Stage two: initial transitions of known protocols, unless the
        // message reuses an existing conversation id or names an unknown
        // protocol.
        if candidates.is_empty() {
            let id_collision = message
                .conversation_id()
                .is_some_and(|c| self.conversations.iter().any(|x| x.id == c));
            let unknown_protocol = message
                .protocol_id()
                .is_some_and(|p| !self.protocols.contains_key(p));
            if !id_collision && !unknown_protocol {
                let empty = BTreeMap::new();
                for (protocol_id, protocol) in &self.protocols {
                    if message.protocol_id().is_some_and(|p| p != protocol_id) {
                        continue;
                    }
                    for transition in protocol.transitions() {
                        if transition.from_state != protocol.initial_state() {
                            continue;
                        }
                        if transition.performative == message.performative()
                            && field_matches(&transition.sender, &sender, &empty)
                            && field_matches(&transition.receiver, &receiver, &empty)
                            && field_matches(&transition.content, message.content(), &empty)
                        {
                            candidates
                                .push(Candidate::Fresh(protocol_id.clone(), transition.clone()));
                        }
                    }
                }
            }
        }

        // Stage three.
        match candidates.len() {
            0 => Outcome {
                failed,
                kind: "unmatched",
                selected: None,
                begun: false,
            },
            1 => {
                let candidate = candidates.pop().expect("one candidate");
                let (index, transition, begun) = match candidate {
                    Candidate::Existing(index, transition) => (index, transition, false),
                    Candidate::Fresh(protocol_id, transition) => {
                        let id = match message.conversation_id() {
                            Some(given) => given.to_string(),
                            None => self.next_id(),
                        };
                        let initial = self.protocols[&protocol_id].initial_state().to_string();
                        self.conversations.push(OracleConversation {
                            id,
                            protocol: protocol_id,
                            state: initial,
                            bindings: BTreeMap::new(),
                            status: "active",
                        });
                        (self.conversations.len() - 1, transition, true)
                    }
                };
                let terminal = {
                    let conversation = &self.conversations[index];
                    self.protocols[&conversation.protocol].is_terminal(&transition.to_state)
                };
                let conversation = &mut self.conversations[index];
                let mut delta = BTreeMap::new();
                for (pattern, value) in [
                    (&transition.sender, sender.clone()),
                    (&transition.receiver, receiver.clone()),
                    (&transition.content, message.content().clone()),
                ] {
                    let applied = naive_apply(&conversation.bindings, pattern);
                    naive_collect(&applied, &value, &mut delta);
                }
                conversation.bindings.extend(delta);
                conversation.state = transition.to_state.clone();
                if terminal {
                    conversation.status = "completed";
                }
                Outcome {
                    failed,
                    kind: if terminal { "completed" } else { "advanced" },
                    selected: Some((
                        self.conversations[index].id.clone(),
                        transition_key(&transition),
                    )),
                    begun,
                }
            }
            _ => Outcome {
                failed,
                kind: "ambiguous",
                selected: None,
                begun: false,
            },
        }
    }
}
