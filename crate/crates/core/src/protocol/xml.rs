//! The XML protocol definition format: reader and writer.
//!
//! A definition is a `<protocol>` root holding `<namespace>`, `<name>` and
//! `<version>` identity tags, optional `<import namespace name version/>`
//! elements, a `<states>` section of `<state name/>` elements and a
//! `<transitions>` section of `<transition/>` elements carrying up to six
//! attributes: `performative`, `from-state` and `to-state` are mandatory;
//! `sender`, `receiver` and `content` default to the anonymous variable.
//! Attribute values use the textual term grammar; a `from-state` of the form
//! `/regex/` expands at resolve time.
//!
//! Validation is structural and performed here; the schema document shipped
//! under `schema/` describes the same format for external tooling.

use quick_xml::events::{BytesStart, Event};
use quick_xml::{Reader, XmlVersion};

use super::{Protocol, ProtocolError, ProtocolId, Transition};
use crate::term::{parse_term, Term};

/// Reads a protocol definition. Imports are captured, not resolved.
pub fn parse_protocol(xml: &[u8]) -> Result<Protocol, ProtocolError> {
    let text =
        std::str::from_utf8(xml).map_err(|e| ProtocolError::Xml(format!("invalid UTF-8: {e}")))?;
    parse_protocol_str(text)
}

/// [`parse_protocol`] over an in-memory string.
pub fn parse_protocol_str(text: &str) -> Result<Protocol, ProtocolError> {
    let mut reader = Reader::from_str(text);
    find_root(&mut reader)?;

    let mut namespace: Option<String> = None;
    let mut name: Option<String> = None;
    let mut version: Option<String> = None;
    let mut imports: Vec<ProtocolId> = Vec::new();
    let mut states: Vec<String> = Vec::new();
    let mut transitions: Vec<Transition> = Vec::new();

    loop {
        match next_event(&mut reader)? {
            Event::Start(e) => match local_name(&e) {
                b"namespace" => namespace = Some(read_text(&mut reader, &e)?),
                b"name" => name = Some(read_text(&mut reader, &e)?),
                b"version" => version = Some(read_text(&mut reader, &e)?),
                b"import" => {
                    imports.push(parse_import(&e)?);
                    skip_element(&mut reader, &e)?;
                }
                b"states" => parse_states(&mut reader, &mut states)?,
                b"transitions" => parse_transitions(&mut reader, &mut transitions)?,
                _ => return Err(unexpected(&e)),
            },
            Event::Empty(e) => match local_name(&e) {
                b"import" => imports.push(parse_import(&e)?),
                b"states" | b"transitions" => {}
                _ => return Err(unexpected(&e)),
            },
            Event::End(e) if local_name_end(&e) == b"protocol" => break,
            Event::End(e) => {
                return Err(ProtocolError::Xml(format!(
                    "unexpected closing tag </{}>",
                    String::from_utf8_lossy(e.name().as_ref())
                )))
            }
            Event::Eof => {
                return Err(ProtocolError::Xml(
                    "unexpected end of file inside <protocol>".into(),
                ))
            }
            _ => {}
        }
    }

    let namespace = require_identity(namespace, "namespace")?;
    let name = require_identity(name, "name")?;
    let version = require_identity(version, "version")?;

    Ok(Protocol {
        id: ProtocolId::new(namespace, name, version),
        imports,
        states,
        transitions,
    })
}

fn find_root(reader: &mut Reader<&[u8]>) -> Result<(), ProtocolError> {
    loop {
        match next_event(reader)? {
            Event::Start(e) => {
                return if local_name(&e) == b"protocol" {
                    Ok(())
                } else {
                    Err(unexpected(&e))
                };
            }
            Event::Empty(e) => {
                return if local_name(&e) == b"protocol" {
                    Err(ProtocolError::MissingElement("namespace"))
                } else {
                    Err(unexpected(&e))
                };
            }
            Event::Eof => return Err(ProtocolError::Xml("no root element".into())),
            _ => {}
        }
    }
}

fn parse_states(reader: &mut Reader<&[u8]>, states: &mut Vec<String>) -> Result<(), ProtocolError> {
    loop {
        match next_event(reader)? {
            Event::Empty(e) | Event::Start(e) if local_name(&e) == b"state" => {
                let name = parse_state(&e)?;
                // A repeated declaration within one file names the same state.
                if !states.contains(&name) {
                    states.push(name);
                }
            }
            Event::Start(e) | Event::Empty(e) => return Err(unexpected(&e)),
            Event::End(e) if local_name_end(&e) == b"states" => return Ok(()),
            Event::End(_) => {}
            Event::Eof => {
                return Err(ProtocolError::Xml(
                    "unexpected end of file inside <states>".into(),
                ))
            }
            _ => {}
        }
    }
}

fn parse_transitions(
    reader: &mut Reader<&[u8]>,
    transitions: &mut Vec<Transition>,
) -> Result<(), ProtocolError> {
    loop {
        match next_event(reader)? {
            Event::Empty(e) | Event::Start(e) if local_name(&e) == b"transition" => {
                transitions.push(parse_transition(&e)?);
            }
            Event::Start(e) | Event::Empty(e) => return Err(unexpected(&e)),
            Event::End(e) if local_name_end(&e) == b"transitions" => return Ok(()),
            Event::End(_) => {}
            Event::Eof => {
                return Err(ProtocolError::Xml(
                    "unexpected end of file inside <transitions>".into(),
                ))
            }
            _ => {}
        }
    }
}

fn parse_state(element: &BytesStart) -> Result<String, ProtocolError> {
    let mut name: Option<String> = None;
    for attr in element.attributes() {
        let attr = attr.map_err(|e| ProtocolError::Xml(e.to_string()))?;
        match attr.key.local_name().as_ref() {
            b"name" => name = Some(attr_value(&attr)?),
            other => {
                return Err(ProtocolError::UnknownAttribute {
                    element: "state",
                    attribute: String::from_utf8_lossy(other).into_owned(),
                })
            }
        }
    }
    name.filter(|n| !n.is_empty())
        .ok_or(ProtocolError::MissingAttribute {
            element: "state",
            attribute: "name",
        })
}

fn parse_import(element: &BytesStart) -> Result<ProtocolId, ProtocolError> {
    let mut namespace: Option<String> = None;
    let mut name: Option<String> = None;
    let mut version: Option<String> = None;
    for attr in element.attributes() {
        let attr = attr.map_err(|e| ProtocolError::Xml(e.to_string()))?;
        match attr.key.local_name().as_ref() {
            b"namespace" => namespace = Some(attr_value(&attr)?),
            b"name" => name = Some(attr_value(&attr)?),
            b"version" => version = Some(attr_value(&attr)?),
            other => {
                return Err(ProtocolError::UnknownAttribute {
                    element: "import",
                    attribute: String::from_utf8_lossy(other).into_owned(),
                })
            }
        }
    }
    let missing = |attribute| ProtocolError::MissingAttribute {
        element: "import",
        attribute,
    };
    let namespace = namespace
        .filter(|s| !s.is_empty())
        .ok_or(missing("namespace"))?;
    let name = name.filter(|s| !s.is_empty()).ok_or(missing("name"))?;
    let version = version
        .filter(|s| !s.is_empty())
        .ok_or(missing("version"))?;
    Ok(ProtocolId::new(namespace, name, version))
}

fn parse_transition(element: &BytesStart) -> Result<Transition, ProtocolError> {
    let mut performative: Option<String> = None;
    let mut from_state: Option<String> = None;
    let mut to_state: Option<String> = None;
    let mut sender: Option<String> = None;
    let mut receiver: Option<String> = None;
    let mut content: Option<String> = None;

    for attr in element.attributes() {
        let attr = attr.map_err(|e| ProtocolError::Xml(e.to_string()))?;
        match attr.key.local_name().as_ref() {
            b"performative" => performative = Some(attr_value(&attr)?),
            b"from-state" => from_state = Some(attr_value(&attr)?),
            b"to-state" => to_state = Some(attr_value(&attr)?),
            b"sender" => sender = Some(attr_value(&attr)?),
            b"receiver" => receiver = Some(attr_value(&attr)?),
            b"content" => content = Some(attr_value(&attr)?),
            other => {
                return Err(ProtocolError::UnknownAttribute {
                    element: "transition",
                    attribute: String::from_utf8_lossy(other).into_owned(),
                })
            }
        }
    }

    let missing = |attribute| ProtocolError::MissingAttribute {
        element: "transition",
        attribute,
    };
    let performative = performative
        .filter(|s| !s.is_empty())
        .ok_or(missing("performative"))?;
    if !crate::term::is_bare_ident(&performative) {
        return Err(ProtocolError::InvalidPerformative(performative));
    }
    let from_state = from_state
        .filter(|s| !s.is_empty())
        .ok_or(missing("from-state"))?;
    let to_state = to_state
        .filter(|s| !s.is_empty())
        .ok_or(missing("to-state"))?;
    if to_state.len() >= 2 && to_state.starts_with('/') && to_state.ends_with('/') {
        return Err(ProtocolError::RegexInToState(to_state));
    }

    Ok(Transition {
        from_state,
        to_state,
        sender: parse_term_attr("sender", sender)?,
        receiver: parse_term_attr("receiver", receiver)?,
        performative: performative.to_lowercase(),
        content: parse_term_attr("content", content)?,
    })
}

fn parse_term_attr(attribute: &str, value: Option<String>) -> Result<Term, ProtocolError> {
    match value {
        None => Ok(Term::Anonymous),
        Some(text) => parse_term(&text).map_err(|source| ProtocolError::InvalidTerm {
            attribute: attribute.to_string(),
            source,
        }),
    }
}

fn attr_value(attr: &quick_xml::events::attributes::Attribute) -> Result<String, ProtocolError> {
    attr.normalized_value(XmlVersion::Implicit1_0)
        .map(|v| v.into_owned())
        .map_err(|e| ProtocolError::Xml(e.to_string()))
}

fn next_event<'i>(reader: &mut Reader<&'i [u8]>) -> Result<Event<'i>, ProtocolError> {
    loop {
        let event = reader.read_event().map_err(|e| {
            ProtocolError::Xml(format!("{e} at position {}", reader.buffer_position()))
        })?;
        match event {
            Event::Text(t) => {
                let text = t
                    .xml10_content()
                    .map_err(|e| ProtocolError::Xml(e.to_string()))?;
                if !text.trim().is_empty() {
                    return Err(ProtocolError::Xml(format!(
                        "unexpected text `{}`",
                        text.trim()
                    )));
                }
            }
            Event::Comment(_) | Event::Decl(_) | Event::PI(_) | Event::DocType(_) => {}
            other => return Ok(other),
        }
    }
}

fn read_text(reader: &mut Reader<&[u8]>, element: &BytesStart) -> Result<String, ProtocolError> {
    let text = reader
        .read_text(element.name())
        .map_err(|e| ProtocolError::Xml(e.to_string()))?;
    let content = text
        .xml10_content()
        .map_err(|e| ProtocolError::Xml(e.to_string()))?;
    Ok(content.trim().to_string())
}

fn skip_element(reader: &mut Reader<&[u8]>, element: &BytesStart) -> Result<(), ProtocolError> {
    reader
        .read_to_end(element.name())
        .map(|_| ())
        .map_err(|e| ProtocolError::Xml(e.to_string()))
}

fn local_name<'e>(element: &'e BytesStart) -> &'e [u8] {
    element.name().local_name().into_inner()
}

fn local_name_end<'e>(element: &'e quick_xml::events::BytesEnd) -> &'e [u8] {
    element.name().local_name().into_inner()
}

fn unexpected(element: &BytesStart) -> ProtocolError {
    ProtocolError::UnexpectedElement(String::from_utf8_lossy(element.name().as_ref()).into_owned())
}

fn require_identity(value: Option<String>, tag: &'static str) -> Result<String, ProtocolError> {
    match value {
        Some(text) if !text.is_empty() => Ok(text),
        Some(_) => Err(ProtocolError::InvalidIdentity(format!("empty <{tag}>"))),
        None => Err(ProtocolError::MissingElement(tag)),
    }
}

/// Renders a protocol definition back to XML. The output parses to an equal
/// protocol: imports are preserved rather than inlined, and sender, receiver
/// and content attributes are omitted when they are the anonymous default.
pub fn write_protocol(protocol: &Protocol) -> String {
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\"?>\n");
    out.push_str("<protocol>\n");
    out.push_str(&format!(
        "    <namespace>{}</namespace>\n",
        escape(protocol.id.namespace())
    ));
    out.push_str(&format!(
        "    <name>{}</name>\n",
        escape(protocol.id.name())
    ));
    out.push_str(&format!(
        "    <version>{}</version>\n",
        escape(protocol.id.version())
    ));
    for import in &protocol.imports {
        out.push_str(&format!(
            "    <import namespace=\"{}\" name=\"{}\" version=\"{}\"/>\n",
            escape(import.namespace()),
            escape(import.name()),
            escape(import.version())
        ));
    }
    if protocol.states.is_empty() {
        out.push_str("    <states/>\n");
    } else {
        out.push_str("    <states>\n");
        for state in &protocol.states {
            out.push_str(&format!("        <state name=\"{}\"/>\n", escape(state)));
        }
        out.push_str("    </states>\n");
    }
    if protocol.transitions.is_empty() {
        out.push_str("    <transitions/>\n");
    } else {
        out.push_str("    <transitions>\n");
        for transition in &protocol.transitions {
            out.push_str("        <transition");
            out.push_str(&format!(
                " performative=\"{}\"",
                escape(&transition.performative)
            ));
            out.push_str(&format!(
                " from-state=\"{}\"",
                escape(&transition.from_state)
            ));
            out.push_str(&format!(" to-state=\"{}\"", escape(&transition.to_state)));
            if transition.sender != Term::Anonymous {
                out.push_str(&format!(
                    " sender=\"{}\"",
                    escape(&transition.sender.to_string())
                ));
            }
            if transition.receiver != Term::Anonymous {
                out.push_str(&format!(
                    " receiver=\"{}\"",
                    escape(&transition.receiver.to_string())
                ));
            }
            if transition.content != Term::Anonymous {
                out.push_str(&format!(
                    " content=\"{}\"",
                    escape(&transition.content.to_string())
                ));
            }
            out.push_str("/>\n");
        }
        out.push_str("    </transitions>\n");
    }
    out.push_str("</protocol>\n");
    out
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            other => out.push(other),
        }
    }
    out
}
