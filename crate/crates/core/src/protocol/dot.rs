//! Graphviz DOT rendering of resolved protocol state machines.

use super::ResolvedProtocol;

/// Renders the FSM as deterministic Graphviz DOT text: one node per state
/// (initial dashed, terminal double-circled) and one edge per transition
/// labeled `performative: content`. Output for equal protocols is
/// byte-identical.
pub fn export_dot(protocol: &ResolvedProtocol) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "digraph \"{}\" {{\n",
        escape(&protocol.id().to_string())
    ));
    out.push_str("    rankdir=LR;\n");
    out.push_str("    node [shape=circle];\n");
    for state in protocol.states() {
        let mut attrs = Vec::new();
        if state.classification().is_initial() {
            attrs.push("style=dashed");
        }
        if state.classification().is_terminal() {
            attrs.push("peripheries=2");
        }
        if attrs.is_empty() {
            out.push_str(&format!("    \"{}\";\n", escape(state.name())));
        } else {
            out.push_str(&format!(
                "    \"{}\" [{}];\n",
                escape(state.name()),
                attrs.join(",")
            ));
        }
    }
    for transition in protocol.transitions() {
        out.push_str(&format!(
            "    \"{}\" -> \"{}\" [label=\"{}\"];\n",
            escape(&transition.from_state),
            escape(&transition.to_state),
            escape(&format!(
                "{}: {}",
                transition.performative, transition.content
            ))
        ));
    }
    out.push_str("}\n");
    out
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::xml::parse_protocol_str;
    use crate::protocol::{resolve, Protocol, ProtocolId};

    #[test]
    fn node_and_edge_counts_match_the_model() {
        let protocol = parse_protocol_str(crate::protocol::xml::tests::VICKREY_XML).unwrap();
        let resolved = resolve(&protocol, &()).unwrap();
        let dot = export_dot(&resolved);
        let nodes = dot
            .lines()
            .filter(|l| l.contains(';') && !l.contains("->") && l.trim_start().starts_with('"'))
            .count();
        let edges = dot.lines().filter(|l| l.contains("->")).count();
        assert_eq!(nodes, resolved.state_count());
        assert_eq!(edges, resolved.transitions().len());
        assert!(dot.contains("\"start\" [style=dashed];"));
        assert!(dot.contains("\"accepted\" [peripheries=2];"));
        assert!(dot.contains("[label=\"cfp: bidfor(?item)\"]"));
    }

    #[test]
    fn transition_free_protocol_renders_nodes_only() {
        let mut protocol = Protocol::new(ProtocolId::new("ns", "noop", "1"));
        protocol.states = vec!["only".into()];
        let resolved = resolve(&protocol, &()).unwrap();
        let dot = export_dot(&resolved);
        assert!(dot.contains("\"only\" [style=dashed,peripheries=2];"));
        assert!(!dot.contains("->"));
    }

    #[test]
    fn export_is_deterministic() {
        let protocol = parse_protocol_str(crate::protocol::xml::tests::VICKREY_XML).unwrap();
        let a = export_dot(&resolve(&protocol, &()).unwrap());
        let b = export_dot(&resolve(&protocol, &()).unwrap());
        assert_eq!(a, b);
    }
}
