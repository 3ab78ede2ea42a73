use std::fmt::Write;

use super::StateGraph;

/// Graphviz rendering: nodes labelled by id, edges by `client/action/decision`.
pub fn to_dot(g: &StateGraph) -> String {
    let mut out = String::with_capacity(64 + 40 * g.edge_count());
    out.push_str("digraph statespace {\n");
    for (n, _) in g.states() {
        let _ = writeln!(out, "  n{n} [label=\"{n}\"];");
    }
    for (i, e) in g.edges().iter().enumerate() {
        let label = g.label(i as u32).short().replace('"', "\\\"");
        let _ = writeln!(out, "  n{} -> n{} [label=\"{label}\"];", e.from, e.to);
    }
    out.push_str("}\n");
    out
}
