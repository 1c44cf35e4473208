//! Graphviz rendering of edge compute graphs and cell topologies.

use std::fmt::Write;

use super::compute::{Body, ComputeGraph, Mix, Stage};
use super::space::SpaceSpec;

struct Emitter {
    out: String,
    next: usize,
}

impl Emitter {
    fn node(&mut self, label: &str, kind: &str, shape: &str) -> String {
        let id = format!("n{}", self.next);
        self.next += 1;
        let _ = writeln!(
            self.out,
            "  {id} [label=\"{}\", kind=\"{kind}\", shape={shape}];",
            escape(label)
        );
        id
    }

    fn edge(&mut self, a: &str, b: &str, label: Option<&str>) {
        match label {
            Some(l) => {
                let _ = writeln!(self.out, "  {a} -> {b} [label=\"{}\"];", escape(l));
            }
            None => {
                let _ = writeln!(self.out, "  {a} -> {b};");
            }
        }
    }

    fn mix(&mut self, m: &Mix, input: &str, names: &[String]) -> Option<String> {
        let mut ends = Vec::new();
        for b in &m.branches {
            let Body::Path(stages) = &b.body else { continue };
            let shared = b.members.len() > 1;
            let mut cur = input.to_string();
            let mut first = true;
            for st in stages {
                let next = match st {
                    Stage::Unit(u) => {
                        let kind = if u.unit.is_conv() {
                            "conv"
                        } else if u.unit.count().total == 0 {
                            "free"
                        } else {
                            "nonconv"
                        };
                        let mut label = u.unit.to_string();
                        if shared {
                            label.push_str(&format!(" [shared x{}]", b.members.len()));
                        }
                        let id = self.node(&label, kind, "box");
                        let wl = first.then(|| weight_label(b.members, m.context, names));
                        self.edge(&cur, &id, wl.as_deref());
                        id
                    }
                    Stage::Merged(c) => {
                        let label = format!("merged conv {0}x{0} ({1} kernels)", c.target, c.members.len());
                        let id = self.node(&label, "conv", "box");
                        let wl = first.then(|| weight_label(b.members, m.context, names));
                        self.edge(&cur, &id, wl.as_deref());
                        id
                    }
                    Stage::Mix(inner) => match self.mix(inner, &cur, names) {
                        Some(id) => id,
                        None => continue,
                    },
                };
                cur = next;
                first = false;
            }
            if first {
                ends.push((cur, Some(weight_label(b.members, m.context, names))));
            } else {
                ends.push((cur, None));
            }
        }
        if ends.is_empty() {
            return None;
        }
        let sum = self.node(&format!("sum {}", m.context), "sum", "circle");
        for (e, l) in ends {
            self.edge(&e, &sum, l.as_deref());
        }
        Some(sum)
    }
}

fn weight_label(members: super::compute::CandidateSet, context: super::compute::CandidateSet, names: &[String]) -> String {
    let list = |s: super::compute::CandidateSet| {
        s.indices()
            .iter()
            .map(|&i| names.get(i).cloned().unwrap_or_else(|| i.to_string()))
            .collect::<Vec<_>>()
            .join(",")
    };
    if members == context {
        "1".into()
    } else if context.len() == names.len() {
        format!("p({})", list(members))
    } else {
        format!("p({} | {})", list(members), list(context))
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT digraph of one edge. Conv evaluations carry `kind="conv"`.
pub fn emit_dot(graph: &ComputeGraph, title: &str) -> String {
    let mut e = Emitter {
        out: String::new(),
        next: 0,
    };
    let _ = writeln!(e.out, "digraph \"{}\" {{", escape(title));
    e.out.push_str("  rankdir=TB;\n");
    let _ = writeln!(e.out, "  input [label=\"input\", kind=\"io\", shape=ellipse];");
    let _ = writeln!(e.out, "  output [label=\"output\", kind=\"io\", shape=ellipse];");
    if let Some(end) = e.mix(&graph.root, "input", &graph.candidate_names) {
        e.edge(&end, "output", None);
    }
    e.out.push_str("}\n");
    e.out
}

/// DOT digraph of a cell's node/edge topology.
pub fn emit_cell_dot(spec: &SpaceSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", escape(&spec.name));
    for n in 0..spec.nodes {
        let _ = writeln!(out, "  node{n} [label=\"node {n}\", shape=circle];");
    }
    for &(i, j) in &spec.ordered_edges() {
        let _ = writeln!(out, "  node{i} -> node{j} [label=\"{} ops\"];", spec.candidates.len());
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::graph::{Supernet, SpaceSpec};
    use crate::tensor::DType;

    /// Minimal DOT grammar check: `digraph ID { (node-stmt | edge-stmt | attr-stmt)* }`.
    /// Returns node statement ids and their attributes.
    pub fn parse_dot(text: &str) -> Result<Vec<(String, Vec<(String, String)>)>, String> {
        let toks = lex(text)?;
        let mut i = 0;
        let expect = |i: &mut usize, t: &str| -> Result<(), String> {
            if toks.get(*i).map(String::as_str) == Some(t) {
                *i += 1;
                Ok(())
            } else {
                Err(format!("expected `{t}` at token {i}, found {:?}", toks.get(*i)))
            }
        };
        expect(&mut i, "digraph")?;
        if toks.get(i).map(String::as_str) != Some("{") {
            i += 1;
        }
        expect(&mut i, "{")?;
        let mut nodes = Vec::new();
        while toks.get(i).map(String::as_str) != Some("}") {
            let id = toks.get(i).ok_or("unterminated graph")?.clone();
            if !is_id(&id) {
                return Err(format!("bad identifier `{id}`"));
            }
            i += 1;
            let mut is_edge = false;
            if toks.get(i).map(String::as_str) == Some("->") {
                i += 1;
                let to = toks.get(i).ok_or("dangling edge")?;
                if !is_id(to) {
                    return Err(format!("bad edge target `{to}`"));
                }
                i += 1;
                is_edge = true;
            }
            let mut attrs = Vec::new();
            if toks.get(i).map(String::as_str) == Some("=") {
                i += 2;
            } else if toks.get(i).map(String::as_str) == Some("[") {
                i += 1;
                loop {
                    let k = toks.get(i).ok_or("unterminated attribute list")?.clone();
                    if k == "]" {
                        i += 1;
                        break;
                    }
                    if toks.get(i + 1).map(String::as_str) != Some("=") {
                        return Err(format!("attribute `{k}` lacks `=`"));
                    }
                    let v = toks.get(i + 2).ok_or("missing attribute value")?.clone();
                    attrs.push((k, v.trim_matches('"').to_string()));
                    i += 3;
                    if toks.get(i).map(String::as_str) == Some(",") {
                        i += 1;
                    }
                }
            }
            expect(&mut i, ";")?;
            if !is_edge && id != "rankdir" {
                nodes.push((id, attrs));
            }
        }
        expect(&mut i, "}")?;
        if i != toks.len() {
            return Err("trailing tokens after graph".into());
        }
        Ok(nodes)
    }

    fn is_id(s: &str) -> bool {
        s.starts_with('"') || s.chars().all(|c| c.is_alphanumeric() || c == '_')
    }

    fn lex(text: &str) -> Result<Vec<String>, String> {
        let mut toks = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c == '"' {
                let mut s = String::from('"');
                i += 1;
                loop {
                    let ch = *chars.get(i).ok_or("unterminated string")?;
                    i += 1;
                    if ch == '\\' {
                        s.push(*chars.get(i).ok_or("bad escape")?);
                        i += 1;
                    } else if ch == '"' {
                        s.push('"');
                        break;
                    } else {
                        s.push(ch);
                    }
                }
                toks.push(s);
            } else if c == '-' && chars.get(i + 1) == Some(&'>') {
                toks.push("->".into());
                i += 2;
            } else if "{}[]=;,".contains(c) {
                toks.push(c.to_string());
                i += 1;
            } else if c.is_alphanumeric() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                toks.push(chars[start..i].iter().collect());
            } else {
                return Err(format!("unexpected character `{c}`"));
            }
        }
        Ok(toks)
    }

    pub fn conv_nodes(text: &str) -> usize {
        parse_dot(text)
            .expect("valid dot")
            .iter()
            .filter(|(_, a)| a.iter().any(|(k, v)| k == "kind" && v == "conv"))
            .count()
    }

    fn single_edge(candidates: &str) -> Supernet {
        let text = format!("space t\nnodes 2\nchannels 2\n{candidates}");
        let spec = SpaceSpec::parse(&text).unwrap();
        Supernet::build(&spec, 0, DType::F64).unwrap()
    }

    #[test]
    fn zero_only_edge_has_io_nodes_only() {
        let net = single_edge("candidate none = zero\n");
        let dot = emit_dot(&net.cells[0].edges[0].graph, "e");
        let nodes = parse_dot(&dot).unwrap();
        let ids: Vec<&str> = nodes.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["input", "output"]);
    }

    #[test]
    fn simplified_darts_edge_has_three_convs() {
        let spec = SpaceSpec::builtin("darts_cifar").unwrap();
        let mut net = Supernet::build(&spec, 0, DType::F32).unwrap();
        let before = emit_dot(&net.cells[0].edges[0].graph, "before");
        assert_eq!(conv_nodes(&before), 6);
        net.simplify();
        let after = emit_dot(&net.cells[0].edges[0].graph, "after");
        assert_eq!(conv_nodes(&after), 3);
        assert!(parse_dot(&emit_cell_dot(&spec)).is_ok());
    }

    #[test]
    fn parser_rejects_garbage() {
        assert!(parse_dot("digraph g { a -> ; }").is_err());
        assert!(parse_dot("graph g { }").is_err());
    }
}
