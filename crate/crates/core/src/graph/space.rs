//! Declarative search-space description and its line-oriented text format.
//!
//! ```text
//! space nasbench201
//! nodes 4
//! cells 2
//! reductions none
//! channels 8
//! classes 4
//! in_channels 3
//! candidate none = zero
//! candidate nor_conv_3x3 = relu conv(k=3) bn
//! ```
//!
//! Module tokens: `zero`, `identity`, `relu`, `bn`, `avgpool(k=3)`,
//! `maxpool(k=3)`, `conv(k=3,d=1,out=C)`, `dwconv(k=3,d=1)`, `pwconv(out=C)`.
//! An optional `edges 0-1 0-2 1-2 ...` line replaces the default of one edge
//! for every pair `i < j`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::module::{BasicModule, ConvForm, ModuleKind, OperationChain};
use crate::error::{Error, Result};

pub const MAX_CANDIDATES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub name: String,
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub explicit_edges: bool,
    pub cells: usize,
    pub reductions: Vec<usize>,
    pub channels: usize,
    pub classes: usize,
    pub in_channels: usize,
    pub candidates: Vec<OperationChain>,
}

const NASBENCH201: &str = "\
space nasbench201
nodes 4
cells 2
reductions none
channels 8
classes 4
in_channels 3
candidate none = zero
candidate skip_connect = identity
candidate nor_conv_1x1 = relu conv(k=1) bn
candidate nor_conv_3x3 = relu conv(k=3) bn
candidate avg_pool_3x3 = avgpool(k=3)
";

const DARTS_CIFAR: &str = "\
space darts_cifar
nodes 4
cells 3
reductions 1
channels 8
classes 4
in_channels 3
candidate none = zero
candidate max_pool_3x3 = maxpool(k=3)
candidate avg_pool_3x3 = avgpool(k=3)
candidate skip_connect = identity
candidate sep_conv_3x3 = relu dwconv(k=3) pwconv bn relu dwconv(k=3) pwconv bn
candidate sep_conv_5x5 = relu dwconv(k=5) pwconv bn relu dwconv(k=5) pwconv bn
candidate dil_conv_3x3 = relu dwconv(k=3,d=2) pwconv bn
candidate dil_conv_5x5 = relu dwconv(k=5,d=2) pwconv bn
";

pub const BUILTINS: [&str; 2] = ["nasbench201", "darts_cifar"];

impl SpaceSpec {
    pub fn builtin(name: &str) -> Option<SpaceSpec> {
        let text = match name {
            "nasbench201" => NASBENCH201,
            "darts_cifar" => DARTS_CIFAR,
            _ => return None,
        };
        Some(Self::parse(text).expect("built-in spaces are valid"))
    }

    /// A built-in name, or a path to a space file.
    pub fn load(arg: &str) -> Result<SpaceSpec> {
        if let Some(s) = Self::builtin(arg) {
            return Ok(s);
        }
        let path = Path::new(arg);
        if !path.exists() {
            return Err(Error::Config(format!(
                "space `{arg}` is neither a built-in ({}) nor an existing file",
                BUILTINS.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Single-cell space with all-pairs edges, used for generated spaces.
    pub fn single_edge(name: &str, channels: usize, candidates: Vec<OperationChain>) -> Result<SpaceSpec> {
        let spec = SpaceSpec {
            name: name.into(),
            nodes: 2,
            edges: vec![(0, 1)],
            explicit_edges: false,
            cells: 1,
            reductions: Vec::new(),
            channels,
            classes: 4,
            in_channels: 3,
            candidates,
        };
        spec.validate(0)?;
        Ok(spec)
    }

    /// Copy with a different cell width. Module widths equal to the old
    /// width follow it; explicit intermediate widths are kept.
    pub fn with_channels(&self, channels: usize) -> Result<SpaceSpec> {
        let old = self.channels;
        let mut s = self.clone();
        s.channels = channels;
        for c in &mut s.candidates {
            for m in &mut c.modules {
                if m.in_ch == old {
                    m.in_ch = channels;
                }
                if m.out_ch == old {
                    m.out_ch = channels;
                }
            }
        }
        s.validate(0)?;
        Ok(s)
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        self.reductions.contains(&cell)
    }

    pub fn has_reductions(&self) -> bool {
        !self.reductions.is_empty()
    }

    pub fn candidate_index(&self, name: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.name == name)
    }

    /// Edges in evaluation order: grouped by target node in topological
    /// order, sources ascending.
    pub fn ordered_edges(&self) -> Vec<(usize, usize)> {
        let mut e = self.edges.clone();
        let order = topo_order(self.nodes, &self.edges).expect("validated acyclic");
        let rank: Vec<usize> = {
            let mut r = vec![0; self.nodes];
            for (i, &n) in order.iter().enumerate() {
                r[n] = i;
            }
            r
        };
        e.sort_by_key(|&(i, j)| (rank[j], rank[i]));
        e
    }

    pub fn node_order(&self) -> Vec<usize> {
        topo_order(self.nodes, &self.edges).expect("validated acyclic")
    }

    pub fn parse(text: &str) -> Result<SpaceSpec> {
        let mut name = None;
        let mut nodes = None;
        let mut edges = None;
        let mut cells = 1;
        let mut reductions = Vec::new();
        let mut channels = 8;
        let mut classes = 10;
        let mut in_channels = 3;
        let mut raw_candidates: Vec<(usize, String, String)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Space { line: line_no, msg };
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            let num = |field: &str| -> Result<usize> {
                rest.parse::<usize>()
                    .map_err(|_| err(format!("field `{field}` expects a non-negative integer, got `{rest}`")))
            };
            match key {
                "space" => name = Some(rest.to_string()),
                "nodes" => nodes = Some(num("nodes")?),
                "cells" => cells = num("cells")?,
                "channels" => channels = num("channels")?,
                "classes" => classes = num("classes")?,
                "in_channels" => in_channels = num("in_channels")?,
                "reductions" => {
                    reductions = if rest == "none" || rest.is_empty() {
                        Vec::new()
                    } else {
                        rest.split(',')
                            .map(|p| {
                                p.trim().parse::<usize>().map_err(|_| {
                                    err(format!("field `reductions` has a non-integer entry `{}`", p.trim()))
                                })
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                }
                "edges" => {
                    let list = rest
                        .split_whitespace()
                        .map(|p| {
                            let (a, b) = p
                                .split_once('-')
                                .ok_or_else(|| err(format!("field `edges`: expected `i-j`, got `{p}`")))?;
                            let a = a.parse::<usize>().map_err(|_| err(format!("field `edges`: bad node `{a}`")))?;
                            let b = b.parse::<usize>().map_err(|_| err(format!("field `edges`: bad node `{b}`")))?;
                            Ok((a, b))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    edges = Some((line_no, list));
                }
                "candidate" => {
                    let (cname, chain) = rest
                        .split_once('=')
                        .ok_or_else(|| err("field `candidate` expects `NAME = module ...`".into()))?;
                    raw_candidates.push((line_no, cname.trim().to_string(), chain.trim().to_string()));
                }
                other => return Err(err(format!("unknown field `{other}`"))),
            }
        }

        let name = name.ok_or_else(|| Error::Space { line: 0, msg: "missing `space NAME` line".into() })?;
        let nodes = nodes.ok_or_else(|| Error::Space { line: 0, msg: "missing `nodes` line".into() })?;
        let mut candidates = Vec::with_capacity(raw_candidates.len());
        for (line, cname, chain) in &raw_candidates {
            if candidates.iter().any(|c: &OperationChain| &c.name == cname) {
                return Err(Error::Space { line: *line, msg: format!("duplicate candidate `{cname}`") });
            }
            let modules = parse_chain(chain, channels).map_err(|msg| Error::Space { line: *line, msg })?;
            candidates.push(OperationChain::new(cname.clone(), modules));
        }
        let (edge_line, edges, explicit) = match edges {
            Some((l, e)) => (l, e, true),
            None => (0, (1..nodes).flat_map(|j| (0..j).map(move |i| (i, j))).collect(), false),
        };
        let spec = SpaceSpec {
            name,
            nodes,
            edges,
            explicit_edges: explicit,
            cells,
            reductions,
            channels,
            classes,
            in_channels,
            candidates,
        };
        spec.validate(edge_line)?;
        Ok(spec)
    }

    fn validate(&self, edge_line: usize) -> Result<()> {
        let err = |line: usize, msg: String| Error::Space { line, msg };
        if self.nodes < 2 {
            return Err(err(0, format!("a cell needs at least 2 nodes, got {}", self.nodes)));
        }
        if self.cells == 0 || self.channels == 0 || self.classes < 2 || self.in_channels == 0 {
            return Err(err(0, "cells, channels and in_channels must be positive and classes >= 2".into()));
        }
        if let Some(&r) = self.reductions.iter().find(|&&r| r >= self.cells) {
            return Err(err(0, format!("reduction position {r} is beyond {} cells", self.cells)));
        }
        if self.candidates.is_empty() {
            return Err(err(0, "at least one candidate is required".into()));
        }
        if self.candidates.len() > MAX_CANDIDATES {
            return Err(err(0, format!("at most {MAX_CANDIDATES} candidates are supported")));
        }
        for c in &self.candidates {
            let out = c.modules.last().map_or(self.channels, |m| m.out_ch);
            let inp = c.modules.first().map_or(self.channels, |m| m.in_ch);
            if inp != self.channels || out != self.channels {
                return Err(err(0, format!(
                    "channel mismatch: candidate `{}` maps {inp} -> {out} channels, cell width is {}",
                    c.name, self.channels
                )));
            }
        }
        for &(i, j) in &self.edges {
            if i >= self.nodes || j >= self.nodes || i == j {
                return Err(err(edge_line, format!("edge {i}-{j} is invalid for {} nodes", self.nodes)));
            }
            if j == 0 {
                return Err(err(edge_line, format!("edge {i}-{j} enters the input node")));
            }
        }
        let mut seen = self.edges.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.edges.len() {
            return Err(err(edge_line, "duplicate edge".into()));
        }
        for j in 1..self.nodes {
            if !self.edges.iter().any(|&(_, t)| t == j) {
                return Err(err(edge_line, format!("node {j} has no incoming edge")));
            }
        }
        if topo_order(self.nodes, &self.edges).is_none() {
            return Err(err(edge_line, "cell graph is cyclic".into()));
        }
        Ok(())
    }
}

fn topo_order(nodes: usize, edges: &[(usize, usize)]) -> Option<Vec<usize>> {
    let mut indeg = vec![0usize; nodes];
    for &(_, j) in edges {
        indeg[j] += 1;
    }
    let mut order = Vec::with_capacity(nodes);
    let mut ready: Vec<usize> = (0..nodes).filter(|&n| indeg[n] == 0).collect();
    while let Some(n) = ready.iter().copied().min() {
        ready.retain(|&r| r != n);
        order.push(n);
        for &(i, j) in edges {
            if i == n {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    (order.len() == nodes).then_some(order)
}

/// Splits on whitespace outside parentheses.
fn tokenize(chain: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0i32;
    for ch in chain.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(format!("unbalanced `)` in `{chain}`"));
                }
                cur.push(ch);
            }
            c if c.is_whitespace() && depth == 0 => {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            c if c.is_whitespace() => {}
            c => cur.push(c),
        }
    }
    if depth != 0 {
        return Err(format!("unbalanced `(` in `{chain}`"));
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

fn parse_chain(chain: &str, channels: usize) -> std::result::Result<Vec<BasicModule>, String> {
    let tokens = tokenize(chain)?;
    if tokens.is_empty() {
        return Err("empty module chain (use `zero` for the zero operation)".into());
    }
    if tokens.iter().any(|t| t == "zero") {
        if tokens.len() != 1 {
            return Err("`zero` must be the only module of its chain".into());
        }
        return Ok(Vec::new());
    }
    let mut ch = channels;
    let mut modules = Vec::with_capacity(tokens.len());
    for tok in &tokens {
        let (kind, args) = match tok.split_once('(') {
            Some((k, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| format!("module `{tok}` has trailing characters after `)`"))?;
                (k, inner)
            }
            None => (tok.as_str(), ""),
        };
        let mut kv = Vec::new();
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("module `{kind}`: argument `{part}` is not `key=value`"))?;
            let v: usize = v
                .trim()
                .parse()
                .map_err(|_| format!("module `{kind}`: field `{}` expects a positive integer", k.trim()))?;
            if v == 0 {
                return Err(format!("module `{kind}`: field `{}` must be positive", k.trim()));
            }
            kv.push((k.trim().to_string(), v));
        }
        let allowed: &[&str] = match kind {
            "identity" | "relu" | "bn" => &[],
            "avgpool" | "maxpool" => &["k"],
            "conv" => &["k", "d", "out"],
            "dwconv" => &["k", "d"],
            "pwconv" => &["out"],
            other => return Err(format!("unknown module kind `{other}`")),
        };
        if let Some((k, _)) = kv.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            return Err(format!("module `{kind}` does not accept field `{k}`"));
        }
        let get = |key: &str| kv.iter().find(|(k, _)| k == key).map(|(_, v)| *v);
        let odd_k = |default: Option<usize>| -> std::result::Result<usize, String> {
            let k = get("k").or(default).ok_or_else(|| format!("module `{kind}` requires field `k`"))?;
            if k % 2 == 0 {
                return Err(format!("module `{kind}`: field `k` must be odd, got {k}"));
            }
            Ok(k)
        };
        let m = match kind {
            "identity" => BasicModule::new(ModuleKind::Identity, ch, ch),
            "relu" => BasicModule::new(ModuleKind::Relu, ch, ch),
            "bn" => BasicModule::new(ModuleKind::BatchNorm, ch, ch),
            "avgpool" => BasicModule::new(ModuleKind::AvgPool { k: odd_k(Some(3))? }, ch, ch),
            "maxpool" => BasicModule::new(ModuleKind::MaxPool { k: odd_k(Some(3))? }, ch, ch),
            "conv" => {
                let out = get("out").unwrap_or(ch);
                let kind = ModuleKind::Conv {
                    kernel_size: odd_k(None)?,
                    dilation: get("d").unwrap_or(1),
                    form: ConvForm::Dense,
                };
                BasicModule::new(kind, ch, out)
            }
            "dwconv" => {
                let kind = ModuleKind::Conv {
                    kernel_size: odd_k(None)?,
                    dilation: get("d").unwrap_or(1),
                    form: ConvForm::Depthwise,
                };
                BasicModule::new(kind, ch, ch)
            }
            "pwconv" => {
                let out = get("out").unwrap_or(ch);
                let kind = ModuleKind::Conv {
                    kernel_size: 1,
                    dilation: 1,
                    form: ConvForm::Pointwise,
                };
                BasicModule::new(kind, ch, out)
            }
            _ => unreachable!(),
        };
        ch = m.out_ch;
        modules.push(m);
    }
    Ok(modules)
}

fn module_token(m: &BasicModule, prev_out: usize) -> String {
    match m.kind {
        ModuleKind::Conv { kernel_size, dilation, form } => {
            let mut args = Vec::new();
            if form != ConvForm::Pointwise {
                args.push(format!("k={kernel_size}"));
                if dilation != 1 {
                    args.push(format!("d={dilation}"));
                }
            }
            if form != ConvForm::Depthwise && m.out_ch != prev_out {
                args.push(format!("out={}", m.out_ch));
            }
            let name = match form {
                ConvForm::Dense => "conv",
                ConvForm::Depthwise => "dwconv",
                ConvForm::Pointwise => "pwconv",
            };
            if args.is_empty() {
                name.to_string()
            } else {
                format!("{name}({})", args.join(","))
            }
        }
        ModuleKind::AvgPool { k } => format!("avgpool(k={k})"),
        ModuleKind::MaxPool { k } => format!("maxpool(k={k})"),
        ModuleKind::Zero => "zero".into(),
        ModuleKind::Identity => "identity".into(),
        ModuleKind::Relu => "relu".into(),
        ModuleKind::BatchNorm => "bn".into(),
    }
}

impl fmt::Display for SpaceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "space {}", self.name)?;
        writeln!(f, "nodes {}", self.nodes)?;
        if self.explicit_edges {
            let e: Vec<String> = self.edges.iter().map(|(i, j)| format!("{i}-{j}")).collect();
            writeln!(f, "edges {}", e.join(" "))?;
        }
        writeln!(f, "cells {}", self.cells)?;
        if self.reductions.is_empty() {
            writeln!(f, "reductions none")?;
        } else {
            let r: Vec<String> = self.reductions.iter().map(ToString::to_string).collect();
            writeln!(f, "reductions {}", r.join(","))?;
        }
        writeln!(f, "channels {}", self.channels)?;
        writeln!(f, "classes {}", self.classes)?;
        writeln!(f, "in_channels {}", self.in_channels)?;
        for c in &self.candidates {
            let mut prev = self.channels;
            let toks: Vec<String> = if c.modules.is_empty() {
                vec!["zero".into()]
            } else {
                c.modules
                    .iter()
                    .map(|m| {
                        let t = module_token(m, prev);
                        prev = m.out_ch;
                        t
                    })
                    .collect()
            };
            writeln!(f, "candidate {} = {}", c.name, toks.join(" "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_nasbench201_shape() {
        let s = SpaceSpec::builtin("nasbench201").unwrap();
        assert_eq!(s.candidates.len(), 5);
        assert_eq!(s.edges.len(), 6);
        assert_eq!(s.nodes, 4);
    }

    #[test]
    fn builtin_darts_counts() {
        let s = SpaceSpec::builtin("darts_cifar").unwrap();
        assert_eq!(s.candidates.len(), 8);
        let total: crate::cost::ModuleCount = s.candidates.iter().map(|c| c.count()).sum();
        assert_eq!(total.as_tuple(), (6, 14, 20));
    }

    #[test]
    fn bn_with_kernel_size_names_the_field() {
        let text = "space x\nnodes 2\ncandidate a = relu bn(k=3)\n";
        match SpaceSpec::parse(text) {
            Err(Error::Space { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("`k`"), "{msg}");
                assert!(msg.contains("bn"), "{msg}");
            }
            other => panic!("expected a space error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_and_cycle_are_rejected() {
        let bad_kind = "space x\nnodes 2\ncandidate a = swish\n";
        assert!(matches!(SpaceSpec::parse(bad_kind), Err(Error::Space { line: 3, .. })));
        let cyclic = "space x\nnodes 3\nedges 0-1 1-2 2-1\ncandidate a = relu\n";
        match SpaceSpec::parse(cyclic) {
            Err(Error::Space { msg, .. }) => assert!(msg.contains("cyclic")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let text = "space x\nnodes 2\nchannels 4\ncandidate a = conv(k=3,out=6)\n";
        match SpaceSpec::parse(text) {
            Err(Error::Space { msg, .. }) => assert!(msg.contains("channel mismatch")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn display_round_trips() {
        for name in BUILTINS {
            let s = SpaceSpec::builtin(name).unwrap();
            assert_eq!(SpaceSpec::parse(&s.to_string()).unwrap(), s);
        }
    }
}
