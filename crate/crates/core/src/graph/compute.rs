//! Per-edge compute graphs.
//!
//! An edge is a [`Mix`]: a weighted sum over branches, each owning a subset of
//! the edge's candidates. A branch with members `S` inside a mix with context
//! `C` is weighted by `mass(S) / mass(C)`, where `mass` sums the softmax
//! weights of the listed candidates. The vanilla edge is one mix over all
//! candidates with one branch per candidate; rewrites nest mixes inside
//! shared stages.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::module::{OperationChain, Unit};
use super::params::{BnId, ParamId};
use crate::cost::ModuleCount;

/// Set of candidate indices of one edge (at most 64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CandidateSet(u64);

impl CandidateSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn single(i: usize) -> Self {
        Self(1 << i)
    }

    pub fn all(n: usize) -> Self {
        if n >= 64 {
            Self(u64::MAX)
        } else {
            Self((1u64 << n) - 1)
        }
    }

    pub fn from_indices(idx: &[usize]) -> Self {
        Self(idx.iter().fold(0, |acc, &i| acc | (1 << i)))
    }

    pub fn union(self, o: Self) -> Self {
        Self(self.0 | o.0)
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn is_subset(self, o: Self) -> bool {
        self.0 & !o.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn indices(self) -> Vec<usize> {
        (0..64).filter(|&i| self.contains(i)).collect()
    }
}

impl PartialOrd for CandidateSet {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Lexicographic order of the sorted index lists.
impl Ord for CandidateSet {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.indices().cmp(&other.indices())
    }
}

impl fmt::Display for CandidateSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let idx: Vec<String> = self.indices().iter().map(ToString::to_string).collect();
        write!(f, "{{{}}}", idx.join(","))
    }
}

/// A unit bound to its parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitInstance {
    pub unit: Unit,
    /// Conv kernels in module order (one for a conv, two for a separable pair).
    pub params: Vec<ParamId>,
    pub bn: Option<BnId>,
}

impl UnitInstance {
    /// Sharing equality: identical structure and, for parameterized units,
    /// identical parameters.
    pub fn shares_with(&self, other: &UnitInstance) -> bool {
        self.unit == other.unit && self.params == other.params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedMember {
    pub members: CandidateSet,
    pub unit: UnitInstance,
}

/// Several parallel conv units evaluated as one conv with a weighted kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedConv {
    pub members: Vec<MergedMember>,
    pub target: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    /// Union of kernel positions that any member can populate.
    pub taps: Arc<[(usize, usize)]>,
}

impl MergedConv {
    pub fn candidates(&self) -> CandidateSet {
        self.members
            .iter()
            .fold(CandidateSet::empty(), |s, m| s.union(m.members))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Unit(UnitInstance),
    Mix(Mix),
    Merged(MergedConv),
}

impl Stage {
    pub fn count(&self) -> ModuleCount {
        match self {
            Stage::Unit(u) => u.unit.count(),
            Stage::Mix(m) => m.count(),
            Stage::Merged(_) => ModuleCount::new(1, 0),
        }
    }

    /// Whether two stages compute the same function and may be shared.
    pub fn shares_with(&self, other: &Stage) -> bool {
        match (self, other) {
            (Stage::Unit(a), Stage::Unit(b)) => a.shares_with(b),
            _ => false,
        }
    }

    pub fn as_unit(&self) -> Option<&UnitInstance> {
        match self {
            Stage::Unit(u) => Some(u),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Zero,
    /// Stages applied in series; an empty path is the identity.
    Path(Vec<Stage>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub members: CandidateSet,
    pub body: Body,
}

impl Branch {
    pub fn stages(&self) -> Option<&[Stage]> {
        match &self.body {
            Body::Zero => None,
            Body::Path(s) => Some(s),
        }
    }

    pub fn count(&self) -> ModuleCount {
        self.stages()
            .map_or_else(ModuleCount::default, |s| s.iter().map(Stage::count).sum())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub context: CandidateSet,
    pub branches: Vec<Branch>,
}

impl Mix {
    pub fn count(&self) -> ModuleCount {
        self.branches.iter().map(Branch::count).sum()
    }

    /// Pre-order walk over this mix and every nested mix; stops at the first
    /// call returning `true`.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mix) -> bool) -> bool {
        if f(self) {
            return true;
        }
        for b in &mut self.branches {
            if let Body::Path(stages) = &mut b.body {
                for s in stages {
                    if let Stage::Mix(m) = s {
                        if m.visit_mut(f) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Mix)) {
        f(self);
        for b in &self.branches {
            if let Some(stages) = b.stages() {
                for s in stages {
                    if let Stage::Mix(m) = s {
                        m.visit(f);
                    }
                }
            }
        }
    }

    pub fn merged_convs(&self) -> Vec<&MergedConv> {
        let mut out = Vec::new();
        collect_merged(self, &mut out);
        out
    }
}

fn collect_merged<'a>(m: &'a Mix, out: &mut Vec<&'a MergedConv>) {
    for b in &m.branches {
        if let Some(stages) = b.stages() {
            for s in stages {
                match s {
                    Stage::Merged(c) => out.push(c),
                    Stage::Mix(inner) => collect_merged(inner, out),
                    Stage::Unit(_) => {}
                }
            }
        }
    }
}

/// Executable form of one searchable edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    pub root: Mix,
    pub candidate_names: Vec<String>,
    pub stride: usize,
    pub channels: usize,
}

impl ComputeGraph {
    /// Vanilla weighted sum over candidate chains whose units are already
    /// bound to parameters.
    pub fn vanilla(chains: &[OperationChain], bound: Vec<Option<Vec<UnitInstance>>>, stride: usize, channels: usize) -> Self {
        let branches = bound
            .into_iter()
            .enumerate()
            .map(|(i, units)| Branch {
                members: CandidateSet::single(i),
                body: match units {
                    None => Body::Zero,
                    Some(u) => Body::Path(u.into_iter().map(Stage::Unit).collect()),
                },
            })
            .collect();
        Self {
            root: Mix {
                context: CandidateSet::all(chains.len()),
                branches,
            },
            candidate_names: chains.iter().map(|c| c.name.clone()).collect(),
            stride,
            channels,
        }
    }

    pub fn num_candidates(&self) -> usize {
        self.candidate_names.len()
    }

    pub fn count(&self) -> ModuleCount {
        self.root.count()
    }

    /// Indented text rendering of the mix tree.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        describe_mix(&self.root, 0, &mut s);
        s
    }
}

fn describe_mix(m: &Mix, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    out.push_str(&format!("{pad}mix {}\n", m.context));
    for b in &m.branches {
        match &b.body {
            Body::Zero => out.push_str(&format!("{pad}  branch {} zero\n", b.members)),
            Body::Path(stages) => {
                out.push_str(&format!("{pad}  branch {}\n", b.members));
                for st in stages {
                    match st {
                        Stage::Unit(u) => out.push_str(&format!("{pad}    {}\n", u.unit)),
                        Stage::Merged(c) => out.push_str(&format!(
                            "{pad}    merged conv t={} members={}\n",
                            c.target,
                            c.members.len()
                        )),
                        Stage::Mix(inner) => describe_mix(inner, depth + 2, out),
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidate_set_order_is_lexicographic() {
        let a = CandidateSet::from_indices(&[0, 5]);
        let b = CandidateSet::from_indices(&[1, 2]);
        assert!(a < b);
        assert_eq!(a.union(b).indices(), vec![0, 1, 2, 5]);
        assert!(CandidateSet::single(2).is_subset(b));
        assert_eq!(CandidateSet::all(64).len(), 64);
    }
}
