//! Topology rewrites of a single edge: shared prefix/suffix extraction (PMS),
//! shared middle extraction (FMS) and the recursive driver that ends with
//! kernel merging.

use serde::{Deserialize, Serialize};

use crate::cost::ModuleCount;
use crate::error::{Error, Result};
use crate::graph::{Body, Branch, CandidateSet, ComputeGraph, Mix, Stage};
use crate::reparam::{reparameterize, EPS_P};

/// Conditional re-weighting induced by grouping the candidates `I_S`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedWeights {
    /// `β_i / p_S` for `i ∈ I_S`, in ascending index order.
    pub beta1: Vec<f64>,
    /// `β_i` for `i ∉ I_S`, in ascending index order.
    pub beta2: Vec<f64>,
    pub beta_s: f64,
    pub p_s: f64,
    /// `p_S` fell below the clamp and `beta1` was computed against it.
    pub degenerate: bool,
}

pub fn derive_weights(beta: &[f64], members: &[usize]) -> Result<DerivedWeights> {
    if members.is_empty() {
        return Err(Error::Config("derive_weights needs a nonempty member set".into()));
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= beta.len()) {
        return Err(Error::Config(format!("member {bad} out of range for {} weights", beta.len())));
    }
    let set = CandidateSet::from_indices(members);
    let p_s: f64 = set.indices().iter().map(|&i| beta[i]).sum();
    let denom = p_s.max(EPS_P);
    Ok(DerivedWeights {
        beta1: set.indices().iter().map(|&i| beta[i] / denom).collect(),
        beta2: (0..beta.len()).filter(|&i| !set.contains(i)).map(|i| beta[i]).collect(),
        beta_s: p_s,
        p_s,
        degenerate: p_s < EPS_P,
    })
}

/// Branches of one mix sharing a leading and trailing run of stages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedGroup {
    /// Positions in `Mix::branches`.
    pub branches: Vec<usize>,
    pub candidates: CandidateSet,
    pub prefix: usize,
    pub suffix: usize,
    pub savings: usize,
}

/// Branches of one mix with equal stage counts sharing a middle run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FloatingMatch {
    pub branches: Vec<usize>,
    pub candidates: CandidateSet,
    pub start: usize,
    pub len: usize,
    pub savings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteEntry {
    pub pass: String,
    pub savings: usize,
    pub before: ModuleCount,
    pub after: ModuleCount,
    pub members: Vec<String>,
    pub shared: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RewriteLog {
    pub initial: ModuleCount,
    pub entries: Vec<RewriteEntry>,
    pub final_count: ModuleCount,
}

impl RewriteLog {
    /// Count after each entry, starting with the initial count.
    pub fn trajectory(&self) -> Vec<ModuleCount> {
        std::iter::once(self.initial)
            .chain(self.entries.iter().map(|e| e.after))
            .collect()
    }
}

fn cost(stages: &[Stage]) -> usize {
    stages.iter().map(|s| s.count().total).sum()
}

fn runs_share(a: &[Stage], b: &[Stage]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shares_with(y))
}

fn eligible(mix: &Mix) -> Vec<(usize, &[Stage])> {
    mix.branches
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.stages().map(|s| (i, s)))
        .collect()
}

fn union_of(mix: &Mix, branches: &[usize]) -> CandidateSet {
    branches
        .iter()
        .fold(CandidateSet::empty(), |s, &i| s.union(mix.branches[i].members))
}

/// Best prefix/suffix split for a fixed set of branches.
fn best_split(paths: &[&[Stage]]) -> (usize, usize, usize) {
    let min_len = paths.iter().map(|p| p.len()).min().unwrap_or(0);
    let first = paths[0];
    let lcp = (0..min_len)
        .take_while(|&k| paths.iter().all(|p| p[k].shares_with(&first[k])))
        .count();
    let lcs = (0..min_len)
        .take_while(|&k| {
            let f = &first[first.len() - 1 - k];
            paths.iter().all(|p| p[p.len() - 1 - k].shares_with(f))
        })
        .count();
    let mut best = (0, 0, 0);
    for p in (0..=lcp).rev() {
        let s = lcs.min(min_len - p);
        let c = cost(&first[..p]) + cost(&first[first.len() - s..]);
        if c > best.2 {
            best = (p, s, c);
        }
    }
    best
}

/// Group with maximal `(|G| - 1) · cost(shared)`; ties go to the
/// lexicographically smallest candidate set.
pub fn find_pms(mix: &Mix) -> Option<SharedGroup> {
    let el = eligible(mix);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &(_, st) in &el {
        let n = st.len();
        for p in 0..=n {
            for s in 0..=(n - p) {
                if p + s == 0 {
                    continue;
                }
                let pre = &st[..p];
                let suf = &st[n - s..];
                let g: Vec<usize> = el
                    .iter()
                    .filter(|(_, o)| {
                        o.len() >= p + s && runs_share(&o[..p], pre) && runs_share(&o[o.len() - s..], suf)
                    })
                    .map(|&(i, _)| i)
                    .collect();
                if g.len() >= 2 && !groups.contains(&g) {
                    groups.push(g);
                }
            }
        }
    }
    let mut best: Option<SharedGroup> = None;
    for g in groups {
        let paths: Vec<&[Stage]> = g.iter().map(|&i| mix.branches[i].stages().expect("eligible")).collect();
        let (p, s, c) = best_split(&paths);
        let savings = (g.len() - 1) * c;
        if savings == 0 {
            continue;
        }
        let cand = SharedGroup {
            candidates: union_of(mix, &g),
            branches: g,
            prefix: p,
            suffix: s,
            savings,
        };
        let better = match &best {
            None => true,
            Some(b) => cand.savings > b.savings || (cand.savings == b.savings && cand.candidates < b.candidates),
        };
        if better {
            best = Some(cand);
        }
    }
    best
}

pub fn apply_pms(mix: &mut Mix, group: &SharedGroup) -> Result<()> {
    let paths = checked_paths(mix, &group.branches)?;
    let (p, s) = (group.prefix, group.suffix);
    let first = paths[0].clone();
    for path in &paths {
        if path.len() < p + s
            || !runs_share(&path[..p], &first[..p])
            || !runs_share(&path[path.len() - s..], &first[first.len() - s..])
        {
            return Err(Error::Rewrite("group members do not share the recorded prefix/suffix".into()));
        }
    }
    let candidates = union_of(mix, &group.branches);
    let inner = Mix {
        context: candidates,
        branches: group
            .branches
            .iter()
            .zip(&paths)
            .map(|(&bi, path)| Branch {
                members: mix.branches[bi].members,
                body: Body::Path(path[p..path.len() - s].to_vec()),
            })
            .collect(),
    };
    let mut body: Vec<Stage> = first[..p].to_vec();
    body.push(Stage::Mix(inner));
    body.extend_from_slice(&first[first.len() - s..]);
    replace_branches(mix, &group.branches, Branch {
        members: candidates,
        body: Body::Path(body),
    });
    Ok(())
}

/// Shared middle run at the same position across equal-length branches.
pub fn find_fms(mix: &Mix) -> Option<FloatingMatch> {
    let el = eligible(mix);
    let mut best: Option<FloatingMatch> = None;
    for &(_, st) in &el {
        let n = st.len();
        if n < 3 {
            continue;
        }
        for a in 1..n - 1 {
            for len in 1..n - a {
                let pat = &st[a..a + len];
                let g: Vec<usize> = el
                    .iter()
                    .filter(|(_, o)| o.len() == n && runs_share(&o[a..a + len], pat))
                    .map(|&(i, _)| i)
                    .collect();
                if g.len() < 2 {
                    continue;
                }
                let savings = (g.len() - 1) * cost(pat);
                if savings == 0 {
                    continue;
                }
                let cand = FloatingMatch {
                    candidates: union_of(mix, &g),
                    branches: g,
                    start: a,
                    len,
                    savings,
                };
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (cand.savings, std::cmp::Reverse(cand.candidates), std::cmp::Reverse(cand.start), cand.len)
                            > (b.savings, std::cmp::Reverse(b.candidates), std::cmp::Reverse(b.start), b.len)
                    }
                };
                if better {
                    best = Some(cand);
                }
            }
        }
    }
    best
}

pub fn apply_fms(mix: &mut Mix, m: &FloatingMatch) -> Result<()> {
    let paths = checked_paths(mix, &m.branches)?;
    let n = paths[0].len();
    let (a, len) = (m.start, m.len);
    if a == 0 || a + len >= n {
        return Err(Error::Rewrite("floating match must leave stages on both sides".into()));
    }
    let shared = paths[0][a..a + len].to_vec();
    if paths.iter().any(|p| p.len() != n || !runs_share(&p[a..a + len], &shared)) {
        return Err(Error::Rewrite("floating match members differ in length or shared run".into()));
    }
    let candidates = union_of(mix, &m.branches);
    let stage_mix = |range: std::ops::Range<usize>| Mix {
        context: candidates,
        branches: m
            .branches
            .iter()
            .zip(&paths)
            .map(|(&bi, p)| Branch {
                members: mix.branches[bi].members,
                body: Body::Path(p[range.clone()].to_vec()),
            })
            .collect(),
    };
    let mut body = vec![Stage::Mix(stage_mix(0..a))];
    body.extend(shared);
    body.push(Stage::Mix(stage_mix(a + len..n)));
    replace_branches(mix, &m.branches, Branch {
        members: candidates,
        body: Body::Path(body),
    });
    Ok(())
}

fn checked_paths(mix: &Mix, branches: &[usize]) -> Result<Vec<Vec<Stage>>> {
    if branches.len() < 2 {
        return Err(Error::Rewrite("a shared group needs at least two branches".into()));
    }
    let mut seen = CandidateSet::empty();
    branches
        .iter()
        .map(|&bi| {
            let b = mix
                .branches
                .get(bi)
                .ok_or_else(|| Error::Rewrite(format!("branch {bi} does not exist")))?;
            if !(seen.union(b.members).len() == seen.len() + b.members.len()) {
                return Err(Error::Rewrite(format!("branch {bi} listed twice")));
            }
            seen = seen.union(b.members);
            b.stages()
                .map(<[Stage]>::to_vec)
                .ok_or_else(|| Error::Rewrite(format!("branch {bi} is Zero")))
        })
        .collect()
}

fn replace_branches(mix: &mut Mix, remove: &[usize], new: Branch) {
    let at = *remove.iter().min().expect("nonempty");
    let mut kept = Vec::with_capacity(mix.branches.len());
    for (i, b) in std::mem::take(&mut mix.branches).into_iter().enumerate() {
        if i == at {
            kept.push(new.clone());
        } else if !remove.contains(&i) {
            kept.push(b);
        }
    }
    mix.branches = kept;
}

fn names(graph_names: &[String], set: CandidateSet) -> Vec<String> {
    set.indices()
        .into_iter()
        .map(|i| graph_names.get(i).cloned().unwrap_or_else(|| i.to_string()))
        .collect()
}

fn labels(stages: &[Stage]) -> Vec<String> {
    stages
        .iter()
        .map(|s| match s {
            Stage::Unit(u) => u.unit.to_string(),
            Stage::Mix(_) => "mix".into(),
            Stage::Merged(m) => format!("merged{}", m.target),
        })
        .collect()
}

/// PMS wherever it applies, else FMS, repeated until neither applies; then
/// kernel merging.
pub fn simplify_recursive(graph: &ComputeGraph) -> (ComputeGraph, RewriteLog) {
    let mut g = graph.clone();
    let initial = g.count();
    let mut log = RewriteLog {
        initial,
        entries: Vec::new(),
        final_count: initial,
    };
    let cap = initial.total + 1;
    for _ in 0..cap {
        let before = g.count();
        let mut entry = None;
        let applied = g.root.visit_mut(&mut |m| match find_pms(m) {
            Some(grp) => {
                let st = m.branches[grp.branches[0]].stages().expect("eligible");
                let mut shared = labels(&st[..grp.prefix]);
                shared.extend(labels(&st[st.len() - grp.suffix..]));
                entry = Some(("pms", grp.savings, grp.candidates, shared));
                apply_pms(m, &grp).expect("group found on this mix");
                true
            }
            None => false,
        }) || g.root.visit_mut(&mut |m| match find_fms(m) {
            Some(fm) => {
                let st = m.branches[fm.branches[0]].stages().expect("eligible");
                entry = Some(("fms", fm.savings, fm.candidates, labels(&st[fm.start..fm.start + fm.len])));
                apply_fms(m, &fm).expect("match found on this mix");
                true
            }
            None => false,
        });
        if !applied {
            break;
        }
        let (pass, savings, cands, shared) = entry.expect("applied rewrite records an entry");
        let after = g.count();
        debug_assert_eq!(before.total - after.total, savings);
        log.entries.push(RewriteEntry {
            pass: pass.into(),
            savings,
            before,
            after,
            members: names(&g.candidate_names, cands),
            shared,
            target: None,
        });
    }
    let before = g.count();
    let merges = reparameterize(&mut g);
    if !merges.is_empty() {
        let after = g.count();
        let cands = merges.iter().fold(CandidateSet::empty(), |s, m| s.union(m.0));
        log.entries.push(RewriteEntry {
            pass: "reparam".into(),
            savings: before.total - after.total,
            before,
            after,
            members: names(&g.candidate_names, cands),
            shared: Vec::new(),
            target: merges.iter().map(|m| m.1).max(),
        });
    }
    log.final_count = g.count();
    (g, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{SpaceSpec, Supernet};
    use crate::tensor::DType;
    use proptest::prelude::*;

    fn edge(candidates: &str) -> ComputeGraph {
        let text = format!("space t\nnodes 2\nchannels 2\n{candidates}");
        let spec = SpaceSpec::parse(&text).unwrap();
        Supernet::build(&spec, 0, DType::F64).unwrap().cells[0].edges[0].graph.clone()
    }

    #[test]
    fn derived_weights_example() {
        let d = derive_weights(&[0.2, 0.3, 0.5], &[1, 2]).unwrap();
        assert!((d.p_s - 0.8).abs() < 1e-15);
        assert!((d.beta1[0] - 0.375).abs() < 1e-15);
        assert!((d.beta1[1] - 0.625).abs() < 1e-15);
        assert_eq!(d.beta2, vec![0.2]);
        assert!(!d.degenerate);
        let d = derive_weights(&[0.0, 1.0, 0.0], &[1, 2]).unwrap();
        assert_eq!(d.beta1, vec![1.0, 0.0]);
        let d = derive_weights(&[1.0, 0.0, 0.0], &[1, 2]).unwrap();
        assert!(d.degenerate);
        assert!(d.beta1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn darts_edge_groups_the_convolutions() {
        let spec = SpaceSpec::builtin("darts_cifar").unwrap();
        let net = Supernet::build(&spec, 0, DType::F32).unwrap();
        let g = &net.cells[0].edges[0].graph;
        let grp = find_pms(&g.root).unwrap();
        assert_eq!(grp.candidates.indices(), vec![4, 5, 6, 7]);
        assert_eq!((grp.prefix, grp.suffix), (1, 1));
        assert_eq!(grp.savings, 6);
    }

    #[test]
    fn pools_and_identity_share_nothing() {
        let g = edge("candidate a = avgpool(k=3)\ncandidate b = maxpool(k=3)\ncandidate c = identity\n");
        assert!(find_pms(&g.root).is_none());
        assert!(find_fms(&g.root).is_none());
        let (s, log) = simplify_recursive(&g);
        assert!(log.entries.is_empty());
        assert_eq!(s, g);
    }

    #[test]
    fn identical_relu_conv_chains_share_only_the_relu() {
        let g = edge("candidate a = relu conv(k=3)\ncandidate b = relu conv(k=3)\n");
        let grp = find_pms(&g.root).unwrap();
        assert_eq!((grp.prefix, grp.suffix), (1, 0));
    }

    #[test]
    fn separable_stacks_float_share_bn_relu() {
        let g = edge(
            "candidate a = dwconv(k=3) pwconv bn relu dwconv(k=3) pwconv\n\
             candidate b = dwconv(k=5) pwconv bn relu dwconv(k=5) pwconv\n",
        );
        assert!(find_pms(&g.root).is_none());
        let fm = find_fms(&g.root).unwrap();
        assert_eq!((fm.start, fm.len, fm.savings), (1, 2, 2));
    }

    #[test]
    fn darts_trajectory() {
        let spec = SpaceSpec::builtin("darts_cifar").unwrap();
        let net = Supernet::build(&spec, 0, DType::F32).unwrap();
        let (_, log) = simplify_recursive(&net.cells[0].edges[0].graph);
        let t: Vec<_> = log.trajectory().iter().map(ModuleCount::as_tuple).collect();
        assert_eq!(t, vec![(6, 14, 20), (6, 8, 14), (6, 6, 12), (3, 6, 9)]);
        let passes: Vec<&str> = log.entries.iter().map(|e| e.pass.as_str()).collect();
        assert_eq!(passes, vec!["pms", "fms", "reparam"]);
    }

    #[test]
    fn nasbench201_one_pms_one_merge() {
        let spec = SpaceSpec::builtin("nasbench201").unwrap();
        let net = Supernet::build(&spec, 0, DType::F32).unwrap();
        let (_, log) = simplify_recursive(&net.cells[0].edges[0].graph);
        let passes: Vec<&str> = log.entries.iter().map(|e| e.pass.as_str()).collect();
        assert_eq!(passes, vec!["pms", "reparam"]);
        assert_eq!(log.initial.conv, 2);
        assert_eq!(log.final_count.conv, 1);
    }

    #[test]
    fn inconsistent_group_is_a_rewrite_error() {
        let mut g = edge("candidate a = relu bn\ncandidate b = relu\n");
        let bad = SharedGroup {
            branches: vec![0, 1],
            candidates: CandidateSet::all(2),
            prefix: 1,
            suffix: 1,
            savings: 2,
        };
        assert!(matches!(apply_pms(&mut g.root, &bad), Err(Error::Rewrite(_))));
    }

    /// Brute force over every member subset and every split, using the
    /// counting rule directly on chains.
    fn brute_force_best(chains: &[Vec<&str>]) -> usize {
        let cost = |m: &str| usize::from(m != "identity");
        let n = chains.len();
        let mut best = 0;
        for mask in 1u32..(1 << n) {
            let members: Vec<&Vec<&str>> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| &chains[i]).collect();
            if members.len() < 2 {
                continue;
            }
            let min_len = members.iter().map(|c| c.len()).min().unwrap();
            for p in 0..=min_len {
                for s in 0..=(min_len - p) {
                    let f = members[0];
                    let ok = members.iter().all(|c| {
                        c[..p] == f[..p] && c[c.len() - s..] == f[f.len() - s..]
                    });
                    if ok {
                        let c: usize = f[..p].iter().chain(&f[f.len() - s..]).map(|m| cost(m)).sum();
                        best = best.max((members.len() - 1) * c);
                    }
                }
            }
        }
        best
    }

    proptest! {
        #[test]
        fn pms_savings_match_brute_force(
            chains in prop::collection::vec(
                prop::collection::vec(prop::sample::select(vec!["relu", "bn", "identity", "avgpool(k=3)"]), 1..5),
                2..5)
        ) {
            let text: String = chains
                .iter()
                .enumerate()
                .map(|(i, c)| format!("candidate c{i} = {}\n", c.join(" ")))
                .collect();
            let g = edge(&text);
            let found = find_pms(&g.root).map_or(0, |grp| grp.savings);
            prop_assert_eq!(found, brute_force_best(&chains));
        }

        #[test]
        fn every_rewrite_strictly_reduces_the_count(
            chains in prop::collection::vec(
                prop::collection::vec(prop::sample::select(vec!["relu", "bn", "conv(k=3)", "dwconv(k=3) pwconv", "maxpool(k=3)"]), 1..6),
                1..6)
        ) {
            let text: String = chains
                .iter()
                .enumerate()
                .map(|(i, c)| format!("candidate c{i} = {}\n", c.join(" ")))
                .collect();
            let g = edge(&text);
            let (s, log) = simplify_recursive(&g);
            prop_assert!(log.entries.len() <= g.count().total);
            for e in &log.entries {
                prop_assert!(e.after.total < e.before.total);
                prop_assert_eq!(e.before.total - e.after.total, e.savings);
            }
            prop_assert_eq!(s.count(), log.final_count);
        }

        #[test]
        fn weight_reconstruction(raw in prop::collection::vec(0.01f64..1.0, 2..9), mask in 1u32..256) {
            let total: f64 = raw.iter().sum();
            let beta: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let members: Vec<usize> = (0..beta.len()).filter(|i| mask >> i & 1 == 1).collect();
            prop_assume!(!members.is_empty());
            let d = derive_weights(&beta, &members).unwrap();
            prop_assert!((d.beta1.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (k, &i) in members.iter().enumerate() {
                prop_assert!((d.beta_s * d.beta1[k] - beta[i]).abs() < 1e-12);
            }
        }
    }
}
