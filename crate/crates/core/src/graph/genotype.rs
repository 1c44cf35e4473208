use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::space::SpaceSpec;
use crate::error::{Error, Result};

/// Selected operation per edge, grouped per cell type and target node.
///
/// Serialized as `|op~0|+|op~0|op~1|+...`; cell types are joined with `&`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    /// `[cell type][target node group][(op, source node)]`
    pub cells: Vec<Vec<Vec<(String, usize)>>>,
}

impl Genotype {
    /// Operations of one cell type in edge order.
    pub fn ops_for(&self, kind: usize) -> Option<Vec<&str>> {
        self.cells
            .get(kind)
            .map(|groups| groups.iter().flatten().map(|(op, _)| op.as_str()).collect())
    }
}

/// Index of the largest weight; ties go to the lowest index. With
/// `exclude_zero`, candidates flagged in `is_zero` are skipped unless every
/// candidate is Zero.
pub fn argmax_op(beta: &[f64], is_zero: &[bool], exclude_zero: bool) -> usize {
    let mut best: Option<usize> = None;
    for (i, &b) in beta.iter().enumerate() {
        if exclude_zero && is_zero[i] {
            continue;
        }
        match best {
            Some(j) if beta[j] >= b => {}
            _ => best = Some(i),
        }
    }
    best.unwrap_or(0)
}

/// Discretizes per-edge weights (`[cell type][edge][candidate]`).
pub fn discretize(spec: &SpaceSpec, betas: &[Vec<Vec<f64>>], exclude_zero: bool) -> Genotype {
    let edges = spec.ordered_edges();
    let is_zero: Vec<bool> = spec.candidates.iter().map(|c| c.is_zero()).collect();
    let cells = betas
        .iter()
        .map(|edge_betas| {
            let mut groups: Vec<Vec<(String, usize)>> = Vec::new();
            let mut last_target = None;
            for (&(from, to), beta) in edges.iter().zip(edge_betas) {
                if last_target != Some(to) {
                    groups.push(Vec::new());
                    last_target = Some(to);
                }
                let k = argmax_op(beta, &is_zero, exclude_zero);
                groups
                    .last_mut()
                    .expect("group pushed")
                    .push((spec.candidates[k].name.clone(), from));
            }
            groups
        })
        .collect();
    Genotype { cells }
}

impl fmt::Display for Genotype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<String> = self
            .cells
            .iter()
            .map(|groups| {
                groups
                    .iter()
                    .map(|g| {
                        let ops: String = g.iter().map(|(op, src)| format!("{op}~{src}|")).collect();
                        format!("|{ops}")
                    })
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .collect();
        write!(f, "{}", cells.join("&"))
    }
}

impl FromStr for Genotype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("genotype `{s}`: {msg}"));
        let cells = s
            .split('&')
            .map(|cell| {
                cell.split('+')
                    .map(|group| {
                        let inner = group
                            .strip_prefix('|')
                            .and_then(|g| g.strip_suffix('|'))
                            .ok_or_else(|| bad(format!("group `{group}` must be wrapped in `|`")))?;
                        inner
                            .split('|')
                            .map(|item| {
                                let (op, src) = item
                                    .rsplit_once('~')
                                    .ok_or_else(|| bad(format!("entry `{item}` lacks `~source`")))?;
                                if op.is_empty() {
                                    return Err(bad("empty operation name".into()));
                                }
                                let src = src
                                    .parse::<usize>()
                                    .map_err(|_| bad(format!("bad source node `{src}`")))?;
                                Ok((op.to_string(), src))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Genotype { cells })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn argmax_rules() {
        let z = [true, false, false];
        assert_eq!(argmax_op(&[0.1, 0.7, 0.2], &z, true), 1);
        assert_eq!(argmax_op(&[0.9, 0.05, 0.05], &z, true), 1);
        assert_eq!(argmax_op(&[0.9, 0.05, 0.05], &z, false), 0);
        assert_eq!(argmax_op(&[0.5, 0.5], &[false, false], true), 0);
    }

    #[test]
    fn nasbench201_string_layout() {
        let spec = SpaceSpec::builtin("nasbench201").unwrap();
        let betas = vec![vec![vec![0.0, 0.0, 0.0, 1.0, 0.0]; 6]];
        let g = discretize(&spec, &betas, true);
        assert_eq!(
            g.to_string(),
            "|nor_conv_3x3~0|+|nor_conv_3x3~0|nor_conv_3x3~1|+|nor_conv_3x3~0|nor_conv_3x3~1|nor_conv_3x3~2|"
        );
    }

    proptest! {
        #[test]
        fn serialization_round_trips(
            cells in prop::collection::vec(
                prop::collection::vec(
                    prop::collection::vec(("[a-z_0-9x]{1,12}", 0usize..8), 1..4),
                    1..4),
                1..3)
        ) {
            let g = Genotype { cells };
            let parsed: Genotype = g.to_string().parse().unwrap();
            prop_assert_eq!(parsed, g);
        }
    }
}
