use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::compute::{Body, Branch, CandidateSet, ComputeGraph, Mix, Stage, UnitInstance};
use super::eval::ForwardCtx;
use super::genotype::Genotype;
use super::module::{BasicModule, ConvForm, ModuleKind, Unit};
use super::params::{kaiming_uniform, BnId, BnStore, ParamId, ParamStore, Role};
use super::space::SpaceSpec;
use crate::error::{Error, Result};
use crate::simplify::{simplify_recursive, RewriteLog};
use crate::tensor::{ConvParams, DType, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn index(self) -> usize {
        match self {
            CellKind::Normal => 0,
            CellKind::Reduction => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeInstance {
    pub from: usize,
    pub to: usize,
    pub stride: usize,
    pub graph: ComputeGraph,
    pub alpha: ParamId,
}

#[derive(Debug, Clone)]
pub struct CellInstance {
    pub kind: CellKind,
    pub edges: Vec<EdgeInstance>,
}

/// Stem, cells of searchable edges and classifier head.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub spec: SpaceSpec,
    pub params: ParamStore,
    pub bn: BnStore,
    pub dtype: DType,
    pub stem_kernel: ParamId,
    pub stem_bn: BnId,
    pub cells: Vec<CellInstance>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// Architecture vectors indexed by cell kind, then edge position.
    pub alphas: Vec<Vec<ParamId>>,
    pub alpha_version: u64,
    pub weight_version: u64,
    pub simplified: bool,
}

impl Supernet {
    pub fn build(spec: &SpaceSpec, seed: u64, dtype: DType) -> Result<Supernet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut bn = BnStore::default();
        let c = spec.channels;
        let stem_kernel = params.add(
            "stem.conv",
            kaiming_uniform(&mut rng, &[c, spec.in_channels, 3, 3], dtype),
            Role::Weight,
        );
        let stem_bn = bn.add(c);
        let edges = spec.ordered_edges();
        let m = spec.candidates.len();
        let kinds: &[CellKind] = if spec.has_reductions() {
            &[CellKind::Normal, CellKind::Reduction]
        } else {
            &[CellKind::Normal]
        };
        let alphas: Vec<Vec<ParamId>> = kinds
            .iter()
            .map(|k| {
                (0..edges.len())
                    .map(|e| {
                        params.add(
                            format!("alpha.{}.{e}", k.index()),
                            Tensor::zeros(&[m], dtype),
                            Role::Arch,
                        )
                    })
                    .collect()
            })
            .collect();
        let mut cells = Vec::with_capacity(spec.cells);
        for ci in 0..spec.cells {
            let kind = if spec.is_reduction(ci) {
                CellKind::Reduction
            } else {
                CellKind::Normal
            };
            let mut cell_edges = Vec::with_capacity(edges.len());
            for (ei, &(from, to)) in edges.iter().enumerate() {
                let stride = if kind == CellKind::Reduction && from == 0 { 2 } else { 1 };
                let bound = spec
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(oi, chain)| {
                        if chain.is_zero() {
                            return None;
                        }
                        let units = chain.with_stride(stride).units();
                        Some(
                            units
                                .into_iter()
                                .map(|u| bind_unit(u, &format!("cell{ci}.e{ei}.{oi}"), &mut params, &mut bn, &mut rng, dtype))
                                .collect(),
                        )
                    })
                    .collect();
                let graph = ComputeGraph::vanilla(&spec.candidates, bound, stride, c);
                cell_edges.push(EdgeInstance {
                    from,
                    to,
                    stride,
                    graph,
                    alpha: alphas[kind.index()][ei],
                });
            }
            cells.push(CellInstance { kind, edges: cell_edges });
        }
        let head_w = params.add(
            "head.w",
            kaiming_uniform(&mut rng, &[spec.classes, c], dtype),
            Role::Weight,
        );
        let head_b = params.add("head.b", Tensor::zeros(&[spec.classes], dtype), Role::Weight);
        Ok(Supernet {
            spec: spec.clone(),
            params,
            bn,
            dtype,
            stem_kernel,
            stem_bn,
            cells,
            head_w,
            head_b,
            alphas,
            alpha_version: 0,
            weight_version: 0,
            simplified: false,
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.spec.candidates.len()
    }

    pub fn alpha_ids(&self) -> Vec<ParamId> {
        self.alphas.iter().flatten().copied().collect()
    }

    pub fn set_alpha(&mut self, kind: usize, edge: usize, values: &[f64]) -> Result<()> {
        let id = *self
            .alphas
            .get(kind)
            .and_then(|a| a.get(edge))
            .ok_or_else(|| Error::Config(format!("no architecture vector for cell kind {kind}, edge {edge}")))?;
        self.params.get_mut(id).value = Tensor::new(&[values.len()], values.to_vec(), self.dtype)?;
        self.alpha_version += 1;
        Ok(())
    }

    pub fn set_all_alphas(&mut self, values: &[f64]) -> Result<()> {
        for id in self.alpha_ids() {
            self.params.get_mut(id).value = Tensor::new(&[values.len()], values.to_vec(), self.dtype)?;
        }
        self.alpha_version += 1;
        Ok(())
    }

    /// Softmax weights of every architecture vector, `[kind][edge][candidate]`.
    pub fn betas(&self) -> Vec<Vec<Vec<f64>>> {
        self.alphas
            .iter()
            .map(|edges| {
                edges
                    .iter()
                    .map(|&id| crate::tensor::softmax(self.params.value(id).data()))
                    .collect()
            })
            .collect()
    }

    /// Applies the simplification pipeline to every edge.
    pub fn simplify(&mut self) -> Vec<RewriteLog> {
        let mut logs = Vec::new();
        for cell in &mut self.cells {
            for e in &mut cell.edges {
                let (g, log) = simplify_recursive(&e.graph);
                e.graph = g;
                logs.push(log);
            }
        }
        self.simplified = true;
        logs
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let k = ctx.param(self.stem_kernel)?;
        let h = ctx.tape.conv2d(x, k, ConvParams::same(3, 1, 1, 1))?;
        let mut h = ctx.batch_norm(self.stem_bn, h)?;
        let order = self.spec.node_order();
        for (ci, cell) in self.cells.iter().enumerate() {
            let mut nodes: Vec<Option<Var>> = vec![None; self.spec.nodes];
            nodes[0] = Some(h);
            for &n in order.iter().filter(|&&n| n != 0) {
                let mut terms = Vec::new();
                for (ei, e) in cell.edges.iter().enumerate().filter(|(_, e)| e.to == n) {
                    let input = nodes[e.from].expect("topological order");
                    terms.push(ctx.eval_edge(&e.graph, e.alpha, input, ci * 1024 + ei)?);
                }
                nodes[n] = Some(ctx.tape.add_n(&terms)?);
            }
            h = nodes[self.spec.nodes - 1].expect("output node");
        }
        let g = ctx.tape.global_avg_pool(h)?;
        let w = ctx.param(self.head_w)?;
        let b = ctx.param(self.head_b)?;
        Ok(ctx.tape.linear(g, w, Some(b))?)
    }

    /// Output of one edge for input `x`.
    pub fn edge_forward(&self, ctx: &mut ForwardCtx<'_>, cell: usize, edge: usize, x: Var) -> Result<Var> {
        let e = &self.cells[cell].edges[edge];
        ctx.eval_edge(&e.graph, e.alpha, x, cell * 1024 + edge)
    }

    /// Discrete network: every edge keeps only the chosen candidate and
    /// evaluates it with weight one. Conv kernels are reinitialized.
    pub fn discrete(spec: &SpaceSpec, genotype: &Genotype, seed: u64, dtype: DType) -> Result<Supernet> {
        let mut net = Supernet::build(spec, seed, dtype)?;
        for cell in &mut net.cells {
            let ops = genotype
                .ops_for(cell.kind.index())
                .ok_or_else(|| Error::Config("genotype lacks a cell type required by the space".into()))?;
            if ops.len() != cell.edges.len() {
                return Err(Error::Config(format!(
                    "genotype has {} edges per cell, space has {}",
                    ops.len(),
                    cell.edges.len()
                )));
            }
            for (e, name) in cell.edges.iter_mut().zip(ops) {
                let k = spec
                    .candidate_index(name)
                    .ok_or_else(|| Error::Config(format!("genotype operation `{name}` is not a candidate")))?;
                let branch = e.graph.root.branches[k].clone();
                e.graph.root = Mix {
                    context: CandidateSet::single(k),
                    branches: vec![branch],
                };
            }
        }
        for id in net.alpha_ids() {
            net.params.get_mut(id).requires_grad = false;
        }
        Ok(net)
    }
}

fn bind_unit(
    unit: Unit,
    prefix: &str,
    params: &mut ParamStore,
    bn: &mut BnStore,
    rng: &mut ChaCha8Rng,
    dtype: DType,
) -> UnitInstance {
    let mut conv_param = |m: &BasicModule, tag: &str| {
        let shape = m.kernel_shape().expect("conv module");
        params.add(format!("{prefix}.{tag}"), kaiming_uniform(rng, &shape, dtype), Role::Weight)
    };
    match unit {
        Unit::Separable { depthwise, pointwise } => {
            let a = conv_param(&depthwise, "dw");
            let b = conv_param(&pointwise, "pw");
            UnitInstance {
                unit,
                params: vec![a, b],
                bn: None,
            }
        }
        Unit::Single(m) => match m.kind {
            ModuleKind::Conv { form, .. } => {
                let tag = match form {
                    ConvForm::Dense => "conv",
                    ConvForm::Depthwise => "dw",
                    ConvForm::Pointwise => "pw",
                };
                let p = conv_param(&m, tag);
                UnitInstance {
                    unit,
                    params: vec![p],
                    bn: None,
                }
            }
            ModuleKind::BatchNorm => UnitInstance {
                unit,
                params: Vec::new(),
                bn: Some(bn.add(m.out_ch)),
            },
            _ => UnitInstance {
                unit,
                params: Vec::new(),
                bn: None,
            },
        },
    }
}

/// Stages of a candidate's vanilla branch, for tests and diagnostics.
pub fn candidate_branch(graph: &ComputeGraph, k: usize) -> Option<&Branch> {
    graph.root.branches.iter().find(|b| b.members == CandidateSet::single(k))
}

pub fn branch_units(b: &Branch) -> Vec<&UnitInstance> {
    match &b.body {
        Body::Zero => Vec::new(),
        Body::Path(stages) => stages.iter().filter_map(Stage::as_unit).collect(),
    }
}
