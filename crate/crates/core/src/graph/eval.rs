//! Tape-recorded evaluation of compute graphs.

use std::collections::HashMap;

use super::compute::{Body, CandidateSet, ComputeGraph, MergedConv, Mix, Stage, UnitInstance};
use super::module::{ConvForm, ModuleKind, Unit};
use super::params::{BnId, BnStore, ParamId, ParamStore, Role, BN_EPS};
use crate::error::Result;
use crate::reparam::{KernelNorm, EPS_P, EPS_STD};
use crate::tensor::{ConvParams, DType, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Merged kernels reused across no-grad forwards while neither α nor the
/// weights change.
#[derive(Debug, Default)]
pub struct KernelCache {
    versions: (u64, u64),
    entries: HashMap<(usize, usize), Tensor>,
    pub hits: usize,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn sync(&mut self, versions: (u64, u64)) {
        if self.versions != versions {
            self.entries.clear();
            self.versions = versions;
        }
    }
}

/// One forward pass: owns the tape and binds parameters to tape leaves.
pub struct ForwardCtx<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    bn: &'a BnStore,
    pub bn_mode: BnMode,
    trainable: Option<Role>,
    vars: HashMap<ParamId, Var>,
    betas: HashMap<ParamId, Var>,
    pub bn_updates: Vec<(BnId, Vec<f64>, Vec<f64>)>,
    pub kernel_norm: KernelNorm,
    cache: Option<&'a mut KernelCache>,
    edge_key: usize,
    merge_ordinal: usize,
}

impl<'a> ForwardCtx<'a> {
    /// `trainable` selects which parameter role gets gradients; `None`
    /// records a pass without any.
    pub fn new(params: &'a ParamStore, bn: &'a BnStore, dtype: DType, bn_mode: BnMode, trainable: Option<Role>) -> Self {
        Self {
            tape: Tape::new(dtype),
            params,
            bn,
            bn_mode,
            trainable,
            vars: HashMap::new(),
            betas: HashMap::new(),
            bn_updates: Vec::new(),
            kernel_norm: KernelNorm::Off,
            cache: None,
            edge_key: 0,
            merge_ordinal: 0,
        }
    }

    pub fn with_kernel_norm(mut self, norm: KernelNorm) -> Self {
        self.kernel_norm = norm;
        self
    }

    /// Enables merged-kernel reuse; only honoured when nothing is trainable.
    pub fn with_cache(mut self, cache: &'a mut KernelCache, versions: (u64, u64)) -> Self {
        if self.trainable.is_none() {
            cache.sync(versions);
            self.cache = Some(cache);
        }
        self
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().map(|(&p, &v)| (p, v))
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.vars.get(&id) {
            return Ok(v);
        }
        let p = self.params.get(id);
        let rg = self.trainable == Some(p.role) && p.requires_grad;
        let v = self.tape.leaf(p.value.clone(), rg)?;
        self.vars.insert(id, v);
        Ok(v)
    }

    /// Softmax of an architecture vector, computed once per pass.
    pub fn beta(&mut self, alpha: ParamId) -> Result<Var> {
        if let Some(&b) = self.betas.get(&alpha) {
            return Ok(b);
        }
        let a = self.param(alpha)?;
        let b = self.tape.softmax(a)?;
        self.betas.insert(alpha, b);
        Ok(b)
    }

    /// Evaluates one edge graph with the architecture vector `alpha`.
    /// `edge_key` identifies the edge for kernel caching.
    pub fn eval_edge(&mut self, graph: &ComputeGraph, alpha: ParamId, x: Var, edge_key: usize) -> Result<Var> {
        let beta = self.beta(alpha)?;
        self.edge_key = edge_key;
        self.merge_ordinal = 0;
        let all = CandidateSet::all(graph.num_candidates());
        match self.eval_mix(&graph.root, x, beta, all)? {
            Some(y) => Ok(y),
            None => self.zeros_like_output(x, graph.stride, graph.channels),
        }
    }

    /// Evaluates a graph against an explicit β vector on the tape.
    pub fn eval_edge_with_beta(&mut self, graph: &ComputeGraph, beta: Var, x: Var) -> Result<Var> {
        let all = CandidateSet::all(graph.num_candidates());
        self.merge_ordinal = 0;
        match self.eval_mix(&graph.root, x, beta, all)? {
            Some(y) => Ok(y),
            None => self.zeros_like_output(x, graph.stride, graph.channels),
        }
    }

    fn zeros_like_output(&mut self, x: Var, stride: usize, channels: usize) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let shape = [s[0], channels, (s[2] - 1) / stride + 1, (s[3] - 1) / stride + 1];
        let z = Tensor::zeros(&shape, self.tape.dtype());
        Ok(self.tape.constant(z)?)
    }

    fn mass(&mut self, beta: Var, set: CandidateSet) -> Result<Var> {
        let idx = set.indices();
        let g = self.tape.gather(beta, &idx)?;
        Ok(if idx.len() == 1 { g } else { self.tape.sum(g)? })
    }

    /// Returns `None` when every branch is Zero.
    fn eval_mix(&mut self, mix: &Mix, x: Var, beta: Var, all: CandidateSet) -> Result<Option<Var>> {
        let mut outs = Vec::new();
        let mut weights: Vec<Option<Var>> = Vec::new();
        let mut inv_ctx: Option<Var> = None;
        for b in &mix.branches {
            let Body::Path(stages) = &b.body else { continue };
            let y = self.eval_path(stages, x, beta, all)?;
            let w = if b.members == mix.context {
                None
            } else {
                let m = self.mass(beta, b.members)?;
                if mix.context == all {
                    Some(m)
                } else {
                    let inv = match inv_ctx {
                        Some(v) => v,
                        None => {
                            let c = self.mass(beta, mix.context)?;
                            let v = self.tape.recip_clamped(c, EPS_P)?;
                            inv_ctx = Some(v);
                            v
                        }
                    };
                    Some(self.tape.mul(m, inv)?)
                }
            };
            outs.push(y);
            weights.push(w);
        }
        if outs.is_empty() {
            return Ok(None);
        }
        if outs.len() == 1 && weights[0].is_none() {
            return Ok(Some(outs[0]));
        }
        let mut ws = Vec::with_capacity(weights.len());
        for w in weights {
            ws.push(match w {
                Some(v) => v,
                None => self.tape.constant(Tensor::scalar(1.0, self.tape.dtype()))?,
            });
        }
        let wv = self.tape.concat(&ws)?;
        Ok(Some(self.tape.weighted_sum(&outs, wv)?))
    }

    fn eval_path(&mut self, stages: &[Stage], x: Var, beta: Var, all: CandidateSet) -> Result<Var> {
        let mut h = x;
        for st in stages {
            h = match st {
                Stage::Unit(u) => self.eval_unit(u, h)?,
                Stage::Merged(m) => self.eval_merged(m, h, beta, all)?,
                Stage::Mix(m) => match self.eval_mix(m, h, beta, all)? {
                    Some(y) => y,
                    None => {
                        let ch = self.tape.shape(h)[1];
                        self.zeros_like_output(h, 1, ch)?
                    }
                },
            };
        }
        Ok(h)
    }

    /// Dense kernel of a conv unit at its native size and dilation.
    fn dense_kernel(&mut self, u: &UnitInstance) -> Result<Var> {
        match u.unit {
            Unit::Separable { .. } => {
                let dw = self.param(u.params[0])?;
                let pw = self.param(u.params[1])?;
                Ok(self.tape.compose_separable(dw, pw)?)
            }
            Unit::Single(m) => {
                let k = self.param(u.params[0])?;
                match m.kind {
                    ModuleKind::Conv { form: ConvForm::Depthwise, .. } => Ok(self.tape.depthwise_to_dense(k)?),
                    _ => Ok(k),
                }
            }
        }
    }

    fn normalized(&mut self, k: Var) -> Result<Var> {
        Ok(match self.kernel_norm {
            KernelNorm::Off => k,
            KernelNorm::Whole => self.tape.normalize_kernel(k, EPS_STD, false)?,
            KernelNorm::PerOutputChannel => self.tape.normalize_kernel(k, EPS_STD, true)?,
        })
    }

    pub fn eval_unit(&mut self, u: &UnitInstance, x: Var) -> Result<Var> {
        if u.unit.is_conv() && self.kernel_norm != KernelNorm::Off {
            let (k, d) = u.unit.spatial_kernel().expect("conv unit");
            let dense = self.dense_kernel(u)?;
            let kn = self.normalized(dense)?;
            return Ok(self.tape.conv2d(x, kn, ConvParams::same(k, d, u.unit.stride(), 1))?);
        }
        match u.unit {
            Unit::Separable { depthwise, pointwise } => {
                let h = self.conv_module(&depthwise, u.params[0], x)?;
                self.conv_module(&pointwise, u.params[1], h)
            }
            Unit::Single(m) => match m.kind {
                ModuleKind::Zero => {
                    let ch = m.out_ch;
                    self.zeros_like_output(x, m.stride, ch)
                }
                ModuleKind::Identity => Ok(self.tape.subsample(x, m.stride)?),
                ModuleKind::Relu => Ok(self.tape.relu(x)?),
                ModuleKind::BatchNorm => {
                    let id = u.bn.expect("bn unit carries a BnId");
                    self.batch_norm(id, x)
                }
                ModuleKind::AvgPool { k } => Ok(self.tape.avg_pool(x, k, m.stride)?),
                ModuleKind::MaxPool { k } => Ok(self.tape.max_pool(x, k, m.stride)?),
                ModuleKind::Conv { .. } => self.conv_module(&m, u.params[0], x),
            },
        }
    }

    pub fn batch_norm(&mut self, id: BnId, x: Var) -> Result<Var> {
        match self.bn_mode {
            BnMode::Train => {
                let (y, mean, var) = self.tape.batch_norm_train(x, BN_EPS)?;
                self.bn_updates.push((id, mean, var));
                Ok(y)
            }
            BnMode::Eval => {
                let s = self.bn.get(id);
                Ok(self.tape.batch_norm_eval(x, &s.mean, &s.var, BN_EPS)?)
            }
        }
    }

    fn conv_module(&mut self, m: &super::module::BasicModule, p: ParamId, x: Var) -> Result<Var> {
        let ModuleKind::Conv { kernel_size, dilation, form } = m.kind else {
            unreachable!("conv_module called on a non-conv module")
        };
        let groups = if form == ConvForm::Depthwise { m.in_ch } else { 1 };
        let k = self.param(p)?;
        Ok(self.tape.conv2d(x, k, ConvParams::same(kernel_size, dilation, m.stride, groups))?)
    }

    fn eval_merged(&mut self, mc: &MergedConv, x: Var, beta: Var, all: CandidateSet) -> Result<Var> {
        let key = (self.edge_key, self.merge_ordinal);
        self.merge_ordinal += 1;
        let cached = self.cache.as_ref().and_then(|c| c.entries.get(&key)).cloned();
        let kernel = match cached {
            Some(t) => {
                if let Some(c) = self.cache.as_mut() {
                    c.hits += 1;
                }
                self.tape.constant(t)?
            }
            None => {
                let k = self.merged_kernel(mc, beta, all)?;
                if let Some(c) = self.cache.as_mut() {
                    c.entries.insert(key, self.tape.value(k).clone());
                }
                k
            }
        };
        let params = ConvParams::new(mc.stride, 1, (mc.target - 1) / 2, 1);
        Ok(self.tape.conv2d_taps(x, kernel, params, Some(mc.taps.clone()))?)
    }

    /// `Σ_i (mass(S_i)/mass(∪S)) · embed(norm(K_i))`.
    pub fn merged_kernel(&mut self, mc: &MergedConv, beta: Var, all: CandidateSet) -> Result<Var> {
        let mut kernels = Vec::with_capacity(mc.members.len());
        for m in &mc.members {
            let dense = self.dense_kernel(&m.unit)?;
            let kn = self.normalized(dense)?;
            let (k, d) = m.unit.unit.spatial_kernel().expect("merged members are convs");
            let e = d * (k - 1) + 1;
            kernels.push(if e == mc.target && d == 1 {
                kn
            } else {
                self.tape.embed_kernel(kn, mc.target, d)?
            });
        }
        let union = mc.candidates();
        let inv = if union == all {
            None
        } else {
            let u = self.mass(beta, union)?;
            Some(self.tape.recip_clamped(u, EPS_P)?)
        };
        let mut ws = Vec::with_capacity(mc.members.len());
        for m in &mc.members {
            let w = self.mass(beta, m.members)?;
            ws.push(match inv {
                Some(i) => self.tape.mul(w, i)?,
                None => w,
            });
        }
        let wv = self.tape.concat(&ws)?;
        Ok(self.tape.weighted_sum(&kernels, wv)?)
    }
}
