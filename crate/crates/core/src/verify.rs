//! Self-checking suites: module counts, rewrite equivalence, the α/kernel
//! degeneracy and its removal by normalization, and gradient correctness.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cost::ModuleCount;
use crate::error::{Error, Result};
use crate::graph::supernet::{branch_units, candidate_branch};
use crate::graph::{Body, BnMode, ComputeGraph, ForwardCtx, Mix, ParamId, Role, SpaceSpec, Supernet};
use crate::reparam::KernelNorm;
use crate::simplify::{apply_fms, apply_pms, find_fms, find_pms, simplify_recursive};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::{ConvParams, DType, Tape, Tensor, Var};

/// Edge module counts of the DARTS space after each rewrite.
pub const DARTS_TRAJECTORY: [(usize, usize, usize); 4] = [(6, 14, 20), (6, 8, 14), (6, 6, 12), (3, 6, 9)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Counts,
    Equivalence,
    Degeneracy,
    Gradcheck,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Counts, Suite::Equivalence, Suite::Degeneracy, Suite::Gradcheck];
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Suite> {
        match s {
            "counts" => Ok(Suite::Counts),
            "equivalence" => Ok(Suite::Equivalence),
            "degeneracy" => Ok(Suite::Degeneracy),
            "gradcheck" => Ok(Suite::Gradcheck),
            _ => Err(Error::Config(format!(
                "unknown suite `{s}` (expected counts, equivalence, degeneracy, gradcheck or all)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Counts => "counts",
            Suite::Equivalence => "equivalence",
            Suite::Degeneracy => "degeneracy",
            Suite::Gradcheck => "gradcheck",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    AtMost,
    AtLeast,
    /// Reported for information; never fails.
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub bound: Bound,
    /// Distance to the threshold on the passing side; negative on failure.
    pub margin: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, threshold: f64, bound: Bound) -> Self {
        let margin = match bound {
            Bound::AtMost => threshold - value,
            Bound::AtLeast => value - threshold,
            Bound::Info => 0.0,
        };
        let passed = match bound {
            Bound::AtMost => value <= threshold,
            Bound::AtLeast => value >= threshold,
            Bound::Info => true,
        };
        Self {
            name: name.into(),
            value,
            threshold,
            bound,
            margin,
            passed,
            detail: None,
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, threshold, Bound::AtMost)
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::new(name, value, threshold, Bound::AtLeast)
    }

    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, value, 0.0, Bound::Info)
    }

    /// Exact agreement: value is the number of mismatches.
    pub fn exact(name: impl Into<String>, mismatches: usize, detail: String) -> Self {
        Self::at_most(name, mismatches as f64, 0.0).with_detail(detail)
    }

    pub fn with_detail(mut self, d: impl Into<String>) -> Self {
        self.detail = Some(d.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub elapsed_s: f64,
    pub checks: Vec<Check>,
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let checks = match suite {
        Suite::Counts => counts_suite()?,
        Suite::Equivalence => equivalence_suite(seed)?,
        Suite::Degeneracy => degeneracy_suite(seed)?,
        Suite::Gradcheck => gradcheck_suite(seed)?,
    };
    Ok(SuiteReport {
        suite,
        passed: checks.iter().all(|c| c.passed),
        elapsed_s: start.elapsed().as_secs_f64(),
        checks,
    })
}

fn edge_space(channels: usize, candidates: &str) -> Result<SpaceSpec> {
    SpaceSpec::parse(&format!("space edge\nnodes 2\nchannels {channels}\n{candidates}"))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, dtype: DType) -> Tensor {
    let n = shape.iter().product();
    let d = Normal::new(0.0, scale).expect("valid normal");
    Tensor::new(shape, (0..n).map(|_| d.sample(rng)).collect(), dtype).expect("shape matches")
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let d = Normal::new(0.0, scale).expect("valid normal");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// `max |a − b| / max |b|`.
fn rel_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.max_abs_diff(b)?;
    let s = b.max_abs();
    Ok(if s == 0.0 { d } else { d / s })
}

fn edge_output(net: &Supernet, x: &Tensor, norm: KernelNorm) -> Result<Tensor> {
    let mut ctx = ForwardCtx::new(&net.params, &net.bn, net.dtype, BnMode::Train, None).with_kernel_norm(norm);
    let xv = ctx.tape.leaf(x.clone(), false)?;
    let y = net.edge_forward(&mut ctx, 0, 0, xv)?;
    Ok(ctx.tape.value(y).clone())
}

fn logits_and_loss(net: &Supernet, x: &Tensor, labels: &[usize], norm: KernelNorm) -> Result<(Tensor, f64)> {
    let mut ctx = ForwardCtx::new(&net.params, &net.bn, net.dtype, BnMode::Train, None).with_kernel_norm(norm);
    let xv = ctx.tape.leaf(x.clone(), false)?;
    let logits = net.forward(&mut ctx, xv)?;
    let loss = ctx.tape.cross_entropy(logits, labels)?;
    Ok((ctx.tape.value(logits).clone(), ctx.tape.value(loss).item()))
}

fn one_hot_logits(m: usize, k: usize) -> Vec<f64> {
    (0..m).map(|i| if i == k { 0.0 } else { -1e4 }).collect()
}

fn counts_suite() -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let spec = SpaceSpec::builtin("darts_cifar").expect("built-in");
    let net = Supernet::build(&spec, 0, DType::F32)?;
    let (_, log) = simplify_recursive(&net.cells[0].edges[0].graph);
    let got: Vec<_> = log.trajectory().iter().map(ModuleCount::as_tuple).collect();
    let mismatches = got.len().abs_diff(DARTS_TRAJECTORY.len())
        + got.iter().zip(DARTS_TRAJECTORY).filter(|(a, b)| **a != *b).count();
    checks.push(Check::exact("darts_edge_trajectory", mismatches, format!("{got:?}")));
    let passes: Vec<&str> = log.entries.iter().map(|e| e.pass.as_str()).collect();
    let expect = ["pms", "fms", "reparam"];
    checks.push(Check::exact(
        "darts_edge_passes",
        usize::from(passes != expect),
        passes.join(","),
    ));
    let conv_drop = 1.0 - log.final_count.conv as f64 / log.initial.conv as f64;
    checks.push(Check::at_least("darts_edge_conv_reduction", conv_drop, 0.5));

    let spec = SpaceSpec::builtin("nasbench201").expect("built-in");
    let net = Supernet::build(&spec, 0, DType::F32)?;
    let (_, log) = simplify_recursive(&net.cells[0].edges[0].graph);
    let passes: Vec<&str> = log.entries.iter().map(|e| e.pass.as_str()).collect();
    checks.push(Check::exact(
        "nasbench201_edge_passes",
        usize::from(passes != ["pms", "reparam"]) + log.initial.conv.abs_diff(2) + log.final_count.conv.abs_diff(1),
        format!("{} conv {} -> {}", passes.join(","), log.initial.conv, log.final_count.conv),
    ));
    Ok(checks)
}

/// Worst relative gap between a vanilla edge and the edge after one PMS
/// rewrite at the root, over random α and inputs.
fn pms_gap(candidates: &str, trials: usize, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let spec = edge_space(4, candidates)?;
    let mut vanilla = Supernet::build(&spec, rng.gen(), DType::F32)?;
    let mut shared = vanilla.clone();
    let g = &mut shared.cells[0].edges[0].graph;
    let grp = find_pms(&g.root).ok_or_else(|| Error::Rewrite("expected a shared group".into()))?;
    apply_pms(&mut g.root, &grp)?;
    let m = spec.candidates.len();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let alpha = rand_vec(rng, m, 1.5);
        vanilla.set_all_alphas(&alpha)?;
        shared.set_all_alphas(&alpha)?;
        let x = rand_tensor(rng, &[2, 4, 6, 6], 1.0, DType::F32);
        let a = edge_output(&vanilla, &x, KernelNorm::Off)?;
        let b = edge_output(&shared, &x, KernelNorm::Off)?;
        worst = worst.max(rel_diff(&b, &a)?);
    }
    Ok((worst, grp.savings))
}

fn equivalence_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let (gap, _) = pms_gap(
        "candidate a = relu conv(k=3)\ncandidate b = relu dwconv(k=3) pwconv\ncandidate c = relu maxpool(k=3)\n\
         candidate d = identity\ncandidate e = zero\ncandidate f = avgpool(k=3)\n",
        100,
        &mut rng,
    )?;
    checks.push(Check::at_most("shared_prefix_f32_rel", gap, 1e-6));

    let (gap, _) = pms_gap(
        "candidate a = relu conv(k=3) avgpool(k=3)\ncandidate b = maxpool(k=3) avgpool(k=3)\n\
         candidate c = conv(k=1) avgpool(k=3)\ncandidate d = identity\n",
        100,
        &mut rng,
    )?;
    checks.push(Check::at_most("shared_linear_suffix_f32_rel", gap, 1e-5));

    for name in ["darts_cifar", "nasbench201"] {
        let spec = SpaceSpec::builtin(name).expect("built-in");
        let vanilla = Supernet::build(&spec, seed, DType::F32)?;
        let (worst, deviation) = one_hot_stages(&vanilla, &mut rng)?;
        checks.push(Check::at_most(format!("{name}_one_hot_stages_f32_rel"), worst, 1e-6));
        // Outside the exact regimes the rewrites change the function; the
        // size of that change is reported, not bounded.
        checks.push(Check::info(format!("{name}_random_alpha_edge_deviation"), deviation));

        let mut simplified = vanilla.clone();
        simplified.simplify();
        let m = spec.candidates.len();
        let x = rand_tensor(&mut rng, &[4, 3, 8, 8], 1.0, DType::F32);
        let labels: Vec<usize> = (0..4).map(|i| i % spec.classes).collect();
        let (mut loss_gap, mut logit_gap) = (0.0f64, 0.0f64);
        for k in 0..m {
            let mut v = vanilla.clone();
            let mut s = simplified.clone();
            v.set_all_alphas(&one_hot_logits(m, k))?;
            s.set_all_alphas(&one_hot_logits(m, k))?;
            let (lv, a) = logits_and_loss(&v, &x, &labels, KernelNorm::Off)?;
            let (ls, b) = logits_and_loss(&s, &x, &labels, KernelNorm::Off)?;
            loss_gap = loss_gap.max((a - b).abs());
            logit_gap = logit_gap.max(rel_diff(&ls, &lv)?);
        }
        checks.push(Check::at_most(format!("{name}_one_hot_network_loss_f32"), loss_gap, 1e-5));
        checks.push(Check::info(format!("{name}_one_hot_network_logits_f32_rel"), logit_gap));
    }

    let spec = edge_space(
        4,
        "candidate a = conv(k=3)\ncandidate b = conv(k=5)\ncandidate c = conv(k=3,d=2)\ncandidate d = conv(k=1)\n\
         candidate e = dwconv(k=3) pwconv\ncandidate f = dwconv(k=5,d=2) pwconv\ncandidate g = dwconv(k=3)\n",
    )?;
    let mut worst = 0.0f64;
    for stride in [1, 2] {
        let mut vanilla = Supernet::build(&spec, seed, DType::F64)?;
        if stride == 2 {
            vanilla = with_edge_stride(&spec, seed, 2)?;
        }
        let mut merged = vanilla.clone();
        merged.simplify();
        if merged.cells[0].edges[0].graph.count().conv != 1 {
            return Err(Error::Rewrite("conv-only edge did not merge into one conv".into()));
        }
        for _ in 0..20 {
            let alpha = rand_vec(&mut rng, spec.candidates.len(), 1.5);
            vanilla.set_all_alphas(&alpha)?;
            merged.set_all_alphas(&alpha)?;
            let x = rand_tensor(&mut rng, &[2, 4, 9, 9], 1.0, DType::F64);
            worst = worst.max(rel_diff(&edge_output(&merged, &x, KernelNorm::Off)?, &edge_output(&vanilla, &x, KernelNorm::Off)?)?);
        }
    }
    checks.push(Check::at_most("merge_unify_compose_f64_rel", worst, 1e-10));
    Ok(checks)
}

/// Graph after each rewrite stage: vanilla, PMS to fixpoint, PMS and FMS to
/// fixpoint, fully simplified.
fn rewrite_stages(g: &ComputeGraph) -> Result<[ComputeGraph; 4]> {
    let mut pms = g.clone();
    let mut failure = None;
    let mut step_pms = |m: &mut Mix| match find_pms(m) {
        Some(grp) => match apply_pms(m, &grp) {
            Ok(()) => true,
            Err(e) => {
                failure = Some(e);
                false
            }
        },
        None => false,
    };
    while pms.root.visit_mut(&mut step_pms) {}
    let mut fms = pms.clone();
    let mut step_fms = |m: &mut Mix| match find_fms(m) {
        Some(fm) => apply_fms(m, &fm).is_ok(),
        None => false,
    };
    while fms.root.visit_mut(&mut step_pms) || fms.root.visit_mut(&mut step_fms) {}
    if let Some(e) = failure {
        return Err(e);
    }
    let (full, _) = simplify_recursive(g);
    Ok([g.clone(), pms, fms, full])
}

/// Output of candidate `k`'s own chain of units, with no mixing at all.
fn chain_output(net: &Supernet, k: usize, x: &Tensor, like: &Tensor) -> Result<Tensor> {
    let g = &net.cells[0].edges[0].graph;
    let b = candidate_branch(g, k).ok_or_else(|| Error::Rewrite(format!("no vanilla branch for candidate {k}")))?;
    if matches!(b.body, Body::Zero) {
        return Ok(Tensor::zeros(like.shape(), like.dtype()));
    }
    let mut ctx = ForwardCtx::new(&net.params, &net.bn, net.dtype, BnMode::Train, None);
    let mut h = ctx.tape.leaf(x.clone(), false)?;
    for u in branch_units(b) {
        h = ctx.eval_unit(u, h)?;
    }
    Ok(ctx.tape.value(h).clone())
}

/// Worst relative gap, over every one-hot β and every rewrite stage, between
/// the first edge's output and the selected candidate's chain; plus the
/// vanilla-vs-simplified deviation at one random β.
fn one_hot_stages(net: &Supernet, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let e = &net.cells[0].edges[0];
    let stages = rewrite_stages(&e.graph)?;
    let m = net.spec.candidates.len();
    let eval = |n: &Supernet, g: &ComputeGraph, x: &Tensor| -> Result<Tensor> {
        let mut ctx = ForwardCtx::new(&n.params, &n.bn, n.dtype, BnMode::Train, None);
        let xv = ctx.tape.leaf(x.clone(), false)?;
        let y = ctx.eval_edge(g, e.alpha, xv, 0)?;
        Ok(ctx.tape.value(y).clone())
    };
    let mut worst = 0.0f64;
    for k in 0..m {
        let mut n = net.clone();
        n.set_all_alphas(&one_hot_logits(m, k))?;
        let x = rand_tensor(rng, &[2, net.spec.channels, 6, 6], 1.0, DType::F32);
        let outs = stages.iter().map(|g| eval(&n, g, &x)).collect::<Result<Vec<_>>>()?;
        let chain = chain_output(&n, k, &x, &outs[0])?;
        for y in &outs {
            worst = worst.max(rel_diff(y, &chain)?);
        }
    }
    let mut n = net.clone();
    n.set_all_alphas(&rand_vec(rng, m, 1.0))?;
    let x = rand_tensor(rng, &[2, net.spec.channels, 6, 6], 1.0, DType::F32);
    let deviation = rel_diff(&eval(&n, &stages[3], &x)?, &eval(&n, &stages[0], &x)?)?;
    Ok((worst, deviation))
}

/// Single-edge supernet whose edge is a stride-`s` reduction edge.
fn with_edge_stride(spec: &SpaceSpec, seed: u64, s: usize) -> Result<Supernet> {
    let mut sp = spec.clone();
    sp.reductions = vec![0];
    let net = Supernet::build(&sp, seed, DType::F64)?;
    if net.cells[0].edges[0].stride != s {
        return Err(Error::Config("expected a strided edge".into()));
    }
    Ok(net)
}

/// Kernel parameter of each conv candidate of a single-edge supernet.
fn conv_kernels(net: &Supernet) -> Vec<ParamId> {
    let g = &net.cells[0].edges[0].graph;
    (0..g.num_candidates())
        .filter_map(|k| candidate_branch(g, k))
        .flat_map(|b| branch_units(b).into_iter().flat_map(|u| u.params.clone()).collect::<Vec<_>>())
        .collect()
}

fn softmax_mass(alpha: &[f64]) -> f64 {
    alpha.iter().map(|a| a.exp()).sum()
}

/// Kernels `K_i = K*_i · exp(α*_i − α_i) · Σexp α / Σexp α*`, which give
/// `β_i K_i = β*_i K*_i`.
pub fn degenerate_kernels(k_star: &[Tensor], alpha_star: &[f64], alpha: &[f64]) -> Vec<Tensor> {
    let ratio = softmax_mass(alpha) / softmax_mass(alpha_star);
    k_star
        .iter()
        .zip(alpha_star.iter().zip(alpha))
        .map(|(k, (&a_s, &a))| k.scale((a_s - a).exp() * ratio))
        .collect()
}

struct DegeneracyCase {
    output_gap: f64,
    loss_gap: f64,
}

fn degeneracy_case(
    net: &Supernet,
    kernels: &[ParamId],
    alpha_star: &[f64],
    alpha: &[f64],
    rng: &mut ChaCha8Rng,
    norm: KernelNorm,
) -> Result<DegeneracyCase> {
    let mut star = net.clone();
    let k_star: Vec<Tensor> = kernels
        .iter()
        .map(|&id| rand_tensor(rng, net.params.value(id).shape(), 0.5, DType::F64))
        .collect();
    for (&id, k) in kernels.iter().zip(&k_star) {
        star.params.get_mut(id).value = k.clone();
    }
    star.set_all_alphas(alpha_star)?;
    let mut moved = net.clone();
    for (&id, k) in kernels.iter().zip(degenerate_kernels(&k_star, alpha_star, alpha)) {
        moved.params.get_mut(id).value = k;
    }
    moved.set_all_alphas(alpha)?;
    let x = rand_tensor(rng, &[2, net.spec.channels, 6, 6], 1.0, DType::F64);
    let output_gap = edge_output(&moved, &x, norm)?.max_abs_diff(&edge_output(&star, &x, norm)?)?;
    let mut loss_gap = 0.0f64;
    for _split in ["train", "val"] {
        let xb = rand_tensor(rng, &[4, 3, 6, 6], 1.0, DType::F64);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..net.spec.classes)).collect();
        let (_, a) = logits_and_loss(&moved, &xb, &labels, norm)?;
        let (_, b) = logits_and_loss(&star, &xb, &labels, norm)?;
        loss_gap = loss_gap.max((a - b).abs());
    }
    Ok(DegeneracyCase { output_gap, loss_gap })
}

fn degeneracy_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = edge_space(4, "candidate a = conv(k=3)\ncandidate b = conv(k=5)\ncandidate c = conv(k=3,d=2)\n")?;
    let mut net = Supernet::build(&spec, seed, DType::F64)?;
    let kernels = conv_kernels(&net);
    net.simplify();
    let mut checks = Vec::new();

    let fixed = degeneracy_case(&net, &kernels, &[0.5, -0.2, 0.1], &[-1.0, 2.0, 0.0], &mut rng, KernelNorm::Off)?;
    checks.push(Check::at_most("example_output_gap", fixed.output_gap, 1e-9));

    let k_star: Vec<Tensor> = kernels.iter().map(|&id| net.params.value(id).clone()).collect();
    let a = [0.3, -0.7, 1.1];
    let same = degenerate_kernels(&k_star, &a, &a);
    let mismatches = same.iter().zip(&k_star).filter(|(x, y)| x.data() != y.data()).count();
    checks.push(Check::exact("alpha_equal_gives_same_kernels", mismatches, "K = K* when α = α*".into()));

    let (mut out_gap, mut loss_gap) = (0.0f64, 0.0f64);
    let mut normalized = Vec::with_capacity(50);
    for _ in 0..50 {
        let alpha_star = rand_vec(&mut rng, 3, 1.0);
        let alpha = rand_vec(&mut rng, 3, 1.5);
        let mut r1 = rng.clone();
        let c = degeneracy_case(&net, &kernels, &alpha_star, &alpha, &mut rng, KernelNorm::Off)?;
        out_gap = out_gap.max(c.output_gap);
        loss_gap = loss_gap.max(c.loss_gap);
        let n = degeneracy_case(&net, &kernels, &alpha_star, &alpha, &mut r1, KernelNorm::Whole)?;
        normalized.push(n.output_gap);
    }
    normalized.sort_by(|a, b| a.total_cmp(b));
    let median = 0.5 * (normalized[24] + normalized[25]);
    checks.push(Check::at_most("output_gap_without_normalization", out_gap, 1e-9));
    checks.push(Check::at_most("loss_gap_without_normalization", loss_gap, 1e-9));
    checks.push(Check::at_least("median_output_gap_with_normalization", median, 1e-3));
    Ok(checks)
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over `role`
/// parameters (every α entry, a sample of each kernel) of
/// `Σ probe ⊙ edge(x)`.
fn edge_grad_error(net: &Supernet, role: Role, x: &Tensor, probe: &Tensor, norm: KernelNorm, max_entries: usize) -> Result<f64> {
    let objective = |n: &Supernet, with_grad: bool| -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let mut ctx = ForwardCtx::new(&n.params, &n.bn, n.dtype, BnMode::Train, with_grad.then_some(role)).with_kernel_norm(norm);
        let xv = ctx.tape.leaf(x.clone(), false)?;
        let y = n.edge_forward(&mut ctx, 0, 0, xv)?;
        let p = ctx.tape.constant(probe.clone())?;
        let prod = ctx.tape.mul(y, p)?;
        let s = ctx.tape.sum(prod)?;
        let val = ctx.tape.value(s).item();
        let mut grads = Vec::new();
        if with_grad {
            let g = ctx.tape.backward(s)?;
            grads = ctx
                .bound_params()
                .filter(|&(id, _)| n.params.get(id).role == role)
                .map(|(id, v)| (id, g.wrt(v)))
                .collect();
            grads.sort_by_key(|(id, _)| *id);
        }
        Ok((val, grads))
    };
    let (_, grads) = objective(net, true)?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut work = net.clone();
    for (id, g) in grads {
        let n = g.numel();
        let stride = n.div_ceil(max_entries).max(1);
        for i in (0..n).step_by(stride) {
            let orig = net.params.value(id).clone();
            let mut plus = orig.clone();
            plus.data_mut()[i] += h;
            work.params.get_mut(id).value = plus;
            let (fp, _) = objective(&work, false)?;
            let mut minus = orig.clone();
            minus.data_mut()[i] -= h;
            work.params.get_mut(id).value = minus;
            let (fm, _) = objective(&work, false)?;
            work.params.get_mut(id).value = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = g.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

type Primitive = Box<dyn Fn(&mut Tape, &[Var]) -> crate::tensor::Result<Var>>;

/// Reduces a tensor to a scalar through a fixed random projection.
fn project(t: &mut Tape, y: Var, seed: u64) -> crate::tensor::Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = t.constant(rand_tensor(&mut rng, &shape, 1.0, DType::F64))?;
    let m = t.mul(y, p)?;
    t.sum(m)
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Primitive, Vec<Tensor>)> {
    let mut r = |shape: &[usize]| rand_tensor(rng, shape, 1.0, DType::F64);
    let x4 = r(&[2, 3, 5, 5]);
    vec![
        ("conv2d", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], ConvParams::same(3, 1, 1, 1))?;
            project(t, y, 1)
        }) as Primitive, vec![x4.clone(), r(&[4, 3, 3, 3])]),
        ("conv2d_dilated_strided", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], ConvParams::same(3, 2, 2, 1))?;
            project(t, y, 2)
        }), vec![x4.clone(), r(&[2, 3, 3, 3])]),
        ("conv2d_depthwise", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], ConvParams::same(3, 1, 1, 3))?;
            project(t, y, 3)
        }), vec![x4.clone(), r(&[3, 1, 3, 3])]),
        ("relu", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.relu(v[0])?;
            project(t, y, 4)
        }), vec![x4.clone()]),
        ("avg_pool", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.avg_pool(v[0], 3, 2)?;
            project(t, y, 5)
        }), vec![x4.clone()]),
        ("max_pool", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.max_pool(v[0], 3, 1)?;
            project(t, y, 6)
        }), vec![x4.clone()]),
        ("subsample", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.subsample(v[0], 2)?;
            project(t, y, 7)
        }), vec![x4.clone()]),
        ("batch_norm_train", Box::new(|t: &mut Tape, v: &[Var]| {
            let (y, _, _) = t.batch_norm_train(v[0], 1e-5)?;
            project(t, y, 8)
        }), vec![x4.clone()]),
        ("batch_norm_eval", Box::new(|t: &mut Tape, v: &[Var]| {
            let y = t.batch_norm_eval(v[0], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0], 1e-5)?;
            project(t, y, 9)
        }), vec![x4.clone()]),
        ("softmax_gather_sum_recip", Box::new(|t: &mut Tape, v: &[Var]| {
            let b = t.softmax(v[0])?;
            let g = t.gather(b, &[1, 3])?;
            let s = t.sum(g)?;
            let inv = t.recip_clamped(s, 1e-8)?;
            let g0 = t.gather(b, &[1])?;
            t.mul(g0, inv)
        }), vec![r(&[5])]),
        ("concat_weighted_sum", Box::new(|t: &mut Tape, v: &[Var]| {
            let w = t.concat(&[v[2], v[3]])?;
            let y = t.weighted_sum(&[v[0], v[1]], w)?;
            project(t, y, 10)
        }), vec![r(&[2, 2, 3, 3]), r(&[2, 2, 3, 3]), r(&[1]), r(&[1])]),
        ("scale_mul_const_add_n", Box::new(|t: &mut Tape, v: &[Var]| {
            let a = t.scale(v[0], v[1])?;
            let b = t.mul_const(v[0], 0.3)?;
            let y = t.add_n(&[a, b, v[0]])?;
            project(t, y, 11)
        }), vec![r(&[2, 3]), r(&[1])]),
        ("gap_linear_cross_entropy", Box::new(|t: &mut Tape, v: &[Var]| {
            let g = t.global_avg_pool(v[0])?;
            let l = t.linear(g, v[1], Some(v[2]))?;
            t.cross_entropy(l, &[1, 3])
        }), vec![x4.clone(), r(&[4, 3]), r(&[4])]),
        ("compose_separable", Box::new(|t: &mut Tape, v: &[Var]| {
            let k = t.compose_separable(v[0], v[1])?;
            project(t, k, 12)
        }), vec![r(&[3, 1, 3, 3]), r(&[4, 3, 1, 1])]),
        ("depthwise_to_dense", Box::new(|t: &mut Tape, v: &[Var]| {
            let k = t.depthwise_to_dense(v[0])?;
            project(t, k, 13)
        }), vec![r(&[3, 1, 3, 3])]),
        ("embed_kernel", Box::new(|t: &mut Tape, v: &[Var]| {
            let k = t.embed_kernel(v[0], 5, 2)?;
            project(t, k, 14)
        }), vec![r(&[2, 2, 3, 3])]),
        ("normalize_kernel_whole", Box::new(|t: &mut Tape, v: &[Var]| {
            let k = t.normalize_kernel(v[0], 1e-5, false)?;
            project(t, k, 15)
        }), vec![r(&[2, 2, 3, 3])]),
        ("normalize_kernel_per_channel", Box::new(|t: &mut Tape, v: &[Var]| {
            let k = t.normalize_kernel(v[0], 1e-5, true)?;
            project(t, k, 16)
        }), vec![r(&[2, 2, 3, 3])]),
        ("conv2d_taps", Box::new(|t: &mut Tape, v: &[Var]| {
            let k = t.embed_kernel(v[1], 5, 2)?;
            let taps: std::sync::Arc<[(usize, usize)]> =
                crate::tensor::embedded_taps(3, 3, 5, 2).expect("fits").into();
            let y = t.conv2d_taps(v[0], k, ConvParams::new(1, 1, 2, 1), Some(taps))?;
            project(t, y, 17)
        }), vec![x4, r(&[2, 3, 3, 3])]),
    ]
}

fn gradcheck_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (name, f, inputs) in primitive_cases(&mut rng) {
        let err = grad_check(f, &inputs, 1e-5)?;
        checks.push(Check::at_most(format!("primitive_{name}"), err, 1e-3));
    }
    for name in ["darts_cifar", "nasbench201"] {
        let spec = SpaceSpec::builtin(name).expect("built-in").with_channels(2)?;
        let mut net = Supernet::build(&spec, seed, DType::F64)?;
        net.simplify();
        let m = spec.candidates.len();
        net.set_all_alphas(&rand_vec(&mut rng, m, 1.0))?;
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5], 1.0, DType::F64);
        let probe = rand_tensor(&mut rng, &[2, 2, 5, 5], 1.0, DType::F64);
        for norm in [KernelNorm::Off, KernelNorm::Whole] {
            let tag = if norm == KernelNorm::Off { "" } else { "_normalized" };
            let ea = edge_grad_error(&net, Role::Arch, &x, &probe, norm, 64)?;
            checks.push(Check::at_most(format!("{name}_simplified_edge_alpha{tag}"), ea, 1e-3));
            let ew = edge_grad_error(&net, Role::Weight, &x, &probe, norm, 6)?;
            checks.push(Check::at_most(format!("{name}_simplified_edge_kernels{tag}"), ew, 1e-3));
        }
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_suite_passes() {
        let r = run_suite(Suite::Counts, 0).unwrap();
        assert!(r.passed, "{r:#?}");
    }

    #[test]
    fn degenerate_kernels_preserve_weighted_products() {
        let k = vec![Tensor::from_vec(vec![1.0, -2.0], DType::F64), Tensor::from_vec(vec![0.5, 3.0], DType::F64)];
        let (a_s, a) = ([0.4, -0.1], [1.2, 0.3]);
        let ks = degenerate_kernels(&k, &a_s, &a);
        let b_s = crate::tensor::softmax(&a_s);
        let b = crate::tensor::softmax(&a);
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[i] * ks[i].data()[j] - b_s[i] * k[i].data()[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.to_string().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn failing_check_has_negative_margin() {
        let c = Check::at_most("x", 2.0, 1.0);
        assert!(!c.passed && c.margin < 0.0);
        assert!(Check::info("y", 5.0).passed);
    }
}
