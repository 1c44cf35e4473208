use serde::{Deserialize, Serialize};

use super::config::{AlphaInit, Simplification, TrainConfig};
use super::hook::AlphaRegularizer;
use super::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::cost::{ModuleCount, RunCost, RunMeter};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{discretize, BnMode, ForwardCtx, ParamId, Role, SpaceSpec, Supernet};
use crate::reparam::KernelNorm;
use crate::simplify::RewriteLog;
use crate::tensor::{Tensor, TensorError};

/// Logit gap used for one-hot initialization; large enough that the softmax
/// underflows to exact zeros.
const ONE_HOT_GAP: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Weights,
    Alpha,
}

/// Which data split fed which update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowTag {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    /// Debug rendering of the offending loss (`NaN`, `inf`).
    pub loss: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub genotype: String,
    /// Architecture logits after each epoch, `[epoch][cell kind][edge][candidate]`.
    pub alpha_trajectory: Vec<Vec<Vec<Vec<f64>>>>,
    /// Final softmax weights, `[cell kind][edge][candidate]`.
    pub betas: Vec<Vec<Vec<f64>>>,
    pub curves: Curves,
    /// Train loss of every weight step, in order.
    pub step_losses: Vec<f64>,
    pub run_cost: RunCost,
    /// One log per edge of the first cell; empty without simplification.
    pub rewrite_logs: Vec<RewriteLog>,
    pub module_count: ModuleCount,
    pub aborted: Option<AbortRecord>,
}

/// Builds the supernet for a config: seeded weights, initial α and the
/// requested simplification.
pub fn prepare_supernet(spec: &SpaceSpec, cfg: &TrainConfig) -> Result<(Supernet, Vec<RewriteLog>)> {
    cfg.validate()?;
    let mut net = Supernet::build(spec, cfg.seed, cfg.precision)?;
    if let AlphaInit::OneHot(k) = cfg.alpha_init {
        let m = net.num_candidates();
        if k >= m {
            return Err(Error::Config(format!("one-hot index {k} out of range for {m} candidates")));
        }
        let logits: Vec<f64> = (0..m).map(|i| if i == k { 0.0 } else { -ONE_HOT_GAP }).collect();
        net.set_all_alphas(&logits)?;
    }
    let logs = match cfg.simplification {
        Simplification::None => Vec::new(),
        Simplification::Full => {
            let per_cell = net.cells.first().map_or(0, |c| c.edges.len());
            let mut logs = net.simplify();
            logs.truncate(per_cell);
            logs
        }
    };
    Ok((net, logs))
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count()
}

pub(crate) struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub grads: Vec<(ParamId, Tensor)>,
    /// Operation that produced a non-finite value, if any.
    pub non_finite: Option<String>,
}

/// One forward/backward pass; gradients are taken for `role` and returned
/// sorted by parameter id. Train-mode BN statistics are folded into the
/// running averages when `update_bn` is set. A non-finite intermediate value
/// is reported as a NaN loss rather than an error.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_backward(
    net: &mut Supernet,
    x: &Tensor,
    labels: &[usize],
    role: Option<Role>,
    kernel_norm: KernelNorm,
    bn_mode: BnMode,
    update_bn: bool,
    penalty: Option<(&dyn AlphaRegularizer, usize)>,
) -> Result<StepOutcome> {
    match try_forward_backward(net, x, labels, role, kernel_norm, bn_mode, update_bn, penalty) {
        Err(Error::Tensor(TensorError::NonFinite(what))) => Ok(StepOutcome {
            loss: f64::NAN,
            correct: 0,
            grads: Vec::new(),
            non_finite: Some(what),
        }),
        other => other,
    }
}

#[allow(clippy::too_many_arguments)]
fn try_forward_backward(
    net: &mut Supernet,
    x: &Tensor,
    labels: &[usize],
    role: Option<Role>,
    kernel_norm: KernelNorm,
    bn_mode: BnMode,
    update_bn: bool,
    penalty: Option<(&dyn AlphaRegularizer, usize)>,
) -> Result<StepOutcome> {
    let (loss, correct, grads, bn_updates) = {
        let mut ctx = ForwardCtx::new(&net.params, &net.bn, net.dtype, bn_mode, role).with_kernel_norm(kernel_norm);
        let xv = ctx.tape.leaf(x.clone(), false)?;
        let logits = net.forward(&mut ctx, xv)?;
        let ce = ctx.tape.cross_entropy(logits, labels)?;
        let correct = correct(ctx.tape.value(logits), labels);
        let mut total = ce;
        if let Some((hook, epoch)) = penalty {
            let alphas = net
                .alpha_ids()
                .into_iter()
                .map(|id| ctx.param(id))
                .collect::<Result<Vec<_>>>()?;
            if let Some(p) = hook.penalty(&mut ctx.tape, &alphas, epoch)? {
                total = ctx.tape.add(ce, p)?;
            }
        }
        let loss = ctx.tape.value(ce).item();
        let mut grads = Vec::new();
        if role.is_some() && loss.is_finite() {
            let g = ctx.tape.backward(total)?;
            grads = ctx
                .bound_params()
                .filter(|&(id, _)| {
                    let p = net.params.get(id);
                    Some(p.role) == role && p.requires_grad
                })
                .map(|(id, v)| (id, g.wrt(v)))
                .collect();
            grads.sort_by_key(|(id, _)| *id);
        }
        (loss, correct, grads, std::mem::take(&mut ctx.bn_updates))
    };
    if update_bn && loss.is_finite() {
        for (id, mean, var) in bn_updates {
            net.bn.update(id, &mean, &var);
        }
    }
    Ok(StepOutcome {
        loss,
        correct,
        grads,
        non_finite: (!loss.is_finite()).then(|| "cross_entropy".to_string()),
    })
}

fn alpha_snapshot(net: &Supernet) -> Vec<Vec<Vec<f64>>> {
    net.alphas
        .iter()
        .map(|edges| edges.iter().map(|&id| net.params.value(id).to_vec()).collect())
        .collect()
}

/// Interleaved first-order bi-level search: per step one SGD update of the
/// weights on a train batch, then one Adam update of α on a val batch.
pub fn bilevel_search(
    net: &mut Supernet,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    hook: &dyn AlphaRegularizer,
    mut trace: Option<&mut Vec<FlowTag>>,
) -> Result<SearchResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and val splits must be nonempty".into()));
    }
    if net.dtype != cfg.precision {
        return Err(Error::Config("supernet precision differs from the config".into()));
    }
    let mut sgd = Sgd::new(cfg.w_momentum, cfg.w_weight_decay);
    let mut adam = Adam::new(cfg.alpha);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size).min(val.len().div_ceil(cfg.batch_size));
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut curves = Curves::default();
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut trajectory = Vec::with_capacity(cfg.epochs);
    let mut aborted = None;
    let mut meter = RunMeter::start();
    let mut global = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let tb = train.batches(cfg.batch_size, cfg.seed, epoch, cfg.precision)?;
        let vb = val.batches(cfg.batch_size, cfg.seed.wrapping_add(0x5eed), epoch, cfg.precision)?;
        let mut sums = [0.0f64; 4];
        let (mut nt, mut nv) = (0usize, 0usize);
        for (step, ((xt, lt), (xv, lv))) in tb.iter().zip(&vb).enumerate() {
            let lr = cosine_lr(cfg.w_lr_init, cfg.w_lr_min, global, total_steps);
            if let Some(t) = trace.as_deref_mut() {
                t.push(FlowTag { epoch, step, phase: Phase::Weights, split: Split::Train });
            }
            let mut w = forward_backward(net, xt, lt, Some(Role::Weight), cfg.kernel_norm, BnMode::Train, true, None)?;
            if !w.loss.is_finite() {
                aborted = Some(abort(epoch, step, Phase::Weights, w.loss, w.non_finite));
                break 'epochs;
            }
            clip_grad_norm(&mut w.grads, cfg.w_grad_clip);
            sgd.step(&mut net.params, &w.grads, lr);
            net.weight_version += 1;
            step_losses.push(w.loss);
            sums[0] += w.loss * lt.len() as f64;
            sums[1] += w.correct as f64;
            nt += lt.len();

            if let Some(t) = trace.as_deref_mut() {
                t.push(FlowTag { epoch, step, phase: Phase::Alpha, split: Split::Val });
            }
            let role = (!cfg.freeze_alpha).then_some(Role::Arch);
            let a = forward_backward(net, xv, lv, role, cfg.kernel_norm, BnMode::Train, false, Some((hook, epoch)))?;
            if !a.loss.is_finite() {
                aborted = Some(abort(epoch, step, Phase::Alpha, a.loss, a.non_finite));
                break 'epochs;
            }
            if !cfg.freeze_alpha {
                adam.step(&mut net.params, &a.grads);
                net.alpha_version += 1;
            }
            sums[2] += a.loss * lv.len() as f64;
            sums[3] += a.correct as f64;
            nv += lv.len();
            global += 1;
            meter.tick();
        }
        curves.train_loss.push(sums[0] / nt as f64);
        curves.train_acc.push(sums[1] / nt as f64);
        curves.val_loss.push(sums[2] / nv as f64);
        curves.val_acc.push(sums[3] / nv as f64);
        trajectory.push(alpha_snapshot(net));
    }
    let run_cost = match meter.finish() {
        Ok(c) => c,
        Err(_) => RunCost {
            memory_bytes_peak: crate::tensor::memory::peak_bytes() as u64,
            wall_time_s: 0.0,
        },
    };
    let betas = net.betas();
    Ok(SearchResult {
        genotype: discretize(&net.spec, &betas, true).to_string(),
        alpha_trajectory: trajectory,
        betas,
        curves,
        step_losses,
        run_cost,
        rewrite_logs: Vec::new(),
        module_count: net.cells.iter().flat_map(|c| &c.edges).map(|e| e.graph.count()).sum(),
        aborted,
    })
}

pub(crate) fn abort(epoch: usize, step: usize, phase: Phase, loss: f64, source: Option<String>) -> AbortRecord {
    AbortRecord {
        epoch,
        step,
        phase,
        loss: format!("{loss:?}"),
        message: format!(
            "non-finite value from {} in the {phase:?} step; run stopped",
            source.as_deref().unwrap_or("the loss")
        ),
    }
}

/// Prepares the supernet, runs the search and attaches the rewrite logs.
pub fn run_search(spec: &SpaceSpec, train: &Dataset, val: &Dataset, cfg: &TrainConfig, hook: &dyn AlphaRegularizer) -> Result<SearchResult> {
    let (mut net, logs) = prepare_supernet(spec, cfg)?;
    let mut r = bilevel_search(&mut net, train, val, cfg, hook, None)?;
    r.rewrite_logs = logs;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::graph::{BasicModule, ModuleKind, OperationChain};
    use crate::search::hook::{ConstantPenalty, L2Penalty, NoPenalty};
    use crate::tensor::DType;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    fn tiny_spec() -> SpaceSpec {
        let mut s = SpaceSpec::builtin("nasbench201").unwrap().with_channels(4).unwrap();
        s.cells = 1;
        s
    }

    #[test]
    fn zero_epochs_is_a_config_error() {
        let cfg = TrainConfig { epochs: 0, ..small_cfg() };
        assert!(matches!(prepare_supernet(&tiny_spec(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn weights_see_train_and_alpha_sees_val() {
        let d = synthetic_blobs(4, 6, 32, 1, 0.5);
        let s = crate::data::split(&d, 0.5, 0.5, 1);
        let cfg = small_cfg();
        let (mut net, _) = prepare_supernet(&tiny_spec(), &cfg).unwrap();
        let mut tags = Vec::new();
        let r = bilevel_search(&mut net, &s.train, &s.val, &cfg, &NoPenalty, Some(&mut tags)).unwrap();
        assert!(!tags.is_empty());
        for pair in tags.chunks(2) {
            assert_eq!((pair[0].phase, pair[0].split), (Phase::Weights, Split::Train));
            assert_eq!((pair[1].phase, pair[1].split), (Phase::Alpha, Split::Val));
            assert_eq!(pair[0].step, pair[1].step);
        }
        assert_eq!(r.curves.train_loss.len(), 2);
        assert_eq!(r.alpha_trajectory.len(), 2);
        assert!(r.run_cost.memory_bytes_peak > 0 && r.run_cost.wall_time_s > 0.0);
    }

    #[test]
    fn f64_runs_are_bitwise_repeatable() {
        let d = synthetic_blobs(4, 6, 32, 2, 0.5);
        let s = crate::data::split(&d, 0.5, 0.5, 2);
        let cfg = TrainConfig {
            precision: DType::F64,
            ..small_cfg()
        };
        let run = || {
            let mut r = run_search(&tiny_spec(), &s.train, &s.val, &cfg, &NoPenalty).unwrap();
            r.run_cost.wall_time_s = 0.0;
            r
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn default_and_constant_hooks_leave_alpha_unchanged() {
        let d = synthetic_blobs(4, 6, 32, 3, 0.5);
        let s = crate::data::split(&d, 0.5, 0.5, 3);
        let cfg = TrainConfig {
            precision: DType::F64,
            ..small_cfg()
        };
        let a = run_search(&tiny_spec(), &s.train, &s.val, &cfg, &NoPenalty).unwrap();
        let b = run_search(&tiny_spec(), &s.train, &s.val, &cfg, &ConstantPenalty(3.0)).unwrap();
        assert_eq!(a.alpha_trajectory, b.alpha_trajectory);
        let c = run_search(&tiny_spec(), &s.train, &s.val, &cfg, &L2Penalty(10.0)).unwrap();
        assert_ne!(a.alpha_trajectory, c.alpha_trajectory);
    }

    #[test]
    fn quadratic_hook_gradient_matches_finite_differences() {
        let d = synthetic_blobs(4, 6, 8, 4, 0.5);
        let cfg = TrainConfig {
            precision: DType::F64,
            ..small_cfg()
        };
        let (mut net, _) = prepare_supernet(&tiny_spec(), &cfg).unwrap();
        net.set_all_alphas(&[0.3, -0.2, 0.5, 0.1, -0.4]).unwrap();
        let (x, l) = d.batches(8, 0, 0, DType::F64).unwrap().remove(0);
        let hook = L2Penalty(1.0);
        let with = forward_backward(&mut net, &x, &l, Some(Role::Arch), KernelNorm::Off, BnMode::Train, false, Some((&hook, 0))).unwrap();
        let without = forward_backward(&mut net, &x, &l, Some(Role::Arch), KernelNorm::Off, BnMode::Train, false, None).unwrap();
        let id = net.alpha_ids()[0];
        let alpha = net.params.value(id).to_vec();
        let (gw, g0) = (&with.grads[0].1, &without.grads[0].1);
        for i in 0..alpha.len() {
            assert!((gw.data()[i] - g0.data()[i] - 2.0 * alpha[i]).abs() < 1e-9);
        }
        let penalty = |net: &Supernet| -> f64 { net.alpha_ids().iter().map(|&id| net.params.value(id).data().iter().map(|v| v * v).sum::<f64>()).sum() };
        let h = 1e-5;
        let mut plus = net.clone();
        let mut a = alpha.clone();
        a[0] += h;
        plus.params.get_mut(id).value = Tensor::from_vec(a.clone(), DType::F64);
        let mut minus = net.clone();
        a[0] -= 2.0 * h;
        minus.params.get_mut(id).value = Tensor::from_vec(a, DType::F64);
        let fd = (penalty(&plus) - penalty(&minus)) / (2.0 * h);
        assert!((fd - 2.0 * alpha[0]).abs() < 1e-6);
    }

    #[test]
    fn identity_beats_zero_on_pass_through_task() {
        let m = |k| BasicModule::new(k, 4, 4);
        let spec = SpaceSpec::single_edge(
            "pass",
            4,
            vec![
                OperationChain::new("skip", vec![m(ModuleKind::Identity)]),
                OperationChain::new("none", vec![]),
            ],
        )
        .unwrap();
        let d = synthetic_blobs(4, 6, 128, 5, 1.0);
        let s = crate::data::split(&d, 0.5, 0.5, 5);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            w_lr_init: 0.05,
            alpha: crate::search::config::AdamConfig {
                lr: 1e-2,
                ..TrainConfig::default().alpha
            },
            ..TrainConfig::default()
        };
        let (mut net, _) = prepare_supernet(&spec, &cfg).unwrap();
        let r = bilevel_search(&mut net, &s.train, &s.val, &cfg, &NoPenalty, None).unwrap();
        assert!(r.betas[0][0][0] > 0.5, "{:?}", r.betas);
        let (x, l) = s.val.batches(64, 0, 0, cfg.precision).unwrap().remove(0);
        let loss = |net: &mut Supernet| {
            forward_backward(net, &x, &l, None, KernelNorm::Off, BnMode::Eval, false, None).unwrap().loss
        };
        let searched = loss(&mut net);
        net.set_all_alphas(&[-ONE_HOT_GAP, 0.0]).unwrap();
        assert!(loss(&mut net) > searched);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let d = synthetic_blobs(4, 6, 16, 6, 0.5);
        let s = crate::data::split(&d, 0.5, 0.5, 6);
        let cfg = TrainConfig {
            w_lr_init: 1e300,
            w_grad_clip: 1e300,
            precision: DType::F64,
            ..small_cfg()
        };
        let r = run_search(&tiny_spec(), &s.train, &s.val, &cfg, &NoPenalty).unwrap();
        let a = r.aborted.expect("aborted");
        assert!(a.loss.contains("NaN") || a.loss.contains("inf"));
        assert!(r.step_losses.iter().all(|l| l.is_finite()));
    }
}
