//! Training the discretized network from scratch at toy scale.

use serde::{Deserialize, Serialize};

use super::driver::{abort, forward_backward, AbortRecord, Phase};
use super::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::cost::{RunCost, RunMeter};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{BnMode, Genotype, Role, SpaceSpec, Supernet};
use crate::reparam::KernelNorm;
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub precision: DType,
    /// Overrides the space's cell count.
    pub cells: Option<usize>,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 5.0,
            seed: 0,
            precision: DType::F32,
            cells: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub genotype: String,
    pub cells: usize,
    pub epochs: usize,
    pub train_loss: Vec<f64>,
    pub train_acc: Vec<f64>,
    pub test_accuracy: f64,
    pub test_examples: usize,
    pub run_cost: RunCost,
    pub aborted: Option<AbortRecord>,
}

/// Trains the network that keeps only the genotype's operations (plain
/// kernels, no weighted sums) and reports top-1 accuracy on `test`.
pub fn retrain(spec: &SpaceSpec, genotype: &Genotype, train: &Dataset, test: &Dataset, cfg: &RetrainConfig) -> Result<RetrainReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("retrain needs positive epochs, batch size and learning rate".into()));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("retrain needs nonempty train and test sets".into()));
    }
    let mut spec = spec.clone();
    if let Some(c) = cfg.cells {
        if c == 0 {
            return Err(Error::Config("cell count must be positive".into()));
        }
        spec.cells = c;
        spec.reductions.retain(|&r| r < c);
    }
    let mut net = Supernet::discrete(&spec, genotype, cfg.seed, cfg.precision)?;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let steps = train.len().div_ceil(cfg.batch_size);
    let total = steps * cfg.epochs;
    let mut report = RetrainReport {
        genotype: genotype.to_string(),
        cells: spec.cells,
        epochs: cfg.epochs,
        train_loss: Vec::new(),
        train_acc: Vec::new(),
        test_accuracy: 0.0,
        test_examples: test.len(),
        run_cost: RunCost {
            memory_bytes_peak: 0,
            wall_time_s: 0.0,
        },
        aborted: None,
    };
    let mut meter = RunMeter::start();
    let mut t = 0;
    'outer: for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut hits, mut n) = (0.0, 0usize, 0usize);
        for (step, (x, labels)) in train.batches(cfg.batch_size, cfg.seed, epoch, cfg.precision)?.iter().enumerate() {
            let mut o = forward_backward(&mut net, x, labels, Some(Role::Weight), KernelNorm::Off, BnMode::Train, true, None)?;
            if !o.loss.is_finite() {
                report.aborted = Some(abort(epoch, step, Phase::Weights, o.loss, o.non_finite));
                break 'outer;
            }
            clip_grad_norm(&mut o.grads, cfg.grad_clip);
            sgd.step(&mut net.params, &o.grads, cosine_lr(cfg.lr, 0.0, t, total));
            t += 1;
            meter.tick();
            loss_sum += o.loss * labels.len() as f64;
            hits += o.correct;
            n += labels.len();
        }
        report.train_loss.push(loss_sum / n as f64);
        report.train_acc.push(hits as f64 / n as f64);
    }
    let mut hits = 0;
    for (x, labels) in test.batches(cfg.batch_size, cfg.seed, 0, cfg.precision)? {
        hits += forward_backward(&mut net, &x, &labels, None, KernelNorm::Off, BnMode::Eval, false, None)?.correct;
    }
    report.test_accuracy = hits as f64 / test.len() as f64;
    report.run_cost = meter.finish().unwrap_or(RunCost {
        memory_bytes_peak: crate::tensor::memory::peak_bytes() as u64,
        wall_time_s: 0.0,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, synthetic_blobs};

    fn all_skip() -> Genotype {
        "|skip_connect~0|+|skip_connect~0|skip_connect~1|+|skip_connect~0|skip_connect~1|skip_connect~2|"
            .parse()
            .unwrap()
    }

    #[test]
    fn identity_network_separates_blobs() {
        let spec = SpaceSpec::builtin("nasbench201").unwrap();
        let d = synthetic_blobs(4, 8, 256, 11, 0.5);
        let s = split(&d, 0.5, 0.5, 11);
        let cfg = RetrainConfig {
            epochs: 10,
            batch_size: 16,
            cells: Some(1),
            ..RetrainConfig::default()
        };
        let r = retrain(&spec, &all_skip(), &s.train, &s.val, &cfg).unwrap();
        assert!(r.test_accuracy >= 0.95, "accuracy {}", r.test_accuracy);
        assert_eq!(r.train_loss.len(), 10);
    }

    #[test]
    fn same_seed_same_accuracy() {
        let spec = SpaceSpec::builtin("nasbench201").unwrap();
        let d = synthetic_blobs(4, 6, 64, 12, 0.8);
        let s = split(&d, 0.5, 0.5, 12);
        let cfg = RetrainConfig {
            epochs: 2,
            batch_size: 16,
            precision: DType::F64,
            ..RetrainConfig::default()
        };
        let g: Genotype = "|nor_conv_3x3~0|+|skip_connect~0|avg_pool_3x3~1|+|nor_conv_1x1~0|none~1|skip_connect~2|"
            .parse()
            .unwrap();
        let a = retrain(&spec, &g, &s.train, &s.val, &cfg).unwrap();
        let b = retrain(&spec, &g, &s.train, &s.val, &cfg).unwrap();
        assert_eq!(a.test_accuracy, b.test_accuracy);
        assert_eq!(a.train_loss, b.train_loss);
    }

    #[test]
    fn unknown_operation_is_a_config_error() {
        let spec = SpaceSpec::builtin("nasbench201").unwrap();
        let d = synthetic_blobs(4, 6, 16, 1, 0.5);
        let s = split(&d, 0.5, 0.5, 1);
        let g: Genotype = "|bogus~0|+|skip_connect~0|skip_connect~1|+|skip_connect~0|skip_connect~1|skip_connect~2|"
            .parse()
            .unwrap();
        assert!(matches!(
            retrain(&spec, &g, &s.train, &s.val, &RetrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
