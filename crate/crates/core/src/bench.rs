//! Search cost against candidate count on generated spaces.
//!
//! A space of `n` candidates holds skip, max pool and avg pool, then
//! alternately a double-stacked separable conv and a dilated separable conv,
//! each family cycling its kernel size through 3, 5, 7.

use serde::{Deserialize, Serialize};

use crate::cost::normalized_cost;
use crate::data::{split, synthetic_blobs};
use crate::error::{Error, Result};
use crate::graph::SpaceSpec;
use crate::search::{bilevel_search, prepare_supernet, NoPenalty, Simplification, TrainConfig};
use crate::tensor::DType;

pub const MIN_CANDIDATES: usize = 3;
pub const MAX_CANDIDATES: usize = 16;
const KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub channels: usize,
    pub image_size: usize,
    pub samples: usize,
    pub batch_size: usize,
    /// Timed epochs per configuration; the fastest is kept.
    pub repeats: usize,
    /// Epochs of the full search the one-epoch time is extrapolated to.
    pub search_epochs: usize,
    pub seed: u64,
    pub precision: DType,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4, 6, 8, 10, 12, 14, 16],
            channels: 2,
            image_size: 8,
            samples: 128,
            batch_size: 16,
            repeats: 5,
            search_epochs: 50,
            seed: 0,
            precision: DType::F32,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Config("at least one candidate count is required".into()));
        }
        if let Some(&n) = self.sizes.iter().find(|&&n| !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n)) {
            return Err(Error::Config(format!(
                "candidate count {n} outside {MIN_CANDIDATES}..={MAX_CANDIDATES}"
            )));
        }
        if self.channels == 0 || self.image_size == 0 || self.batch_size == 0 || self.repeats == 0 {
            return Err(Error::Config("channels, image size, batch size and repeats must be positive".into()));
        }
        if self.samples < 2 * self.batch_size {
            return Err(Error::Config("need at least one batch in each of the train and val halves".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub candidates: usize,
    pub method: String,
    pub conv: usize,
    pub non_conv: usize,
    pub total: usize,
    pub memory_bytes: u64,
    pub epoch_wall_s: f64,
    pub extrapolated_s: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

/// Space text for `n` candidates on a single searchable edge.
pub fn recipe_space_text(n: usize, channels: usize) -> Result<String> {
    if !(MIN_CANDIDATES..=MAX_CANDIDATES).contains(&n) {
        return Err(Error::Config(format!("candidate count {n} outside {MIN_CANDIDATES}..={MAX_CANDIDATES}")));
    }
    let mut text = format!(
        "space bench_{n}\nnodes 2\nchannels {channels}\n\
         candidate skip_connect = identity\ncandidate max_pool_3x3 = maxpool(k=3)\ncandidate avg_pool_3x3 = avgpool(k=3)\n"
    );
    for i in 0..n - MIN_CANDIDATES {
        let k = KERNELS[(i / 2) % KERNELS.len()];
        if i % 2 == 0 {
            text += &format!(
                "candidate sep_conv_{k}x{k}_{i} = relu dwconv(k={k}) pwconv bn relu dwconv(k={k}) pwconv bn\n"
            );
        } else {
            text += &format!("candidate dil_conv_{k}x{k}_{i} = relu dwconv(k={k},d=2) pwconv bn\n");
        }
    }
    Ok(text)
}

pub fn recipe_space(n: usize, channels: usize) -> Result<SpaceSpec> {
    SpaceSpec::parse(&recipe_space_text(n, channels)?)
}

/// Measures one search epoch per size, with and without simplification, and
/// returns paired rows (baseline first). `C` is normalized over all rows.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let data = synthetic_blobs(4, cfg.image_size, cfg.samples, cfg.seed, 0.6);
    let halves = split(&data, 0.5, 0.5, cfg.seed);
    let mut rows = Vec::with_capacity(2 * cfg.sizes.len());
    for &n in &cfg.sizes {
        let mut spec = recipe_space(n, cfg.channels)?;
        spec.classes = 4;
        for (method, simplification) in [("baseline", Simplification::None), ("simplified", Simplification::Full)] {
            let train = TrainConfig {
                epochs: 1,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                precision: cfg.precision,
                simplification,
                ..TrainConfig::default()
            };
            let mut wall = f64::INFINITY;
            let mut memory = 0;
            let mut count = None;
            for _ in 0..cfg.repeats {
                let (mut net, _) = prepare_supernet(&spec, &train)?;
                let r = bilevel_search(&mut net, &halves.train, &halves.val, &train, &NoPenalty, None)?;
                if let Some(a) = r.aborted {
                    return Err(Error::State(format!("bench run for {n} candidates aborted: {}", a.message)));
                }
                wall = wall.min(r.run_cost.wall_time_s);
                memory = memory.max(r.run_cost.memory_bytes_peak);
                count = Some(r.module_count);
            }
            let count = count.expect("at least one repeat");
            rows.push(BenchRow {
                candidates: n,
                method: method.into(),
                conv: count.conv,
                non_conv: count.non_conv,
                total: count.total,
                memory_bytes: memory,
                epoch_wall_s: wall,
                extrapolated_s: wall * cfg.search_epochs as f64,
                c: 0.0,
            });
        }
    }
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.memory_bytes as f64, r.epoch_wall_s)).collect();
    for (row, c) in rows.iter_mut().zip(normalized_cost(&pairs)?) {
        row.c = c;
    }
    Ok(rows)
}

/// Per size, `1 − simplified/baseline` for (memory, time).
pub fn relative_gaps(rows: &[BenchRow]) -> Vec<(usize, f64, f64)> {
    rows.chunks(2)
        .filter(|p| p.len() == 2)
        .map(|p| {
            (
                p[0].candidates,
                1.0 - p[1].memory_bytes as f64 / p[0].memory_bytes as f64,
                1.0 - p[1].epoch_wall_s / p[0].epoch_wall_s,
            )
        })
        .collect()
}

pub fn write_bench_csv<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_sizes_and_families() {
        for n in MIN_CANDIDATES..=MAX_CANDIDATES {
            assert_eq!(recipe_space(n, 4).unwrap().candidates.len(), n);
        }
        let s = recipe_space(16, 4).unwrap();
        let names: Vec<&str> = s.candidates.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("sep_conv")).count(), 7);
        assert_eq!(names.iter().filter(|n| n.starts_with("dil_conv")).count(), 6);
        assert_eq!(names[3], "sep_conv_3x3_0");
        assert_eq!(names[4], "dil_conv_3x3_1");
        assert_eq!(names[5], "sep_conv_5x5_2");
        assert_eq!(names[7], "sep_conv_7x7_4");
        assert!(recipe_space(17, 4).is_err() && recipe_space(2, 4).is_err());
    }

    #[test]
    fn rows_are_paired_and_parameterless_base_is_unchanged() {
        let cfg = BenchConfig {
            sizes: vec![3, 5],
            samples: 32,
            repeats: 1,
            ..BenchConfig::default()
        };
        let rows = run_bench(&cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].method.as_str(), rows[1].method.as_str()), ("baseline", "simplified"));
        assert_eq!(rows[0].total, rows[1].total);
        assert_eq!(rows[0].memory_bytes, rows[1].memory_bytes);
        assert!(rows[3].total < rows[2].total);
        assert!(rows.iter().any(|r| (r.c - 1.0).abs() < 1.0) && rows.iter().all(|r| r.c >= 1.0));
        let mut buf = Vec::new();
        write_bench_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("candidates,method,conv,non_conv,total,memory_bytes,epoch_wall_s,extrapolated_s,C"));
    }

    #[test]
    fn config_validation() {
        let bad = BenchConfig { sizes: vec![2], ..BenchConfig::default() };
        assert!(bad.validate().is_err());
        let bad = BenchConfig { samples: 8, ..BenchConfig::default() };
        assert!(bad.validate().is_err());
        assert!(BenchConfig::default().validate().is_ok());
    }
}
