//! Module tallies, run-cost measurement and the normalized cost metric.

use std::iter::Sum;
use std::ops::{Add, Sub};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::memory;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub conv: usize,
    pub non_conv: usize,
    pub total: usize,
}

impl ModuleCount {
    pub fn new(conv: usize, non_conv: usize) -> Self {
        Self {
            conv,
            non_conv,
            total: conv + non_conv,
        }
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.conv, self.non_conv, self.total)
    }
}

impl Add for ModuleCount {
    type Output = ModuleCount;
    fn add(self, o: ModuleCount) -> ModuleCount {
        ModuleCount::new(self.conv + o.conv, self.non_conv + o.non_conv)
    }
}

impl Sub for ModuleCount {
    type Output = ModuleCount;
    fn sub(self, o: ModuleCount) -> ModuleCount {
        ModuleCount::new(self.conv - o.conv, self.non_conv - o.non_conv)
    }
}

impl Sum for ModuleCount {
    fn sum<I: Iterator<Item = ModuleCount>>(iter: I) -> ModuleCount {
        iter.fold(ModuleCount::default(), |a, b| a + b)
    }
}

/// Measured memory (peak tracked tensor bytes) and wall time of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunCost {
    pub memory_bytes_peak: u64,
    pub wall_time_s: f64,
}

/// Tracks the tensor-byte high-water mark and elapsed time of a loop on the
/// current thread.
pub struct RunMeter {
    start: Instant,
    iterations: usize,
}

impl RunMeter {
    pub fn start() -> Self {
        memory::reset_peak();
        Self {
            start: Instant::now(),
            iterations: 0,
        }
    }

    pub fn tick(&mut self) {
        self.iterations += 1;
    }

    pub fn finish(self) -> Result<RunCost> {
        if self.iterations == 0 {
            return Err(Error::State("no loop iteration completed; nothing to measure".into()));
        }
        Ok(RunCost {
            memory_bytes_peak: memory::peak_bytes() as u64,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        })
    }
}

/// `C = ½(M/M_min + T/T_min)` with minima taken over the given set.
pub fn normalized_cost(costs: &[(f64, f64)]) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::Config("normalized cost needs at least one run".into()));
    }
    if costs.iter().any(|&(m, t)| !(m > 0.0 && t > 0.0)) {
        return Err(Error::Config("memory and time must be positive".into()));
    }
    let m_min = costs.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let t_min = costs.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    Ok(costs
        .iter()
        .map(|&(m, t)| 0.5 * (m / m_min + t / t_min))
        .collect())
}

pub fn normalized_cost_runs(runs: &[RunCost]) -> Result<Vec<f64>> {
    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| (r.memory_bytes_peak as f64, r.wall_time_s))
        .collect();
    normalized_cost(&pairs)
}

/// A published search cost: memory in MB, time in seconds, and the
/// normalized cost printed next to them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportedCost {
    pub method: &'static str,
    pub memory_mb: f64,
    pub time_s: f64,
    pub c: f64,
}

const fn reported(method: &'static str, memory_mb: f64, time_s: f64, c: f64) -> ReportedCost {
    ReportedCost { method, memory_mb, time_s, c }
}

/// Search costs reported for DARTS-family methods on NAS-Bench-201.
pub const NASBENCH201_REPORTED: [ReportedCost; 12] = [
    reported("DARTS", 3626.0, 11386.0, 1.43),
    reported("DARTS+Ours", 3006.0, 8620.0, 1.14),
    reported("beta-DARTS", 3626.0, 11318.0, 1.43),
    reported("beta-DARTS+Ours", 3006.0, 8800.0, 1.15),
    reported("beta-DARTS-100ep", 3626.0, 22365.0, 2.07),
    reported("beta-DARTS-100ep+Ours", 3006.0, 17854.0, 1.68),
    reported("PC-DARTS", 2500.0, 11987.0, 1.23),
    reported("PC-DARTS+Ours", 2344.0, 10430.0, 1.10),
    reported("PC-DARTS-beta", 2500.0, 12066.0, 1.23),
    reported("PC-DARTS-beta+Ours", 2344.0, 10392.0, 1.10),
    reported("GDAS", 2540.0, 20720.0, 1.74),
    reported("GDAS+Ours", 2582.0, 18389.0, 1.62),
];

/// One row of a cost table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub space: String,
    pub conv: usize,
    pub non_conv: usize,
    pub total: usize,
    pub memory_bytes: u64,
    pub wall_s: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

pub fn write_csv<W: std::io::Write>(rows: &[CostRow], out: W) -> Result<()> {
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
    use proptest::prelude::*;

    #[test]
    fn single_run_is_unit_cost() {
        assert_eq!(normalized_cost(&[(5.0, 7.0)]).unwrap(), vec![1.0]);
        assert!(normalized_cost(&[]).is_err());
    }

    #[test]
    fn empty_meter_is_an_error() {
        assert!(RunMeter::start().finish().is_err());
    }

    #[test]
    fn csv_has_expected_header() {
        let row = CostRow {
            method: "m".into(),
            space: "s".into(),
            conv: 1,
            non_conv: 2,
            total: 3,
            memory_bytes: 10,
            wall_s: 0.5,
            c: 1.0,
        };
        let mut buf = Vec::new();
        write_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,space,conv,non_conv,total,memory_bytes,wall_s,C\n"));
    }

    proptest! {
        #[test]
        fn cost_at_least_one_and_scale_free(
            pairs in prop::collection::vec((1.0f64..1e4, 1.0f64..1e4), 1..8),
            s in 0.1f64..10.0,
        ) {
            let c = normalized_cost(&pairs).unwrap();
            prop_assert!(c.iter().all(|&v| v >= 1.0 - 1e-12));
            let scaled: Vec<_> = pairs.iter().map(|&(m, t)| (m * s, t)).collect();
            let c2 = normalized_cost(&scaled).unwrap();
            for (a, b) in c.iter().zip(&c2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
