//! Closed-form parameter and multiply-accumulate accounting, plus a
//! wall-clock throughput benchmark.
//!
//! Counting never instantiates weights. One MAC is reported as one FLOP and
//! only matrix products are counted: softmax, normalization, activations,
//! pooling and bias additions are free.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{MixGenKind, ModelConfig};
use crate::error::{Error, Result};
use crate::mixer::Model;
use crate::oracle::param_formula;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CapacityRow {
    pub component: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CapacityReport {
    pub rows: Vec<CapacityRow>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl CapacityReport {
    fn from_rows(rows: Vec<CapacityRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_macs = rows.iter().map(|r| r.macs).sum();
        CapacityReport {
            rows,
            total_params,
            total_macs,
        }
    }

    pub fn row(&self, component: &str) -> Option<&CapacityRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    /// `component,params,macs` with a trailing `total` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["component", "params", "macs"]).unwrap();
        for r in &self.rows {
            w.serialize((&r.component, r.params, r.macs)).unwrap();
        }
        w.serialize(("total", self.total_params, self.total_macs)).unwrap();
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn linear_params(fan_in: u64, fan_out: u64) -> u64 {
    fan_in * fan_out + fan_out
}

/// Parameters of one mixing operation over `n` tokens of width `d`.
pub fn op_params(kind: MixGenKind, n: u64, d: u64, reduced: u64, segments: u64) -> Result<u64> {
    Ok(match kind {
        MixGenKind::Dynamic => param_formula(n, d, reduced, segments)?,
        MixGenKind::DensePerToken => segments * d * n + d * d,
        MixGenKind::StaticRandom => n * n + d * d,
    })
}

/// MACs of one mixing operation applied to a single sequence of `n` tokens.
pub fn op_macs(kind: MixGenKind, n: u64, d: u64, reduced: u64, segments: u64) -> u64 {
    let generate = match kind {
        // reduction, then flat(X̂)·W for every segment
        MixGenKind::Dynamic => n * d * segments * reduced + segments * (n * reduced) * (n * n),
        MixGenKind::DensePerToken => n * d * segments * n,
        MixGenKind::StaticRandom => 0,
    };
    // P·X over all segments, then the output fusion
    generate + n * n * d + n * d * d
}

fn capacity(config: &ModelConfig) -> Result<CapacityReport> {
    config.validate()?;
    let ab = &config.ablation;
    let mut rows = Vec::new();
    let mut push = |component: String, params: u64, macs: u64| {
        rows.push(CapacityRow {
            component,
            params,
            macs,
        })
    };
    for (si, stage) in config.stages.iter().enumerate() {
        let d = stage.hidden as u64;
        let side = config.grid(si) as u64;
        let tokens = side * side;
        let depth = stage.depth as u64;
        let (k, s) = (config.reduced_dim as u64, stage.segments as u64);
        let name = |c: &str| format!("stages.{si}.{c}");

        let fan_in = config.embed_in_dim(si) as u64;
        push(name("embed"), linear_params(fan_in, d), tokens * fan_in * d);

        let op_p = op_params(ab.gen_kind, side, d, k, s)?;
        // a row op runs over `side` rows of `side` tokens; same for columns
        let op_m = side * op_macs(ab.gen_kind, side, d, k, s);
        if !ab.disable_row {
            push(name("row_mix"), depth * op_p, depth * op_m);
        }
        if !ab.disable_col {
            let params = if ab.share_row_col_op { 0 } else { depth * op_p };
            push(name("col_mix"), params, depth * op_m);
        }
        if !ab.disable_channel {
            push(name("channel_mix"), depth * linear_params(d, d), depth * tokens * d * d);
        }
        if !ab.disable_reweight {
            let r = config.reweight_hidden(si) as u64;
            let per = d * r + r * 3 * d;
            push(name("reweight"), depth * per, depth * per);
        }
        push(name("proj_o"), depth * linear_params(d, d), depth * tokens * d * d);
        push(name("norms"), depth * 4 * d, 0);
        let hidden = config.mlp_ratio as u64 * d;
        push(
            name("channel_mlp"),
            depth * (linear_params(d, hidden) + linear_params(hidden, d)),
            depth * tokens * 2 * d * hidden,
        );
    }
    let d = config.head_in_dim() as u64;
    let classes = config.num_classes as u64;
    push("final_norm".into(), 2 * d, 0);
    push("head".into(), linear_params(d, classes), d * classes);
    Ok(CapacityReport::from_rows(rows))
}

/// Per-component parameter counts (with MACs alongside).
pub fn count_params(config: &ModelConfig) -> Result<CapacityReport> {
    capacity(config)
}

/// Per-component MACs for one image (with parameter counts alongside).
pub fn count_flops(config: &ModelConfig) -> Result<CapacityReport> {
    capacity(config)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Throughput {
    /// Images per second, per timing window.
    pub windows: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub const BENCH_WINDOWS: usize = 5;

/// Steady-state eval-mode throughput: one warmup batch, then
/// [`BENCH_WINDOWS`] windows of roughly `duration / BENCH_WINDOWS` each
/// (at least one batch per window).
pub fn bench_throughput(model: &Model, batch: usize, duration: Duration) -> Result<Throughput> {
    bench_throughput_windows(model, batch, duration, BENCH_WINDOWS)
}

/// As [`bench_throughput`] with an explicit number of timing windows.
pub fn bench_throughput_windows(model: &Model, batch: usize, duration: Duration, windows: usize) -> Result<Throughput> {
    if batch == 0 || windows == 0 {
        return Err(Error::config("batch size and window count must be >= 1"));
    }
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::randn(&[batch, cfg.in_channels, cfg.image_size, cfg.image_size], 1.0, &mut rng);
    model.predict_parallel(&images)?;
    let window = duration / windows as u32;
    let count = windows;
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        let start = Instant::now();
        let mut seen = 0usize;
        loop {
            model.predict_parallel(&images)?;
            seen += batch;
            if start.elapsed() >= window {
                break;
            }
        }
        windows.push(seen as f64 / start.elapsed().as_secs_f64());
    }
    let mean = windows.iter().sum::<f64>() / windows.len() as f64;
    let var = windows.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / windows.len() as f64;
    Ok(Throughput {
        windows,
        mean,
        std: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_header_and_total() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let report = count_params(&cfg).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("component,params,macs"));
        assert!(csv.lines().last().unwrap().starts_with("total,"));
        assert_eq!(report.rows.iter().map(|r| r.params).sum::<u64>(), report.total_params);
    }

    #[test]
    fn json_round_trips_totals() {
        let cfg = ModelConfig::preset("tiny").unwrap();
        let report = count_flops(&cfg).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(v["total_macs"].as_u64(), Some(report.total_macs));
    }

    #[test]
    fn shared_columns_cost_macs_but_no_params() {
        let mut cfg = ModelConfig::preset("tiny").unwrap();
        cfg.ablation.share_row_col_op = true;
        let r = count_params(&cfg).unwrap();
        let col = r.row("stages.0.col_mix").unwrap();
        assert_eq!(col.params, 0);
        assert_eq!(col.macs, r.row("stages.0.row_mix").unwrap().macs);
    }
}
