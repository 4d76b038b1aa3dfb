//! Run metrics: per-request records, aggregates, and the report layout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::kvcache::{CacheStats, PoolStats};

/// Nearest-rank percentile: the ⌈p/100 · n⌉-th order statistic.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, SimError> {
    if samples.is_empty() {
        return Err(SimError::EmptySamples);
    }
    assert!((0.0..=100.0).contains(&p), "p must be in [0, 100]");
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Lifecycle of one request through the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub instance: Option<u32>,
    pub arrival: f64,
    /// Seconds waiting before prefill started.
    pub queue_latency: f64,
    /// Arrival to first token, seconds; None for failed requests.
    pub ttft: Option<f64>,
    /// Arrival to completion, seconds; None for failed requests.
    pub e2e: Option<f64>,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub local_hit_tokens: u64,
    pub remote_hit_tokens: u64,
    pub failed: bool,
}

/// One autoscaler observation in the replica time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaSample {
    pub time: f64,
    pub gpu_type: String,
    pub ready: u32,
    pub starting: u32,
    pub desired: u32,
    pub panic_mode: bool,
}

/// Everything a run produces, serialized as report.json and rendered as an
/// aligned-column text table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario_seed: u64,
    /// Wall span of the simulation, seconds (last event time).
    pub completion_time_s: f64,

    pub admitted_requests: u64,
    pub completed_requests: u64,
    pub failed_requests: u64,
    pub rejected_tpm: u64,
    pub rejected_rpm: u64,

    pub prompt_tokens: u64,
    pub decoded_tokens: u64,
    /// (prompt + decoded) / completion time.
    pub total_throughput_tps: f64,
    /// decoded / completion time.
    pub decode_throughput_tps: f64,

    pub ttft_avg_ms: f64,
    pub ttft_p99_ms: f64,
    pub itl_avg_ms: f64,
    pub itl_p99_ms: f64,
    pub e2e_avg_ms: f64,
    pub e2e_p99_ms: f64,

    pub local_hit_tokens: u64,
    pub remote_hit_tokens: u64,
    /// local hit tokens / prompt tokens of completed requests.
    pub local_hit_ratio: f64,

    /// Accrued instance-hours × hourly cost.
    pub cost: f64,

    pub per_instance_cache: BTreeMap<u32, CacheStats>,
    pub pool: Option<PoolStats>,
    pub replica_series: Vec<ReplicaSample>,
    /// Scale decisions clamped by per-type bounds.
    pub clamp_events: u64,
    pub warnings: Vec<String>,
    pub records: Vec<RequestRecord>,
}

impl MetricsReport {
    /// Human-readable table in the benchmark-report layout.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut row = |k: &str, v: String| s.push_str(&format!("{k:<34} {v:>14}\n"));
        row("Prompt tokens", self.prompt_tokens.to_string());
        row("Decoded tokens", self.decoded_tokens.to_string());
        row("Total throughput (tok/s)", format!("{:.2}", self.total_throughput_tps));
        row("Decode throughput (tok/s)", format!("{:.2}", self.decode_throughput_tps));
        row("TTFT avg (ms)", format!("{:.2}", self.ttft_avg_ms));
        row("TTFT p99 (ms)", format!("{:.2}", self.ttft_p99_ms));
        row("ITL avg (ms)", format!("{:.2}", self.itl_avg_ms));
        row("ITL p99 (ms)", format!("{:.2}", self.itl_p99_ms));
        row("E2E avg (ms)", format!("{:.2}", self.e2e_avg_ms));
        row("E2E p99 (ms)", format!("{:.2}", self.e2e_p99_ms));
        row("Completion time (s)", format!("{:.2}", self.completion_time_s));
        row("Admitted", self.admitted_requests.to_string());
        row("Completed", self.completed_requests.to_string());
        row("Failed", self.failed_requests.to_string());
        row(
            "Rejected (TPM/RPM)",
            format!("{}/{}", self.rejected_tpm, self.rejected_rpm),
        );
        row("Local cache hit tokens", self.local_hit_tokens.to_string());
        row("Remote pool hit tokens", self.remote_hit_tokens.to_string());
        row("Local hit ratio", format!("{:.4}", self.local_hit_ratio));
        row("Cost (currency)", format!("{:.4}", self.cost));
        if !self.warnings.is_empty() {
            s.push_str("Warnings:\n");
            for w in &self.warnings {
                s.push_str(&format!("  - {w}\n"));
            }
        }
        s
    }

    /// Per-request records as CSV.
    pub fn records_csv(&self) -> String {
        let mut s = String::from(
            "id,instance,arrival,queue_latency,ttft,e2e,prompt_tokens,output_tokens,local_hit_tokens,remote_hit_tokens,failed\n",
        );
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.id,
                r.instance.map(|i| i.to_string()).unwrap_or_default(),
                r.arrival,
                r.queue_latency,
                r.ttft.map(|v| v.to_string()).unwrap_or_default(),
                r.e2e.map(|v| v.to_string()).unwrap_or_default(),
                r.prompt_tokens,
                r.output_tokens,
                r.local_hit_tokens,
                r.remote_hit_tokens,
                r.failed
            ));
        }
        s
    }

    /// Replica time series as CSV.
    pub fn replicas_csv(&self) -> String {
        let mut s = String::from("time,gpu_type,ready,starting,desired,panic_mode\n");
        for r in &self.replica_series {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.time, r.gpu_type, r.ready, r.starting, r.desired, r.panic_mode
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn percentile_nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 99.0).unwrap(), 99.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&[7.5], 1.0).unwrap(), 7.5);
        assert_eq!(percentile(&[7.5], 99.0).unwrap(), 7.5);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn percentile_matches_sort_and_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.random_range(1..300usize);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1e3..1e3)).collect();
            let p = rng.random_range(0.0..=100.0);
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let rank = ((p / 100.0) * n as f64).ceil() as usize;
            let want = sorted[rank.clamp(1, n) - 1];
            assert_eq!(percentile(&v, p).unwrap(), want);
        }
    }
}
