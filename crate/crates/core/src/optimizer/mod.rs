//! SLO-driven heterogeneous GPU allocation.
//!
//! Three pieces cooperate: [`profile_capacity`] measures, per GPU type and
//! workload bucket, the highest request rate whose p99 latency stays inside
//! the SLO (binary search over single-instance simulations);
//! [`monitor`] turns gateway admission statistics into a demand histogram;
//! [`solve`] picks the cheapest integer replica mix able to serve that
//! demand, letting a bucket's traffic split fractionally across types.
//!
//! The solver explores replica count vectors in non-decreasing cost order
//! (Dijkstra over the integer lattice) and accepts the first vector whose
//! fractional assignment subproblem is feasible, so the result is exactly
//! optimal without an external solver.

mod lp;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{decode_step_time, prefill_time, GpuProfile};
use crate::config::{ScenarioConfig, SloMetric};
use crate::error::SimError;
use crate::workload::{splitmix64, BucketEdges, Request, RequestTrace, TraceMetadata, WorkloadHistogram};

/// Max sustainable requests/second per (gpu type, input bucket, output
/// bucket) under the profiling SLO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityTable {
    pub edges_in: BucketEdges,
    pub edges_out: BucketEdges,
    pub slo: f64,
    pub cap: BTreeMap<String, Vec<Vec<f64>>>,
}

impl CapacityTable {
    pub fn new(edges_in: BucketEdges, edges_out: BucketEdges, slo: f64) -> Self {
        CapacityTable {
            edges_in,
            edges_out,
            slo,
            cap: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, gpu: &str, in_bucket: usize, out_bucket: usize, rate: f64) {
        let rows = self.cap.entry(gpu.to_string()).or_insert_with(|| {
            vec![vec![0.0; self.edges_out.bucket_count()]; self.edges_in.bucket_count()]
        });
        rows[in_bucket][out_bucket] = rate;
    }

    pub fn get(&self, gpu: &str, in_bucket: usize, out_bucket: usize) -> f64 {
        self.cap
            .get(gpu)
            .and_then(|rows| rows.get(in_bucket))
            .and_then(|row| row.get(out_bucket))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn gpu_types(&self) -> Vec<String> {
        self.cap.keys().cloned().collect()
    }

    /// Plain-text tabular form: comment header with the bucket edges and
    /// SLO, then `gpu_type,in_bucket,out_bucket,req_per_sec` rows.
    pub fn to_table_string(&self) -> String {
        let join = |e: &BucketEdges| {
            e.0.iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = String::new();
        out.push_str("# fleetsim capacity table v1\n");
        out.push_str(&format!("# edges_in={}\n", join(&self.edges_in)));
        out.push_str(&format!("# edges_out={}\n", join(&self.edges_out)));
        out.push_str(&format!("# slo={}\n", self.slo));
        out.push_str("# gpu_type,in_bucket,out_bucket,req_per_sec\n");
        for (gpu, rows) in &self.cap {
            for (i, row) in rows.iter().enumerate() {
                for (j, rate) in row.iter().enumerate() {
                    out.push_str(&format!("{gpu},{i},{j},{rate}\n"));
                }
            }
        }
        out
    }

    pub fn from_table_string(text: &str) -> Result<Self, SimError> {
        let mut edges_in = None;
        let mut edges_out = None;
        let mut slo = None;
        let parse_edges = |s: &str| -> Result<BucketEdges, SimError> {
            if s.trim().is_empty() {
                return Ok(BucketEdges(vec![]));
            }
            let v: Result<Vec<u32>, _> = s.split(',').map(|x| x.trim().parse()).collect();
            Ok(BucketEdges(v.map_err(|_| {
                SimError::config(format!("bad edge list: {s}"))
            })?))
        };
        let mut rows: Vec<(String, usize, usize, f64)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("edges_in=") {
                    edges_in = Some(parse_edges(v)?);
                } else if let Some(v) = rest.strip_prefix("edges_out=") {
                    edges_out = Some(parse_edges(v)?);
                } else if let Some(v) = rest.strip_prefix("slo=") {
                    slo = Some(v.trim().parse::<f64>().map_err(|_| {
                        SimError::config(format!("bad slo: {v}"))
                    })?);
                }
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(SimError::config(format!(
                    "capacity table line {}: expected 4 fields",
                    idx + 1
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64, SimError> {
                s.trim()
                    .parse()
                    .map_err(|_| SimError::config(format!("capacity table line {}: bad {what}", idx + 1)))
            };
            rows.push((
                parts[0].trim().to_string(),
                parse(parts[1], "in_bucket")? as usize,
                parse(parts[2], "out_bucket")? as usize,
                parse(parts[3], "rate")?,
            ));
        }
        let edges_in = edges_in.ok_or_else(|| SimError::config("capacity table missing edges_in"))?;
        let edges_out =
            edges_out.ok_or_else(|| SimError::config("capacity table missing edges_out"))?;
        let mut table = CapacityTable::new(edges_in, edges_out, slo.unwrap_or(f64::INFINITY));
        for (gpu, i, j, rate) in rows {
            if i >= table.edges_in.bucket_count() || j >= table.edges_out.bucket_count() {
                return Err(SimError::config(format!(
                    "capacity table row ({gpu},{i},{j}) outside bucket grid"
                )));
            }
            table.set(&gpu, i, j, rate);
        }
        Ok(table)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_table_string())
            .map_err(|e| SimError::io(path.display().to_string(), e))
    }

    pub fn read_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::io(path.display().to_string(), e))?;
        Self::from_table_string(&text)
    }
}

/// One fractional demand cell of an allocation plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentCell {
    pub gpu: String,
    pub in_bucket: usize,
    pub out_bucket: usize,
    /// Requests/second of this bucket served by this GPU type.
    pub rate: f64,
}

/// Integer replica counts per GPU type plus the witness demand assignment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub counts: BTreeMap<String, u32>,
    pub assignment: Vec<AssignmentCell>,
    pub cost: f64,
}

impl AllocationPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.values().all(|&c| c == 0)
    }

    pub fn assigned(&self, gpu: &str, in_bucket: usize, out_bucket: usize) -> f64 {
        self.assignment
            .iter()
            .filter(|c| c.gpu == gpu && c.in_bucket == in_bucket && c.out_bucket == out_bucket)
            .map(|c| c.rate)
            .sum()
    }

    /// Per-type rates for one bucket, used for plan-proportional routing.
    pub fn bucket_weights(&self, in_bucket: usize, out_bucket: usize) -> Vec<(String, f64)> {
        self.assignment
            .iter()
            .filter(|c| c.in_bucket == in_bucket && c.out_bucket == out_bucket && c.rate > 0.0)
            .map(|c| (c.gpu.clone(), c.rate))
            .collect()
    }
}

/// Decide whether `counts` replicas can serve the histogram's demand, and
/// produce the witness assignment when they can. Demand may split
/// fractionally across types; a type's normalized load
/// `sum_b rate/cap(g,b)` must not exceed its count.
pub fn feasible(
    counts: &BTreeMap<String, u32>,
    hist: &WorkloadHistogram,
    caps: &CapacityTable,
) -> (bool, Vec<AssignmentCell>) {
    let types: Vec<&String> = counts.keys().collect();
    let demands_cells = hist.demands();
    if demands_cells.is_empty() {
        return (true, Vec::new());
    }
    let demands: Vec<f64> = demands_cells.iter().map(|&(_, d)| d).collect();
    let cap_matrix: Vec<Vec<f64>> = types
        .iter()
        .map(|g| {
            demands_cells
                .iter()
                .map(|&((i, j), _)| caps.get(g, i, j))
                .collect()
        })
        .collect();
    let count_vec: Vec<f64> = types.iter().map(|g| counts[g.as_str()] as f64).collect();
    let result = lp::transportation_feasible(&demands, &cap_matrix, &count_vec);
    if !result.feasible {
        return (false, Vec::new());
    }
    let mut cells = Vec::new();
    for (gi, g) in types.iter().enumerate() {
        for (bi, &((i, j), _)) in demands_cells.iter().enumerate() {
            let rate = result.assignment[gi][bi];
            if rate > 0.0 {
                cells.push(AssignmentCell {
                    gpu: (*g).clone(),
                    in_bucket: i,
                    out_bucket: j,
                    rate,
                });
            }
        }
    }
    (true, cells)
}

#[derive(Debug, Clone, PartialEq)]
struct SearchNode {
    cost: f64,
    counts: Vec<u32>,
}

impl Eq for SearchNode {}

impl Ord for SearchNode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert for cheapest-first, tie-break on
        // the lexicographically smallest count vector for determinism.
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.counts.cmp(&self.counts))
    }
}

impl PartialOrd for SearchNode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Pick the cheapest integer replica mix serving the histogram's demand.
///
/// Count vectors are explored in non-decreasing total cost order with a
/// feasibility check per candidate, so the first feasible vector is the
/// optimum; `bounds` caps the per-type search. Errors name the first
/// unservable bucket, or report overall infeasibility within bounds.
pub fn solve(
    hist: &WorkloadHistogram,
    caps: &CapacityTable,
    costs: &BTreeMap<String, f64>,
    bounds: &BTreeMap<String, u32>,
) -> Result<AllocationPlan, SimError> {
    let types: Vec<String> = bounds.keys().cloned().collect();
    for t in &types {
        if !costs.contains_key(t) {
            return Err(SimError::UnknownGpuType(t.clone()));
        }
    }
    let demands = hist.demands();
    if demands.is_empty() {
        return Ok(AllocationPlan::empty());
    }
    for &((i, j), _) in &demands {
        if !types.iter().any(|g| caps.get(g, i, j) > 0.0) {
            return Err(SimError::InfeasibleBucket(i, j));
        }
    }

    let type_costs: Vec<f64> = types.iter().map(|t| costs[t]).collect();
    let type_bounds: Vec<u32> = types.iter().map(|t| bounds[t]).collect();

    let mut heap = BinaryHeap::new();
    let mut seen: BTreeSet<Vec<u32>> = BTreeSet::new();
    let start = vec![0u32; types.len()];
    seen.insert(start.clone());
    heap.push(SearchNode {
        cost: 0.0,
        counts: start,
    });

    while let Some(node) = heap.pop() {
        let counts_map: BTreeMap<String, u32> = types
            .iter()
            .cloned()
            .zip(node.counts.iter().copied())
            .collect();
        let (ok, assignment) = feasible(&counts_map, hist, caps);
        if ok {
            return Ok(AllocationPlan {
                counts: counts_map,
                assignment,
                cost: node.cost,
            });
        }
        for (k, &bound) in type_bounds.iter().enumerate() {
            if node.counts[k] < bound {
                let mut next = node.counts.clone();
                next[k] += 1;
                if seen.insert(next.clone()) {
                    heap.push(SearchNode {
                        cost: node.cost + type_costs[k],
                        counts: next,
                    });
                }
            }
        }
    }
    Err(SimError::InfeasiblePlan)
}

/// Windowed demand histogram from the gateway's admission log:
/// `(timestamp, input tokens, output tokens)` per admitted request.
pub fn monitor(
    admissions: &[(f64, u32, u32)],
    now: f64,
    span: f64,
    edges_in: &BucketEdges,
    edges_out: &BucketEdges,
) -> WorkloadHistogram {
    let mut hist = WorkloadHistogram::zero(edges_in.clone(), edges_out.clone());
    hist.duration = span;
    let cutoff = now - span;
    for &(ts, in_len, out_len) in admissions {
        if ts >= cutoff && ts <= now {
            let i = edges_in.bucket_of(in_len);
            let j = edges_out.bucket_of(out_len);
            hist.counts[i][j] += 1;
        }
    }
    for (i, row) in hist.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            hist.rates[i][j] = c as f64 / span;
        }
    }
    hist
}

/// Knobs for [`profile_capacity`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileParams {
    /// Requests per probe simulation.
    pub probe_requests: usize,
    pub seed: u64,
    pub slo_metric: SloMetric,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams {
            probe_requests: 150,
            seed: 0,
            slo_metric: SloMetric::Ttft,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    /// Max sustainable requests/second; 0 when the SLO is unattainable.
    pub rate: f64,
    pub attainable: bool,
}

/// Representative token count for a bucket: the midpoint for bounded
/// buckets, 1.5x the lower edge (floored at 32) for the open-ended one.
pub fn representative_len(lo: u32, hi: Option<u32>) -> u32 {
    match hi {
        Some(h) => ((lo + h) / 2).max(1),
        None => ((lo as u64 * 3 / 2) as u32).max(lo.saturating_add(32)).max(32),
    }
}

/// Largest arrival rate a single instance of `gpu` sustains on
/// bucket-representative requests with p99 of the SLO metric within `slo`.
///
/// The probe draws one fixed set of unit-rate exponential gaps (seeded) and
/// rescales it per candidate rate, so raising the rate only compresses the
/// same arrival pattern: the search predicate is monotone and the binary
/// search (1% relative tolerance) is exact.
pub fn profile_capacity(
    gpu: &GpuProfile,
    in_bounds: (u32, Option<u32>),
    out_bounds: (u32, Option<u32>),
    slo: f64,
    params: &ProfileParams,
) -> Result<CapacityEstimate, SimError> {
    use rand::prelude::*;
    use rand_distr::Distribution;

    if slo <= 0.0 {
        return Err(SimError::config("profiling slo must be > 0"));
    }
    let rep_in = representative_len(in_bounds.0, in_bounds.1);
    let rep_out = representative_len(out_bounds.0, out_bounds.1);

    // isolated request: the lower envelope of latency on this gpu
    let iso_ttft = prefill_time(gpu, rep_in as u64);
    let iso_e2e = iso_ttft + rep_out as f64 * decode_step_time(gpu, 1);
    let iso_metric = match params.slo_metric {
        SloMetric::Ttft => iso_ttft,
        SloMetric::E2e => iso_e2e,
    };
    let fits_kv = (rep_in as u64 + rep_out as u64) <= gpu.kv_capacity;
    if iso_metric > slo || !fits_kv {
        return Ok(CapacityEstimate {
            rate: 0.0,
            attainable: false,
        });
    }

    // fixed unit-rate gaps, rescaled per candidate rate
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(splitmix64(params.seed ^ 0x7052_0f11));
    let exp = rand_distr::Exp::new(1.0).expect("unit rate");
    let unit_gaps: Vec<f64> = (0..params.probe_requests).map(|_| exp.sample(&mut rng)).collect();

    let scenario = ScenarioConfig::single_instance_probe(gpu);
    let eval = |rate: f64| -> Result<bool, SimError> {
        let mut arrivals = Vec::with_capacity(unit_gaps.len());
        let mut t = 0.0;
        for g in &unit_gaps {
            t += g / rate;
            arrivals.push(t);
        }
        let requests: Vec<Request> = arrivals
            .iter()
            .enumerate()
            .map(|(i, &arrival)| Request {
                id: i as u64,
                arrival,
                model: "probe".into(),
                adapter: None,
                prompt: (0..rep_in)
                    .map(|k| (splitmix64(params.seed ^ ((i as u64) << 24) ^ k as u64) % 32_000) as u32)
                    .collect(),
                output_len: rep_out,
                slo_ttft: None,
                slo_e2e: None,
                session: None,
            })
            .collect();
        let trace = RequestTrace {
            requests,
            metadata: TraceMetadata {
                source: "probe".into(),
                vocab_size: 32_000,
                reordered: false,
                duration: Some(t),
            },
        };
        let report = crate::simengine::run_with_trace(&scenario, trace)?;
        if report.failed_requests > 0 {
            return Ok(false);
        }
        let p99_ms = match params.slo_metric {
            SloMetric::Ttft => report.ttft_p99_ms,
            SloMetric::E2e => report.e2e_p99_ms,
        };
        Ok(p99_ms / 1000.0 <= slo)
    };

    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    const RATE_CEILING: f64 = 1.0e6;
    while eval(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > RATE_CEILING {
            return Ok(CapacityEstimate {
                rate: lo,
                attainable: true,
            });
        }
    }
    while hi - lo > 0.01 * hi {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CapacityEstimate {
        rate: lo,
        attainable: lo > 0.0,
    })
}
