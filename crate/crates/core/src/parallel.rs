//! Data-parallel helpers for the embarrassingly parallel parts of the
//! workload: scenario sweeps and capacity profiling grids.
//!
//! Scenario runs share no mutable state, so they parallelize trivially.
//! With the default `parallel` feature the maps below fan out over rayon;
//! without it they fall back to a plain sequential loop with identical
//! results (ordering is preserved either way).

use std::collections::BTreeMap;

use crate::cluster::GpuProfile;
use crate::config::ScenarioConfig;
use crate::error::SimError;
use crate::optimizer::{profile_capacity, CapacityEstimate, CapacityTable, ProfileParams};
use crate::simengine::{run, MetricsReport};
use crate::workload::BucketEdges;

/// Map a function over items, in parallel when the `parallel` feature is
/// enabled. Output order matches input order.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

/// Sequential fallback used without the `parallel` feature.
#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Run several independent scenarios, one report each.
pub fn run_many(scenarios: Vec<ScenarioConfig>) -> Vec<Result<MetricsReport, SimError>> {
    par_map(scenarios, |cfg| run(&cfg))
}

/// Profile every (gpu type, input bucket, output bucket) cell into a
/// capacity table. Cells are independent probe simulations and fan out in
/// parallel.
pub fn profile_table(
    profiles: &[GpuProfile],
    edges_in: &BucketEdges,
    edges_out: &BucketEdges,
    slo: f64,
    params: &ProfileParams,
) -> Result<(CapacityTable, Vec<String>), SimError> {
    let mut cells: Vec<(GpuProfile, usize, usize)> = Vec::new();
    for gpu in profiles {
        for i in 0..edges_in.bucket_count() {
            for j in 0..edges_out.bucket_count() {
                cells.push((gpu.clone(), i, j));
            }
        }
    }
    type Cell = ((String, usize, usize), Result<CapacityEstimate, SimError>);
    let results: Vec<Cell> = par_map(cells, |(gpu, i, j)| {
        let est = profile_capacity(&gpu, edges_in.bounds(i), edges_out.bounds(j), slo, params);
        ((gpu.name.clone(), i, j), est)
    });

    let mut table = CapacityTable::new(edges_in.clone(), edges_out.clone(), slo);
    let mut warnings = Vec::new();
    let mut by_key: BTreeMap<(String, usize, usize), CapacityEstimate> = BTreeMap::new();
    for (key, est) in results {
        by_key.insert(key, est?);
    }
    for ((gpu, i, j), est) in by_key {
        if !est.attainable {
            warnings.push(format!(
                "{gpu} bucket (in={i}, out={j}): SLO unattainable even in isolation; capacity 0"
            ));
        }
        table.set(&gpu, i, j, est.rate);
    }
    Ok((table, warnings))
}
