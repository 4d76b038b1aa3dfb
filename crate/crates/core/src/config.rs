//! Scenario configuration: one human-editable TOML file describing the
//! fleet, gateway, scaler, optimizer, workload, and fault schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoscaler::ScalerConfig;
use crate::cluster::{GpuProfile, PlacementStrategy};
use crate::error::SimError;
use crate::gateway::PolicyKind;
use crate::kvcache::DEFAULT_BLOCK_SIZE;
use crate::optimizer::CapacityTable;
use crate::workload::{load_trace, synth_trace, RequestTrace, SynthSpec, TraceFormat};

/// Which latency metric an SLO constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SloMetric {
    Ttft,
    E2e,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceGroup {
    pub gpu: String,
    #[serde(default = "default_model")]
    pub model: String,
    pub count: u32,
}

fn default_model() -> String {
    "base".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Main segment capacity, tokens.
    pub capacity_tokens: u64,
    pub probation_capacity_tokens: u64,
    /// Transfer bandwidth, tokens/second.
    pub bandwidth: f64,
    /// Per-fetch round trip, seconds.
    pub rtt: f64,
    /// Eviction policy: the scan-resistant default or a baseline.
    #[serde(default)]
    pub eviction: crate::kvcache::EvictionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    pub profiles: Vec<GpuProfile>,
    pub instances: Vec<InstanceGroup>,
    pub block_size: usize,
    /// Per-instance prefix cache capacity in tokens; 0 disables it.
    pub local_cache_tokens: u64,
    /// Distributed KV pool; absent disables it.
    pub pool: Option<PoolConfig>,
    /// Chunked-prefill analogue: decode keeps stepping during prefill, at
    /// the price of `chunk_overhead` extra prefill compute.
    pub chunked_prefill: bool,
    pub chunk_overhead: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            profiles: Vec::new(),
            instances: Vec::new(),
            block_size: DEFAULT_BLOCK_SIZE,
            local_cache_tokens: 0,
            pool: None,
            chunked_prefill: false,
            chunk_overhead: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimitEntry {
    pub tenant: String,
    #[serde(default)]
    pub tpm: Option<f64>,
    #[serde(default)]
    pub rpm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatewayConfig {
    pub policy: PolicyKind,
    pub prefix_threshold: f64,
    pub fallback: PolicyKind,
    /// Sliding window for gateway instance statistics, seconds.
    pub stats_window: f64,
    pub rate_limits: Vec<RateLimitEntry>,
    /// Emit one JSONL line per routing decision in the run report.
    pub decision_log: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            policy: PolicyKind::LeastRequest,
            prefix_threshold: 0.5,
            fallback: PolicyKind::LeastRequest,
            stats_window: 30.0,
            rate_limits: Vec::new(),
            decision_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Finite input-bucket upper bounds; the last bucket is open-ended.
    pub edges_in: Vec<u32>,
    pub edges_out: Vec<u32>,
    /// Latency target in seconds for capacity profiling and plan checks.
    pub slo: f64,
    pub slo_metric: SloMetric,
    /// Re-optimization cadence, simulated seconds.
    pub cadence: f64,
    /// Capacity table produced by the profile subcommand.
    pub capacity_table: Option<PathBuf>,
    /// Solve an initial plan from the whole trace's histogram before the
    /// first arrival, modeling a deployment already in steady state.
    pub plan_at_start: bool,
    /// In-memory table; takes precedence over `capacity_table`.
    #[serde(skip)]
    pub table: Option<CapacityTable>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            edges_in: vec![200, 1000],
            edges_out: vec![100, 500],
            slo: 0.5,
            slo_metric: SloMetric::Ttft,
            cadence: 300.0,
            capacity_table: None,
            plan_at_start: false,
            table: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaultMode {
    Crash,
    Degrade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub time: f64,
    /// Target: one instance id from the initial topology...
    #[serde(default)]
    pub instance: Option<u32>,
    /// ...or every instance of a GPU type.
    #[serde(default)]
    pub gpu_type: Option<String>,
    pub mode: FaultMode,
    /// Rate multiplier for degrade faults, in (0, 1).
    #[serde(default)]
    pub factor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub name: String,
    pub base_model: String,
    #[serde(default)]
    pub load_time: f64,
    #[serde(default = "default_strategy")]
    pub strategy: PlacementStrategy,
}

fn default_strategy() -> PlacementStrategy {
    PlacementStrategy::LeastAdapters
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// JSONL trace path (relative paths resolve against the config file).
    pub trace: Option<PathBuf>,
    pub format: Option<TraceFormat>,
    /// Synthetic workload; exactly one of `trace`/`synth` must be set.
    pub synth: Option<SynthSpec>,
}

/// A full scenario: everything `simengine::run` needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub workload: WorkloadConfig,
    pub fleet: FleetConfig,
    pub gateway: GatewayConfig,
    /// Autoscaler; absent means a fixed fleet.
    pub scaler: Option<ScalerConfig>,
    /// GPU optimizer; absent means no heterogeneous re-planning.
    pub optimizer: Option<OptimizerConfig>,
    pub faults: Vec<FaultConfig>,
    pub adapters: Vec<AdapterConfig>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| SimError::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::io(path.display().to_string(), e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // resolve relative paths against the config file's directory
        if let Some(dir) = path.parent() {
            if let Some(t) = &cfg.workload.trace {
                if t.is_relative() {
                    cfg.workload.trace = Some(dir.join(t));
                }
            }
            if let Some(opt) = &mut cfg.optimizer {
                if let Some(t) = &opt.capacity_table {
                    if t.is_relative() {
                        opt.capacity_table = Some(dir.join(t));
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.fleet.profiles.is_empty() {
            return Err(SimError::config("fleet.profiles must not be empty"));
        }
        for p in &self.fleet.profiles {
            p.validate()?;
        }
        let profile_names: Vec<&str> =
            self.fleet.profiles.iter().map(|p| p.name.as_str()).collect();
        if self.fleet.instances.is_empty() {
            return Err(SimError::config("fleet.instances must not be empty"));
        }
        for group in &self.fleet.instances {
            if !profile_names.contains(&group.gpu.as_str()) {
                return Err(SimError::UnknownGpuType(group.gpu.clone()));
            }
        }
        if self.fleet.block_size == 0 {
            return Err(SimError::config("block_size must be >= 1"));
        }
        if let Some(pool) = &self.fleet.pool {
            if pool.bandwidth <= 0.0 || pool.rtt < 0.0 {
                return Err(SimError::config("pool bandwidth must be > 0 and rtt >= 0"));
            }
        }
        if self.fleet.chunk_overhead < 0.0 {
            return Err(SimError::config("chunk_overhead must be >= 0"));
        }

        crate::gateway::RoutingPolicy {
            kind: self.gateway.policy,
            prefix_threshold: self.gateway.prefix_threshold,
            fallback: self.gateway.fallback,
            seed: self.seed,
        }
        .validate()?;
        if self.gateway.stats_window <= 0.0 {
            return Err(SimError::config("stats_window must be > 0"));
        }

        match (&self.workload.trace, &self.workload.synth) {
            (Some(_), Some(_)) => {
                return Err(SimError::config("workload: set either trace or synth, not both"))
            }
            (None, None) => {
                return Err(SimError::config("workload: set one of trace or synth"))
            }
            (Some(_), None) if self.workload.format.is_none() => {
                return Err(SimError::config("workload.format required with a trace path"))
            }
            _ => {}
        }

        if let Some(scaler) = &self.scaler {
            scaler.validate()?;
        }
        if let Some(opt) = &self.optimizer {
            crate::workload::BucketEdges(opt.edges_in.clone()).validate()?;
            crate::workload::BucketEdges(opt.edges_out.clone()).validate()?;
            if opt.slo <= 0.0 {
                return Err(SimError::config("optimizer.slo must be > 0"));
            }
            if opt.cadence <= 0.0 {
                return Err(SimError::config("optimizer.cadence must be > 0"));
            }
            if opt.capacity_table.is_none() && opt.table.is_none() {
                return Err(SimError::config(
                    "optimizer enabled but no capacity_table given (run the profile subcommand first)",
                ));
            }
        }

        let initial_count: u32 = self.fleet.instances.iter().map(|g| g.count).sum();
        for fault in &self.faults {
            match (&fault.instance, &fault.gpu_type) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(SimError::config(
                        "fault target: set exactly one of instance or gpu_type",
                    ))
                }
                (Some(id), None) if *id >= initial_count => {
                    return Err(SimError::config(format!(
                        "fault targets instance {id}, but only {initial_count} initial instances exist"
                    )))
                }
                (None, Some(g)) if !profile_names.contains(&g.as_str()) => {
                    return Err(SimError::UnknownGpuType(g.clone()))
                }
                _ => {}
            }
            if fault.time < 0.0 {
                return Err(SimError::config("fault time must be >= 0"));
            }
            match fault.mode {
                FaultMode::Degrade => {
                    let f = fault.factor.ok_or_else(|| {
                        SimError::config("degrade fault requires a factor")
                    })?;
                    if !(0.0..1.0).contains(&f) || f == 0.0 {
                        return Err(SimError::config("degrade factor must be in (0, 1)"));
                    }
                }
                FaultMode::Crash => {}
            }
        }

        let models: Vec<&str> = self
            .fleet
            .instances
            .iter()
            .map(|g| g.model.as_str())
            .collect();
        for a in &self.adapters {
            if !models.contains(&a.base_model.as_str()) {
                return Err(SimError::config(format!(
                    "adapter {} targets unknown base model {}",
                    a.name, a.base_model
                )));
            }
            if a.load_time < 0.0 {
                return Err(SimError::config("adapter load_time must be >= 0"));
            }
        }
        Ok(())
    }

    /// Load or synthesize the workload trace.
    pub fn resolve_trace(&self) -> Result<RequestTrace, SimError> {
        if let Some(path) = &self.workload.trace {
            let format = self
                .workload
                .format
                .ok_or_else(|| SimError::config("workload.format required with a trace path"))?;
            load_trace(path, format, self.seed)
        } else if let Some(spec) = &self.workload.synth {
            synth_trace(spec)
        } else {
            Err(SimError::config("workload: set one of trace or synth"))
        }
    }

    /// Effective scaler settings: explicit config, or defaults when only the
    /// optimizer drives scaling.
    pub fn effective_scaler(&self) -> ScalerConfig {
        self.scaler.clone().unwrap_or_default()
    }

    /// Minimal scenario for capacity profiling: one instance of `gpu`, no
    /// caches, no limits, no scaling.
    pub fn single_instance_probe(gpu: &GpuProfile) -> Self {
        ScenarioConfig {
            seed: 0,
            workload: WorkloadConfig::default(), // probe traces are injected directly
            fleet: FleetConfig {
                profiles: vec![gpu.clone()],
                instances: vec![InstanceGroup {
                    gpu: gpu.name.clone(),
                    model: "probe".into(),
                    count: 1,
                }],
                block_size: DEFAULT_BLOCK_SIZE,
                local_cache_tokens: 0,
                pool: None,
                chunked_prefill: false,
                chunk_overhead: 0.15,
            },
            gateway: GatewayConfig::default(),
            scaler: None,
            optimizer: None,
            faults: Vec::new(),
            adapters: Vec::new(),
        }
    }

    /// Per-GPU-type hourly costs, for the optimizer.
    pub fn profile_costs(&self) -> BTreeMap<String, f64> {
        self.fleet
            .profiles
            .iter()
            .map(|p| (p.name.clone(), p.hourly_cost))
            .collect()
    }
}
