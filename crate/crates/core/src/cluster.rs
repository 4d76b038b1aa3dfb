//! GPU profiles, per-instance serving state, adapter placement, and cost.
//!
//! Timing is a two-parameter model per GPU type: prefill is linear in
//! uncached tokens, decode is affine in batch pressure. Multi-node serving
//! groups are represented as one logical instance with aggregate rates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::kvcache::PrefixCache;

/// Performance and cost characteristics of one GPU type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuProfile {
    pub name: String,
    /// Prefill tokens/second.
    pub prefill_rate: f64,
    /// Seconds per output token at batch size 1.
    pub decode_base_itl: f64,
    /// Max concurrent decoding requests.
    pub batch_capacity: u32,
    /// Dimensionless batch-pressure coefficient.
    pub itl_slope: f64,
    /// Tokens storable in device KV memory.
    pub kv_capacity: u64,
    pub hourly_cost: f64,
    pub max_adapters: u32,
}

impl GpuProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.prefill_rate <= 0.0
            || self.decode_base_itl <= 0.0
            || self.batch_capacity == 0
            || self.kv_capacity == 0
            || self.hourly_cost < 0.0
        {
            return Err(SimError::config(format!(
                "gpu profile {}: rates and capacities must be > 0",
                self.name
            )));
        }
        if self.itl_slope < 0.0 {
            return Err(SimError::config(format!(
                "gpu profile {}: itl_slope must be >= 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Seconds to prefill `uncached_tokens` on this GPU type.
pub fn prefill_time(gpu: &GpuProfile, uncached_tokens: u64) -> f64 {
    uncached_tokens as f64 / gpu.prefill_rate
}

/// Seconds for one synchronized decode step at the given batch size:
/// `base_itl * (1 + slope * (batch-1)/capacity)`.
pub fn decode_step_time(gpu: &GpuProfile, batch: u32) -> f64 {
    assert!(
        batch >= 1 && batch <= gpu.batch_capacity,
        "batch {batch} out of 1..={}",
        gpu.batch_capacity
    );
    gpu.decode_base_itl
        * (1.0 + gpu.itl_slope * (batch - 1) as f64 / gpu.batch_capacity as f64)
}

/// A LoRA adapter deployable on top of a base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub name: String,
    pub base_model: String,
    /// Seconds between placement and the adapter serving traffic.
    pub load_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlacementStrategy {
    /// Spread: pick the instance holding the fewest adapters.
    LeastAdapters,
    /// Pack: pick the fullest instance that still has headroom.
    Binpack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Health {
    Starting,
    Ready,
    Failed,
}

/// One request currently decoding (or waiting to join the next step).
#[derive(Debug, Clone, Copy)]
pub struct RunningRequest {
    pub request_id: u64,
    /// Output tokens still to decode.
    pub remaining: u32,
    /// KV tokens reserved for this request (prompt + max output).
    pub kv_tokens: u64,
    /// When this request's latest token appeared; ITL samples measure the
    /// gap from here, so decode stalls are included.
    pub last_token_at: f64,
}

/// One serving replica. A tensor/pipeline-parallel group is one logical
/// instance with aggregate rates.
#[derive(Debug, Clone)]
pub struct InstanceState {
    pub id: u32,
    pub gpu: GpuProfile,
    pub model: String,
    /// Adapters currently serving traffic.
    pub adapters: BTreeSet<String>,
    /// Adapters placed but still loading: name -> ready time.
    pub pending_adapters: BTreeMap<String, f64>,
    /// Requests waiting for a prefill slot, FIFO.
    pub queue: VecDeque<u64>,
    /// Requests decoding.
    pub running: Vec<RunningRequest>,
    /// Prefill finished, joining at the next step boundary.
    pub pending_join: Vec<RunningRequest>,
    /// Request being prefilled, if any (prefills serialize per instance).
    pub prefilling: Option<u64>,
    pub kv_used: u64,
    pub local_cache: PrefixCache,
    pub health: Health,
    pub ready_at: f64,
    /// Draining: finishes in-flight work, receives no new traffic.
    pub draining: bool,
    /// Failure-injection slowdown; 1.0 when healthy, < 1.0 when degraded.
    pub degrade: f64,
    pub created_at: f64,
    pub retired_at: Option<f64>,
}

impl InstanceState {
    pub fn effective_prefill_rate(&self) -> f64 {
        self.gpu.prefill_rate * self.degrade
    }

    /// Step time with the degrade factor applied (rates scale by `degrade`,
    /// so times scale by `1/degrade`).
    pub fn effective_step_time(&self, batch: u32) -> f64 {
        decode_step_time(&self.gpu, batch) / self.degrade
    }

    /// Decode slots taken or reserved: running + joining + prefilling.
    pub fn slots_used(&self) -> u32 {
        self.running.len() as u32
            + self.pending_join.len() as u32
            + u32::from(self.prefilling.is_some())
    }

    pub fn kv_free(&self) -> u64 {
        self.gpu.kv_capacity.saturating_sub(self.kv_used)
    }

    pub fn kv_utilization(&self) -> f64 {
        self.kv_used as f64 / self.gpu.kv_capacity as f64
    }

    /// Requests on this instance in any stage (queued or being served).
    pub fn in_flight(&self) -> u32 {
        self.queue.len() as u32 + self.slots_used()
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight() == 0
    }

    pub fn routable(&self) -> bool {
        self.health == Health::Ready && !self.draining
    }

    pub fn adapter_slots_used(&self) -> u32 {
        (self.adapters.len() + self.pending_adapters.len()) as u32
    }

    /// Whether routed traffic for `adapter` can be served here.
    pub fn serves_adapter(&self, adapter: &str) -> bool {
        self.adapters.contains(adapter)
    }
}

/// The set of serving instances plus the profile and adapter catalogs.
#[derive(Debug, Clone, Default)]
pub struct Fleet {
    pub profiles: BTreeMap<String, GpuProfile>,
    pub instances: Vec<InstanceState>,
    pub adapter_specs: BTreeMap<String, AdapterSpec>,
    next_id: u32,
}

impl Fleet {
    pub fn new(profiles: impl IntoIterator<Item = GpuProfile>) -> Self {
        Fleet {
            profiles: profiles.into_iter().map(|p| (p.name.clone(), p)).collect(),
            ..Default::default()
        }
    }

    pub fn profile(&self, name: &str) -> Result<&GpuProfile, SimError> {
        self.profiles
            .get(name)
            .ok_or_else(|| SimError::UnknownGpuType(name.to_string()))
    }

    /// Create an instance. `cold_start == 0` yields a ready instance (used
    /// for the initial topology); otherwise it starts and becomes ready at
    /// `now + cold_start`.
    pub fn spawn(
        &mut self,
        gpu_type: &str,
        model: &str,
        local_cache_tokens: u64,
        block_size: usize,
        now: f64,
        cold_start: f64,
    ) -> Result<u32, SimError> {
        let gpu = self.profile(gpu_type)?.clone();
        let id = self.next_id;
        self.next_id += 1;
        let ready = cold_start <= 0.0;
        self.instances.push(InstanceState {
            id,
            gpu,
            model: model.to_string(),
            adapters: BTreeSet::new(),
            pending_adapters: BTreeMap::new(),
            queue: VecDeque::new(),
            running: Vec::new(),
            pending_join: Vec::new(),
            prefilling: None,
            kv_used: 0,
            local_cache: PrefixCache::new(local_cache_tokens, block_size),
            health: if ready { Health::Ready } else { Health::Starting },
            ready_at: now + cold_start,
            draining: false,
            degrade: 1.0,
            created_at: now,
            retired_at: None,
        });
        Ok(id)
    }

    pub fn get(&self, id: u32) -> Option<&InstanceState> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn get_mut(&mut self, id: u32) -> Option<&mut InstanceState> {
        self.instances.iter_mut().find(|i| i.id == id)
    }

    /// Instances still part of the fleet (not retired).
    pub fn live(&self) -> impl Iterator<Item = &InstanceState> {
        self.instances.iter().filter(|i| i.retired_at.is_none())
    }

    pub fn ready_count(&self, gpu_type: Option<&str>) -> u32 {
        self.live()
            .filter(|i| i.health == Health::Ready && !i.draining)
            .filter(|i| gpu_type.is_none_or(|g| i.gpu.name == g))
            .count() as u32
    }

    pub fn starting_count(&self, gpu_type: Option<&str>) -> u32 {
        self.live()
            .filter(|i| i.health == Health::Starting)
            .filter(|i| gpu_type.is_none_or(|g| i.gpu.name == g))
            .count() as u32
    }

    /// Place an adapter on an instance serving its base model. Returns the
    /// chosen instance id and the time the adapter becomes servable.
    pub fn register_adapter(
        &mut self,
        spec: &AdapterSpec,
        strategy: PlacementStrategy,
        now: f64,
    ) -> Result<(u32, f64), SimError> {
        self.adapter_specs.insert(spec.name.clone(), spec.clone());
        let candidates: Vec<(u32, u32)> = self
            .live()
            .filter(|i| {
                i.health == Health::Ready
                    && !i.draining
                    && i.model == spec.base_model
                    && i.adapter_slots_used() < i.gpu.max_adapters
            })
            .map(|i| (i.id, i.adapter_slots_used()))
            .collect();
        let chosen = match strategy {
            PlacementStrategy::LeastAdapters => candidates
                .iter()
                .min_by_key(|(id, n)| (*n, *id))
                .map(|(id, _)| *id),
            PlacementStrategy::Binpack => candidates
                .iter()
                .min_by_key(|(id, n)| (std::cmp::Reverse(*n), *id))
                .map(|(id, _)| *id),
        };
        let id = chosen.ok_or_else(|| SimError::AdapterPlacement(spec.name.clone()))?;
        let ready_at = now + spec.load_time;
        let inst = self.get_mut(id).expect("candidate exists");
        if spec.load_time <= 0.0 {
            inst.adapters.insert(spec.name.clone());
        } else {
            inst.pending_adapters.insert(spec.name.clone(), ready_at);
        }
        Ok((id, ready_at))
    }

    /// Flip a pending adapter to servable once its load time elapsed.
    pub fn finish_adapter_load(&mut self, instance: u32, name: &str) {
        if let Some(inst) = self.get_mut(instance) {
            if inst.pending_adapters.remove(name).is_some() {
                inst.adapters.insert(name.to_string());
            }
        }
    }

    /// Remove an adapter fleet-wide. In-flight and queued requests for it
    /// still complete; only new routing stops. Returns false (warning) for
    /// an unknown adapter, leaving state untouched.
    pub fn unregister_adapter(&mut self, name: &str) -> bool {
        if self.adapter_specs.remove(name).is_none() {
            return false;
        }
        for inst in &mut self.instances {
            inst.adapters.remove(name);
            inst.pending_adapters.remove(name);
        }
        true
    }
}

/// Fleet hourly cost of an allocation: Σ count_g × hourly_cost_g.
pub fn cost_rate(
    counts: &BTreeMap<String, u32>,
    profiles: &BTreeMap<String, GpuProfile>,
) -> Result<f64, SimError> {
    let mut total = 0.0;
    for (name, &count) in counts {
        let p = profiles
            .get(name)
            .ok_or_else(|| SimError::UnknownGpuType(name.clone()))?;
        total += count as f64 * p.hourly_cost;
    }
    Ok(total)
}

/// Desk-scale default profiles: an A10-like type and an L20-like type with
/// roughly double the prefill rate at 2.5x the cost. These reproduce the
/// qualitative small-request/large-request cost split; they are config, not
/// measurements.
pub fn default_profiles() -> Vec<GpuProfile> {
    vec![
        GpuProfile {
            name: "A10".into(),
            prefill_rate: 8_000.0,
            decode_base_itl: 0.025,
            batch_capacity: 8,
            itl_slope: 1.0,
            kv_capacity: 16_000,
            hourly_cost: 1.0,
            max_adapters: 4,
        },
        GpuProfile {
            name: "L20".into(),
            prefill_rate: 16_000.0,
            decode_base_itl: 0.018,
            batch_capacity: 12,
            itl_slope: 1.0,
            kv_capacity: 48_000,
            hourly_cost: 2.5,
            max_adapters: 8,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a10() -> GpuProfile {
        default_profiles().remove(0)
    }

    fn fleet_with(n: usize) -> Fleet {
        let mut fleet = Fleet::new(default_profiles());
        for _ in 0..n {
            fleet.spawn("A10", "base", 1 << 20, 16, 0.0, 0.0).unwrap();
        }
        fleet
    }

    #[test]
    fn prefill_time_examples() {
        let gpu = GpuProfile {
            prefill_rate: 10_000.0,
            ..a10()
        };
        assert_eq!(prefill_time(&gpu, 0), 0.0);
        assert!((prefill_time(&gpu, 1000) - 0.1).abs() < 1e-12);
        assert!(prefill_time(&gpu, 2000) >= prefill_time(&gpu, 1000));
    }

    #[test]
    fn decode_step_time_examples() {
        let gpu = GpuProfile {
            decode_base_itl: 0.02,
            itl_slope: 1.0,
            batch_capacity: 8,
            ..a10()
        };
        assert_eq!(decode_step_time(&gpu, 1), 0.02);
        let flat = GpuProfile {
            itl_slope: 0.0,
            ..gpu.clone()
        };
        assert_eq!(decode_step_time(&flat, 1), decode_step_time(&flat, 8));
        let full = decode_step_time(&gpu, 8);
        assert!((full - 0.02 * (1.0 + 7.0 / 8.0)).abs() < 1e-12);
    }

    #[test]
    fn register_least_adapters_picks_argmin() {
        let mut fleet = fleet_with(3);
        // adapter counts [2, 0, 1]
        fleet.get_mut(0).unwrap().adapters.extend(["a".to_string(), "b".to_string()]);
        fleet.get_mut(2).unwrap().adapters.insert("c".to_string());
        let spec = AdapterSpec {
            name: "x".into(),
            base_model: "base".into(),
            load_time: 0.0,
        };
        let (id, _) = fleet
            .register_adapter(&spec, PlacementStrategy::LeastAdapters, 0.0)
            .unwrap();
        assert_eq!(id, 1);
    }

    #[test]
    fn register_binpack_picks_fullest_with_headroom() {
        let mut fleet = fleet_with(3);
        fleet.get_mut(0).unwrap().adapters.extend(["a".to_string(), "b".to_string()]);
        fleet.get_mut(2).unwrap().adapters.insert("c".to_string());
        let spec = AdapterSpec {
            name: "x".into(),
            base_model: "base".into(),
            load_time: 0.0,
        };
        let (id, _) = fleet
            .register_adapter(&spec, PlacementStrategy::Binpack, 0.0)
            .unwrap();
        assert_eq!(id, 0, "binpack picks max count with headroom (max_adapters=4)");
    }

    #[test]
    fn register_fails_when_all_full() {
        let mut fleet = fleet_with(2);
        for id in 0..2 {
            let inst = fleet.get_mut(id).unwrap();
            for k in 0..inst.gpu.max_adapters {
                inst.adapters.insert(format!("a{k}"));
            }
        }
        let spec = AdapterSpec {
            name: "x".into(),
            base_model: "base".into(),
            load_time: 0.0,
        };
        assert!(matches!(
            fleet.register_adapter(&spec, PlacementStrategy::LeastAdapters, 0.0),
            Err(SimError::AdapterPlacement(_))
        ));
    }

    #[test]
    fn register_then_unregister_restores_sets() {
        let mut fleet = fleet_with(2);
        let before: Vec<BTreeSet<String>> =
            fleet.instances.iter().map(|i| i.adapters.clone()).collect();
        let spec = AdapterSpec {
            name: "x".into(),
            base_model: "base".into(),
            load_time: 0.0,
        };
        fleet
            .register_adapter(&spec, PlacementStrategy::LeastAdapters, 0.0)
            .unwrap();
        assert!(fleet.unregister_adapter("x"));
        let after: Vec<BTreeSet<String>> =
            fleet.instances.iter().map(|i| i.adapters.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn unregister_unknown_is_warning_noop() {
        let mut fleet = fleet_with(1);
        assert!(!fleet.unregister_adapter("ghost"));
    }

    #[test]
    fn adapter_load_time_is_pending_first() {
        let mut fleet = fleet_with(1);
        let spec = AdapterSpec {
            name: "x".into(),
            base_model: "base".into(),
            load_time: 5.0,
        };
        let (id, ready_at) = fleet
            .register_adapter(&spec, PlacementStrategy::LeastAdapters, 10.0)
            .unwrap();
        assert_eq!(ready_at, 15.0);
        assert!(!fleet.get(id).unwrap().serves_adapter("x"));
        fleet.finish_adapter_load(id, "x");
        assert!(fleet.get(id).unwrap().serves_adapter("x"));
    }

    #[test]
    fn cost_rate_examples() {
        let profiles: BTreeMap<String, GpuProfile> = default_profiles()
            .into_iter()
            .map(|p| (p.name.clone(), p))
            .collect();
        assert_eq!(cost_rate(&BTreeMap::new(), &profiles).unwrap(), 0.0);
        let mut plan = BTreeMap::new();
        plan.insert("A10".to_string(), 2u32);
        assert!((cost_rate(&plan, &profiles).unwrap() - 2.0).abs() < 1e-12);
        // additive under union
        let mut other = BTreeMap::new();
        other.insert("L20".to_string(), 1u32);
        let mut union = plan.clone();
        union.extend(other.clone());
        assert!(
            (cost_rate(&union, &profiles).unwrap()
                - cost_rate(&plan, &profiles).unwrap()
                - cost_rate(&other, &profiles).unwrap())
            .abs()
                < 1e-12
        );
        let mut bad = BTreeMap::new();
        bad.insert("H100".to_string(), 1u32);
        assert!(matches!(
            cost_rate(&bad, &profiles),
            Err(SimError::UnknownGpuType(_))
        ));
    }
}
