//! Discrete-event core: a virtual clock, a (time, seq)-ordered event heap,
//! and handlers that move requests through admit → route → queue → prefill
//! → decode → completion while the autoscaler, optimizer, and fault
//! schedule mutate the fleet.
//!
//! Serving model per instance:
//! - prefills serialize (one at a time, FIFO from the queue, admitted only
//!   when prompt + max output fit free KV memory and a batch slot is free);
//! - decode advances in synchronized steps: every running request gains one
//!   token per step, the step duration growing with batch size; requests
//!   whose prefill finishes mid-step join at the next boundary;
//! - by default prefill and decode compete for the GPU (decode stalls while
//!   a prefill runs); the chunked-prefill analogue lets decode keep stepping
//!   for a configurable prefill overhead.
//!
//! TTFT is arrival → prefill completion (queue + pool transfer + compute);
//! each decode step contributes one ITL sample per participant. Runs are
//! deterministic for a fixed scenario and seed.

mod metrics;

pub use metrics::{percentile, MetricsReport, ReplicaSample, RequestRecord};

use std::collections::{BTreeMap, BinaryHeap};

use crate::autoscaler::{
    self, external_plan_desired, InstanceLoad, MetricWindow, ScaleAction, ScalerAlgorithm,
    ScalerConfig, ScalerState, ScalingMetric,
};
use crate::cluster::{Fleet, Health, RunningRequest};
use crate::config::{FaultMode, ScenarioConfig};
use crate::error::SimError;
use crate::gateway::{
    candidates, route, Admission, CandidateView, DecisionRecord, InstanceStats, RateLimiter,
    RoutingPolicy, TenantLimits,
};
use crate::kvcache::{block_keys, commit_prefill, plan_prefill, BlockKey, KvPool, PrefillOutcome};
use crate::optimizer::{monitor, solve, AllocationPlan, CapacityTable};
use crate::workload::{splitmix64, BucketEdges, Request, RequestTrace};

#[derive(Debug, Clone)]
enum EventKind {
    Arrival { request: u64 },
    PrefillDone { instance: u32, request: u64 },
    DecodeStep { instance: u32, epoch: u64 },
    Completion { instance: u32, request: u64 },
    ScalerTick,
    OptimizerTick,
    AdapterLoaded { instance: u32, name: String },
    InstanceReady { instance: u32 },
    InstanceFail { fault: usize },
}

#[derive(Debug, Clone)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // BinaryHeap is a max-heap; invert for (time, seq) min ordering
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Per-instance scheduling state the cluster model does not carry.
#[derive(Debug, Clone, Default)]
struct Sched {
    step_epoch: u64,
    /// (start, duration) of the decode step in flight.
    current_step: Option<(f64, f64)>,
    /// When the GPU frees up (prefill/decode serialization point).
    gpu_busy_until: f64,
}

#[derive(Debug, Clone)]
struct ActiveRequest {
    keys: Vec<BlockKey>,
    prefill_start: Option<f64>,
    outcome: Option<PrefillOutcome>,
    ttft: Option<f64>,
    kv_tokens: u64,
}

/// The simulation engine. Most callers use [`run`] or [`run_with_trace`];
/// tests can drive it stepwise with [`Engine::run_until`] and mutate the
/// fleet in between.
pub struct Engine {
    cfg: ScenarioConfig,
    clock: f64,
    events: BinaryHeap<Event>,
    seq: u64,
    pub fleet: Fleet,
    pool: Option<KvPool>,
    limiter: RateLimiter,
    policy: RoutingPolicy,
    stats: BTreeMap<u32, InstanceStats>,
    requests: BTreeMap<u64, Request>,
    active: BTreeMap<u64, ActiveRequest>,
    sched: BTreeMap<u32, Sched>,
    remaining_arrivals: u64,

    // scaler
    scaler: ScalerConfig,
    scaling_enabled: bool,
    scaler_state: ScalerState,
    /// Per-pod samples over one sync period; what native HPA reacts to.
    w_hpa_perpod: MetricWindow,
    w_stable_perpod: MetricWindow,
    w_stable_total: MetricWindow,
    w_panic_total: MetricWindow,

    // optimizer
    capacity_table: Option<CapacityTable>,
    plan: Option<AllocationPlan>,
    admissions_log: Vec<(f64, u32, u32)>,

    // metrics accumulators
    records: Vec<RequestRecord>,
    itl_samples: Vec<f64>,
    admitted: u64,
    completed: u64,
    failed: u64,
    rejected_tpm: u64,
    rejected_rpm: u64,
    prompt_tokens_completed: u64,
    decoded_tokens: u64,
    local_hit_tokens: u64,
    remote_hit_tokens: u64,
    local_hits_by_instance: BTreeMap<u32, u64>,
    replica_series: Vec<ReplicaSample>,
    clamp_events: u64,
    warnings: Vec<String>,
    decision_log: Vec<DecisionRecord>,
}

/// Validate the scenario, resolve its workload, and run it.
pub fn run(cfg: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    cfg.validate()?;
    let trace = cfg.resolve_trace()?;
    run_with_trace(cfg, trace)
}

/// Run a scenario on an already-materialized trace.
pub fn run_with_trace(cfg: &ScenarioConfig, trace: RequestTrace) -> Result<MetricsReport, SimError> {
    let mut engine = Engine::new(cfg.clone(), trace)?;
    engine.run_to_completion()?;
    engine.finalize()
}

impl Engine {
    pub fn new(cfg: ScenarioConfig, trace: RequestTrace) -> Result<Self, SimError> {
        let mut fleet = Fleet::new(cfg.fleet.profiles.iter().cloned());
        let mut stats = BTreeMap::new();
        let mut sched = BTreeMap::new();
        for group in &cfg.fleet.instances {
            for _ in 0..group.count {
                let id = fleet.spawn(
                    &group.gpu,
                    &group.model,
                    cfg.fleet.local_cache_tokens,
                    cfg.fleet.block_size,
                    0.0,
                    0.0,
                )?;
                stats.insert(id, InstanceStats::new(cfg.gateway.stats_window));
                sched.insert(id, Sched::default());
            }
        }

        let pool = cfg.fleet.pool.as_ref().map(|p| {
            KvPool::with_policy(
                p.capacity_tokens,
                p.probation_capacity_tokens,
                p.bandwidth,
                p.rtt,
                cfg.fleet.block_size,
                p.eviction,
            )
        });

        let limiter = RateLimiter::new(cfg.gateway.rate_limits.iter().map(|l| {
            (
                l.tenant.clone(),
                TenantLimits {
                    tpm: l.tpm,
                    rpm: l.rpm,
                },
            )
        }));

        let policy = RoutingPolicy {
            kind: cfg.gateway.policy,
            prefix_threshold: cfg.gateway.prefix_threshold,
            fallback: cfg.gateway.fallback,
            seed: cfg.seed,
        };

        // adapters referenced by the trace must be declared
        for r in &trace.requests {
            if let Some(a) = &r.adapter {
                if !cfg.adapters.iter().any(|c| &c.name == a) {
                    return Err(SimError::config(format!(
                        "trace request {} references undeclared adapter {a}",
                        r.id
                    )));
                }
            }
        }

        let scaler = cfg.effective_scaler();
        let scaling_enabled = cfg.scaler.is_some() || cfg.optimizer.is_some();

        let capacity_table = match &cfg.optimizer {
            Some(opt) => {
                let table = match (&opt.table, &opt.capacity_table) {
                    (Some(t), _) => Some(t.clone()),
                    (None, Some(path)) => Some(CapacityTable::read_file(path)?),
                    (None, None) => None,
                };
                if let Some(t) = &table {
                    if t.edges_in.0 != opt.edges_in || t.edges_out.0 != opt.edges_out {
                        return Err(SimError::config(format!(
                            "capacity table bucket edges (in={:?}, out={:?}) do not match the optimizer config (in={:?}, out={:?}); re-run the profile subcommand",
                            t.edges_in.0, t.edges_out.0, opt.edges_in, opt.edges_out
                        )));
                    }
                }
                table
            }
            None => None,
        };

        let mut engine = Engine {
            clock: 0.0,
            events: BinaryHeap::new(),
            seq: 0,
            fleet,
            pool,
            limiter,
            policy,
            stats,
            requests: BTreeMap::new(),
            active: BTreeMap::new(),
            sched,
            remaining_arrivals: trace.requests.len() as u64,
            w_hpa_perpod: MetricWindow::new(scaler.sync_period),
            w_stable_perpod: MetricWindow::new(scaler.kpa_stable_span),
            w_stable_total: MetricWindow::new(scaler.kpa_stable_span),
            w_panic_total: MetricWindow::new(scaler.kpa_panic_span),
            scaler,
            scaling_enabled,
            scaler_state: ScalerState::default(),
            capacity_table,
            plan: None,
            admissions_log: Vec::new(),
            records: Vec::new(),
            itl_samples: Vec::new(),
            admitted: 0,
            completed: 0,
            failed: 0,
            rejected_tpm: 0,
            rejected_rpm: 0,
            prompt_tokens_completed: 0,
            decoded_tokens: 0,
            local_hit_tokens: 0,
            remote_hit_tokens: 0,
            local_hits_by_instance: BTreeMap::new(),
            replica_series: Vec::new(),
            clamp_events: 0,
            warnings: Vec::new(),
            decision_log: Vec::new(),
            cfg,
        };

        if trace.metadata.reordered {
            engine
                .warnings
                .push("trace arrivals were unsorted and got reordered".into());
        }
        for r in trace.requests {
            engine.schedule(r.arrival, EventKind::Arrival { request: r.id });
            engine.requests.insert(r.id, r);
        }
        for (idx, fault) in engine.cfg.faults.clone().iter().enumerate() {
            engine.schedule(fault.time, EventKind::InstanceFail { fault: idx });
        }
        for a in engine.cfg.adapters.clone() {
            let spec = crate::cluster::AdapterSpec {
                name: a.name.clone(),
                base_model: a.base_model.clone(),
                load_time: a.load_time,
            };
            let (instance, ready_at) = engine.fleet.register_adapter(&spec, a.strategy, 0.0)?;
            if a.load_time > 0.0 {
                engine.schedule(
                    ready_at,
                    EventKind::AdapterLoaded {
                        instance,
                        name: a.name.clone(),
                    },
                );
            }
        }
        if engine.remaining_arrivals > 0 {
            if engine.scaling_enabled {
                engine.schedule(engine.scaler.sync_period, EventKind::ScalerTick);
            }
            if engine.cfg.optimizer.is_some() {
                let cadence = engine.cfg.optimizer.as_ref().unwrap().cadence;
                engine.schedule(cadence, EventKind::OptimizerTick);
            }
        }

        // steady-state start: plan from the full trace before anything runs
        if let (Some(opt), Some(table)) = (&engine.cfg.optimizer, &engine.capacity_table) {
            if opt.plan_at_start {
                let trace_view = RequestTrace {
                    requests: engine.requests.values().cloned().collect(),
                    metadata: Default::default(),
                };
                let hist = crate::workload::bucketize(
                    &trace_view,
                    &table.edges_in,
                    &table.edges_out,
                )?;
                match solve(&hist, table, &engine.cfg.profile_costs(), &{
                    let max = engine.scaler.max_replicas;
                    engine
                        .fleet
                        .profiles
                        .keys()
                        .map(|g| (g.clone(), max))
                        .collect()
                }) {
                    Ok(plan) => engine.plan = Some(plan),
                    Err(e) => engine
                        .warnings
                        .push(format!("initial plan solve failed: {e}")),
                }
            }
        }
        Ok(engine)
    }

    pub fn fleet_mut(&mut self) -> &mut Fleet {
        &mut self.fleet
    }

    pub fn decision_log(&self) -> &[DecisionRecord] {
        &self.decision_log
    }

    pub fn now(&self) -> f64 {
        self.clock
    }

    fn schedule(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time >= self.clock - 1e-9, "event scheduled in the past");
        self.events.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }

    /// Process one event. Returns the event time, or None when drained.
    pub fn step(&mut self) -> Result<Option<f64>, SimError> {
        let Some(ev) = self.events.pop() else {
            return Ok(None);
        };
        if ev.time < self.clock - 1e-9 {
            return Err(SimError::InvariantBreach {
                time: self.clock,
                message: format!("clock went backwards: {} -> {}", self.clock, ev.time),
            });
        }
        self.clock = self.clock.max(ev.time);
        let touched = self.dispatch(ev)?;
        if let Some(id) = touched {
            self.check_instance(id)?;
        }
        Ok(Some(self.clock))
    }

    /// Process events up to and including virtual time `t`.
    pub fn run_until(&mut self, t: f64) -> Result<(), SimError> {
        while let Some(ev) = self.events.peek() {
            if ev.time > t {
                break;
            }
            self.step()?;
        }
        self.clock = self.clock.max(t);
        Ok(())
    }

    pub fn run_to_completion(&mut self) -> Result<(), SimError> {
        while self.step()?.is_some() {}
        if !self.active.is_empty() || self.remaining_arrivals > 0 {
            return Err(SimError::InvariantBreach {
                time: self.clock,
                message: format!(
                    "simulation drained with {} active requests ({} arrivals unprocessed)",
                    self.active.len(),
                    self.remaining_arrivals
                ),
            });
        }
        if self.admitted != self.completed + self.failed {
            return Err(SimError::InvariantBreach {
                time: self.clock,
                message: format!(
                    "conservation broken: admitted {} != completed {} + failed {}",
                    self.admitted, self.completed, self.failed
                ),
            });
        }
        Ok(())
    }

    fn dispatch(&mut self, ev: Event) -> Result<Option<u32>, SimError> {
        let now = ev.time;
        match ev.kind {
            EventKind::Arrival { request } => {
                self.remaining_arrivals -= 1;
                Ok(self.handle_arrival(request, now))
            }
            EventKind::PrefillDone { instance, request } => {
                self.handle_prefill_done(instance, request, now);
                Ok(Some(instance))
            }
            EventKind::DecodeStep { instance, epoch } => {
                self.handle_decode_step(instance, epoch, now);
                Ok(Some(instance))
            }
            EventKind::Completion { instance, request } => {
                self.handle_completion(instance, request, now);
                Ok(Some(instance))
            }
            EventKind::ScalerTick => {
                self.handle_scaler_tick(now)?;
                Ok(None)
            }
            EventKind::OptimizerTick => {
                self.handle_optimizer_tick(now);
                Ok(None)
            }
            EventKind::AdapterLoaded { instance, name } => {
                self.fleet.finish_adapter_load(instance, &name);
                Ok(Some(instance))
            }
            EventKind::InstanceReady { instance } => {
                if let Some(inst) = self.fleet.get_mut(instance) {
                    if inst.retired_at.is_none() && inst.health == Health::Starting {
                        inst.health = Health::Ready;
                    }
                }
                Ok(Some(instance))
            }
            EventKind::InstanceFail { fault } => {
                self.handle_fault(fault, now)?;
                Ok(None)
            }
        }
    }

    // ---- arrival / routing ----

    fn handle_arrival(&mut self, req_id: u64, now: f64) -> Option<u32> {
        let request = self.requests.get(&req_id).expect("trace request").clone();
        let tenant = request.model.clone();
        match self.limiter.admit(&tenant, &request, now) {
            Admission::RejectedTpm => {
                self.rejected_tpm += 1;
                return None;
            }
            Admission::RejectedRpm => {
                self.rejected_rpm += 1;
                return None;
            }
            Admission::Admitted => {}
        }
        self.admitted += 1;
        self.admissions_log
            .push((now, request.prompt_len(), request.output_len));

        let kv_need = request.total_tokens() as u64;
        let mut cands: Vec<u32> = candidates(&self.fleet, &request)
            .into_iter()
            .filter(|&id| {
                self.fleet
                    .get(id)
                    .is_some_and(|i| i.gpu.kv_capacity >= kv_need)
            })
            .collect();
        if cands.is_empty() {
            self.fail_request(req_id, None, now, "no routable instance");
            return None;
        }

        // plan-proportional type choice under an active heterogeneous plan
        if let Some(filtered) = self.plan_filter(&request, &cands) {
            cands = filtered;
        }

        let keys = block_keys(&request.prompt, self.cfg.fleet.block_size);
        let views: Vec<CandidateView> = cands
            .iter()
            .map(|&id| {
                let inst = self.fleet.get(id).expect("candidate");
                let st = self.stats.get_mut(&id).expect("stats");
                CandidateView {
                    id,
                    queue_depth: inst.in_flight(),
                    tokens_per_sec: st.throughput(now),
                    admitted_count: st.admitted_count(now),
                    kv_utilization: st.avg_kv_utilization(now),
                    avg_latency: st.avg_latency(now),
                    cache_match_tokens: inst.local_cache.match_prefix(&keys),
                }
            })
            .collect();
        let chosen = route(&self.policy, request.id, request.prompt_len() as u64, &views);

        if self.cfg.gateway.decision_log {
            self.decision_log.push(DecisionRecord {
                request_id: request.id,
                instance: chosen,
                reason: format!("{:?}", self.policy.kind),
            });
        }
        self.stats
            .get_mut(&chosen)
            .expect("stats")
            .record_admission(now);
        self.active.insert(
            req_id,
            ActiveRequest {
                keys,
                prefill_start: None,
                outcome: None,
                ttft: None,
                kv_tokens: kv_need,
            },
        );
        let inst = self.fleet.get_mut(chosen).expect("candidate");
        inst.queue.push_back(req_id);
        let util = inst.kv_utilization();
        self.stats
            .get_mut(&chosen)
            .expect("stats")
            .record_kv_util(util, now);
        self.try_start_prefill(chosen, now);
        self.sample_metrics(now);
        Some(chosen)
    }

    /// Restrict candidates to the plan-chosen GPU type for this request's
    /// bucket, when a heterogeneous plan is active.
    fn plan_filter(&self, request: &Request, cands: &[u32]) -> Option<Vec<u32>> {
        let plan = self.plan.as_ref()?;
        let opt = self.cfg.optimizer.as_ref()?;
        if plan.counts.values().filter(|&&c| c > 0).count() < 2 {
            return None;
        }
        let edges_in = BucketEdges(opt.edges_in.clone());
        let edges_out = BucketEdges(opt.edges_out.clone());
        let i = edges_in.bucket_of(request.prompt_len());
        let j = edges_out.bucket_of(request.output_len);
        let weights = plan.bucket_weights(i, j);
        if weights.is_empty() {
            return None;
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let draw = (splitmix64(self.cfg.seed ^ splitmix64(request.id ^ 0x9e3f)) as f64
            / u64::MAX as f64)
            * total;
        let mut acc = 0.0;
        let mut chosen_type = &weights[weights.len() - 1].0;
        for (g, w) in &weights {
            acc += w;
            if draw <= acc {
                chosen_type = g;
                break;
            }
        }
        let filtered: Vec<u32> = cands
            .iter()
            .copied()
            .filter(|&id| {
                self.fleet
                    .get(id)
                    .is_some_and(|inst| &inst.gpu.name == chosen_type)
            })
            .collect();
        if filtered.is_empty() {
            None
        } else {
            Some(filtered)
        }
    }

    fn fail_request(&mut self, req_id: u64, instance: Option<u32>, now: f64, _reason: &str) {
        let request = self.requests.get(&req_id).expect("request");
        self.failed += 1;
        self.records.push(RequestRecord {
            id: req_id,
            instance,
            arrival: request.arrival,
            queue_latency: now - request.arrival,
            ttft: None,
            e2e: None,
            prompt_tokens: request.prompt_len(),
            output_tokens: request.output_len,
            local_hit_tokens: 0,
            remote_hit_tokens: 0,
            failed: true,
        });
        self.active.remove(&req_id);
    }

    // ---- prefill ----

    fn try_start_prefill(&mut self, inst_id: u32, now: f64) {
        let Some(inst) = self.fleet.get(inst_id) else {
            return;
        };
        if inst.health != Health::Ready || inst.prefilling.is_some() {
            return;
        }
        let Some(&front) = inst.queue.front() else {
            return;
        };
        let act = self.active.get(&front).expect("queued request is active");
        let kv_need = act.kv_tokens;
        if inst.slots_used() >= inst.gpu.batch_capacity
            || inst.kv_used + kv_need > inst.gpu.kv_capacity
        {
            return; // strict FIFO: head of line waits for capacity
        }

        let prompt_len = self.requests[&front].prompt_len() as u64;
        let keys = act.keys.clone();
        let inst = self.fleet.get_mut(inst_id).expect("instance");
        inst.queue.pop_front();
        inst.kv_used += kv_need;
        inst.prefilling = Some(front);
        let rate = inst.effective_prefill_rate();
        let outcome = plan_prefill(&inst.local_cache, self.pool.as_mut(), &keys, prompt_len, rate);

        let chunked = self.cfg.fleet.chunked_prefill;
        let compute = if chunked {
            outcome.compute_time * (1.0 + self.cfg.fleet.chunk_overhead)
        } else {
            outcome.compute_time
        };
        let fetch_end = now + outcome.transfer_time;
        let sched = self.sched.get_mut(&inst_id).expect("sched");
        let compute_start = if chunked {
            fetch_end
        } else {
            fetch_end.max(sched.gpu_busy_until)
        };
        let end = compute_start + compute;
        if !chunked {
            sched.gpu_busy_until = end;
        }

        let act = self.active.get_mut(&front).expect("active");
        act.prefill_start = Some(now);
        act.outcome = Some(outcome);
        self.schedule(
            end,
            EventKind::PrefillDone {
                instance: inst_id,
                request: front,
            },
        );
    }

    fn handle_prefill_done(&mut self, inst_id: u32, req_id: u64, now: f64) {
        let Some(inst) = self.fleet.get_mut(inst_id) else {
            return;
        };
        if inst.prefilling != Some(req_id) {
            return; // instance crashed and restarted its pipeline
        }
        inst.prefilling = None;
        let Some(act) = self.active.get_mut(&req_id) else {
            return;
        };
        act.ttft = Some(now - self.requests[&req_id].arrival);
        let keys = act.keys.clone();
        let kv_tokens = act.kv_tokens;
        let output_len = self.requests[&req_id].output_len;

        let inst = self.fleet.get_mut(inst_id).expect("instance");
        commit_prefill(&mut inst.local_cache, self.pool.as_mut(), &keys);
        inst.pending_join.push(RunningRequest {
            request_id: req_id,
            remaining: output_len,
            kv_tokens,
            last_token_at: now,
        });
        self.advance_decode(inst_id, now);
        self.try_start_prefill(inst_id, now);
    }

    // ---- decode ----

    /// At a step boundary: absorb pending joins and start the next step.
    fn advance_decode(&mut self, inst_id: u32, now: f64) {
        let chunked = self.cfg.fleet.chunked_prefill;
        let sched = self.sched.get_mut(&inst_id).expect("sched");
        if sched.current_step.is_some() {
            return;
        }
        let Some(inst) = self.fleet.get_mut(inst_id) else {
            return;
        };
        if inst.health == Health::Failed {
            return;
        }
        let joins = std::mem::take(&mut inst.pending_join);
        inst.running.extend(joins);
        if inst.running.is_empty() {
            return;
        }
        let batch = inst.running.len() as u32;
        let dur = inst.effective_step_time(batch);
        let start = if chunked {
            now
        } else {
            now.max(sched.gpu_busy_until)
        };
        let end = start + dur;
        if !chunked {
            sched.gpu_busy_until = end;
        }
        sched.step_epoch += 1;
        sched.current_step = Some((start, dur));
        let epoch = sched.step_epoch;
        self.schedule(
            end,
            EventKind::DecodeStep {
                instance: inst_id,
                epoch,
            },
        );
    }

    fn handle_decode_step(&mut self, inst_id: u32, epoch: u64, now: f64) {
        let Some(sched) = self.sched.get_mut(&inst_id) else {
            return;
        };
        if sched.step_epoch != epoch || sched.current_step.is_none() {
            return; // cancelled by a crash
        }
        sched.current_step.take().expect("step in flight");
        let Some(inst) = self.fleet.get_mut(inst_id) else {
            return;
        };
        let mut done: Vec<u64> = Vec::new();
        let mut freed_kv = 0u64;
        for r in &mut inst.running {
            r.remaining -= 1;
            self.itl_samples.push(now - r.last_token_at);
            r.last_token_at = now;
            if r.remaining == 0 {
                done.push(r.request_id);
                freed_kv += r.kv_tokens;
            }
        }
        inst.running.retain(|r| r.remaining > 0);
        inst.kv_used = inst.kv_used.saturating_sub(freed_kv);
        for req in done {
            self.schedule(
                now,
                EventKind::Completion {
                    instance: inst_id,
                    request: req,
                },
            );
        }
        self.advance_decode(inst_id, now);
        self.try_start_prefill(inst_id, now);
    }

    fn handle_completion(&mut self, inst_id: u32, req_id: u64, now: f64) {
        let Some(act) = self.active.remove(&req_id) else {
            return;
        };
        let request = &self.requests[&req_id];
        let outcome = act.outcome.unwrap_or(PrefillOutcome {
            local_hit: 0,
            remote_hit: 0,
            transfer_time: 0.0,
            compute_time: 0.0,
            computed_tokens: 0,
        });
        let queue_latency = act.prefill_start.unwrap_or(request.arrival) - request.arrival;
        let serve_latency = now - act.prefill_start.unwrap_or(now);

        if let Some(inst) = self.fleet.get_mut(inst_id) {
            let util = inst.kv_utilization();
            let st = self.stats.get_mut(&inst_id).expect("stats");
            st.record_outcome(
                queue_latency,
                serve_latency,
                (request.prompt_len() + request.output_len) as u64,
                now,
            );
            st.record_kv_util(util, now);
        }

        self.completed += 1;
        self.prompt_tokens_completed += request.prompt_len() as u64;
        self.decoded_tokens += request.output_len as u64;
        self.local_hit_tokens += outcome.local_hit;
        self.remote_hit_tokens += outcome.remote_hit;
        *self.local_hits_by_instance.entry(inst_id).or_default() += outcome.local_hit;
        self.records.push(RequestRecord {
            id: req_id,
            instance: Some(inst_id),
            arrival: request.arrival,
            queue_latency,
            ttft: act.ttft,
            e2e: Some(now - request.arrival),
            prompt_tokens: request.prompt_len(),
            output_tokens: request.output_len,
            local_hit_tokens: outcome.local_hit,
            remote_hit_tokens: outcome.remote_hit,
            failed: false,
        });

        // drained instances retire once empty
        let retire = self
            .fleet
            .get(inst_id)
            .is_some_and(|i| i.draining && i.in_flight() == 0);
        if retire {
            let inst = self.fleet.get_mut(inst_id).expect("instance");
            inst.retired_at = Some(now);
        } else {
            self.try_start_prefill(inst_id, now);
        }
        self.sample_metrics(now);
    }

    // ---- autoscaling ----

    fn scale_scope(&self) -> (String, String) {
        let g = &self.cfg.fleet.instances[0];
        (g.gpu.clone(), g.model.clone())
    }

    fn fleet_metric(&mut self, now: f64) -> (f64, f64) {
        let ready: Vec<u32> = self
            .fleet
            .live()
            .filter(|i| i.health == Health::Ready && !i.draining)
            .map(|i| i.id)
            .collect();
        let n = ready.len() as f64;
        if ready.is_empty() {
            return (0.0, 0.0);
        }
        match self.scaler.metric {
            ScalingMetric::Concurrency => {
                let total: f64 = ready
                    .iter()
                    .map(|&id| self.fleet.get(id).map(|i| i.in_flight() as f64).unwrap_or(0.0))
                    .sum();
                (total / n, total)
            }
            ScalingMetric::KvUtilization => {
                let total: f64 = ready
                    .iter()
                    .map(|&id| self.fleet.get(id).map(|i| i.kv_utilization()).unwrap_or(0.0))
                    .sum();
                (total / n, total)
            }
            ScalingMetric::TokensPerSec => {
                let total: f64 = ready
                    .iter()
                    .map(|&id| {
                        self.stats
                            .get_mut(&id)
                            .map(|s| s.throughput(now))
                            .unwrap_or(0.0)
                    })
                    .sum();
                (total / n, total)
            }
        }
    }

    fn sample_metrics(&mut self, now: f64) {
        if !self.scaling_enabled {
            return;
        }
        let (per_pod, total) = self.fleet_metric(now);
        self.w_hpa_perpod.push(now, per_pod);
        self.w_stable_perpod.push(now, per_pod);
        self.w_stable_total.push(now, total);
        self.w_panic_total.push(now, total);
    }

    fn handle_scaler_tick(&mut self, now: f64) -> Result<(), SimError> {
        if self.remaining_arrivals == 0 && self.active.is_empty() {
            return Ok(()); // work exhausted; stop ticking
        }
        self.sample_metrics(now);

        // The optimizer owns scaling decisions when enabled; the scaler tick
        // still replaces failed capacity against the latest per-type plan.
        if self.cfg.optimizer.is_some() {
            if let Some(plan) = self.plan.clone() {
                self.apply_plan(&plan, now)?;
            }
        } else {
            let (gpu_type, model) = self.scale_scope();
            let ready = self.fleet.ready_count(Some(&gpu_type));
            let starting = self.fleet.starting_count(Some(&gpu_type));
            let current = ready + starting;
            self.scaler_state.current_replicas = current;

            let (min, max) = (self.scaler.min_replicas, self.scaler.max_replicas);
            let (desired, panic_mode) = match self.scaler.algorithm {
                ScalerAlgorithm::Hpa => (
                    autoscaler::hpa_desired(
                        current.max(1),
                        self.w_hpa_perpod.aggregate(now),
                        self.scaler.target,
                        self.scaler.hpa_tolerance,
                        min,
                        max,
                    ),
                    false,
                ),
                ScalerAlgorithm::Apa => (
                    autoscaler::apa_desired(
                        current.max(1),
                        self.w_stable_perpod.aggregate(now),
                        self.scaler.target,
                        self.scaler.apa_up_fluctuation,
                        self.scaler.apa_down_fluctuation,
                        min,
                        max,
                    ),
                    false,
                ),
                ScalerAlgorithm::Kpa => autoscaler::kpa_desired(
                    self.w_stable_total.aggregate(now),
                    self.w_panic_total.aggregate(now),
                    ready,
                    &mut self.scaler_state,
                    self.scaler.target,
                    self.scaler.kpa_panic_threshold,
                    self.scaler.kpa_stable_span,
                    now,
                    min,
                    max,
                ),
            };
            self.apply_scale(&gpu_type, &model, current, desired, now)?;
            let (ready, starting) = (
                self.fleet.ready_count(Some(&gpu_type)),
                self.fleet.starting_count(Some(&gpu_type)),
            );
            self.replica_series.push(ReplicaSample {
                time: now,
                gpu_type,
                ready,
                starting,
                desired,
                panic_mode,
            });
        }

        self.schedule(now + self.scaler.sync_period, EventKind::ScalerTick);
        Ok(())
    }

    fn apply_scale(
        &mut self,
        gpu_type: &str,
        model: &str,
        current: u32,
        desired: u32,
        now: f64,
    ) -> Result<(), SimError> {
        let loads: Vec<InstanceLoad> = self
            .fleet
            .live()
            .filter(|i| i.gpu.name == gpu_type && !i.draining && i.health != Health::Failed)
            .map(|i| InstanceLoad {
                id: i.id,
                running: i.slots_used(),
                queued: i.queue.len() as u32,
            })
            .collect();
        for action in autoscaler::reconcile(current, desired, &loads) {
            match action {
                ScaleAction::Start => {
                    let id = self.fleet.spawn(
                        gpu_type,
                        model,
                        self.cfg.fleet.local_cache_tokens,
                        self.cfg.fleet.block_size,
                        now,
                        self.scaler.cold_start,
                    )?;
                    self.stats
                        .insert(id, InstanceStats::new(self.cfg.gateway.stats_window));
                    self.sched.insert(id, Sched::default());
                    if self.scaler.cold_start > 0.0 {
                        self.schedule(
                            now + self.scaler.cold_start,
                            EventKind::InstanceReady { instance: id },
                        );
                    }
                }
                ScaleAction::Remove { instance } => {
                    if let Some(inst) = self.fleet.get_mut(instance) {
                        inst.retired_at = Some(now);
                        inst.draining = true;
                    }
                }
                ScaleAction::Drain { instance } => {
                    if let Some(inst) = self.fleet.get_mut(instance) {
                        inst.draining = true;
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_plan(&mut self, plan: &AllocationPlan, now: f64) -> Result<(), SimError> {
        let bounds: BTreeMap<String, (u32, u32)> = self
            .fleet
            .profiles
            .keys()
            .map(|g| {
                (
                    g.clone(),
                    (self.scaler.min_replicas, self.scaler.max_replicas),
                )
            })
            .collect();
        let (desired_map, clamped) = external_plan_desired(&plan.counts, &bounds)?;
        if clamped {
            self.clamp_events += 1;
        }
        let (_, model) = self.scale_scope();
        for (gpu_type, desired) in desired_map {
            let ready = self.fleet.ready_count(Some(&gpu_type));
            let starting = self.fleet.starting_count(Some(&gpu_type));
            let current = ready + starting;
            self.apply_scale(&gpu_type, &model, current, desired, now)?;
            let (ready, starting) = (
                self.fleet.ready_count(Some(&gpu_type)),
                self.fleet.starting_count(Some(&gpu_type)),
            );
            self.replica_series.push(ReplicaSample {
                time: now,
                gpu_type,
                ready,
                starting,
                desired,
                panic_mode: false,
            });
        }
        Ok(())
    }

    fn handle_optimizer_tick(&mut self, now: f64) {
        if self.remaining_arrivals == 0 && self.active.is_empty() {
            return;
        }
        let opt = self.cfg.optimizer.clone().expect("optimizer config");
        let Some(table) = self.capacity_table.clone() else {
            return;
        };
        let hist = monitor(
            &self.admissions_log,
            now,
            self.cfg.gateway.stats_window,
            &table.edges_in,
            &table.edges_out,
        );
        let costs = self.cfg.profile_costs();
        let bounds: BTreeMap<String, u32> = self
            .fleet
            .profiles
            .keys()
            .map(|g| (g.clone(), self.scaler.max_replicas))
            .collect();
        match solve(&hist, &table, &costs, &bounds) {
            Ok(plan) => {
                if let Err(e) = self.apply_plan(&plan, now) {
                    self.warnings.push(format!("plan apply failed at t={now}: {e}"));
                }
                self.plan = Some(plan);
            }
            Err(e) => {
                self.warnings
                    .push(format!("optimizer solve failed at t={now}: {e}"));
            }
        }
        self.schedule(now + opt.cadence, EventKind::OptimizerTick);
    }

    // ---- failures ----

    fn handle_fault(&mut self, fault_idx: usize, now: f64) -> Result<(), SimError> {
        let fault = self.cfg.faults[fault_idx].clone();
        let targets: Vec<u32> = match (&fault.instance, &fault.gpu_type) {
            (Some(id), None) => vec![*id],
            (None, Some(g)) => self
                .fleet
                .live()
                .filter(|i| &i.gpu.name == g)
                .map(|i| i.id)
                .collect(),
            _ => unreachable!("validated"),
        };
        for id in &targets {
            let Some(inst) = self.fleet.get(*id) else {
                return Err(SimError::InvariantBreach {
                    time: now,
                    message: format!("fault targets instance {id}, which no longer exists"),
                });
            };
            if inst.retired_at.is_some() || inst.health == Health::Failed {
                return Err(SimError::InvariantBreach {
                    time: now,
                    message: format!("fault targets instance {id}, which is already gone"),
                });
            }
        }
        for id in targets {
            match fault.mode {
                FaultMode::Crash => self.crash_instance(id, now),
                FaultMode::Degrade => {
                    let factor = fault.factor.expect("validated");
                    if let Some(inst) = self.fleet.get_mut(id) {
                        inst.degrade = factor;
                    }
                }
            }
        }
        Ok(())
    }

    fn crash_instance(&mut self, inst_id: u32, now: f64) {
        let Some(inst) = self.fleet.get_mut(inst_id) else {
            return;
        };
        inst.health = Health::Failed;
        inst.retired_at = Some(now);
        let mut casualties: Vec<u64> = Vec::new();
        casualties.extend(inst.queue.drain(..));
        casualties.extend(inst.prefilling.take());
        casualties.extend(inst.pending_join.drain(..).map(|r| r.request_id));
        casualties.extend(inst.running.drain(..).map(|r| r.request_id));
        inst.kv_used = 0;
        let sched = self.sched.get_mut(&inst_id).expect("sched");
        sched.current_step = None;
        sched.step_epoch += 1; // cancels in-flight DecodeStep events
        for req in casualties {
            if self.active.contains_key(&req) {
                self.fail_request(req, Some(inst_id), now, "instance crash");
            }
        }
    }

    // ---- invariants & finalization ----

    fn check_instance(&self, inst_id: u32) -> Result<(), SimError> {
        let Some(inst) = self.fleet.get(inst_id) else {
            return Ok(());
        };
        if inst.running.len() as u32 > inst.gpu.batch_capacity {
            return Err(SimError::InvariantBreach {
                time: self.clock,
                message: format!(
                    "instance {inst_id} exceeded batch capacity: {} > {}",
                    inst.running.len(),
                    inst.gpu.batch_capacity
                ),
            });
        }
        if inst.kv_used > inst.gpu.kv_capacity {
            return Err(SimError::InvariantBreach {
                time: self.clock,
                message: format!(
                    "instance {inst_id} exceeded kv capacity: {} > {}",
                    inst.kv_used, inst.gpu.kv_capacity
                ),
            });
        }
        if inst.adapter_slots_used() > inst.gpu.max_adapters {
            return Err(SimError::InvariantBreach {
                time: self.clock,
                message: format!("instance {inst_id} exceeded adapter capacity"),
            });
        }
        // kv_used must equal the sum of reservations held by admitted work
        let mut expected: u64 = inst
            .running
            .iter()
            .chain(inst.pending_join.iter())
            .map(|r| r.kv_tokens)
            .sum();
        if let Some(req) = inst.prefilling {
            expected += self.active.get(&req).map(|a| a.kv_tokens).unwrap_or(0);
        }
        if inst.kv_used != expected {
            return Err(SimError::InvariantBreach {
                time: self.clock,
                message: format!(
                    "instance {inst_id} kv accounting drifted: used {} != reserved {expected}",
                    inst.kv_used
                ),
            });
        }
        Ok(())
    }

    pub fn finalize(mut self) -> Result<MetricsReport, SimError> {
        let completion_time = self.clock;
        self.records.sort_by_key(|r| r.id);

        let ttfts_ms: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.ttft)
            .map(|t| t * 1000.0)
            .collect();
        let e2es_ms: Vec<f64> = self
            .records
            .iter()
            .filter_map(|r| r.e2e)
            .map(|t| t * 1000.0)
            .collect();
        let itls_ms: Vec<f64> = self.itl_samples.iter().map(|t| t * 1000.0).collect();
        let avg = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let p99 = |v: &[f64]| percentile(v, 99.0).unwrap_or(0.0);

        let mut cost = 0.0;
        for inst in &self.fleet.instances {
            let end = inst.retired_at.unwrap_or(completion_time);
            cost += (end - inst.created_at).max(0.0) / 3600.0 * inst.gpu.hourly_cost;
        }

        let per_instance_cache: BTreeMap<u32, crate::kvcache::CacheStats> = self
            .fleet
            .instances
            .iter()
            .map(|i| {
                let mut stats = i.local_cache.stats();
                stats.hit_tokens = self
                    .local_hits_by_instance
                    .get(&i.id)
                    .copied()
                    .unwrap_or(0);
                (i.id, stats)
            })
            .collect();

        let total_tokens = self.prompt_tokens_completed + self.decoded_tokens;
        let tp = |tokens: u64| {
            if completion_time > 0.0 {
                tokens as f64 / completion_time
            } else {
                0.0
            }
        };

        Ok(MetricsReport {
            scenario_seed: self.cfg.seed,
            completion_time_s: completion_time,
            admitted_requests: self.admitted,
            completed_requests: self.completed,
            failed_requests: self.failed,
            rejected_tpm: self.rejected_tpm,
            rejected_rpm: self.rejected_rpm,
            prompt_tokens: self.prompt_tokens_completed,
            decoded_tokens: self.decoded_tokens,
            total_throughput_tps: tp(total_tokens),
            decode_throughput_tps: tp(self.decoded_tokens),
            ttft_avg_ms: avg(&ttfts_ms),
            ttft_p99_ms: p99(&ttfts_ms),
            itl_avg_ms: avg(&itls_ms),
            itl_p99_ms: p99(&itls_ms),
            e2e_avg_ms: avg(&e2es_ms),
            e2e_p99_ms: p99(&e2es_ms),
            local_hit_tokens: self.local_hit_tokens,
            remote_hit_tokens: self.remote_hit_tokens,
            local_hit_ratio: if self.prompt_tokens_completed > 0 {
                self.local_hit_tokens as f64 / self.prompt_tokens_completed as f64
            } else {
                0.0
            },
            cost,
            per_instance_cache,
            pool: self.pool.as_ref().map(|p| p.stats()),
            replica_series: self.replica_series,
            clamp_events: self.clamp_events,
            warnings: self.warnings,
            records: self.records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::default_profiles;
    use crate::config::{FaultConfig, InstanceGroup, PoolConfig, WorkloadConfig};
    use crate::gateway::PolicyKind;
    use crate::workload::{LengthDist, SynthSpec, TraceMetadata};

    fn base_config(instances: u32) -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.fleet.profiles = default_profiles();
        cfg.fleet.instances = vec![InstanceGroup {
            gpu: "A10".into(),
            model: "base".into(),
            count: instances,
        }];
        cfg.fleet.local_cache_tokens = 0;
        cfg.gateway.policy = PolicyKind::LeastRequest;
        cfg
    }

    fn one_request(prompt_len: usize, out: u32) -> RequestTrace {
        RequestTrace {
            requests: vec![Request {
                id: 0,
                arrival: 0.0,
                model: "base".into(),
                adapter: None,
                prompt: (0..prompt_len as u32).collect(),
                output_len: out,
                slo_ttft: None,
                slo_e2e: None,
                session: None,
            }],
            metadata: TraceMetadata::default(),
        }
    }

    fn synth(rate: f64, duration: f64, seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            trace: None,
            format: None,
            synth: Some(SynthSpec {
                rate,
                duration,
                session_count: 4,
                turns_per_session: 2,
                shared_prefix_len: 64,
                in_dist: LengthDist::Uniform { min: 32, max: 96 },
                out_dist: LengthDist::Fixed { value: 8 },
                model: "base".into(),
                adapter_pool: vec![],
                seed,
            }),
        }
    }

    #[test]
    fn empty_trace_yields_zero_report() {
        let cfg = base_config(1);
        let report = run_with_trace(&cfg, RequestTrace::default()).unwrap();
        assert_eq!(report.completed_requests, 0);
        assert_eq!(report.completion_time_s, 0.0);
        assert_eq!(report.total_throughput_tps, 0.0);
    }

    #[test]
    fn single_request_latency_composition() {
        // cold cache: TTFT = prefill_time(prompt), E2E = TTFT + out * step(1)
        let cfg = base_config(1);
        let prompt = 800usize;
        let out = 10u32;
        let report = run_with_trace(&cfg, one_request(prompt, out)).unwrap();
        assert_eq!(report.completed_requests, 1);
        let gpu = &cfg.fleet.profiles[0];
        let want_ttft = prompt as f64 / gpu.prefill_rate;
        let want_e2e = want_ttft + out as f64 * gpu.decode_base_itl;
        let r = &report.records[0];
        assert!((r.ttft.unwrap() - want_ttft).abs() < 1e-9, "ttft {}", r.ttft.unwrap());
        assert!((r.e2e.unwrap() - want_e2e).abs() < 1e-9, "e2e {}", r.e2e.unwrap());
        assert_eq!(report.decoded_tokens, out as u64);
        // ITL samples are the batch-1 step times
        assert!((report.itl_avg_ms - gpu.decode_base_itl * 1000.0).abs() < 1e-9);
    }

    #[test]
    fn conservation_and_determinism() {
        let mut cfg = base_config(2);
        cfg.workload = synth(6.0, 30.0, 9);
        cfg.fleet.local_cache_tokens = 4096;
        let a = run(&cfg).unwrap();
        assert!(a.completed_requests > 0);
        assert_eq!(a.admitted_requests, a.completed_requests + a.failed_requests);
        let b = run(&cfg).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap(),
            "identical scenario + seed must be byte-identical"
        );
    }

    #[test]
    fn crash_only_instance_fails_inflight_and_later_arrivals() {
        let mut cfg = base_config(1);
        cfg.workload = synth(4.0, 20.0, 3);
        cfg.faults.push(FaultConfig {
            time: 5.0,
            instance: Some(0),
            gpu_type: None,
            mode: FaultMode::Crash,
            factor: None,
        });
        let report = run(&cfg).unwrap();
        assert!(report.failed_requests > 0);
        assert_eq!(
            report.admitted_requests,
            report.completed_requests + report.failed_requests
        );
        // nothing arriving after the crash completes
        for r in &report.records {
            if r.arrival > 5.0 {
                assert!(r.failed, "request {} arrived after crash but completed", r.id);
            }
        }
    }

    #[test]
    fn crash_one_of_four_excludes_failed_from_routing() {
        let mut cfg = base_config(4);
        cfg.workload = synth(10.0, 30.0, 5);
        cfg.gateway.decision_log = true;
        cfg.faults.push(FaultConfig {
            time: 10.0,
            instance: Some(2),
            gpu_type: None,
            mode: FaultMode::Crash,
            factor: None,
        });
        let trace = cfg.resolve_trace().unwrap();
        let mut engine = Engine::new(cfg.clone(), trace).unwrap();
        engine.run_to_completion().unwrap();
        let decisions = engine.decision_log().to_vec();
        let report = engine.finalize().unwrap();
        assert!(report.completed_requests > 0);
        let arrivals: BTreeMap<u64, f64> = report
            .records
            .iter()
            .map(|r| (r.id, r.arrival))
            .collect();
        for d in &decisions {
            if arrivals.get(&d.request_id).is_some_and(|&t| t > 10.0) {
                assert_ne!(d.instance, 2, "routed to crashed instance");
            }
        }
    }

    #[test]
    fn degrade_doubles_itl() {
        let mut cfg = base_config(1);
        let trace_a = one_request(160, 20);
        let healthy = run_with_trace(&cfg, trace_a.clone()).unwrap();
        cfg.faults.push(FaultConfig {
            time: 0.0,
            instance: Some(0),
            gpu_type: None,
            mode: FaultMode::Degrade,
            factor: Some(0.5),
        });
        let degraded = run_with_trace(&cfg, trace_a).unwrap();
        assert!(
            (degraded.itl_avg_ms - 2.0 * healthy.itl_avg_ms).abs() < 1e-6,
            "degrade 0.5 should double ITL: {} vs {}",
            degraded.itl_avg_ms,
            healthy.itl_avg_ms
        );
    }

    #[test]
    fn pool_serves_second_instance_remote_hits() {
        // two instances, same prompt routed to each in turn: the second
        // instance's prefill should hit the pool, not compute
        let mut cfg = base_config(2);
        cfg.fleet.local_cache_tokens = 8192;
        cfg.fleet.pool = Some(PoolConfig {
            capacity_tokens: 1 << 20,
            probation_capacity_tokens: 1 << 16,
            bandwidth: 64_000.0,
            rtt: 0.001,
            eviction: Default::default(),
        });
        cfg.gateway.policy = PolicyKind::LeastRequest;
        let prompt: Vec<u32> = (0..640).collect();
        let mk = |id: u64, arrival: f64| Request {
            id,
            arrival,
            model: "base".into(),
            adapter: None,
            prompt: prompt.clone(),
            output_len: 4,
            slo_ttft: None,
            slo_e2e: None,
            session: None,
        };
        // three sequential requests: 0 -> inst A (cold), 1 -> inst B
        // (remote hit via pool), 2 -> whichever (local or remote hit)
        let trace = RequestTrace {
            requests: vec![mk(0, 0.0), mk(1, 1.0), mk(2, 2.0)],
            metadata: TraceMetadata::default(),
        };
        let report = run_with_trace(&cfg, trace).unwrap();
        assert_eq!(report.completed_requests, 3);
        assert!(
            report.remote_hit_tokens >= 640,
            "expected pool hits, got {}",
            report.remote_hit_tokens
        );
    }

    #[test]
    fn unregister_with_queued_requests_completes_them() {
        let mut cfg = base_config(1);
        cfg.adapters.push(crate::config::AdapterConfig {
            name: "lora-x".into(),
            base_model: "base".into(),
            load_time: 0.0,
            strategy: crate::cluster::PlacementStrategy::LeastAdapters,
        });
        let mk = |id: u64, arrival: f64| Request {
            id,
            arrival,
            model: "base".into(),
            adapter: Some("lora-x".into()),
            prompt: (0..400).collect(),
            output_len: 8,
            slo_ttft: None,
            slo_e2e: None,
            session: None,
        };
        let trace = RequestTrace {
            requests: vec![mk(0, 0.0), mk(1, 0.0), mk(2, 0.0)],
            metadata: TraceMetadata::default(),
        };
        let mut engine = Engine::new(cfg, trace).unwrap();
        // let the first prefill start, then unregister while 1 and 2 queue
        engine.run_until(0.01).unwrap();
        assert!(engine.fleet_mut().unregister_adapter("lora-x"));
        engine.run_to_completion().unwrap();
        let report = engine.finalize().unwrap();
        assert_eq!(report.completed_requests, 3, "queued requests must finish");
    }

    #[test]
    fn batch_capacity_is_respected_under_burst() {
        let mut cfg = base_config(1);
        cfg.workload = synth(40.0, 10.0, 11);
        let report = run(&cfg).unwrap();
        // run_to_completion would have errored on a capacity breach
        assert!(report.completed_requests > 0);
        assert_eq!(
            report.admitted_requests,
            report.completed_requests + report.failed_requests
        );
    }

    #[test]
    fn oversized_request_fails_instead_of_wedging() {
        let cfg = base_config(1);
        let kv_cap = cfg.fleet.profiles[0].kv_capacity as usize;
        let report = run_with_trace(&cfg, one_request(kv_cap + 100, 4)).unwrap();
        assert_eq!(report.failed_requests, 1);
        assert_eq!(report.completed_requests, 0);
    }

    #[test]
    fn scaler_grows_fleet_under_load() {
        let mut cfg = base_config(1);
        cfg.workload = synth(20.0, 120.0, 13);
        cfg.scaler = Some(ScalerConfig {
            algorithm: ScalerAlgorithm::Kpa,
            target: 2.0,
            sync_period: 5.0,
            cold_start: 10.0,
            min_replicas: 1,
            max_replicas: 8,
            ..Default::default()
        });
        let report = run(&cfg).unwrap();
        let max_ready = report
            .replica_series
            .iter()
            .map(|s| s.ready + s.starting)
            .max()
            .unwrap_or(0);
        assert!(max_ready > 1, "scaler never scaled up: {max_ready}");
        // starting instances received no traffic before ready_at: implied by
        // run_to_completion's conservation + routing filters; spot-check the
        // series is within bounds
        assert!(report.replica_series.iter().all(|s| s.ready + s.starting <= 8));
    }
}
