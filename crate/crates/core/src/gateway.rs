//! Request admission and routing.
//!
//! The gateway admits each request through per-tenant TPM/RPM token buckets,
//! filters candidates by model, adapter, and health, then picks an instance
//! with one of six policies: `random`, `throughput`, `least-request`,
//! `least-kv-cache`, `least-latency`, or `prefix-cache-aware` (prefer the
//! instance whose local cache covers the biggest prompt share, falling back
//! to another policy when the best hit ratio is below the threshold or the
//! preferred instance is overloaded).
//!
//! All argmin/argmax selections break ties by lowest instance id, and the
//! random policy derives its pick statelessly from (seed, request id), so
//! identical snapshots always produce identical decisions.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::cluster::Fleet;
use crate::error::SimError;
use crate::workload::{splitmix64, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Random,
    Throughput,
    LeastRequest,
    LeastKvCache,
    LeastLatency,
    PrefixCacheAware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingPolicy {
    pub kind: PolicyKind,
    /// Minimum local-cache hit ratio for prefix-cache-aware to honor the
    /// cache-preferred instance.
    pub prefix_threshold: f64,
    /// Policy applied when prefix-cache-aware declines.
    pub fallback: PolicyKind,
    pub seed: u64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        RoutingPolicy {
            kind: PolicyKind::LeastRequest,
            prefix_threshold: 0.5,
            fallback: PolicyKind::LeastRequest,
            seed: 0,
        }
    }
}

impl RoutingPolicy {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.prefix_threshold) {
            return Err(SimError::config("prefix_threshold must be in [0,1]"));
        }
        if self.fallback == PolicyKind::PrefixCacheAware {
            return Err(SimError::config(
                "prefix-cache-aware cannot be its own fallback",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admission {
    Admitted,
    RejectedTpm,
    RejectedRpm,
}

#[derive(Debug, Clone)]
struct Bucket {
    /// Budget per minute.
    limit: f64,
    fill: f64,
    last_refill: f64,
}

impl Bucket {
    fn new(limit: f64) -> Self {
        Bucket {
            limit,
            fill: limit, // start full
            last_refill: 0.0,
        }
    }

    /// Continuous refill at limit/60 per second, capped at the limit.
    fn refill(&mut self, now: f64) {
        let dt = (now - self.last_refill).max(0.0);
        self.fill = (self.fill + dt * self.limit / 60.0).min(self.limit);
        self.last_refill = now;
    }

    fn covers(&self, amount: f64) -> bool {
        self.fill + 1e-9 >= amount
    }

    fn debit(&mut self, amount: f64) {
        self.fill = (self.fill - amount).max(0.0);
    }
}

/// Per-tenant TPM/RPM limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TenantLimits {
    pub tpm: Option<f64>,
    pub rpm: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct TenantBuckets {
    tpm: Option<Bucket>,
    rpm: Option<Bucket>,
}

/// Token-bucket rate control. Tenants without configured limits are
/// unlimited. Token accounting is worst-case: prompt plus max output.
#[derive(Debug, Clone, Default)]
pub struct RateLimiter {
    tenants: BTreeMap<String, TenantBuckets>,
}

impl RateLimiter {
    pub fn new(limits: impl IntoIterator<Item = (String, TenantLimits)>) -> Self {
        let tenants = limits
            .into_iter()
            .map(|(tenant, l)| {
                (
                    tenant,
                    TenantBuckets {
                        tpm: l.tpm.map(Bucket::new),
                        rpm: l.rpm.map(Bucket::new),
                    },
                )
            })
            .collect();
        RateLimiter { tenants }
    }

    /// Admit iff both buckets cover the request; debit atomically on admit.
    pub fn admit(&mut self, tenant: &str, request: &Request, now: f64) -> Admission {
        let Some(buckets) = self.tenants.get_mut(tenant) else {
            return Admission::Admitted;
        };
        let tokens = request.total_tokens() as f64;
        if let Some(b) = buckets.tpm.as_mut() {
            b.refill(now);
        }
        if let Some(b) = buckets.rpm.as_mut() {
            b.refill(now);
        }
        if buckets.tpm.as_ref().is_some_and(|b| !b.covers(tokens)) {
            return Admission::RejectedTpm;
        }
        if buckets.rpm.as_ref().is_some_and(|b| !b.covers(1.0)) {
            return Admission::RejectedRpm;
        }
        if let Some(b) = buckets.tpm.as_mut() {
            b.debit(tokens);
        }
        if let Some(b) = buckets.rpm.as_mut() {
            b.debit(1.0);
        }
        Admission::Admitted
    }

    /// Smallest bucket fill across tenants, for the never-negative check.
    pub fn min_fill(&self) -> f64 {
        self.tenants
            .values()
            .flat_map(|t| [t.tpm.as_ref(), t.rpm.as_ref()])
            .flatten()
            .map(|b| b.fill)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sliding per-instance aggregates over the gateway stats window.
#[derive(Debug, Clone)]
pub struct InstanceStats {
    window: f64,
    admitted: VecDeque<f64>,
    tokens: VecDeque<(f64, u64)>,
    kv_util: VecDeque<(f64, f64)>,
    latency: VecDeque<(f64, f64)>,
}

impl InstanceStats {
    pub fn new(window: f64) -> Self {
        InstanceStats {
            window,
            admitted: VecDeque::new(),
            tokens: VecDeque::new(),
            kv_util: VecDeque::new(),
            latency: VecDeque::new(),
        }
    }

    fn prune(&mut self, now: f64) {
        let cutoff = now - self.window;
        while self.admitted.front().is_some_and(|&t| t < cutoff) {
            self.admitted.pop_front();
        }
        while self.tokens.front().is_some_and(|&(t, _)| t < cutoff) {
            self.tokens.pop_front();
        }
        while self.kv_util.front().is_some_and(|&(t, _)| t < cutoff) {
            self.kv_util.pop_front();
        }
        while self.latency.front().is_some_and(|&(t, _)| t < cutoff) {
            self.latency.pop_front();
        }
    }

    pub fn record_admission(&mut self, now: f64) {
        self.admitted.push_back(now);
        self.prune(now);
    }

    /// Fold in a finished (or failed) request's latency split and token count.
    pub fn record_outcome(&mut self, queue_latency: f64, serve_latency: f64, tokens: u64, now: f64) {
        self.latency.push_back((now, queue_latency + serve_latency));
        self.tokens.push_back((now, tokens));
        self.prune(now);
    }

    pub fn record_kv_util(&mut self, value: f64, now: f64) {
        self.kv_util.push_back((now, value));
        self.prune(now);
    }

    pub fn admitted_count(&mut self, now: f64) -> u64 {
        self.prune(now);
        self.admitted.len() as u64
    }

    /// Tokens/second over the window.
    pub fn throughput(&mut self, now: f64) -> f64 {
        self.prune(now);
        self.tokens.iter().map(|&(_, n)| n as f64).sum::<f64>() / self.window
    }

    pub fn avg_kv_utilization(&mut self, now: f64) -> f64 {
        self.prune(now);
        mean(self.kv_util.iter().map(|&(_, v)| v))
    }

    pub fn avg_latency(&mut self, now: f64) -> f64 {
        self.prune(now);
        mean(self.latency.iter().map(|&(_, v)| v))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0u64);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Ready instances that can serve the request: matching model, holding the
/// requested adapter when one is set. An empty result is a routing failure
/// the caller records.
pub fn candidates(fleet: &Fleet, request: &Request) -> Vec<u32> {
    fleet
        .live()
        .filter(|i| i.routable() && i.model == request.model)
        .filter(|i| {
            request
                .adapter
                .as_ref()
                .is_none_or(|a| i.serves_adapter(a))
        })
        .map(|i| i.id)
        .collect()
}

/// Everything a policy may look at for one candidate; built from live fleet
/// state by the engine, or directly by tests.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateView {
    pub id: u32,
    /// Requests on the instance in any stage (queued or served).
    pub queue_depth: u32,
    pub tokens_per_sec: f64,
    pub admitted_count: u64,
    pub kv_utilization: f64,
    pub avg_latency: f64,
    /// match_prefix of the instance's local cache against the prompt.
    pub cache_match_tokens: u64,
}

fn argmin_by<F: Fn(&CandidateView) -> f64>(views: &[CandidateView], key: F) -> u32 {
    views
        .iter()
        .min_by(|a, b| key(a).total_cmp(&key(b)).then(a.id.cmp(&b.id)))
        .expect("candidates non-empty")
        .id
}

fn median_queue_depth(views: &[CandidateView]) -> f64 {
    let mut depths: Vec<u32> = views.iter().map(|v| v.queue_depth).collect();
    depths.sort_unstable();
    let n = depths.len();
    if n % 2 == 1 {
        depths[n / 2] as f64
    } else {
        (depths[n / 2 - 1] as f64 + depths[n / 2] as f64) / 2.0
    }
}

/// Pick an instance for a request. `views` must be non-empty.
pub fn route(
    policy: &RoutingPolicy,
    request_id: u64,
    prompt_len: u64,
    views: &[CandidateView],
) -> u32 {
    assert!(!views.is_empty(), "route requires at least one candidate");
    route_kind(policy.kind, policy, request_id, prompt_len, views)
}

fn route_kind(
    kind: PolicyKind,
    policy: &RoutingPolicy,
    request_id: u64,
    prompt_len: u64,
    views: &[CandidateView],
) -> u32 {
    match kind {
        PolicyKind::Random => {
            let idx = splitmix64(policy.seed ^ splitmix64(request_id)) as usize % views.len();
            views[idx].id
        }
        PolicyKind::Throughput => argmin_by(views, |v| v.tokens_per_sec),
        PolicyKind::LeastRequest => argmin_by(views, |v| v.admitted_count as f64),
        PolicyKind::LeastKvCache => argmin_by(views, |v| v.kv_utilization),
        PolicyKind::LeastLatency => argmin_by(views, |v| v.avg_latency),
        PolicyKind::PrefixCacheAware => {
            let best = views
                .iter()
                .max_by(|a, b| {
                    a.cache_match_tokens
                        .cmp(&b.cache_match_tokens)
                        .then(b.id.cmp(&a.id)) // prefer lowest id on ties
                })
                .expect("non-empty");
            let ratio = if prompt_len == 0 {
                0.0
            } else {
                best.cache_match_tokens as f64 / prompt_len as f64
            };
            // overload guard: a hot cache does not justify a queue more than
            // twice the fleet median
            let overloaded = best.queue_depth as f64 > 2.0 * median_queue_depth(views);
            if ratio >= policy.prefix_threshold && !overloaded {
                best.id
            } else {
                route_kind(policy.fallback, policy, request_id, prompt_len, views)
            }
        }
    }
}

/// One routing decision, emitted to the decision log when enabled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub request_id: u64,
    pub instance: u32,
    pub reason: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn req(id: u64, tokens: usize, out: u32) -> Request {
        Request {
            id,
            arrival: 0.0,
            model: "base".into(),
            adapter: None,
            prompt: vec![1; tokens],
            output_len: out,
            slo_ttft: None,
            slo_e2e: None,
            session: None,
        }
    }

    fn view(id: u32) -> CandidateView {
        CandidateView {
            id,
            queue_depth: 0,
            tokens_per_sec: 0.0,
            admitted_count: 0,
            kv_utilization: 0.0,
            avg_latency: 0.0,
            cache_match_tokens: 0,
        }
    }

    #[test]
    fn limiter_rejects_oversized_request_on_tpm() {
        let mut rl = RateLimiter::new([(
            "t".to_string(),
            TenantLimits {
                tpm: Some(100.0),
                rpm: None,
            },
        )]);
        assert_eq!(rl.admit("t", &req(0, 140, 10), 0.0), Admission::RejectedTpm);
    }

    #[test]
    fn limiter_rpm_second_request_rejected() {
        let mut rl = RateLimiter::new([(
            "t".to_string(),
            TenantLimits {
                tpm: None,
                rpm: Some(1.0),
            },
        )]);
        assert_eq!(rl.admit("t", &req(0, 10, 1), 0.0), Admission::Admitted);
        assert_eq!(rl.admit("t", &req(1, 10, 1), 0.0), Admission::RejectedRpm);
    }

    #[test]
    fn limiter_refills_after_a_minute() {
        let mut rl = RateLimiter::new([(
            "t".to_string(),
            TenantLimits {
                tpm: Some(100.0),
                rpm: None,
            },
        )]);
        assert_eq!(rl.admit("t", &req(0, 90, 10), 0.0), Admission::Admitted);
        assert_eq!(rl.admit("t", &req(1, 90, 10), 0.0), Admission::RejectedTpm);
        assert_eq!(rl.admit("t", &req(2, 90, 10), 60.0), Admission::Admitted);
        assert!(rl.min_fill() >= 0.0);
    }

    #[test]
    fn unknown_tenant_is_unlimited() {
        let mut rl = RateLimiter::new([]);
        assert_eq!(rl.admit("t", &req(0, 1 << 20, 1), 0.0), Admission::Admitted);
    }

    #[test]
    fn least_request_argmin_and_ties() {
        let mut views = vec![view(0), view(1), view(2)];
        views[0].admitted_count = 3;
        views[1].admitted_count = 1;
        views[2].admitted_count = 2;
        let p = RoutingPolicy {
            kind: PolicyKind::LeastRequest,
            ..Default::default()
        };
        assert_eq!(route(&p, 0, 100, &views), 1);
        for v in &mut views {
            v.admitted_count = 2;
        }
        assert_eq!(route(&p, 0, 100, &views), 0, "ties break to lowest id");
    }

    #[test]
    fn prefix_aware_threshold_rule() {
        let p = RoutingPolicy {
            kind: PolicyKind::PrefixCacheAware,
            prefix_threshold: 0.5,
            fallback: PolicyKind::LeastRequest,
            seed: 0,
        };
        let mut views = vec![view(0), view(1)];
        views[0].cache_match_tokens = 90;
        views[1].cache_match_tokens = 10;
        assert_eq!(route(&p, 0, 100, &views), 0);

        views[0].cache_match_tokens = 20;
        views[1].cache_match_tokens = 10;
        views[0].admitted_count = 5; // fallback should avoid 0
        assert_eq!(route(&p, 0, 100, &views), 1);
    }

    #[test]
    fn prefix_aware_empty_caches_degenerates_to_fallback() {
        let p = RoutingPolicy {
            kind: PolicyKind::PrefixCacheAware,
            prefix_threshold: 0.5,
            fallback: PolicyKind::LeastRequest,
            seed: 7,
        };
        let fb = RoutingPolicy {
            kind: PolicyKind::LeastRequest,
            ..p.clone()
        };
        let mut views = vec![view(0), view(1), view(2)];
        views[0].admitted_count = 4;
        views[2].admitted_count = 1;
        assert_eq!(route(&p, 0, 100, &views), route(&fb, 0, 100, &views));
    }

    #[test]
    fn prefix_aware_overload_guard_falls_back() {
        let p = RoutingPolicy {
            kind: PolicyKind::PrefixCacheAware,
            prefix_threshold: 0.5,
            fallback: PolicyKind::LeastRequest,
            seed: 0,
        };
        let mut views = vec![view(0), view(1), view(2)];
        views[0].cache_match_tokens = 100;
        views[0].queue_depth = 9;
        views[1].queue_depth = 2;
        views[2].queue_depth = 2;
        // median 2, 9 > 4: overloaded, fall back to least-request
        views[0].admitted_count = 9;
        assert_eq!(route(&p, 0, 100, &views), 1);
    }

    #[test]
    fn random_is_seed_deterministic_and_in_range() {
        let p = RoutingPolicy {
            kind: PolicyKind::Random,
            seed: 42,
            ..Default::default()
        };
        let views = vec![view(0), view(1), view(2), view(3)];
        for id in 0..100 {
            let a = route(&p, id, 10, &views);
            let b = route(&p, id, 10, &views);
            assert_eq!(a, b);
            assert!(views.iter().any(|v| v.id == a));
        }
        // different seeds disagree somewhere
        let p2 = RoutingPolicy { seed: 43, ..p };
        assert!((0..100).any(|id| route(&p, id, 10, &views) != route(&p2, id, 10, &views)));
    }

    #[test]
    fn policies_match_naive_full_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let n = rng.random_range(1..8usize);
            let views: Vec<CandidateView> = (0..n)
                .map(|i| CandidateView {
                    id: i as u32 * 2, // non-contiguous ids
                    queue_depth: rng.random_range(0..10),
                    tokens_per_sec: rng.random_range(0..100) as f64,
                    admitted_count: rng.random_range(0..10),
                    kv_utilization: rng.random_range(0..100) as f64 / 100.0,
                    avg_latency: rng.random_range(0..50) as f64 / 10.0,
                    cache_match_tokens: rng.random_range(0..129),
                })
                .collect();
            let prompt_len = 128;
            let req_id = rng.random();
            for kind in [
                PolicyKind::Random,
                PolicyKind::Throughput,
                PolicyKind::LeastRequest,
                PolicyKind::LeastKvCache,
                PolicyKind::LeastLatency,
                PolicyKind::PrefixCacheAware,
            ] {
                let p = RoutingPolicy {
                    kind,
                    prefix_threshold: 0.5,
                    fallback: PolicyKind::LeastRequest,
                    seed: 5,
                };
                let got = route(&p, req_id, prompt_len, &views);
                let want = oracle_route(&p, req_id, prompt_len, &views);
                assert_eq!(got, want, "{kind:?} diverged from oracle on {views:?}");
            }
        }
    }

    /// Independent full-scan reference used by the routing tests.
    pub(crate) fn oracle_route(
        p: &RoutingPolicy,
        req_id: u64,
        prompt_len: u64,
        views: &[CandidateView],
    ) -> u32 {
        fn scan_min(views: &[CandidateView], key: impl Fn(&CandidateView) -> f64) -> u32 {
            let mut best = &views[0];
            for v in &views[1..] {
                if key(v) < key(best) || (key(v) == key(best) && v.id < best.id) {
                    best = v;
                }
            }
            best.id
        }
        match p.kind {
            PolicyKind::Random => {
                views[splitmix64(p.seed ^ splitmix64(req_id)) as usize % views.len()].id
            }
            PolicyKind::Throughput => scan_min(views, |v| v.tokens_per_sec),
            PolicyKind::LeastRequest => scan_min(views, |v| v.admitted_count as f64),
            PolicyKind::LeastKvCache => scan_min(views, |v| v.kv_utilization),
            PolicyKind::LeastLatency => scan_min(views, |v| v.avg_latency),
            PolicyKind::PrefixCacheAware => {
                let mut best = &views[0];
                for v in &views[1..] {
                    if v.cache_match_tokens > best.cache_match_tokens {
                        best = v;
                    }
                }
                let ratio = best.cache_match_tokens as f64 / prompt_len as f64;
                let mut depths: Vec<u32> = views.iter().map(|v| v.queue_depth).collect();
                depths.sort_unstable();
                let median = if depths.len() % 2 == 1 {
                    depths[depths.len() / 2] as f64
                } else {
                    (depths[depths.len() / 2 - 1] + depths[depths.len() / 2]) as f64 / 2.0
                };
                if ratio >= p.prefix_threshold && best.queue_depth as f64 <= 2.0 * median {
                    best.id
                } else {
                    let fb = RoutingPolicy {
                        kind: p.fallback,
                        ..p.clone()
                    };
                    oracle_route(&fb, req_id, prompt_len, views)
                }
            }
        }
    }

    #[test]
    fn candidates_filter_adapter_health_and_model() {
        use crate::cluster::{Fleet, Health};
        let mut fleet = Fleet::new(crate::cluster::default_profiles());
        for _ in 0..4 {
            fleet.spawn("A10", "base", 0, 16, 0.0, 0.0).unwrap();
        }
        // adapter "x" served by instances 1 and 3
        fleet.get_mut(1).unwrap().adapters.insert("x".into());
        fleet.get_mut(3).unwrap().adapters.insert("x".into());

        let mut req = req(0, 10, 1);
        req.adapter = Some("x".into());
        assert_eq!(candidates(&fleet, &req), vec![1, 3]);

        req.adapter = None;
        assert_eq!(candidates(&fleet, &req), vec![0, 1, 2, 3]);

        // starting and failed instances receive no traffic
        fleet.get_mut(0).unwrap().health = Health::Starting;
        fleet.get_mut(2).unwrap().health = Health::Failed;
        assert_eq!(candidates(&fleet, &req), vec![1, 3]);
        for id in [1, 3] {
            fleet.get_mut(id).unwrap().health = Health::Failed;
        }
        assert!(candidates(&fleet, &req).is_empty());

        // model mismatch filters too
        let mut other = Fleet::new(crate::cluster::default_profiles());
        other.spawn("A10", "other-model", 0, 16, 0.0, 0.0).unwrap();
        assert!(candidates(&other, &req).is_empty());
    }

    #[test]
    fn record_outcome_averages() {
        let mut s = InstanceStats::new(30.0);
        s.record_outcome(1.0, 1.0, 10, 0.0);
        assert_eq!(s.avg_latency(0.0), 2.0);
        s.record_outcome(0.5, 0.5, 10, 1.0);
        assert_eq!(s.avg_latency(1.0), 1.5);
    }

    #[test]
    fn stats_expiry_matches_recompute_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let window = 10.0;
        let mut s = InstanceStats::new(window);
        let mut raw: Vec<(f64, f64, u64)> = Vec::new(); // (ts, latency, tokens)
        let mut now = 0.0;
        for _ in 0..500 {
            now += rng.random_range(0.0..1.0);
            let lat = rng.random_range(0.0..5.0);
            let toks = rng.random_range(1..200u64);
            s.record_outcome(lat, 0.0, toks, now);
            s.record_admission(now);
            raw.push((now, lat, toks));

            let cutoff = now - window;
            let live: Vec<_> = raw.iter().filter(|(t, _, _)| *t >= cutoff).collect();
            let want_avg = if live.is_empty() {
                0.0
            } else {
                live.iter().map(|(_, l, _)| l).sum::<f64>() / live.len() as f64
            };
            let want_tput = live.iter().map(|(_, _, n)| *n as f64).sum::<f64>() / window;
            assert_eq!(s.avg_latency(now), want_avg);
            assert_eq!(s.throughput(now), want_tput);
            assert_eq!(s.admitted_count(now), live.len() as u64);
        }
    }
}
