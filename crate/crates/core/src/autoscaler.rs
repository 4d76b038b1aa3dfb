//! Sliding-window metric aggregation and replica-count algorithms.
//!
//! Three algorithms drive scaling: plain HPA (ratio with a tolerance band),
//! KPA (Knative-style stable window + panic window with no scale-down while
//! panicking), and APA (fluctuation-band scaling; the upstream formulation
//! is not public, so this band-threshold version is an explicit stand-in).
//! The GPU optimizer can override all of them with per-type replica targets
//! via [`external_plan_desired`].
//!
//! Scale-ups pay a provisioning delay (`cold_start`); scale-downs remove
//! idle instances first and drain the rest.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Timestamped ring of samples supporting sliding-window aggregation.
#[derive(Debug, Clone, Default)]
pub struct MetricWindow {
    samples: VecDeque<(f64, f64)>,
    span: f64,
}

impl MetricWindow {
    pub fn new(span: f64) -> Self {
        MetricWindow {
            samples: VecDeque::new(),
            span,
        }
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn push(&mut self, now: f64, value: f64) {
        self.samples.push_back((now, value));
        let cutoff = now - self.span;
        while self.samples.front().is_some_and(|&(t, _)| t < cutoff) {
            self.samples.pop_front();
        }
    }

    /// Arithmetic mean of in-span samples; 0 when none.
    pub fn aggregate(&self, now: f64) -> f64 {
        let cutoff = now - self.span;
        let (mut sum, mut n) = (0.0f64, 0u64);
        for &(_, v) in self.samples.iter().filter(|&&(t, _)| t >= cutoff) {
            sum += v;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalerAlgorithm {
    Hpa,
    Kpa,
    Apa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMetric {
    /// In-flight requests per ready instance.
    Concurrency,
    /// KV memory fraction in use.
    KvUtilization,
    /// Completed tokens/second.
    TokensPerSec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalerConfig {
    pub algorithm: ScalerAlgorithm,
    /// Per-instance metric target.
    pub target: f64,
    pub metric: ScalingMetric,
    pub hpa_tolerance: f64,
    pub kpa_stable_span: f64,
    pub kpa_panic_span: f64,
    pub kpa_panic_threshold: f64,
    pub apa_up_fluctuation: f64,
    pub apa_down_fluctuation: f64,
    pub min_replicas: u32,
    pub max_replicas: u32,
    pub sync_period: f64,
    /// Provisioning delay for new instances, seconds.
    pub cold_start: f64,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            algorithm: ScalerAlgorithm::Kpa,
            target: 4.0,
            metric: ScalingMetric::Concurrency,
            hpa_tolerance: 0.1,
            kpa_stable_span: 60.0,
            kpa_panic_span: 6.0,
            kpa_panic_threshold: 2.0,
            apa_up_fluctuation: 0.1,
            apa_down_fluctuation: 0.2,
            min_replicas: 1,
            max_replicas: 10,
            sync_period: 15.0,
            cold_start: 150.0,
        }
    }
}

impl ScalerConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.target <= 0.0 {
            return Err(SimError::config("scaler target must be > 0"));
        }
        if self.kpa_stable_span <= 0.0 || self.kpa_panic_span <= 0.0 {
            return Err(SimError::config("scaler window spans must be > 0"));
        }
        if self.kpa_panic_span > self.kpa_stable_span {
            return Err(SimError::config("kpa_panic_span must be <= kpa_stable_span"));
        }
        if self.apa_up_fluctuation < 0.0 || self.apa_down_fluctuation <= 0.0 {
            return Err(SimError::config("apa fluctuation tolerances must be positive"));
        }
        if self.min_replicas > self.max_replicas {
            return Err(SimError::config("min_replicas must be <= max_replicas"));
        }
        if self.sync_period <= 0.0 {
            return Err(SimError::config("sync_period must be > 0"));
        }
        if self.cold_start < 0.0 {
            return Err(SimError::config("cold_start must be >= 0"));
        }
        Ok(())
    }
}

/// Mutable scaling state carried between sync ticks.
#[derive(Debug, Clone, Default)]
pub struct ScalerState {
    /// Ready + starting replicas, maintained by reconcile.
    pub current_replicas: u32,
    pub panic_mode: bool,
    /// Replica high-watermark during the current panic.
    pub panic_max: u32,
    /// Last time the panic trigger condition held.
    pub last_panic_trigger: f64,
}

/// HPA: scale by the metric/target ratio unless it sits inside the
/// tolerance band.
pub fn hpa_desired(
    current: u32,
    metric_value: f64,
    target: f64,
    tolerance: f64,
    min: u32,
    max: u32,
) -> u32 {
    debug_assert!(current >= 1 && target > 0.0);
    let ratio = metric_value / target;
    if (ratio - 1.0).abs() <= tolerance {
        return current.clamp(min, max);
    }
    ((current as f64 * ratio).ceil() as u32).clamp(min, max)
}

/// KPA: desired replicas from the stable and panic window aggregates.
/// Enters panic when the panic-window demand reaches `panic_threshold`
/// times the ready replicas; while panicking it never scales down, and it
/// exits only after a full stable span without the trigger condition.
#[allow(clippy::too_many_arguments)]
pub fn kpa_desired(
    stable_value: f64,
    panic_value: f64,
    ready: u32,
    state: &mut ScalerState,
    target: f64,
    panic_threshold: f64,
    stable_span: f64,
    now: f64,
    min: u32,
    max: u32,
) -> (u32, bool) {
    debug_assert!(target > 0.0);
    let stable_desired = (stable_value / target).ceil() as u32;
    let panic_desired = (panic_value / target).ceil() as u32;

    let trigger = panic_desired >= 1 && panic_desired as f64 >= panic_threshold * ready as f64;
    if trigger {
        if !state.panic_mode {
            state.panic_mode = true;
            state.panic_max = 0;
        }
        state.last_panic_trigger = now;
    } else if state.panic_mode && now - state.last_panic_trigger >= stable_span {
        state.panic_mode = false;
        state.panic_max = 0;
    }

    let desired = if state.panic_mode {
        let d = panic_desired.max(state.panic_max).max(state.current_replicas);
        state.panic_max = d;
        d
    } else {
        stable_desired
    };
    (desired.clamp(min, max), state.panic_mode)
}

/// APA: scale by the ratio only when it leaves the fluctuation band.
pub fn apa_desired(
    current: u32,
    metric_value: f64,
    target: f64,
    up_fluctuation: f64,
    down_fluctuation: f64,
    min: u32,
    max: u32,
) -> u32 {
    debug_assert!(target > 0.0);
    let ratio = metric_value / target;
    let desired = if ratio >= 1.0 + up_fluctuation || ratio <= 1.0 - down_fluctuation {
        (current as f64 * ratio).ceil() as u32
    } else {
        current
    };
    desired.clamp(min, max)
}

/// Load summary for scale-down victim selection.
#[derive(Debug, Clone, Copy)]
pub struct InstanceLoad {
    pub id: u32,
    pub running: u32,
    pub queued: u32,
}

impl InstanceLoad {
    pub fn is_idle(&self) -> bool {
        self.running == 0 && self.queued == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScaleAction {
    /// Spawn one instance; ready after the cold start elapses.
    Start,
    /// Retire an idle instance immediately.
    Remove { instance: u32 },
    /// Stop routing to a busy instance; it retires once drained.
    Drain { instance: u32 },
}

/// Diff current against desired. Scale-down removes idle instances first
/// (fewest running requests, newest id on ties) and drains the rest.
pub fn reconcile(current: u32, desired: u32, live: &[InstanceLoad]) -> Vec<ScaleAction> {
    use std::cmp::Reverse;
    let mut actions = Vec::new();
    if desired > current {
        for _ in 0..(desired - current) {
            actions.push(ScaleAction::Start);
        }
    } else if desired < current {
        let mut victims: Vec<&InstanceLoad> = live.iter().collect();
        victims.sort_by_key(|l| (l.running, Reverse(l.id)));
        for victim in victims.into_iter().take((current - desired) as usize) {
            if victim.is_idle() {
                actions.push(ScaleAction::Remove {
                    instance: victim.id,
                });
            } else {
                actions.push(ScaleAction::Drain {
                    instance: victim.id,
                });
            }
        }
    }
    actions
}

/// Per-GPU-type desired replicas from an optimizer plan, clamped to the
/// per-type bounds. Types absent from the plan fall to their minimum.
/// Returns the desired map plus whether any clamping happened.
pub fn external_plan_desired(
    plan_counts: &BTreeMap<String, u32>,
    bounds: &BTreeMap<String, (u32, u32)>,
) -> Result<(BTreeMap<String, u32>, bool), SimError> {
    for gpu_type in plan_counts.keys() {
        if !bounds.contains_key(gpu_type) {
            return Err(SimError::UnknownGpuType(gpu_type.clone()));
        }
    }
    let mut desired = BTreeMap::new();
    let mut clamped = false;
    for (gpu_type, &(min, max)) in bounds {
        let want = plan_counts.get(gpu_type).copied().unwrap_or(0);
        let clamp = want.clamp(min, max);
        clamped |= clamp != want;
        desired.insert(gpu_type.clone(), clamp);
    }
    Ok((desired, clamped))
}

/// Sign changes in the replica delta series; the oscillation measure used
/// to compare scalers.
pub fn oscillation_count(series: &[u32]) -> usize {
    let mut signs = series
        .windows(2)
        .map(|w| (w[1] as i64 - w[0] as i64).signum())
        .filter(|&s| s != 0);
    let mut count = 0;
    let Some(mut prev) = signs.next() else {
        return 0;
    };
    for s in signs {
        if s != prev {
            count += 1;
        }
        prev = s;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aggregate_mean_and_span() {
        let mut w = MetricWindow::new(10.0);
        w.push(0.0, 1.0);
        w.push(1.0, 2.0);
        w.push(2.0, 3.0);
        assert_eq!(w.aggregate(2.0), 2.0);
        // sample at t=0 ages out of [1, 11]
        assert_eq!(w.aggregate(11.0), 2.5);
        assert_eq!(MetricWindow::new(10.0).aggregate(0.0), 0.0);
    }

    #[test]
    fn aggregate_matches_naive_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let span = 7.0;
        let mut w = MetricWindow::new(span);
        let mut raw: Vec<(f64, f64)> = Vec::new();
        let mut now = 0.0;
        for _ in 0..2_000 {
            now += rng.random_range(0.0..1.0);
            let v = rng.random_range(-10.0..10.0);
            w.push(now, v);
            raw.push((now, v));
            let live: Vec<f64> = raw
                .iter()
                .filter(|&&(t, _)| t >= now - span)
                .map(|&(_, v)| v)
                .collect();
            let want = if live.is_empty() {
                0.0
            } else {
                live.iter().sum::<f64>() / live.len() as f64
            };
            assert_eq!(w.aggregate(now), want, "exact equality required");
        }
    }

    #[test]
    fn hpa_examples() {
        assert_eq!(hpa_desired(4, 10.0, 5.0, 0.1, 1, 100), 8);
        assert_eq!(hpa_desired(4, 5.25, 5.0, 0.1, 1, 100), 4); // ratio 1.05 in band
        assert_eq!(hpa_desired(4, 0.0, 5.0, 0.1, 2, 100), 2); // metric 0 -> min
    }

    #[test]
    fn kpa_examples() {
        let cfg = ScalerConfig::default();
        let mut state = ScalerState {
            current_replicas: 3,
            ..Default::default()
        };
        // no panic: stable 30 / target 10 -> 3
        let (d, panic) = kpa_desired(
            30.0, 10.0, 3, &mut state, 10.0, cfg.kpa_panic_threshold, 60.0, 0.0, 1, 100,
        );
        assert_eq!((d, panic), (3, false));

        // ready 2, panic demand 50/10=5 >= 2*2 -> panic, replicas 5
        let mut state = ScalerState {
            current_replicas: 2,
            ..Default::default()
        };
        let (d, panic) = kpa_desired(30.0, 50.0, 2, &mut state, 10.0, 2.0, 60.0, 0.0, 1, 100);
        assert_eq!((d, panic), (5, true));

        // demand falls to 1: hold at panic_max while still in panic
        state.current_replicas = 5;
        let (d, panic) = kpa_desired(10.0, 10.0, 5, &mut state, 10.0, 2.0, 60.0, 10.0, 1, 100);
        assert!(panic);
        assert_eq!(d, 5, "no scale-down during panic");

        // a full stable span without the trigger exits panic
        let (d, panic) = kpa_desired(10.0, 10.0, 5, &mut state, 10.0, 2.0, 60.0, 70.0, 1, 100);
        assert!(!panic);
        assert_eq!(d, 1, "stable desired after exit");
    }

    #[test]
    fn apa_examples() {
        // ratio 1.3 >= 1.1: scale up by ratio
        assert_eq!(apa_desired(4, 13.0, 10.0, 0.1, 0.2, 1, 100), 6); // ceil(5.2)
        // ratio 0.95 inside band
        assert_eq!(apa_desired(4, 9.5, 10.0, 0.1, 0.2, 1, 100), 4);
        // ratio 0.5 <= 0.8: scale down by ratio
        assert_eq!(apa_desired(4, 5.0, 10.0, 0.1, 0.2, 1, 100), 2);
    }

    #[test]
    fn reconcile_noop_up_and_idle_first() {
        let live = vec![
            InstanceLoad {
                id: 0,
                running: 2,
                queued: 1,
            },
            InstanceLoad {
                id: 1,
                running: 0,
                queued: 0,
            },
        ];
        assert!(reconcile(2, 2, &live).is_empty());
        assert_eq!(
            reconcile(2, 4, &live),
            vec![ScaleAction::Start, ScaleAction::Start]
        );
        // down by 1: the idle instance goes, not the busy one
        assert_eq!(
            reconcile(2, 1, &live),
            vec![ScaleAction::Remove { instance: 1 }]
        );
        // down by 2: busy instance drains
        assert_eq!(
            reconcile(2, 0, &live),
            vec![
                ScaleAction::Remove { instance: 1 },
                ScaleAction::Drain { instance: 0 }
            ]
        );
    }

    #[test]
    fn external_plan_passthrough_clamp_and_unknown() {
        let mut bounds = BTreeMap::new();
        bounds.insert("A10".to_string(), (1u32, 8u32));
        bounds.insert("L20".to_string(), (0u32, 4u32));

        let mut plan = BTreeMap::new();
        plan.insert("A10".to_string(), 3u32);
        plan.insert("L20".to_string(), 1u32);
        let (desired, clamped) = external_plan_desired(&plan, &bounds).unwrap();
        assert_eq!(desired["A10"], 3);
        assert_eq!(desired["L20"], 1);
        assert!(!clamped);

        // empty plan falls to per-type minimums
        let (desired, _) = external_plan_desired(&BTreeMap::new(), &bounds).unwrap();
        assert_eq!(desired["A10"], 1);
        assert_eq!(desired["L20"], 0);

        // exceeding max clamps and reports it
        let mut plan = BTreeMap::new();
        plan.insert("L20".to_string(), 9u32);
        let (desired, clamped) = external_plan_desired(&plan, &bounds).unwrap();
        assert_eq!(desired["L20"], 4);
        assert!(clamped);

        let mut plan = BTreeMap::new();
        plan.insert("H100".to_string(), 1u32);
        assert!(matches!(
            external_plan_desired(&plan, &bounds),
            Err(SimError::UnknownGpuType(_))
        ));
    }

    #[test]
    fn oscillation_counts_sign_changes() {
        assert_eq!(oscillation_count(&[1, 1, 1]), 0);
        assert_eq!(oscillation_count(&[1, 2, 3, 4]), 0);
        assert_eq!(oscillation_count(&[1, 2, 1, 2, 1]), 3);
        assert_eq!(oscillation_count(&[1, 2, 2, 3, 1]), 1);
        assert_eq!(oscillation_count(&[]), 0);
    }
}
