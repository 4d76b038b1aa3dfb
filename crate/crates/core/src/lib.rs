//! fleetsim: discrete-event simulator and policy library for LLM serving fleets.
//!
//! The crate models a fleet of GPU-backed inference instances behind an
//! LLM-aware gateway: requests arrive from a trace or a synthetic workload,
//! get admitted through per-tenant TPM/RPM rate control, routed by one of six
//! policies, served with prefix-cache-adjusted prefill and batch-dependent
//! decode, and scored with the usual serving metrics (TTFT, ITL, throughput,
//! completion time). On top of the per-instance caches sits a distributed KV
//! pool with scan-resistant eviction; replica counts are driven by HPA/KPA/APA
//! autoscalers or by an ILP-based GPU optimizer that picks the cheapest
//! heterogeneous GPU mix meeting an SLO.
//!
//! ```text
//! trace/synth ──▶ gateway (admit + route) ──▶ instances (prefill/decode)
//!                     │                            │        │
//!                     │ stats                local caches   KV pool
//!                     ▼                            │
//!              load monitor ──▶ GPU optimizer ──▶ autoscaler ──▶ fleet
//! ```
//!
//! Everything runs on a virtual clock inside [`simengine::Engine`]; scenario
//! runs are independent and can execute in parallel (see [`parallel`]).

pub mod autoscaler;
pub mod cluster;
pub mod config;
pub mod error;
pub mod gateway;
pub mod kvcache;
pub mod optimizer;
pub mod parallel;
pub mod simengine;
pub mod workload;

pub use config::ScenarioConfig;
pub use error::SimError;
pub use simengine::{Engine, MetricsReport};
pub use workload::{Request, RequestTrace};
