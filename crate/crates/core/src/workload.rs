//! Trace ingestion and synthetic workload generation.
//!
//! Traces are JSON Lines with two profiles: explicit token ids
//! (`{"ts": 0.0, "model": "m", "tokens": [1,2,3], "out": 8}`) or
//! length pairs (`{"ts": 0.0, "model": "m", "in": 200, "out": 100}`)
//! expanded to token ids by a seeded synthesizer. Public traces ship
//! lengths, not tokens, so the second profile is the common one.
//!
//! Synthetic workloads model multi-turn sessions: turn k's prompt is the
//! full prompt plus output of turn k−1 with fresh tokens appended, the
//! accumulation pattern that makes prefix reuse matter.

use std::io::BufRead;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;

pub const DEFAULT_VOCAB_SIZE: u32 = 32_000;

/// Session identity attached to synthesized requests, used by fixtures and
/// tests to check prefix accumulation; absent for loaded traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTag {
    pub session: u64,
    pub turn: u32,
}

/// One inference call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    /// Arrival time on the simulated clock, seconds.
    pub arrival: f64,
    pub model: String,
    pub adapter: Option<String>,
    /// Prompt token ids; never empty.
    pub prompt: Vec<u32>,
    /// Number of output tokens to decode; at least 1.
    pub output_len: u32,
    pub slo_ttft: Option<f64>,
    pub slo_e2e: Option<f64>,
    pub session: Option<SessionTag>,
}

impl Request {
    pub fn prompt_len(&self) -> u32 {
        self.prompt.len() as u32
    }

    /// Worst-case token footprint: full prompt plus maximum output.
    pub fn total_tokens(&self) -> u32 {
        self.prompt_len() + self.output_len
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub source: String,
    pub vocab_size: u32,
    /// Set when the input file was not sorted by arrival and got reordered.
    pub reordered: bool,
    /// Nominal trace duration in seconds; falls back to the last arrival.
    pub duration: Option<f64>,
}

/// A time-ordered sequence of requests.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RequestTrace {
    pub requests: Vec<Request>,
    pub metadata: TraceMetadata,
}

impl RequestTrace {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Trace span in seconds: explicit metadata duration, or the last arrival.
    pub fn duration(&self) -> f64 {
        self.metadata
            .duration
            .unwrap_or_else(|| self.requests.last().map(|r| r.arrival).unwrap_or(0.0))
    }
}

/// On-disk trace profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceFormat {
    /// Records carry explicit `tokens` arrays.
    JsonlTokens,
    /// Records carry `in`/`out` lengths; token ids are synthesized.
    JsonlLengths,
}

#[derive(Debug, Deserialize)]
struct TraceRecord {
    ts: f64,
    model: String,
    #[serde(default)]
    adapter: Option<String>,
    #[serde(default)]
    tokens: Option<Vec<u32>>,
    #[serde(default, rename = "in")]
    in_len: Option<u32>,
    out: u32,
    #[serde(default)]
    slo_ttft: Option<f64>,
    #[serde(default)]
    slo_e2e: Option<f64>,
}

/// Load a JSONL trace. In [`TraceFormat::JsonlLengths`] mode, `seed` drives
/// the token synthesizer; the same file and seed always yield the same token
/// ids. Unsorted arrivals are reordered (stably) and flagged in metadata.
pub fn load_trace(path: &Path, format: TraceFormat, seed: u64) -> Result<RequestTrace, SimError> {
    let file = std::fs::File::open(path).map_err(|e| SimError::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);

    let mut requests = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| SimError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| SimError::TraceParse {
            line: lineno,
            message: e.to_string(),
        })?;
        let prompt = match format {
            TraceFormat::JsonlTokens => rec.tokens.ok_or_else(|| SimError::TraceParse {
                line: lineno,
                message: "tokens field required in jsonl-tokens mode".into(),
            })?,
            TraceFormat::JsonlLengths => {
                let in_len = rec.in_len.ok_or_else(|| SimError::TraceParse {
                    line: lineno,
                    message: "in field required in jsonl-lengths mode".into(),
                })?;
                synthesize_tokens(seed, idx as u64, in_len, DEFAULT_VOCAB_SIZE)
            }
        };
        if prompt.is_empty() {
            return Err(SimError::TraceParse {
                line: lineno,
                message: "zero-length prompt".into(),
            });
        }
        if rec.out == 0 {
            return Err(SimError::TraceParse {
                line: lineno,
                message: "out must be >= 1".into(),
            });
        }
        if rec.ts < 0.0 || !rec.ts.is_finite() {
            return Err(SimError::TraceParse {
                line: lineno,
                message: format!("bad arrival ts {}", rec.ts),
            });
        }
        requests.push(Request {
            id: 0, // assigned after ordering
            arrival: rec.ts,
            model: rec.model,
            adapter: rec.adapter,
            prompt,
            output_len: rec.out,
            slo_ttft: rec.slo_ttft,
            slo_e2e: rec.slo_e2e,
            session: None,
        });
    }

    let sorted = requests.windows(2).all(|w| w[0].arrival <= w[1].arrival);
    if !sorted {
        requests.sort_by(|a, b| a.arrival.total_cmp(&b.arrival)); // stable for ties
    }
    for (i, r) in requests.iter_mut().enumerate() {
        r.id = i as u64;
    }

    Ok(RequestTrace {
        requests,
        metadata: TraceMetadata {
            source: path.display().to_string(),
            vocab_size: DEFAULT_VOCAB_SIZE,
            reordered: !sorted,
            duration: None,
        },
    })
}

/// Deterministic token expansion for lengths-mode records.
fn synthesize_tokens(seed: u64, record_index: u64, len: u32, vocab: u32) -> Vec<u32> {
    let mut state = splitmix64(seed ^ record_index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..len)
        .map(|_| {
            state = splitmix64(state);
            (state % vocab as u64) as u32
        })
        .collect()
}

/// SplitMix64 mix step; also used for stateless seeded choices elsewhere.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Token-length distribution for synthetic workloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LengthDist {
    Fixed { value: u32 },
    Uniform { min: u32, max: u32 },
    LogNormal { mean: f64, sigma: f64 },
}

impl LengthDist {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        match self {
            LengthDist::Fixed { value } => (*value).max(1),
            LengthDist::Uniform { min, max } => rng.random_range(*min..=*max).max(1),
            LengthDist::LogNormal { mean, sigma } => {
                let d = LogNormal::new(mean.ln(), *sigma).expect("valid lognormal");
                (d.sample(rng).round() as u32).max(1)
            }
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match self {
            LengthDist::Fixed { value } if *value == 0 => {
                Err(SimError::config("fixed length must be >= 1"))
            }
            LengthDist::Uniform { min, max } if min > max => {
                Err(SimError::config("uniform length: min > max"))
            }
            LengthDist::LogNormal { mean, sigma } if *mean <= 0.0 || *sigma < 0.0 => {
                Err(SimError::config("lognormal length: mean > 0, sigma >= 0 required"))
            }
            _ => Ok(()),
        }
    }
}

/// Parameters for [`synth_trace`].
///
/// `session_count` is the number of concurrently active sessions; when a
/// session finishes its `turns_per_session` turns it is replaced by a fresh
/// one, so traces of any length keep that many conversation streams going.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Poisson arrival rate, requests/second.
    pub rate: f64,
    /// Trace span, seconds.
    pub duration: f64,
    pub session_count: usize,
    pub turns_per_session: u32,
    /// Tokens of a prefix shared by every session's first turn (system
    /// prompt / schema context).
    pub shared_prefix_len: u32,
    /// Fresh prompt tokens added per turn.
    pub in_dist: LengthDist,
    pub out_dist: LengthDist,
    #[serde(default = "default_model")]
    pub model: String,
    /// Optional adapters; each session draws one uniformly at creation.
    #[serde(default)]
    pub adapter_pool: Vec<String>,
    pub seed: u64,
}

fn default_model() -> String {
    "base".to_string()
}

struct SessionState {
    id: u64,
    turn: u32,
    /// Prompt + output accumulated so far; the next turn's prefix.
    history: Vec<u32>,
    adapter: Option<String>,
}

/// Generate a synthetic multi-turn trace. Pure function of the spec: the
/// same spec (including seed) always yields a byte-identical trace.
pub fn synth_trace(spec: &SynthSpec) -> Result<RequestTrace, SimError> {
    if spec.rate <= 0.0 || !spec.rate.is_finite() {
        return Err(SimError::config("synth rate must be > 0"));
    }
    if spec.duration <= 0.0 || !spec.duration.is_finite() {
        return Err(SimError::config("synth duration must be > 0"));
    }
    if spec.session_count == 0 {
        return Err(SimError::config("session_count must be >= 1"));
    }
    if spec.turns_per_session == 0 {
        return Err(SimError::config("turns_per_session must be >= 1"));
    }
    spec.in_dist.validate()?;
    spec.out_dist.validate()?;

    let vocab = DEFAULT_VOCAB_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shared_prefix: Vec<u32> = (0..spec.shared_prefix_len)
        .map(|_| rng.random_range(0..vocab))
        .collect();

    let mut next_session_id = 0u64;
    let mut new_session = |rng: &mut ChaCha8Rng| {
        let id = next_session_id;
        next_session_id += 1;
        let adapter = if spec.adapter_pool.is_empty() {
            None
        } else {
            Some(spec.adapter_pool[rng.random_range(0..spec.adapter_pool.len())].clone())
        };
        SessionState {
            id,
            turn: 0,
            history: shared_prefix.clone(),
            adapter,
        }
    };

    let mut sessions: Vec<SessionState> = Vec::with_capacity(spec.session_count);
    for _ in 0..spec.session_count {
        let s = new_session(&mut rng);
        sessions.push(s);
    }

    let exp = rand_distr::Exp::new(spec.rate).expect("rate > 0");
    let mut requests = Vec::new();
    let mut now = 0.0f64;
    let mut next_id = 0u64;
    loop {
        now += exp.sample(&mut rng);
        if now > spec.duration {
            break;
        }
        let idx = rng.random_range(0..sessions.len());
        let fresh = spec.in_dist.sample(&mut rng);
        let mut prompt = sessions[idx].history.clone();
        prompt.extend((0..fresh).map(|_| rng.random_range(0..vocab)));
        let output_len = spec.out_dist.sample(&mut rng);

        requests.push(Request {
            id: next_id,
            arrival: now,
            model: spec.model.clone(),
            adapter: sessions[idx].adapter.clone(),
            prompt: prompt.clone(),
            output_len,
            slo_ttft: None,
            slo_e2e: None,
            session: Some(SessionTag {
                session: sessions[idx].id,
                turn: sessions[idx].turn,
            }),
        });
        next_id += 1;

        let s = &mut sessions[idx];
        s.history = prompt;
        s.history
            .extend((0..output_len).map(|_| rng.random_range(0..vocab)));
        s.turn += 1;
        if s.turn >= spec.turns_per_session {
            sessions[idx] = new_session(&mut rng);
        }
    }

    Ok(RequestTrace {
        requests,
        metadata: TraceMetadata {
            source: "synth".into(),
            vocab_size: vocab,
            reordered: false,
            duration: Some(spec.duration),
        },
    })
}

/// Ascending finite upper bounds; the final bucket is implicitly unbounded.
/// `[200, 1000]` means three buckets: `[0,200)`, `[200,1000)`, `[1000,∞)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketEdges(pub Vec<u32>);

impl BucketEdges {
    pub fn validate(&self) -> Result<(), SimError> {
        if !self.0.windows(2).all(|w| w[0] < w[1]) {
            return Err(SimError::config("bucket edges must be strictly ascending"));
        }
        if self.0.first().is_some_and(|&e| e == 0) {
            return Err(SimError::config("bucket edge 0 would create an empty bucket"));
        }
        Ok(())
    }

    pub fn bucket_count(&self) -> usize {
        self.0.len() + 1
    }

    pub fn bucket_of(&self, len: u32) -> usize {
        self.0
            .iter()
            .position(|&edge| len < edge)
            .unwrap_or(self.0.len())
    }

    /// Closed-open bounds of bucket `i`; `None` upper bound means unbounded.
    pub fn bounds(&self, i: usize) -> (u32, Option<u32>) {
        let lo = if i == 0 { 0 } else { self.0[i - 1] };
        let hi = self.0.get(i).copied();
        (lo, hi)
    }
}

/// Request rates per (input-bucket, output-bucket) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadHistogram {
    pub edges_in: BucketEdges,
    pub edges_out: BucketEdges,
    /// Request counts per cell; counts sum to the trace length exactly.
    pub counts: Vec<Vec<u64>>,
    /// Requests/second per cell: count / duration.
    pub rates: Vec<Vec<f64>>,
    pub duration: f64,
}

impl WorkloadHistogram {
    pub fn zero(edges_in: BucketEdges, edges_out: BucketEdges) -> Self {
        let counts = vec![vec![0u64; edges_out.bucket_count()]; edges_in.bucket_count()];
        let rates = vec![vec![0.0; edges_out.bucket_count()]; edges_in.bucket_count()];
        WorkloadHistogram {
            edges_in,
            edges_out,
            counts,
            rates,
            duration: 0.0,
        }
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().flatten().sum()
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Non-zero demand cells as ((in_bucket, out_bucket), rate).
    pub fn demands(&self) -> Vec<((usize, usize), f64)> {
        let mut out = Vec::new();
        for (i, row) in self.rates.iter().enumerate() {
            for (j, &r) in row.iter().enumerate() {
                if r > 0.0 {
                    out.push(((i, j), r));
                }
            }
        }
        out
    }
}

/// Partition a trace into (input, output) length buckets and convert counts
/// to rates over the trace duration.
pub fn bucketize(
    trace: &RequestTrace,
    edges_in: &BucketEdges,
    edges_out: &BucketEdges,
) -> Result<WorkloadHistogram, SimError> {
    edges_in.validate()?;
    edges_out.validate()?;
    let mut hist = WorkloadHistogram::zero(edges_in.clone(), edges_out.clone());
    hist.duration = trace.duration();
    let denom = if hist.duration > 0.0 { hist.duration } else { 1.0 };
    for r in &trace.requests {
        let i = edges_in.bucket_of(r.prompt_len());
        let j = edges_out.bucket_of(r.output_len);
        hist.counts[i][j] += 1;
    }
    for (i, row) in hist.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            hist.rates[i][j] = c as f64 / denom;
        }
    }
    Ok(hist)
}
