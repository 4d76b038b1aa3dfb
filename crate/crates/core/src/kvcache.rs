//! Block-granular prefix caches and the distributed KV pool.
//!
//! Token sequences are chunked into fixed-size blocks identified by a hash
//! chained through their ancestors, so equal prefixes produce equal key
//! chains and any token change invalidates everything after it. Each
//! instance owns a [`PrefixCache`] (LRU over chain tails); the fleet shares
//! one [`KvPool`] with a 2Q-style scan-resistant eviction policy: new blocks
//! sit in a probationary FIFO and only a second access promotes them into
//! the frequency-tracked main segment, so one-shot bulk scans cannot
//! displace hot entries.
//!
//! Every cache keeps prefix closure: a resident block implies its whole
//! parent chain is resident (within main for the pool's main segment, and
//! pool-wide across both segments). Evictions only take chain tails and
//! cascade over orphaned descendants.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::workload::splitmix64;

pub const DEFAULT_BLOCK_SIZE: usize = 16;

const CHAIN_SEED: u64 = 0x5157_3f1f_9c2a_8d31;

/// Identity of one token block within a hash chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockKey {
    /// 64-bit chained mix over (parent hash, block token ids).
    pub hash: u64,
    /// Block index within the chain, 0-based.
    pub depth: u32,
}

/// Chunk `tokens` into `block_size` blocks and key each one by a hash
/// chained through its parent. The trailing partial block produces no key.
///
/// The mix is splitmix64 folded over the parent hash and each token id:
/// `h := splitmix64(h ^ (token + 1))`, starting from the parent hash (or a
/// fixed chain seed for the first block). Collisions are treated as
/// impossible at simulation scale.
pub fn block_keys(tokens: &[u32], block_size: usize) -> Vec<BlockKey> {
    assert!(block_size >= 1, "block_size must be >= 1");
    let mut keys = Vec::with_capacity(tokens.len() / block_size);
    let mut parent = CHAIN_SEED;
    for (depth, block) in tokens.chunks_exact(block_size).enumerate() {
        let mut h = splitmix64(parent);
        for &tok in block {
            h = splitmix64(h ^ (tok as u64 + 1));
        }
        keys.push(BlockKey {
            hash: h,
            depth: depth as u32,
        });
        parent = h;
    }
    keys
}

/// Counters exported in run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hit_tokens: u64,
    pub insertions: u64,
    pub evictions: u64,
    pub occupancy_tokens: u64,
    pub capacity_tokens: u64,
}

#[derive(Debug, Clone)]
struct LocalEntry {
    parent: Option<u64>,
    touch_seq: u64,
    children: u32,
}

/// Per-instance prefix cache: plain LRU at chain-tail granularity. Only
/// blocks without resident children are evictable, so eviction peels chains
/// from the tail and closure is preserved by construction.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    block_size: usize,
    capacity_tokens: u64,
    blocks: HashMap<u64, LocalEntry>,
    seq: u64,
    evictions: u64,
    insertions: u64,
}

impl PrefixCache {
    pub fn new(capacity_tokens: u64, block_size: usize) -> Self {
        assert!(block_size >= 1);
        PrefixCache {
            block_size,
            capacity_tokens,
            blocks: HashMap::new(),
            seq: 0,
            evictions: 0,
            insertions: 0,
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn occupancy_tokens(&self) -> u64 {
        self.blocks.len() as u64 * self.block_size as u64
    }

    pub fn capacity_tokens(&self) -> u64 {
        self.capacity_tokens
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn contains(&self, key: &BlockKey) -> bool {
        self.blocks.contains_key(&key.hash)
    }

    /// Tokens covered by the longest leading run of resident blocks.
    pub fn match_prefix(&self, keys: &[BlockKey]) -> u64 {
        matched_tokens(keys, self.block_size, |k| self.blocks.contains_key(&k.hash))
    }

    /// Insert a key chain, touching blocks already present. Inserts the
    /// longest leading run that fits; stops early rather than evict blocks
    /// of the chain being inserted.
    pub fn insert_chain(&mut self, keys: &[BlockKey]) {
        let start_seq = self.seq;
        for (i, key) in keys.iter().enumerate() {
            self.seq += 1;
            if let Some(e) = self.blocks.get_mut(&key.hash) {
                e.touch_seq = self.seq;
                continue;
            }
            let parent = if i == 0 {
                None
            } else {
                Some(keys[i - 1].hash)
            };
            if let Some(p) = parent {
                if !self.blocks.contains_key(&p) {
                    break; // ancestor fell out; the rest of the chain cannot stay closed
                }
            }
            while self.occupancy_tokens() + self.block_size as u64 > self.capacity_tokens {
                match self.evict_tail(start_seq) {
                    true => {}
                    false => return, // nothing evictable outside the current chain
                }
            }
            if let Some(p) = parent {
                self.blocks.get_mut(&p).expect("parent present").children += 1;
            }
            self.insertions += 1;
            self.blocks.insert(
                key.hash,
                LocalEntry {
                    parent,
                    touch_seq: self.seq,
                    children: 0,
                },
            );
        }
    }

    /// Evict the least-recently-touched chain tail. Returns false when every
    /// tail was touched at or after `protect_seq` (i.e. belongs to the chain
    /// currently being inserted).
    fn evict_tail(&mut self, protect_seq: u64) -> bool {
        let victim = self
            .blocks
            .iter()
            .filter(|(_, e)| e.children == 0)
            .min_by_key(|(_, e)| e.touch_seq)
            .map(|(h, e)| (*h, e.touch_seq, e.parent));
        match victim {
            Some((hash, seq, parent)) if seq <= protect_seq => {
                self.blocks.remove(&hash);
                if let Some(p) = parent {
                    if let Some(pe) = self.blocks.get_mut(&p) {
                        pe.children -= 1;
                    }
                }
                self.evictions += 1;
                true
            }
            _ => false,
        }
    }

    /// Closure check: every resident block's parent is resident.
    pub fn is_prefix_closed(&self) -> bool {
        self.blocks
            .values()
            .all(|e| e.parent.is_none_or(|p| self.blocks.contains_key(&p)))
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            insertions: self.insertions,
            evictions: self.evictions,
            occupancy_tokens: self.occupancy_tokens(),
            capacity_tokens: self.capacity_tokens,
            ..Default::default()
        }
    }
}

fn matched_tokens(keys: &[BlockKey], block_size: usize, present: impl Fn(&BlockKey) -> bool) -> u64 {
    let run = keys.iter().take_while(|k| present(k)).count();
    run as u64 * block_size as u64
}

#[derive(Debug, Clone)]
struct MainEntry {
    parent: Option<u64>,
    access_count: u64,
    touch_seq: u64,
    insert_seq: u64,
    main_children: u32,
}

#[derive(Debug, Clone)]
struct ProbationEntry {
    parent: Option<u64>,
}

/// Segment a pool block lives in, for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolSegment {
    Probation,
    Main,
}

/// Pool eviction policy. 2Q (probationary FIFO + frequency-promoted main)
/// is the scan-resistant default; LRU and FIFO are comparison baselines
/// that admit everything straight into main.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EvictionPolicy {
    #[default]
    #[serde(rename = "2q")]
    TwoQ,
    #[serde(rename = "lru")]
    Lru,
    #[serde(rename = "fifo")]
    Fifo,
}

/// Counters for the pool, exported in run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub hit_tokens: u64,
    pub fetches: u64,
    pub insertions: u64,
    pub promotions: u64,
    pub probation_evictions: u64,
    pub main_evictions: u64,
    pub main_occupancy_tokens: u64,
    pub probation_occupancy_tokens: u64,
}

/// Distributed KV cache pool with 2Q-style scan-resistant eviction and a
/// modeled transfer cost (`rtt + tokens / bandwidth`).
#[derive(Debug, Clone)]
pub struct KvPool {
    block_size: usize,
    /// Main segment capacity, tokens.
    capacity_tokens: u64,
    probation_capacity_tokens: u64,
    /// Transfer bandwidth, tokens/second.
    bandwidth: f64,
    /// Per-fetch round trip, seconds.
    rtt: f64,
    main: HashMap<u64, MainEntry>,
    probation: HashMap<u64, ProbationEntry>,
    probation_fifo: VecDeque<u64>,
    /// parent hash -> probation children, for cascade eviction.
    probation_children: HashMap<u64, Vec<u64>>,
    seq: u64,
    policy: EvictionPolicy,
    stats: PoolStats,
}

impl KvPool {
    pub fn new(
        capacity_tokens: u64,
        probation_capacity_tokens: u64,
        bandwidth: f64,
        rtt: f64,
        block_size: usize,
    ) -> Self {
        Self::with_policy(
            capacity_tokens,
            probation_capacity_tokens,
            bandwidth,
            rtt,
            block_size,
            EvictionPolicy::TwoQ,
        )
    }

    pub fn with_policy(
        capacity_tokens: u64,
        probation_capacity_tokens: u64,
        bandwidth: f64,
        rtt: f64,
        block_size: usize,
        policy: EvictionPolicy,
    ) -> Self {
        assert!(block_size >= 1);
        assert!(bandwidth > 0.0, "bandwidth must be > 0");
        assert!(rtt >= 0.0);
        KvPool {
            block_size,
            capacity_tokens,
            probation_capacity_tokens,
            bandwidth,
            rtt,
            main: HashMap::new(),
            probation: HashMap::new(),
            probation_fifo: VecDeque::new(),
            probation_children: HashMap::new(),
            seq: 0,
            policy,
            stats: PoolStats::default(),
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn segment_of(&self, key: &BlockKey) -> Option<PoolSegment> {
        if self.main.contains_key(&key.hash) {
            Some(PoolSegment::Main)
        } else if self.probation.contains_key(&key.hash) {
            Some(PoolSegment::Probation)
        } else {
            None
        }
    }

    pub fn main_occupancy_tokens(&self) -> u64 {
        self.main.len() as u64 * self.block_size as u64
    }

    pub fn probation_occupancy_tokens(&self) -> u64 {
        self.probation.len() as u64 * self.block_size as u64
    }

    /// Hashes of main-segment blocks, for scan-resistance checks.
    pub fn main_hashes(&self) -> Vec<u64> {
        let mut v: Vec<u64> = self.main.keys().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn stats(&self) -> PoolStats {
        PoolStats {
            main_occupancy_tokens: self.main_occupancy_tokens(),
            probation_occupancy_tokens: self.probation_occupancy_tokens(),
            ..self.stats.clone()
        }
    }

    /// Tokens covered by the longest leading run present in either segment.
    pub fn match_prefix(&self, keys: &[BlockKey]) -> u64 {
        matched_tokens(keys, self.block_size, |k| {
            self.main.contains_key(&k.hash) || self.probation.contains_key(&k.hash)
        })
    }

    /// Fetch the chain's leading hit run. Returns the hit token count past
    /// `skip_blocks` (blocks already served locally) and the modeled
    /// transfer time. Hit blocks are touched; probation residents on their
    /// second access are promoted into main.
    pub fn fetch(&mut self, keys: &[BlockKey], skip_blocks: usize) -> (u64, f64) {
        self.stats.fetches += 1;
        let run = keys
            .iter()
            .take_while(|k| self.main.contains_key(&k.hash) || self.probation.contains_key(&k.hash))
            .count();
        let mut prefix_in_main = true;
        for key in &keys[..run] {
            self.touch_pool_block(key, &mut prefix_in_main);
        }
        let hit_blocks = run.saturating_sub(skip_blocks);
        let hit_tokens = hit_blocks as u64 * self.block_size as u64;
        self.stats.hit_tokens += hit_tokens;
        let transfer = if hit_tokens > 0 {
            self.rtt + hit_tokens as f64 / self.bandwidth
        } else {
            0.0
        };
        (hit_tokens, transfer)
    }

    /// Insert a key chain. Unseen keys enter probation; keys seen again
    /// while in probation are promoted to main (second access); main
    /// residents get their access count bumped.
    pub fn insert_chain(&mut self, keys: &[BlockKey]) {
        self.stats.insertions += 1;
        let mut prefix_in_main = true;
        for (i, key) in keys.iter().enumerate() {
            if self.main.contains_key(&key.hash) || self.probation.contains_key(&key.hash) {
                self.touch_pool_block(key, &mut prefix_in_main);
                continue;
            }
            let parent = if i == 0 {
                None
            } else {
                Some(keys[i - 1].hash)
            };
            if let Some(p) = parent {
                if !self.main.contains_key(&p) && !self.probation.contains_key(&p) {
                    break; // parent evicted mid-insert; tail cannot stay closed
                }
            }
            if self.policy != EvictionPolicy::TwoQ {
                // baseline policies admit directly into main
                self.admit_to_main(key.hash, parent, 1);
                continue;
            }
            prefix_in_main = false;
            if self.probation_capacity_tokens < self.block_size as u64 {
                break; // probation disabled: nothing new is admitted
            }
            self.probation.insert(key.hash, ProbationEntry { parent });
            self.probation_fifo.push_back(key.hash);
            if let Some(p) = parent {
                self.probation_children.entry(p).or_default().push(key.hash);
            }
            while self.probation_occupancy_tokens() > self.probation_capacity_tokens {
                self.evict_probation_oldest();
            }
        }
    }

    /// Bump an already-resident block: main residents count an access,
    /// probation residents reached for the second time are promoted into
    /// main when their whole parent chain is already there.
    fn touch_pool_block(&mut self, key: &BlockKey, prefix_in_main: &mut bool) {
        self.seq += 1;
        if let Some(e) = self.main.get_mut(&key.hash) {
            e.access_count += 1;
            e.touch_seq = self.seq;
            // main is prefix-closed, so the chain up to here is in main
            *prefix_in_main = true;
            return;
        }
        if self.probation.contains_key(&key.hash) {
            if *prefix_in_main {
                self.promote(key.hash);
            } else {
                *prefix_in_main = false;
            }
        }
    }

    fn promote(&mut self, hash: u64) {
        let entry = self.probation.remove(&hash).expect("probation resident");
        self.remove_probation_child_link(entry.parent, hash);
        // children links of this block now describe main->probation edges;
        // keep them so a later main eviction can cascade.
        self.stats.promotions += 1;
        self.admit_to_main(hash, entry.parent, 2);
    }

    fn admit_to_main(&mut self, hash: u64, parent: Option<u64>, access_count: u64) {
        self.seq += 1;
        if let Some(p) = parent {
            if let Some(pe) = self.main.get_mut(&p) {
                pe.main_children += 1;
            }
        }
        self.main.insert(
            hash,
            MainEntry {
                parent,
                access_count,
                touch_seq: self.seq,
                insert_seq: self.seq,
                main_children: 0,
            },
        );
        while self.main_occupancy_tokens() > self.capacity_tokens {
            if !self.evict_main_tail() {
                break;
            }
        }
    }

    /// FIFO eviction from probation, cascading over probation descendants
    /// so no orphan survives.
    fn evict_probation_oldest(&mut self) {
        while let Some(hash) = self.probation_fifo.pop_front() {
            if !self.probation.contains_key(&hash) {
                continue; // promoted or cascaded earlier
            }
            self.remove_probation_subtree(hash);
            return;
        }
    }

    fn remove_probation_subtree(&mut self, root: u64) {
        let mut stack = vec![root];
        while let Some(h) = stack.pop() {
            if let Some(e) = self.probation.remove(&h) {
                self.remove_probation_child_link(e.parent, h);
                self.stats.probation_evictions += 1;
                if let Some(children) = self.probation_children.remove(&h) {
                    stack.extend(children);
                }
            }
        }
    }

    fn remove_probation_child_link(&mut self, parent: Option<u64>, child: u64) {
        if let Some(p) = parent {
            if let Some(v) = self.probation_children.get_mut(&p) {
                v.retain(|&c| c != child);
                if v.is_empty() {
                    self.probation_children.remove(&p);
                }
            }
        }
    }

    /// Evict the coldest main chain tail. The 2Q policy orders victims by
    /// (access_count, last touch); the LRU baseline by last touch alone; the
    /// FIFO baseline by insertion order. Probation descendants of the victim
    /// are cascaded out.
    fn evict_main_tail(&mut self) -> bool {
        let policy = self.policy;
        let key = |e: &MainEntry| match policy {
            EvictionPolicy::TwoQ => (e.access_count, e.touch_seq),
            EvictionPolicy::Lru => (e.touch_seq, 0),
            EvictionPolicy::Fifo => (e.insert_seq, 0),
        };
        let victim = self
            .main
            .iter()
            .filter(|(_, e)| e.main_children == 0)
            .min_by_key(|(_, e)| key(e))
            .map(|(h, _)| *h);
        let Some(hash) = victim else {
            return false;
        };
        let entry = self.main.remove(&hash).expect("victim present");
        if let Some(p) = entry.parent {
            if let Some(pe) = self.main.get_mut(&p) {
                pe.main_children -= 1;
            }
        }
        self.stats.main_evictions += 1;
        if let Some(children) = self.probation_children.remove(&hash) {
            for c in children {
                self.remove_probation_subtree(c);
            }
        }
        true
    }

    /// Validator used by tests and the acceptance suite:
    /// - no key lives in both segments,
    /// - each segment respects its capacity,
    /// - every main block's parent is in main,
    /// - every pool block's parent is somewhere in the pool.
    pub fn validate_closure(&self) -> Result<(), String> {
        for h in self.main.keys() {
            if self.probation.contains_key(h) {
                return Err(format!("block {h:#x} in both segments"));
            }
        }
        if self.main_occupancy_tokens() > self.capacity_tokens {
            return Err("main over capacity".into());
        }
        if self.probation_occupancy_tokens() > self.probation_capacity_tokens {
            return Err("probation over capacity".into());
        }
        for (h, e) in &self.main {
            if let Some(p) = e.parent {
                if !self.main.contains_key(&p) {
                    return Err(format!("main block {h:#x} missing parent in main"));
                }
            }
        }
        for (h, e) in &self.probation {
            if let Some(p) = e.parent {
                if !self.main.contains_key(&p) && !self.probation.contains_key(&p) {
                    return Err(format!("probation block {h:#x} orphaned"));
                }
            }
        }
        Ok(())
    }
}

/// What one prefill cost after cache adjustment, in tokens and seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillOutcome {
    /// Tokens served from the instance-local prefix cache.
    pub local_hit: u64,
    /// Additional leading tokens served by the pool beyond the local hit.
    pub remote_hit: u64,
    /// Seconds spent pulling the remote hit (rtt + tokens/bandwidth).
    pub transfer_time: f64,
    /// Seconds of prefill compute for the residual tokens.
    pub compute_time: f64,
    /// Residual tokens actually computed (includes the trailing partial block).
    pub computed_tokens: u64,
}

/// Resolve a prompt against the local cache and the pool: how many leading
/// tokens are reusable, what the transfer costs, and what is left to
/// compute. Mutates only pool access metadata (fetch promotion).
pub fn plan_prefill(
    local: &PrefixCache,
    pool: Option<&mut KvPool>,
    keys: &[BlockKey],
    prompt_len: u64,
    prefill_rate: f64,
) -> PrefillOutcome {
    let local_hit = local.match_prefix(keys);
    let local_blocks = (local_hit / local.block_size() as u64) as usize;
    let (remote_hit, transfer_time) = match pool {
        // full-block-coverage by local cache short-circuits the pool
        Some(pool) if local_blocks < keys.len() => pool.fetch(keys, local_blocks),
        _ => (0, 0.0),
    };
    let computed_tokens = prompt_len - local_hit - remote_hit;
    PrefillOutcome {
        local_hit,
        remote_hit,
        transfer_time,
        compute_time: computed_tokens as f64 / prefill_rate,
        computed_tokens,
    }
}

/// Record a finished prefill: the full prompt's blocks now exist in the
/// local cache and the pool. Charged no latency (metadata updates are
/// modeled as asynchronous).
pub fn commit_prefill(local: &mut PrefixCache, pool: Option<&mut KvPool>, keys: &[BlockKey]) {
    local.insert_chain(keys);
    if let Some(pool) = pool {
        pool.insert_chain(keys);
    }
}

/// One-shot prefill: plan then commit. The discrete-event engine calls the
/// two phases at prefill start and completion instead.
pub fn apply_prefill(
    local: &mut PrefixCache,
    mut pool: Option<&mut KvPool>,
    prompt: &[u32],
    prefill_rate: f64,
) -> PrefillOutcome {
    let keys = block_keys(prompt, local.block_size());
    let outcome = plan_prefill(local, pool.as_deref_mut(), &keys, prompt.len() as u64, prefill_rate);
    commit_prefill(local, pool, &keys);
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn chain(tokens: &[u32]) -> Vec<BlockKey> {
        block_keys(tokens, 16)
    }

    #[test]
    fn block_keys_floor_division() {
        let toks: Vec<u32> = (0..33).collect();
        assert_eq!(chain(&toks).len(), 2);
        assert_eq!(block_keys(&toks, 33).len(), 1);
        assert_eq!(block_keys(&toks[..15], 16).len(), 0);
    }

    #[test]
    fn block_keys_deterministic_and_chain_sensitive() {
        let a: Vec<u32> = (0..64).collect();
        let mut b = a.clone();
        assert_eq!(chain(&a), chain(&b));
        b[0] = 999;
        let (ka, kb) = (chain(&a), chain(&b));
        for (x, y) in ka.iter().zip(&kb) {
            assert_ne!(x.hash, y.hash, "flipping token 0 must change every key");
        }
        // changing a later block keeps earlier keys
        let mut c = a.clone();
        c[40] = 999;
        let kc = chain(&c);
        assert_eq!(ka[0], kc[0]);
        assert_eq!(ka[1], kc[1]);
        assert_ne!(ka[2].hash, kc[2].hash);
    }

    #[test]
    fn match_prefix_empty_and_full() {
        let cache = PrefixCache::new(10_000, 16);
        let keys = chain(&(0..64).collect::<Vec<_>>());
        assert_eq!(cache.match_prefix(&keys), 0);
        let mut cache = cache;
        cache.insert_chain(&keys);
        assert_eq!(cache.match_prefix(&keys), 64);
    }

    #[test]
    fn match_prefix_equals_naive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let len = rng.random_range(16..400usize);
            let toks: Vec<u32> = (0..len as u32).collect();
            let keys = block_keys(&toks, 16);
            let mut cache = PrefixCache::new(1 << 20, 16);
            // insert a random leading run plus random noise chains
            let run = rng.random_range(0..=keys.len());
            cache.insert_chain(&keys[..run]);
            let noise: Vec<u32> = (0..rng.random_range(0..128u32)).map(|i| 10_000 + i).collect();
            cache.insert_chain(&block_keys(&noise, 16));
            let naive = keys
                .iter()
                .take_while(|k| cache.contains(k))
                .count() as u64
                * 16;
            assert_eq!(cache.match_prefix(&keys), naive);
        }
    }

    #[test]
    fn local_eviction_is_lru_at_tails_and_closed() {
        let mut cache = PrefixCache::new(64, 16); // 4 blocks
        let a = chain(&(0..32).collect::<Vec<_>>()); // 2 blocks
        let b = chain(&(100..132).collect::<Vec<_>>()); // 2 blocks
        cache.insert_chain(&a);
        cache.insert_chain(&b);
        assert_eq!(cache.occupancy_tokens(), 64);
        // touch a so b becomes the LRU chain
        cache.insert_chain(&a);
        let c = chain(&(200..216).collect::<Vec<_>>()); // 1 block
        cache.insert_chain(&c);
        assert!(cache.is_prefix_closed());
        // b's tail was evicted first
        assert_eq!(cache.match_prefix(&b), 16);
        assert_eq!(cache.match_prefix(&a), 32);
    }

    #[test]
    fn pool_miss_and_hit_arithmetic() {
        let mut pool = KvPool::new(1 << 20, 1 << 16, 64_000.0, 0.001, 16);
        let keys = chain(&(0..320).collect::<Vec<_>>()); // 20 blocks = 320 tokens
        let (hit, t) = pool.fetch(&keys, 0);
        assert_eq!(hit, 0);
        assert_eq!(t, 0.0);
        pool.insert_chain(&keys);
        let (hit, t) = pool.fetch(&keys, 0);
        assert_eq!(hit, 320);
        assert!((t - 0.006).abs() < 1e-12, "expected 0.006 s, got {t}");
    }

    #[test]
    fn pool_promotes_on_second_access() {
        let mut pool = KvPool::new(1 << 20, 1 << 16, 64_000.0, 0.0, 16);
        let keys = chain(&(0..64).collect::<Vec<_>>());
        pool.insert_chain(&keys);
        for k in &keys {
            assert_eq!(pool.segment_of(k), Some(PoolSegment::Probation));
        }
        pool.fetch(&keys, 0); // second access
        for k in &keys {
            assert_eq!(pool.segment_of(k), Some(PoolSegment::Main));
        }
        pool.validate_closure().unwrap();
    }

    #[test]
    fn pool_insert_twice_promotes() {
        let mut pool = KvPool::new(1 << 20, 1 << 16, 64_000.0, 0.0, 16);
        let keys = chain(&(0..64).collect::<Vec<_>>());
        pool.insert_chain(&keys);
        pool.insert_chain(&keys);
        for k in &keys {
            assert_eq!(pool.segment_of(k), Some(PoolSegment::Main));
        }
    }

    #[test]
    fn scan_does_not_touch_main() {
        let mut pool = KvPool::new(1 << 20, 512, 64_000.0, 0.0, 16);
        let hot = chain(&(0..128).collect::<Vec<_>>());
        pool.insert_chain(&hot);
        pool.insert_chain(&hot); // promote to main
        let before = pool.main_hashes();
        // stream 100 distinct single-use chains through the small probation
        for s in 0..100u32 {
            let toks: Vec<u32> = (0..64).map(|i| 1_000_000 + s * 1000 + i).collect();
            pool.insert_chain(&block_keys(&toks, 16));
        }
        assert_eq!(pool.main_hashes(), before, "scan displaced main contents");
        pool.validate_closure().unwrap();
    }

    #[test]
    fn randomized_ops_preserve_closure() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut pool = KvPool::new(640, 160, 64_000.0, 0.0, 16);
        // small universe of bases so chains collide and extend each other
        let bases: Vec<Vec<u32>> = (0..8)
            .map(|b| (0..rng.random_range(16..160u32)).map(|i| b * 100_000 + i).collect())
            .collect();
        for _ in 0..5_000 {
            let base = &bases[rng.random_range(0..bases.len())];
            let take = rng.random_range(1..=base.len());
            let keys = block_keys(&base[..take], 16);
            if rng.random_bool(0.5) {
                pool.insert_chain(&keys);
            } else {
                pool.fetch(&keys, rng.random_range(0..3));
            }
            if let Err(e) = pool.validate_closure() {
                panic!("closure violated: {e}");
            }
        }
    }

    #[test]
    fn apply_prefill_cold_full_and_conservation() {
        let prompt: Vec<u32> = (0..100).collect(); // 6 blocks + 4 trailing
        let mut local = PrefixCache::new(1 << 20, 16);
        let mut pool = KvPool::new(1 << 20, 1 << 16, 64_000.0, 0.001, 16);

        let out = apply_prefill(&mut local, Some(&mut pool), &prompt, 10_000.0);
        assert_eq!(out.local_hit, 0);
        assert_eq!(out.remote_hit, 0);
        assert_eq!(out.computed_tokens, 100);
        assert!((out.compute_time - 0.01).abs() < 1e-12);

        // now fully cached locally (96 full-block tokens), partial tail computed
        let out = apply_prefill(&mut local, Some(&mut pool), &prompt, 10_000.0);
        assert_eq!(out.local_hit, 96);
        assert_eq!(out.remote_hit, 0);
        assert_eq!(out.transfer_time, 0.0); // short-circuit: no pool fetch
        assert_eq!(out.computed_tokens, 4);
        assert_eq!(out.local_hit + out.remote_hit + out.computed_tokens, 100);
    }

    #[test]
    fn apply_prefill_remote_hit_on_other_instance() {
        let prompt: Vec<u32> = (0..128).collect();
        let mut pool = KvPool::new(1 << 20, 1 << 16, 64_000.0, 0.001, 16);

        let mut local_a = PrefixCache::new(1 << 20, 16);
        apply_prefill(&mut local_a, Some(&mut pool), &prompt, 10_000.0);
        // promote into main via a second touch from instance A
        apply_prefill(&mut local_a, Some(&mut pool), &prompt, 10_000.0);

        let mut local_b = PrefixCache::new(1 << 20, 16);
        let out = apply_prefill(&mut local_b, Some(&mut pool), &prompt, 10_000.0);
        assert_eq!(out.local_hit, 0);
        assert_eq!(out.remote_hit, 128);
        assert_eq!(out.computed_tokens, 0);
        assert!(out.transfer_time > 0.0);
    }

    #[test]
    fn full_local_hit_zero_compute() {
        let prompt: Vec<u32> = (0..64).collect(); // exact multiple of block size
        let mut local = PrefixCache::new(1 << 20, 16);
        apply_prefill(&mut local, None, &prompt, 10_000.0);
        let out = apply_prefill(&mut local, None, &prompt, 10_000.0);
        assert_eq!(out.local_hit, 64);
        assert_eq!(out.compute_time, 0.0);
        assert_eq!(out.computed_tokens, 0);
    }

    #[test]
    fn lru_baseline_is_not_scan_resistant() {
        // identical scan workload: 2Q keeps the hot chain, LRU loses it
        for (policy, survives) in [(EvictionPolicy::TwoQ, true), (EvictionPolicy::Lru, false)] {
            let mut pool = KvPool::with_policy(640, 320, 64_000.0, 0.0, 16, policy);
            let hot = chain(&(0..128).collect::<Vec<_>>());
            pool.insert_chain(&hot);
            pool.insert_chain(&hot);
            for s in 0..100u32 {
                let toks: Vec<u32> = (0..64).map(|i| 1_000_000 + s * 1000 + i).collect();
                pool.insert_chain(&block_keys(&toks, 16));
            }
            pool.validate_closure().unwrap();
            let kept = pool.match_prefix(&hot) == 128;
            assert_eq!(kept, survives, "{policy:?}: hot chain survival");
        }
    }

    #[test]
    fn fifo_baseline_evicts_in_insertion_order() {
        let mut pool = KvPool::with_policy(64, 0, 64_000.0, 0.0, 16, EvictionPolicy::Fifo);
        let a = chain(&(0..32).collect::<Vec<_>>());
        let b = chain(&(100..132).collect::<Vec<_>>());
        pool.insert_chain(&a);
        pool.insert_chain(&b);
        // touching a does not save it under FIFO
        pool.fetch(&a, 0);
        let c = chain(&(200..216).collect::<Vec<_>>());
        pool.insert_chain(&c);
        pool.validate_closure().unwrap();
        assert!(pool.match_prefix(&a) < 32, "oldest chain should lose blocks first");
        assert_eq!(pool.match_prefix(&b), 32);
    }

    #[test]
    fn match_prefix_monotone_under_insertions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe: Vec<u32> = (0..160).collect();
        let probe_keys = block_keys(&probe, 16);
        let mut cache = PrefixCache::new(1 << 20, 16);
        let mut last = 0;
        for _ in 0..50 {
            let take = rng.random_range(1..=probe.len());
            cache.insert_chain(&block_keys(&probe[..take], 16));
            let m = cache.match_prefix(&probe_keys);
            assert!(m >= last, "match_prefix decreased under insertion");
            last = m;
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum PoolOp {
            Insert { base: usize, take: usize },
            Fetch { base: usize, take: usize, skip: usize },
        }

        fn op_strategy() -> impl Strategy<Value = PoolOp> {
            prop_oneof![
                (0..6usize, 1..200usize).prop_map(|(base, take)| PoolOp::Insert { base, take }),
                (0..6usize, 1..200usize, 0..4usize)
                    .prop_map(|(base, take, skip)| PoolOp::Fetch { base, take, skip }),
            ]
        }

        proptest! {
            #[test]
            fn prop_pool_ops_preserve_closure(
                ops in prop::collection::vec(op_strategy(), 0..200),
                main_blocks in 1u64..48,
                probation_blocks in 1u64..16,
            ) {
                let mut pool = KvPool::new(main_blocks * 16, probation_blocks * 16, 64_000.0, 0.0, 16);
                let bases: Vec<Vec<u32>> =
                    (0..6u32).map(|b| (0..200).map(|i| b * 100_000 + i).collect()).collect();
                for op in ops {
                    match op {
                        PoolOp::Insert { base, take } => {
                            let toks = &bases[base][..take.min(bases[base].len())];
                            pool.insert_chain(&block_keys(toks, 16));
                        }
                        PoolOp::Fetch { base, take, skip } => {
                            let toks = &bases[base][..take.min(bases[base].len())];
                            pool.fetch(&block_keys(toks, 16), skip);
                        }
                    }
                    prop_assert!(pool.validate_closure().is_ok());
                }
            }

            #[test]
            fn prop_apply_prefill_conserves_tokens(
                prompt_len in 1usize..500,
                warm_take in 0usize..500,
                pool_take in 0usize..500,
                cache_blocks in 0u64..32,
            ) {
                let prompt: Vec<u32> = (0..prompt_len as u32).collect();
                let mut local = PrefixCache::new(cache_blocks * 16, 16);
                let mut pool = KvPool::new(1 << 16, 1 << 12, 64_000.0, 0.001, 16);
                // pre-warm caches with arbitrary leading runs of the prompt
                local.insert_chain(&block_keys(&prompt[..warm_take.min(prompt_len)], 16));
                pool.insert_chain(&block_keys(&prompt[..pool_take.min(prompt_len)], 16));
                let out = apply_prefill(&mut local, Some(&mut pool), &prompt, 10_000.0);
                prop_assert_eq!(
                    out.local_hit + out.remote_hit + out.computed_tokens,
                    prompt_len as u64
                );
                // the trailing partial block is always computed
                prop_assert!(out.computed_tokens >= (prompt_len % 16) as u64);
                prop_assert!(local.is_prefix_closed());
                prop_assert!(pool.validate_closure().is_ok());
            }
        }
    }
}
