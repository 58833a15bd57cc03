//! Paged per-(layer, head) KV store with block-granular memory accounting.
//!
//! Entries live in fixed-size blocks of `block_size` slots. Eviction marks
//! slots dead; a block returns to the free list only when every slot in it is
//! dead, so fragmentation (resident minus live bytes) is observable. Blocks
//! are never shared between heads.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 16;

#[derive(Debug, Clone)]
struct Entry<F> {
    position: usize,
    key: Vec<F>,
    value: Vec<F>,
}

#[derive(Debug, Clone)]
struct Block<F> {
    slots: Vec<Option<Entry<F>>>,
    live: usize,
}

#[derive(Debug, Clone, Default)]
struct HeadStore {
    /// Indices into the pool, in append order.
    blocks: Vec<usize>,
    /// Slots used in the tail block (dead or alive).
    tail_used: usize,
    appended: u64,
    evicted: u64,
    last_position: Option<usize>,
}

/// Paged KV cache for one generation stream.
#[derive(Debug, Clone)]
pub struct PagedKvCache<F: Scalar> {
    layers: usize,
    heads: usize,
    head_dim: usize,
    block_size: usize,
    pool: Vec<Block<F>>,
    free: Vec<usize>,
    stores: Vec<HeadStore>,
}

/// Per-head accounting snapshot, serializable for the CSV emitter.
#[derive(Debug, Clone, Serialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub appended: u64,
    pub live: u64,
    pub evicted: u64,
    pub resident_blocks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheStats {
    pub per_head: Vec<HeadStats>,
    pub appended_total: u64,
    pub live_total: u64,
    pub evicted_total: u64,
    /// evicted / appended over all heads and layers.
    pub removed_fraction: f64,
    /// 1 / (1 − removed_fraction).
    pub compression_factor: f64,
    /// Live entries × 2·D·4 bytes (f32 accounting).
    pub live_bytes: u64,
    /// Resident blocks × block_size × 2·D·4 bytes.
    pub resident_bytes: u64,
}

impl<F: Scalar> PagedKvCache<F> {
    pub fn new(layers: usize, heads: usize, head_dim: usize, block_size: usize) -> Self {
        assert!(block_size > 0);
        Self {
            layers,
            heads,
            head_dim,
            block_size,
            pool: Vec::new(),
            free: Vec::new(),
            stores: vec![HeadStore::default(); layers * heads],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn is_empty(&self) -> bool {
        self.stores.iter().all(|s| s.appended == 0)
    }

    /// Total blocks ever allocated from the pool.
    pub fn allocated_blocks(&self) -> usize {
        self.pool.len()
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn resident_blocks(&self) -> usize {
        self.pool.len() - self.free.len()
    }

    fn store_index(&self, layer: usize, head: usize) -> usize {
        assert!(layer < self.layers && head < self.heads, "layer/head out of range");
        layer * self.heads + head
    }

    /// Append one entry. Positions must be strictly increasing per head,
    /// counting both live and already-evicted entries.
    pub fn append(
        &mut self,
        layer: usize,
        head: usize,
        position: usize,
        key: Vec<F>,
        value: Vec<F>,
    ) -> Result<()> {
        assert_eq!(key.len(), self.head_dim);
        assert_eq!(value.len(), self.head_dim);
        let si = self.store_index(layer, head);
        if let Some(last) = self.stores[si].last_position {
            if position <= last {
                return Err(Error::CacheOrdering {
                    layer,
                    head,
                    position,
                    last,
                });
            }
        }
        // find or allocate the tail block
        let need_block = match self.stores[si].blocks.last() {
            Some(_) => self.stores[si].tail_used == self.block_size,
            None => true,
        };
        if need_block {
            let bi = if let Some(bi) = self.free.pop() {
                self.pool[bi] = Block {
                    slots: vec![None; self.block_size],
                    live: 0,
                };
                bi
            } else {
                self.pool.push(Block {
                    slots: vec![None; self.block_size],
                    live: 0,
                });
                self.pool.len() - 1
            };
            self.stores[si].blocks.push(bi);
            self.stores[si].tail_used = 0;
        }
        let store = &mut self.stores[si];
        let bi = *store.blocks.last().expect("tail block present");
        let slot = store.tail_used;
        self.pool[bi].slots[slot] = Some(Entry {
            position,
            key,
            value,
        });
        self.pool[bi].live += 1;
        store.tail_used += 1;
        store.appended += 1;
        store.last_position = Some(position);
        Ok(())
    }

    /// Evict the given positions from one head. Unknown positions are
    /// ignored; the return value counts actual evictions. Fully dead blocks
    /// return to the free list.
    pub fn evict(&mut self, layer: usize, head: usize, positions: &HashSet<usize>) -> usize {
        if positions.is_empty() {
            return 0;
        }
        let si = self.store_index(layer, head);
        let mut count = 0usize;
        let mut freed: Vec<usize> = Vec::new();
        let block_ids = self.stores[si].blocks.clone();
        for (ord, &bi) in block_ids.iter().enumerate() {
            let block = &mut self.pool[bi];
            for slot in block.slots.iter_mut() {
                if let Some(e) = slot {
                    if positions.contains(&e.position) {
                        *slot = None;
                        block.live -= 1;
                        count += 1;
                    }
                }
            }
            let is_tail = ord + 1 == block_ids.len();
            let tail_full = self.stores[si].tail_used == self.block_size;
            // the tail block stays resident while it still has free append
            // slots, even if every written slot is dead
            if block.live == 0 && (!is_tail || tail_full) {
                freed.push(bi);
            }
        }
        if !freed.is_empty() {
            let store = &mut self.stores[si];
            store.blocks.retain(|b| !freed.contains(b));
            for bi in freed {
                self.free.push(bi);
            }
        }
        self.stores[si].evicted += count as u64;
        count
    }

    /// Live entries of one head in ascending position order.
    pub fn gather(&self, layer: usize, head: usize) -> (Vec<usize>, Tensor<F>, Tensor<F>) {
        let si = self.store_index(layer, head);
        let store = &self.stores[si];
        let mut positions = Vec::new();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for &bi in &store.blocks {
            for slot in &self.pool[bi].slots {
                if let Some(e) = slot {
                    positions.push(e.position);
                    keys.extend_from_slice(&e.key);
                    values.extend_from_slice(&e.value);
                }
            }
        }
        let n = positions.len();
        debug_assert!(positions.windows(2).all(|w| w[0] < w[1]));
        (
            positions,
            Tensor::new(vec![n, self.head_dim], keys).expect("gather shape"),
            Tensor::new(vec![n, self.head_dim], values).expect("gather shape"),
        )
    }

    pub fn live_positions(&self, layer: usize, head: usize) -> Vec<usize> {
        let si = self.store_index(layer, head);
        let mut positions = Vec::new();
        for &bi in &self.stores[si].blocks {
            for slot in &self.pool[bi].slots {
                if let Some(e) = slot {
                    positions.push(e.position);
                }
            }
        }
        positions
    }

    pub fn live_count(&self, layer: usize, head: usize) -> u64 {
        let si = self.store_index(layer, head);
        self.stores[si].appended - self.stores[si].evicted
    }

    pub fn appended_count(&self, layer: usize, head: usize) -> u64 {
        self.stores[self.store_index(layer, head)].appended
    }

    /// Exact accounting snapshot. Errors if nothing was ever appended, since
    /// the ratio fields are undefined.
    pub fn stats(&self) -> Result<CacheStats> {
        let mut per_head = Vec::with_capacity(self.stores.len());
        let mut appended_total = 0u64;
        let mut evicted_total = 0u64;
        for layer in 0..self.layers {
            for head in 0..self.heads {
                let s = &self.stores[self.store_index(layer, head)];
                per_head.push(HeadStats {
                    layer,
                    head,
                    appended: s.appended,
                    live: s.appended - s.evicted,
                    evicted: s.evicted,
                    resident_blocks: s.blocks.len(),
                });
                appended_total += s.appended;
                evicted_total += s.evicted;
            }
        }
        if appended_total == 0 {
            return Err(Error::EmptyCacheStats);
        }
        let live_total = appended_total - evicted_total;
        let removed_fraction = evicted_total as f64 / appended_total as f64;
        let compression_factor = 1.0 / (1.0 - removed_fraction);
        let entry_bytes = 2 * self.head_dim as u64 * 4;
        Ok(CacheStats {
            per_head,
            appended_total,
            live_total,
            evicted_total,
            removed_fraction,
            compression_factor,
            live_bytes: live_total * entry_bytes,
            resident_bytes: self.resident_blocks() as u64 * self.block_size as u64 * entry_bytes,
        })
    }
}
