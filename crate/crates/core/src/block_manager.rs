//! Virtual-memory-style manager for fixed-size KV blocks.
//!
//! Two pools are managed: a primary pool (modelling GPU RAM) where resident
//! sequences live, and a secondary pool (modelling CPU RAM) used as swap
//! space. Each sequence owns a block table mapping logical block indices to
//! physical blocks. Allocation is on demand, one block at a time; sharing is
//! expressed through per-block reference counts and resolved with block-level
//! copy-on-write.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::types::num_logical_blocks;

/// Index of a physical block within one pool. Gpu and Cpu pools have
/// independent id spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct BlockId(pub usize);

/// Handle to a block table owned by the manager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct TableId(pub u64);

/// Which pool a block table entry currently points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum PoolKind {
    Gpu,
    Cpu,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error("out of free blocks in the gpu pool")]
    OutOfBlocks,
    #[error("cpu swap pool exhausted")]
    CpuPoolExhausted,
    #[error("unknown block table {0:?}")]
    UnknownTable(TableId),
}

/// One logical-to-physical mapping entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlockTableEntry {
    pub block: BlockId,
    /// Number of filled slots, in `[0, block_size]`.
    pub filled: usize,
    pub pool: PoolKind,
}

/// Ordered list of entries for one sequence. All entries except the last
/// are full; the last holds between 1 and `block_size` slots.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BlockTable {
    entries: Vec<BlockTableEntry>,
}

impl BlockTable {
    pub fn entries(&self) -> &[BlockTableEntry] {
        &self.entries
    }

    pub fn num_blocks(&self) -> usize {
        self.entries.len()
    }

    /// Total filled slots across all entries.
    pub fn filled_slots(&self) -> usize {
        self.entries.iter().map(|e| e.filled).sum()
    }

    pub fn last(&self) -> Option<&BlockTableEntry> {
        self.entries.last()
    }

    /// Entry and in-block slot index holding KV position `pos`.
    pub fn locate(&self, pos: usize, block_size: usize) -> (BlockTableEntry, usize) {
        let entry = self.entries[pos / block_size];
        (entry, pos % block_size)
    }
}

/// Outcome of provisioning one more KV slot on a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendOutcome {
    /// The last block had a free slot and is privately owned.
    InPlace,
    /// The last block was full; a fresh block now holds the slot.
    NewBlock(BlockId),
    /// The last block was shared; it was copy-on-write split.
    Cow(CowDirective),
}

/// Instruction to copy a whole block's payload before a write to a shared
/// block. The manager updates the bookkeeping; the storage layer executes
/// the copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CowDirective {
    pub src: BlockId,
    pub dst: BlockId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SwapDirection {
    Out,
    In,
}

/// Block pairs to move between pools. `pairs` holds `(gpu_block, cpu_block)`
/// regardless of direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SwapDirective {
    pub direction: SwapDirection,
    pub pairs: Vec<(BlockId, BlockId)>,
}

impl SwapDirective {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Slot-level classification of every allocated slot in the primary pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct WasteBreakdown {
    /// Slots holding live KV entries.
    pub token_states: usize,
    /// Slots pre-reserved for tokens that will be generated later.
    /// Always 0 for the paged allocator.
    pub reserved: usize,
    /// Allocated-but-unfilled slots (the tail of each live table's last
    /// block, counted once per physical block).
    pub internal_frag: usize,
    /// Slots unusable due to size-class rounding. Always 0 for the paged
    /// allocator since every block has the same size.
    pub external_frag: usize,
}

impl WasteBreakdown {
    pub fn allocated(&self) -> usize {
        self.token_states + self.reserved + self.internal_frag + self.external_frag
    }
}

/// Fixed array of blocks plus a LIFO free list and per-block refcounts.
#[derive(Debug)]
struct PhysicalBlockPool {
    num_blocks: usize,
    ref_counts: Vec<u32>,
    /// Stack: pop from the back. LIFO keeps ids deterministic in tests.
    free_list: Vec<BlockId>,
}

impl PhysicalBlockPool {
    fn new(num_blocks: usize) -> Self {
        Self {
            num_blocks,
            ref_counts: vec![0; num_blocks],
            // Push 0..n so the first pop yields the highest id.
            free_list: (0..num_blocks).map(BlockId).collect(),
        }
    }

    fn num_free(&self) -> usize {
        self.free_list.len()
    }

    fn num_in_use(&self) -> usize {
        self.num_blocks - self.free_list.len()
    }

    fn alloc(&mut self) -> Option<BlockId> {
        let id = self.free_list.pop()?;
        debug_assert_eq!(self.ref_counts[id.0], 0);
        self.ref_counts[id.0] = 1;
        Some(id)
    }

    fn incref(&mut self, id: BlockId) {
        assert!(self.ref_counts[id.0] > 0, "incref on free block {id:?}");
        self.ref_counts[id.0] += 1;
    }

    /// Decrement and return true when the block dropped to zero and was
    /// returned to the free list.
    fn decref(&mut self, id: BlockId) -> bool {
        let rc = &mut self.ref_counts[id.0];
        assert!(*rc > 0, "refcount underflow on block {id:?} (double free)");
        *rc -= 1;
        if *rc == 0 {
            self.free_list.push(id);
            true
        } else {
            false
        }
    }
}

/// Manager for both pools and all live block tables.
pub struct BlockManager {
    block_size: usize,
    gpu: PhysicalBlockPool,
    cpu: PhysicalBlockPool,
    tables: HashMap<TableId, BlockTable>,
    next_table: u64,
    watermark: usize,
}

impl BlockManager {
    /// `watermark` is the number of free gpu blocks `can_allocate` keeps in
    /// reserve so running sequences can still append; `None` picks the
    /// default of 1% of the pool, minimum one block.
    pub fn new(
        gpu_blocks: usize,
        cpu_blocks: usize,
        block_size: usize,
        watermark: Option<usize>,
    ) -> Self {
        assert!(block_size >= 1, "block_size must be >= 1");
        assert!(gpu_blocks >= 1 && cpu_blocks >= 1, "pools need at least one block");
        let watermark = watermark.unwrap_or_else(|| (gpu_blocks / 100).max(1));
        Self {
            block_size,
            gpu: PhysicalBlockPool::new(gpu_blocks),
            cpu: PhysicalBlockPool::new(cpu_blocks),
            tables: HashMap::new(),
            next_table: 0,
            watermark,
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn watermark(&self) -> usize {
        self.watermark
    }

    pub fn gpu_num_blocks(&self) -> usize {
        self.gpu.num_blocks
    }

    pub fn gpu_free_blocks(&self) -> usize {
        self.gpu.num_free()
    }

    pub fn gpu_blocks_in_use(&self) -> usize {
        self.gpu.num_in_use()
    }

    pub fn cpu_blocks_in_use(&self) -> usize {
        self.cpu.num_in_use()
    }

    pub fn ref_count(&self, pool: PoolKind, block: BlockId) -> u32 {
        match pool {
            PoolKind::Gpu => self.gpu.ref_counts[block.0],
            PoolKind::Cpu => self.cpu.ref_counts[block.0],
        }
    }

    pub fn table(&self, id: TableId) -> &BlockTable {
        self.tables.get(&id).expect("live block table")
    }

    pub fn has_table(&self, id: TableId) -> bool {
        self.tables.contains_key(&id)
    }

    /// Blocks needed to hold a fresh prompt of this length.
    pub fn blocks_needed(&self, prompt_len: usize) -> usize {
        num_logical_blocks(prompt_len, self.block_size)
    }

    /// Admission guard: true when the free list can cover the prompt and
    /// still keep the watermark in reserve.
    pub fn can_allocate(&self, prompt_len: usize) -> bool {
        self.can_allocate_blocks(self.blocks_needed(prompt_len))
    }

    pub fn can_allocate_blocks(&self, blocks: usize) -> bool {
        self.gpu.num_free() >= blocks + self.watermark
    }

    /// Allocate a fresh table covering `prompt_len` slots. Every block gets
    /// refcount 1; the last entry is partially filled unless the prompt is
    /// an exact multiple of the block size.
    pub fn allocate(&mut self, prompt_len: usize) -> Result<TableId, BlockError> {
        assert!(prompt_len >= 1, "cannot allocate an empty table");
        let n_blocks = self.blocks_needed(prompt_len);
        if self.gpu.num_free() < n_blocks {
            return Err(BlockError::OutOfBlocks);
        }
        let mut entries = Vec::with_capacity(n_blocks);
        let mut remaining = prompt_len;
        for _ in 0..n_blocks {
            let block = self.gpu.alloc().expect("free count checked above");
            let filled = remaining.min(self.block_size);
            remaining -= filled;
            entries.push(BlockTableEntry {
                block,
                filled,
                pool: PoolKind::Gpu,
            });
        }
        Ok(self.insert_table(BlockTable { entries }))
    }

    /// Extend an existing prefix table with fresh blocks so the combined
    /// table covers `total_len` slots. The prefix entries are shared
    /// (refcount incremented); only the suffix is newly allocated.
    pub fn attach_prefix(
        &mut self,
        prefix: TableId,
        total_len: usize,
    ) -> Result<TableId, BlockError> {
        let prefix_entries: Vec<BlockTableEntry> =
            self.tables.get(&prefix).ok_or(BlockError::UnknownTable(prefix))?.entries.clone();
        let shared_slots: usize = prefix_entries.iter().map(|e| e.filled).sum();
        assert!(
            prefix_entries.iter().all(|e| e.filled == self.block_size),
            "prefix tables only share full blocks"
        );
        assert!(total_len > shared_slots, "prompt must extend past the shared prefix");
        let suffix_blocks = num_logical_blocks(total_len - shared_slots, self.block_size);
        if self.gpu.num_free() < suffix_blocks {
            return Err(BlockError::OutOfBlocks);
        }
        let mut entries = prefix_entries;
        for e in &entries {
            self.gpu.incref(e.block);
        }
        let mut remaining = total_len - shared_slots;
        for _ in 0..suffix_blocks {
            let block = self.gpu.alloc().expect("free count checked above");
            let filled = remaining.min(self.block_size);
            remaining -= filled;
            entries.push(BlockTableEntry {
                block,
                filled,
                pool: PoolKind::Gpu,
            });
        }
        Ok(self.insert_table(BlockTable { entries }))
    }

    /// Blocks a decode append on this table would consume right now:
    /// 1 when the last block is full or shared, 0 otherwise. Works on
    /// swapped-out tables too (resume planning).
    pub fn append_need(&self, id: TableId) -> usize {
        let table = self.table(id);
        let last = table.last().expect("tables are never empty");
        if last.filled == self.block_size || self.ref_count(last.pool, last.block) > 1 {
            1
        } else {
            0
        }
    }

    /// Drop a trailing partial block, keeping only full ones. Used when
    /// registering a shared prefix, whose tail cannot be shared.
    pub fn truncate_to_full_blocks(&mut self, id: TableId) {
        let table = self.tables.get_mut(&id).expect("live block table");
        let Some(last) = table.entries.last().copied() else {
            return;
        };
        if last.filled == self.block_size {
            return;
        }
        assert!(table.entries.len() > 1, "cannot truncate away the whole table");
        table.entries.pop();
        match last.pool {
            PoolKind::Gpu => self.gpu.decref(last.block),
            PoolKind::Cpu => self.cpu.decref(last.block),
        };
    }

    /// Provision one more slot at the tail of the table.
    pub fn append_slot(&mut self, id: TableId) -> Result<AppendOutcome, BlockError> {
        let block_size = self.block_size;
        let table = self.tables.get(&id).ok_or(BlockError::UnknownTable(id))?;
        let last = *table.last().expect("tables are never empty");
        assert_eq!(last.pool, PoolKind::Gpu, "append on a swapped-out table");

        if last.filled < block_size && self.gpu.ref_counts[last.block.0] == 1 {
            let table = self.tables.get_mut(&id).unwrap();
            table.entries.last_mut().unwrap().filled += 1;
            return Ok(AppendOutcome::InPlace);
        }

        if last.filled == block_size {
            let block = self.gpu.alloc().ok_or(BlockError::OutOfBlocks)?;
            let table = self.tables.get_mut(&id).unwrap();
            table.entries.push(BlockTableEntry {
                block,
                filled: 1,
                pool: PoolKind::Gpu,
            });
            return Ok(AppendOutcome::NewBlock(block));
        }

        // Partial and shared: copy-on-write split.
        let dst = self.gpu.alloc().ok_or(BlockError::OutOfBlocks)?;
        self.gpu.decref(last.block);
        assert!(self.gpu.ref_counts[last.block.0] >= 1);
        assert_eq!(self.gpu.ref_counts[dst.0], 1);
        let table = self.tables.get_mut(&id).unwrap();
        let entry = table.entries.last_mut().unwrap();
        entry.block = dst;
        entry.filled += 1;
        Ok(AppendOutcome::Cow(CowDirective { src: last.block, dst }))
    }

    /// Create a child table sharing every block of the parent. No data
    /// moves; every referenced block's refcount is incremented.
    pub fn fork(&mut self, parent: TableId) -> TableId {
        let entries = self.table(parent).entries.clone();
        for e in &entries {
            match e.pool {
                PoolKind::Gpu => self.gpu.incref(e.block),
                PoolKind::Cpu => self.cpu.incref(e.block),
            }
        }
        self.insert_table(BlockTable { entries })
    }

    /// Release the table, decrementing every referenced block. Returns the
    /// number of blocks that actually went back to a free list.
    pub fn free(&mut self, id: TableId) -> usize {
        let table = self.tables.remove(&id).expect("free of unknown table");
        let mut freed = 0;
        for e in &table.entries {
            let dropped = match e.pool {
                PoolKind::Gpu => self.gpu.decref(e.block),
                PoolKind::Cpu => self.cpu.decref(e.block),
            };
            if dropped {
                freed += 1;
            }
        }
        freed
    }

    /// Free every table of a preempted group under the recompute policy.
    /// The sequences keep their token ids; the KV is regenerated later in
    /// one prompt-phase pass.
    pub fn free_for_recompute(&mut self, tables: &[TableId]) -> usize {
        tables.iter().map(|&t| self.free(t)).sum()
    }

    /// True when the cpu pool can absorb a swap-out of this group.
    pub fn can_swap_out(&self, tables: &[TableId]) -> bool {
        self.swap_out_block_count(tables) <= self.cpu.num_free()
    }

    /// Distinct gpu blocks that would move in a swap-out (blocks shared
    /// with parties outside the group stay resident).
    pub fn swap_out_block_count(&self, tables: &[TableId]) -> usize {
        self.group_private_gpu_blocks(tables).len()
    }

    /// True when the gpu pool can absorb a swap-in of this group.
    pub fn can_swap_in(&self, tables: &[TableId]) -> bool {
        self.swap_in_block_count(tables) <= self.gpu.num_free()
    }

    pub fn swap_in_block_count(&self, tables: &[TableId]) -> usize {
        let mut seen = Vec::new();
        for &t in tables {
            for e in self.table(t).entries() {
                if e.pool == PoolKind::Cpu && !seen.contains(&e.block) {
                    seen.push(e.block);
                }
            }
        }
        seen.len()
    }

    /// Gpu blocks referenced only by this group's tables, in first-seen
    /// order, with the number of references the group holds on each.
    fn group_private_gpu_blocks(&self, tables: &[TableId]) -> Vec<(BlockId, u32)> {
        let mut order = Vec::new();
        let mut counts: HashMap<BlockId, u32> = HashMap::new();
        for &t in tables {
            for e in self.table(t).entries() {
                if e.pool == PoolKind::Gpu {
                    let c = counts.entry(e.block).or_insert_with(|| {
                        order.push(e.block);
                        0
                    });
                    *c += 1;
                }
            }
        }
        order
            .into_iter()
            .filter_map(|b| {
                let group_refs = counts[&b];
                (group_refs == self.gpu.ref_counts[b.0]).then_some((b, group_refs))
            })
            .collect()
    }

    /// Move every group-private gpu block of the tables to fresh cpu
    /// blocks, preserving the sharing structure. Gpu blocks are freed; the
    /// caller must execute the returned copy directive before those blocks
    /// are rewritten.
    pub fn swap_out(&mut self, tables: &[TableId]) -> Result<SwapDirective, BlockError> {
        let to_move = self.group_private_gpu_blocks(tables);
        if to_move.len() > self.cpu.num_free() {
            return Err(BlockError::CpuPoolExhausted);
        }
        let mut mapping: HashMap<BlockId, BlockId> = HashMap::new();
        let mut pairs = Vec::with_capacity(to_move.len());
        for (gpu_block, group_refs) in to_move {
            let cpu_block = self.cpu.alloc().expect("free count checked above");
            for _ in 1..group_refs {
                self.cpu.incref(cpu_block);
            }
            mapping.insert(gpu_block, cpu_block);
            pairs.push((gpu_block, cpu_block));
        }
        for &t in tables {
            let table = self.tables.get_mut(&t).unwrap();
            for e in &mut table.entries {
                if e.pool == PoolKind::Gpu {
                    if let Some(&cpu_block) = mapping.get(&e.block) {
                        e.block = cpu_block;
                        e.pool = PoolKind::Cpu;
                    }
                }
            }
        }
        for &(gpu_block, _) in &pairs {
            self.gpu.ref_counts[gpu_block.0] = 0;
            self.gpu.free_list.push(gpu_block);
        }
        Ok(SwapDirective {
            direction: SwapDirection::Out,
            pairs,
        })
    }

    /// Mirror of [`swap_out`](Self::swap_out): bring the group's cpu
    /// blocks back into fresh gpu blocks and free the cpu side.
    pub fn swap_in(&mut self, tables: &[TableId]) -> Result<SwapDirective, BlockError> {
        let mut order = Vec::new();
        let mut counts: HashMap<BlockId, u32> = HashMap::new();
        for &t in tables {
            for e in self.table(t).entries() {
                if e.pool == PoolKind::Cpu {
                    let c = counts.entry(e.block).or_insert_with(|| {
                        order.push(e.block);
                        0
                    });
                    *c += 1;
                }
            }
        }
        if order.len() > self.gpu.num_free() {
            return Err(BlockError::OutOfBlocks);
        }
        let mut mapping: HashMap<BlockId, BlockId> = HashMap::new();
        let mut pairs = Vec::with_capacity(order.len());
        for cpu_block in order {
            let gpu_block = self.gpu.alloc().expect("free count checked above");
            for _ in 1..counts[&cpu_block] {
                self.gpu.incref(gpu_block);
            }
            mapping.insert(cpu_block, gpu_block);
            pairs.push((gpu_block, cpu_block));
        }
        for &t in tables {
            let table = self.tables.get_mut(&t).unwrap();
            for e in &mut table.entries {
                if e.pool == PoolKind::Cpu {
                    let gpu_block = mapping[&e.block];
                    e.block = gpu_block;
                    e.pool = PoolKind::Gpu;
                }
            }
        }
        for &(_, cpu_block) in &pairs {
            self.cpu.ref_counts[cpu_block.0] = 0;
            self.cpu.free_list.push(cpu_block);
        }
        Ok(SwapDirective {
            direction: SwapDirection::In,
            pairs,
        })
    }

    /// Classify every slot of every allocated gpu block. For the paged
    /// allocator the only waste is the unfilled tail of each live block, so
    /// `reserved` and `external_frag` are structurally zero.
    pub fn waste_breakdown(&self) -> WasteBreakdown {
        let mut max_filled: HashMap<BlockId, usize> = HashMap::new();
        for table in self.tables.values() {
            for e in table.entries() {
                if e.pool == PoolKind::Gpu {
                    let m = max_filled.entry(e.block).or_insert(0);
                    *m = (*m).max(e.filled);
                }
            }
        }
        let token_states: usize = max_filled.values().sum();
        let in_use = self.gpu.num_in_use();
        WasteBreakdown {
            token_states,
            reserved: 0,
            internal_frag: in_use * self.block_size - token_states,
            external_frag: 0,
        }
    }

    /// Panics unless `block` is safe to write (exactly one reference).
    pub fn assert_writable(&self, pool: PoolKind, block: BlockId) {
        let rc = self.ref_count(pool, block);
        assert_eq!(rc, 1, "write to {pool:?} block {block:?} with refcount {rc}");
    }

    /// Panics unless every entry of `id` covering positions `from..` is
    /// exclusively owned; used before prompt-phase writes.
    pub fn assert_entries_writable(&self, id: TableId, from_pos: usize) {
        let table = self.table(id);
        let first_entry = from_pos / self.block_size;
        for e in &table.entries()[first_entry..] {
            self.assert_writable(e.pool, e.block);
        }
    }

    /// Full-walk verification of the conservation laws. Returns a
    /// description of the first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut gpu_refs = vec![0u32; self.gpu.num_blocks];
        let mut cpu_refs = vec![0u32; self.cpu.num_blocks];
        for (id, table) in &self.tables {
            let entries = table.entries();
            if entries.is_empty() {
                return Err(format!("table {id:?} is empty"));
            }
            for (i, e) in entries.iter().enumerate() {
                if e.filled == 0 || e.filled > self.block_size {
                    return Err(format!("table {id:?} entry {i} has filled={}", e.filled));
                }
                if i + 1 < entries.len() && e.filled != self.block_size {
                    return Err(format!("table {id:?} entry {i} is non-last but not full"));
                }
                match e.pool {
                    PoolKind::Gpu => gpu_refs[e.block.0] += 1,
                    PoolKind::Cpu => cpu_refs[e.block.0] += 1,
                }
            }
        }
        for (pool_name, pool, refs) in [
            ("gpu", &self.gpu, &gpu_refs),
            ("cpu", &self.cpu, &cpu_refs),
        ] {
            if pool.ref_counts != *refs {
                return Err(format!("{pool_name} refcounts diverge from table walk"));
            }
            let mut on_free_list = vec![false; pool.num_blocks];
            for b in &pool.free_list {
                if on_free_list[b.0] {
                    return Err(format!("{pool_name} block {b:?} on free list twice"));
                }
                on_free_list[b.0] = true;
            }
            for (i, &rc) in pool.ref_counts.iter().enumerate() {
                if (rc == 0) != on_free_list[i] {
                    return Err(format!(
                        "{pool_name} block {i}: refcount {rc} but on_free_list={}",
                        on_free_list[i]
                    ));
                }
            }
            let in_use = pool.ref_counts.iter().filter(|&&rc| rc > 0).count();
            if pool.free_list.len() + in_use != pool.num_blocks {
                return Err(format!("{pool_name} pool conservation violated"));
            }
        }
        // Swap bound: cpu blocks in use never exceed the gpu pool size.
        if self.cpu.num_in_use() > self.gpu.num_blocks {
            return Err("cpu blocks in use exceed gpu pool size".into());
        }
        Ok(())
    }

    /// JSON snapshot of pools, refcounts, and live tables, for tests and
    /// the CLI's state dump.
    pub fn debug_dump(&self) -> serde_json::Value {
        let mut tables: Vec<_> = self.tables.iter().collect();
        tables.sort_by_key(|(id, _)| **id);
        serde_json::json!({
            "block_size": self.block_size,
            "watermark": self.watermark,
            "gpu": {
                "num_blocks": self.gpu.num_blocks,
                "free": self.gpu.num_free(),
                "ref_counts": self.gpu.ref_counts,
            },
            "cpu": {
                "num_blocks": self.cpu.num_blocks,
                "free": self.cpu.num_free(),
                "ref_counts": self.cpu.ref_counts,
            },
            "tables": tables
                .into_iter()
                .map(|(id, t)| serde_json::json!({ "id": id, "entries": t.entries() }))
                .collect::<Vec<_>>(),
        })
    }

    fn insert_table(&mut self, table: BlockTable) -> TableId {
        let id = TableId(self.next_table);
        self.next_table += 1;
        self.tables.insert(id, table);
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn manager(gpu: usize, block_size: usize) -> BlockManager {
        BlockManager::new(gpu, gpu, block_size, Some(1))
    }

    fn filled_counts(mgr: &BlockManager, id: TableId) -> Vec<usize> {
        mgr.table(id).entries().iter().map(|e| e.filled).collect()
    }

    #[test]
    fn allocate_prompt_of_seven_with_block_size_four() {
        let mut mgr = manager(16, 4);
        let t = mgr.allocate(7).unwrap();
        assert_eq!(filled_counts(&mgr, t), vec![4, 3]);
        assert_eq!(mgr.gpu_free_blocks(), 14);
        for e in mgr.table(t).entries() {
            assert_eq!(mgr.ref_count(PoolKind::Gpu, e.block), 1);
        }
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn allocate_exact_fill_and_minimal() {
        let mut mgr = manager(16, 4);
        let t = mgr.allocate(4).unwrap();
        assert_eq!(filled_counts(&mgr, t), vec![4]);
        let mut mgr = manager(16, 16);
        let t = mgr.allocate(1).unwrap();
        assert_eq!(filled_counts(&mgr, t), vec![1]);
    }

    #[test]
    fn can_allocate_respects_watermark() {
        let mut mgr = BlockManager::new(10, 10, 4, Some(1));
        assert!(mgr.can_allocate(8)); // needs 2, free 10, watermark 1
        for _ in 0..4 {
            mgr.allocate(8).unwrap();
        }
        // free = 2, need = 2, watermark 1 -> refuse
        assert_eq!(mgr.gpu_free_blocks(), 2);
        assert!(!mgr.can_allocate(8));
        // exhaust entirely
        mgr.allocate(8).unwrap();
        assert_eq!(mgr.gpu_free_blocks(), 0);
        assert!(!mgr.can_allocate(1));
    }

    #[test]
    fn append_in_place_when_private_and_partial() {
        let mut mgr = manager(16, 4);
        let t = mgr.allocate(7).unwrap();
        assert_eq!(mgr.append_need(t), 0);
        assert_eq!(mgr.append_slot(t).unwrap(), AppendOutcome::InPlace);
        assert_eq!(filled_counts(&mgr, t), vec![4, 4]);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn append_new_block_when_full() {
        let mut mgr = manager(16, 4);
        let t = mgr.allocate(8).unwrap();
        assert_eq!(mgr.append_need(t), 1);
        match mgr.append_slot(t).unwrap() {
            AppendOutcome::NewBlock(_) => {}
            other => panic!("expected NewBlock, got {other:?}"),
        }
        assert_eq!(filled_counts(&mgr, t), vec![4, 4, 1]);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn append_cow_when_shared_and_partial() {
        let mut mgr = manager(16, 4);
        let parent = mgr.allocate(7).unwrap();
        let child = mgr.fork(parent);
        let shared = mgr.table(parent).entries()[1].block;
        assert_eq!(mgr.ref_count(PoolKind::Gpu, shared), 2);

        let outcome = mgr.append_slot(parent).unwrap();
        let cow = match outcome {
            AppendOutcome::Cow(c) => c,
            other => panic!("expected Cow, got {other:?}"),
        };
        assert_eq!(cow.src, shared);
        assert_ne!(cow.src, cow.dst);
        assert_eq!(mgr.ref_count(PoolKind::Gpu, shared), 1);
        assert_eq!(mgr.ref_count(PoolKind::Gpu, cow.dst), 1);
        assert_eq!(filled_counts(&mgr, parent), vec![4, 4]);
        assert_eq!(filled_counts(&mgr, child), vec![4, 3]);

        // The child now owns the old block exclusively and appends in place.
        assert_eq!(mgr.append_slot(child).unwrap(), AppendOutcome::InPlace);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn append_out_of_blocks_signals_preemption() {
        let mut mgr = manager(2, 4);
        let t = mgr.allocate(8).unwrap();
        assert_eq!(mgr.append_slot(t), Err(BlockError::OutOfBlocks));
    }

    #[test]
    fn fork_shares_all_blocks_without_copying() {
        let mut mgr = manager(16, 4);
        let parent = mgr.allocate(7).unwrap();
        let child = mgr.fork(parent);
        let pe = mgr.table(parent).entries().to_vec();
        let ce = mgr.table(child).entries().to_vec();
        assert_eq!(pe, ce);
        for e in &pe {
            assert_eq!(mgr.ref_count(PoolKind::Gpu, e.block), 2);
        }
        let grandchild = mgr.fork(child);
        for e in mgr.table(grandchild).entries() {
            assert_eq!(mgr.ref_count(PoolKind::Gpu, e.block), 3);
        }
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn fork_then_free_restores_ref_counts() {
        let mut mgr = manager(16, 4);
        let parent = mgr.allocate(7).unwrap();
        let before: Vec<u32> = mgr
            .table(parent)
            .entries()
            .iter()
            .map(|e| mgr.ref_count(PoolKind::Gpu, e.block))
            .collect();
        let child = mgr.fork(parent);
        assert_eq!(mgr.free(child), 0); // everything still shared
        let after: Vec<u32> = mgr
            .table(parent)
            .entries()
            .iter()
            .map(|e| mgr.ref_count(PoolKind::Gpu, e.block))
            .collect();
        assert_eq!(before, after);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn free_sole_owner_returns_all_blocks() {
        let mut mgr = manager(16, 4);
        let t = mgr.allocate(16).unwrap();
        assert_eq!(mgr.free(t), 4);
        assert_eq!(mgr.gpu_free_blocks(), 16);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn free_shared_counts_only_private_blocks() {
        let mut mgr = manager(32, 4);
        // Parent covers 4 shared blocks; the child then grows 3 private ones.
        let parent = mgr.allocate(16).unwrap();
        let child = mgr.fork(parent);
        for _ in 0..9 {
            mgr.append_slot(child).unwrap();
        }
        assert_eq!(mgr.table(child).num_blocks(), 7);
        // Freeing the child drops only its 3 private blocks.
        assert_eq!(mgr.free(child), 3);
        mgr.check_invariants().unwrap();
    }

    #[test]
    #[should_panic(expected = "refcount underflow")]
    fn double_free_panics() {
        let mut mgr = manager(16, 4);
        let parent = mgr.allocate(4).unwrap();
        let child = mgr.fork(parent);
        // Freeing both tables is fine; freeing a block beyond its refcount
        // must blow up. Simulate the bug by forging a duplicate entry.
        mgr.free(parent);
        mgr.free(child);
        mgr.gpu.decref(BlockId(15));
    }

    #[test]
    fn swap_out_then_in_preserves_structure() {
        let mut mgr = manager(16, 4);
        let t = mgr.allocate(12).unwrap();
        let free_before = mgr.gpu_free_blocks();
        let out = mgr.swap_out(&[t]).unwrap();
        assert_eq!(out.pairs.len(), 3);
        assert_eq!(mgr.gpu_free_blocks(), free_before + 3);
        assert_eq!(mgr.cpu_blocks_in_use(), 3);
        assert!(mgr.table(t).entries().iter().all(|e| e.pool == PoolKind::Cpu));
        mgr.check_invariants().unwrap();

        let inn = mgr.swap_in(&[t]).unwrap();
        assert_eq!(inn.pairs.len(), 3);
        assert_eq!(mgr.cpu_blocks_in_use(), 0);
        assert!(mgr.table(t).entries().iter().all(|e| e.pool == PoolKind::Gpu));
        assert_eq!(filled_counts(&mgr, t), vec![4, 4, 4]);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn swap_preserves_sharing_within_group() {
        let mut mgr = manager(16, 4);
        let a = mgr.allocate(4).unwrap();
        let b = mgr.fork(a);
        // Diverge: each grows one private block.
        mgr.append_slot(a).unwrap();
        mgr.append_slot(b).unwrap();

        let out = mgr.swap_out(&[a, b]).unwrap();
        // Shared prompt block appears in exactly one pair.
        assert_eq!(out.pairs.len(), 3);
        let shared_cpu = mgr.table(a).entries()[0].block;
        assert_eq!(mgr.table(b).entries()[0].block, shared_cpu);
        assert_eq!(mgr.ref_count(PoolKind::Cpu, shared_cpu), 2);
        mgr.check_invariants().unwrap();

        mgr.swap_in(&[a, b]).unwrap();
        let shared_gpu = mgr.table(a).entries()[0].block;
        assert_eq!(mgr.table(b).entries()[0].block, shared_gpu);
        assert_eq!(mgr.ref_count(PoolKind::Gpu, shared_gpu), 2);
        assert_ne!(mgr.table(a).entries()[1].block, mgr.table(b).entries()[1].block);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn swap_leaves_externally_shared_blocks_resident() {
        let mut mgr = manager(16, 4);
        // Registry-style holder pins the prompt block.
        let registry = mgr.allocate(4).unwrap();
        let seq = mgr.attach_prefix(registry, 6).unwrap();
        let out = mgr.swap_out(&[seq]).unwrap();
        // Only the private suffix block moves.
        assert_eq!(out.pairs.len(), 1);
        let entries = mgr.table(seq).entries().to_vec();
        assert_eq!(entries[0].pool, PoolKind::Gpu);
        assert_eq!(entries[1].pool, PoolKind::Cpu);
        mgr.check_invariants().unwrap();

        mgr.swap_in(&[seq]).unwrap();
        assert!(mgr.table(seq).entries().iter().all(|e| e.pool == PoolKind::Gpu));
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn swap_empty_group_is_empty_directive() {
        let mut mgr = manager(16, 4);
        let out = mgr.swap_out(&[]).unwrap();
        assert!(out.is_empty());
        let inn = mgr.swap_in(&[]).unwrap();
        assert!(inn.is_empty());
    }

    #[test]
    fn free_for_recompute_spares_registered_prefix_blocks() {
        let mut mgr = manager(16, 4);
        let registry = mgr.allocate(8).unwrap();
        let seq = mgr.attach_prefix(registry, 13).unwrap();
        let other = mgr.allocate(20).unwrap();
        assert_eq!(mgr.free_for_recompute(&[other]), 5);
        // Prefix blocks survive with the registry's reference.
        assert_eq!(mgr.free_for_recompute(&[seq]), 2);
        for e in mgr.table(registry).entries() {
            assert_eq!(mgr.ref_count(PoolKind::Gpu, e.block), 1);
        }
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn waste_breakdown_counts_only_internal_tail() {
        let mut mgr = manager(16, 4);
        let _t = mgr.allocate(7).unwrap();
        let w = mgr.waste_breakdown();
        assert_eq!(w.token_states, 7);
        assert_eq!(w.internal_frag, 1);
        assert_eq!(w.reserved, 0);
        assert_eq!(w.external_frag, 0);
        assert_eq!(w.allocated(), 8);
    }

    #[test]
    fn waste_counts_shared_blocks_once() {
        let mut mgr = manager(16, 4);
        let parent = mgr.allocate(7).unwrap();
        let _child = mgr.fork(parent);
        let w = mgr.waste_breakdown();
        assert_eq!(w.token_states, 7);
        assert_eq!(w.internal_frag, 1);
    }

    #[test]
    fn per_table_internal_waste_is_bounded_by_block_size() {
        let mut mgr = manager(64, 8);
        let mut rng = SplitMix64::new(3);
        let mut tables = Vec::new();
        for _ in 0..6 {
            tables.push(mgr.allocate(1 + rng.next_below(30) as usize).unwrap());
        }
        for _ in 0..100 {
            let t = tables[rng.next_below(tables.len() as u64) as usize];
            mgr.append_slot(t).unwrap();
            for &t in &tables {
                let table = mgr.table(t);
                let waste = table.num_blocks() * mgr.block_size() - table.filled_slots();
                assert!(waste <= mgr.block_size() - 1);
            }
            mgr.check_invariants().unwrap();
        }
    }

    #[test]
    fn randomized_ops_preserve_conservation_laws() {
        let mut mgr = BlockManager::new(48, 48, 4, Some(1));
        let mut rng = SplitMix64::new(0xC0FFEE);
        let mut resident: Vec<TableId> = Vec::new();
        let mut swapped: Vec<TableId> = Vec::new();
        for step in 0..4000 {
            match rng.next_below(100) {
                0..=24 => {
                    let len = 1 + rng.next_below(12) as usize;
                    if mgr.gpu_free_blocks() > mgr.blocks_needed(len) {
                        resident.push(mgr.allocate(len).unwrap());
                    }
                }
                25..=54 => {
                    if !resident.is_empty() && mgr.gpu_free_blocks() > 0 {
                        let t = resident[rng.next_below(resident.len() as u64) as usize];
                        mgr.append_slot(t).unwrap();
                    }
                }
                55..=69 => {
                    if !resident.is_empty() {
                        let t = resident[rng.next_below(resident.len() as u64) as usize];
                        resident.push(mgr.fork(t));
                    }
                }
                70..=84 => {
                    if !resident.is_empty() {
                        let i = rng.next_below(resident.len() as u64) as usize;
                        mgr.free(resident.swap_remove(i));
                    }
                }
                85..=92 => {
                    if !resident.is_empty() {
                        let i = rng.next_below(resident.len() as u64) as usize;
                        let t = resident[i];
                        if mgr.can_swap_out(&[t]) {
                            mgr.swap_out(&[t]).unwrap();
                            resident.swap_remove(i);
                            swapped.push(t);
                        }
                    }
                }
                _ => {
                    if !swapped.is_empty() {
                        let i = rng.next_below(swapped.len() as u64) as usize;
                        let t = swapped[i];
                        if mgr.can_swap_in(&[t]) {
                            mgr.swap_in(&[t]).unwrap();
                            swapped.swap_remove(i);
                            resident.push(t);
                        }
                    }
                }
            }
            if let Err(e) = mgr.check_invariants() {
                panic!("invariant violated at step {step}: {e}");
            }
        }
        for t in resident.into_iter().chain(swapped) {
            mgr.free(t);
        }
        assert_eq!(mgr.gpu_free_blocks(), 48);
        assert_eq!(mgr.cpu_blocks_in_use(), 0);
        mgr.check_invariants().unwrap();
    }

    #[test]
    #[should_panic(expected = "with refcount 2")]
    fn writing_a_shared_block_is_a_contract_violation() {
        let mut mgr = manager(8, 4);
        let parent = mgr.allocate(4).unwrap();
        let _child = mgr.fork(parent);
        let block = mgr.table(parent).entries()[0].block;
        mgr.assert_writable(PoolKind::Gpu, block);
    }

    #[test]
    fn truncate_drops_only_a_partial_tail() {
        let mut mgr = manager(8, 4);
        let t = mgr.allocate(10).unwrap();
        mgr.truncate_to_full_blocks(t);
        assert_eq!(mgr.table(t).num_blocks(), 2);
        assert_eq!(mgr.gpu_free_blocks(), 6);
        // Already-full tables are untouched.
        mgr.truncate_to_full_blocks(t);
        assert_eq!(mgr.table(t).num_blocks(), 2);
        mgr.check_invariants().unwrap();
    }

    #[test]
    fn debug_dump_reports_pools_and_tables() {
        let mut mgr = manager(8, 4);
        let _t = mgr.allocate(5).unwrap();
        let dump = mgr.debug_dump();
        assert_eq!(dump["gpu"]["num_blocks"], 8);
        assert_eq!(dump["gpu"]["free"], 6);
        assert_eq!(dump["tables"].as_array().unwrap().len(), 1);
    }
}
