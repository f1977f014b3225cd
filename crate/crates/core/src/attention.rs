//! Exact attention kernels over block-paged and contiguous KV storage.
//!
//! Everything is double precision. All three read paths (paged blocks,
//! interleaved per-sequence buffers, flat K/V matrices) accumulate in the
//! same position order with the same two-pass max-subtracted softmax, so
//! their outputs agree bit for bit on identical inputs.

use crate::block_manager::{BlockId, BlockTable, CowDirective, SwapDirective};

/// Dense slab of KV data for one pool, laid out as
/// `[block][layer][head][slot][key|value][head_dim]`.
///
/// Keeping every layer and head of a token inside one physical block means
/// a single block table per sequence covers the whole model.
pub struct KvStorage {
    num_blocks: usize,
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    block_size: usize,
    data: Vec<f64>,
}

impl KvStorage {
    pub fn new(
        num_blocks: usize,
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        block_size: usize,
    ) -> Self {
        let len = num_blocks * num_layers * num_heads * block_size * 2 * head_dim;
        Self {
            num_blocks,
            num_layers,
            num_heads,
            head_dim,
            block_size,
            data: vec![0.0; len],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Doubles per block across all layers, heads, and slots.
    pub fn block_len(&self) -> usize {
        self.num_layers * self.num_heads * self.block_size * 2 * self.head_dim
    }

    #[inline]
    fn offset(&self, block: BlockId, layer: usize, head: usize, slot: usize) -> usize {
        debug_assert!(block.0 < self.num_blocks);
        debug_assert!(layer < self.num_layers && head < self.num_heads);
        debug_assert!(slot < self.block_size);
        (((block.0 * self.num_layers + layer) * self.num_heads + head) * self.block_size + slot)
            * 2
            * self.head_dim
    }

    /// Write the key/value pair for one (block, slot, layer, head). The
    /// caller is responsible for copy-on-write having been resolved: the
    /// block must be exclusively owned.
    pub fn write_kv(
        &mut self,
        block: BlockId,
        slot: usize,
        layer: usize,
        head: usize,
        k: &[f64],
        v: &[f64],
    ) {
        assert!(slot < self.block_size, "slot {slot} out of range");
        assert_eq!(k.len(), self.head_dim);
        assert_eq!(v.len(), self.head_dim);
        let off = self.offset(block, layer, head, slot);
        self.data[off..off + self.head_dim].copy_from_slice(k);
        self.data[off + self.head_dim..off + 2 * self.head_dim].copy_from_slice(v);
    }

    pub fn key(&self, block: BlockId, slot: usize, layer: usize, head: usize) -> &[f64] {
        let off = self.offset(block, layer, head, slot);
        &self.data[off..off + self.head_dim]
    }

    pub fn value(&self, block: BlockId, slot: usize, layer: usize, head: usize) -> &[f64] {
        let off = self.offset(block, layer, head, slot) + self.head_dim;
        &self.data[off..off + self.head_dim]
    }

    /// Raw payload of one block, for snapshots and byte-level comparisons.
    pub fn block_payload(&self, block: BlockId) -> &[f64] {
        let len = self.block_len();
        let off = block.0 * len;
        &self.data[off..off + len]
    }

    /// Copy a whole block within this storage.
    pub fn copy_block(&mut self, src: BlockId, dst: BlockId) {
        assert_ne!(src, dst, "copy onto itself");
        let len = self.block_len();
        self.data.copy_within(src.0 * len..(src.0 + 1) * len, dst.0 * len);
    }

    fn copy_block_from(&mut self, other: &KvStorage, src: BlockId, dst: BlockId) {
        let len = self.block_len();
        assert_eq!(len, other.block_len(), "pools must share block geometry");
        self.data[dst.0 * len..(dst.0 + 1) * len]
            .copy_from_slice(&other.data[src.0 * len..(src.0 + 1) * len]);
    }
}

/// Execute a copy-on-write directive: duplicate the source block's entire
/// payload into the destination.
pub fn execute_cow(storage: &mut KvStorage, directive: CowDirective) {
    storage.copy_block(directive.src, directive.dst);
}

/// Execute a swap directive between the gpu and cpu slabs. `pairs` holds
/// `(gpu_block, cpu_block)`; the direction picks which side is the source.
pub fn execute_swap(gpu: &mut KvStorage, cpu: &mut KvStorage, directive: &SwapDirective) {
    use crate::block_manager::SwapDirection;
    for &(gpu_block, cpu_block) in &directive.pairs {
        match directive.direction {
            SwapDirection::Out => cpu.copy_block_from(gpu, gpu_block, cpu_block),
            SwapDirection::In => gpu.copy_block_from(cpu, cpu_block, gpu_block),
        }
    }
}

/// One attention read: a query vector for a single (layer, head) plus the
/// block table locating the context.
pub struct AttentionQuery<'a> {
    pub q: &'a [f64],
    pub context_len: usize,
    pub table: &'a BlockTable,
    pub layer: usize,
    pub head: usize,
}

/// Attention over explicit K/V matrices (`n x head_dim`, row-major).
/// Scores are scaled by `1/sqrt(head_dim)`; the softmax subtracts the
/// global maximum before exponentiating.
pub fn contiguous_attention(q: &[f64], keys: &[f64], values: &[f64], n: usize) -> Vec<f64> {
    assert!(n >= 1, "attention needs at least one context position");
    let d = q.len();
    assert_eq!(keys.len(), n * d);
    assert_eq!(values.len(), n * d);
    let scale = 1.0 / (d as f64).sqrt();

    let mut scores = Vec::with_capacity(n);
    for pos in 0..n {
        let k = &keys[pos * d..(pos + 1) * d];
        scores.push(dot(q, k) * scale);
    }
    softmax_weighted_sum(&scores, d, |pos| &values[pos * d..(pos + 1) * d])
}

/// Attention over a sequence's block table: key/value blocks are fetched
/// from wherever they physically live and combined block by block; the
/// softmax denominator spans all blocks of the context.
pub fn paged_attention(query: &AttentionQuery, storage: &KvStorage) -> Vec<f64> {
    let n = query.context_len;
    assert!(n >= 1, "attention needs at least one context position");
    debug_assert!(n <= query.table.filled_slots());
    let d = storage.head_dim;
    assert_eq!(query.q.len(), d);
    let scale = 1.0 / (d as f64).sqrt();
    let block_size = storage.block_size;

    let mut scores = Vec::with_capacity(n);
    let mut pos = 0;
    for entry in query.table.entries() {
        let take = entry.filled.min(n - pos);
        for slot in 0..take {
            let k = storage.key(entry.block, slot, query.layer, query.head);
            scores.push(dot(query.q, k) * scale);
        }
        pos += take;
        if pos == n {
            break;
        }
        debug_assert_eq!(entry.filled, block_size, "only the last block may be partial");
    }
    debug_assert_eq!(scores.len(), n);

    softmax_weighted_sum(&scores, d, |p| {
        let entry = query.table.entries()[p / block_size];
        storage.value(entry.block, p % block_size, query.layer, query.head)
    })
}

/// Attention over an interleaved per-position buffer
/// (`[pos][key|value][head_dim]`), used by the contiguous-reservation
/// baselines.
pub fn interleaved_attention(q: &[f64], kv: &[f64], n: usize) -> Vec<f64> {
    assert!(n >= 1, "attention needs at least one context position");
    let d = q.len();
    let stride = 2 * d;
    assert!(kv.len() >= n * stride);
    let scale = 1.0 / (d as f64).sqrt();

    let mut scores = Vec::with_capacity(n);
    for pos in 0..n {
        let k = &kv[pos * stride..pos * stride + d];
        scores.push(dot(q, k) * scale);
    }
    softmax_weighted_sum(&scores, d, |pos| &kv[pos * stride + d..(pos + 1) * stride])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Shared second pass: exponentiate against the global max, accumulate the
/// weighted value sum and the normalizer in position order, divide once.
fn softmax_weighted_sum<'a, F>(scores: &[f64], d: usize, value_at: F) -> Vec<f64>
where
    F: Fn(usize) -> &'a [f64],
{
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (pos, &s) in scores.iter().enumerate() {
        let w = (s - max).exp();
        den += w;
        let v = value_at(pos);
        for i in 0..d {
            num[i] += w * v[i];
        }
    }
    for x in &mut num {
        *x /= den;
    }
    num
}

/// Contiguous per-sequence KV buffer for the baseline allocators, laid out
/// as `[layer][head][pos][key|value][head_dim]` with a fixed capacity.
pub struct ContigKv {
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    capacity: usize,
    data: Vec<f64>,
}

impl ContigKv {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, capacity: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            capacity,
            data: vec![0.0; num_layers * num_heads * capacity * 2 * head_dim],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    #[inline]
    fn base(&self, layer: usize, head: usize) -> usize {
        (layer * self.num_heads + head) * self.capacity * 2 * self.head_dim
    }

    pub fn write_kv(
        &mut self,
        pos: usize,
        layer: usize,
        head: usize,
        k: &[f64],
        v: &[f64],
    ) {
        assert!(pos < self.capacity, "position {pos} beyond reservation");
        let off = self.base(layer, head) + pos * 2 * self.head_dim;
        self.data[off..off + self.head_dim].copy_from_slice(k);
        self.data[off + self.head_dim..off + 2 * self.head_dim].copy_from_slice(v);
    }

    /// Interleaved KV slab for one (layer, head), covering `n` positions.
    pub fn kv_slice(&self, layer: usize, head: usize, n: usize) -> &[f64] {
        let off = self.base(layer, head);
        &self.data[off..off + n * 2 * self.head_dim]
    }

    /// Copy the first `n` positions of every layer/head from `src`.
    pub fn copy_prefix_from(&mut self, src: &ContigKv, n: usize) {
        assert!(n <= self.capacity && n <= src.capacity);
        let width = 2 * self.head_dim;
        for layer in 0..self.num_layers {
            for head in 0..self.num_heads {
                let s = src.base(layer, head);
                let d = self.base(layer, head);
                self.data[d..d + n * width].copy_from_slice(&src.data[s..s + n * width]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_manager::BlockManager;
    use crate::rng::SplitMix64;

    fn random_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.next_symmetric()).collect()
    }

    /// Straightforward evaluation of the attention definition: normalize
    /// each weight individually, then take the weighted average. Kept
    /// independent of the production kernels.
    fn attention_oracle(q: &[f64], keys: &[f64], values: &[f64], n: usize) -> Vec<f64> {
        let d = q.len();
        let scale = 1.0 / (d as f64).sqrt();
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                (0..d).map(|i| q[i] * keys[j * d + i]).sum::<f64>() * scale
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
        let mut out = vec![0.0; d];
        for (j, w) in weights.iter().enumerate() {
            for i in 0..d {
                out[i] += w * values[j * d + i];
            }
        }
        out
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Build a single-layer single-head paged setup holding the given K/V
    /// rows, allocating extra tables first so the block placement is not
    /// contiguous.
    fn paged_setup(
        keys: &[f64],
        values: &[f64],
        n: usize,
        d: usize,
        block_size: usize,
        scramble: u64,
    ) -> (BlockManager, KvStorage, crate::block_manager::TableId) {
        let blocks_needed = n.div_ceil(block_size);
        let pool = blocks_needed * 3 + 4;
        let mut mgr = BlockManager::new(pool, pool, block_size, Some(1));
        let mut storage = KvStorage::new(pool, 1, 1, d, block_size);
        // Scramble the free list so the table lands on non-adjacent ids.
        let mut rng = SplitMix64::new(scramble);
        let mut holes = Vec::new();
        for _ in 0..rng.next_below(3) + 1 {
            holes.push(mgr.allocate(1 + rng.next_below(2 * block_size as u64) as usize).unwrap());
        }
        let table = mgr.allocate(n).unwrap();
        for h in holes {
            mgr.free(h);
        }
        for pos in 0..n {
            let (entry, slot) = mgr.table(table).locate(pos, block_size);
            storage.write_kv(
                entry.block,
                slot,
                0,
                0,
                &keys[pos * d..(pos + 1) * d],
                &values[pos * d..(pos + 1) * d],
            );
        }
        (mgr, storage, table)
    }

    #[test]
    fn singleton_softmax_returns_the_value_row() {
        let q = vec![0.3, -0.7];
        let k = vec![1.0, 2.0];
        let v = vec![5.0, -3.0];
        let out = contiguous_attention(&q, &k, &v, 1);
        assert_eq!(out, v);
    }

    #[test]
    fn equal_scores_average_the_values() {
        // Query orthogonal to every key: all scores are zero.
        let q = vec![1.0, 0.0];
        let keys = vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0];
        let values = vec![3.0, 0.0, 6.0, 9.0, 0.0, 3.0];
        let out = contiguous_attention(&q, &keys, &values, 3);
        assert!(max_abs_diff(&out, &[3.0, 4.0]) <= 1e-12);
    }

    #[test]
    fn matches_two_loop_oracle() {
        let mut rng = SplitMix64::new(37);
        let (n, d) = (37, 8);
        let q = random_vec(&mut rng, d);
        let keys = random_vec(&mut rng, n * d);
        let values = random_vec(&mut rng, n * d);
        let got = contiguous_attention(&q, &keys, &values, n);
        let expect = attention_oracle(&q, &keys, &values, n);
        assert!(max_abs_diff(&got, &expect) <= 1e-12);
    }

    #[test]
    #[should_panic(expected = "at least one context position")]
    fn empty_context_rejected() {
        contiguous_attention(&[1.0], &[], &[], 0);
    }

    #[test]
    fn paged_matches_gathered_contiguous_across_blocks() {
        let mut rng = SplitMix64::new(11);
        let (n, d, block_size) = (11, 8, 4); // spreads over 3 blocks
        let q = random_vec(&mut rng, d);
        let keys = random_vec(&mut rng, n * d);
        let values = random_vec(&mut rng, n * d);
        let (mgr, storage, table) = paged_setup(&keys, &values, n, d, block_size, 999);
        let got = paged_attention(
            &AttentionQuery {
                q: &q,
                context_len: n,
                table: mgr.table(table),
                layer: 0,
                head: 0,
            },
            &storage,
        );
        let expect = contiguous_attention(&q, &keys, &values, n);
        assert!(max_abs_diff(&got, &expect) <= 1e-9);
    }

    #[test]
    fn single_block_degenerates_to_contiguous() {
        let mut rng = SplitMix64::new(21);
        let (n, d) = (9, 4);
        let q = random_vec(&mut rng, d);
        let keys = random_vec(&mut rng, n * d);
        let values = random_vec(&mut rng, n * d);
        let (mgr, storage, table) = paged_setup(&keys, &values, n, d, 16, 5);
        let got = paged_attention(
            &AttentionQuery {
                q: &q,
                context_len: n,
                table: mgr.table(table),
                layer: 0,
                head: 0,
            },
            &storage,
        );
        let expect = contiguous_attention(&q, &keys, &values, n);
        assert!(max_abs_diff(&got, &expect) <= 1e-12);
    }

    #[test]
    fn output_invariant_across_block_sizes() {
        let mut rng = SplitMix64::new(77);
        let (n, d) = (23, 8);
        let q = random_vec(&mut rng, d);
        let keys = random_vec(&mut rng, n * d);
        let values = random_vec(&mut rng, n * d);
        let reference = contiguous_attention(&q, &keys, &values, n);
        for block_size in [1usize, 2, 4, 8, 16] {
            let (mgr, storage, table) = paged_setup(&keys, &values, n, d, block_size, 404);
            let got = paged_attention(
                &AttentionQuery {
                    q: &q,
                    context_len: n,
                    table: mgr.table(table),
                    layer: 0,
                    head: 0,
                },
                &storage,
            );
            assert!(
                max_abs_diff(&got, &reference) <= 1e-9,
                "block_size {block_size}"
            );
        }
    }

    #[test]
    fn normalization_sums_to_one_through_the_kernel() {
        // With all value vectors equal to ones, the output is exactly the
        // sum of the attention weights.
        let mut rng = SplitMix64::new(5);
        let (n, d, block_size) = (29, 8, 4);
        let q = random_vec(&mut rng, d);
        let keys = random_vec(&mut rng, n * d);
        let values = vec![1.0; n * d];
        let (mgr, storage, table) = paged_setup(&keys, &values, n, d, block_size, 8);
        let out = paged_attention(
            &AttentionQuery {
                q: &q,
                context_len: n,
                table: mgr.table(table),
                layer: 0,
                head: 0,
            },
            &storage,
        );
        for x in out {
            assert!((x - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn huge_score_spread_stays_finite() {
        let d = 4;
        let n = 3;
        let q = vec![350.0, 0.0, 0.0, 0.0];
        // Scores (pre-scaling): +700, 0, -700.
        let keys = vec![
            2.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            -2.0, 0.0, 0.0, 0.0,
        ];
        let values = random_vec(&mut SplitMix64::new(1), n * d);
        let out = contiguous_attention(&q, &keys, &values, n);
        assert!(out.iter().all(|x| x.is_finite()));
        // The top-scoring row dominates completely.
        assert!(max_abs_diff(&out, &values[0..d]) <= 1e-12);
    }

    #[test]
    fn physically_permuted_placement_changes_nothing() {
        let mut rng = SplitMix64::new(55);
        let (n, d, block_size) = (17, 8, 4);
        let q = random_vec(&mut rng, d);
        let keys = random_vec(&mut rng, n * d);
        let values = random_vec(&mut rng, n * d);
        let mut outs = Vec::new();
        for scramble in [1u64, 17, 23456, 9] {
            let (mgr, storage, table) = paged_setup(&keys, &values, n, d, block_size, scramble);
            outs.push(paged_attention(
                &AttentionQuery {
                    q: &q,
                    context_len: n,
                    table: mgr.table(table),
                    layer: 0,
                    head: 0,
                },
                &storage,
            ));
        }
        for o in &outs[1..] {
            assert!(max_abs_diff(o, &outs[0]) <= 1e-12);
        }
    }

    #[test]
    fn write_then_read_roundtrip_and_isolation() {
        let mut storage = KvStorage::new(4, 2, 2, 8, 4);
        let mut rng = SplitMix64::new(2);
        let k = random_vec(&mut rng, 8);
        let v = random_vec(&mut rng, 8);
        storage.write_kv(BlockId(2), 3, 1, 0, &k, &v);
        assert_eq!(storage.key(BlockId(2), 3, 1, 0), &k[..]);
        assert_eq!(storage.value(BlockId(2), 3, 1, 0), &v[..]);
        // Slots 0..2 of the same (block, layer, head) are untouched.
        for slot in 0..3 {
            assert!(storage.key(BlockId(2), slot, 1, 0).iter().all(|&x| x == 0.0));
            assert!(storage.value(BlockId(2), slot, 1, 0).iter().all(|&x| x == 0.0));
        }
        // Other blocks untouched.
        assert!(storage.block_payload(BlockId(1)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cow_copy_duplicates_the_filled_payload() {
        let mut storage = KvStorage::new(4, 2, 2, 8, 4);
        let mut rng = SplitMix64::new(3);
        for slot in 0..4 {
            for layer in 0..2 {
                for head in 0..2 {
                    let k = random_vec(&mut rng, 8);
                    let v = random_vec(&mut rng, 8);
                    storage.write_kv(BlockId(0), slot, layer, head, &k, &v);
                }
            }
        }
        execute_cow(&mut storage, CowDirective { src: BlockId(0), dst: BlockId(3) });
        assert_eq!(storage.block_payload(BlockId(0)), storage.block_payload(BlockId(3)));
    }

    #[test]
    fn swap_roundtrip_restores_gpu_contents() {
        use crate::block_manager::{SwapDirection, SwapDirective};
        let mut gpu = KvStorage::new(4, 1, 1, 4, 2);
        let mut cpu = KvStorage::new(4, 1, 1, 4, 2);
        let mut rng = SplitMix64::new(4);
        for b in 0..3 {
            for slot in 0..2 {
                let k = random_vec(&mut rng, 4);
                let v = random_vec(&mut rng, 4);
                gpu.write_kv(BlockId(b), slot, 0, 0, &k, &v);
            }
        }
        let originals: Vec<Vec<f64>> =
            (0..3).map(|b| gpu.block_payload(BlockId(b)).to_vec()).collect();

        let out = SwapDirective {
            direction: SwapDirection::Out,
            pairs: vec![(BlockId(0), BlockId(1)), (BlockId(1), BlockId(2)), (BlockId(2), BlockId(0))],
        };
        execute_swap(&mut gpu, &mut cpu, &out);
        // Clobber the gpu side, then swap back in.
        for b in 0..3 {
            gpu.copy_block(BlockId(3), BlockId(b));
        }
        let inn = SwapDirective { direction: SwapDirection::In, pairs: out.pairs.clone() };
        execute_swap(&mut gpu, &mut cpu, &inn);
        for (b, original) in originals.iter().enumerate() {
            assert_eq!(gpu.block_payload(BlockId(b)), &original[..]);
        }
    }

    #[test]
    fn empty_swap_directive_is_a_noop() {
        use crate::block_manager::{SwapDirection, SwapDirective};
        let mut gpu = KvStorage::new(2, 1, 1, 4, 2);
        let mut cpu = KvStorage::new(2, 1, 1, 4, 2);
        gpu.write_kv(BlockId(0), 0, 0, 0, &[1.0; 4], &[2.0; 4]);
        let before = gpu.block_payload(BlockId(0)).to_vec();
        execute_swap(
            &mut gpu,
            &mut cpu,
            &SwapDirective { direction: SwapDirection::Out, pairs: vec![] },
        );
        assert_eq!(gpu.block_payload(BlockId(0)), &before[..]);
        assert!(cpu.block_payload(BlockId(0)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn interleaved_matches_contiguous() {
        let mut rng = SplitMix64::new(66);
        let (n, d) = (13, 8);
        let q = random_vec(&mut rng, d);
        let keys = random_vec(&mut rng, n * d);
        let values = random_vec(&mut rng, n * d);
        let mut buf = ContigKv::new(1, 1, d, n);
        for pos in 0..n {
            buf.write_kv(pos, 0, 0, &keys[pos * d..(pos + 1) * d], &values[pos * d..(pos + 1) * d]);
        }
        let got = interleaved_attention(&q, buf.kv_slice(0, 0, n), n);
        let expect = contiguous_attention(&q, &keys, &values, n);
        assert!(max_abs_diff(&got, &expect) == 0.0);
    }
}
