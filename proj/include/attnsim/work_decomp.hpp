#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "attnsim/gpu.hpp"
#include "attnsim/types.hpp"

// Turns a hybrid batch (one prefill chunk + ongoing decodes) into
// CTA-granularity work units with abstract compute/memory costs attached.
// Cost units: 1 compute unit = one multiply-accumulate over a head_dim
// vector; 1 memory unit = one element read. Only ratios reach the simulator.

namespace attnsim {

struct PrefillSpec {
    long chunk_size = 0;       // tokens in this chunk
    long context_len = 0;      // full prompt length
    long position_offset = 0;  // tokens before this chunk
};

struct DecodeSpec {
    long context_len = 0;
};

struct HybridBatchSpec {
    std::optional<PrefillSpec> prefill;
    std::vector<DecodeSpec> decodes;
    ModelShape shape;

    void validate() const {
        shape.validate();
        if (!prefill && decodes.empty())
            throw std::invalid_argument("HybridBatchSpec: batch is empty");
        if (prefill) {
            if (prefill->chunk_size < 1)
                throw std::invalid_argument("HybridBatchSpec: chunk_size must be >= 1");
            if (prefill->position_offset < 0 ||
                prefill->position_offset + prefill->chunk_size > prefill->context_len)
                throw std::invalid_argument("HybridBatchSpec: chunk exceeds prompt");
        }
        for (const auto& d : decodes)
            if (d.context_len < 1)
                throw std::invalid_argument("HybridBatchSpec: decode context must be >= 1");
    }
};

struct TileConfig {
    long prefill_tile_q = 128;
    long decode_tile_q = 16;  // CUTLASS minimum; keeps decode off the tensor cores
    long tile_kv = 64;
    int warps_per_cta = 4;
    int ctas_per_sm = 2;  // 2 for prefill-dominant batches, 4 otherwise
    double shared_mem_per_cta = 65536.0;
    bool virtual_decode = false;
    // "Two full waves" cap on prefill splits, one wave = num_sms CTAs.
    int split_wave_cap = 2;
};

struct CtaTask {
    OpKind op = OpKind::Decode;
    int request_id = 0;
    int kv_head = 0;
    int q_tile = 0;
    Interval kv_split;
    bool is_virtual = false;
    double compute_work = 0;  // head_dim-vector MACs
    double memory_work = 0;   // elements
    long barrier_segments = 1;
    int slot_quanta = 4;  // warps occupied; a full CTA takes warps_per_cta
};

struct WorkDecomposition {
    std::vector<CtaTask> prefill_tasks;
    std::vector<CtaTask> decode_tasks;
    TileConfig config;

    size_t total_tasks() const { return prefill_tasks.size() + decode_tasks.size(); }
};

namespace detail {

// Serial-cost estimate used only to classify a batch as prefill- or
// decode-dominant. Tile shape barely moves these totals, so a fixed probe
// tile is fine.
inline double estimate_prefill_serial(const HybridBatchSpec& batch, const GpuSpec& gpu) {
    if (!batch.prefill) return 0.0;
    const auto& p = *batch.prefill;
    const ModelShape& s = batch.shape;
    const long probe_tile = 128;
    double compute = 0, memory = 0;
    for (long t0 = 0; t0 < p.chunk_size; t0 += probe_tile) {
        const long rows = std::min(probe_tile, p.chunk_size - t0);
        const long span = p.position_offset + t0 + rows;  // keys visible to the tile
        compute += static_cast<double>(probe_tile) * s.num_q_heads * span;
        memory += 2.0 * span * s.head_dim * s.num_kv_heads +
                  static_cast<double>(rows) * s.num_q_heads * s.head_dim;
    }
    return std::max(compute / gpu.aggregate_compute_rate(), memory / gpu.mem_bandwidth_total);
}

inline double estimate_decode_serial(const HybridBatchSpec& batch, const GpuSpec& gpu) {
    const ModelShape& s = batch.shape;
    double compute = 0, memory = 0;
    for (const auto& d : batch.decodes) {
        compute += 16.0 * d.context_len * s.num_kv_heads;
        memory += 2.0 * d.context_len * s.head_dim * s.num_kv_heads;
    }
    return std::max(compute / gpu.aggregate_compute_rate(), memory / gpu.mem_bandwidth_total);
}

}  // namespace detail

// The two occupancy settings: 2 CTAs/SM buys each CTA enough shared memory
// for large prefill tiles, 4 CTAs/SM packs more decode slots. Decode tiles
// stay at 16 rows in fused mode.
inline TileConfig make_tile_config(int ctas_per_sm) {
    TileConfig cfg;
    if (ctas_per_sm == 2) {
        cfg.ctas_per_sm = 2;
        cfg.prefill_tile_q = 128;
        cfg.tile_kv = 64;
        cfg.shared_mem_per_cta = 65536.0;
    } else if (ctas_per_sm == 4) {
        cfg.ctas_per_sm = 4;
        cfg.prefill_tile_q = 64;
        cfg.tile_kv = 32;
        cfg.shared_mem_per_cta = 32768.0;
    } else {
        throw std::invalid_argument("make_tile_config: ctas_per_sm must be 2 or 4");
    }
    cfg.decode_tile_q = 16;
    return cfg;
}

// Picks 2 CTAs/SM for prefill-dominant batches and 4 otherwise.
inline TileConfig select_tile_config(const HybridBatchSpec& batch, const GpuSpec& gpu) {
    batch.validate();
    const bool prefill_dominant =
        detail::estimate_prefill_serial(batch, gpu) >= detail::estimate_decode_serial(batch, gpu) &&
        batch.prefill.has_value();
    return make_tile_config(prefill_dominant ? 2 : 4);
}

// Largest split count keeping prefill CTAs within `split_wave_cap` waves of
// num_sms CTAs each; never below 1.
inline long limit_prefill_splits(long natural_parallelism, const GpuSpec& gpu,
                                 const TileConfig& config) {
    if (natural_parallelism < 1)
        throw std::invalid_argument("limit_prefill_splits: parallelism must be >= 1");
    const long cap = static_cast<long>(config.split_wave_cap) * gpu.num_sms;
    return std::max<long>(1, cap / natural_parallelism);
}

// One CTA per (decode request x kv head); with virtual decode CTAs each full
// CTA becomes warps_per_cta warp-granular tasks splitting its kv range, each
// using 1/warps_per_cta of the CTA's shared memory and slot.
inline std::vector<CtaTask> decompose_decode(const HybridBatchSpec& batch,
                                             const TileConfig& config) {
    const ModelShape& s = batch.shape;
    std::vector<CtaTask> tasks;
    tasks.reserve(batch.decodes.size() * s.num_kv_heads);
    for (size_t r = 0; r < batch.decodes.size(); ++r) {
        const long ctx = batch.decodes[r].context_len;
        for (int h = 0; h < s.num_kv_heads; ++h) {
            if (!config.virtual_decode) {
                CtaTask t;
                t.op = OpKind::Decode;
                t.request_id = static_cast<int>(r);
                t.kv_head = h;
                t.kv_split = {0, ctx};
                t.compute_work = static_cast<double>(config.decode_tile_q) * ctx;
                t.memory_work = 2.0 * ctx * s.head_dim;
                t.barrier_segments = std::max<long>(1, ceil_div(ctx, config.tile_kv));
                t.slot_quanta = config.warps_per_cta;
                tasks.push_back(t);
            } else {
                const long base = ctx / config.warps_per_cta;
                const long rem = ctx % config.warps_per_cta;
                long pos = 0;
                for (int w = 0; w < config.warps_per_cta; ++w) {
                    const long len = base + (w < rem ? 1 : 0);
                    CtaTask t;
                    t.op = OpKind::Decode;
                    t.request_id = static_cast<int>(r);
                    t.kv_head = h;
                    t.kv_split = {pos, pos + len};
                    t.is_virtual = true;
                    t.compute_work = static_cast<double>(config.decode_tile_q) * len;
                    t.memory_work = 2.0 * len * s.head_dim;
                    t.barrier_segments = std::max<long>(1, ceil_div(len, config.tile_kv));
                    t.slot_quanta = 1;
                    tasks.push_back(t);
                    pos += len;
                }
            }
        }
    }
    return tasks;
}

// q-tiles x kv heads x kv splits. Every split of a q-tile re-reads that
// tile's query rows; the KV bytes for a tile are constant across splits.
inline std::vector<CtaTask> decompose_prefill(const HybridBatchSpec& batch,
                                              const TileConfig& config, const GpuSpec& gpu) {
    if (!batch.prefill) throw std::invalid_argument("decompose_prefill: no prefill in batch");
    const auto& p = *batch.prefill;
    const ModelShape& s = batch.shape;
    const int group = s.group_size();

    const long q_tiles = ceil_div(p.chunk_size, config.prefill_tile_q);
    const long natural = q_tiles * s.num_kv_heads;
    const long splits = limit_prefill_splits(natural, gpu, config);

    std::vector<CtaTask> tasks;
    tasks.reserve(natural * splits);
    for (long tile = 0; tile < q_tiles; ++tile) {
        const long rows = std::min(config.prefill_tile_q, p.chunk_size - tile * config.prefill_tile_q);
        const long kv_count = p.position_offset + tile * config.prefill_tile_q + rows;
        // A split below one kv tile would waste the whole tile's work.
        const long eff_splits = std::min(splits, ceil_div(kv_count, config.tile_kv));
        const long base = kv_count / eff_splits;
        const long rem = kv_count % eff_splits;
        for (int h = 0; h < s.num_kv_heads; ++h) {
            long pos = 0;
            for (long sp = 0; sp < eff_splits; ++sp) {
                const long len = base + (sp < rem ? 1 : 0);
                CtaTask t;
                t.op = OpKind::Prefill;
                t.request_id = 0;
                t.kv_head = h;
                t.q_tile = static_cast<int>(tile);
                t.kv_split = {pos, pos + len};
                t.compute_work = static_cast<double>(config.prefill_tile_q) * group * len;
                t.memory_work = 2.0 * len * s.head_dim +
                                static_cast<double>(rows) * group * s.head_dim;
                t.barrier_segments = std::max<long>(1, ceil_div(len, config.tile_kv));
                t.slot_quanta = config.warps_per_cta;
                tasks.push_back(t);
                pos += len;
            }
        }
    }
    return tasks;
}

inline WorkDecomposition decompose_hybrid(const HybridBatchSpec& batch, const GpuSpec& gpu,
                                          const TileConfig& config) {
    batch.validate();
    WorkDecomposition wd;
    wd.config = config;
    if (batch.prefill) wd.prefill_tasks = decompose_prefill(batch, config, gpu);
    if (!batch.decodes.empty()) wd.decode_tasks = decompose_decode(batch, config);
    return wd;
}

inline WorkDecomposition decompose_hybrid(const HybridBatchSpec& batch, const GpuSpec& gpu) {
    return decompose_hybrid(batch, gpu, select_tile_config(batch, gpu));
}

}  // namespace attnsim
