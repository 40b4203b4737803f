#include <catch2/catch_amalgamated.hpp>

#include <numeric>

#include "attnsim/rng.hpp"
#include "attnsim/work_decomp.hpp"

using namespace attnsim;

namespace {

const ModelShape kYi{32, 4, 128, 11.3137};         // Yi-6B-like
const ModelShape kLlamaTp2{16, 4, 128, 11.3137};   // Llama-3-8B-like, per-GPU half

HybridBatchSpec decode_batch(int n, long ctx, ModelShape shape = kYi) {
    HybridBatchSpec b;
    b.shape = shape;
    b.decodes.assign(n, {ctx});
    return b;
}

double sum_compute(const std::vector<CtaTask>& ts) {
    double s = 0;
    for (const auto& t : ts) s += t.compute_work;
    return s;
}
double sum_memory(const std::vector<CtaTask>& ts) {
    double s = 0;
    for (const auto& t : ts) s += t.memory_work;
    return s;
}

}  // namespace

TEST_CASE("decode decomposition: one CTA per request x kv head") {
    GpuSpec gpu;
    TileConfig cfg;
    auto b54 = decode_batch(54, 16384);
    auto tasks = decompose_decode(b54, cfg);
    CHECK(tasks.size() == 216);

    auto b55 = decode_batch(55, 16384);
    auto t55 = decompose_decode(b55, cfg);
    CHECK(t55.size() == 220);
    // 4 CTAs beyond two full 108-SM waves.
    CHECK((long)t55.size() - 2 * gpu.num_sms == 4);

    for (const auto& t : tasks) {
        CHECK(t.op == OpKind::Decode);
        CHECK_FALSE(t.is_virtual);
        CHECK(t.kv_split == Interval{0, 16384});
    }
}

TEST_CASE("decode decomposition: empty decode list") {
    HybridBatchSpec b;
    b.shape = kYi;
    b.prefill = PrefillSpec{512, 16384, 0};
    CHECK(decompose_decode(b, TileConfig{}).empty());
}

TEST_CASE("virtual decode CTAs subdivide kv range and shared memory") {
    TileConfig cfg;
    cfg.virtual_decode = true;
    cfg.warps_per_cta = 4;
    auto b = decode_batch(1, 1000);
    auto tasks = decompose_decode(b, cfg);
    REQUIRE(tasks.size() == 16);  // 4 kv heads x 4 warps
    for (const auto& t : tasks) {
        CHECK(t.is_virtual);
        CHECK(t.slot_quanta == 1);  // quarter of a 4-warp CTA
    }

    // Work conservation against the unsubdivided decomposition.
    TileConfig full = cfg;
    full.virtual_decode = false;
    auto parents = decompose_decode(b, full);
    CHECK_THAT(sum_compute(tasks), Catch::Matchers::WithinRel(sum_compute(parents), 1e-12));
    CHECK_THAT(sum_memory(tasks), Catch::Matchers::WithinRel(sum_memory(parents), 1e-12));
    // Ranges partition [0, 1000) per (request, kv head).
    long covered = 0;
    for (const auto& t : tasks) covered += t.kv_split.length();
    CHECK(covered == 4 * 1000);
}

TEST_CASE("limit_prefill_splits") {
    GpuSpec gpu;  // 108 SMs
    TileConfig cfg;  // two-wave cap
    CHECK(limit_prefill_splits(16, gpu, cfg) == 13);
    CHECK(limit_prefill_splits(216, gpu, cfg) == 1);
    CHECK(limit_prefill_splits(500, gpu, cfg) == 1);
    CHECK(limit_prefill_splits(1, gpu, cfg) == 216);

    // Brute-force oracle: the largest s with parallelism * s <= 2 * sms.
    for (long par : {1L, 2L, 3L, 5L, 16L, 31L, 100L, 215L, 216L, 217L, 1000L}) {
        long best = 1;
        for (long s = 1; s <= 2L * gpu.num_sms; ++s)
            if (par * s <= 2L * gpu.num_sms) best = s;
        CHECK(limit_prefill_splits(par, gpu, cfg) == best);
    }
    CHECK_THROWS_AS(limit_prefill_splits(0, gpu, cfg), std::invalid_argument);
}

TEST_CASE("prefill decomposition: task count and split behavior") {
    GpuSpec gpu;
    HybridBatchSpec b;
    b.shape = kYi;

    SECTION("chunk 512, tile 128, single split") {
        b.prefill = PrefillSpec{512, 512, 0};
        TileConfig cfg;
        cfg.prefill_tile_q = 128;
        cfg.split_wave_cap = 0;  // forces split count 1 via the max(1, ...) floor
        auto tasks = decompose_prefill(b, cfg, gpu);
        CHECK(tasks.size() == 16);  // 4 tiles x 4 kv heads x 1
    }

    SECTION("full-prompt chunk has enough parallelism, no splits") {
        b.prefill = PrefillSpec{16384, 16384, 0};
        TileConfig cfg;
        auto tasks = decompose_prefill(b, cfg, gpu);
        // 128 tiles x 4 kv heads = 512 >= 216 natural CTAs -> 1 split each.
        CHECK(tasks.size() == 512);
    }

    SECTION("late chunk of a 16K prompt uses 13 splits") {
        b.prefill = PrefillSpec{512, 16384, 15872};
        TileConfig cfg;
        auto tasks = decompose_prefill(b, cfg, gpu);
        CHECK(tasks.size() == 4 * 4 * 13);  // 208, filling at most two waves
    }
}

TEST_CASE("prefill splits: KV bytes constant, one extra Q-tile read per split") {
    GpuSpec gpu;
    HybridBatchSpec b;
    b.shape = kYi;
    b.prefill = PrefillSpec{1024, 16384, 15360};  // 1K chunk at offset 15K
    TileConfig cfg;

    // Closed-form Q and KV element counts for one (tile, kv head) group.
    const long q_tiles = ceil_div(b.prefill->chunk_size, cfg.prefill_tile_q);
    const int group = b.shape.group_size();

    double prev_total = -1;
    for (int cap = 1; cap <= 4; ++cap) {
        cfg.split_wave_cap = cap;
        const long splits = limit_prefill_splits(q_tiles * b.shape.num_kv_heads, gpu, cfg);
        auto tasks = decompose_prefill(b, cfg, gpu);
        double kv_bytes = 0, q_bytes = 0;
        for (const auto& t : tasks) {
            kv_bytes += 2.0 * t.kv_split.length() * b.shape.head_dim;
            q_bytes += t.memory_work - 2.0 * t.kv_split.length() * b.shape.head_dim;
        }
        // KV total is independent of the split count.
        double expected_kv = 0;
        for (long tile = 0; tile < q_tiles; ++tile) {
            const long rows = std::min(cfg.prefill_tile_q,
                                       b.prefill->chunk_size - tile * cfg.prefill_tile_q);
            expected_kv += 2.0 * (b.prefill->position_offset + tile * cfg.prefill_tile_q + rows) *
                           b.shape.head_dim * b.shape.num_kv_heads;
        }
        CHECK_THAT(kv_bytes, Catch::Matchers::WithinRel(expected_kv, 1e-12));
        // Q reads grow linearly with the split count.
        double expected_q = 0;
        for (long tile = 0; tile < q_tiles; ++tile) {
            const long rows = std::min(cfg.prefill_tile_q,
                                       b.prefill->chunk_size - tile * cfg.prefill_tile_q);
            expected_q += (double)rows * group * b.shape.head_dim * b.shape.num_kv_heads * splits;
        }
        CHECK_THAT(q_bytes, Catch::Matchers::WithinRel(expected_q, 1e-12));
        double total = kv_bytes + q_bytes;
        CHECK(total > prev_total);
        prev_total = total;
    }
}

TEST_CASE("select_tile_config follows batch composition") {
    GpuSpec gpu;

    SECTION("compute-bound: 16K chunk with modest decode") {
        HybridBatchSpec b;
        b.shape = kLlamaTp2;
        b.prefill = PrefillSpec{16384, 16384, 0};
        b.decodes.assign(64, {12288});
        auto cfg = select_tile_config(b, gpu);
        CHECK(cfg.ctas_per_sm == 2);
        CHECK(cfg.prefill_tile_q == 128);
        CHECK(cfg.decode_tile_q == 16);
    }

    SECTION("memory-bound: 1K chunk, 80 decodes at 12K") {
        HybridBatchSpec b;
        b.shape = kLlamaTp2;
        b.prefill = PrefillSpec{1024, 12288, 11264};
        b.decodes.assign(80, {12288});
        auto cfg = select_tile_config(b, gpu);
        CHECK(cfg.ctas_per_sm == 4);
        CHECK(cfg.prefill_tile_q == 64);
        CHECK(cfg.decode_tile_q == 16);
    }

    SECTION("decode-only batch") {
        auto b = decode_batch(32, 8192, kLlamaTp2);
        auto cfg = select_tile_config(b, gpu);
        CHECK(cfg.ctas_per_sm == 4);
        CHECK(decompose_hybrid(b, gpu).prefill_tasks.empty());
    }
}

TEST_CASE("decompose_hybrid composes both decompositions") {
    GpuSpec gpu;

    SECTION("prefill-only") {
        HybridBatchSpec b;
        b.shape = kYi;
        b.prefill = PrefillSpec{2048, 8192, 4096};
        auto wd = decompose_hybrid(b, gpu);
        CHECK(wd.decode_tasks.empty());
        CHECK_FALSE(wd.prefill_tasks.empty());
    }

    SECTION("hybrid equals the sum of standalone decompositions") {
        HybridBatchSpec b;
        b.shape = kYi;
        b.prefill = PrefillSpec{1536, 12288, 6144};
        b.decodes.assign(27, {12288});
        auto cfg = select_tile_config(b, gpu);
        auto wd = decompose_hybrid(b, gpu, cfg);

        HybridBatchSpec only_p = b;
        only_p.decodes.clear();
        HybridBatchSpec only_d = b;
        only_d.prefill.reset();
        CHECK(wd.total_tasks() == decompose_prefill(only_p, cfg, gpu).size() +
                                      decompose_decode(only_d, cfg).size());

        // Spreadsheet-style recount for the scaled C1 shape.
        const long q_tiles = ceil_div(b.prefill->chunk_size, cfg.prefill_tile_q);
        const long splits = limit_prefill_splits(q_tiles * b.shape.num_kv_heads, gpu, cfg);
        CHECK((long)wd.prefill_tasks.size() == q_tiles * b.shape.num_kv_heads * splits);
        CHECK((long)wd.decode_tasks.size() == 27 * 4);
    }
}

TEST_CASE("cost monotonicity") {
    TileConfig cfg;
    SECTION("decode memory strictly increases with context") {
        double prev = 0;
        for (long ctx : {128L, 512L, 2048L, 8192L}) {
            auto tasks = decompose_decode(decode_batch(1, ctx), cfg);
            CHECK(tasks[0].memory_work > prev);
            prev = tasks[0].memory_work;
        }
    }
    SECTION("zero-padding waste: tile 64 costs at least tile 16") {
        TileConfig wide = cfg;
        wide.decode_tile_q = 64;
        auto narrow = decompose_decode(decode_batch(4, 4096), cfg);
        auto padded = decompose_decode(decode_batch(4, 4096), wide);
        for (size_t i = 0; i < narrow.size(); ++i)
            CHECK(padded[i].compute_work >= narrow[i].compute_work);
    }
}

TEST_CASE("decode CTA count invariant across random batches") {
    Rng rng(17);
    TileConfig cfg;
    for (int it = 0; it < 50; ++it) {
        const int kv = (int)rng.next_long(1, 8);
        ModelShape shape{(int)(kv * rng.next_long(1, 4)), kv, 64, 8.0};
        HybridBatchSpec b;
        b.shape = shape;
        const int n = (int)rng.next_long(1, 100);
        for (int i = 0; i < n; ++i) b.decodes.push_back({rng.next_long(1, 10000)});
        CHECK(decompose_decode(b, cfg).size() == (size_t)n * kv);
    }
}

TEST_CASE("split limit monotonicity in natural parallelism") {
    GpuSpec gpu;
    TileConfig cfg;
    long prev = std::numeric_limits<long>::max();
    for (long par = 1; par <= 300; ++par) {
        long s = limit_prefill_splits(par, gpu, cfg);
        CHECK(s <= prev);
        CHECK(s >= 1);
        CHECK(par * s <= 2L * gpu.num_sms + par);  // never beyond one extra block
        prev = s;
    }
}

TEST_CASE("batch validation") {
    HybridBatchSpec empty;
    empty.shape = kYi;
    CHECK_THROWS_AS(empty.validate(), std::invalid_argument);

    HybridBatchSpec bad;
    bad.shape = kYi;
    bad.prefill = PrefillSpec{1024, 512, 0};  // chunk exceeds prompt
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
