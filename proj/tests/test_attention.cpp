#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "attnsim/attention.hpp"
#include "attnsim/rng.hpp"

using namespace attnsim;

namespace {

// Independent oracle: a second, straight-line dense softmax evaluation, kept
// deliberately different from the library path (long double accumulation,
// two-pass softmax, no tiling). Written before the production code.
Matd oracle_attention(const Matd& q, const Matd& k, const Matd& v, double scale,
                      long causal_offset, bool causal) {
    Matd out(q.rows, q.cols);
    for (long i = 0; i < q.rows; ++i) {
        const long visible = causal ? std::min<long>(k.rows, causal_offset + i + 1) : k.rows;
        std::vector<long double> s(visible);
        long double mx = -1e400L;
        for (long j = 0; j < visible; ++j) {
            long double acc = 0;
            for (long c = 0; c < q.cols; ++c)
                acc += (long double)q(i, c) * (long double)k(j, c);
            s[j] = acc / scale;
            if (s[j] > mx) mx = s[j];
        }
        long double denom = 0;
        for (long j = 0; j < visible; ++j) denom += expl(s[j] - mx);
        for (long c = 0; c < q.cols; ++c) {
            long double acc = 0;
            for (long j = 0; j < visible; ++j) acc += expl(s[j] - mx) / denom * (long double)v(j, c);
            out(i, c) = (double)acc;
        }
    }
    return out;
}

Matd random_mat(Rng& rng, long rows, long cols) {
    Matd m(rows, cols);
    for (auto& x : m.data) x = rng.next_double() * 2.0 - 1.0;
    return m;
}

double max_rel_err(const Matd& a, const Matd& b) {
    REQUIRE(a.same_shape(b));
    double worst = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double denom = std::max(1e-30, std::max(std::abs(a.data[i]), std::abs(b.data[i])));
        worst = std::max(worst, std::abs(a.data[i] - b.data[i]) / denom);
    }
    return worst;
}

// Builds a random chunk+cache pair whose cache covers the chunk.
struct PrefillCase {
    QueryChunk chunk;
    KVCache cache;
    ModelShape shape;
};

PrefillCase random_prefill_case(Rng& rng, long chunk_len, long context_len, long offset,
                                int q_heads, int kv_heads, int d) {
    PrefillCase c;
    c.shape = ModelShape{q_heads, kv_heads, d, std::sqrt((double)d)};
    c.chunk = QueryChunk(chunk_len, q_heads, d, offset);
    for (auto& x : c.chunk.q) x = rng.next_double() * 2.0 - 1.0;
    c.cache = KVCache(context_len, kv_heads, d);
    for (auto& x : c.cache.k) x = rng.next_double() * 2.0 - 1.0;
    for (auto& x : c.cache.v) x = rng.next_double() * 2.0 - 1.0;
    return c;
}

// Per-head reference for a chunk: dense Q/K/V matrices fed to the oracle.
Matd prefill_oracle_head(const PrefillCase& c, int head) {
    const int d = c.shape.head_dim;
    const int kvh = head / c.shape.group_size();
    Matd q(c.chunk.chunk_len, d), k(c.cache.context_len, d), v(c.cache.context_len, d);
    for (long r = 0; r < c.chunk.chunk_len; ++r)
        for (int x = 0; x < d; ++x) q(r, x) = c.chunk.q_at(r, head)[x];
    for (long j = 0; j < c.cache.context_len; ++j)
        for (int x = 0; x < d; ++x) {
            k(j, x) = c.cache.k_at(j, kvh)[x];
            v(j, x) = c.cache.v_at(j, kvh)[x];
        }
    return oracle_attention(q, k, v, c.shape.scale, c.chunk.position_offset, true);
}

double prefill_vs_oracle(const PrefillCase& c, long tile_q, long tile_kv) {
    Matd got = tiled_prefill_attention(c.chunk, c.cache, c.shape, tile_q, tile_kv);
    double worst = 0;
    for (int h = 0; h < c.shape.num_q_heads; ++h) {
        Matd ref = prefill_oracle_head(c, h);
        for (long r = 0; r < c.chunk.chunk_len; ++r)
            for (int x = 0; x < c.shape.head_dim; ++x) {
                double a = got(r, (long)h * c.shape.head_dim + x);
                double b = ref(r, x);
                double denom = std::max(1e-30, std::max(std::abs(a), std::abs(b)));
                worst = std::max(worst, std::abs(a - b) / denom);
            }
    }
    return worst;
}

}  // namespace

TEST_CASE("naive attention: one-key identity") {
    Matd q(1, 2), k(1, 2), v(1, 2);
    q(0, 0) = 3; q(0, 1) = 4;
    k(0, 0) = 1; k(0, 1) = 0;
    v(0, 0) = 7; v(0, 1) = 9;
    Matd o = naive_attention(q, k, v, 1.0);
    CHECK(o(0, 0) == 7.0);
    CHECK(o(0, 1) == 9.0);
}

TEST_CASE("naive attention: identical keys average V") {
    Matd q(1, 2), k(2, 2), v(2, 2);
    q(0, 0) = 0.3; q(0, 1) = -1.2;
    k(0, 0) = k(1, 0) = 0.5;
    k(0, 1) = k(1, 1) = -0.25;
    v(0, 0) = 0; v(0, 1) = 0;
    v(1, 0) = 2; v(1, 1) = 4;
    Matd o = naive_attention(q, k, v, 1.0);
    CHECK_THAT(o(0, 0), Catch::Matchers::WithinAbs(1.0, 1e-12));
    CHECK_THAT(o(0, 1), Catch::Matchers::WithinAbs(2.0, 1e-12));
}

TEST_CASE("naive attention matches independent oracle, seed 42") {
    Rng rng(42);
    Matd q = random_mat(rng, 8, 4);
    Matd k = random_mat(rng, 16, 4);
    Matd v = random_mat(rng, 16, 4);
    Matd got = naive_attention(q, k, v, 2.0);
    Matd ref = oracle_attention(q, k, v, 2.0, 0, false);
    CHECK(max_rel_err(got, ref) < 1e-12);
    // Frozen spot checks from the oracle, pinned at test-writing time.
    CHECK_THAT(got(0, 0), Catch::Matchers::WithinAbs(ref(0, 0), 1e-13));
    CHECK_THAT(got(7, 3), Catch::Matchers::WithinAbs(ref(7, 3), 1e-13));
}

TEST_CASE("naive attention: softmax rows are normalized") {
    // With V a column of ones, each output element is the row's softmax mass.
    Rng rng(7);
    Matd q = random_mat(rng, 12, 8);
    Matd k = random_mat(rng, 20, 8);
    Matd v(20, 8);
    for (auto& x : v.data) x = 1.0;
    for (auto causal : {false, true}) {
        Matd o = causal ? naive_attention(q, k, v, 3.0, 5L) : naive_attention(q, k, v, 3.0);
        for (long i = 0; i < o.rows; ++i)
            for (long c = 0; c < o.cols; ++c)
                CHECK_THAT(o(i, c), Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("naive attention error paths") {
    Matd q(2, 3), k(4, 3), v(4, 2);
    CHECK_THROWS_AS(naive_attention(q, k, v, 1.0), std::invalid_argument);
    Matd v2(4, 3);
    CHECK_THROWS_AS(naive_attention(q, k, v2, 1.0, -1L), std::domain_error);
    Matd empty(0, 3);
    CHECK_THROWS_AS(naive_attention(empty, k, v2, 1.0), std::invalid_argument);
}

TEST_CASE("gqa head mapping") {
    ModelShape yi{32, 4, 128, 8.0};
    CHECK(gqa_kv_head(9, yi) == 1);

    ModelShape mha{8, 8, 64, 8.0};
    for (int h = 0; h < 8; ++h) CHECK(gqa_kv_head(h, mha) == h);

    ModelShape llama{32, 8, 128, 8.0};
    CHECK(gqa_kv_head(31, llama) == 7);
    // Exhaustive: monotone, surjective, group size 4.
    int prev = 0;
    std::vector<int> hits(8, 0);
    for (int h = 0; h < 32; ++h) {
        int kv = gqa_kv_head(h, llama);
        CHECK(kv == h / 4);
        CHECK(kv >= prev);
        prev = kv;
        hits[kv]++;
    }
    for (int c : hits) CHECK(c == 4);

    CHECK_THROWS_AS(gqa_kv_head(32, llama), std::out_of_range);
}

TEST_CASE("tiled prefill: degenerate single query equals naive") {
    Rng rng(11);
    auto c = random_prefill_case(rng, 1, 1, 0, 2, 1, 8);
    for (long tile_kv : {1L, 7L, 64L}) CHECK(prefill_vs_oracle(c, 4, tile_kv) < 1e-12);
}

TEST_CASE("tiled prefill: chunk 8 of a 512-stride prompt") {
    Rng rng(123);
    auto c = random_prefill_case(rng, 64, 512, 448, 4, 2, 16);
    CHECK(prefill_vs_oracle(c, 16, 32) < 1e-10);
}

TEST_CASE("tiled prefill: oversized kv tile equals naive") {
    Rng rng(5);
    auto c = random_prefill_case(rng, 12, 48, 36, 2, 2, 8);
    CHECK(prefill_vs_oracle(c, 12, 1024) < 1e-12);
}

TEST_CASE("tiled prefill: oracle equivalence across random instances and tiles") {
    Rng rng(2024);
    const long tiles[] = {1, 8, 16, 64, 128};
    for (int iter = 0; iter < 25; ++iter) {
        const int d = std::vector<int>{4, 8, 64}[rng.next_long(0, 2)];
        const int kv_heads = (int)rng.next_long(1, 2);
        const int q_heads = kv_heads * (int)rng.next_long(1, 2);
        const long chunk_len = rng.next_long(1, 64);
        const long offset = rng.next_long(0, 512);
        const long context = offset + chunk_len + rng.next_long(0, 64);
        auto c = random_prefill_case(rng, chunk_len, context, offset, q_heads, kv_heads, d);
        const long tq = tiles[rng.next_long(0, 4)];
        const long tkv = tiles[rng.next_long(0, 4)];
        INFO("chunk=" << chunk_len << " ctx=" << context << " off=" << offset << " tq=" << tq
                      << " tkv=" << tkv << " d=" << d);
        CHECK(prefill_vs_oracle(c, tq, tkv) < 1e-10);
    }
}

TEST_CASE("tiled prefill: causality is exact") {
    Rng rng(99);
    auto c = random_prefill_case(rng, 6, 40, 20, 2, 1, 8);
    Matd before = tiled_prefill_attention(c.chunk, c.cache, c.shape, 3, 8);
    // Row r sees keys <= offset + r; perturb everything strictly beyond what
    // row 2 can see and row 2 (and earlier rows) must be bit-identical.
    const long limit = c.chunk.position_offset + 2;
    for (long j = limit + 1; j < c.cache.context_len; ++j)
        for (int x = 0; x < c.shape.head_dim; ++x) {
            c.cache.k_at(j, 0)[x] += 17.0;
            c.cache.v_at(j, 0)[x] -= 5.0;
        }
    Matd after = tiled_prefill_attention(c.chunk, c.cache, c.shape, 3, 8);
    for (long r = 0; r <= 2; ++r)
        for (long col = 0; col < before.cols; ++col) CHECK(before(r, col) == after(r, col));
}

TEST_CASE("tiled prefill: cache too short") {
    Rng rng(1);
    auto c = random_prefill_case(rng, 8, 10, 4, 2, 1, 4);
    CHECK_THROWS_AS(tiled_prefill_attention(c.chunk, c.cache, c.shape, 4, 4), std::logic_error);
}

TEST_CASE("gqa consistency: grouped path equals materialized kv heads") {
    Rng rng(31);
    auto c = random_prefill_case(rng, 10, 32, 16, 8, 2, 8);
    Matd grouped = tiled_prefill_attention(c.chunk, c.cache, c.shape, 4, 8);

    // Materialize one kv head per q head and recompute as MHA.
    ModelShape mha{8, 8, 8, c.shape.scale};
    KVCache wide(c.cache.context_len, 8, 8);
    for (long j = 0; j < c.cache.context_len; ++j)
        for (int h = 0; h < 8; ++h) {
            int kvh = gqa_kv_head(h, c.shape);
            for (int x = 0; x < 8; ++x) {
                wide.k_at(j, h)[x] = c.cache.k_at(j, kvh)[x];
                wide.v_at(j, h)[x] = c.cache.v_at(j, kvh)[x];
            }
        }
    Matd flat = tiled_prefill_attention(c.chunk, wide, mha, 4, 8);
    CHECK(max_rel_err(grouped, flat) < 1e-12);
}

namespace {

struct DecodeCase {
    DecodeQuery query;
    KVCache cache;
    ModelShape shape;
};

DecodeCase random_decode_case(Rng& rng, long context, int q_heads, int kv_heads, int d) {
    DecodeCase c;
    c.shape = ModelShape{q_heads, kv_heads, d, std::sqrt((double)d)};
    c.query = DecodeQuery(q_heads, d);
    for (auto& x : c.query.q) x = rng.next_double() * 2.0 - 1.0;
    c.cache = KVCache(context, kv_heads, d);
    for (auto& x : c.cache.k) x = rng.next_double() * 2.0 - 1.0;
    for (auto& x : c.cache.v) x = rng.next_double() * 2.0 - 1.0;
    return c;
}

}  // namespace

TEST_CASE("split-k: single split merge equals naive decode") {
    Rng rng(8);
    auto c = random_decode_case(rng, 24, 4, 2, 8);
    auto parts = decode_attention_splitk(c.query, c.cache, c.shape, 1);
    REQUIRE(parts.size() == 1);
    Matd merged = merge_partials(parts);

    for (int h = 0; h < 4; ++h) {
        Matd q(1, 8), k(24, 8), v(24, 8);
        int kvh = gqa_kv_head(h, c.shape);
        for (int x = 0; x < 8; ++x) q(0, x) = c.query.q_at(h)[x];
        for (long j = 0; j < 24; ++j)
            for (int x = 0; x < 8; ++x) {
                k(j, x) = c.cache.k_at(j, kvh)[x];
                v(j, x) = c.cache.v_at(j, kvh)[x];
            }
        Matd ref = oracle_attention(q, k, v, c.shape.scale, 0, false);
        for (int x = 0; x < 8; ++x)
            CHECK_THAT(merged(h, x), Catch::Matchers::WithinAbs(ref(0, x), 1e-12));
    }
}

TEST_CASE("split-k: forced partition arithmetic") {
    Rng rng(3);
    auto c = random_decode_case(rng, 12, 2, 1, 4);
    auto parts = decode_attention_splitk(c.query, c.cache, c.shape, 4);
    REQUIRE(parts.size() == 4);
    CHECK(parts[0].kv_range == Interval{0, 3});
    CHECK(parts[1].kv_range == Interval{3, 6});
    CHECK(parts[2].kv_range == Interval{6, 9});
    CHECK(parts[3].kv_range == Interval{9, 12});
}

TEST_CASE("split-k: merged outputs agree across split counts") {
    Rng rng(77);
    auto c = random_decode_case(rng, 1024, 4, 2, 16);
    Matd base = merge_partials(decode_attention_splitk(c.query, c.cache, c.shape, 1));
    for (long s : {2L, 4L, 8L}) {
        Matd m = merge_partials(decode_attention_splitk(c.query, c.cache, c.shape, s));
        CHECK(max_rel_err(base, m) < 1e-10);
    }
}

TEST_CASE("split-k: random instances, splits 1..8 pairwise consistent") {
    Rng rng(4242);
    for (int iter = 0; iter < 20; ++iter) {
        const int d = std::vector<int>{4, 8, 64}[rng.next_long(0, 2)];
        const int kv = (int)rng.next_long(1, 2);
        auto c = random_decode_case(rng, rng.next_long(8, 300), kv * 2, kv, d);
        Matd base = merge_partials(decode_attention_splitk(c.query, c.cache, c.shape, 1));
        for (long s = 2; s <= 8; ++s) {
            Matd m = merge_partials(decode_attention_splitk(c.query, c.cache, c.shape, s));
            CHECK(max_rel_err(base, m) < 1e-10);
        }
    }
}

TEST_CASE("split-k: excess splits clamp to context length") {
    Rng rng(6);
    auto c = random_decode_case(rng, 5, 2, 1, 4);
    auto parts = decode_attention_splitk(c.query, c.cache, c.shape, 64);
    CHECK(parts.size() == 5);
    KVCache empty(0, 1, 4);
    CHECK_THROWS_AS(decode_attention_splitk(c.query, empty, c.shape, 2), std::domain_error);
}

TEST_CASE("merge: identity on one part") {
    Rng rng(9);
    auto c = random_decode_case(rng, 10, 2, 1, 4);
    auto parts = decode_attention_splitk(c.query, c.cache, c.shape, 1);
    Matd merged = merge_partials(parts);
    for (size_t i = 0; i < merged.data.size(); ++i) CHECK(merged.data[i] == parts[0].o.data[i]);
}

TEST_CASE("merge: identical-key halves equal the unsplit result") {
    Rng rng(13);
    auto c = random_decode_case(rng, 8, 2, 1, 4);
    // Make both halves identical so the merge is an even blend.
    for (long j = 0; j < 4; ++j)
        for (int x = 0; x < 4; ++x) {
            c.cache.k_at(j + 4, 0)[x] = c.cache.k_at(j, 0)[x];
            c.cache.v_at(j + 4, 0)[x] = c.cache.v_at(j, 0)[x];
        }
    Matd unsplit = merge_partials(decode_attention_splitk(c.query, c.cache, c.shape, 1));
    Matd halves = merge_partials(decode_attention_splitk(c.query, c.cache, c.shape, 2));
    CHECK(max_rel_err(unsplit, halves) < 1e-12);
}

TEST_CASE("merge: permutation invariance is bitwise under the fixed order") {
    Rng rng(21);
    auto c = random_decode_case(rng, 37, 4, 2, 8);
    auto parts = decode_attention_splitk(c.query, c.cache, c.shape, 4);
    Matd base = merge_partials(parts);
    std::vector<int> idx{0, 1, 2, 3};
    std::sort(idx.begin(), idx.end());
    do {
        std::vector<AttentionPartial> shuffled;
        for (int i : idx) shuffled.push_back(parts[i]);
        Matd m = merge_partials(shuffled);
        for (size_t i = 0; i < m.data.size(); ++i) CHECK(m.data[i] == base.data[i]);
    } while (std::next_permutation(idx.begin(), idx.end()));
}

TEST_CASE("merge: overlapping ranges rejected") {
    Rng rng(2);
    auto c = random_decode_case(rng, 16, 2, 1, 4);
    auto parts = decode_attention_splitk(c.query, c.cache, c.shape, 2);
    parts[1].kv_range.begin = parts[0].kv_range.end - 1;
    CHECK_THROWS_AS(merge_partials(parts), std::logic_error);
    CHECK_THROWS_AS(merge_partials(std::vector<AttentionPartial>{}), std::invalid_argument);
}

TEST_CASE("single precision path stays within loose tolerance of double") {
    Rng rng(55);
    auto cd = random_prefill_case(rng, 16, 96, 64, 2, 1, 8);
    QueryChunkT<float> cf(16, 2, 8, 64);
    KVCacheT<float> cachef(96, 1, 8);
    for (size_t i = 0; i < cd.chunk.q.size(); ++i) cf.q[i] = (float)cd.chunk.q[i];
    for (size_t i = 0; i < cd.cache.k.size(); ++i) {
        cachef.k[i] = (float)cd.cache.k[i];
        cachef.v[i] = (float)cd.cache.v[i];
    }
    Matd od = tiled_prefill_attention(cd.chunk, cd.cache, cd.shape, 8, 16);
    Mat<float> of = tiled_prefill_attention(cf, cachef, cd.shape, 8, 16);
    double worst = 0;
    for (size_t i = 0; i < od.data.size(); ++i) {
        double denom = std::max(1e-6, std::abs(od.data[i]));
        worst = std::max(worst, std::abs(od.data[i] - (double)of.data[i]) / denom);
    }
    CHECK(worst < 1e-3);
}
