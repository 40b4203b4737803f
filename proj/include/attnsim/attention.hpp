#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "attnsim/types.hpp"

// Reference attention math: a dense naive path used as correctness oracle,
// a tiled online-softmax path that mirrors how fused kernels stream over the
// KV cache, and a split-K decode path merged via log-sum-exp. Everything here
// is pure and deterministic; summation order is fixed left-to-right so that
// repeated runs are bit-identical.

namespace attnsim {

// Per-request key/value cache, layout [context_len][num_kv_heads][head_dim].
template <typename Real>
struct KVCacheT {
    long context_len = 0;
    int num_kv_heads = 0;
    int head_dim = 0;
    std::vector<Real> k;
    std::vector<Real> v;

    KVCacheT() = default;
    KVCacheT(long ctx, int kv_heads, int dim)
        : context_len(ctx),
          num_kv_heads(kv_heads),
          head_dim(dim),
          k(static_cast<size_t>(ctx) * kv_heads * dim, Real(0)),
          v(static_cast<size_t>(ctx) * kv_heads * dim, Real(0)) {}

    size_t index(long pos, int head, int d) const {
        return (static_cast<size_t>(pos) * num_kv_heads + head) * head_dim + d;
    }
    const Real* k_at(long pos, int head) const { return k.data() + index(pos, head, 0); }
    const Real* v_at(long pos, int head) const { return v.data() + index(pos, head, 0); }
    Real* k_at(long pos, int head) { return k.data() + index(pos, head, 0); }
    Real* v_at(long pos, int head) { return v.data() + index(pos, head, 0); }
};

// One prefill chunk: Q is [chunk_len][num_q_heads][head_dim] and the chunk's
// first token sits at absolute position `position_offset` in the prompt.
template <typename Real>
struct QueryChunkT {
    long chunk_len = 0;
    int num_q_heads = 0;
    int head_dim = 0;
    long position_offset = 0;
    std::vector<Real> q;

    QueryChunkT() = default;
    QueryChunkT(long len, int heads, int dim, long offset)
        : chunk_len(len),
          num_q_heads(heads),
          head_dim(dim),
          position_offset(offset),
          q(static_cast<size_t>(len) * heads * dim, Real(0)) {}

    const Real* q_at(long row, int head) const {
        return q.data() + (static_cast<size_t>(row) * num_q_heads + head) * head_dim;
    }
    Real* q_at(long row, int head) {
        return q.data() + (static_cast<size_t>(row) * num_q_heads + head) * head_dim;
    }
};

// Decode carries exactly one token per request per iteration.
template <typename Real>
struct DecodeQueryT {
    int num_q_heads = 0;
    int head_dim = 0;
    std::vector<Real> q;  // [num_q_heads][head_dim]

    DecodeQueryT() = default;
    DecodeQueryT(int heads, int dim)
        : num_q_heads(heads), head_dim(dim), q(static_cast<size_t>(heads) * dim, Real(0)) {}

    const Real* q_at(int head) const { return q.data() + static_cast<size_t>(head) * head_dim; }
    Real* q_at(int head) { return q.data() + static_cast<size_t>(head) * head_dim; }
};

// Split-K carrier: per-row output normalized within kv_range plus the row-wise
// log-sum-exp of scaled scores over that range.
template <typename Real>
struct AttentionPartialT {
    Mat<Real> o;             // [rows][head_dim]
    std::vector<Real> lse;   // [rows]
    Interval kv_range;
};

using KVCache = KVCacheT<double>;
using QueryChunk = QueryChunkT<double>;
using DecodeQuery = DecodeQueryT<double>;
using AttentionPartial = AttentionPartialT<double>;

// q_head -> kv_head under grouped-query attention: integer division by the
// group size. Surjective onto kv heads and monotone in q_head.
inline int gqa_kv_head(int q_head, const ModelShape& shape) {
    if (q_head < 0 || q_head >= shape.num_q_heads)
        throw std::out_of_range("gqa_kv_head: q_head out of range");
    return q_head / shape.group_size();
}

// Dense reference: O = softmax(Q K^T / scale) V with an optional causal mask.
// With `causal_offset` set, query row i attends key positions <= offset + i.
template <typename Real>
Mat<Real> naive_attention(const Mat<Real>& q, const Mat<Real>& k, const Mat<Real>& v, Real scale,
                          std::optional<long> causal_offset = std::nullopt) {
    if (q.rows < 1 || k.rows < 1) throw std::invalid_argument("naive_attention: empty Q or K");
    if (q.cols != k.cols || !k.same_shape(v))
        throw std::invalid_argument("naive_attention: inconsistent shapes");
    if (!(scale > Real(0))) throw std::invalid_argument("naive_attention: scale must be positive");

    const long m = q.rows, n = k.rows, d = q.cols;
    Mat<Real> scores(m, n);
    for (long i = 0; i < m; ++i) {
        for (long j = 0; j < n; ++j) {
            Real acc = 0;
            for (long c = 0; c < d; ++c) acc += q(i, c) * k(j, c);
            scores(i, j) = acc / scale;
        }
    }

    Mat<Real> out(m, d);
    for (long i = 0; i < m; ++i) {
        const long visible = causal_offset ? std::min<long>(n, *causal_offset + i + 1) : n;
        if (visible <= 0)
            throw std::domain_error("naive_attention: fully masked softmax row");
        Real row_max = -std::numeric_limits<Real>::infinity();
        for (long j = 0; j < visible; ++j) row_max = std::max(row_max, scores(i, j));
        Real denom = 0;
        for (long j = 0; j < visible; ++j) {
            scores(i, j) = std::exp(scores(i, j) - row_max);
            denom += scores(i, j);
        }
        for (long j = 0; j < visible; ++j) {
            const Real w = scores(i, j) / denom;
            for (long c = 0; c < d; ++c) out(i, c) += w * v(j, c);
        }
    }
    return out;
}

// Causal attention of a chunk against all cached keys up to each query's
// absolute position, streamed over kv tiles with an online softmax (running
// row max, running denominator, rescaled accumulator). Matches
// naive_attention with causal_offset = position_offset.
template <typename Real>
Mat<Real> tiled_prefill_attention(const QueryChunkT<Real>& chunk, const KVCacheT<Real>& cache,
                                  const ModelShape& shape, long tile_q, long tile_kv) {
    if (tile_q < 1 || tile_kv < 1)
        throw std::invalid_argument("tiled_prefill_attention: tiles must be >= 1");
    if (chunk.position_offset < 0)
        throw std::invalid_argument("tiled_prefill_attention: negative position_offset");
    if (cache.context_len < chunk.position_offset + chunk.chunk_len)
        throw std::logic_error("tiled_prefill_attention: cache shorter than chunk coverage");
    if (chunk.head_dim != cache.head_dim || chunk.num_q_heads != shape.num_q_heads ||
        cache.num_kv_heads != shape.num_kv_heads)
        throw std::invalid_argument("tiled_prefill_attention: shape mismatch");

    const int d = shape.head_dim;
    const Real scale = static_cast<Real>(shape.scale);
    Mat<Real> out(chunk.chunk_len, static_cast<long>(shape.num_q_heads) * d);

    std::vector<Real> row_max, denom, acc;
    for (int h = 0; h < shape.num_q_heads; ++h) {
        const int kvh = gqa_kv_head(h, shape);
        for (long t0 = 0; t0 < chunk.chunk_len; t0 += tile_q) {
            const long t1 = std::min(chunk.chunk_len, t0 + tile_q);
            const long rows = t1 - t0;
            row_max.assign(rows, -std::numeric_limits<Real>::infinity());
            denom.assign(rows, Real(0));
            acc.assign(static_cast<size_t>(rows) * d, Real(0));

            // Keys visible to the tile's last row bound the kv walk.
            const long kv_limit = chunk.position_offset + t1;
            for (long k0 = 0; k0 < kv_limit; k0 += tile_kv) {
                const long k1 = std::min(kv_limit, k0 + tile_kv);
                for (long r = 0; r < rows; ++r) {
                    const long visible = chunk.position_offset + t0 + r + 1;
                    const long jend = std::min(k1, visible);
                    if (jend <= k0) continue;
                    const Real* qrow = chunk.q_at(t0 + r, h);
                    Real tile_max = -std::numeric_limits<Real>::infinity();
                    for (long j = k0; j < jend; ++j) {
                        const Real* krow = cache.k_at(j, kvh);
                        Real s = 0;
                        for (int c = 0; c < d; ++c) s += qrow[c] * krow[c];
                        tile_max = std::max(tile_max, s / scale);
                    }
                    const Real new_max = std::max(row_max[r], tile_max);
                    const Real rescale = row_max[r] == -std::numeric_limits<Real>::infinity()
                                             ? Real(0)
                                             : std::exp(row_max[r] - new_max);
                    denom[r] *= rescale;
                    Real* arow = acc.data() + static_cast<size_t>(r) * d;
                    for (int c = 0; c < d; ++c) arow[c] *= rescale;
                    for (long j = k0; j < jend; ++j) {
                        const Real* krow = cache.k_at(j, kvh);
                        Real s = 0;
                        for (int c = 0; c < d; ++c) s += qrow[c] * krow[c];
                        const Real w = std::exp(s / scale - new_max);
                        denom[r] += w;
                        const Real* vrow = cache.v_at(j, kvh);
                        for (int c = 0; c < d; ++c) arow[c] += w * vrow[c];
                    }
                    row_max[r] = new_max;
                }
            }
            for (long r = 0; r < rows; ++r) {
                const Real* arow = acc.data() + static_cast<size_t>(r) * d;
                Real* orow = out.row(t0 + r) + static_cast<size_t>(h) * d;
                for (int c = 0; c < d; ++c) orow[c] = arow[c] / denom[r];
            }
        }
    }
    return out;
}

// Partition [0, n) into `splits` contiguous ranges whose lengths differ by at
// most one.
inline std::vector<Interval> split_ranges(long n, long splits) {
    std::vector<Interval> out;
    out.reserve(splits);
    const long base = n / splits;
    const long rem = n % splits;
    long pos = 0;
    for (long s = 0; s < splits; ++s) {
        const long len = base + (s < rem ? 1 : 0);
        out.push_back({pos, pos + len});
        pos += len;
    }
    return out;
}

// FlashDecoding-style split along the KV dimension. Each partial is exact for
// its range; num_splits larger than the context is reduced to one position
// per split (observable through the returned list's size).
template <typename Real>
std::vector<AttentionPartialT<Real>> decode_attention_splitk(const DecodeQueryT<Real>& query,
                                                             const KVCacheT<Real>& cache,
                                                             const ModelShape& shape,
                                                             long num_splits) {
    if (num_splits < 1) throw std::invalid_argument("decode_attention_splitk: num_splits < 1");
    if (cache.context_len < 1) throw std::domain_error("decode_attention_splitk: empty cache");
    if (query.head_dim != cache.head_dim || query.num_q_heads != shape.num_q_heads ||
        cache.num_kv_heads != shape.num_kv_heads)
        throw std::invalid_argument("decode_attention_splitk: shape mismatch");

    const long splits = std::min<long>(num_splits, cache.context_len);
    const int d = shape.head_dim;
    const Real scale = static_cast<Real>(shape.scale);

    std::vector<AttentionPartialT<Real>> parts;
    parts.reserve(splits);
    for (const Interval& range : split_ranges(cache.context_len, splits)) {
        AttentionPartialT<Real> part;
        part.kv_range = range;
        part.o = Mat<Real>(shape.num_q_heads, d);
        part.lse.assign(shape.num_q_heads, Real(0));
        for (int h = 0; h < shape.num_q_heads; ++h) {
            const int kvh = gqa_kv_head(h, shape);
            const Real* qrow = query.q_at(h);
            Real m = -std::numeric_limits<Real>::infinity();
            for (long j = range.begin; j < range.end; ++j) {
                const Real* krow = cache.k_at(j, kvh);
                Real s = 0;
                for (int c = 0; c < d; ++c) s += qrow[c] * krow[c];
                m = std::max(m, s / scale);
            }
            Real denom = 0;
            Real* orow = part.o.row(h);
            for (long j = range.begin; j < range.end; ++j) {
                const Real* krow = cache.k_at(j, kvh);
                Real s = 0;
                for (int c = 0; c < d; ++c) s += qrow[c] * krow[c];
                const Real w = std::exp(s / scale - m);
                denom += w;
                const Real* vrow = cache.v_at(j, kvh);
                for (int c = 0; c < d; ++c) orow[c] += w * vrow[c];
            }
            for (int c = 0; c < d; ++c) orow[c] /= denom;
            part.lse[h] = m + std::log(denom);
        }
        parts.push_back(std::move(part));
    }
    return parts;
}

// Log-sum-exp combination of split-K partials: O = sum_i exp(lse_i -
// lse_total) O_i. Parts are ordered by range start before accumulating, so
// the result is bit-stable under input permutation.
template <typename Real>
Mat<Real> merge_partials(std::vector<AttentionPartialT<Real>> parts) {
    if (parts.empty()) throw std::invalid_argument("merge_partials: no partials");
    std::sort(parts.begin(), parts.end(),
              [](const auto& a, const auto& b) { return a.kv_range.begin < b.kv_range.begin; });
    for (size_t i = 1; i < parts.size(); ++i) {
        if (parts[i].kv_range.begin < parts[i - 1].kv_range.end)
            throw std::logic_error("merge_partials: overlapping kv ranges");
        if (!parts[i].o.same_shape(parts[0].o))
            throw std::invalid_argument("merge_partials: partial shape mismatch");
    }

    const long rows = parts[0].o.rows;
    const long d = parts[0].o.cols;
    Mat<Real> out(rows, d);
    for (long r = 0; r < rows; ++r) {
        Real m = -std::numeric_limits<Real>::infinity();
        for (const auto& p : parts) m = std::max(m, p.lse[r]);
        Real total = 0;
        for (const auto& p : parts) total += std::exp(p.lse[r] - m);
        const Real lse_total = m + std::log(total);
        Real* orow = out.row(r);
        for (const auto& p : parts) {
            const Real w = std::exp(p.lse[r] - lse_total);
            const Real* prow = p.o.row(r);
            for (long c = 0; c < d; ++c) orow[c] += w * prow[c];
        }
    }
    return out;
}

// Decode attention without splitting; convenience for tests and cost probes.
template <typename Real>
Mat<Real> decode_attention(const DecodeQueryT<Real>& query, const KVCacheT<Real>& cache,
                           const ModelShape& shape) {
    return merge_partials(decode_attention_splitk(query, cache, shape, 1));
}

}  // namespace attnsim
