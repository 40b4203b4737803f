#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "attnsim/gpu_sim.hpp"
#include "attnsim/rng.hpp"
#include "attnsim/work_decomp.hpp"

// Request-level serving simulator: prefill-prioritized scheduling (a new
// prompt pauses ongoing decodes) versus chunked-prefill hybrid batching (one
// chunk per iteration rides along with all active decodes). Iteration costs
// come from the kernel-level simulator, so fused attention shows up as
// shorter iterations.

namespace attnsim {

struct Request {
    double arrival_time = 0;
    long prefill_tokens = 1;
    long decode_tokens = 1;
};

struct SchedulerPolicy {
    enum class Kind { PrefillPrioritized, ChunkedHybrid };
    Kind kind = Kind::ChunkedHybrid;
    long chunk_size = 1024;   // per-iteration prefill token budget
    long max_batch = 256;     // cap on requests per iteration
    long token_budget = 4096; // chunk tokens + one per decode

    static SchedulerPolicy prefill_prioritized() {
        return {Kind::PrefillPrioritized, 0, 256, 0};
    }
    static SchedulerPolicy chunked_hybrid(long chunk, long max_batch = 256,
                                          long token_budget = 1L << 20) {
        return {Kind::ChunkedHybrid, chunk, max_batch, token_budget};
    }
    std::string name() const {
        return kind == Kind::PrefillPrioritized ? "prefill_prioritized" : "chunked_hybrid";
    }
    void validate() const {
        if (kind == Kind::ChunkedHybrid) {
            if (chunk_size < 1) throw std::invalid_argument("SchedulerPolicy: chunk_size < 1");
            if (token_budget < chunk_size)
                throw std::invalid_argument("SchedulerPolicy: token_budget < chunk_size");
        }
    }
};

struct IterationRecord {
    double t_start = 0;
    double t_end = 0;
    long prefill_request = -1;   // -1 when the iteration carries no prefill
    long prefill_tokens = 0;     // chunk tokens processed this iteration
    long decode_requests = 0;    // decodes advanced this iteration (one token each)
};

struct Metrics {
    double ttft_p50 = 0, ttft_p99 = 0;
    double tbt_p50 = 0, tbt_p99 = 0;
    double latency_p50 = 0, latency_p99 = 0;
    std::vector<std::pair<double, double>> stall_pct_at;  // threshold -> fraction of requests
    double throughput = 0;  // completed requests per time unit
};

// Nearest-rank percentile: value at index ceil(p/100 * n) of the ascending
// sort, 1-based.
inline double percentile(std::vector<double> samples, double p) {
    if (samples.empty()) throw std::domain_error("percentile: empty sample set");
    if (p < 0 || p > 100) throw std::invalid_argument("percentile: p out of range");
    std::sort(samples.begin(), samples.end());
    const long n = (long)samples.size();
    long rank = (long)std::ceil(p / 100.0 * n);
    rank = std::clamp(rank, 1L, n);
    return samples[rank - 1];
}

struct TokenDist {
    enum class Kind { Fixed, Uniform, LogNormal };
    Kind kind = Kind::Fixed;
    double a = 1024;  // Fixed: value; Uniform: lo; LogNormal: mu
    double b = 0;     // Uniform: hi; LogNormal: sigma

    long sample(Rng& rng) const {
        double x = a;
        switch (kind) {
            case Kind::Fixed: x = a; break;
            case Kind::Uniform: x = a + rng.next_double() * (b - a); break;
            case Kind::LogNormal: x = rng.next_lognormal(a, b); break;
        }
        return std::max(1L, (long)std::llround(x));
    }
};

// Poisson arrivals (exponential gaps at rate qps) with token counts from the
// configured distributions.
inline std::vector<Request> generate_trace(double qps, long n, const TokenDist& prefill_dist,
                                           const TokenDist& decode_dist, uint64_t seed) {
    if (!(qps > 0)) throw std::invalid_argument("generate_trace: qps must be positive");
    Rng rng(seed);
    std::vector<Request> trace;
    trace.reserve(n);
    double t = 0;
    for (long i = 0; i < n; ++i) {
        t += rng.next_exponential(qps);
        Request r;
        r.arrival_time = t;
        r.prefill_tokens = prefill_dist.sample(rng);
        r.decode_tokens = decode_dist.sample(rng);
        trace.push_back(r);
    }
    return trace;
}

// Attention cost via the kernel simulator plus a linear term for everything
// else (weights are fetched once per iteration, then a per-token cost).
// Fused iterations use the better of the two SM-aware policies; the serial
// path runs the prefill and decode kernels back to back.
class IterationCostModel {
public:
    IterationCostModel(const GpuSpec& gpu, double w_fixed, double w_tok)
        : gpu_(gpu), w_fixed_(w_fixed), w_tok_(w_tok) {}

    double operator()(const HybridBatchSpec& batch, bool fused) const {
        if (!batch.prefill && batch.decodes.empty())
            throw std::invalid_argument("iteration_cost: empty batch");
        const std::string key = signature(batch, fused);
        if (auto it = memo_.find(key); it != memo_.end()) return it->second;

        long tokens = batch.prefill ? batch.prefill->chunk_size : 0;
        tokens += (long)batch.decodes.size();
        const double linear = w_fixed_ + w_tok_ * tokens;
        const double attention = attention_cost(batch, fused);
        const double cost = linear + attention;
        memo_.emplace(key, cost);
        return cost;
    }

    double attention_cost(const HybridBatchSpec& batch, bool fused) const {
        if (fused) return best_fused_makespan(gpu_, batch);
        auto launches = make_attention_launches(decompose_hybrid(batch, gpu_));
        SimOptions opt;
        opt.record_trace = false;
        return simulate(gpu_, launches, ExecutionStrategy::serial(), 0, opt).makespan;
    }

    const GpuSpec& gpu() const { return gpu_; }

private:
    static std::string signature(const HybridBatchSpec& batch, bool fused) {
        std::ostringstream os;
        os << (fused ? 'f' : 's');
        if (batch.prefill)
            os << '|' << batch.prefill->chunk_size << ',' << batch.prefill->position_offset << ','
               << batch.prefill->context_len;
        os << '#';
        for (const auto& d : batch.decodes) os << d.context_len << ',';
        return os.str();
    }

    GpuSpec gpu_;
    double w_fixed_;
    double w_tok_;
    mutable std::map<std::string, double> memo_;
};

struct ServingResult {
    Metrics metrics;
    std::vector<IterationRecord> iterations;
    std::vector<double> ttft, latency;          // per completed request
    std::vector<std::vector<double>> tbt;       // per request token gaps
};

template <typename CostFn>
ServingResult run_serving(const std::vector<Request>& trace, const SchedulerPolicy& policy,
                          CostFn&& iteration_cost, bool fused, const ModelShape& shape,
                          const std::vector<double>& stall_thresholds = {200.0, 500.0}) {
    if (trace.empty()) throw std::invalid_argument("run_serving: empty trace");
    policy.validate();
    for (size_t i = 1; i < trace.size(); ++i)
        if (trace[i].arrival_time < trace[i - 1].arrival_time)
            throw std::invalid_argument("run_serving: trace not sorted by arrival");

    struct ReqState {
        long prefill_done = 0;
        long generated = 0;
        double last_token = 0;
        bool done = false;
    };
    std::vector<ReqState> st(trace.size());
    ServingResult out;
    out.ttft.assign(trace.size(), 0);
    out.latency.assign(trace.size(), 0);
    out.tbt.resize(trace.size());

    std::vector<long> waiting;       // arrived, prefill not started (FIFO)
    std::vector<long> decoding;      // prefill finished, tokens left
    long mid_prefill = -1;           // chunked-prefill request in flight
    size_t next_arrival = 0;
    size_t completed = 0;
    double now = 0;

    const auto admit = [&](double t) {
        while (next_arrival < trace.size() && trace[next_arrival].arrival_time <= t)
            waiting.push_back((long)next_arrival++);
    };

    admit(0);
    while (completed < trace.size()) {
        if (waiting.empty() && decoding.empty() && mid_prefill < 0) {
            now = std::max(now, trace[next_arrival].arrival_time);
            admit(now);
            continue;
        }

        HybridBatchSpec batch;
        batch.shape = shape;
        IterationRecord rec;
        rec.t_start = now;
        long prefill_req = -1;
        long chunk = 0;
        bool decode_advances = false;

        if (policy.kind == SchedulerPolicy::Kind::PrefillPrioritized) {
            if (!waiting.empty()) {
                // Whole-prompt prefill; ongoing decodes pause.
                prefill_req = waiting.front();
                waiting.erase(waiting.begin());
                chunk = trace[prefill_req].prefill_tokens;
                batch.prefill = PrefillSpec{chunk, trace[prefill_req].prefill_tokens, 0};
            } else {
                decode_advances = true;
            }
        } else {
            if (mid_prefill < 0 && !waiting.empty() &&
                (long)decoding.size() + 1 <= policy.max_batch) {
                mid_prefill = waiting.front();
                waiting.erase(waiting.begin());
            }
            if (mid_prefill >= 0) {
                const long remaining = trace[mid_prefill].prefill_tokens - st[mid_prefill].prefill_done;
                const long budget = policy.token_budget - (long)decoding.size();
                chunk = std::min({policy.chunk_size, remaining, std::max(1L, budget)});
                prefill_req = mid_prefill;
                batch.prefill = PrefillSpec{chunk, trace[prefill_req].prefill_tokens,
                                            st[prefill_req].prefill_done};
            }
            decode_advances = true;  // ongoing decodes never pause
        }

        if (decode_advances)
            for (long id : decoding)
                batch.decodes.push_back(
                    {trace[id].prefill_tokens + st[id].generated});

        const double cost = iteration_cost(batch, fused);
        const double t_end = now + cost;

        rec.t_end = t_end;
        rec.prefill_request = prefill_req;
        rec.prefill_tokens = chunk;
        rec.decode_requests = decode_advances ? (long)decoding.size() : 0;
        out.iterations.push_back(rec);

        if (decode_advances) {
            for (size_t i = 0; i < decoding.size();) {
                const long id = decoding[i];
                out.tbt[id].push_back(t_end - st[id].last_token);
                st[id].last_token = t_end;
                st[id].generated++;
                if (st[id].generated >= trace[id].decode_tokens) {
                    st[id].done = true;
                    out.latency[id] = t_end - trace[id].arrival_time;
                    decoding.erase(decoding.begin() + i);
                    completed++;
                } else {
                    ++i;
                }
            }
        }
        if (prefill_req >= 0) {
            st[prefill_req].prefill_done += chunk;
            if (st[prefill_req].prefill_done >= trace[prefill_req].prefill_tokens) {
                // Prefill completion produces the first output token; the
                // request then decodes for decode_tokens more iterations.
                out.ttft[prefill_req] = t_end - trace[prefill_req].arrival_time;
                st[prefill_req].last_token = t_end;
                if (prefill_req == mid_prefill) mid_prefill = -1;
                decoding.push_back(prefill_req);
            }
        }
        now = t_end;
        admit(now);
    }

    // Metrics over all requests.
    std::vector<double> all_tbt;
    for (const auto& v : out.tbt) all_tbt.insert(all_tbt.end(), v.begin(), v.end());
    Metrics m;
    m.ttft_p50 = percentile(out.ttft, 50);
    m.ttft_p99 = percentile(out.ttft, 99);
    m.latency_p50 = percentile(out.latency, 50);
    m.latency_p99 = percentile(out.latency, 99);
    if (!all_tbt.empty()) {
        m.tbt_p50 = percentile(all_tbt, 50);
        m.tbt_p99 = percentile(all_tbt, 99);
    }
    for (double thr : stall_thresholds) {
        long stalled = 0;
        for (const auto& v : out.tbt)
            if (std::any_of(v.begin(), v.end(), [&](double x) { return x > thr; })) stalled++;
        m.stall_pct_at.emplace_back(thr, (double)stalled / (double)trace.size());
    }
    m.throughput = now > 0 ? (double)trace.size() / now : 0;
    out.metrics = m;
    return out;
}

}  // namespace attnsim
