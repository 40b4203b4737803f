// Command-line front end: attention verification, kernel-level simulation,
// the fusion micro-benchmark, and the serving-level simulator. All commands
// are driven by a JSON config (see configs/schema.md) and emit CSV.

#include <cmath>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "attnsim/attention.hpp"
#include "attnsim/config.hpp"
#include "attnsim/csv.hpp"
#include "attnsim/gpu_sim.hpp"
#include "attnsim/serving.hpp"

using namespace attnsim;

namespace {

std::vector<ExecutionStrategy> build_strategies(const std::vector<std::string>& names,
                                                const std::vector<std::string>& policies,
                                                int segments) {
    std::vector<ExecutionStrategy> out;
    for (const auto& n : names) {
        if (n == "serial") out.push_back(ExecutionStrategy::serial());
        else if (n == "streams") out.push_back(ExecutionStrategy::streams());
        else if (n == "cta") out.push_back(ExecutionStrategy::cta_parallel());
        else if (n == "warp") out.push_back(ExecutionStrategy::warp_parallel());
        else if (n == "intra") out.push_back(ExecutionStrategy::intra_thread(segments));
        else if (n == "smaware") {
            for (const auto& p : policies) {
                if (p == "5050") out.push_back(ExecutionStrategy::sm_aware(SmPolicy::FiftyFifty));
                else if (p == "prop")
                    out.push_back(ExecutionStrategy::sm_aware(SmPolicy::Proportional));
                else throw ConfigError("unknown policy '" + p + "'");
            }
        } else {
            throw ConfigError("unknown strategy '" + n + "'");
        }
    }
    if (out.empty()) throw ConfigError("no strategies selected");
    return out;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// ---------------------------------------------------------------------------
// attn-verify
// ---------------------------------------------------------------------------

struct SuiteResult {
    std::string name;
    long cases = 0;
    double worst = 0;
    bool pass = true;
};

double tiled_vs_naive_worst(const QueryChunk& chunk, const KVCache& cache,
                            const ModelShape& shape, long tile_q, long tile_kv) {
    Matd got = tiled_prefill_attention(chunk, cache, shape, tile_q, tile_kv);
    double worst = 0;
    const int d = shape.head_dim;
    for (int h = 0; h < shape.num_q_heads; ++h) {
        const int kvh = gqa_kv_head(h, shape);
        Matd q(chunk.chunk_len, d), k(cache.context_len, d), v(cache.context_len, d);
        for (long r = 0; r < chunk.chunk_len; ++r)
            for (int x = 0; x < d; ++x) q(r, x) = chunk.q_at(r, h)[x];
        for (long j = 0; j < cache.context_len; ++j)
            for (int x = 0; x < d; ++x) {
                k(j, x) = cache.k_at(j, kvh)[x];
                v(j, x) = cache.v_at(j, kvh)[x];
            }
        Matd ref = naive_attention(q, k, v, shape.scale, chunk.position_offset);
        for (long r = 0; r < chunk.chunk_len; ++r)
            for (int x = 0; x < d; ++x) {
                const double a = got(r, (long)h * d + x), b = ref(r, x);
                const double denom = std::max({1e-30, std::abs(a), std::abs(b)});
                worst = std::max(worst, std::abs(a - b) / denom);
            }
    }
    return worst;
}

int cmd_attn_verify(const ExperimentConfig& cfg) {
    if (!cfg.verify) throw ConfigError("config has no 'verify' section");
    const auto& vc = *cfg.verify;
    Rng rng(cfg.seed);
    std::vector<SuiteResult> suites;

    {  // Oracle equivalence: tiled online-softmax vs dense naive.
        SuiteResult s{"oracle-equivalence"};
        for (long i = 0; i < vc.instances; ++i) {
            const int d = vc.dims[rng.next_long(0, (long)vc.dims.size() - 1)];
            const int kv_heads = (int)rng.next_long(1, 2);
            const int q_heads = kv_heads * (int)rng.next_long(1, 2);
            const long m = rng.next_long(1, vc.max_m);
            const long off = rng.next_long(0, std::max(0L, vc.max_n - m));
            const long ctx = std::min(vc.max_n, off + m + rng.next_long(0, vc.max_n / 4));
            ModelShape shape{q_heads, kv_heads, d, std::sqrt((double)d)};
            QueryChunk chunk(m, q_heads, d, off);
            KVCache cache(ctx, kv_heads, d);
            for (auto& x : chunk.q) x = rng.next_double() * 2 - 1;
            for (auto& x : cache.k) x = rng.next_double() * 2 - 1;
            for (auto& x : cache.v) x = rng.next_double() * 2 - 1;
            const long tq = vc.tiles[rng.next_long(0, (long)vc.tiles.size() - 1)];
            const long tkv = vc.tiles[rng.next_long(0, (long)vc.tiles.size() - 1)];
            s.worst = std::max(s.worst, tiled_vs_naive_worst(chunk, cache, shape, tq, tkv));
            s.cases++;
        }
        s.pass = s.worst <= vc.tolerance;
        suites.push_back(s);
    }

    {  // Split invariance: merged split-K equals the unsplit result.
        SuiteResult s{"split-invariance"};
        for (long i = 0; i < vc.split_instances; ++i) {
            const int d = vc.dims[rng.next_long(0, (long)vc.dims.size() - 1)];
            const int kv_heads = (int)rng.next_long(1, 2);
            ModelShape shape{kv_heads * 2, kv_heads, d, std::sqrt((double)d)};
            DecodeQuery q(shape.num_q_heads, d);
            KVCache cache(rng.next_long(8, 512), kv_heads, d);
            for (auto& x : q.q) x = rng.next_double() * 2 - 1;
            for (auto& x : cache.k) x = rng.next_double() * 2 - 1;
            for (auto& x : cache.v) x = rng.next_double() * 2 - 1;
            Matd base = merge_partials(decode_attention_splitk(q, cache, shape, 1));
            for (long splits = 2; splits <= 8; ++splits) {
                Matd m = merge_partials(decode_attention_splitk(q, cache, shape, splits));
                for (size_t x = 0; x < m.data.size(); ++x) {
                    const double denom =
                        std::max({1e-30, std::abs(m.data[x]), std::abs(base.data[x])});
                    s.worst = std::max(s.worst, std::abs(m.data[x] - base.data[x]) / denom);
                }
            }
            s.cases++;
        }
        s.pass = s.worst <= vc.tolerance;
        suites.push_back(s);
    }

    {  // Causality: keys beyond a row's position never affect it. The
       // injected off-by-one (test mode) widens the mask by one key.
        SuiteResult s{"causality"};
        bool exact = true;
        for (long i = 0; i < vc.causality_instances; ++i) {
            const int d = vc.dims[rng.next_long(0, (long)vc.dims.size() - 1)];
            ModelShape shape{2, 1, d, std::sqrt((double)d)};
            const long m = rng.next_long(2, 12);
            const long off = rng.next_long(0, 64);
            const long ctx = off + m + 4;
            QueryChunk chunk(m, 2, d, off);
            KVCache cache(ctx, 1, d);
            for (auto& x : chunk.q) x = rng.next_double() * 2 - 1;
            for (auto& x : cache.k) x = rng.next_double() * 2 - 1;
            for (auto& x : cache.v) x = rng.next_double() * 2 - 1;
            const long probe_row = rng.next_long(0, m - 1);
            QueryChunk probe_chunk = chunk;
            if (vc.inject_mask_off_by_one) probe_chunk.position_offset++;
            Matd before = tiled_prefill_attention(probe_chunk, cache, shape, 4, 16);
            for (long j = off + probe_row + 1; j < ctx; ++j)
                for (int x = 0; x < d; ++x) {
                    cache.k_at(j, 0)[x] += 3.0;
                    cache.v_at(j, 0)[x] -= 2.0;
                }
            Matd after = tiled_prefill_attention(probe_chunk, cache, shape, 4, 16);
            for (long c = 0; c < before.cols; ++c)
                if (before(probe_row, c) != after(probe_row, c)) exact = false;
            s.cases++;
        }
        s.pass = exact;
        s.worst = exact ? 0.0 : 1.0;
        suites.push_back(s);
    }

    bool all_pass = true;
    std::printf("%-20s %8s %12s %6s\n", "suite", "cases", "max_err", "status");
    for (const auto& s : suites) {
        std::printf("%-20s %8ld %12.3e %6s\n", s.name.c_str(), s.cases, s.worst,
                    s.pass ? "PASS" : "FAIL");
        all_pass = all_pass && s.pass;
    }
    return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// kernel-sim
// ---------------------------------------------------------------------------

const std::vector<std::string> kKernelCols = {"run_id",       "strategy", "policy",
                                              "ctas_per_sm",  "makespan", "oracle",
                                              "compute_util", "bw_util",  "waves",
                                              "quantized_ctas"};

struct KernelRow {
    std::vector<std::string> cells;
    std::vector<TraceEvent> trace;
};

KernelRow run_kernel_point(const GpuSpec& gpu, const HybridBatchSpec& batch,
                           const ExecutionStrategy& strat, int split_wave_cap, uint64_t seed,
                           bool record_trace) {
    TileConfig cfg = select_tile_config(batch, gpu);
    if (split_wave_cap > 0) cfg.split_wave_cap = split_wave_cap;
    auto launches = make_attention_launches(decompose_hybrid(batch, gpu, cfg));
    SimOptions opt;
    opt.record_trace = record_trace;
    auto r = simulate(gpu, launches, strat, seed, opt);
    KernelRow row;
    row.cells = {"",
                 strat.name(),
                 strat.policy_name(),
                 std::to_string(cfg.ctas_per_sm),
                 CsvWriter::num(r.makespan),
                 CsvWriter::num(oracle_runtime(gpu, launches)),
                 CsvWriter::num(r.compute_utilization),
                 CsvWriter::num(r.bandwidth_utilization),
                 std::to_string(r.waves_used),
                 std::to_string(r.quantized_ctas)};
    row.trace = std::move(r.trace);
    return row;
}

int cmd_kernel_sim(const ExperimentConfig& cfg, bool trace, int threads) {
    if (!cfg.kernel_sim) throw ConfigError("config has no 'kernel_sim' section");
    const auto& kc = *cfg.kernel_sim;
    auto strategies = build_strategies(kc.strategies, kc.policies, kc.segments);

    std::vector<HybridBatchSpec> batches;
    if (kc.experiment == "chunk_sweep") {
        const long n_chunks = ceil_div(kc.prompt_tokens, kc.chunk_size);
        for (long c = 0; c < n_chunks; ++c)
            for (long bs : kc.decode_batch_sizes) {
                HybridBatchSpec b;
                b.shape = cfg.shape;
                b.prefill = PrefillSpec{std::min(kc.chunk_size, kc.prompt_tokens - c * kc.chunk_size),
                                        kc.prompt_tokens, c * kc.chunk_size};
                b.decodes.assign(bs, {kc.decode_context});
                batches.push_back(b);
            }
    } else {
        for (long ctx : kc.context_lens)
            for (long chunk : kc.chunk_sizes) {
                if (chunk > ctx) continue;
                for (long bs : kc.decode_batch_sizes) {
                    HybridBatchSpec b;
                    b.shape = cfg.shape;
                    b.prefill = PrefillSpec{chunk, ctx, ctx - chunk};
                    b.decodes.assign(bs, {ctx});
                    batches.push_back(b);
                }
            }
    }

    std::vector<std::vector<KernelRow>> results(batches.size());
    parallel_for(batches.size(), threads, [&](size_t i) {
        for (const auto& s : strategies)
            results[i].push_back(
                run_kernel_point(cfg.gpu, batches[i], s, kc.split_wave_cap, cfg.seed, trace));
    });

    CsvWriter csv(kKernelCols);
    CsvWriter trace_csv({"run_id", "time", "sm_id", "event", "task_id", "op"});
    long run_id = 0;
    for (auto& batch_rows : results)
        for (auto& row : batch_rows) {
            row.cells[0] = std::to_string(run_id);
            csv.row(row.cells);
            if (trace)
                for (const auto& ev : row.trace)
                    trace_csv.row({std::to_string(run_id), CsvWriter::num(ev.time),
                                   std::to_string(ev.sm), std::string(1, ev.kind),
                                   std::to_string(ev.task), op_name(ev.op)});
            run_id++;
        }
    csv.write(cfg.out);
    if (trace) trace_csv.write(cfg.out + ".trace.csv");
    std::cout << "wrote " << run_id << " rows to " << cfg.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// microbench
// ---------------------------------------------------------------------------

int cmd_microbench(const ExperimentConfig& cfg) {
    if (!cfg.microbench) throw ConfigError("config has no 'microbench' section");
    const auto& mc = *cfg.microbench;
    auto strategies = build_strategies(mc.strategies, {"5050"}, mc.segments);
    CsvWriter csv({"compute_iters", "strategy", "makespan", "oracle"});
    SimOptions opt;
    opt.record_trace = false;
    for (long iters : mc.compute_iters) {
        auto [ck, mk] = make_microbench(iters, mc.array_len, cfg.gpu);
        std::vector<KernelLaunch> launches{ck, mk};
        const double oracle = oracle_runtime(cfg.gpu, launches);
        for (const auto& s : strategies) {
            auto r = simulate(cfg.gpu, launches, s, cfg.seed, opt);
            csv.row({std::to_string(iters), s.name(), CsvWriter::num(r.makespan),
                     CsvWriter::num(oracle)});
        }
    }
    csv.write(cfg.out);
    std::cout << "wrote microbench sweep to " << cfg.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// serve-sim
// ---------------------------------------------------------------------------

int cmd_serve_sim(const ExperimentConfig& cfg, bool trace, int threads) {
    if (!cfg.serve) throw ConfigError("config has no 'serve' section");
    const auto& sc = *cfg.serve;

    IterationCostModel cost(cfg.gpu, sc.w_fixed, sc.w_tok);
    HybridBatchSpec ref;
    ref.shape = cfg.shape;
    ref.decodes.assign(sc.reference_decode_batch, {sc.reference_decode_context});
    const double ms_per_unit = sc.reference_ms / cost(ref, false);
    std::vector<double> thresholds_units;
    for (double ms : sc.stall_thresholds_ms) thresholds_units.push_back(ms / ms_per_unit);

    struct Combo {
        double qps;
        std::string policy;
        bool fused;
    };
    std::vector<Combo> combos;
    for (double q : sc.qps)
        for (const auto& p : sc.policies)
            for (bool f : sc.fused) combos.push_back({q, p, f});

    std::vector<std::vector<std::string>> rows(combos.size());
    std::vector<std::string> iter_dumps(combos.size());
    parallel_for(combos.size(), threads, [&](size_t i) {
        const auto& combo = combos[i];
        auto trace_reqs = generate_trace(combo.qps, sc.num_requests, sc.prefill_dist.to_dist(),
                                         sc.decode_dist.to_dist(), cfg.seed);
        SchedulerPolicy pol = combo.policy == "prefill_prioritized"
                                  ? SchedulerPolicy::prefill_prioritized()
                                  : SchedulerPolicy::chunked_hybrid(sc.chunk_size, sc.max_batch,
                                                                    sc.token_budget);
        IterationCostModel local_cost(cfg.gpu, sc.w_fixed, sc.w_tok);
        auto res = run_serving(trace_reqs, pol, local_cost, combo.fused, cfg.shape,
                               thresholds_units);
        const auto& m = res.metrics;
        rows[i] = {CsvWriter::num(combo.qps),
                   pol.name(),
                   combo.fused ? "1" : "0",
                   std::to_string(pol.kind == SchedulerPolicy::Kind::ChunkedHybrid ? sc.chunk_size
                                                                                   : 0L),
                   CsvWriter::num(m.ttft_p50 * ms_per_unit),
                   CsvWriter::num(m.ttft_p99 * ms_per_unit),
                   CsvWriter::num(m.tbt_p50 * ms_per_unit),
                   CsvWriter::num(m.tbt_p99 * ms_per_unit),
                   CsvWriter::num(m.latency_p50 * ms_per_unit),
                   CsvWriter::num(m.latency_p99 * ms_per_unit),
                   CsvWriter::num(m.stall_pct_at[0].second),
                   CsvWriter::num(m.stall_pct_at.size() > 1 ? m.stall_pct_at[1].second : 0.0),
                   CsvWriter::num(m.throughput / ms_per_unit * 1000.0)};
        if (trace) {
            CsvWriter it({"iter", "t_start_ms", "t_end_ms", "prefill_request", "prefill_tokens",
                          "decode_requests"});
            long n = 0;
            for (const auto& rec : res.iterations)
                it.row({std::to_string(n++), CsvWriter::num(rec.t_start * ms_per_unit),
                        CsvWriter::num(rec.t_end * ms_per_unit),
                        std::to_string(rec.prefill_request), std::to_string(rec.prefill_tokens),
                        std::to_string(rec.decode_requests)});
            iter_dumps[i] = it.str();
        }
    });

    CsvWriter csv({"qps", "policy", "fused", "chunk_size", "ttft_p50", "ttft_p99", "tbt_p50",
                   "tbt_p99", "lat_p50", "lat_p99", "stall200", "stall500", "throughput"});
    for (const auto& r : rows) csv.row(r);
    csv.write(cfg.out);
    if (trace) {
        std::string all;
        for (size_t i = 0; i < combos.size(); ++i) {
            all += "# combo qps=" + CsvWriter::num(combos[i].qps) + " policy=" + combos[i].policy +
                   " fused=" + (combos[i].fused ? std::string("1") : std::string("0")) + "\n";
            all += iter_dumps[i];
        }
        std::ofstream out(cfg.out + ".iters.csv", std::ios::binary);
        out << all;
    }
    std::cout << "wrote " << rows.size() << " rows to " << cfg.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hybrid-batch attention fusion simulator"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_override;
    std::string strategies_override;
    uint64_t seed_override = 0;
    bool have_seed = false;
    bool trace = false;
    int threads = 1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config file (JSON)")->required();
        sub->add_option("--out", out_override, "output CSV path");
        sub->add_option("--seed", seed_override, "seed override")->each([&](const std::string&) {
            have_seed = true;
        });
        sub->add_option("--strategies", strategies_override,
                        "comma-separated strategy list override");
        sub->add_flag("--trace", trace, "dump event / iteration trace");
        sub->add_option("--threads", threads, "sweep worker threads");
    };

    CLI::App* verify = app.add_subcommand("attn-verify", "run attention property suites");
    CLI::App* kernel = app.add_subcommand("kernel-sim", "simulate hybrid attention kernels");
    CLI::App* micro = app.add_subcommand("microbench", "fusion micro-benchmark sweep");
    CLI::App* serve = app.add_subcommand("serve-sim", "request-level serving simulation");
    for (auto* sub : {verify, kernel, micro, serve}) add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        ExperimentConfig cfg = ExperimentConfig::load(config_path);
        if (have_seed) cfg.seed = seed_override;
        if (!out_override.empty()) cfg.out = out_override;
        if (!strategies_override.empty()) {
            auto names = split_csv(strategies_override);
            if (cfg.kernel_sim) cfg.kernel_sim->strategies = names;
            if (cfg.microbench) cfg.microbench->strategies = names;
        }
        std::cout << "resolved-config: " << cfg.to_json().dump() << "\n";

        if (verify->parsed()) return cmd_attn_verify(cfg);
        if (kernel->parsed()) return cmd_kernel_sim(cfg, trace, threads);
        if (micro->parsed()) return cmd_microbench(cfg);
        if (serve->parsed()) return cmd_serve_sim(cfg, trace, threads);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
